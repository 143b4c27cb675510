use std::time::Duration;

use jungle::coupler::status::WorkerState;
use jungle::coupler::{ChannelKind, Coupler, CouplerError, Daemon, DaemonConfig, Value, WorkerRequest};
use jungle::deploy::{JobState, ResourceSpec};
use jungle::msglayer::EventKind;
use jungle::netsim::{FabricNode, FabricSpec, LinkPolicy, Rule};
use jungle::overlay::Strategy;
use jungle::units::UnitRegistry;

struct World {
    _dir: tempfile::TempDir,
    daemon: Daemon,
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("install")).unwrap();
    let mut nodes = vec![FabricNode::standalone("laptop"), FabricNode::frontend("cl-fe", "cl")];
    nodes.extend((0..2).map(|i| FabricNode::compute(&format!("cl-n{i}"), "cl", false)));
    let fabric = FabricSpec {
        nodes,
        policies: vec![LinkPolicy::new("!@cl", "@cl", Rule::DenyInbound, 3).unwrap()],
        default_latency: 1,
    };
    let local = ResourceSpec {
        install_path: "install".into(),
        ..ResourceSpec::new("local", "local", "laptop", 4)
    };
    let cluster = ResourceSpec {
        install_path: "install".into(),
        compute_nodes: vec!["cl-n0".into(), "cl-n1".into()],
        ..ResourceSpec::new("cl", "simsched", "cl-fe", 2)
    };
    let cfg = DaemonConfig::new(
        fabric,
        "laptop",
        vec![local, cluster],
        dir.path().to_path_buf(),
        dir.path().join("out"),
    );
    let daemon = Daemon::start(cfg).unwrap();
    World { _dir: dir, daemon }
}

fn request(kernel: &str, resource: &str) -> WorkerRequest {
    WorkerRequest {
        name: kernel.into(),
        kernel: kernel.into(),
        resource: resource.into(),
        nodes: 1,
        channel: ChannelKind::Ibis,
    }
}

fn coupler(d: &Daemon) -> Coupler {
    Coupler::new(UnitRegistry::with_defaults()).connect(&d.endpoint()).unwrap()
}

#[test]
fn calls_round_trip_through_a_firewalled_resource() {
    let w = world();
    let c = coupler(&w.daemon);
    let worker = c.create_worker(&request("test", "cl")).unwrap();
    assert_ne!(worker.info().route.as_ref().unwrap().strategy, Strategy::Direct);
    let out = worker.call("echo_string", &[Value::Str(vec!["hi".into(), "there".into()])]).unwrap();
    assert_eq!(out[0], Value::Str(vec!["hi".into(), "there".into()]));
    let err = worker.call("fail", &[Value::Str(vec!["bad input".into()])]).unwrap_err();
    assert_eq!(err, CouplerError::RemoteError("bad input".into()));

    // pipelined calls resolve once each, to the right caller
    let pending: Vec<_> = (0..50)
        .map(|i| worker.call_async("echo_int", &[Value::Int(vec![i])]).unwrap())
        .collect();
    for (i, p) in pending.into_iter().enumerate() {
        assert_eq!(p.wait().unwrap()[0], Value::Int(vec![i as i32]));
    }

    let status = c.daemon().unwrap().status().unwrap();
    assert!(status.has_indirect_route());
    let ws = &status.workers[0];
    assert_eq!(ws.calls, 52);
    assert_eq!(ws.state, WorkerState::Live);
    worker.release().unwrap();
    let status = c.daemon().unwrap().status().unwrap();
    assert_eq!(status.jobs[0].state, JobState::Done);
    assert!(status.membership.iter().any(|e| e.kind == EventKind::Left));
    w.daemon.stop();
}

#[test]
fn killed_worker_fails_pending_calls() {
    let w = world();
    let c = coupler(&w.daemon);
    let worker = c.create_worker(&request("test", "local")).unwrap();
    let slow = worker.call_async("sleep", &[Value::Int(vec![2000])]).unwrap();
    std::thread::sleep(Duration::from_millis(100));
    c.daemon().unwrap().kill_worker(worker.info().id).unwrap();
    let err = slow.wait_timeout(Duration::from_secs(10)).unwrap_err();
    assert!(matches!(err, CouplerError::WorkerDied(_)), "{err}");
    // later calls fail fast
    let err = worker.call("echo_int", &[Value::Int(vec![1])]).unwrap_err();
    assert!(matches!(err, CouplerError::WorkerDied(_)), "{err}");
    let status = c.daemon().unwrap().status().unwrap();
    assert!(status.membership.iter().any(|e| e.kind == EventKind::Died), "{}", status.to_json());
    w.daemon.stop();
}

#[test]
fn launch_errors() {
    let w = world();
    let c = coupler(&w.daemon);
    let err = c.create_worker(&request("fluid", "local")).unwrap_err();
    assert_eq!(err, CouplerError::KernelUnknown("fluid".into()));
    let err = c.create_worker(&request("test", "moon")).unwrap_err();
    assert_eq!(err, CouplerError::UnknownResource("moon".into()));
    let mut big = request("test", "cl");
    big.nodes = 5;
    assert!(matches!(c.create_worker(&big), Err(CouplerError::LaunchFailed(_))));
    w.daemon.stop();
}

#[test]
fn endpoint_in_use() {
    let w = world();
    let mut cfg = DaemonConfig::new(
        FabricSpec {
            nodes: vec![FabricNode::standalone("laptop")],
            policies: vec![],
            default_latency: 1,
        },
        "laptop",
        vec![],
        ".".into(),
        "out".into(),
    );
    cfg.listen = w.daemon.endpoint();
    assert!(matches!(Daemon::start(cfg), Err(CouplerError::PortInUse(_))));
    w.daemon.stop();
}

#[test]
fn two_simulations_share_a_daemon_and_stop_drains_the_pool() {
    let w = world();
    let a = coupler(&w.daemon);
    let b = coupler(&w.daemon);
    let wa = a.create_worker(&request("test", "local")).unwrap();
    let wb = b.create_worker(&request("test", "cl")).unwrap();
    assert_eq!(wa.call("echo_long", &[Value::Long(vec![7])]).unwrap()[0], Value::Long(vec![7]));
    assert_eq!(wb.call("echo_long", &[Value::Long(vec![8])]).unwrap()[0], Value::Long(vec![8]));
    a.daemon().unwrap().stop().unwrap();
    w.daemon.join();
    let status = w.daemon.status();
    assert!(status.jobs.iter().all(|j| j.state.is_terminal()), "{:?}", status.jobs);
    assert_eq!(w.daemon.registry().members(), Vec::<String>::new());
    assert!(wa.call("echo_long", &[Value::Long(vec![1])]).is_err());
}
