//! Pipelined calls: every reply reaches its own caller, once.

use std::sync::OnceLock;

use jungle::coupler::{ChannelKind, Coupler, CouplerError, Daemon, DaemonConfig, Value, Worker, WorkerRequest};
use jungle::deploy::ResourceSpec;
use jungle::netsim::{FabricNode, FabricSpec, LinkPolicy, Rule};
use jungle::units::UnitRegistry;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
enum Call {
    Int(i32),
    Long(i64),
    Str(String),
    Fail(String),
}

fn call() -> impl Strategy<Value = Call> {
    prop_oneof![
        4 => any::<i32>().prop_map(Call::Int),
        2 => any::<i64>().prop_map(Call::Long),
        1 => "[a-z ]{0,12}".prop_map(Call::Str),
        1 => "[a-z]{1,8}".prop_map(Call::Fail),
    ]
}

fn issue(w: &Worker, c: &Call) -> jungle::coupler::PendingCall {
    match c {
        Call::Int(v) => w.call_async("echo_int", &[Value::Int(vec![*v])]),
        Call::Long(v) => w.call_async("echo_long", &[Value::Long(vec![*v])]),
        Call::Str(s) => w.call_async("echo_string", &[Value::Str(vec![s.clone()])]),
        Call::Fail(s) => w.call_async("fail", &[Value::Str(vec![s.clone()])]),
    }
    .unwrap()
}

fn expected(c: &Call) -> Result<Vec<Value>, CouplerError> {
    match c {
        Call::Int(v) => Ok(vec![Value::Int(vec![*v])]),
        Call::Long(v) => Ok(vec![Value::Long(vec![*v])]),
        Call::Str(s) => Ok(vec![Value::Str(vec![s.clone()])]),
        Call::Fail(s) => Err(CouplerError::RemoteError(s.clone())),
    }
}

/// Issues every call before collecting any reply, collects in a shuffled
/// order, and checks each reply against its own call.
fn pipeline(w: &Worker, calls: &[Call], seed: u64) -> Result<(), String> {
    let before = w.stats().calls;
    let mut pending: Vec<_> = calls.iter().map(|c| (c, issue(w, c))).collect();
    pending.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (i, (c, p)) in pending.into_iter().enumerate() {
        let got = p.wait_timeout(std::time::Duration::from_secs(30));
        if got != expected(c) {
            return Err(format!("reply {i}: {c:?} gave {got:?}"));
        }
    }
    let done = w.stats().calls - before;
    if done != calls.len() as u64 {
        return Err(format!("{} calls issued, {done} completed", calls.len()));
    }
    Ok(())
}

fn inproc() -> Worker {
    Coupler::new(UnitRegistry::with_defaults())
        .create_worker(&WorkerRequest {
            name: "t".into(),
            kernel: "test".into(),
            resource: "local".into(),
            nodes: 1,
            channel: ChannelKind::Inproc,
        })
        .unwrap()
}

struct Remote {
    _dir: tempfile::TempDir,
    _daemon: Daemon,
    _coupler: Coupler,
    worker: Worker,
}

/// One daemon and one worker behind a firewall, shared by every case.
fn remote() -> &'static Remote {
    static R: OnceLock<Remote> = OnceLock::new();
    R.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("install")).unwrap();
        let fabric = FabricSpec {
            nodes: vec![
                FabricNode::standalone("laptop"),
                FabricNode::frontend("cl-fe", "cl"),
                FabricNode::compute("cl-n0", "cl", false),
            ],
            policies: vec![LinkPolicy::new("!@cl", "@cl", Rule::DenyInbound, 2).unwrap()],
            default_latency: 1,
        };
        let resources = vec![
            ResourceSpec {
                install_path: "install".into(),
                ..ResourceSpec::new("local", "local", "laptop", 1)
            },
            ResourceSpec {
                install_path: "install".into(),
                compute_nodes: vec!["cl-n0".into()],
                ..ResourceSpec::new("cl", "simsched", "cl-fe", 1)
            },
        ];
        let cfg = DaemonConfig::new(fabric, "laptop", resources, dir.path().to_path_buf(), dir.path().join("out"));
        let daemon = Daemon::start(cfg).unwrap();
        let coupler = Coupler::new(UnitRegistry::with_defaults()).connect(&daemon.endpoint()).unwrap();
        let worker = coupler
            .create_worker(&WorkerRequest {
                name: "t".into(),
                kernel: "test".into(),
                resource: "cl".into(),
                nodes: 1,
                channel: ChannelKind::Ibis,
            })
            .unwrap();
        Remote {
            _dir: dir,
            _daemon: daemon,
            _coupler: coupler,
            worker,
        }
    })
}

fn ten_thousand() -> Vec<Call> {
    (0..10_000)
        .map(|i| match i % 7 {
            0 => Call::Fail(format!("e{i}")),
            1 | 2 => Call::Long(i as i64 * 1_000_003),
            3 => Call::Str(format!("s{i}")),
            _ => Call::Int(i),
        })
        .collect()
}

#[test]
fn ten_thousand_pipelined_calls_inproc() {
    pipeline(&inproc(), &ten_thousand(), 1).unwrap();
}

#[test]
fn ten_thousand_pipelined_calls_through_the_daemon() {
    pipeline(&remote().worker, &ten_thousand(), 2).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn replies_match_their_calls_inproc(calls in prop::collection::vec(call(), 1..2000), seed in any::<u64>()) {
        pipeline(&inproc(), &calls, seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn replies_match_their_calls_remotely(calls in prop::collection::vec(call(), 1..500), seed in any::<u64>()) {
        pipeline(&remote().worker, &calls, seed).map_err(TestCaseError::fail)?;
    }
}
