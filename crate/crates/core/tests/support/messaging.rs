//! Message-layer fault and ordering harnesses.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use jungle::msglayer::{Member, MsgEndpoint, Registry, RegistryConfig};
use jungle::netsim::{Fabric, FabricNode, FabricSpec, LinkPolicy, Rule};
use jungle::overlay::{Overlay, OverlayConfig, Strategy};
use rand::Rng;

const T: Duration = Duration::from_secs(5);

/// A host and three firewalled sites with the given link latencies.
pub fn three_sites(latency: [u64; 3]) -> Overlay {
    let mut nodes = vec![FabricNode::standalone("host")];
    let mut policies = Vec::new();
    for (s, lat) in latency.iter().enumerate() {
        let site = format!("s{s}");
        nodes.push(FabricNode::frontend(&format!("{site}-fe"), &site));
        nodes.push(FabricNode::compute(&format!("{site}-n0"), &site, false));
        nodes.push(FabricNode::compute(&format!("{site}-n1"), &site, false));
        policies.push(LinkPolicy::new(&format!("@{site}"), &format!("@{site}"), Rule::Allow, 0).unwrap());
        policies.push(LinkPolicy::new(&format!("!@{site}"), &format!("@{site}"), Rule::DenyInbound, *lat).unwrap());
        policies.push(LinkPolicy::new(&format!("@{site}"), "*", Rule::Allow, *lat).unwrap());
    }
    let fabric = Fabric::new(FabricSpec {
        nodes,
        policies,
        default_latency: 1,
    })
    .unwrap();
    let ov = Overlay::new(fabric, OverlayConfig::default());
    ov.start_hub("host").unwrap();
    for s in 0..3 {
        let fe = format!("s{s}-fe");
        ov.start_hub(&fe).unwrap();
        ov.link_hubs("host", &fe).unwrap();
    }
    ov.converge();
    ov
}

fn endpoint(ov: &Overlay, node: &str, hub: &str, name: &str) -> MsgEndpoint {
    let ep = ov.fabric().spawn_process(node).unwrap();
    MsgEndpoint::attach(ov, &ep, hub, name).unwrap()
}

/// Sends `total` messages from six senders, spread over every site and
/// interleaved at random, to one receive port behind a firewall. Checks
/// that each sender's messages arrive once each, in order. Returns the
/// routes the senders used.
pub fn fifo_exactly_once(rng: &mut impl Rng, total: usize) -> Result<Vec<Strategy>, String> {
    let lat = [rng.random_range(1..20), rng.random_range(1..20), rng.random_range(1..20)];
    let ov = three_sites(lat);
    let rx = endpoint(&ov, "s0-n0", "s0-fe", "rx");
    let port = rx.receive_port("in");
    let places = [("host", "host"), ("s0-n1", "s0-fe"), ("s1-n0", "s1-fe"), ("s1-fe", "s1-fe"), ("s2-n1", "s2-fe"), ("s2-n0", "host")];
    let mut senders = Vec::new();
    let mut routes = Vec::new();
    for (i, (node, hub)) in places.iter().enumerate() {
        let ep = endpoint(&ov, node, hub, &format!("tx{i}"));
        let mut sp = ep.send_port("out");
        routes.push(sp.connect(rx.address(), "in").map_err(|e| e.to_string())?.strategy);
        senders.push((ep, sp));
    }
    let mut sent = vec![0u64; senders.len()];
    let mut received = 0usize;
    let mut next: BTreeMap<String, u64> = BTreeMap::new();
    let mut check = |m: jungle::msglayer::Message| -> Result<(), String> {
        let want = next.entry(m.from.client_id.clone()).or_insert(0);
        let k = u64::from_le_bytes(m.payload[..8].try_into().unwrap());
        if m.seq != *want || k != *want {
            return Err(format!("{}: expected #{want}, got seq {} payload #{k}", m.from.client_id, m.seq));
        }
        if m.payload.len() != 8 + (k as usize % 97) {
            return Err(format!("{}: message #{k} has the wrong length", m.from.client_id));
        }
        *want += 1;
        Ok(())
    };
    for _ in 0..total {
        let s = rng.random_range(0..senders.len());
        let k = sent[s];
        let mut payload = k.to_le_bytes().to_vec();
        payload.resize(8 + (k as usize % 97), s as u8);
        senders[s].1.write(&payload).map_err(|e| e.to_string())?;
        sent[s] += 1;
        // drain now and then so reads interleave with writes
        if rng.random_bool(0.2) {
            while let Some(m) = port.try_read().map_err(|e| e.to_string())? {
                check(m)?;
                received += 1;
            }
        }
    }
    while received < total {
        check(port.read(T).map_err(|e| format!("after {received} of {total}: {e}"))?)?;
        received += 1;
    }
    if let Some(m) = port.try_read().map_err(|e| e.to_string())? {
        return Err(format!("duplicate or stray message from {}", m.from.client_id));
    }
    for (i, n) in sent.iter().enumerate() {
        if next.get(&format!("tx{i}")).copied().unwrap_or(0) != *n {
            return Err(format!("tx{i}: sent {n}, received {:?}", next.get(&format!("tx{i}"))));
        }
    }
    Ok(routes)
}

pub struct Detection {
    pub worst: Duration,
    pub timeout: Duration,
    pub detected: usize,
}

/// Joins a member, severs its process and times how long an observer takes
/// to learn that it died, `rounds` times over. The configured timeout is the
/// registry period times the missed-beat allowance.
pub fn died_detection(rounds: usize, period: Duration) -> Result<Detection, String> {
    let ov = three_sites([3, 5, 7]);
    let config = RegistryConfig::default();
    let timeout = period * config.missed_beats;
    let reg_ep = ov.fabric().spawn_process("host").unwrap();
    let reg = Registry::start(&ov, &reg_ep, "host", "pool", config).map_err(|e| e.to_string())?;
    let ticker = reg.spawn(period);
    let stop = Arc::new(AtomicBool::new(false));
    let obs_ep = endpoint(&ov, "host", "host", "observer");
    let observer = Arc::new(Member::join(&obs_ep, reg.address()).map_err(|e| e.to_string())?);
    let obs_thread = observer.spawn(period / 2, stop.clone());
    let view = observer.view();

    let mut result = Detection {
        worst: Duration::ZERO,
        timeout,
        detected: 0,
    };
    let mut threads = Vec::new();
    for i in 0..rounds {
        let site = i % 3;
        let ep = endpoint(&ov, &format!("s{site}-n{}", i % 2), &format!("s{site}-fe"), &format!("victim{i}"));
        let member = Arc::new(Member::join(&ep, reg.address()).map_err(|e| e.to_string())?);
        threads.push(member.spawn(period / 2, stop.clone()));
        let id = member.id().to_string();
        let joined = Instant::now() + Duration::from_secs(5);
        while !view.live().contains(&id) {
            if Instant::now() > joined {
                return Err(format!("{id} never joined"));
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        let severed = Instant::now();
        ov.fabric().sever_process(ep.endpoint().process);
        let dead = view.wait_dead(&id, timeout);
        let took = severed.elapsed();
        if dead {
            result.detected += 1;
        }
        result.worst = result.worst.max(took);
    }
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    reg.stop();
    let _ = ticker.join();
    let _ = obs_thread.join();
    for t in threads {
        let _ = t.join();
    }
    Ok(result)
}
