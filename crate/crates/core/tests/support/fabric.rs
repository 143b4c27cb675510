//! Random fabrics and a brute-force reachability oracle.
//!
//! The oracle re-derives link establishment from the policy list on its own
//! and searches the hub graph exhaustively; it shares no code with the
//! overlay's connection setup.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use jungle::netsim::{Fabric, FabricNode, FabricSpec, LinkPolicy, Rule};
use jungle::overlay::{Overlay, OverlayConfig, Strategy, VirtualAddress};
use rand::seq::IndexedRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Plan {
    pub nodes: Vec<FabricNode>,
    pub policies: Vec<(String, String, Rule)>,
    pub hubs: Vec<String>,
    /// Hub pairs a link is attempted between.
    pub links: Vec<(String, String)>,
    /// (client node, home hub)
    pub clients: Vec<(String, String)>,
}

impl Plan {
    /// Up to `max_sites` resources with 1-3 compute nodes each, a few
    /// standalone machines and up to ten random policies.
    pub fn random(rng: &mut impl Rng, max_sites: usize) -> Plan {
        let mut nodes = vec![FabricNode::standalone("host")];
        let sites = rng.random_range(1..=max_sites);
        for s in 0..sites {
            let site = format!("s{s}");
            nodes.push(FabricNode::frontend(&format!("{site}-fe"), &site));
            for n in 0..rng.random_range(1..=3) {
                nodes.push(FabricNode::compute(&format!("{site}-n{n}"), &site, rng.random_bool(0.3)));
            }
        }
        for x in 0..rng.random_range(0..=2) {
            nodes.push(FabricNode::standalone(&format!("x{x}")));
        }

        let pattern = |rng: &mut dyn rand::RngCore| -> String {
            match rng.random_range(0..4) {
                0 => "*".into(),
                1 => nodes.choose(rng).unwrap().id.clone(),
                2 => format!("@s{}", rng.random_range(0..sites)),
                _ => format!("!@s{}", rng.random_range(0..sites)),
            }
        };
        let mut policies = Vec::new();
        for _ in 0..rng.random_range(0..=10) {
            let rule = match rng.random_range(0..3) {
                0 => Rule::Allow,
                1 => Rule::DenyInbound,
                _ => Rule::DenyAll,
            };
            let from = pattern(rng);
            let to = pattern(rng);
            policies.push((from, to, rule));
        }

        let mut hubs = vec!["host".to_string()];
        for n in nodes.iter().skip(1) {
            if n.addressable && rng.random_bool(0.7) {
                hubs.push(n.id.clone());
            }
        }
        let mut links = Vec::new();
        for (i, a) in hubs.iter().enumerate() {
            for b in &hubs[i + 1..] {
                if rng.random_bool(0.5) {
                    links.push((a.clone(), b.clone()));
                }
            }
        }
        let mut clients = Vec::new();
        for _ in 0..rng.random_range(2..=6) {
            let node = nodes.choose(rng).unwrap().id.clone();
            let hub = hubs.choose(rng).unwrap().clone();
            clients.push((node, hub));
        }
        Plan {
            nodes,
            policies,
            hubs,
            links,
            clients,
        }
    }

    pub fn spec(&self) -> FabricSpec {
        FabricSpec {
            nodes: self.nodes.clone(),
            policies: self
                .policies
                .iter()
                .enumerate()
                .map(|(i, (f, t, r))| LinkPolicy::new(f, t, *r, 1 + i as u64 % 4).unwrap())
                .collect(),
            default_latency: 1,
        }
    }

    fn node(&self, id: &str) -> &FabricNode {
        self.nodes.iter().find(|n| n.id == id).unwrap()
    }

    fn matches(pattern: &str, n: &FabricNode) -> bool {
        let site = n.site.as_deref();
        if pattern == "*" {
            true
        } else if let Some(s) = pattern.strip_prefix("!@") {
            site != Some(s)
        } else if let Some(s) = pattern.strip_prefix('@') {
            site == Some(s)
        } else {
            pattern == n.id
        }
    }

    /// Whether `from` may open a connection to `to`.
    pub fn establish(&self, from: &str, to: &str) -> bool {
        if from == to {
            return true;
        }
        let (a, b) = (self.node(from), self.node(to));
        let same_site = a.site.is_some() && a.site == b.site;
        if !b.addressable && !same_site {
            return false;
        }
        for (f, t, rule) in &self.policies {
            let forward = Self::matches(f, a) && Self::matches(t, b);
            let backward = Self::matches(f, b) && Self::matches(t, a);
            let applies = match rule {
                Rule::DenyAll => forward || backward,
                _ => forward,
            };
            if applies {
                return *rule == Rule::Allow;
            }
        }
        true
    }

    /// Hub links that can exist: attempted, and dialable one way or the other.
    pub fn hub_edges(&self) -> Vec<(String, String)> {
        self.links
            .iter()
            .filter(|(a, b)| self.establish(a, b) || self.establish(b, a))
            .cloned()
            .collect()
    }

    /// Every hub reachable from `hub` over possible links.
    pub fn hub_component(&self, hub: &str) -> BTreeSet<String> {
        let edges = self.hub_edges();
        let mut seen = BTreeSet::from([hub.to_string()]);
        loop {
            let before = seen.len();
            for (a, b) in &edges {
                if seen.contains(a) || seen.contains(b) {
                    seen.insert(a.clone());
                    seen.insert(b.clone());
                }
            }
            if seen.len() == before {
                return seen;
            }
        }
    }

    /// The strategy a connection must end up with, or `None` if no path
    /// exists. Clients are `(node, home hub)`.
    pub fn expected(&self, src: &(String, String), dst: &(String, String)) -> Option<Strategy> {
        if self.establish(&src.0, &dst.0) {
            return Some(Strategy::Direct);
        }
        if !self.hub_component(&src.1).contains(&dst.1) {
            return None;
        }
        if self.establish(&dst.0, &src.0) {
            Some(Strategy::Reverse)
        } else {
            Some(Strategy::Routed)
        }
    }
}

pub struct Built {
    pub overlay: Overlay,
    /// Attached clients, by index into the plan's client list.
    pub clients: BTreeMap<usize, VirtualAddress>,
    /// Connections handed to listeners; kept so they stay open.
    pub inbox: Arc<Mutex<Vec<jungle::overlay::Connection>>>,
}

/// Builds the overlay for `plan`, checking hub links and client attachment
/// against the oracle on the way.
pub fn build(plan: &Plan) -> Result<Built, String> {
    let fabric = Fabric::new(plan.spec()).map_err(|e| e.to_string())?;
    let overlay = Overlay::new(fabric, OverlayConfig::default());
    for h in &plan.hubs {
        overlay.start_hub(h).map_err(|e| e.to_string())?;
    }
    for (a, b) in &plan.links {
        let want = plan.establish(a, b) || plan.establish(b, a);
        let got = overlay.link_hubs(a, b).is_ok();
        if want != got {
            return Err(format!("link {a}-{b}: oracle {want}, overlay {got}"));
        }
    }
    overlay.converge();
    let inbox: Arc<Mutex<Vec<jungle::overlay::Connection>>> = Arc::default();
    let mut clients = BTreeMap::new();
    for (i, (node, hub)) in plan.clients.iter().enumerate() {
        let ep = overlay.fabric().spawn_process(node).map_err(|e| e.to_string())?;
        let want = plan.establish(node, hub);
        match overlay.attach(&ep, hub, &format!("c{i}")) {
            Ok(addr) => {
                if !want {
                    return Err(format!("client on {node} attached to {hub} against the policy"));
                }
                let sink = inbox.clone();
                overlay
                    .listen(&addr, Arc::new(move |c, _| sink.lock().unwrap().push(c)))
                    .map_err(|e| e.to_string())?;
                clients.insert(i, addr);
            }
            Err(e) if want => return Err(format!("client on {node} failed to attach to {hub}: {e}")),
            Err(_) => {}
        }
    }
    Ok(Built { overlay, clients, inbox })
}

/// Outcomes seen: direct, reverse, routed, no route.
pub type Tally = [usize; 4];

/// Connects every ordered pair of attached clients and compares each
/// outcome with the oracle.
pub fn check_all_pairs(plan: &Plan) -> Result<Tally, String> {
    let built = build(plan)?;
    let mut tally = [0; 4];
    for (&i, a) in &built.clients {
        for (&j, b) in &built.clients {
            if i == j {
                continue;
            }
            let want = plan.expected(&plan.clients[i], &plan.clients[j]);
            let got = built.overlay.smart_connect(a, b, "t").map(|c| c.route().strategy);
            match (want, &got) {
                (Some(w), Ok(g)) if w == *g => {}
                (None, Err(_)) => {}
                _ => {
                    return Err(format!(
                        "{:?} -> {:?}: oracle {want:?}, overlay {:?}\npolicies {:?}\nlinks {:?}",
                        plan.clients[i],
                        plan.clients[j],
                        got.map_err(|e| e.to_string()),
                        plan.policies,
                        plan.links
                    ))
                }
            }
            tally[match want {
                Some(Strategy::Direct) => 0,
                Some(Strategy::Reverse) => 1,
                Some(Strategy::Routed) => 2,
                None => 3,
            }] += 1;
        }
    }
    Ok(tally)
}
