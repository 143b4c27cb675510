//! In-process model of a hostile wide-area network.
//!
//! A [`Fabric`] holds nodes, ordered link policies and a logical clock
//! counted in ticks (one tick reads as one millisecond in reports). Dialling
//! yields a bidirectional, ordered, exactly-once byte conduit whose chunks
//! become readable `latency` ticks after they were sent. A blocking read of a
//! chunk that is still in flight advances the clock to its delivery time, so
//! latency costs logical time rather than wall time.
//!
//! Firewalls are modelled as policies on connection *establishment*: once a
//! conduit exists, data flows both ways regardless of direction rules.
//! Non-addressable nodes cannot be dialled from outside their own site.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Tick = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("connection from `{from}` to `{to}` refused")]
    EstablishRefused { from: String, to: String },
    #[error("conduit closed")]
    ConduitClosed,
    #[error("timed out waiting for data")]
    Timeout,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Frontend,
    Compute,
    Standalone,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FabricNode {
    pub id: String,
    pub kind: NodeKind,
    pub addressable: bool,
    /// Private network (resource) the node belongs to, if any.
    #[serde(default)]
    pub site: Option<String>,
}

impl FabricNode {
    pub fn standalone(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Standalone,
            addressable: true,
            site: None,
        }
    }

    pub fn frontend(id: &str, site: &str) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Frontend,
            addressable: true,
            site: Some(site.into()),
        }
    }

    pub fn compute(id: &str, site: &str, addressable: bool) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Compute,
            addressable,
            site: Some(site.into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Allow,
    /// Blocks establishment from `from` to `to` only.
    DenyInbound,
    /// Blocks establishment in both directions between the two patterns.
    DenyAll,
}

/// Matches nodes in a policy: `*`, a node id, `@site` or `!@site`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodePattern {
    Any,
    Node(String),
    Site(String),
    NotSite(String),
}

impl NodePattern {
    pub fn parse(s: &str) -> Result<Self, NetError> {
        let s = s.trim();
        if s.is_empty() {
            return Err(NetError::InvalidPolicy("empty node pattern".into()));
        }
        Ok(if s == "*" {
            NodePattern::Any
        } else if let Some(site) = s.strip_prefix("!@") {
            NodePattern::NotSite(site.into())
        } else if let Some(site) = s.strip_prefix('@') {
            NodePattern::Site(site.into())
        } else {
            NodePattern::Node(s.into())
        })
    }

    fn matches(&self, node: &FabricNode) -> bool {
        match self {
            NodePattern::Any => true,
            NodePattern::Node(id) => *id == node.id,
            NodePattern::Site(s) => node.site.as_deref() == Some(s),
            NodePattern::NotSite(s) => node.site.as_deref() != Some(s),
        }
    }
}

impl fmt::Display for NodePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodePattern::Any => f.write_str("*"),
            NodePattern::Node(n) => f.write_str(n),
            NodePattern::Site(s) => write!(f, "@{s}"),
            NodePattern::NotSite(s) => write!(f, "!@{s}"),
        }
    }
}

impl Serialize for NodePattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodePattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        NodePattern::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPolicy {
    pub from: NodePattern,
    pub to: NodePattern,
    pub rule: Rule,
    #[serde(default, rename = "latency_ms")]
    pub latency: Tick,
}

impl LinkPolicy {
    pub fn new(from: &str, to: &str, rule: Rule, latency: Tick) -> Result<Self, NetError> {
        Ok(Self {
            from: NodePattern::parse(from)?,
            to: NodePattern::parse(to)?,
            rule,
            latency,
        })
    }

    fn matches_directed(&self, from: &FabricNode, to: &FabricNode) -> bool {
        self.from.matches(from) && self.to.matches(to)
    }

    /// Whether this policy governs establishment from `from` to `to`.
    fn governs(&self, from: &FabricNode, to: &FabricNode) -> bool {
        match self.rule {
            Rule::Allow | Rule::DenyInbound => self.matches_directed(from, to),
            Rule::DenyAll => self.matches_directed(from, to) || self.matches_directed(to, from),
        }
    }
}

/// Static description of a fabric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FabricSpec {
    #[serde(default, rename = "node")]
    pub nodes: Vec<FabricNode>,
    #[serde(default, rename = "policy")]
    pub policies: Vec<LinkPolicy>,
    #[serde(default, rename = "default_latency_ms")]
    pub default_latency: Tick,
}

/// A running process on a node; conduits are owned by processes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub node: String,
    pub process: u64,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.node, self.process)
    }
}

/// Wakes a reader multiplexing several conduits.
#[derive(Debug, Default)]
pub struct Notify {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl Notify {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn generation(&self) -> u64 {
        *self.generation.lock()
    }

    pub fn bump(&self) {
        *self.generation.lock() += 1;
        self.cv.notify_all();
    }

    /// Waits until the generation moves past `seen` or the timeout elapses.
    pub fn wait_past(&self, seen: u64, timeout: Duration) -> u64 {
        let mut g = self.generation.lock();
        if *g == seen {
            self.cv.wait_for(&mut g, timeout);
        }
        *g
    }
}

#[derive(Debug)]
struct Chunk {
    deliver_at: Tick,
    seq: u64,
    bytes: Vec<u8>,
}

#[derive(Debug, Default)]
struct PipeState {
    queue: VecDeque<Chunk>,
    closed: bool,
    last_deliver: Tick,
    next_seq: u64,
    watchers: Vec<Weak<Notify>>,
}

#[derive(Debug, Default)]
struct Pipe {
    state: Mutex<PipeState>,
    cv: Condvar,
}

impl Pipe {
    fn wake(&self, st: &mut PipeState) {
        self.cv.notify_all();
        st.watchers.retain(|w| match w.upgrade() {
            Some(n) => {
                n.bump();
                true
            }
            None => false,
        });
    }

    fn close(&self, drop_in_flight: bool) {
        let mut st = self.state.lock();
        st.closed = true;
        if drop_in_flight {
            st.queue.clear();
        }
        self.wake(&mut st);
    }
}

/// What a non-blocking look at a conduit found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Ready,
    /// Data is in flight and lands at this tick.
    At(Tick),
    Empty,
    Closed,
}

/// One endpoint of an established conduit.
#[derive(Debug)]
pub struct ConduitEnd {
    id: u64,
    local: Endpoint,
    remote: Endpoint,
    latency: Tick,
    tx: Arc<Pipe>,
    rx: Arc<Pipe>,
    clock: Arc<Clock>,
}

impl ConduitEnd {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn local(&self) -> &Endpoint {
        &self.local
    }

    pub fn remote(&self) -> &Endpoint {
        &self.remote
    }

    pub fn latency(&self) -> Tick {
        self.latency
    }

    /// Queues `bytes` for delivery after the conduit latency. Chunks on one
    /// direction never overtake each other.
    pub fn send(&self, bytes: &[u8]) -> Result<(), NetError> {
        let mut st = self.tx.state.lock();
        if st.closed {
            return Err(NetError::ConduitClosed);
        }
        let deliver_at = (self.clock.now() + self.latency).max(st.last_deliver);
        st.last_deliver = deliver_at;
        let seq = st.next_seq;
        st.next_seq += 1;
        st.queue.push_back(Chunk {
            deliver_at,
            seq,
            bytes: bytes.to_vec(),
        });
        self.tx.wake(&mut st);
        Ok(())
    }

    pub fn readiness(&self) -> Readiness {
        let st = self.rx.state.lock();
        match st.queue.front() {
            Some(c) if c.deliver_at <= self.clock.now() => Readiness::Ready,
            Some(c) => Readiness::At(c.deliver_at),
            None if st.closed => Readiness::Closed,
            None => Readiness::Empty,
        }
    }

    /// Returns a chunk whose delivery time has already passed, if any.
    pub fn try_recv(&self) -> Result<Option<Vec<u8>>, NetError> {
        let mut st = self.rx.state.lock();
        match st.queue.front() {
            Some(c) if c.deliver_at <= self.clock.now() => Ok(st.queue.pop_front().map(|c| c.bytes)),
            Some(_) => Ok(None),
            None if st.closed => Err(NetError::ConduitClosed),
            None => Ok(None),
        }
    }

    /// Blocks (up to `timeout` wall time) for the next chunk, advancing the
    /// logical clock to its delivery tick when it is still in flight.
    pub fn recv(&self, timeout: Duration) -> Result<Vec<u8>, NetError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.rx.state.lock();
        loop {
            if let Some(front) = st.queue.front() {
                self.clock.advance_to(front.deliver_at);
                return Ok(st.queue.pop_front().expect("front exists").bytes);
            }
            if st.closed {
                return Err(NetError::ConduitClosed);
            }
            if self.rx.cv.wait_until(&mut st, deadline).timed_out() && st.queue.is_empty() {
                return Err(if st.closed { NetError::ConduitClosed } else { NetError::Timeout });
            }
        }
    }

    /// Registers a notifier woken on every arrival or close in the read
    /// direction.
    pub fn watch(&self, notify: &Arc<Notify>) {
        self.rx.state.lock().watchers.push(Arc::downgrade(notify));
    }

    pub fn is_closed(&self) -> bool {
        self.tx.state.lock().closed
    }

    /// Graceful close: in-flight data is still delivered.
    pub fn close(&self) {
        self.tx.close(false);
        self.rx.close(false);
    }
}

impl Drop for ConduitEnd {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Default)]
struct Clock {
    now: AtomicU64,
}

impl Clock {
    fn now(&self) -> Tick {
        self.now.load(Ordering::SeqCst)
    }

    fn advance_to(&self, t: Tick) {
        self.now.fetch_max(t, Ordering::SeqCst);
    }
}

#[derive(Debug)]
struct ConduitRecord {
    a: Endpoint,
    b: Endpoint,
    pipes: [Weak<Pipe>; 2],
}

/// A delivery that became readable during [`Fabric::advance`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub tick: Tick,
    pub conduit: u64,
    /// 0 for the dialler-to-acceptor direction, 1 for the reverse.
    pub direction: u8,
    pub seq: u64,
    pub len: usize,
}

#[derive(Debug)]
struct FabricInner {
    nodes: RwLock<HashMap<String, FabricNode>>,
    policies: Vec<LinkPolicy>,
    default_latency: Tick,
    clock: Arc<Clock>,
    conduits: Mutex<HashMap<u64, ConduitRecord>>,
    next_conduit: AtomicU64,
    next_process: AtomicU64,
}

/// Shared handle to a fabric; clones refer to the same network.
#[derive(Debug, Clone)]
pub struct Fabric {
    inner: Arc<FabricInner>,
}

impl Fabric {
    pub fn new(spec: FabricSpec) -> Result<Self, NetError> {
        let mut nodes = HashMap::new();
        for n in spec.nodes {
            if nodes.contains_key(&n.id) {
                return Err(NetError::DuplicateNode(n.id));
            }
            nodes.insert(n.id.clone(), n);
        }
        Ok(Self {
            inner: Arc::new(FabricInner {
                nodes: RwLock::new(nodes),
                policies: spec.policies,
                default_latency: spec.default_latency,
                clock: Arc::new(Clock::default()),
                conduits: Mutex::new(HashMap::new()),
                next_conduit: AtomicU64::new(1),
                next_process: AtomicU64::new(1),
            }),
        })
    }

    /// An open fabric with the given standalone nodes and no policies.
    pub fn open(nodes: &[&str]) -> Self {
        Self::new(FabricSpec {
            nodes: nodes.iter().map(|n| FabricNode::standalone(n)).collect(),
            ..FabricSpec::default()
        })
        .expect("distinct node ids")
    }

    pub fn now(&self) -> Tick {
        self.inner.clock.now()
    }

    pub fn node(&self, id: &str) -> Result<FabricNode, NetError> {
        self.inner
            .nodes
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| NetError::UnknownNode(id.to_string()))
    }

    pub fn node_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.nodes.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn add_node(&self, node: FabricNode) -> Result<(), NetError> {
        let mut nodes = self.inner.nodes.write();
        if nodes.contains_key(&node.id) {
            return Err(NetError::DuplicateNode(node.id));
        }
        nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn policies(&self) -> &[LinkPolicy] {
        &self.inner.policies
    }

    /// Starts a new process on `node`.
    pub fn spawn_process(&self, node: &str) -> Result<Endpoint, NetError> {
        self.node(node)?;
        Ok(Endpoint {
            node: node.to_string(),
            process: self.inner.next_process.fetch_add(1, Ordering::SeqCst),
        })
    }

    /// Whether a connection from `from` to `to` may be established.
    pub fn can_establish(&self, from: &str, to: &str) -> Result<bool, NetError> {
        let a = self.node(from)?;
        let b = self.node(to)?;
        if a.id == b.id {
            return Ok(true);
        }
        if !b.addressable && (b.site.is_none() || a.site != b.site) {
            return Ok(false);
        }
        Ok(match self.inner.policies.iter().find(|p| p.governs(&a, &b)) {
            Some(p) => p.rule == Rule::Allow,
            None => true,
        })
    }

    fn latency_between(&self, a: &FabricNode, b: &FabricNode) -> Tick {
        if a.id == b.id {
            return 0;
        }
        self.inner
            .policies
            .iter()
            .find(|p| p.matches_directed(a, b) || p.matches_directed(b, a))
            .map(|p| p.latency)
            .unwrap_or(self.inner.default_latency)
    }

    /// Establishes a conduit from `from` to `to`. Returns the dialler's end
    /// and the acceptor's end.
    pub fn dial(&self, from: &Endpoint, to: &Endpoint) -> Result<(ConduitEnd, ConduitEnd), NetError> {
        if !self.can_establish(&from.node, &to.node)? {
            return Err(NetError::EstablishRefused {
                from: from.node.clone(),
                to: to.node.clone(),
            });
        }
        let latency = self.latency_between(&self.node(&from.node)?, &self.node(&to.node)?);
        Ok(self.make_conduit(from, to, latency))
    }

    /// A zero-latency conduit that bypasses establishment policy. Used for
    /// the far end of hub relays, whose bytes already paid for every hop.
    pub fn open_virtual(&self, from: &Endpoint, to: &Endpoint) -> Result<(ConduitEnd, ConduitEnd), NetError> {
        self.node(&from.node)?;
        self.node(&to.node)?;
        Ok(self.make_conduit(from, to, 0))
    }

    fn make_conduit(&self, from: &Endpoint, to: &Endpoint, latency: Tick) -> (ConduitEnd, ConduitEnd) {
        let id = self.inner.next_conduit.fetch_add(1, Ordering::SeqCst);
        let forward = Arc::new(Pipe::default());
        let backward = Arc::new(Pipe::default());
        self.inner.conduits.lock().insert(
            id,
            ConduitRecord {
                a: from.clone(),
                b: to.clone(),
                pipes: [Arc::downgrade(&forward), Arc::downgrade(&backward)],
            },
        );
        let clock = self.inner.clock.clone();
        let dialler = ConduitEnd {
            id,
            local: from.clone(),
            remote: to.clone(),
            latency,
            tx: forward.clone(),
            rx: backward.clone(),
            clock: clock.clone(),
        };
        let acceptor = ConduitEnd {
            id,
            local: to.clone(),
            remote: from.clone(),
            latency,
            tx: backward,
            rx: forward,
            clock,
        };
        (dialler, acceptor)
    }

    fn sever_where(&self, hit: impl Fn(&ConduitRecord) -> bool) -> usize {
        let mut conduits = self.inner.conduits.lock();
        let mut count = 0;
        conduits.retain(|_, rec| {
            let alive = rec.pipes.iter().any(|p| p.strong_count() > 0);
            if alive && hit(rec) {
                for p in rec.pipes.iter().filter_map(Weak::upgrade) {
                    p.close(true);
                }
                count += 1;
                return false;
            }
            alive
        });
        count
    }

    /// Abruptly breaks every conduit owned by `process`. In-flight data is
    /// lost. Returns the number of conduits broken.
    pub fn sever_process(&self, process: u64) -> usize {
        self.sever_where(|r| r.a.process == process || r.b.process == process)
    }

    /// Breaks every conduit touching `node`, as if it lost power.
    pub fn sever_node(&self, node: &str) -> usize {
        self.sever_where(|r| r.a.node == node || r.b.node == node)
    }

    /// Breaks one conduit by id.
    pub fn sever_conduit(&self, id: u64) -> bool {
        let conduits = self.inner.conduits.lock();
        let Some(rec) = conduits.get(&id) else {
            return false;
        };
        for p in rec.pipes.iter().filter_map(Weak::upgrade) {
            p.close(true);
        }
        true
    }

    pub fn open_conduits(&self) -> usize {
        self.inner
            .conduits
            .lock()
            .values()
            .filter(|r| r.pipes.iter().filter_map(Weak::upgrade).any(|p| !p.state.lock().closed))
            .count()
    }

    /// Moves the clock forward by `ticks` and reports, in a fixed order,
    /// every chunk that became readable in the interval.
    pub fn advance(&self, ticks: Tick) -> Vec<DeliveryRecord> {
        let from = self.now();
        let to = from + ticks;
        self.inner.clock.advance_to(to);
        let conduits = self.inner.conduits.lock();
        let mut out = Vec::new();
        for (&id, rec) in conduits.iter() {
            for (dir, pipe) in rec.pipes.iter().enumerate() {
                let Some(pipe) = pipe.upgrade() else { continue };
                let st = pipe.state.lock();
                out.extend(st.queue.iter().filter(|c| c.deliver_at > from && c.deliver_at <= to).map(|c| {
                    DeliveryRecord {
                        tick: c.deliver_at,
                        conduit: id,
                        direction: dir as u8,
                        seq: c.seq,
                        len: c.bytes.len(),
                    }
                }));
            }
        }
        out.sort_by_key(|d| (d.tick, d.conduit, d.direction, d.seq));
        out
    }
}
