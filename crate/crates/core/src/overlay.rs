//! Hub overlay with direct, reverse and hub-routed connection setup.
//!
//! Hubs run on addressable nodes and are linked over fabric conduits in
//! whichever direction the firewall allows. Hub state travels as full-state
//! gossip, one exchange per link per round. Clients attach to one home hub
//! over an outbound conduit.
//!
//! Hub links and attach conduits are driven by whoever needs them: a sender
//! takes the link lock, pushes a frame on its side and pops it on the far
//! side, where the receiving party decodes and acts on it. Frames therefore
//! pay fabric latency per hop and fail when a hop has been severed, without
//! a reader thread per conduit.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{ConduitEnd, Endpoint, Fabric, NetError, Notify, Readiness, Tick};
use crate::wire::{expect_frame, op, Reader, WireError, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error("node `{0}` is not addressable and cannot host a hub")]
    NodeNotAddressable(String),
    #[error("a hub already runs on `{0}`")]
    DuplicateHub(String),
    #[error("unknown hub `{0}`")]
    UnknownHub(String),
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("hubs `{a}` and `{b}` cannot reach each other in either direction")]
    LinkUnreachable { a: String, b: String },
    #[error("client on `{node}` cannot reach hub `{hub}`")]
    HubUnreachable { node: String, hub: String },
    #[error("no route from `{from}` to `{to}`")]
    NoRoute { from: String, to: String },
    #[error("client `{0}` accepts no connections")]
    NotListening(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("protocol error: {0}")]
    Protocol(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, OverlayError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VirtualAddress {
    pub client_id: String,
    pub home_hub: String,
    pub node: String,
}

impl VirtualAddress {
    fn write(&self, w: &mut Writer) {
        w.str(&self.client_id).str(&self.home_hub).str(&self.node);
    }

    fn read(r: &mut Reader<'_>) -> std::result::Result<Self, WireError> {
        Ok(Self {
            client_id: r.str()?,
            home_hub: r.str()?,
            node: r.str()?,
        })
    }
}

impl fmt::Display for VirtualAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.client_id, self.home_hub)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Direct,
    Reverse,
    Routed,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Direct => "direct",
            Strategy::Reverse => "reverse",
            Strategy::Routed => "routed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Route {
    pub strategy: Strategy,
    pub hub_chain: Vec<String>,
}

impl Route {
    fn direct() -> Self {
        Self {
            strategy: Strategy::Direct,
            hub_chain: Vec::new(),
        }
    }
}

/// A connection set up by [`Overlay::smart_connect`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub from: String,
    pub to: String,
    pub tag: String,
    pub route: Route,
}

#[derive(Debug, Clone)]
pub struct OverlayConfig {
    /// Ticks a caller waits for a dial-back before falling through to a
    /// relayed connection.
    pub reverse_timeout: Tick,
    /// Wall-clock bound on a single hop.
    pub hop_timeout: Duration,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            reverse_timeout: 5,
            hop_timeout: Duration::from_secs(5),
        }
    }
}

/// A conduit whose two ends are both held in-process and driven by senders.
#[derive(Debug)]
struct Link {
    lock: Mutex<()>,
    owners: [String; 2],
    ends: [ConduitEnd; 2],
}

impl Link {
    fn side(&self, who: &str) -> usize {
        usize::from(self.owners[0] != who)
    }

    /// Moves one frame from side `from` to the other side and returns the
    /// bytes as received there.
    fn carry(&self, from: usize, frame: &[u8], timeout: Duration) -> std::result::Result<Vec<u8>, NetError> {
        let _g = self.lock.lock();
        self.ends[from].send(frame)?;
        self.ends[1 - from].recv(timeout)
    }

    fn close(&self) {
        self.ends[0].close();
    }

    fn is_closed(&self) -> bool {
        self.ends[0].is_closed()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct HubInfo {
    version: u64,
    neighbours: BTreeSet<String>,
    /// client id -> node
    clients: BTreeMap<String, String>,
}

impl HubInfo {
    fn write(&self, w: &mut Writer) {
        w.u64(self.version).u32(self.neighbours.len() as u32);
        for n in &self.neighbours {
            w.str(n);
        }
        w.u32(self.clients.len() as u32);
        for (c, n) in &self.clients {
            w.str(c).str(n);
        }
    }

    fn read(r: &mut Reader<'_>) -> std::result::Result<Self, WireError> {
        let version = r.u64()?;
        let mut neighbours = BTreeSet::new();
        for _ in 0..r.u32()? {
            neighbours.insert(r.str()?);
        }
        let mut clients = BTreeMap::new();
        for _ in 0..r.u32()? {
            let c = r.str()?;
            clients.insert(c, r.str()?);
        }
        Ok(Self {
            version,
            neighbours,
            clients,
        })
    }
}

fn encode_view(view: &BTreeMap<String, HubInfo>) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(view.len() as u32);
    for (id, info) in view {
        w.str(id);
        info.write(&mut w);
    }
    w.frame(op::GOSSIP)
}

fn decode_view(frame: &[u8]) -> std::result::Result<BTreeMap<String, HubInfo>, WireError> {
    let mut r = Reader::new(expect_frame(frame, op::GOSSIP)?);
    let mut view = BTreeMap::new();
    for _ in 0..r.u32()? {
        let id = r.str()?;
        view.insert(id, HubInfo::read(&mut r)?);
    }
    r.finish()?;
    Ok(view)
}

#[derive(Debug, Default)]
struct HubState {
    view: BTreeMap<String, HubInfo>,
    links: BTreeMap<String, Arc<Link>>,
    attached: BTreeMap<String, Arc<Link>>,
    /// relay id -> (from client, to client)
    relays: BTreeMap<u64, (String, String)>,
}

#[derive(Debug)]
struct Hub {
    id: String,
    endpoint: Endpoint,
    state: Mutex<HubState>,
}

impl Hub {
    fn touch(&self, st: &mut HubState) {
        st.view.get_mut(&self.id).expect("own entry").version += 1;
    }

    /// Applies a relay frame popped from an incoming hop.
    fn relay_frame(&self, frame: &[u8]) -> std::result::Result<(), WireError> {
        let (opcode, payload) = crate::wire::decode_frame(frame)?;
        let mut r = Reader::new(payload);
        let mut st = self.state.lock();
        match opcode {
            op::RELAY_OPEN => {
                let id = r.u64()?;
                let from = VirtualAddress::read(&mut r)?;
                let to = VirtualAddress::read(&mut r)?;
                st.relays.insert(id, (from.client_id, to.client_id));
            }
            op::RELAY_CLOSE => {
                st.relays.remove(&r.u64()?);
            }
            op::RELAY_DATA => {
                let id = r.u64()?;
                if !st.relays.contains_key(&id) {
                    return Err(WireError::UnexpectedOpcode {
                        got: opcode,
                        wanted: op::RELAY_OPEN,
                    });
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Public view of one hub.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubSnapshot {
    pub id: String,
    pub node: String,
    pub known_hubs: Vec<String>,
    pub links: Vec<String>,
    pub clients: Vec<String>,
    pub relays: usize,
}

/// What a listener learns about an incoming connection.
#[derive(Debug, Clone)]
pub struct Incoming {
    pub from: VirtualAddress,
    pub tag: String,
    pub route: Route,
}

pub type Listener = Arc<dyn Fn(Connection, Incoming) + Send + Sync>;

struct ClientRecord {
    addr: VirtualAddress,
    endpoint: Endpoint,
    attach: Arc<Link>,
    listener: Mutex<Option<Listener>>,
}

#[derive(Debug, Clone)]
struct Hop {
    link: Arc<Link>,
    from: usize,
    hub: Option<Arc<Hub>>,
}

#[derive(Debug)]
struct RelayEnd {
    id: u64,
    local: ConduitEnd,
    hops: Vec<Hop>,
    timeout: Duration,
    closed: AtomicBool,
}

impl RelayEnd {
    fn forward(&self, frame: &[u8]) -> std::result::Result<(), NetError> {
        for hop in &self.hops {
            let got = hop.link.carry(hop.from, frame, self.timeout)?;
            if let Some(hub) = &hop.hub {
                hub.relay_frame(&got).map_err(|_| NetError::ConduitClosed)?;
            }
        }
        Ok(())
    }

    fn send(&self, bytes: &[u8]) -> std::result::Result<(), NetError> {
        if self.local.is_closed() {
            return Err(NetError::ConduitClosed);
        }
        let mut w = Writer::new();
        w.u64(self.id).raw(bytes);
        if let Err(e) = self.forward(&w.frame(op::RELAY_DATA)) {
            self.local.close();
            return Err(e);
        }
        self.local.send(bytes)
    }

    fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        if !self.local.is_closed() {
            let mut w = Writer::new();
            w.u64(self.id);
            let _ = self.forward(&w.frame(op::RELAY_CLOSE));
        }
        self.local.close();
    }
}

impl Drop for RelayEnd {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug)]
enum ConnKind {
    Direct(ConduitEnd),
    Relay(RelayEnd),
}

/// One end of an overlay connection. Bytes sent by one end arrive at the
/// other as whole chunks, in order.
#[derive(Debug)]
pub struct Connection {
    kind: ConnKind,
    route: Route,
    peer: VirtualAddress,
}

impl Connection {
    fn conduit(&self) -> &ConduitEnd {
        match &self.kind {
            ConnKind::Direct(c) => c,
            ConnKind::Relay(r) => &r.local,
        }
    }

    pub fn route(&self) -> &Route {
        &self.route
    }

    pub fn peer(&self) -> &VirtualAddress {
        &self.peer
    }

    pub fn send(&self, bytes: &[u8]) -> std::result::Result<(), NetError> {
        match &self.kind {
            ConnKind::Direct(c) => c.send(bytes),
            ConnKind::Relay(r) => r.send(bytes),
        }
    }

    pub fn recv(&self, timeout: Duration) -> std::result::Result<Vec<u8>, NetError> {
        self.conduit().recv(timeout)
    }

    pub fn try_recv(&self) -> std::result::Result<Option<Vec<u8>>, NetError> {
        self.conduit().try_recv()
    }

    pub fn readiness(&self) -> Readiness {
        self.conduit().readiness()
    }

    pub fn watch(&self, notify: &Arc<Notify>) {
        self.conduit().watch(notify)
    }

    pub fn is_closed(&self) -> bool {
        self.conduit().is_closed()
    }

    pub fn close(&self) {
        match &self.kind {
            ConnKind::Direct(c) => c.close(),
            ConnKind::Relay(r) => r.close(),
        }
    }
}

struct OverlayInner {
    fabric: Fabric,
    config: OverlayConfig,
    hubs: RwLock<BTreeMap<String, Arc<Hub>>>,
    clients: RwLock<HashMap<String, Arc<ClientRecord>>>,
    routes: Mutex<Vec<RouteRecord>>,
    next_id: AtomicU64,
}

/// Shared handle to one overlay on one fabric.
#[derive(Clone)]
pub struct Overlay {
    inner: Arc<OverlayInner>,
}

impl fmt::Debug for Overlay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Overlay")
            .field("hubs", &self.inner.hubs.read().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Overlay {
    pub fn new(fabric: Fabric, config: OverlayConfig) -> Self {
        Self {
            inner: Arc::new(OverlayInner {
                fabric,
                config,
                hubs: RwLock::new(BTreeMap::new()),
                clients: RwLock::new(HashMap::new()),
                routes: Mutex::new(Vec::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn fabric(&self) -> &Fabric {
        &self.inner.fabric
    }

    fn hub(&self, id: &str) -> Result<Arc<Hub>> {
        self.inner
            .hubs
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| OverlayError::UnknownHub(id.to_string()))
    }

    fn client(&self, id: &str) -> Result<Arc<ClientRecord>> {
        self.inner
            .clients
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| OverlayError::UnknownClient(id.to_string()))
    }

    /// Starts a hub on `node`. The hub id is the node id.
    pub fn start_hub(&self, node: &str) -> Result<String> {
        let fabric_node = self.fabric().node(node)?;
        if !fabric_node.addressable {
            return Err(OverlayError::NodeNotAddressable(node.to_string()));
        }
        let mut hubs = self.inner.hubs.write();
        if hubs.contains_key(node) {
            return Err(OverlayError::DuplicateHub(node.to_string()));
        }
        let endpoint = self.fabric().spawn_process(node)?;
        let mut st = HubState::default();
        st.view.insert(node.to_string(), HubInfo::default());
        hubs.insert(
            node.to_string(),
            Arc::new(Hub {
                id: node.to_string(),
                endpoint,
                state: Mutex::new(st),
            }),
        );
        Ok(node.to_string())
    }

    pub fn hub_ids(&self) -> Vec<String> {
        self.inner.hubs.read().keys().cloned().collect()
    }

    pub fn hub_endpoint(&self, hub: &str) -> Result<Endpoint> {
        Ok(self.hub(hub)?.endpoint.clone())
    }

    /// Links two hubs, dialling from `a` if allowed and from `b` otherwise.
    /// Linking an already linked pair is a no-op.
    pub fn link_hubs(&self, a: &str, b: &str) -> Result<()> {
        let ha = self.hub(a)?;
        let hb = self.hub(b)?;
        if a == b || ha.state.lock().links.contains_key(b) {
            return Ok(());
        }
        let fabric = self.fabric();
        let (dialler, acceptor) = if fabric.can_establish(&ha.endpoint.node, &hb.endpoint.node)? {
            (&ha, &hb)
        } else if fabric.can_establish(&hb.endpoint.node, &ha.endpoint.node)? {
            (&hb, &ha)
        } else {
            return Err(OverlayError::LinkUnreachable {
                a: a.to_string(),
                b: b.to_string(),
            });
        };
        let (x, y) = fabric.dial(&dialler.endpoint, &acceptor.endpoint)?;
        let link = Arc::new(Link {
            lock: Mutex::new(()),
            owners: [dialler.id.clone(), acceptor.id.clone()],
            ends: [x, y],
        });
        let timeout = self.inner.config.hop_timeout;
        let mut w = Writer::new();
        w.str(&dialler.id);
        let hello = link.carry(0, &w.frame(op::HELLO), timeout)?;
        let mut w = Writer::new();
        w.str(&acceptor.id);
        let reply = link.carry(1, &w.frame(op::HELLO), timeout)?;
        let greeted = Reader::new(expect_frame(&hello, op::HELLO)?).str()?;
        let answered = Reader::new(expect_frame(&reply, op::HELLO)?).str()?;
        if greeted != dialler.id || answered != acceptor.id {
            return Err(OverlayError::Protocol(WireError::Utf8));
        }
        for (hub, other) in [(&ha, b), (&hb, a)] {
            let mut st = hub.state.lock();
            st.links.insert(other.to_string(), link.clone());
            st.view.get_mut(&hub.id).expect("own entry").neighbours.insert(other.to_string());
            hub.touch(&mut st);
        }
        Ok(())
    }

    /// One synchronous gossip round: every hub sends its full view to every
    /// neighbour, then all hubs merge what they received. Returns how many
    /// hubs changed their view.
    pub fn gossip_round(&self) -> usize {
        let hubs: Vec<Arc<Hub>> = self.inner.hubs.read().values().cloned().collect();
        let snapshot: BTreeMap<String, Vec<u8>> = hubs
            .iter()
            .map(|h| (h.id.clone(), encode_view(&h.state.lock().view)))
            .collect();
        let mut links: BTreeMap<(String, String), Arc<Link>> = BTreeMap::new();
        for h in &hubs {
            for (other, link) in &h.state.lock().links {
                let key = if h.id < *other {
                    (h.id.clone(), other.clone())
                } else {
                    (other.clone(), h.id.clone())
                };
                links.entry(key).or_insert_with(|| link.clone());
            }
        }
        let timeout = self.inner.config.hop_timeout;
        let mut inbox: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
        let mut broken = Vec::new();
        for ((a, b), link) in &links {
            for (from, to) in [(a, b), (b, a)] {
                match link.carry(link.side(from), &snapshot[from], timeout) {
                    Ok(bytes) => inbox.entry(to.clone()).or_default().push(bytes),
                    Err(_) => broken.push((a.clone(), b.clone())),
                }
            }
        }
        for (a, b) in broken {
            for (x, y) in [(&a, &b), (&b, &a)] {
                if let Ok(h) = self.hub(x) {
                    let mut st = h.state.lock();
                    if st.links.remove(y).is_some() {
                        st.view.get_mut(x).expect("own entry").neighbours.remove(y);
                        h.touch(&mut st);
                    }
                }
            }
        }
        let mut changed = 0;
        for h in &hubs {
            let Some(frames) = inbox.remove(&h.id) else { continue };
            let mut st = h.state.lock();
            let mut dirty = false;
            for frame in frames {
                let Ok(view) = decode_view(&frame) else { continue };
                for (id, info) in view {
                    if id == h.id {
                        continue;
                    }
                    let newer = st.view.get(&id).is_none_or(|mine| info.version > mine.version);
                    if newer {
                        st.view.insert(id, info);
                        dirty = true;
                    }
                }
            }
            changed += usize::from(dirty);
        }
        changed
    }

    /// Gossips until no view changes. Returns the number of rounds run.
    pub fn converge(&self) -> usize {
        let limit = 2 * self.inner.hubs.read().len() + 2;
        for round in 1..=limit {
            if self.gossip_round() == 0 {
                return round;
            }
        }
        limit
    }

    pub fn known_hubs(&self, hub: &str) -> Result<BTreeSet<String>> {
        let h = self.hub(hub)?;
        let st = h.state.lock();
        Ok(st.view.keys().filter(|k| **k != h.id).cloned().collect())
    }

    /// Attaches a client process to `hub` over an outbound conduit. The
    /// returned client id is `name`, suffixed if already taken.
    pub fn attach(&self, client: &Endpoint, hub: &str, name: &str) -> Result<VirtualAddress> {
        let h = self.hub(hub)?;
        if !self.fabric().can_establish(&client.node, &h.endpoint.node)? {
            return Err(OverlayError::HubUnreachable {
                node: client.node.clone(),
                hub: hub.to_string(),
            });
        }
        let (c, hub_end) = self.fabric().dial(client, &h.endpoint)?;
        let mut clients = self.inner.clients.write();
        let mut id = name.to_string();
        let mut n = 2;
        while clients.contains_key(&id) {
            id = format!("{name}~{n}");
            n += 1;
        }
        let link = Arc::new(Link {
            lock: Mutex::new(()),
            owners: [id.clone(), hub.to_string()],
            ends: [c, hub_end],
        });
        let timeout = self.inner.config.hop_timeout;
        let mut w = Writer::new();
        w.str(&id).str(&client.node);
        let req = link.carry(0, &w.frame(op::ATTACH), timeout)?;
        let addr = {
            let mut r = Reader::new(expect_frame(&req, op::ATTACH)?);
            let addr = VirtualAddress {
                client_id: r.str()?,
                home_hub: hub.to_string(),
                node: r.str()?,
            };
            let mut st = h.state.lock();
            st.attached.insert(addr.client_id.clone(), link.clone());
            st.view
                .get_mut(hub)
                .expect("own entry")
                .clients
                .insert(addr.client_id.clone(), addr.node.clone());
            h.touch(&mut st);
            addr
        };
        let mut w = Writer::new();
        addr.write(&mut w);
        let ack = link.carry(1, &w.frame(op::ATTACH_ACK), timeout)?;
        let addr = VirtualAddress::read(&mut Reader::new(expect_frame(&ack, op::ATTACH_ACK)?))?;
        clients.insert(
            id,
            Arc::new(ClientRecord {
                addr: addr.clone(),
                endpoint: client.clone(),
                attach: link,
                listener: Mutex::new(None),
            }),
        );
        Ok(addr)
    }

    pub fn detach(&self, addr: &VirtualAddress) -> Result<()> {
        let rec = self
            .inner
            .clients
            .write()
            .remove(&addr.client_id)
            .ok_or_else(|| OverlayError::UnknownClient(addr.client_id.clone()))?;
        let mut w = Writer::new();
        w.str(&addr.client_id);
        let _ = rec.attach.carry(0, &w.frame(op::DETACH), self.inner.config.hop_timeout);
        if let Ok(h) = self.hub(&addr.home_hub) {
            let mut st = h.state.lock();
            st.attached.remove(&addr.client_id);
            st.view.get_mut(&h.id).expect("own entry").clients.remove(&addr.client_id);
            h.touch(&mut st);
        }
        rec.attach.close();
        Ok(())
    }

    pub fn clients(&self) -> Vec<VirtualAddress> {
        let mut v: Vec<_> = self.inner.clients.read().values().map(|c| c.addr.clone()).collect();
        v.sort();
        v
    }

    /// Installs the callback that receives connections made to `addr`.
    pub fn listen(&self, addr: &VirtualAddress, listener: Listener) -> Result<()> {
        *self.client(&addr.client_id)?.listener.lock() = Some(listener);
        Ok(())
    }

    /// Shortest hub chain from `from` to `to` over `from`'s gossiped view,
    /// ties broken by lexicographic hub id.
    pub fn hub_chain(&self, from: &str, to: &str) -> Result<Option<Vec<String>>> {
        let view = self.hub(from)?.state.lock().view.clone();
        if from == to {
            return Ok(Some(vec![from.to_string()]));
        }
        let mutual = |x: &str, y: &str| {
            view.get(x).is_some_and(|i| i.neighbours.contains(y)) && view.get(y).is_some_and(|i| i.neighbours.contains(x))
        };
        // distances to the target, then a greedy walk picking the smallest id
        let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
        let mut queue = VecDeque::new();
        if !view.contains_key(to) {
            return Ok(None);
        }
        dist.insert(to, 0);
        queue.push_back(to);
        while let Some(x) = queue.pop_front() {
            let d = dist[x];
            for y in view[x].neighbours.iter() {
                if view.contains_key(y.as_str()) && !dist.contains_key(y.as_str()) && mutual(x, y) {
                    dist.insert(y.as_str(), d + 1);
                    queue.push_back(y.as_str());
                }
            }
        }
        let Some(&d0) = dist.get(from) else {
            return Ok(None);
        };
        let mut chain = vec![from.to_string()];
        let mut cur = from;
        for d in (0..d0).rev() {
            let next = view[cur]
                .neighbours
                .iter()
                .find(|y| dist.get(y.as_str()) == Some(&d) && mutual(cur, y))
                .expect("bfs distance has a predecessor");
            chain.push(next.clone());
            cur = next.as_str();
        }
        Ok(Some(chain))
    }

    /// The links a frame crosses from `src` to `dst` along `chain`.
    fn path(&self, src: &ClientRecord, dst: &ClientRecord, chain: &[String]) -> Result<Vec<Hop>> {
        let mut hops = Vec::with_capacity(chain.len() + 1);
        let first = self.hub(&chain[0])?;
        hops.push(Hop {
            link: src.attach.clone(),
            from: 0,
            hub: Some(first),
        });
        for pair in chain.windows(2) {
            let here = self.hub(&pair[0])?;
            let next = self.hub(&pair[1])?;
            let link = here.state.lock().links.get(&pair[1]).cloned().ok_or_else(|| OverlayError::NoRoute {
                from: src.addr.client_id.clone(),
                to: dst.addr.client_id.clone(),
            })?;
            hops.push(Hop {
                from: link.side(&here.id),
                link,
                hub: Some(next),
            });
        }
        let last = self.hub(chain.last().expect("non-empty chain"))?;
        let attached = last.state.lock().attached.get(&dst.addr.client_id).cloned();
        match attached {
            Some(link) if Arc::ptr_eq(&link, &dst.attach) => hops.push(Hop { link, from: 1, hub: None }),
            _ => {
                return Err(OverlayError::NoRoute {
                    from: src.addr.client_id.clone(),
                    to: dst.addr.client_id.clone(),
                })
            }
        }
        Ok(hops)
    }

    fn carry_path(&self, hops: &[Hop], frame: &[u8]) -> Result<Vec<u8>> {
        let mut last = Vec::new();
        for hop in hops {
            last = hop.link.carry(hop.from, frame, self.inner.config.hop_timeout)?;
            if let Some(hub) = &hop.hub {
                hub.relay_frame(&last)?;
            }
        }
        Ok(last)
    }

    fn record(&self, from: &VirtualAddress, to: &VirtualAddress, tag: &str, route: &Route) {
        self.inner.routes.lock().push(RouteRecord {
            from: from.client_id.clone(),
            to: to.client_id.clone(),
            tag: tag.to_string(),
            route: route.clone(),
        });
    }

    pub fn routes(&self) -> Vec<RouteRecord> {
        self.inner.routes.lock().clone()
    }

    /// Opens a connection from `from` to `to`, trying a direct dial, then a
    /// reverse connection request, then a relay through the hub chain. The
    /// target's listener receives the far end tagged with `tag`.
    pub fn smart_connect(&self, from: &VirtualAddress, to: &VirtualAddress, tag: &str) -> Result<Connection> {
        let src = self.client(&from.client_id)?;
        let dst = self.client(&to.client_id)?;
        let listener = dst
            .listener
            .lock()
            .clone()
            .ok_or_else(|| OverlayError::NotListening(to.client_id.clone()))?;
        let fabric = self.fabric();
        let no_route = || OverlayError::NoRoute {
            from: from.client_id.clone(),
            to: to.client_id.clone(),
        };

        if fabric.can_establish(&src.endpoint.node, &dst.endpoint.node)? {
            let (a, b) = fabric.dial(&src.endpoint, &dst.endpoint)?;
            let route = Route::direct();
            return Ok(self.hand_over(
                &src,
                &dst,
                tag,
                route,
                ConnKind::Direct(a),
                ConnKind::Direct(b),
                listener,
            ));
        }

        let chain = self.hub_chain(&src.addr.home_hub, &dst.addr.home_hub)?.ok_or_else(no_route)?;
        let hops = self.path(&src, &dst, &chain).map_err(|_| no_route())?;

        // reverse: the request travels the hub chain, the target dials back
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let mut w = Writer::new();
        w.u64(id);
        src.addr.write(&mut w);
        dst.addr.write(&mut w);
        w.str(tag);
        if let Ok(frame) = self.carry_path(&hops, &w.frame(op::REVERSE_REQUEST)) {
            let mut r = Reader::new(expect_frame(&frame, op::REVERSE_REQUEST)?);
            r.u64()?;
            let requester = VirtualAddress::read(&mut r)?;
            if let Ok(back) = self.client(&requester.client_id) {
                if let Ok((b, a)) = fabric.dial(&dst.endpoint, &back.endpoint) {
                    let route = Route {
                        strategy: Strategy::Reverse,
                        hub_chain: Vec::new(),
                    };
                    return Ok(self.hand_over(
                        &src,
                        &dst,
                        tag,
                        route,
                        ConnKind::Direct(a),
                        ConnKind::Direct(b),
                        listener,
                    ));
                }
            }
        }
        fabric.advance(self.inner.config.reverse_timeout);

        // routed: every byte crosses the same hops
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let mut w = Writer::new();
        w.u64(id);
        src.addr.write(&mut w);
        dst.addr.write(&mut w);
        w.str(tag);
        w.u32(chain.len() as u32);
        for h in &chain {
            w.str(h);
        }
        let opened = self.carry_path(&hops, &w.frame(op::RELAY_OPEN))?;
        expect_frame(&opened, op::RELAY_OPEN)?;
        let (x, y) = fabric.open_virtual(&src.endpoint, &dst.endpoint)?;
        let back: Vec<Hop> = hops
            .iter()
            .rev()
            .zip(chain.iter().rev().map(Some).chain(std::iter::once(None)))
            .map(|(h, recv_hub)| Hop {
                link: h.link.clone(),
                from: 1 - h.from,
                hub: recv_hub.and_then(|id| self.hub(id).ok()),
            })
            .collect();
        let timeout = self.inner.config.hop_timeout;
        let route = Route {
            strategy: Strategy::Routed,
            hub_chain: chain,
        };
        let make = |local, hops| {
            ConnKind::Relay(RelayEnd {
                id,
                local,
                hops,
                timeout,
                closed: AtomicBool::new(false),
            })
        };
        let (mine, theirs) = (make(x, hops), make(y, back));
        Ok(self.hand_over(&src, &dst, tag, route, mine, theirs, listener))
    }

    #[allow(clippy::too_many_arguments)]
    fn hand_over(
        &self,
        src: &ClientRecord,
        dst: &ClientRecord,
        tag: &str,
        route: Route,
        mine: ConnKind,
        theirs: ConnKind,
        listener: Listener,
    ) -> Connection {
        self.record(&src.addr, &dst.addr, tag, &route);
        listener(
            Connection {
                kind: theirs,
                route: route.clone(),
                peer: src.addr.clone(),
            },
            Incoming {
                from: src.addr.clone(),
                tag: tag.to_string(),
                route: route.clone(),
            },
        );
        Connection {
            kind: mine,
            route,
            peer: dst.addr.clone(),
        }
    }

    pub fn hubs(&self) -> Vec<HubSnapshot> {
        let hubs: Vec<Arc<Hub>> = self.inner.hubs.read().values().cloned().collect();
        hubs.iter()
            .map(|h| {
                let st = h.state.lock();
                HubSnapshot {
                    id: h.id.clone(),
                    node: h.endpoint.node.clone(),
                    known_hubs: st.view.keys().filter(|k| **k != h.id).cloned().collect(),
                    links: st.links.iter().filter(|(_, l)| !l.is_closed()).map(|(k, _)| k.clone()).collect(),
                    clients: st.attached.keys().cloned().collect(),
                    relays: st.relays.len(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{FabricNode, FabricSpec, LinkPolicy, Rule};

    const T: Duration = Duration::from_secs(2);

    type Inbox = Arc<Mutex<Vec<(Connection, Incoming)>>>;

    fn listen(ov: &Overlay, addr: &VirtualAddress) -> Inbox {
        let inbox: Inbox = Arc::default();
        let sink = inbox.clone();
        ov.listen(addr, Arc::new(move |c, i| sink.lock().push((c, i)))).unwrap();
        inbox
    }

    fn client(ov: &Overlay, node: &str, hub: &str, name: &str) -> VirtualAddress {
        let ep = ov.fabric().spawn_process(node).unwrap();
        ov.attach(&ep, hub, name).unwrap()
    }

    /// Two firewalled clusters and an open laptop.
    fn two_sites() -> Overlay {
        let fabric = Fabric::new(FabricSpec {
            nodes: vec![
                FabricNode::standalone("laptop"),
                FabricNode::frontend("fa", "a"),
                FabricNode::compute("a0", "a", false),
                FabricNode::frontend("fb", "b"),
                FabricNode::compute("b0", "b", false),
            ],
            policies: vec![
                LinkPolicy::new("!@a", "@a", Rule::DenyInbound, 3).unwrap(),
                LinkPolicy::new("!@b", "@b", Rule::DenyInbound, 4).unwrap(),
            ],
            default_latency: 1,
        })
        .unwrap();
        let ov = Overlay::new(fabric, OverlayConfig::default());
        for h in ["laptop", "fa", "fb"] {
            ov.start_hub(h).unwrap();
        }
        ov.link_hubs("laptop", "fa").unwrap();
        ov.link_hubs("laptop", "fb").unwrap();
        ov
    }

    #[test]
    fn fresh_hub_knows_nobody() {
        let ov = Overlay::new(Fabric::open(&["x"]), OverlayConfig::default());
        ov.start_hub("x").unwrap();
        assert!(ov.known_hubs("x").unwrap().is_empty());
        assert_eq!(ov.start_hub("x"), Err(OverlayError::DuplicateHub("x".into())));
    }

    #[test]
    fn hubs_need_addressable_nodes() {
        let fabric = Fabric::new(FabricSpec {
            nodes: vec![FabricNode::compute("n", "s", false)],
            ..FabricSpec::default()
        })
        .unwrap();
        let ov = Overlay::new(fabric, OverlayConfig::default());
        assert_eq!(ov.start_hub("n"), Err(OverlayError::NodeNotAddressable("n".into())));
    }

    #[test]
    fn two_hubs_converge_in_one_round() {
        let ov = Overlay::new(Fabric::open(&["h1", "h2"]), OverlayConfig::default());
        ov.start_hub("h1").unwrap();
        ov.start_hub("h2").unwrap();
        ov.link_hubs("h1", "h2").unwrap();
        assert!(ov.known_hubs("h1").unwrap().is_empty());
        ov.gossip_round();
        assert_eq!(ov.known_hubs("h1").unwrap(), BTreeSet::from(["h2".to_string()]));
        assert_eq!(ov.known_hubs("h2").unwrap(), BTreeSet::from(["h1".to_string()]));
    }

    #[test]
    fn chain_converges_within_twice_the_diameter() {
        let ov = Overlay::new(Fabric::open(&["h1", "h2", "h3"]), OverlayConfig::default());
        for h in ["h1", "h2", "h3"] {
            ov.start_hub(h).unwrap();
        }
        ov.link_hubs("h1", "h2").unwrap();
        ov.link_hubs("h2", "h3").unwrap();
        for _ in 0..4 {
            ov.gossip_round();
        }
        for h in ["h1", "h2", "h3"] {
            assert_eq!(ov.known_hubs(h).unwrap().len(), 2, "{h}");
        }
    }

    #[test]
    fn link_in_the_allowed_direction_only() {
        let ov = two_sites();
        // laptop cannot dial fa, so fa dialled out
        assert!(ov.hubs().iter().any(|h| h.id == "fa" && h.links == ["laptop"]));
        let fabric = Fabric::new(FabricSpec {
            nodes: vec![FabricNode::standalone("x"), FabricNode::standalone("y")],
            policies: vec![LinkPolicy::new("x", "y", Rule::DenyAll, 0).unwrap()],
            default_latency: 0,
        })
        .unwrap();
        let ov = Overlay::new(fabric, OverlayConfig::default());
        ov.start_hub("x").unwrap();
        ov.start_hub("y").unwrap();
        assert!(matches!(ov.link_hubs("x", "y"), Err(OverlayError::LinkUnreachable { .. })));
    }

    #[test]
    fn attach_from_behind_a_firewall() {
        let ov = two_sites();
        let a = client(&ov, "a0", "fa", "w");
        let b = client(&ov, "a0", "fa", "w");
        assert_ne!(a.client_id, b.client_id);
        assert_eq!(a.home_hub, "fa");
    }

    #[test]
    fn attach_refused_by_deny_all() {
        let fabric = Fabric::new(FabricSpec {
            nodes: vec![FabricNode::standalone("c"), FabricNode::standalone("h")],
            policies: vec![LinkPolicy::new("c", "h", Rule::DenyAll, 0).unwrap()],
            default_latency: 0,
        })
        .unwrap();
        let ov = Overlay::new(fabric, OverlayConfig::default());
        ov.start_hub("h").unwrap();
        let ep = ov.fabric().spawn_process("c").unwrap();
        assert!(matches!(ov.attach(&ep, "h", "x"), Err(OverlayError::HubUnreachable { .. })));
    }

    #[test]
    fn open_fabric_connects_directly() {
        let ov = Overlay::new(Fabric::open(&["a", "b"]), OverlayConfig::default());
        ov.start_hub("a").unwrap();
        let x = client(&ov, "a", "a", "x");
        let y = client(&ov, "b", "a", "y");
        let inbox = listen(&ov, &y);
        let c = ov.smart_connect(&x, &y, "t").unwrap();
        assert_eq!(c.route().strategy, Strategy::Direct);
        c.send(b"hi").unwrap();
        let (far, info) = inbox.lock().pop().unwrap();
        assert_eq!(info.tag, "t");
        assert_eq!(far.recv(T).unwrap(), b"hi");
    }

    #[test]
    fn firewalled_target_is_reached_by_reverse_connection() {
        let ov = two_sites();
        ov.converge();
        let coupler = client(&ov, "laptop", "laptop", "coupler");
        let worker = client(&ov, "a0", "fa", "worker");
        let inbox = listen(&ov, &worker);
        let c = ov.smart_connect(&coupler, &worker, "calls").unwrap();
        assert_eq!(c.route().strategy, Strategy::Reverse);
        c.send(b"ping").unwrap();
        let (far, _) = inbox.lock().pop().unwrap();
        assert_eq!(far.recv(T).unwrap(), b"ping");
        far.send(b"pong").unwrap();
        assert_eq!(c.recv(T).unwrap(), b"pong");
    }

    #[test]
    fn two_firewalled_sites_are_relayed() {
        let ov = two_sites();
        ov.converge();
        let x = client(&ov, "a0", "fa", "x");
        let y = client(&ov, "b0", "fb", "y");
        let inbox = listen(&ov, &y);
        let c = ov.smart_connect(&x, &y, "t").unwrap();
        assert_eq!(c.route().strategy, Strategy::Routed);
        assert_eq!(c.route().hub_chain, ["fa", "laptop", "fb"]);
        let (far, _) = inbox.lock().pop().unwrap();
        let payloads: Vec<Vec<u8>> = (0..50u8).map(|i| vec![i; i as usize + 1]).collect();
        for p in &payloads {
            c.send(p).unwrap();
        }
        for p in &payloads {
            assert_eq!(&far.recv(T).unwrap(), p);
        }
        far.send(b"back").unwrap();
        assert_eq!(c.recv(T).unwrap(), b"back");
        assert!(ov.hubs().iter().all(|h| h.relays == 1));
        drop(c);
        assert!(ov.hubs().iter().all(|h| h.relays == 0));
        assert_eq!(far.recv(T), Err(NetError::ConduitClosed));
    }

    #[test]
    fn reverse_falls_through_after_timeout() {
        let ov = two_sites();
        ov.converge();
        let x = client(&ov, "a0", "fa", "x");
        let y = client(&ov, "b0", "fb", "y");
        listen(&ov, &y);
        let before = ov.fabric().now();
        ov.smart_connect(&x, &y, "t").unwrap();
        assert!(ov.fabric().now() >= before + OverlayConfig::default().reverse_timeout);
    }

    #[test]
    fn unlistened_target_is_rejected() {
        let ov = Overlay::new(Fabric::open(&["a"]), OverlayConfig::default());
        ov.start_hub("a").unwrap();
        let x = client(&ov, "a", "a", "x");
        let y = client(&ov, "a", "a", "y");
        assert_eq!(ov.smart_connect(&x, &y, "t").unwrap_err(), OverlayError::NotListening("y".into()));
    }

    #[test]
    fn partitioned_hubs_have_no_route() {
        let ov = two_sites();
        // no gossip: fa has never heard of fb
        let x = client(&ov, "a0", "fa", "x");
        let y = client(&ov, "b0", "fb", "y");
        listen(&ov, &y);
        assert!(matches!(ov.smart_connect(&x, &y, "t"), Err(OverlayError::NoRoute { .. })));
    }

    #[test]
    fn routes_are_recorded() {
        let ov = two_sites();
        ov.converge();
        let x = client(&ov, "laptop", "laptop", "x");
        let y = client(&ov, "b0", "fb", "y");
        listen(&ov, &y);
        let _c = ov.smart_connect(&x, &y, "calls").unwrap();
        let r = ov.routes();
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].from.as_str(), r[0].to.as_str(), r[0].tag.as_str()), ("x", "y", "calls"));
        assert_eq!(r[0].route.strategy, Strategy::Reverse);
    }
}
