//! One-way message ports and a membership registry on top of the overlay.
//!
//! A [`MsgEndpoint`] is an attached overlay client that owns named receive
//! ports. A [`SendPort`] connects to `(peer, port name)` pairs through
//! [`Overlay::smart_connect`] and writes length-prefixed, sequenced messages:
//! `len: u32 LE | seq: u64 LE | payload`, `len` counting the sequence field
//! and payload.
//!
//! The [`Registry`] is a single process at a known overlay address. Members
//! join over an overlay connection, send heartbeats on it and receive
//! membership events in one total order. A member whose connection breaks,
//! or that stays silent for `missed_beats` registry ticks, is reported dead.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Endpoint, NetError, Notify, Readiness};
use crate::overlay::{Connection, Incoming, Overlay, OverlayError, Route, VirtualAddress};
use crate::wire::{decode_frame, op, Reader, WireError, Writer};

/// Largest payload a single message may carry.
pub const MAX_MESSAGE: usize = 64 << 20;

/// Port tag used for registry connections.
pub const REGISTRY_PORT: &str = "registry";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MsgError {
    #[error("registry `{0}` unreachable")]
    RegistryUnreachable(String),
    #[error("peer `{0}` is gone")]
    PeerGone(String),
    #[error("port closed")]
    PortClosed,
    #[error("timed out")]
    Timeout,
    #[error("message of {0} bytes exceeds the 64 MiB cap")]
    MessageTooLarge(usize),
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error(transparent)]
    Protocol(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, MsgError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub from: VirtualAddress,
    pub seq: u64,
    pub payload: Vec<u8>,
}

pub fn encode_message(seq: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + payload.len());
    out.extend_from_slice(&(payload.len() as u32 + 8).to_le_bytes());
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn decode_message(bytes: &[u8]) -> std::result::Result<(u64, &[u8]), WireError> {
    if bytes.len() < 12 {
        return Err(WireError::Truncated { needed: 12 - bytes.len() });
    }
    let declared = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if declared != bytes.len() - 4 {
        return Err(WireError::LengthMismatch {
            declared,
            actual: bytes.len() - 4,
        });
    }
    let seq = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    Ok((seq, &bytes[12..]))
}

struct InConn {
    conn: Connection,
    next_seq: u64,
}

#[derive(Default)]
struct PortShared {
    conns: Mutex<Vec<InConn>>,
    notify: Arc<Notify>,
    closed: AtomicBool,
}

impl PortShared {
    fn accept(&self, conn: Connection) {
        if self.closed.load(Ordering::SeqCst) {
            conn.close();
            return;
        }
        conn.watch(&self.notify);
        self.conns.lock().push(InConn { conn, next_seq: 0 });
        self.notify.bump();
    }
}

/// An attached overlay client hosting receive ports.
pub struct MsgEndpoint {
    overlay: Overlay,
    addr: VirtualAddress,
    endpoint: Endpoint,
    ports: Arc<RwLock<HashMap<String, Arc<PortShared>>>>,
}

impl MsgEndpoint {
    /// Attaches `endpoint` to `hub` under `name` and starts accepting
    /// connections for its ports.
    pub fn attach(overlay: &Overlay, endpoint: &Endpoint, hub: &str, name: &str) -> Result<Self> {
        let addr = overlay.attach(endpoint, hub, name)?;
        let ports: Arc<RwLock<HashMap<String, Arc<PortShared>>>> = Arc::default();
        let table = ports.clone();
        overlay.listen(
            &addr,
            Arc::new(move |conn: Connection, info: Incoming| match table.read().get(&info.tag) {
                Some(port) => port.accept(conn),
                None => conn.close(),
            }),
        )?;
        Ok(Self {
            overlay: overlay.clone(),
            addr,
            endpoint: endpoint.clone(),
            ports,
        })
    }

    pub fn address(&self) -> &VirtualAddress {
        &self.addr
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn overlay(&self) -> &Overlay {
        &self.overlay
    }

    pub fn receive_port(&self, name: &str) -> ReceivePort {
        let shared = Arc::new(PortShared::default());
        self.ports.write().insert(name.to_string(), shared.clone());
        ReceivePort {
            name: name.to_string(),
            shared,
        }
    }

    pub fn send_port(&self, name: &str) -> SendPort {
        SendPort {
            overlay: self.overlay.clone(),
            owner: self.addr.clone(),
            name: name.to_string(),
            conns: Vec::new(),
            pool: None,
        }
    }

    pub fn detach(&self) -> Result<()> {
        self.overlay.detach(&self.addr)?;
        Ok(())
    }
}

struct OutConn {
    peer: VirtualAddress,
    port: String,
    conn: Connection,
    next_seq: u64,
}

/// Writing end of one-way connections to one or more receive ports.
pub struct SendPort {
    overlay: Overlay,
    owner: VirtualAddress,
    name: String,
    conns: Vec<OutConn>,
    pool: Option<Arc<PoolView>>,
}

impl SendPort {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Lets writes fail fast for peers the pool has declared dead.
    pub fn watch_pool(&mut self, pool: Arc<PoolView>) {
        self.pool = Some(pool);
    }

    pub fn connect(&mut self, peer: &VirtualAddress, port: &str) -> Result<Route> {
        if self.pool.as_ref().is_some_and(|p| p.is_dead(&peer.client_id)) {
            return Err(MsgError::PeerGone(peer.client_id.clone()));
        }
        let conn = self.overlay.smart_connect(&self.owner, peer, port)?;
        let route = conn.route().clone();
        self.conns.push(OutConn {
            peer: peer.clone(),
            port: port.to_string(),
            conn,
            next_seq: 0,
        });
        Ok(route)
    }

    pub fn connections(&self) -> Vec<(VirtualAddress, String, Route)> {
        self.conns
            .iter()
            .map(|c| (c.peer.clone(), c.port.clone(), c.conn.route().clone()))
            .collect()
    }

    /// Writes one message to every connected receive port.
    pub fn write(&mut self, payload: &[u8]) -> Result<()> {
        if payload.len() > MAX_MESSAGE {
            return Err(MsgError::MessageTooLarge(payload.len()));
        }
        if self.conns.is_empty() {
            return Err(MsgError::PortClosed);
        }
        for c in &mut self.conns {
            if self.pool.as_ref().is_some_and(|p| p.is_dead(&c.peer.client_id)) {
                return Err(MsgError::PeerGone(c.peer.client_id.clone()));
            }
            c.conn
                .send(&encode_message(c.next_seq, payload))
                .map_err(|_| MsgError::PeerGone(c.peer.client_id.clone()))?;
            c.next_seq += 1;
        }
        Ok(())
    }

    pub fn close(&mut self) {
        for c in self.conns.drain(..) {
            c.conn.close();
        }
    }
}

impl Drop for SendPort {
    fn drop(&mut self) {
        self.close();
    }
}

/// Reading end; messages from each connection arrive in order, once.
pub struct ReceivePort {
    name: String,
    shared: Arc<PortShared>,
}

impl ReceivePort {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn connection_count(&self) -> usize {
        self.shared.conns.lock().len()
    }

    /// Returns a message if one has already arrived.
    pub fn try_read(&self) -> Result<Option<Message>> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(MsgError::PortClosed);
        }
        let mut conns = self.shared.conns.lock();
        let mut i = 0;
        while i < conns.len() {
            match conns[i].conn.try_recv() {
                Ok(Some(bytes)) => return Self::accept(&mut conns[i], &bytes).map(Some),
                Ok(None) => i += 1,
                Err(_) => {
                    conns.remove(i);
                }
            }
        }
        Ok(None)
    }

    fn accept(c: &mut InConn, bytes: &[u8]) -> Result<Message> {
        let (seq, payload) = decode_message(bytes)?;
        if seq != c.next_seq {
            return Err(MsgError::SequenceGap {
                expected: c.next_seq,
                got: seq,
            });
        }
        c.next_seq += 1;
        Ok(Message {
            from: c.conn.peer().clone(),
            seq,
            payload: payload.to_vec(),
        })
    }

    /// Blocks for the next message from any connection. Messages still in
    /// flight are taken earliest-delivery first.
    pub fn read(&self, timeout: Duration) -> Result<Message> {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.shared.notify.generation();
            if let Some(m) = self.try_read()? {
                return Ok(m);
            }
            {
                let mut conns = self.shared.conns.lock();
                let next = conns
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| match c.conn.readiness() {
                        Readiness::At(t) => Some((t, i)),
                        _ => None,
                    })
                    .min();
                if let Some((_, i)) = next {
                    match conns[i].conn.recv(Duration::ZERO) {
                        Ok(bytes) => return Self::accept(&mut conns[i], &bytes),
                        Err(_) => continue,
                    }
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(MsgError::Timeout);
            }
            self.shared.notify.wait_past(seen, (deadline - now).min(Duration::from_millis(50)));
        }
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        for c in self.shared.conns.lock().drain(..) {
            c.conn.close();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Joined,
    Left,
    Died,
}

impl EventKind {
    fn code(self) -> u8 {
        match self {
            EventKind::Joined => 1,
            EventKind::Left => 2,
            EventKind::Died => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(EventKind::Joined),
            2 => Some(EventKind::Left),
            3 => Some(EventKind::Died),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipEvent {
    /// Position in the pool's total order, from 1.
    pub seq: u64,
    pub kind: EventKind,
    pub member: String,
}

impl MembershipEvent {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.seq).u8(self.kind.code()).str(&self.member);
        w.frame(op::EVENT)
    }

    fn decode(frame: &[u8]) -> std::result::Result<Self, WireError> {
        let payload = crate::wire::expect_frame(frame, op::EVENT)?;
        let mut r = Reader::new(payload);
        let seq = r.u64()?;
        let code = r.u8()?;
        let kind = EventKind::from_code(code).ok_or(WireError::UnexpectedOpcode {
            got: code,
            wanted: op::EVENT,
        })?;
        Ok(Self {
            seq,
            kind,
            member: r.str()?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegistryConfig {
    /// Registry ticks without any frame before a member is declared dead.
    pub missed_beats: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self { missed_beats: 3 }
    }
}

struct Slot {
    member: Option<String>,
    conn: Connection,
    last_seen: u64,
}

struct RegistryState {
    round: u64,
    slots: Vec<Slot>,
    log: Vec<MembershipEvent>,
    live: BTreeSet<String>,
}

/// The pool's membership service.
pub struct Registry {
    endpoint: MsgEndpoint,
    pool: String,
    config: RegistryConfig,
    incoming: ReceiveQueue,
    state: Mutex<RegistryState>,
    stop: AtomicBool,
}

type ReceiveQueue = Arc<Mutex<Vec<Connection>>>;

impl Registry {
    /// Starts the registry for `pool` as a client of `hub`.
    pub fn start(overlay: &Overlay, endpoint: &Endpoint, hub: &str, pool: &str, config: RegistryConfig) -> Result<Arc<Self>> {
        let addr = overlay.attach(endpoint, hub, &format!("registry-{pool}"))?;
        let incoming: ReceiveQueue = Arc::default();
        let sink = incoming.clone();
        overlay.listen(
            &addr,
            Arc::new(move |conn: Connection, info: Incoming| {
                if info.tag == REGISTRY_PORT {
                    sink.lock().push(conn);
                } else {
                    conn.close();
                }
            }),
        )?;
        Ok(Arc::new(Self {
            endpoint: MsgEndpoint {
                overlay: overlay.clone(),
                addr,
                endpoint: endpoint.clone(),
                ports: Arc::default(),
            },
            pool: pool.to_string(),
            config,
            incoming,
            state: Mutex::new(RegistryState {
                round: 0,
                slots: Vec::new(),
                log: Vec::new(),
                live: BTreeSet::new(),
            }),
            stop: AtomicBool::new(false),
        }))
    }

    pub fn address(&self) -> &VirtualAddress {
        self.endpoint.address()
    }

    pub fn pool(&self) -> &str {
        &self.pool
    }

    pub fn members(&self) -> Vec<String> {
        self.state.lock().live.iter().cloned().collect()
    }

    pub fn events(&self) -> Vec<MembershipEvent> {
        self.state.lock().log.clone()
    }

    /// One registry round: accept new connections, read every frame that
    /// has been sent, detect failures and broadcast the resulting events.
    /// Returns the events appended this round.
    pub fn tick(&self) -> Vec<MembershipEvent> {
        let mut st = self.state.lock();
        st.round += 1;
        let round = st.round;
        let fresh: Vec<Connection> = std::mem::take(&mut *self.incoming.lock());
        st.slots.extend(fresh.into_iter().map(|conn| Slot {
            member: None,
            conn,
            last_seen: round,
        }));

        let mut pending: Vec<(EventKind, String)> = Vec::new();
        let mut gone = Vec::new();
        for (i, slot) in st.slots.iter_mut().enumerate() {
            loop {
                match slot.conn.readiness() {
                    Readiness::Ready | Readiness::At(_) => {}
                    Readiness::Empty => break,
                    Readiness::Closed => {
                        if let Some(m) = slot.member.take() {
                            pending.push((EventKind::Died, m));
                        }
                        gone.push(i);
                        break;
                    }
                }
                let Ok(frame) = slot.conn.recv(Duration::ZERO) else { continue };
                slot.last_seen = round;
                let Ok((opcode, payload)) = decode_frame(&frame) else { continue };
                let name = Reader::new(payload).str().unwrap_or_default();
                match opcode {
                    op::JOIN if slot.member.is_none() => {
                        slot.member = Some(name.clone());
                        pending.push((EventKind::Joined, name));
                    }
                    op::LEAVE => {
                        if let Some(m) = slot.member.take() {
                            pending.push((EventKind::Left, m));
                        }
                        slot.conn.close();
                        gone.push(i);
                        break;
                    }
                    _ => {}
                }
            }
            if !gone.contains(&i) && round.saturating_sub(slot.last_seen) >= u64::from(self.config.missed_beats) {
                if let Some(m) = slot.member.take() {
                    pending.push((EventKind::Died, m));
                }
                slot.conn.close();
                gone.push(i);
            }
        }
        gone.sort_unstable();
        gone.dedup();
        for i in gone.into_iter().rev() {
            st.slots.remove(i);
        }

        let mut appended = Vec::new();
        let mut queue: std::collections::VecDeque<(EventKind, String)> = pending.into();
        while let Some((kind, member)) = queue.pop_front() {
            match kind {
                EventKind::Joined => {
                    st.live.insert(member.clone());
                }
                EventKind::Left | EventKind::Died => {
                    if !st.live.remove(&member) {
                        continue;
                    }
                }
            }
            let event = MembershipEvent {
                seq: st.log.len() as u64 + 1,
                kind,
                member,
            };
            let frame = event.encode();
            let mut failed = Vec::new();
            st.slots.retain(|s| match &s.member {
                Some(m) if s.conn.send(&frame).is_err() => {
                    failed.push(m.clone());
                    false
                }
                _ => true,
            });
            queue.extend(failed.into_iter().map(|m| (EventKind::Died, m)));
            st.log.push(event.clone());
            appended.push(event);
        }
        appended
    }

    /// Ticks every `period` on a background thread until [`Registry::stop`].
    pub fn spawn(self: &Arc<Self>, period: Duration) -> thread::JoinHandle<()> {
        let reg = self.clone();
        thread::Builder::new()
            .name(format!("registry-{}", self.pool))
            .spawn(move || {
                while !reg.stop.load(Ordering::SeqCst) {
                    reg.tick();
                    thread::sleep(period);
                }
            })
            .expect("spawn registry thread")
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// What a member has learned about the pool so far.
#[derive(Debug, Default)]
pub struct PoolView {
    live: RwLock<BTreeSet<String>>,
    dead: RwLock<BTreeSet<String>>,
    log: Mutex<Vec<MembershipEvent>>,
    notify: Arc<Notify>,
}

impl PoolView {
    pub fn is_dead(&self, member: &str) -> bool {
        self.dead.read().contains(member)
    }

    pub fn live(&self) -> BTreeSet<String> {
        self.live.read().clone()
    }

    pub fn log(&self) -> Vec<MembershipEvent> {
        self.log.lock().clone()
    }

    /// Waits until `member` is declared dead or the timeout elapses.
    pub fn wait_dead(&self, member: &str, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let seen = self.notify.generation();
            if self.is_dead(member) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            self.notify.wait_past(seen, deadline - now);
        }
    }

    fn apply(&self, e: &MembershipEvent) {
        match e.kind {
            EventKind::Joined => {
                self.live.write().insert(e.member.clone());
            }
            EventKind::Left => {
                self.live.write().remove(&e.member);
            }
            EventKind::Died => {
                self.live.write().remove(&e.member);
                self.dead.write().insert(e.member.clone());
            }
        }
        self.log.lock().push(e.clone());
        self.notify.bump();
    }
}

/// A pool member's handle on its registry connection.
pub struct Member {
    id: String,
    conn: Connection,
    view: Arc<PoolView>,
}

impl Member {
    /// Joins the pool served at `registry` as `ep`'s client id.
    pub fn join(ep: &MsgEndpoint, registry: &VirtualAddress) -> Result<Self> {
        let unreachable = |_| MsgError::RegistryUnreachable(registry.client_id.clone());
        let conn = ep.overlay.smart_connect(&ep.addr, registry, REGISTRY_PORT).map_err(unreachable)?;
        let id = ep.addr.client_id.clone();
        let mut w = Writer::new();
        w.str(&id);
        conn.send(&w.frame(op::JOIN))
            .map_err(|_| MsgError::RegistryUnreachable(registry.client_id.clone()))?;
        Ok(Self {
            id,
            conn,
            view: Arc::default(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn view(&self) -> Arc<PoolView> {
        self.view.clone()
    }

    pub fn heartbeat(&self) -> Result<()> {
        let mut w = Writer::new();
        w.str(&self.id);
        self.conn
            .send(&w.frame(op::HEARTBEAT))
            .map_err(|_| MsgError::RegistryUnreachable(self.conn.peer().client_id.clone()))
    }

    pub fn leave(&self) -> Result<()> {
        let mut w = Writer::new();
        w.str(&self.id);
        let _ = self.conn.send(&w.frame(op::LEAVE));
        self.conn.close();
        Ok(())
    }

    /// Blocks for the next membership event.
    pub fn next_event(&self, timeout: Duration) -> Result<MembershipEvent> {
        let frame = self.conn.recv(timeout).map_err(|e| match e {
            NetError::Timeout => MsgError::Timeout,
            _ => MsgError::RegistryUnreachable(self.conn.peer().client_id.clone()),
        })?;
        let e = MembershipEvent::decode(&frame)?;
        self.view.apply(&e);
        Ok(e)
    }

    /// Returns every event that has already arrived.
    pub fn drain_events(&self) -> Vec<MembershipEvent> {
        let mut out = Vec::new();
        while let Ok(Some(frame)) = self.conn.try_recv() {
            if let Ok(e) = MembershipEvent::decode(&frame) {
                self.view.apply(&e);
                out.push(e);
            }
        }
        out
    }

    /// Sends heartbeats every `period` and applies incoming events, until
    /// the registry connection closes or `stop` is set.
    pub fn spawn(self: &Arc<Self>, period: Duration, stop: Arc<AtomicBool>) -> thread::JoinHandle<()> {
        let me = self.clone();
        thread::Builder::new()
            .name(format!("member-{}", self.id))
            .spawn(move || {
                let mut last_beat = Instant::now() - period;
                while !stop.load(Ordering::SeqCst) {
                    if last_beat.elapsed() >= period {
                        if me.heartbeat().is_err() {
                            break;
                        }
                        last_beat = Instant::now();
                    }
                    match me.next_event(period.min(Duration::from_millis(20))) {
                        Ok(_) | Err(MsgError::Timeout) => {}
                        Err(_) => break,
                    }
                }
            })
            .expect("spawn member thread")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{Fabric, FabricNode, FabricSpec, LinkPolicy, Rule};
    use crate::overlay::{OverlayConfig, Strategy};

    const T: Duration = Duration::from_secs(2);

    fn world() -> Overlay {
        let fabric = Fabric::new(FabricSpec {
            nodes: vec![
                FabricNode::standalone("laptop"),
                FabricNode::frontend("fa", "a"),
                FabricNode::compute("a0", "a", false),
                FabricNode::compute("a1", "a", false),
            ],
            policies: vec![LinkPolicy::new("!@a", "@a", Rule::DenyInbound, 2).unwrap()],
            default_latency: 1,
        })
        .unwrap();
        let ov = Overlay::new(fabric, OverlayConfig::default());
        ov.start_hub("laptop").unwrap();
        ov.start_hub("fa").unwrap();
        ov.link_hubs("laptop", "fa").unwrap();
        ov.converge();
        ov
    }

    fn endpoint(ov: &Overlay, node: &str, hub: &str, name: &str) -> MsgEndpoint {
        let ep = ov.fabric().spawn_process(node).unwrap();
        MsgEndpoint::attach(ov, &ep, hub, name).unwrap()
    }

    fn registry(ov: &Overlay) -> Arc<Registry> {
        let ep = ov.fabric().spawn_process("laptop").unwrap();
        Registry::start(ov, &ep, "laptop", "pool", RegistryConfig::default()).unwrap()
    }

    #[test]
    fn message_frame_layout() {
        let f = encode_message(7, b"ab");
        assert_eq!(f, [10, 0, 0, 0, 7, 0, 0, 0, 0, 0, 0, 0, b'a', b'b']);
        assert_eq!(decode_message(&f).unwrap(), (7, &b"ab"[..]));
        assert!(decode_message(&f[..13]).is_err());
    }

    #[test]
    fn fifo_on_one_connection() {
        let ov = world();
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let b = endpoint(&ov, "a0", "fa", "b");
        let rp = b.receive_port("in");
        let mut sp = a.send_port("out");
        let route = sp.connect(b.address(), "in").unwrap();
        assert_eq!(route.strategy, Strategy::Reverse);
        sp.write(b"x").unwrap();
        sp.write(b"y").unwrap();
        let m1 = rp.read(T).unwrap();
        let m2 = rp.read(T).unwrap();
        assert_eq!((m1.payload, m1.seq), (b"x".to_vec(), 0));
        assert_eq!((m2.payload, m2.seq), (b"y".to_vec(), 1));
        assert_eq!(m1.from, *a.address());
        assert_eq!(rp.try_read().unwrap(), None);
    }

    #[test]
    fn fan_out_reaches_every_port_once() {
        let ov = world();
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let b = endpoint(&ov, "a0", "fa", "b");
        let c = endpoint(&ov, "a1", "fa", "c");
        let (rb, rc) = (b.receive_port("in"), c.receive_port("in"));
        let mut sp = a.send_port("out");
        sp.connect(b.address(), "in").unwrap();
        sp.connect(c.address(), "in").unwrap();
        sp.write(b"m").unwrap();
        for rp in [&rb, &rc] {
            assert_eq!(rp.read(T).unwrap().payload, b"m");
            assert!(matches!(rp.read(Duration::from_millis(20)), Err(MsgError::Timeout)));
        }
    }

    #[test]
    fn oversized_messages_are_refused() {
        let ov = world();
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let mut sp = a.send_port("out");
        assert_eq!(sp.write(&vec![0; MAX_MESSAGE + 1]), Err(MsgError::MessageTooLarge(MAX_MESSAGE + 1)));
        assert_eq!(sp.write(b"x"), Err(MsgError::PortClosed));
    }

    #[test]
    fn membership_events_in_order() {
        let ov = world();
        let reg = registry(&ov);
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let b = endpoint(&ov, "a0", "fa", "b");
        let ma = Member::join(&a, reg.address()).unwrap();
        reg.tick();
        let first = ma.next_event(T).unwrap();
        assert_eq!((first.kind, first.member.as_str()), (EventKind::Joined, "a"));
        let mb = Member::join(&b, reg.address()).unwrap();
        reg.tick();
        assert_eq!(ma.next_event(T).unwrap().member, "b");
        let own = mb.next_event(T).unwrap();
        assert_eq!((own.kind, own.member.as_str()), (EventKind::Joined, "b"));
        assert_eq!(reg.members(), ["a", "b"]);
        mb.leave().unwrap();
        reg.tick();
        let left = ma.next_event(T).unwrap();
        assert_eq!((left.kind, left.member.as_str(), left.seq), (EventKind::Left, "b", 3));
    }

    #[test]
    fn severed_member_is_reported_dead() {
        let ov = world();
        let reg = registry(&ov);
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let b = endpoint(&ov, "a0", "fa", "b");
        let ma = Member::join(&a, reg.address()).unwrap();
        let _mb = Member::join(&b, reg.address()).unwrap();
        reg.tick();
        ma.drain_events();
        let rp = b.receive_port("in");
        let mut sp = a.send_port("out");
        sp.watch_pool(ma.view());
        sp.connect(b.address(), "in").unwrap();
        sp.write(b"before").unwrap();
        assert_eq!(rp.read(T).unwrap().payload, b"before");

        ov.fabric().sever_process(b.endpoint().process);
        let events = reg.tick();
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].kind, events[0].member.as_str()), (EventKind::Died, "b"));
        let e = ma.next_event(T).unwrap();
        assert_eq!(e.kind, EventKind::Died);
        assert!(ma.view().is_dead("b"));
        assert_eq!(sp.write(b"after"), Err(MsgError::PeerGone("b".into())));
    }

    #[test]
    fn silent_member_dies_after_missed_beats() {
        let ov = world();
        let reg = registry(&ov);
        let a = endpoint(&ov, "laptop", "laptop", "a");
        let b = endpoint(&ov, "a0", "fa", "b");
        let ma = Member::join(&a, reg.address()).unwrap();
        let _mb = Member::join(&b, reg.address()).unwrap();
        reg.tick();
        for round in 1..=3 {
            ma.heartbeat().unwrap();
            let events = reg.tick();
            if round < 3 {
                assert!(events.is_empty(), "round {round}: {events:?}");
            } else {
                assert_eq!(events.len(), 1);
                assert_eq!((events[0].kind, events[0].member.as_str()), (EventKind::Died, "b"));
            }
        }
        assert_eq!(reg.members(), ["a"]);
    }

    #[test]
    fn unreachable_registry() {
        let ov = world();
        let reg = registry(&ov);
        let a = endpoint(&ov, "laptop", "laptop", "a");
        ov.fabric().sever_node("laptop");
        ov.detach(reg.address()).ok();
        assert!(matches!(Member::join(&a, reg.address()), Err(MsgError::RegistryUnreachable(_))));
    }

    #[test]
    fn all_members_see_one_order() {
        let ov = world();
        let reg = registry(&ov);
        let eps: Vec<MsgEndpoint> = (0..4)
            .map(|i| endpoint(&ov, ["laptop", "a0", "a1", "fa"][i], if i == 0 { "laptop" } else { "fa" }, &format!("m{i}")))
            .collect();
        let members: Vec<Member> = eps.iter().map(|e| Member::join(e, reg.address()).unwrap()).collect();
        reg.tick();
        members[3].leave().unwrap();
        ov.fabric().sever_process(eps[2].endpoint().process);
        reg.tick();
        let n = reg.events().len();
        assert_eq!(n, 6);
        let logs: Vec<Vec<MembershipEvent>> = members[..2]
            .iter()
            .map(|m| (0..n).map(|_| m.next_event(T).unwrap()).collect())
            .collect();
        assert_eq!(logs[0], logs[1]);
        assert_eq!(logs[0], reg.events());
    }
}
