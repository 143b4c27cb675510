//! The daemon: owns the fabric, overlay, registry and deployer, and serves
//! couplers over loopback TCP.
//!
//! Requests (control framing):
//!
//! | opcode | request payload | answer |
//! |---|---|---|
//! | `CREATE_WORKER` | str JSON request | OK str JSON worker info |
//! | `CALL` | u32 worker, call frame | `CALL` u32 worker, reply frame, or `CALL_FAILED` |
//! | `STATUS` | - | OK str JSON status |
//! | `CANCEL_WORKER` | u32 worker, u8 mode (0 release, 1 kill) | OK |
//! | `REPORT_DRIFT` | u64 steps, f64 energy, f64 drift | OK |
//! | `STOP` | - | OK, then the daemon shuts down |
//!
//! `FAIL` carries u8 error code and str message. `CALL_FAILED` carries u32
//! worker, u32 callId, u8 code, str message.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use jungle_kernels::Exec;
use parking_lot::Mutex;

use super::manifest_for;
use super::proxy::{self, ProxySetup};
use super::status::{DaemonStatus, EnergyStatus, OverlayStatus, ResourceStatus, StatusReport, WorkerState, WorkerStatus, STATUS_SCHEMA};
use super::{CallStats, CouplerError, Result, WorkerInfo, WorkerRequest};
use crate::deploy::{DeployConfig, DeployError, Deployer, JobSpec, Program, ResourceSpec};
use crate::msglayer::{EventKind, Member, MsgEndpoint, MsgError, PoolView, ReceivePort, Registry, RegistryConfig, SendPort, MAX_MESSAGE};
use crate::netsim::{Fabric, FabricSpec, Tick};
use crate::overlay::{Overlay, OverlayConfig, VirtualAddress};
use crate::wire::{encode_frame, op, read_frame, Reader, Writer};

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    /// `host:port` to listen on; port 0 picks a free one.
    pub listen: String,
    pub fabric: FabricSpec,
    /// Fabric node the daemon (and coupler) run on.
    pub host: String,
    pub resources: Vec<ResourceSpec>,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub pool: String,
    pub registry_period: Duration,
    pub heartbeat_period: Duration,
    pub missed_beats: u32,
    /// How often expired reservations are reaped.
    pub reap_period: Duration,
    /// Wall time a new worker has to report ready.
    pub ready_timeout: Duration,
    pub exec: Exec,
    pub overlay: OverlayConfig,
}

impl DaemonConfig {
    pub fn new(fabric: FabricSpec, host: &str, resources: Vec<ResourceSpec>, base_dir: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            fabric,
            host: host.into(),
            resources,
            base_dir,
            out_dir,
            pool: "jungle".into(),
            registry_period: Duration::from_millis(200),
            heartbeat_period: Duration::from_millis(100),
            missed_beats: 3,
            reap_period: Duration::from_millis(10),
            ready_timeout: Duration::from_secs(60),
            exec: Exec::default(),
            overlay: OverlayConfig::default(),
        }
    }
}

/// Write half of one coupler connection.
struct Conn {
    writer: Mutex<BufWriter<TcpStream>>,
}

impl Conn {
    fn send(&self, frame: &[u8]) {
        let mut w = self.writer.lock();
        let _ = w.write_all(frame).and_then(|_| w.flush());
    }

    fn fail(&self, e: &CouplerError) {
        let mut w = Writer::new();
        w.u8(e.code()).str(&e.payload());
        self.send(&w.frame(op::FAIL));
    }

    fn call_failed(&self, worker: u32, call: u32, e: &CouplerError) {
        let mut w = Writer::new();
        w.u32(worker).u32(call).u8(e.code()).str(&e.payload());
        self.send(&w.frame(op::CALL_FAILED));
    }
}

struct InFlight {
    conn: Arc<Conn>,
    client_call: u32,
    sent: Instant,
    sent_tick: Tick,
}

#[derive(Default)]
struct CallTable {
    inflight: HashMap<u32, InFlight>,
    /// Set once the worker stops taking calls.
    closed: Option<(WorkerState, String)>,
}

struct WorkerEntry {
    info: WorkerInfo,
    proxy: VirtualAddress,
    calls: Mutex<SendPort>,
    table: Mutex<CallTable>,
    next_call: AtomicU32,
    stats: Mutex<CallStats>,
    rtt_ticks: AtomicU64,
}

impl WorkerEntry {
    /// Stops new calls and fails the ones in flight.
    fn close(&self, state: WorkerState, reason: &str) {
        let drained: Vec<(u32, InFlight)> = {
            let mut t = self.table.lock();
            if t.closed.is_some() {
                return;
            }
            t.closed = Some((state, reason.to_owned()));
            t.inflight.drain().collect()
        };
        let err = CouplerError::WorkerDied(reason.to_owned());
        for (_, f) in drained {
            f.conn.call_failed(self.info.id, f.client_call, &err);
        }
    }

    fn state(&self) -> (WorkerState, Option<String>) {
        match &self.table.lock().closed {
            None => (WorkerState::Live, None),
            Some((s, r)) => (*s, Some(r.clone())),
        }
    }
}

struct Inner {
    cfg: DaemonConfig,
    endpoint: String,
    overlay: Overlay,
    deployer: Deployer,
    registry: Arc<Registry>,
    msg: MsgEndpoint,
    member: Arc<Member>,
    view: Arc<PoolView>,
    workers: Mutex<BTreeMap<u32, Arc<WorkerEntry>>>,
    next_worker: AtomicU32,
    creating: Mutex<()>,
    stop: Arc<AtomicBool>,
    stopped: AtomicBool,
    started: Instant,
    energy: Mutex<Option<EnergyStatus>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// A running daemon. Dropping it does not stop it; call [`Daemon::stop`].
pub struct Daemon {
    inner: Arc<Inner>,
    addr: SocketAddr,
}

fn launch_error(e: DeployError) -> CouplerError {
    match e {
        DeployError::UnknownResource(r) => CouplerError::UnknownResource(r),
        other => CouplerError::LaunchFailed(other.to_string()),
    }
}

impl Daemon {
    pub fn start(cfg: DaemonConfig) -> Result<Daemon> {
        let listener = TcpListener::bind(&cfg.listen).map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => CouplerError::PortInUse(cfg.listen.clone()),
            _ => CouplerError::Io(format!("{}: {e}", cfg.listen)),
        })?;
        let addr = listener.local_addr().map_err(|e| CouplerError::Io(e.to_string()))?;
        let config_err = |e: &dyn std::fmt::Display| CouplerError::Config(e.to_string());

        let fabric = Fabric::new(cfg.fabric.clone()).map_err(|e| config_err(&e))?;
        let overlay = Overlay::new(fabric.clone(), cfg.overlay.clone());
        overlay.start_hub(&cfg.host).map_err(|e| config_err(&e))?;
        let process = || fabric.spawn_process(&cfg.host).map_err(|e| config_err(&e));
        let deployer = Deployer::with_default_adapters(
            overlay.clone(),
            DeployConfig {
                base_dir: cfg.base_dir.clone(),
                out_dir: cfg.out_dir.clone(),
                daemon_hub: cfg.host.clone(),
                origin: process()?,
            },
        );
        for r in &cfg.resources {
            deployer.add_resource(r.clone()).map_err(|e| config_err(&e))?;
        }
        let registry = Registry::start(
            &overlay,
            &process()?,
            &cfg.host,
            &cfg.pool,
            RegistryConfig {
                missed_beats: cfg.missed_beats,
            },
        )
        .map_err(|e| config_err(&e))?;
        let msg = MsgEndpoint::attach(&overlay, &process()?, &cfg.host, "daemon").map_err(|e| config_err(&e))?;
        let member = Arc::new(Member::join(&msg, registry.address()).map_err(|e| config_err(&e))?);
        let stop = Arc::new(AtomicBool::new(false));
        let view = member.view();

        let inner = Arc::new(Inner {
            endpoint: addr.to_string(),
            overlay,
            deployer,
            registry: registry.clone(),
            msg,
            member: member.clone(),
            view,
            workers: Mutex::default(),
            next_worker: AtomicU32::new(1),
            creating: Mutex::new(()),
            stop: stop.clone(),
            stopped: AtomicBool::new(false),
            started: Instant::now(),
            energy: Mutex::new(None),
            threads: Mutex::default(),
            cfg,
        });

        let mut threads = vec![
            registry.spawn(inner.cfg.registry_period),
            member.spawn(inner.cfg.heartbeat_period, stop.clone()),
        ];
        {
            let inner = inner.clone();
            threads.push(spawn("reaper", move || {
                while !inner.stop.load(Ordering::SeqCst) {
                    inner.deployer.reap();
                    thread::sleep(inner.cfg.reap_period);
                }
            }));
        }
        {
            let inner = inner.clone();
            threads.push(spawn("daemon-accept", move || {
                for stream in listener.incoming() {
                    if inner.stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let inner = inner.clone();
                    spawn("daemon-conn", move || serve(inner, stream));
                }
            }));
        }
        inner.threads.lock().extend(threads);
        Ok(Daemon { inner, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn overlay(&self) -> &Overlay {
        &self.inner.overlay
    }

    pub fn deployer(&self) -> &Deployer {
        &self.inner.deployer
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.inner.registry
    }

    pub fn status(&self) -> StatusReport {
        self.inner.status()
    }

    pub fn is_stopped(&self) -> bool {
        self.inner.stopped.load(Ordering::SeqCst)
    }

    /// Cancels live workers, drains the pool and stops serving.
    pub fn stop(&self) {
        self.inner.shutdown();
        self.join();
    }

    /// Blocks until the daemon has been stopped, by [`Daemon::stop`] or a
    /// `STOP` request.
    pub fn join(&self) {
        while !self.inner.stopped.load(Ordering::SeqCst) {
            thread::sleep(Duration::from_millis(20));
        }
        let threads: Vec<JoinHandle<()>> = std::mem::take(&mut *self.inner.threads.lock());
        for t in threads {
            let _ = t.join();
        }
    }
}

fn spawn(name: &str, f: impl FnOnce() + Send + 'static) -> JoinHandle<()> {
    thread::Builder::new().name(name.into()).spawn(f).expect("spawn daemon thread")
}

fn serve(inner: Arc<Inner>, stream: TcpStream) {
    stream.set_nodelay(true).ok();
    let Ok(write_half) = stream.try_clone() else { return };
    let conn = Arc::new(Conn {
        writer: Mutex::new(BufWriter::new(write_half)),
    });
    let mut r = BufReader::new(stream);
    while let Ok((opcode, payload)) = read_frame(&mut r, MAX_MESSAGE + 64) {
        let answer = match opcode {
            op::CALL => {
                inner.forward_call(&conn, &payload);
                continue;
            }
            op::CREATE_WORKER => inner.create_worker_frame(&payload),
            op::STATUS => {
                let mut w = Writer::new();
                w.str(&inner.status().to_json());
                Ok(w.finish())
            }
            op::CANCEL_WORKER => inner.cancel_worker(&payload).map(|_| Vec::new()),
            op::REPORT_DRIFT => inner.report_energy(&payload).map(|_| Vec::new()),
            op::STOP => {
                conn.send(&encode_frame(op::OK, &[]));
                inner.shutdown();
                break;
            }
            other => Err(CouplerError::Protocol(format!("unknown opcode {other:#04x}"))),
        };
        match answer {
            Ok(body) => conn.send(&encode_frame(op::OK, &body)),
            Err(e) => conn.fail(&e),
        }
    }
}

fn protocol(e: impl std::fmt::Display) -> CouplerError {
    CouplerError::Protocol(e.to_string())
}

impl Inner {
    fn worker(&self, id: u32) -> Result<Arc<WorkerEntry>> {
        self.workers
            .lock()
            .get(&id)
            .cloned()
            .ok_or_else(|| CouplerError::UnknownWorker(id.to_string()))
    }

    fn create_worker_frame(self: &Arc<Self>, payload: &[u8]) -> Result<Vec<u8>> {
        let text = Reader::new(payload).str().map_err(protocol)?;
        let req: WorkerRequest = serde_json::from_str(&text).map_err(protocol)?;
        let info = self.create_worker(&req)?;
        let mut w = Writer::new();
        w.str(&serde_json::to_string(&info).expect("worker info serialises"));
        Ok(w.finish())
    }

    fn create_worker(self: &Arc<Self>, req: &WorkerRequest) -> Result<WorkerInfo> {
        if self.stop.load(Ordering::SeqCst) {
            return Err(CouplerError::LaunchFailed("daemon is stopping".into()));
        }
        let _serial = self.creating.lock();
        manifest_for(&req.kernel).ok_or_else(|| CouplerError::KernelUnknown(req.kernel.clone()))?;
        self.deployer.resource(&req.resource).map_err(launch_error)?;
        if req.nodes == 0 {
            return Err(CouplerError::BadArguments("a worker needs at least one node".into()));
        }
        let id = self.next_worker.fetch_add(1, Ordering::SeqCst);
        let replies = self.msg.receive_port(&proxy::reply_port(id));
        let setup = ProxySetup {
            worker: id,
            kernel: req.kernel.clone(),
            registry: self.registry.address().clone(),
            daemon: self.msg.address().clone(),
            heartbeat: self.cfg.heartbeat_period,
            exec: self.cfg.exec,
        };
        let program: Program = Arc::new(move |ctx| proxy::run(ctx, &setup));
        let mut spec = JobSpec::new(&req.kernel, req.nodes, req.nodes);
        spec.arguments = vec![format!("worker={id}"), format!("role={}", req.name)];
        let job = self.deployer.submit(&req.resource, spec, program).map_err(launch_error)?;

        let deadline = Instant::now() + self.cfg.ready_timeout;
        let proxy_addr = loop {
            match replies.read(Duration::from_millis(50)) {
                Ok(m) => break proxy::decode_hello(&m.payload).map_err(protocol)?,
                Err(MsgError::Timeout) => {}
                Err(e) => return Err(CouplerError::LaunchFailed(e.to_string())),
            }
            let info = self.deployer.job_info(&job.id).map_err(launch_error)?;
            if info.state.is_terminal() {
                return Err(CouplerError::LaunchFailed(format!(
                    "job {} ended {} before the worker was ready: {}",
                    job.id,
                    info.state,
                    info.reason.unwrap_or_default()
                )));
            }
            if Instant::now() >= deadline {
                let _ = self.deployer.cancel(&job.id);
                return Err(CouplerError::LaunchFailed(format!("job {} did not report ready in time", job.id)));
            }
        };
        // ready means the pool knows the proxy, so a later loss shows up as a death
        while !self.view.live().contains(&proxy_addr.client_id) {
            if self.deployer.poll_status(&job.id).map(|s| s.is_terminal()).unwrap_or(true) {
                return Err(CouplerError::LaunchFailed(format!("job {} ended before joining the pool", job.id)));
            }
            if Instant::now() >= deadline {
                let _ = self.deployer.cancel(&job.id);
                return Err(CouplerError::LaunchFailed(format!("job {} did not join the pool in time", job.id)));
            }
            thread::sleep(Duration::from_millis(5));
        }
        let mut calls = self.msg.send_port(&format!("calls-{id}"));
        calls.watch_pool(self.view.clone());
        let route = calls.connect(&proxy_addr, "calls").map_err(|e| {
            let _ = self.deployer.cancel(&job.id);
            CouplerError::LaunchFailed(e.to_string())
        })?;
        let info = WorkerInfo {
            id,
            name: req.name.clone(),
            kernel: req.kernel.clone(),
            resource: req.resource.clone(),
            channel: req.channel,
            job: Some(job.id.clone()),
            proxy: Some(proxy_addr.client_id.clone()),
            nodes: self.deployer.job_info(&job.id).map(|j| j.nodes).unwrap_or_default(),
            route: Some(route),
        };
        let entry = Arc::new(WorkerEntry {
            info: info.clone(),
            proxy: proxy_addr,
            calls: Mutex::new(calls),
            table: Mutex::default(),
            next_call: AtomicU32::new(1),
            stats: Mutex::default(),
            rtt_ticks: AtomicU64::new(0),
        });
        self.workers.lock().insert(id, entry.clone());
        let inner = self.clone();
        let t = spawn(&format!("replies-{id}"), move || inner.read_replies(&entry, replies));
        self.threads.lock().push(t);
        Ok(info)
    }

    fn forward_call(&self, conn: &Arc<Conn>, payload: &[u8]) {
        let mut r = Reader::new(payload);
        let Ok(wid) = r.u32() else { return };
        let frame = r.rest();
        let Some(head) = frame.get(..4) else {
            conn.call_failed(wid, 0, &CouplerError::Protocol("call frame too short".into()));
            return;
        };
        let client_call = u32::from_le_bytes(head.try_into().expect("4 bytes"));
        let w = match self.worker(wid) {
            Ok(w) => w,
            Err(e) => return conn.call_failed(wid, client_call, &e),
        };
        let id = w.next_call.fetch_add(1, Ordering::Relaxed);
        let mut bytes = frame.to_vec();
        bytes[..4].copy_from_slice(&id.to_le_bytes());
        {
            let mut t = w.table.lock();
            if let Some((_, reason)) = &t.closed {
                return conn.call_failed(wid, client_call, &CouplerError::WorkerDied(reason.clone()));
            }
            t.inflight.insert(
                id,
                InFlight {
                    conn: conn.clone(),
                    client_call,
                    sent: Instant::now(),
                    sent_tick: self.overlay.fabric().now(),
                },
            );
        }
        w.stats.lock().bytes_sent += bytes.len() as u64;
        let sent = w.calls.lock().write(&bytes);
        if let Err(e) = sent {
            if w.table.lock().inflight.remove(&id).is_some() {
                conn.call_failed(wid, client_call, &CouplerError::WorkerDied(e.to_string()));
            }
        }
    }

    fn read_replies(&self, w: &WorkerEntry, port: ReceivePort) {
        let died = |w: &WorkerEntry, why: &str| {
            w.close(
                WorkerState::Died,
                &format!("worker {} ({} on {}) {why}", w.info.id, w.info.kernel, w.info.resource),
            )
        };
        let job = w.info.job.clone().unwrap_or_default();
        let mut ended_at: Option<Instant> = None;
        loop {
            match port.read(Duration::from_millis(20)) {
                Ok(m) => self.deliver(w, m.payload),
                Err(MsgError::Timeout) => {}
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
            if self.view.is_dead(&w.proxy.client_id) {
                died(w, "died");
                break;
            }
            let (state, _) = w.state();
            if state == WorkerState::Died {
                break;
            }
            let job_ended = self.deployer.poll_status(&job).map(|s| s.is_terminal()).unwrap_or(true);
            if job_ended {
                if state == WorkerState::Released {
                    break;
                }
                // the registry normally reports the death first
                let since = *ended_at.get_or_insert_with(Instant::now);
                if since.elapsed() > self.cfg.registry_period * (self.cfg.missed_beats + 2) {
                    let reason = self.deployer.job_info(&job).ok().and_then(|j| j.reason).unwrap_or_default();
                    died(w, &format!("ended: {reason}"));
                    break;
                }
            }
        }
        port.close();
    }

    fn deliver(&self, w: &WorkerEntry, mut bytes: Vec<u8>) {
        let Some(head) = bytes.get(..4) else { return };
        let id = u32::from_le_bytes(head.try_into().expect("4 bytes"));
        let Some(f) = w.table.lock().inflight.remove(&id) else { return };
        bytes[..4].copy_from_slice(&f.client_call.to_le_bytes());
        {
            let mut s = w.stats.lock();
            s.calls += 1;
            s.total_rtt_us += f.sent.elapsed().as_micros() as u64;
            s.bytes_received += bytes.len() as u64;
        }
        w.rtt_ticks
            .fetch_add(self.overlay.fabric().now().saturating_sub(f.sent_tick), Ordering::Relaxed);
        let mut out = Writer::new();
        out.u32(w.info.id).raw(&bytes);
        f.conn.send(&out.frame(op::CALL));
    }

    fn cancel_worker(&self, payload: &[u8]) -> Result<()> {
        let mut r = Reader::new(payload);
        let id = r.u32().map_err(protocol)?;
        let mode = r.u8().map_err(protocol)?;
        let w = self.worker(id)?;
        let job = w.info.job.clone().unwrap_or_default();
        match mode {
            super::client::RELEASE => {
                if w.state().0 != WorkerState::Live {
                    return Ok(());
                }
                let deadline = Instant::now() + Duration::from_secs(60);
                while !w.table.lock().inflight.is_empty() && Instant::now() < deadline {
                    thread::sleep(Duration::from_millis(5));
                }
                w.close(WorkerState::Released, "released");
                w.calls.lock().close();
                let state = self.deployer.wait(&job, Duration::from_secs(30)).map_err(launch_error)?;
                if !state.is_terminal() {
                    self.deployer.cancel(&job).map_err(launch_error)?;
                }
                self.await_departure(&w.proxy.client_id);
                Ok(())
            }
            super::client::KILL => {
                self.deployer.cancel(&job).map_err(launch_error)?;
                self.await_departure(&w.proxy.client_id);
                Ok(())
            }
            other => Err(CouplerError::Protocol(format!("unknown cancel mode {other}"))),
        }
    }

    /// Waits, bounded by the failure-detection window, until the pool has
    /// logged `member` leaving or dying.
    fn await_departure(&self, member: &str) {
        let deadline = Instant::now() + self.cfg.registry_period * (self.cfg.missed_beats + 5);
        while Instant::now() < deadline {
            let gone = self
                .view
                .log()
                .iter()
                .any(|e| e.member == member && matches!(e.kind, EventKind::Left | EventKind::Died));
            if gone {
                return;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    fn report_energy(&self, payload: &[u8]) -> Result<()> {
        let mut r = Reader::new(payload);
        let steps = r.u64().map_err(protocol)?;
        let energy = r.f64().map_err(protocol)?;
        let drift = r.f64().map_err(protocol)?;
        *self.energy.lock() = Some(EnergyStatus { steps, energy, drift });
        Ok(())
    }

    fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            while !self.stopped.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(10));
            }
            return;
        }
        let workers: Vec<Arc<WorkerEntry>> = self.workers.lock().values().cloned().collect();
        for w in &workers {
            w.close(WorkerState::Died, "daemon stopped");
        }
        self.deployer.shutdown();
        for w in &workers {
            if let Some(job) = &w.info.job {
                let _ = self.deployer.wait(job, Duration::from_secs(10));
            }
        }
        // wait for the registry to notice every proxy is gone
        let me = self.member.id().to_owned();
        let deadline = Instant::now() + self.cfg.registry_period * (self.cfg.missed_beats + 5);
        while self.registry.members().iter().any(|m| *m != me) && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.member.leave();
        thread::sleep(self.cfg.registry_period * 2);
        self.registry.stop();
        // wake the accept loop
        let _ = TcpStream::connect(&self.endpoint);
        self.stopped.store(true, Ordering::SeqCst);
    }

    fn status(&self) -> StatusReport {
        let routes = self.deployer.access_routes();
        let resources = self
            .deployer
            .resources()
            .into_iter()
            .map(|r| ResourceStatus {
                hub: self.deployer.hub_of(&r.name),
                access_route: routes.get(&r.name).cloned(),
                name: r.name,
                middleware: r.middleware,
                frontend: r.frontend,
                nodes: r.nodes,
                gpu_capable: r.gpu_capable,
            })
            .collect();
        let workers = self
            .workers
            .lock()
            .values()
            .map(|w| {
                let (state, reason) = w.state();
                let stats = *w.stats.lock();
                let mut s = WorkerStatus {
                    id: w.info.id,
                    name: w.info.name.clone(),
                    kernel: w.info.kernel.clone(),
                    resource: w.info.resource.clone(),
                    channel: w.info.channel,
                    job: w.info.job.clone(),
                    proxy: w.info.proxy.clone(),
                    nodes: w.info.nodes.clone(),
                    route: w.info.route.clone(),
                    state,
                    reason,
                    calls: 0,
                    mean_rtt_us: 0.0,
                    mean_rtt_ticks: 0.0,
                    bytes_sent: 0,
                    bytes_received: 0,
                };
                s.apply_stats(&stats);
                if stats.calls > 0 {
                    s.mean_rtt_ticks = w.rtt_ticks.load(Ordering::Relaxed) as f64 / stats.calls as f64;
                }
                s
            })
            .collect();
        StatusReport {
            schema: STATUS_SCHEMA.into(),
            daemon: DaemonStatus {
                endpoint: self.endpoint.clone(),
                pid: std::process::id(),
                host: self.cfg.host.clone(),
                pool: self.cfg.pool.clone(),
                uptime_ms: self.started.elapsed().as_millis() as u64,
                fabric_tick: self.overlay.fabric().now(),
                stopping: self.stop.load(Ordering::SeqCst),
            },
            resources,
            jobs: self.deployer.jobs(),
            workers,
            overlay: OverlayStatus {
                hubs: self.overlay.hubs(),
                routes: self.overlay.routes(),
            },
            membership: self.registry.events(),
            energy: self.energy.lock().clone(),
        }
    }
}
