//! Resource and job descriptions, middleware adapters and job lifecycle.
//!
//! A job is a set of ranks, each a thread bound to a fabric process on one
//! of the resource's nodes. Rank 0 leads: when it exits, the remaining ranks
//! are told to stop. Every job gets `<out>/logs/<jobid>.out` and `.err`, and
//! stage-in files land in `<out>/stage/<jobid>/`.
//!
//! `local` runs on the resource frontend with plain file copies. `shell` and
//! `simsched` reach a gatekeeper on the frontend through the overlay, so
//! files and launch requests cross the fabric (and its firewalls) like an
//! ssh session would. `simsched` adds a FIFO queue, per-node slots and
//! reservations that expire.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Endpoint, Tick};
use crate::overlay::{Connection, Overlay, OverlayError, VirtualAddress};
use crate::wire::{op, Reader, Writer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error("no adapter supports middleware `{0}`")]
    NoAdapter(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("resource `{0}` declared twice")]
    DuplicateResource(String),
    #[error("invalid resource `{name}`: {reason}")]
    InvalidResource { name: String, reason: String },
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error("stage-in of `{path}` failed: {reason}")]
    StageInFailed { path: String, reason: String },
    #[error("launch on `{resource}` failed: {reason}")]
    LaunchFailed { resource: String, reason: String },
    #[error("resource `{resource}` has {available} nodes, job needs {requested}")]
    InsufficientNodes {
        resource: String,
        requested: u32,
        available: u32,
    },
    #[error("cannot start hub for `{resource}`: {reason}")]
    HubStartFailed { resource: String, reason: String },
    #[error("unknown job `{0}`")]
    UnknownJob(String),
}

pub type Result<T> = std::result::Result<T, DeployError>;

fn default_slots() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub name: String,
    pub middleware: String,
    /// Fabric node of the resource's front end.
    pub frontend: String,
    pub nodes: u32,
    /// Where the framework is pre-installed; must exist.
    pub install_path: String,
    #[serde(default)]
    pub gpu_capable: bool,
    /// Fabric nodes that run job processes; the frontend when empty.
    #[serde(default)]
    pub compute_nodes: Vec<String>,
    /// Processes a `simsched` node runs at once.
    #[serde(default = "default_slots")]
    pub slots_per_node: u32,
    /// `simsched` reservation length in fabric ticks.
    #[serde(default)]
    pub reservation_ticks: Option<Tick>,
}

impl ResourceSpec {
    pub fn new(name: &str, middleware: &str, frontend: &str, nodes: u32) -> Self {
        Self {
            name: name.into(),
            middleware: middleware.into(),
            frontend: frontend.into(),
            nodes,
            install_path: ".".into(),
            gpu_capable: false,
            compute_nodes: Vec::new(),
            slots_per_node: 1,
            reservation_ticks: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(DeployError::InvalidResource {
                name: self.name.clone(),
                reason: reason.into(),
            })
        };
        if self.nodes == 0 {
            return bad("nodes must be at least 1");
        }
        if self.slots_per_node == 0 {
            return bad("slots_per_node must be at least 1");
        }
        if !self.compute_nodes.is_empty() && self.compute_nodes.len() != self.nodes as usize {
            return bad("compute_nodes must list exactly `nodes` entries");
        }
        Ok(())
    }

    /// The nodes jobs may run on.
    pub fn run_nodes(&self) -> Vec<String> {
        if self.compute_nodes.is_empty() {
            vec![self.frontend.clone(); self.nodes as usize]
        } else {
            self.compute_nodes.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFile {
    pub local: PathBuf,
    pub remote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub kernel: String,
    pub process_count: u32,
    pub node_count: u32,
    #[serde(default)]
    pub stage_in: Vec<StageFile>,
    #[serde(default)]
    pub arguments: Vec<String>,
}

impl JobSpec {
    pub fn new(kernel: &str, process_count: u32, node_count: u32) -> Self {
        Self {
            kernel: kernel.into(),
            process_count,
            node_count,
            stage_in: Vec::new(),
            arguments: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.node_count == 0 || self.process_count < self.node_count {
            return Err(DeployError::InvalidJob(format!(
                "need process_count >= node_count >= 1, got {} and {}",
                self.process_count, self.node_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
    Killed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Killed)
    }

    /// States only move forward: pending, running, then one terminal state.
    pub fn can_move_to(self, next: JobState) -> bool {
        match self {
            JobState::Pending => next != JobState::Pending,
            JobState::Running => next.is_terminal(),
            _ => false,
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Pending => "pending",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
            JobState::Killed => "killed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobHandle {
    pub id: String,
    pub resource: String,
}

/// A one-shot stop signal.
#[derive(Debug, Clone, Default)]
pub struct CancelToken {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl CancelToken {
    pub fn fire(&self) {
        *self.inner.0.lock() = true;
        self.inner.1.notify_all();
    }

    pub fn is_set(&self) -> bool {
        *self.inner.0.lock()
    }

    /// Waits for the signal; returns whether it fired.
    pub fn wait(&self, timeout: Duration) -> bool {
        let mut set = self.inner.0.lock();
        if !*set {
            self.inner.1.wait_for(&mut set, timeout);
        }
        *set
    }
}

/// Line-oriented writer for one job log file.
#[derive(Debug, Clone)]
pub struct JobLog {
    file: Arc<Mutex<File>>,
}

impl JobLog {
    fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            file: Arc::new(Mutex::new(File::create(path)?)),
        })
    }

    pub fn line(&self, text: &str) {
        let mut f = self.file.lock();
        let _ = writeln!(f, "{text}");
    }
}

/// Everything a rank needs to run.
#[derive(Clone)]
pub struct ProcessContext {
    pub job_id: String,
    pub resource: String,
    pub rank: u32,
    pub node: String,
    pub endpoint: Endpoint,
    pub overlay: Overlay,
    /// Hub on this resource's frontend.
    pub hub: String,
    pub arguments: Vec<String>,
    pub stage_dir: PathBuf,
    pub stdout: JobLog,
    pub stderr: JobLog,
    pub cancel: CancelToken,
}

pub type Program = Arc<dyn Fn(ProcessContext) -> std::result::Result<(), String> + Send + Sync>;

/// Opens the adapter's path onto a resource.
pub trait Adapter: Send + Sync {
    fn name(&self) -> &'static str;
    fn supports(&self, middleware: &str) -> bool;
    /// Whether file copies and launch requests go through the frontend
    /// gatekeeper rather than the local filesystem.
    fn remote_access(&self) -> bool;
    /// Whether jobs wait in a FIFO queue for free slots.
    fn queues(&self) -> bool {
        false
    }
}

pub struct LocalAdapter;
pub struct ShellAdapter;
pub struct SimSchedAdapter;

impl Adapter for LocalAdapter {
    fn name(&self) -> &'static str {
        "local"
    }
    fn supports(&self, middleware: &str) -> bool {
        middleware == "local"
    }
    fn remote_access(&self) -> bool {
        false
    }
}

impl Adapter for ShellAdapter {
    fn name(&self) -> &'static str {
        "shell"
    }
    fn supports(&self, middleware: &str) -> bool {
        middleware == "shell"
    }
    fn remote_access(&self) -> bool {
        true
    }
}

impl Adapter for SimSchedAdapter {
    fn name(&self) -> &'static str {
        "simsched"
    }
    fn supports(&self, middleware: &str) -> bool {
        middleware == "simsched"
    }
    fn remote_access(&self) -> bool {
        true
    }
    fn queues(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
pub struct DeployConfig {
    /// Relative install paths and stage-in sources resolve against this.
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Hub every resource hub is linked to.
    pub daemon_hub: String,
    /// The deploying process (the daemon).
    pub origin: Endpoint,
}

/// A request/response session with a resource's gatekeeper. The gatekeeper
/// end is driven in the caller's thread after each request crosses.
struct Session {
    local: Connection,
    remote: Connection,
}

impl Session {
    fn request(&self, frame: &[u8], serve: impl FnOnce(u8, &[u8]) -> std::result::Result<(), String>) -> std::result::Result<(), String> {
        const T: Duration = Duration::from_secs(5);
        self.local.send(frame).map_err(|e| e.to_string())?;
        let got = self.remote.recv(T).map_err(|e| e.to_string())?;
        let (opcode, payload) = crate::wire::decode_frame(&got).map_err(|e| e.to_string())?;
        let outcome = serve(opcode, payload);
        let reply = match &outcome {
            Ok(()) => Writer::new().frame(op::OK),
            Err(msg) => {
                let mut w = Writer::new();
                w.str(msg);
                w.frame(op::FAIL)
            }
        };
        self.remote.send(&reply).map_err(|e| e.to_string())?;
        let answer = self.local.recv(T).map_err(|e| e.to_string())?;
        match crate::wire::decode_frame(&answer).map_err(|e| e.to_string())? {
            (op::OK, _) => Ok(()),
            (_, payload) => Err(Reader::new(payload).str().unwrap_or_default()),
        }
    }
}

const SHELL_COPY: u8 = 0x60;
const SHELL_LAUNCH: u8 = 0x61;

struct Gatekeeper {
    session: Mutex<Session>,
    route: crate::overlay::Route,
}

struct Job {
    id: String,
    resource: String,
    spec: JobSpec,
    adapter: &'static str,
    queued: bool,
    program: Program,
    state: Mutex<JobState>,
    changed: Condvar,
    reason: Mutex<Option<String>>,
    nodes: Mutex<Vec<String>>,
    endpoints: Mutex<Vec<Endpoint>>,
    token: CancelToken,
    deadline: Mutex<Option<Tick>>,
    live_ranks: AtomicUsize,
    rank_failed: AtomicBool,
    stage_dir: PathBuf,
    stdout: JobLog,
    stderr: JobLog,
}

impl Job {
    fn set_state(&self, next: JobState, reason: Option<String>) -> bool {
        let mut st = self.state.lock();
        if !st.can_move_to(next) {
            return false;
        }
        *st = next;
        if reason.is_some() {
            *self.reason.lock() = reason;
        }
        self.changed.notify_all();
        true
    }

    fn state(&self) -> JobState {
        *self.state.lock()
    }
}

/// Snapshot of one job for reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: String,
    pub resource: String,
    pub kernel: String,
    pub adapter: String,
    pub state: JobState,
    pub nodes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Default)]
struct Sched {
    queue: VecDeque<Arc<Job>>,
    used: BTreeMap<String, u32>,
}

struct DeployerInner {
    overlay: Overlay,
    config: DeployConfig,
    adapters: RwLock<Vec<Arc<dyn Adapter>>>,
    resources: RwLock<BTreeMap<String, ResourceSpec>>,
    hubs: Mutex<BTreeMap<String, String>>,
    gatekeepers: Mutex<BTreeMap<String, Arc<Gatekeeper>>>,
    jobs: Mutex<BTreeMap<String, Arc<Job>>>,
    order: Mutex<Vec<String>>,
    sched: Mutex<BTreeMap<String, Sched>>,
    next_job: AtomicU64,
    origin_addr: Mutex<Option<VirtualAddress>>,
}

/// The deployment service.
#[derive(Clone)]
pub struct Deployer {
    inner: Arc<DeployerInner>,
}

impl Deployer {
    /// A deployer with no adapters registered.
    pub fn new(overlay: Overlay, config: DeployConfig) -> Self {
        Self {
            inner: Arc::new(DeployerInner {
                overlay,
                config,
                adapters: RwLock::new(Vec::new()),
                resources: RwLock::new(BTreeMap::new()),
                hubs: Mutex::new(BTreeMap::new()),
                gatekeepers: Mutex::new(BTreeMap::new()),
                jobs: Mutex::new(BTreeMap::new()),
                order: Mutex::new(Vec::new()),
                sched: Mutex::new(BTreeMap::new()),
                next_job: AtomicU64::new(1),
                origin_addr: Mutex::new(None),
            }),
        }
    }

    /// A deployer with the local, shell and simsched adapters, in that order.
    pub fn with_default_adapters(overlay: Overlay, config: DeployConfig) -> Self {
        let d = Self::new(overlay, config);
        d.register_adapter(Arc::new(LocalAdapter));
        d.register_adapter(Arc::new(ShellAdapter));
        d.register_adapter(Arc::new(SimSchedAdapter));
        d
    }

    pub fn register_adapter(&self, adapter: Arc<dyn Adapter>) {
        self.inner.adapters.write().push(adapter);
    }

    pub fn overlay(&self) -> &Overlay {
        &self.inner.overlay
    }

    pub fn config(&self) -> &DeployConfig {
        &self.inner.config
    }

    /// First registered adapter supporting the resource's middleware.
    pub fn select_adapter(&self, spec: &ResourceSpec) -> Result<Arc<dyn Adapter>> {
        self.inner
            .adapters
            .read()
            .iter()
            .find(|a| a.supports(&spec.middleware))
            .cloned()
            .ok_or_else(|| DeployError::NoAdapter(spec.middleware.clone()))
    }

    pub fn add_resource(&self, spec: ResourceSpec) -> Result<()> {
        spec.validate()?;
        let fabric = self.inner.overlay.fabric();
        for node in std::iter::once(&spec.frontend).chain(&spec.compute_nodes) {
            fabric.node(node).map_err(|e| DeployError::InvalidResource {
                name: spec.name.clone(),
                reason: e.to_string(),
            })?;
        }
        let mut res = self.inner.resources.write();
        if res.contains_key(&spec.name) {
            return Err(DeployError::DuplicateResource(spec.name));
        }
        res.insert(spec.name.clone(), spec);
        Ok(())
    }

    pub fn resource(&self, name: &str) -> Result<ResourceSpec> {
        self.inner
            .resources
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| DeployError::UnknownResource(name.to_string()))
    }

    pub fn resources(&self) -> Vec<ResourceSpec> {
        self.inner.resources.read().values().cloned().collect()
    }

    /// Starts the resource's frontend hub if needed and links it to the
    /// daemon hub. Returns the same hub id on every call.
    pub fn ensure_hub(&self, resource: &str) -> Result<String> {
        let spec = self.resource(resource)?;
        let mut hubs = self.inner.hubs.lock();
        if let Some(h) = hubs.get(resource) {
            return Ok(h.clone());
        }
        let overlay = &self.inner.overlay;
        let failed = |e: OverlayError| DeployError::HubStartFailed {
            resource: resource.to_string(),
            reason: e.to_string(),
        };
        let hub = match overlay.start_hub(&spec.frontend) {
            Ok(h) => h,
            Err(OverlayError::DuplicateHub(h)) => h,
            Err(e) => return Err(failed(e)),
        };
        overlay.link_hubs(&hub, &self.inner.config.daemon_hub).map_err(failed)?;
        overlay.converge();
        hubs.insert(resource.to_string(), hub.clone());
        Ok(hub)
    }

    pub fn hub_of(&self, resource: &str) -> Option<String> {
        self.inner.hubs.lock().get(resource).cloned()
    }

    fn origin_address(&self) -> Result<VirtualAddress> {
        let mut slot = self.inner.origin_addr.lock();
        if let Some(a) = slot.as_ref() {
            return Ok(a.clone());
        }
        let cfg = &self.inner.config;
        let addr = self
            .inner
            .overlay
            .attach(&cfg.origin, &cfg.daemon_hub, "deployer")
            .map_err(|e| DeployError::LaunchFailed {
                resource: cfg.daemon_hub.clone(),
                reason: e.to_string(),
            })?;
        *slot = Some(addr.clone());
        Ok(addr)
    }

    /// The gatekeeper session for a remote-access resource, opened on first
    /// use through the overlay.
    fn gatekeeper(&self, spec: &ResourceSpec, hub: &str) -> Result<Arc<Gatekeeper>> {
        let mut gks = self.inner.gatekeepers.lock();
        if let Some(g) = gks.get(&spec.name) {
            return Ok(g.clone());
        }
        let launch_failed = |reason: String| DeployError::LaunchFailed {
            resource: spec.name.clone(),
            reason,
        };
        let overlay = &self.inner.overlay;
        let origin = self.origin_address()?;
        let ep = overlay.fabric().spawn_process(&spec.frontend).map_err(|e| launch_failed(e.to_string()))?;
        let addr = overlay
            .attach(&ep, hub, &format!("gatekeeper-{}", spec.name))
            .map_err(|e| launch_failed(e.to_string()))?;
        overlay.converge();
        let accepted: Arc<Mutex<Option<Connection>>> = Arc::default();
        let sink = accepted.clone();
        overlay
            .listen(&addr, Arc::new(move |c, _| *sink.lock() = Some(c)))
            .map_err(|e| launch_failed(e.to_string()))?;
        let local = overlay
            .smart_connect(&origin, &addr, "shell")
            .map_err(|e| launch_failed(e.to_string()))?;
        let remote = accepted.lock().take().ok_or_else(|| launch_failed("gatekeeper did not accept".into()))?;
        let route = local.route().clone();
        let g = Arc::new(Gatekeeper {
            session: Mutex::new(Session { local, remote }),
            route,
        });
        gks.insert(spec.name.clone(), g.clone());
        Ok(g)
    }

    /// Routes used to reach each remote resource's gatekeeper.
    pub fn access_routes(&self) -> BTreeMap<String, crate::overlay::Route> {
        self.inner
            .gatekeepers
            .lock()
            .iter()
            .map(|(k, g)| (k.clone(), g.route.clone()))
            .collect()
    }

    fn stage(&self, adapter: &dyn Adapter, gk: Option<&Gatekeeper>, job: &Job) -> Result<()> {
        fs::create_dir_all(&job.stage_dir).map_err(|e| DeployError::StageInFailed {
            path: job.stage_dir.display().to_string(),
            reason: e.to_string(),
        })?;
        for f in &job.spec.stage_in {
            let src = self.inner.config.base_dir.join(&f.local);
            let fail = |reason: String| DeployError::StageInFailed {
                path: f.local.display().to_string(),
                reason,
            };
            if f.remote.is_empty() || f.remote.contains(['/', '\\']) || f.remote == ".." {
                return Err(fail(format!("bad remote name `{}`", f.remote)));
            }
            let dst = job.stage_dir.join(&f.remote);
            if !adapter.remote_access() {
                fs::copy(&src, &dst).map_err(|e| fail(e.to_string()))?;
                continue;
            }
            let bytes = fs::read(&src).map_err(|e| fail(e.to_string()))?;
            let mut w = Writer::new();
            w.str(&f.remote).bytes(&bytes);
            let gk = gk.expect("remote adapters have a gatekeeper");
            gk.session
                .lock()
                .request(&w.frame(SHELL_COPY), |opcode, payload| {
                    if opcode != SHELL_COPY {
                        return Err("unexpected request".into());
                    }
                    let mut r = Reader::new(payload);
                    let name = r.str().map_err(|e| e.to_string())?;
                    let data = r.bytes().map_err(|e| e.to_string())?;
                    fs::write(job.stage_dir.join(name), data).map_err(|e| e.to_string())
                })
                .map_err(fail)?;
        }
        Ok(())
    }

    /// Submits `job` to `resource`; `program` runs once per rank.
    pub fn submit(&self, resource: &str, job: JobSpec, program: Program) -> Result<JobHandle> {
        let spec = self.resource(resource)?;
        job.validate()?;
        let adapter = self.select_adapter(&spec)?;
        if job.node_count > spec.nodes {
            return Err(DeployError::InsufficientNodes {
                resource: spec.name.clone(),
                requested: job.node_count,
                available: spec.nodes,
            });
        }
        let per_node = job.process_count.div_ceil(job.node_count);
        if adapter.queues() && per_node > spec.slots_per_node {
            return Err(DeployError::InsufficientNodes {
                resource: spec.name.clone(),
                requested: job.node_count * per_node.div_ceil(spec.slots_per_node),
                available: spec.nodes,
            });
        }

        let n = self.inner.next_job.fetch_add(1, Ordering::SeqCst);
        let id = format!("{}-{n}", spec.name);
        let out = &self.inner.config.out_dir;
        let logs = out.join("logs");
        let io_fail = |e: std::io::Error| DeployError::LaunchFailed {
            resource: spec.name.clone(),
            reason: e.to_string(),
        };
        fs::create_dir_all(&logs).map_err(io_fail)?;
        let stdout = JobLog::create(&logs.join(format!("{id}.out"))).map_err(io_fail)?;
        let stderr = JobLog::create(&logs.join(format!("{id}.err"))).map_err(io_fail)?;
        let record = Arc::new(Job {
            id: id.clone(),
            resource: spec.name.clone(),
            spec: job,
            adapter: adapter.name(),
            queued: adapter.queues(),
            program,
            state: Mutex::new(JobState::Pending),
            changed: Condvar::new(),
            reason: Mutex::new(None),
            nodes: Mutex::new(Vec::new()),
            endpoints: Mutex::new(Vec::new()),
            token: CancelToken::default(),
            deadline: Mutex::new(None),
            live_ranks: AtomicUsize::new(0),
            rank_failed: AtomicBool::new(false),
            stage_dir: out.join("stage").join(&id),
            stdout,
            stderr,
        });
        self.inner.jobs.lock().insert(id.clone(), record.clone());
        self.inner.order.lock().push(id.clone());

        let fail = |e: DeployError| {
            record.stderr.line(&e.to_string());
            record.set_state(JobState::Failed, Some(e.to_string()));
            e
        };
        let install = self.inner.config.base_dir.join(&spec.install_path);
        if !install.is_dir() {
            return Err(fail(DeployError::LaunchFailed {
                resource: spec.name.clone(),
                reason: format!("install path `{}` does not exist", spec.install_path),
            }));
        }
        let hub = self.ensure_hub(&spec.name).map_err(fail)?;
        let gk = if adapter.remote_access() {
            Some(self.gatekeeper(&spec, &hub).map_err(fail)?)
        } else {
            None
        };
        self.stage(adapter.as_ref(), gk.as_deref(), &record).map_err(fail)?;
        if let Some(gk) = &gk {
            let mut w = Writer::new();
            w.str(&id);
            gk.session
                .lock()
                .request(&w.frame(SHELL_LAUNCH), |opcode, _| match opcode {
                    SHELL_LAUNCH => Ok(()),
                    _ => Err("unexpected request".into()),
                })
                .map_err(|reason| {
                    fail(DeployError::LaunchFailed {
                        resource: spec.name.clone(),
                        reason,
                    })
                })?;
        }
        record.stdout.line(&format!(
            "job {id}: kernel {} on {} via {}",
            record.spec.kernel, spec.name, record.adapter
        ));

        if adapter.queues() {
            self.inner
                .sched
                .lock()
                .entry(spec.name.clone())
                .or_default()
                .queue
                .push_back(record);
            self.schedule(&spec.name);
        } else {
            let nodes = spec.run_nodes();
            let placed: Vec<String> = (0..record.spec.node_count as usize).map(|i| nodes[i].clone()).collect();
            self.launch(&record, placed, &hub, None).map_err(fail)?;
        }
        Ok(JobHandle {
            id,
            resource: spec.name,
        })
    }

    /// Starts queued jobs on `resource` in FIFO order while the head fits.
    fn schedule(&self, resource: &str) {
        let Ok(spec) = self.resource(resource) else { return };
        let Some(hub) = self.hub_of(resource) else { return };
        loop {
            let (job, nodes) = {
                let mut sched = self.inner.sched.lock();
                let s = sched.entry(resource.to_string()).or_default();
                while s.queue.front().is_some_and(|j| j.state() != JobState::Pending) {
                    s.queue.pop_front();
                }
                let Some(head) = s.queue.front().cloned() else { return };
                let per_node = head.spec.process_count.div_ceil(head.spec.node_count);
                let mut free: Vec<String> = spec.run_nodes();
                free.retain(|n| s.used.get(n).copied().unwrap_or(0) + per_node <= spec.slots_per_node);
                if free.len() < head.spec.node_count as usize {
                    return;
                }
                free.truncate(head.spec.node_count as usize);
                for r in 0..head.spec.process_count as usize {
                    *s.used.entry(free[r % free.len()].clone()).or_default() += 1;
                }
                s.queue.pop_front();
                (head, free)
            };
            let deadline = spec.reservation_ticks.map(|t| self.inner.overlay.fabric().now() + t);
            if let Err(e) = self.launch(&job, nodes, &hub, deadline) {
                job.stderr.line(&e.to_string());
                job.set_state(JobState::Failed, Some(e.to_string()));
            }
        }
    }

    fn launch(&self, job: &Arc<Job>, nodes: Vec<String>, hub: &str, deadline: Option<Tick>) -> Result<()> {
        let fabric = self.inner.overlay.fabric().clone();
        let ranks = job.spec.process_count as usize;
        let mut endpoints = Vec::with_capacity(ranks);
        for rank in 0..ranks {
            let node = &nodes[rank % nodes.len()];
            endpoints.push(fabric.spawn_process(node).map_err(|e| DeployError::LaunchFailed {
                resource: job.resource.clone(),
                reason: e.to_string(),
            })?);
        }
        *job.nodes.lock() = nodes.clone();
        *job.endpoints.lock() = endpoints.clone();
        *job.deadline.lock() = deadline;
        job.live_ranks.store(ranks, Ordering::SeqCst);
        if !job.set_state(JobState::Running, None) {
            // cancelled while queued
            self.release(job);
            return Ok(());
        }
        for (rank, endpoint) in endpoints.into_iter().enumerate() {
            let ctx = ProcessContext {
                job_id: job.id.clone(),
                resource: job.resource.clone(),
                rank: rank as u32,
                node: endpoint.node.clone(),
                endpoint,
                overlay: self.inner.overlay.clone(),
                hub: hub.to_string(),
                arguments: job.spec.arguments.clone(),
                stage_dir: job.stage_dir.clone(),
                stdout: job.stdout.clone(),
                stderr: job.stderr.clone(),
                cancel: job.token.clone(),
            };
            let resource = job.resource.clone();
            let job = job.clone();
            let weak = Arc::downgrade(&self.inner);
            thread::Builder::new()
                .name(format!("{}#{rank}", job.id))
                .spawn(move || {
                    let program = job.program.clone();
                    let outcome = program(ctx);
                    if let Err(msg) = &outcome {
                        job.stderr.line(&format!("rank {rank}: {msg}"));
                        job.rank_failed.store(true, Ordering::SeqCst);
                        let mut reason = job.reason.lock();
                        if reason.is_none() {
                            *reason = Some(msg.clone());
                        }
                    }
                    if rank == 0 {
                        job.token.fire();
                    }
                    if job.live_ranks.fetch_sub(1, Ordering::SeqCst) == 1 {
                        let last = if job.rank_failed.load(Ordering::SeqCst) {
                            JobState::Failed
                        } else {
                            JobState::Done
                        };
                        job.set_state(last, None);
                        job.stdout.line(&format!("job {} finished: {}", job.id, job.state()));
                        if let Some(inner) = Weak::upgrade(&weak) {
                            Deployer { inner }.release(&job);
                        }
                    }
                })
                .map_err(|e| DeployError::LaunchFailed {
                    resource,
                    reason: e.to_string(),
                })?;
        }
        Ok(())
    }

    /// Frees a finished job's scheduler slots and starts queued work.
    fn release(&self, job: &Job) {
        if !job.queued {
            return;
        }
        {
            let nodes = job.nodes.lock().clone();
            let mut sched = self.inner.sched.lock();
            let s = sched.entry(job.resource.clone()).or_default();
            for r in 0..job.spec.process_count as usize {
                if nodes.is_empty() {
                    break;
                }
                if let Some(u) = s.used.get_mut(&nodes[r % nodes.len()]) {
                    *u = u.saturating_sub(1);
                }
            }
        }
        self.schedule(&job.resource);
    }

    fn job(&self, id: &str) -> Result<Arc<Job>> {
        self.inner
            .jobs
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| DeployError::UnknownJob(id.to_string()))
    }

    fn terminate(&self, job: &Job, state: JobState, reason: &str) {
        if job.set_state(state, Some(reason.to_string())) {
            job.stderr.line(&format!("job {}: {reason}", job.id));
        }
        job.token.fire();
        let fabric = self.inner.overlay.fabric();
        for ep in job.endpoints.lock().iter() {
            fabric.sever_process(ep.process);
        }
    }

    /// Forces the job into `killed` and tears its processes down.
    pub fn cancel(&self, id: &str) -> Result<JobState> {
        let job = self.job(id)?;
        if !job.state().is_terminal() {
            self.terminate(&job, JobState::Killed, "cancelled");
        }
        Ok(job.state())
    }

    /// Ends a running job's reservation now, as the scheduler would at its
    /// end time.
    pub fn expire_reservation(&self, id: &str) -> Result<()> {
        let job = self.job(id)?;
        self.terminate(&job, JobState::Failed, "reservation expired");
        Ok(())
    }

    /// Expires reservations whose end tick has passed. Returns the jobs it
    /// failed.
    pub fn reap(&self) -> Vec<String> {
        let now = self.inner.overlay.fabric().now();
        let jobs: Vec<Arc<Job>> = self.inner.jobs.lock().values().cloned().collect();
        let mut expired = Vec::new();
        for job in jobs {
            let due = job.deadline.lock().is_some_and(|d| d <= now);
            if due && job.state() == JobState::Running {
                self.terminate(&job, JobState::Failed, "reservation expired");
                expired.push(job.id.clone());
            }
        }
        expired
    }

    pub fn poll_status(&self, id: &str) -> Result<JobState> {
        Ok(self.job(id)?.state())
    }

    /// Waits until the job is terminal or the timeout passes.
    pub fn wait(&self, id: &str, timeout: Duration) -> Result<JobState> {
        let job = self.job(id)?;
        let deadline = Instant::now() + timeout;
        let mut st = job.state.lock();
        while !st.is_terminal() && !job.changed.wait_until(&mut st, deadline).timed_out() {}
        Ok(*st)
    }

    pub fn job_info(&self, id: &str) -> Result<JobInfo> {
        let job = self.job(id)?;
        Ok(Self::info(&job))
    }

    fn info(job: &Job) -> JobInfo {
        JobInfo {
            id: job.id.clone(),
            resource: job.resource.clone(),
            kernel: job.spec.kernel.clone(),
            adapter: job.adapter.to_string(),
            state: job.state(),
            nodes: job.nodes.lock().clone(),
            reason: job.reason.lock().clone(),
        }
    }

    /// Jobs in submission order.
    pub fn jobs(&self) -> Vec<JobInfo> {
        let jobs = self.inner.jobs.lock();
        self.inner.order.lock().iter().filter_map(|id| jobs.get(id)).map(|j| Self::info(j)).collect()
    }

    pub fn endpoints(&self, id: &str) -> Result<Vec<Endpoint>> {
        Ok(self.job(id)?.endpoints.lock().clone())
    }

    /// Processes running per node on a queued resource.
    pub fn slot_usage(&self, resource: &str) -> BTreeMap<String, u32> {
        self.inner
            .sched
            .lock()
            .get(resource)
            .map(|s| s.used.clone())
            .unwrap_or_default()
    }

    /// Cancels every job that is not yet terminal.
    pub fn shutdown(&self) {
        let ids: Vec<String> = self.inner.order.lock().clone();
        for id in ids {
            let _ = self.cancel(&id);
        }
    }
}
