//! The coupler: typed, unit-checked calls into kernel workers.
//!
//! A [`Worker`] is reached over one of two channels. `inproc` runs the
//! kernel inside the calling process; `ibis` goes through a [`daemon`] that
//! deploys a proxy on the target resource and relays call frames over the
//! message layer. Both channels exchange the same encoded [`CallFrame`]s, so
//! results are bitwise identical.
//!
//! Unit checks happen before a frame is built. Every floating-point argument
//! that the manifest gives a unit must arrive as a quantity of the same
//! dimension and is converted to the declared unit; results come back as
//! quantities in the declared unit.

pub mod callframe;
pub mod client;
pub mod daemon;
pub mod kernel;
pub mod manifest;
mod proxy;
pub mod status;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use jungle_kernels::Exec;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::overlay::Route;
use crate::units::{QuantityVec, Unit, UnitError, UnitRegistry};

pub use callframe::CallFrame;
pub use client::DaemonClient;
pub use daemon::{Daemon, DaemonConfig};
pub use kernel::{instantiate, kernel_names, manifest_for, Dispatcher};
pub use manifest::{ArgType, Column, Function, Manifest, Param};
pub use status::StatusReport;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CouplerError {
    #[error("`{function}` argument `{param}`: expected {expected}, got {got}")]
    DimensionMismatch {
        function: String,
        param: String,
        expected: String,
        got: String,
    },
    #[error("`{function}` argument `{param}` needs a quantity in {unit}")]
    MissingUnit {
        function: String,
        param: String,
        unit: String,
    },
    #[error("kernel has no function `{0}`")]
    UnknownFunction(String),
    #[error("bad arguments: {0}")]
    BadArguments(String),
    #[error("remote error: {0}")]
    RemoteError(String),
    #[error("worker died: {0}")]
    WorkerDied(String),
    #[error("unknown kernel `{0}`")]
    KernelUnknown(String),
    #[error("unknown resource `{0}`")]
    UnknownResource(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("launch failed: {0}")]
    LaunchFailed(String),
    #[error("daemon unreachable: {0}")]
    DaemonUnreachable(String),
    #[error("endpoint {0} is already in use")]
    PortInUse(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Units(#[from] UnitError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CouplerError {
    /// Code carried in daemon FAIL frames.
    pub fn code(&self) -> u8 {
        match self {
            CouplerError::KernelUnknown(_) => 1,
            CouplerError::UnknownResource(_) => 2,
            CouplerError::UnknownWorker(_) => 3,
            CouplerError::LaunchFailed(_) => 4,
            CouplerError::WorkerDied(_) => 5,
            CouplerError::RemoteError(_) => 6,
            CouplerError::Config(_) => 8,
            CouplerError::BadArguments(_) => 9,
            _ => 7,
        }
    }

    /// Rebuilds an error from a FAIL frame. The message is the payload only,
    /// not the formatted error.
    pub fn from_code(code: u8, msg: String) -> Self {
        match code {
            1 => CouplerError::KernelUnknown(msg),
            2 => CouplerError::UnknownResource(msg),
            3 => CouplerError::UnknownWorker(msg),
            4 => CouplerError::LaunchFailed(msg),
            5 => CouplerError::WorkerDied(msg),
            6 => CouplerError::RemoteError(msg),
            8 => CouplerError::Config(msg),
            9 => CouplerError::BadArguments(msg),
            _ => CouplerError::Protocol(msg),
        }
    }

    /// The text a FAIL frame carries for this error.
    pub fn payload(&self) -> String {
        match self {
            CouplerError::KernelUnknown(m)
            | CouplerError::UnknownResource(m)
            | CouplerError::UnknownWorker(m)
            | CouplerError::LaunchFailed(m)
            | CouplerError::WorkerDied(m)
            | CouplerError::RemoteError(m)
            | CouplerError::Config(m)
            | CouplerError::BadArguments(m)
            | CouplerError::Protocol(m) => m.clone(),
            other => other.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CouplerError>;

/// A call argument or result column.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(Vec<i32>),
    Long(Vec<i64>),
    Float(Vec<f32>),
    Double(Vec<f64>),
    Quantity(QuantityVec),
    Str(Vec<String>),
}

impl Value {
    pub fn len(&self) -> usize {
        match self {
            Value::Int(v) => v.len(),
            Value::Long(v) => v.len(),
            Value::Float(v) => v.len(),
            Value::Double(v) => v.len(),
            Value::Quantity(q) => q.len(),
            Value::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Long(_) => "long",
            Value::Float(_) => "float",
            Value::Double(_) => "double",
            Value::Quantity(_) => "quantity",
            Value::Str(_) => "string",
        }
    }

    pub fn quantity(&self) -> Option<&QuantityVec> {
        match self {
            Value::Quantity(q) => Some(q),
            _ => None,
        }
    }

    /// Values of a quantity in `unit`, or a plain double column.
    pub fn values_in(&self, unit: &Unit) -> Result<Vec<f64>> {
        match self {
            Value::Quantity(q) => Ok(q.convert(unit)?.values),
            Value::Double(v) => Ok(v.clone()),
            other => Err(CouplerError::BadArguments(format!("expected a double column, got {}", other.kind()))),
        }
    }

    pub fn ints(&self) -> Option<&[i32]> {
        match self {
            Value::Int(v) => Some(v),
            _ => None,
        }
    }

    pub fn longs(&self) -> Option<&[i64]> {
        match self {
            Value::Long(v) => Some(v),
            _ => None,
        }
    }

    pub fn doubles(&self) -> Option<&[f64]> {
        match self {
            Value::Double(v) => Some(v),
            Value::Quantity(q) => Some(&q.values),
            _ => None,
        }
    }

    pub fn strings(&self) -> Option<&[String]> {
        match self {
            Value::Str(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Inproc,
    Ibis,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Inproc => "inproc",
            ChannelKind::Ibis => "ibis",
        })
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRequest {
    /// Role of the worker in the simulation, for reports.
    pub name: String,
    pub kernel: String,
    pub resource: String,
    #[serde(default = "one")]
    pub nodes: u32,
    pub channel: ChannelKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub id: u32,
    pub name: String,
    pub kernel: String,
    pub resource: String,
    pub channel: ChannelKind,
    pub job: Option<String>,
    /// Overlay client id of the worker proxy.
    pub proxy: Option<String>,
    pub nodes: Vec<String>,
    /// Route from the daemon to the proxy's call port.
    pub route: Option<Route>,
}

/// Call counters kept on the caller's side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CallStats {
    pub calls: u64,
    pub total_rtt_us: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl CallStats {
    pub fn mean_rtt_us(&self) -> f64 {
        if self.calls == 0 {
            0.0
        } else {
            self.total_rtt_us as f64 / self.calls as f64
        }
    }
}

enum Transport {
    Inproc(Mutex<Dispatcher>),
    Remote { client: Arc<DaemonClient>, id: u32 },
}

/// A handle on one kernel instance.
pub struct Worker {
    info: WorkerInfo,
    manifest: Arc<Manifest>,
    units: Arc<UnitRegistry>,
    transport: Transport,
    next_call: AtomicU32,
    stats: Arc<Mutex<CallStats>>,
}

impl std::fmt::Debug for Worker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Worker").field("info", &self.info).finish()
    }
}

/// An outstanding call.
pub struct PendingCall {
    function: Function,
    call_id: u32,
    units: Arc<UnitRegistry>,
    rx: mpsc::Receiver<Result<CallFrame>>,
    started: Instant,
    stats: Arc<Mutex<CallStats>>,
}

impl PendingCall {
    pub fn wait(self) -> Result<Vec<Value>> {
        let frame = self
            .rx
            .recv()
            .map_err(|_| CouplerError::DaemonUnreachable("reply channel closed".into()))?;
        self.finish(frame)
    }

    pub fn wait_timeout(self, timeout: Duration) -> Result<Vec<Value>> {
        let frame = self.rx.recv_timeout(timeout).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => CouplerError::Protocol("call timed out".into()),
            mpsc::RecvTimeoutError::Disconnected => CouplerError::DaemonUnreachable("reply channel closed".into()),
        })?;
        self.finish(frame)
    }

    fn finish(self, frame: Result<CallFrame>) -> Result<Vec<Value>> {
        let frame = frame?;
        {
            let mut s = self.stats.lock();
            s.calls += 1;
            s.total_rtt_us += self.started.elapsed().as_micros() as u64;
            s.bytes_received += frame.encode().len() as u64;
        }
        if let Some(msg) = frame.error_message() {
            return Err(CouplerError::RemoteError(msg.to_owned()));
        }
        if frame.call_id != self.call_id || frame.function_id != self.function.id {
            return Err(CouplerError::Protocol(format!(
                "reply {}/{} does not match call {}/{}",
                frame.call_id, frame.function_id, self.call_id, self.function.id
            )));
        }
        let cols = manifest::unpack(&self.function.results, &frame).map_err(CouplerError::Protocol)?;
        self.function
            .results
            .iter()
            .zip(cols)
            .map(|(p, c)| result_value(&self.units, p, c))
            .collect()
    }
}

fn result_value(units: &UnitRegistry, p: &Param, c: Column) -> Result<Value> {
    Ok(match (c, &p.unit) {
        (Column::Double(v), Some(u)) => Value::Quantity(QuantityVec::new(v, &units.get(u)?)),
        (Column::Float(v), Some(u)) => {
            Value::Quantity(QuantityVec::new(v.into_iter().map(f64::from).collect(), &units.get(u)?))
        }
        (Column::Int(v), _) => Value::Int(v),
        (Column::Long(v), _) => Value::Long(v),
        (Column::Float(v), None) => Value::Float(v),
        (Column::Double(v), None) => Value::Double(v),
        (Column::Str(v), _) => Value::Str(v),
    })
}

/// Converts one argument to the column the manifest asks for.
fn arg_column(units: &UnitRegistry, f: &Function, p: &Param, v: &Value) -> Result<Column> {
    let wrong = || {
        CouplerError::BadArguments(format!(
            "`{}` argument `{}` is {}, got {}",
            f.name,
            p.name,
            p.ty,
            v.kind()
        ))
    };
    let floating = |unit: &Option<String>| -> Result<Vec<f64>> {
        match (v, unit) {
            (Value::Quantity(q), u) => {
                let target = units.get(u.as_deref().unwrap_or("none"))?;
                q.convert(&target).map(|q| q.values).map_err(|_| CouplerError::DimensionMismatch {
                    function: f.name.clone(),
                    param: p.name.clone(),
                    expected: format!("{} ({})", target.name(), target.dimension()),
                    got: format!("{} ({})", q.unit.name(), q.unit.dimension()),
                })
            }
            (Value::Double(d), None) => Ok(d.clone()),
            (Value::Float(d), None) => Ok(d.iter().map(|&x| f64::from(x)).collect()),
            (Value::Double(_) | Value::Float(_), Some(u)) => Err(CouplerError::MissingUnit {
                function: f.name.clone(),
                param: p.name.clone(),
                unit: u.clone(),
            }),
            _ => Err(wrong()),
        }
    };
    Ok(match p.ty {
        ArgType::Int => Column::Int(v.ints().ok_or_else(wrong)?.to_vec()),
        ArgType::Long => Column::Long(v.longs().ok_or_else(wrong)?.to_vec()),
        ArgType::String => Column::Str(v.strings().ok_or_else(wrong)?.to_vec()),
        ArgType::Double => Column::Double(floating(&p.unit)?),
        ArgType::Float => match v {
            Value::Float(x) if p.unit.is_none() => Column::Float(x.clone()),
            _ => Column::Float(floating(&p.unit)?.into_iter().map(|x| x as f32).collect()),
        },
    })
}

impl Worker {
    pub fn info(&self) -> &WorkerInfo {
        &self.info
    }

    pub fn manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn stats(&self) -> CallStats {
        *self.stats.lock()
    }

    /// Checks and converts `args`, then builds the call frame. No frame is
    /// built when any argument is rejected.
    pub fn encode(&self, function: &str, args: &[Value]) -> Result<(Function, CallFrame)> {
        let f = self
            .manifest
            .by_name(function)
            .ok_or_else(|| CouplerError::UnknownFunction(function.to_owned()))?
            .clone();
        if args.len() != f.args.len() {
            return Err(CouplerError::BadArguments(format!(
                "`{function}` takes {} arguments, got {}",
                f.args.len(),
                args.len()
            )));
        }
        let rows = args.first().map_or(1, Value::len);
        if let Some(bad) = args.iter().find(|a| a.len() != rows) {
            return Err(CouplerError::BadArguments(format!(
                "`{function}`: column of {} values next to columns of {rows}",
                bad.len()
            )));
        }
        let cols = f
            .args
            .iter()
            .zip(args)
            .map(|(p, v)| arg_column(&self.units, &f, p, v))
            .collect::<Result<Vec<_>>>()?;
        let id = self.next_call.fetch_add(1, Ordering::Relaxed);
        let mut frame = CallFrame::new(id, f.id, 0);
        manifest::pack(&f.args, &cols, rows, &mut frame).map_err(CouplerError::BadArguments)?;
        Ok((f, frame))
    }

    /// Sends a call without waiting for its reply.
    pub fn call_async(&self, function: &str, args: &[Value]) -> Result<PendingCall> {
        let (f, frame) = self.encode(function, args)?;
        let bytes = frame.encode();
        self.stats.lock().bytes_sent += bytes.len() as u64;
        let started = Instant::now();
        let rx = match &self.transport {
            Transport::Inproc(d) => {
                let (tx, rx) = mpsc::sync_channel(1);
                let reply = d.lock().handle_bytes(&bytes);
                let _ = tx.send(CallFrame::decode(&reply).map_err(|e| CouplerError::Protocol(e.to_string())));
                rx
            }
            Transport::Remote { client, id } => client.call(*id, frame.call_id, &bytes)?,
        };
        Ok(PendingCall {
            function: f,
            call_id: frame.call_id,
            units: self.units.clone(),
            rx,
            started,
            stats: self.stats.clone(),
        })
    }

    pub fn call(&self, function: &str, args: &[Value]) -> Result<Vec<Value>> {
        self.call_async(function, args)?.wait()
    }

    /// Ends the worker. Remote workers leave the pool and their job ends
    /// as done.
    pub fn release(&self) -> Result<()> {
        match &self.transport {
            Transport::Inproc(_) => Ok(()),
            Transport::Remote { client, id } => client.release_worker(*id),
        }
    }
}

/// Creates workers and owns the unit table used to check their calls.
pub struct Coupler {
    units: Arc<UnitRegistry>,
    daemon: Option<Arc<DaemonClient>>,
    exec: Exec,
    next_local: AtomicU32,
}

impl Coupler {
    pub fn new(units: UnitRegistry) -> Self {
        Self {
            units: Arc::new(units),
            daemon: None,
            exec: Exec::default(),
            next_local: AtomicU32::new(1 << 31),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Connects to a running daemon for `ibis` workers.
    pub fn connect(mut self, endpoint: &str) -> Result<Self> {
        self.daemon = Some(DaemonClient::connect(endpoint)?);
        Ok(self)
    }

    pub fn units(&self) -> &UnitRegistry {
        &self.units
    }

    pub fn daemon(&self) -> Option<&Arc<DaemonClient>> {
        self.daemon.as_ref()
    }

    pub fn create_worker(&self, req: &WorkerRequest) -> Result<Worker> {
        let manifest = manifest_for(&req.kernel).ok_or_else(|| CouplerError::KernelUnknown(req.kernel.clone()))?;
        for u in manifest.units() {
            if !self.units.contains(u) {
                return Err(CouplerError::Config(format!(
                    "kernel `{}` uses unit `{u}`, which the unit table lacks",
                    req.kernel
                )));
            }
        }
        let (info, transport) = match req.channel {
            ChannelKind::Inproc => {
                let d = instantiate(&req.kernel, self.exec).ok_or_else(|| CouplerError::KernelUnknown(req.kernel.clone()))?;
                let info = WorkerInfo {
                    id: self.next_local.fetch_add(1, Ordering::Relaxed),
                    name: req.name.clone(),
                    kernel: req.kernel.clone(),
                    resource: req.resource.clone(),
                    channel: ChannelKind::Inproc,
                    job: None,
                    proxy: None,
                    nodes: Vec::new(),
                    route: None,
                };
                (info, Transport::Inproc(Mutex::new(d)))
            }
            ChannelKind::Ibis => {
                let client = self
                    .daemon
                    .clone()
                    .ok_or_else(|| CouplerError::DaemonUnreachable("no daemon connected".into()))?;
                let info = client.create_worker(req)?;
                let id = info.id;
                (info, Transport::Remote { client, id })
            }
        };
        Ok(Worker {
            info,
            manifest,
            units: self.units.clone(),
            transport,
            next_call: AtomicU32::new(1),
            stats: Arc::default(),
        })
    }
}
