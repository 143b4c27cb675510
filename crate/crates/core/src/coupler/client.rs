//! Coupler-side connection to a daemon.
//!
//! Requests use the control framing (`len | opcode | payload`). Call replies
//! arrive out of band and are matched to their caller by `(worker, callId)`;
//! every other request gets exactly one OK or FAIL, in order.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;

use super::callframe::CallFrame;
use super::status::StatusReport;
use super::{CouplerError, Result, WorkerInfo, WorkerRequest};
use crate::msglayer::MAX_MESSAGE;
use crate::wire::{encode_frame, op, read_frame, Reader, Writer};

type Replies = Arc<Mutex<HashMap<(u32, u32), mpsc::SyncSender<Result<CallFrame>>>>>;

/// Cancel modes of `CANCEL_WORKER`.
pub const RELEASE: u8 = 0;
pub const KILL: u8 = 1;

const CONTROL_TIMEOUT: Duration = Duration::from_secs(300);

pub struct DaemonClient {
    endpoint: String,
    writer: Mutex<BufWriter<TcpStream>>,
    control: Mutex<mpsc::Receiver<(u8, Vec<u8>)>>,
    pending: Replies,
    closed: Arc<AtomicBool>,
}

impl std::fmt::Debug for DaemonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DaemonClient").field("endpoint", &self.endpoint).finish()
    }
}

fn fail_all(pending: &Replies, err: &CouplerError) {
    for (_, tx) in pending.lock().drain() {
        let _ = tx.send(Err(err.clone()));
    }
}

impl DaemonClient {
    pub fn connect(endpoint: &str) -> Result<Arc<Self>> {
        let stream = TcpStream::connect(endpoint).map_err(|e| CouplerError::DaemonUnreachable(format!("{endpoint}: {e}")))?;
        stream.set_nodelay(true).ok();
        let read_half = stream.try_clone().map_err(|e| CouplerError::Io(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        let pending: Replies = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = pending.clone();
            let closed = closed.clone();
            thread::Builder::new()
                .name("daemon-client".into())
                .spawn(move || {
                    let mut r = BufReader::new(read_half);
                    loop {
                        let Ok((opcode, payload)) = read_frame(&mut r, MAX_MESSAGE + 64) else { break };
                        match opcode {
                            op::CALL => {
                                let mut rd = Reader::new(&payload);
                                let Ok(worker) = rd.u32() else { break };
                                let reply = CallFrame::decode(rd.rest()).map_err(|e| CouplerError::Protocol(e.to_string()));
                                let Ok(frame) = reply else { break };
                                if let Some(tx) = pending.lock().remove(&(worker, frame.call_id)) {
                                    let _ = tx.send(Ok(frame));
                                }
                            }
                            op::CALL_FAILED => {
                                let mut rd = Reader::new(&payload);
                                let (Ok(worker), Ok(call), Ok(code), Ok(msg)) = (rd.u32(), rd.u32(), rd.u8(), rd.str()) else {
                                    break;
                                };
                                if let Some(tx) = pending.lock().remove(&(worker, call)) {
                                    let _ = tx.send(Err(CouplerError::from_code(code, msg)));
                                }
                            }
                            _ => {
                                if tx.send((opcode, payload)).is_err() {
                                    break;
                                }
                            }
                        }
                    }
                    closed.store(true, Ordering::SeqCst);
                    fail_all(&pending, &CouplerError::DaemonUnreachable("connection lost".into()));
                })
                .map_err(|e| CouplerError::Io(e.to_string()))?;
        }
        Ok(Arc::new(Self {
            endpoint: endpoint.to_owned(),
            writer: Mutex::new(BufWriter::new(stream)),
            control: Mutex::new(rx),
            pending,
            closed,
        }))
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn send(&self, frame: &[u8]) -> Result<()> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(CouplerError::DaemonUnreachable("connection lost".into()));
        }
        let mut w = self.writer.lock();
        w.write_all(frame)
            .and_then(|_| w.flush())
            .map_err(|e| CouplerError::DaemonUnreachable(e.to_string()))
    }

    /// One control round trip; returns the OK payload.
    fn request(&self, opcode: u8, payload: &[u8]) -> Result<Vec<u8>> {
        let rx = self.control.lock();
        self.send(&encode_frame(opcode, payload))?;
        let (got, body) = rx.recv_timeout(CONTROL_TIMEOUT).map_err(|e| match e {
            mpsc::RecvTimeoutError::Timeout => CouplerError::Protocol("daemon did not answer".into()),
            mpsc::RecvTimeoutError::Disconnected => CouplerError::DaemonUnreachable("connection lost".into()),
        })?;
        match got {
            op::OK => Ok(body),
            op::FAIL => {
                let mut r = Reader::new(&body);
                let code = r.u8().map_err(|e| CouplerError::Protocol(e.to_string()))?;
                let msg = r.str().map_err(|e| CouplerError::Protocol(e.to_string()))?;
                Err(CouplerError::from_code(code, msg))
            }
            other => Err(CouplerError::Protocol(format!("unexpected opcode {other:#04x}"))),
        }
    }

    pub fn create_worker(&self, req: &WorkerRequest) -> Result<WorkerInfo> {
        let mut w = Writer::new();
        w.str(&serde_json::to_string(req).expect("request serialises"));
        let body = self.request(op::CREATE_WORKER, &w.finish())?;
        let text = Reader::new(&body).str().map_err(|e| CouplerError::Protocol(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| CouplerError::Protocol(e.to_string()))
    }

    /// Forwards an encoded call frame; the receiver yields its reply.
    pub fn call(&self, worker: u32, call_id: u32, frame: &[u8]) -> Result<mpsc::Receiver<Result<CallFrame>>> {
        let (tx, rx) = mpsc::sync_channel(1);
        self.pending.lock().insert((worker, call_id), tx);
        let mut w = Writer::new();
        w.u32(worker).raw(frame);
        if let Err(e) = self.send(&w.frame(op::CALL)) {
            self.pending.lock().remove(&(worker, call_id));
            return Err(e);
        }
        Ok(rx)
    }

    pub fn status(&self) -> Result<StatusReport> {
        let body = self.request(op::STATUS, &[])?;
        let text = Reader::new(&body).str().map_err(|e| CouplerError::Protocol(e.to_string()))?;
        StatusReport::from_json(&text).map_err(|e| CouplerError::Protocol(e.to_string()))
    }

    fn cancel(&self, worker: u32, mode: u8) -> Result<()> {
        let mut w = Writer::new();
        w.u32(worker).u8(mode);
        self.request(op::CANCEL_WORKER, &w.finish()).map(drop)
    }

    /// Asks the worker to finish cleanly; waits until its job has ended.
    pub fn release_worker(&self, worker: u32) -> Result<()> {
        self.cancel(worker, RELEASE)
    }

    /// Kills the worker's job.
    pub fn kill_worker(&self, worker: u32) -> Result<()> {
        self.cancel(worker, KILL)
    }

    pub fn report_energy(&self, steps: u64, energy: f64, drift: f64) -> Result<()> {
        let mut w = Writer::new();
        w.u64(steps).f64(energy).f64(drift);
        self.request(op::REPORT_DRIFT, &w.finish()).map(drop)
    }

    /// Stops the daemon: live workers are cancelled and the pool drained.
    pub fn stop(&self) -> Result<()> {
        self.request(op::STOP, &[]).map(drop)
    }
}
