//! The program a worker job runs on its resource.
//!
//! Rank 0 attaches to the resource hub, joins the pool, starts the kernel
//! as a separate process on the same node behind a loopback conduit and
//! relays call frames between its `calls` port and the daemon's reply port.
//! Other ranks hold their node until rank 0 ends.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use jungle_kernels::Exec;

use super::kernel::instantiate;
use crate::deploy::ProcessContext;
use crate::msglayer::{Member, MsgEndpoint, MsgError};
use crate::netsim::NetError;
use crate::overlay::VirtualAddress;
use crate::wire::{Reader, WireError, Writer};

/// A long kernel call is still a live worker.
const KERNEL_TIMEOUT: Duration = Duration::from_secs(24 * 3600);

#[derive(Clone)]
pub(crate) struct ProxySetup {
    pub worker: u32,
    pub kernel: String,
    pub registry: VirtualAddress,
    pub daemon: VirtualAddress,
    pub heartbeat: Duration,
    pub exec: Exec,
}

pub(crate) fn reply_port(worker: u32) -> String {
    format!("replies-{worker}")
}

pub(crate) fn encode_hello(addr: &VirtualAddress) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&addr.client_id).str(&addr.home_hub).str(&addr.node);
    w.finish()
}

pub(crate) fn decode_hello(bytes: &[u8]) -> Result<VirtualAddress, WireError> {
    let mut r = Reader::new(bytes);
    let addr = VirtualAddress {
        client_id: r.str()?,
        home_hub: r.str()?,
        node: r.str()?,
    };
    r.finish()?;
    Ok(addr)
}

pub(crate) fn run(ctx: ProcessContext, setup: &ProxySetup) -> Result<(), String> {
    if ctx.rank != 0 {
        while !ctx.cancel.wait(Duration::from_millis(500)) {}
        return Ok(());
    }
    let s = |e: &dyn std::fmt::Display| e.to_string();
    let mut dispatcher = instantiate(&setup.kernel, setup.exec).ok_or_else(|| format!("unknown kernel `{}`", setup.kernel))?;
    let ep = MsgEndpoint::attach(&ctx.overlay, &ctx.endpoint, &ctx.hub, &format!("worker-{}", setup.worker)).map_err(|e| s(&e))?;
    let calls = ep.receive_port("calls");
    let member = Arc::new(Member::join(&ep, &setup.registry).map_err(|e| s(&e))?);
    let stop = Arc::new(AtomicBool::new(false));
    let beats = member.spawn(setup.heartbeat, stop.clone());

    let fabric = ctx.overlay.fabric().clone();
    let kproc = fabric.spawn_process(&ctx.node).map_err(|e| s(&e))?;
    let (near, far) = fabric.dial(&ctx.endpoint, &kproc).map_err(|e| s(&e))?;
    let kernel = thread::Builder::new()
        .name(format!("kernel-{}", setup.worker))
        .spawn(move || loop {
            match far.recv(Duration::from_millis(500)) {
                Ok(bytes) => {
                    if far.send(&dispatcher.handle_bytes(&bytes)).is_err() {
                        break;
                    }
                }
                Err(NetError::Timeout) => {}
                Err(_) => break,
            }
        })
        .map_err(|e| s(&e))?;

    let mut replies = ep.send_port("replies");
    let relay = (|| -> Result<u64, String> {
        replies.connect(&setup.daemon, &reply_port(setup.worker)).map_err(|e| s(&e))?;
        replies.write(&encode_hello(ep.address())).map_err(|e| s(&e))?;
        ctx.stdout.line(&format!(
            "worker {} ({}) ready as {} on {}",
            setup.worker,
            setup.kernel,
            ep.address(),
            ctx.node
        ));
        let mut connected = false;
        let mut served = 0u64;
        loop {
            if ctx.cancel.is_set() {
                return Err("cancelled".into());
            }
            match calls.read(Duration::from_millis(100)) {
                Ok(m) => {
                    connected = true;
                    near.send(&m.payload).map_err(|e| s(&e))?;
                    let reply = near.recv(KERNEL_TIMEOUT).map_err(|e| s(&e))?;
                    replies.write(&reply).map_err(|e| s(&e))?;
                    served += 1;
                }
                Err(MsgError::Timeout) => {
                    if calls.connection_count() > 0 {
                        connected = true;
                    } else if connected {
                        // the daemon closed the call port: a clean release
                        return Ok(served);
                    }
                }
                Err(e) => return Err(s(&e)),
            }
        }
    })();

    match &relay {
        Ok(n) => {
            ctx.stdout.line(&format!("worker {} released after {n} calls", setup.worker));
            let _ = member.leave();
        }
        Err(e) => ctx.stderr.line(&format!("worker {}: {e}", setup.worker)),
    }
    stop.store(true, Ordering::SeqCst);
    replies.close();
    calls.close();
    near.close();
    let _ = beats.join();
    let _ = kernel.join();
    let _ = ep.detach();
    relay.map(drop)
}
