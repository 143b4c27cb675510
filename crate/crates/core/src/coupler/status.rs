//! The status document served by the daemon and written after a run.
//!
//! Field names and nesting are stable within a schema version; consumers
//! should check `schema` first.

use serde::{Deserialize, Serialize};

use crate::deploy::JobInfo;
use crate::msglayer::MembershipEvent;
use crate::netsim::Tick;
use crate::overlay::{HubSnapshot, Route, RouteRecord};

use super::{CallStats, ChannelKind};

pub const STATUS_SCHEMA: &str = "jungle-status/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub schema: String,
    pub daemon: DaemonStatus,
    pub resources: Vec<ResourceStatus>,
    pub jobs: Vec<JobInfo>,
    pub workers: Vec<WorkerStatus>,
    pub overlay: OverlayStatus,
    /// The pool's membership events in their total order.
    pub membership: Vec<MembershipEvent>,
    pub energy: Option<EnergyStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaemonStatus {
    pub endpoint: String,
    /// OS process the daemon runs in.
    pub pid: u32,
    pub host: String,
    pub pool: String,
    pub uptime_ms: u64,
    pub fabric_tick: Tick,
    pub stopping: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceStatus {
    pub name: String,
    pub middleware: String,
    pub frontend: String,
    pub nodes: u32,
    pub gpu_capable: bool,
    pub hub: Option<String>,
    /// Route used to reach the resource's gatekeeper, for remote adapters.
    pub access_route: Option<Route>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Live,
    Released,
    Died,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub id: u32,
    pub name: String,
    pub kernel: String,
    pub resource: String,
    pub channel: ChannelKind,
    pub job: Option<String>,
    pub proxy: Option<String>,
    pub nodes: Vec<String>,
    pub route: Option<Route>,
    pub state: WorkerState,
    pub reason: Option<String>,
    pub calls: u64,
    pub mean_rtt_us: f64,
    /// Mean fabric ticks between forwarding a call and its reply.
    pub mean_rtt_ticks: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl WorkerStatus {
    pub(crate) fn apply_stats(&mut self, s: &CallStats) {
        self.calls = s.calls;
        self.mean_rtt_us = s.mean_rtt_us();
        self.bytes_sent = s.bytes_sent;
        self.bytes_received = s.bytes_received;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayStatus {
    pub hubs: Vec<HubSnapshot>,
    pub routes: Vec<RouteRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStatus {
    pub steps: u64,
    pub energy: f64,
    /// Relative drift from the initial energy, stellar mass loss excluded.
    pub drift: f64,
}

impl StatusReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("status serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// True when any route in the report is not direct.
    pub fn has_indirect_route(&self) -> bool {
        self.overlay
            .routes
            .iter()
            .any(|r| r.route.strategy != crate::overlay::Strategy::Direct)
    }
}
