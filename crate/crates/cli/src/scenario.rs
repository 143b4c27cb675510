//! Scenario files: fabric, resources, worker placements, physics, outputs.
//!
//! A scenario is TOML. Resources other than `local` get their own site in
//! the fabric: a front end `<name>-fe` and compute nodes `<name>-n<i>`.
//!
//! ```toml
//! [fabric]
//! host = "desktop"
//!
//! [[resource]]
//! name = "cluster-a"
//! middleware = "simsched"
//! nodes = 8
//! firewall = "deny-inbound"
//! latency_ms = 5
//!
//! [[worker]]
//! name = "gas"
//! kernel = "gas-tree"
//! resource = "cluster-a"
//! nodes = 8
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use jungle::coupler::{kernel_names, ChannelKind, DaemonConfig, WorkerRequest};
use jungle::deploy::ResourceSpec;
use jungle::netsim::{FabricNode, FabricSpec, LinkPolicy, Rule, Tick};
use jungle::units::{Dimension, Quantity, UnitRegistry};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub fabric: FabricSection,
    #[serde(default, rename = "resource")]
    pub resources: Vec<ResourceSection>,
    #[serde(default, rename = "worker")]
    pub workers: Vec<WorkerSection>,
    pub physics: Physics,
    #[serde(default)]
    pub outputs: Outputs,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FabricSection {
    /// Node the coupler and daemon run on.
    pub host: String,
    #[serde(default = "one")]
    pub default_latency_ms: Tick,
    /// Extra nodes beyond the host and the generated resource sites.
    #[serde(default, rename = "node")]
    pub nodes: Vec<FabricNode>,
    /// Checked before the generated per-resource policies.
    #[serde(default, rename = "policy")]
    pub policies: Vec<LinkPolicy>,
}

fn one() -> Tick {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSection {
    pub name: String,
    pub middleware: String,
    pub nodes: u32,
    #[serde(default)]
    pub gpu: bool,
    #[serde(default = "dot")]
    pub install_path: String,
    /// Policy applied to connections from outside the resource.
    #[serde(default)]
    pub firewall: Option<Rule>,
    /// Latency between the resource and everything outside it.
    #[serde(default)]
    pub latency_ms: Option<Tick>,
    /// Compute nodes are not addressable from outside the resource.
    #[serde(default)]
    pub private: bool,
    #[serde(default)]
    pub slots: Option<u32>,
    #[serde(default)]
    pub reservation_ticks: Option<Tick>,
}

fn dot() -> String {
    ".".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSection {
    pub name: String,
    pub kernel: String,
    pub resource: String,
    #[serde(default = "one_node")]
    pub nodes: u32,
    #[serde(default = "ibis")]
    pub channel: ChannelKind,
}

fn one_node() -> u32 {
    1
}

fn ibis() -> ChannelKind {
    ChannelKind::Ibis
}

/// Physical set-up. Dimensional values are quantity strings such as
/// `"1 pc"` or `"0.01 Myr"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub stars: usize,
    #[serde(default)]
    pub gas: usize,
    #[serde(default = "default_mass_min")]
    pub star_mass_min: String,
    #[serde(default = "default_mass_max")]
    pub star_mass_max: String,
    /// Total gas mass.
    #[serde(default = "default_gas_mass")]
    pub gas_mass: String,
    #[serde(default = "default_length")]
    pub length_scale: String,
    pub dt: String,
    pub steps: u64,
    #[serde(default = "default_stride")]
    pub stellar_stride: u32,
    pub eps: String,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Outward acceleration applied to the gas.
    #[serde(default)]
    pub wind: Option<String>,
    /// Snapshot to start from instead of generated initial conditions.
    #[serde(default)]
    pub initial_conditions: Option<String>,
}

fn default_seed() -> u64 {
    42
}
fn default_mass_min() -> String {
    "0.1 MSun".into()
}
fn default_mass_max() -> String {
    "100 MSun".into()
}
fn default_gas_mass() -> String {
    "100 MSun".into()
}
fn default_length() -> String {
    "1 pc".into()
}
fn default_stride() -> u32 {
    10
}
fn default_theta() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    /// Write a snapshot every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default = "default_status")]
    pub status: String,
    #[serde(default = "default_energy")]
    pub energy_log: String,
}

fn default_status() -> String {
    "status.json".into()
}
fn default_energy() -> String {
    "energy.tsv".into()
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            snapshot_every: 0,
            status: default_status(),
            energy_log: default_energy(),
        }
    }
}

/// What each worker does in the coupled run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Gravity,
    Gas,
    Coupling,
    Stellar,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Gravity, Role::Gas, Role::Coupling, Role::Stellar];

    pub fn of_kernel(kernel: &str) -> Option<Role> {
        match kernel.split('-').next()? {
            "gravity" => Some(Role::Gravity),
            "gas" => Some(Role::Gas),
            "coupling" => Some(Role::Coupling),
            "stellar" => Some(Role::Stellar),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Gravity => "gravity",
            Role::Gas => "gas",
            Role::Coupling => "coupling",
            Role::Stellar => "stellar",
        }
    }
}

fn dimension_name(d: Dimension) -> &'static str {
    match d {
        Dimension::MASS => "mass",
        Dimension::LENGTH => "length",
        Dimension::TIME => "time",
        Dimension::ACCELERATION => "acceleration",
        _ => "quantity of that kind",
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `"<value> <unit>"`.
pub fn parse_quantity(text: &str, units: &UnitRegistry) -> Result<Quantity, CliError> {
    let mut parts = text.split_whitespace();
    let (Some(v), Some(u), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(config(format!("expected `<value> <unit>`, got `{text}`")));
    };
    let value: f64 = v.parse().map_err(|_| config(format!("bad number in `{text}`")))?;
    units.quantity(value, u).map_err(|e| config(format!("`{text}`: {e}")))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base).map_err(|e| match e {
            CliError::Config(m) => config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        s.base_dir = base_dir.to_path_buf();
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        let mut names = BTreeSet::new();
        for r in &self.resources {
            if !names.insert(r.name.as_str()) {
                return Err(config(format!("resource `{}` declared twice", r.name)));
            }
            if r.nodes == 0 {
                return Err(config(format!("resource `{}` needs at least one node", r.name)));
            }
        }
        let mut workers = BTreeSet::new();
        let mut roles = BTreeSet::new();
        let kernels = kernel_names();
        for w in &self.workers {
            if !names.contains(w.resource.as_str()) {
                return Err(config(format!(
                    "worker `{}` is placed on undeclared resource `{}`",
                    w.name, w.resource
                )));
            }
            if !workers.insert(w.name.as_str()) {
                return Err(config(format!("worker `{}` declared twice", w.name)));
            }
            if !kernels.contains(&w.kernel.as_str()) {
                return Err(config(format!("worker `{}` uses unknown kernel `{}`", w.name, w.kernel)));
            }
            let role = Role::of_kernel(&w.kernel)
                .ok_or_else(|| config(format!("kernel `{}` has no role in a coupled run", w.kernel)))?;
            if !roles.insert(role) {
                return Err(config(format!("more than one {} worker", role.name())));
            }
        }
        if let Some(missing) = Role::ALL.iter().find(|r| !roles.contains(r)) {
            return Err(config(format!("no {} worker", missing.name())));
        }
        self.check_queues()?;
        self.check_quantities()?;
        if self.physics.steps == 0 {
            return Err(config("physics.steps must be at least 1"));
        }
        if self.physics.stellar_stride == 0 {
            return Err(config("physics.stellar_stride must be at least 1"));
        }
        Ok(())
    }

    /// Physics quantities parse and carry the right dimension.
    fn check_quantities(&self) -> Result<(), CliError> {
        let units = UnitRegistry::with_defaults();
        let p = &self.physics;
        let mut fields = vec![
            ("star_mass_min", &p.star_mass_min, Dimension::MASS),
            ("star_mass_max", &p.star_mass_max, Dimension::MASS),
            ("gas_mass", &p.gas_mass, Dimension::MASS),
            ("length_scale", &p.length_scale, Dimension::LENGTH),
            ("dt", &p.dt, Dimension::TIME),
            ("eps", &p.eps, Dimension::LENGTH),
        ];
        if let Some(w) = &p.wind {
            fields.push(("wind", w, Dimension::ACCELERATION));
        }
        for (name, text, want) in fields {
            let q = parse_quantity(text, &units).map_err(|e| config(format!("physics.{name}: {e}")))?;
            if q.dimension() != want {
                return Err(config(format!("physics.{name}: `{text}` is not a {}", dimension_name(want))));
            }
        }
        Ok(())
    }

    /// Workers hold their nodes for the whole run, so a queued resource
    /// must be able to start all of its workers at once. Replays the
    /// scheduler's first-fit placement in declaration order.
    fn check_queues(&self) -> Result<(), CliError> {
        for r in self.resources.iter().filter(|r| r.middleware == "simsched") {
            let slots = r.slots.unwrap_or(1);
            let mut used = vec![0u32; r.nodes as usize];
            let on_r = self
                .workers
                .iter()
                .filter(|w| w.resource == r.name && w.channel != ChannelKind::Inproc);
            for w in on_r {
                let free: Vec<usize> = (0..used.len()).filter(|&i| used[i] < slots).take(w.nodes as usize).collect();
                if free.len() < w.nodes as usize {
                    return Err(config(format!(
                        "worker `{}` would wait forever on `{}`: the workers before it already hold the nodes it needs",
                        w.name, r.name
                    )));
                }
                for i in free {
                    used[i] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn worker_for(&self, role: Role) -> &WorkerSection {
        self.workers
            .iter()
            .find(|w| Role::of_kernel(&w.kernel) == Some(role))
            .expect("validated scenarios have every role")
    }

    pub fn worker_request(&self, w: &WorkerSection) -> WorkerRequest {
        WorkerRequest {
            name: w.name.clone(),
            kernel: w.kernel.clone(),
            resource: w.resource.clone(),
            nodes: w.nodes,
            channel: w.channel,
        }
    }

    fn is_local(r: &ResourceSection) -> bool {
        r.middleware == "local"
    }

    /// The fabric: host, extra nodes, one site per non-local resource.
    pub fn fabric_spec(&self) -> FabricSpec {
        let mut nodes = vec![FabricNode::standalone(&self.fabric.host)];
        nodes.extend(self.fabric.nodes.iter().filter(|n| n.id != self.fabric.host).cloned());
        let mut policies = self.fabric.policies.clone();
        for r in self.resources.iter().filter(|r| !Self::is_local(r)) {
            nodes.push(FabricNode::frontend(&format!("{}-fe", r.name), &r.name));
            for i in 0..r.nodes {
                nodes.push(FabricNode::compute(&format!("{}-n{i}", r.name), &r.name, !r.private));
            }
            let site = format!("@{}", r.name);
            let outside = format!("!@{}", r.name);
            let latency = r.latency_ms.unwrap_or(self.fabric.default_latency_ms);
            let policy = |from: &str, to: &str, rule, latency| LinkPolicy::new(from, to, rule, latency).expect("generated patterns parse");
            policies.push(policy(&site, &site, Rule::Allow, 0));
            if let Some(rule) = r.firewall {
                policies.push(policy(&outside, &site, rule, latency));
            }
            policies.push(policy("*", &site, Rule::Allow, latency));
        }
        FabricSpec {
            nodes,
            policies,
            default_latency: self.fabric.default_latency_ms,
        }
    }

    pub fn resource_specs(&self) -> Vec<ResourceSpec> {
        self.resources
            .iter()
            .map(|r| {
                let (frontend, compute) = if Self::is_local(r) {
                    (self.fabric.host.clone(), Vec::new())
                } else {
                    (format!("{}-fe", r.name), (0..r.nodes).map(|i| format!("{}-n{i}", r.name)).collect())
                };
                ResourceSpec {
                    install_path: r.install_path.clone(),
                    gpu_capable: r.gpu,
                    compute_nodes: compute,
                    slots_per_node: r.slots.unwrap_or(1),
                    reservation_ticks: r.reservation_ticks,
                    ..ResourceSpec::new(&r.name, &r.middleware, &frontend, r.nodes)
                }
            })
            .collect()
    }

    pub fn daemon_config(&self, out_dir: &Path) -> DaemonConfig {
        DaemonConfig::new(
            self.fabric_spec(),
            &self.fabric.host,
            self.resource_specs(),
            self.base_dir.clone(),
            out_dir.to_path_buf(),
        )
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}
