//! Kernel implementations served behind the call-frame interface.
//!
//! A [`Dispatcher`] decodes a frame, checks it against the kernel's
//! manifest, runs the function and encodes the reply. Failures inside the
//! kernel become error replies; they never take the worker down.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use jungle_kernels::gravity::{self, Field, Targets};
use jungle_kernels::{EvolutionTable, Exec, ForceKernel, ParticleSet, SelfGravity, StellarPopulation, SupernovaEvent, TreeConfig, Vec3};

use super::callframe::CallFrame;
use super::manifest::{pack, unpack, Column, Manifest};

const MANIFESTS: [&str; 4] = [
    include_str!("../../manifests/nbody.manifest"),
    include_str!("../../manifests/coupling.manifest"),
    include_str!("../../manifests/stellar.manifest"),
    include_str!("../../manifests/test.manifest"),
];

fn manifests() -> &'static [Arc<Manifest>] {
    static CELL: OnceLock<Vec<Arc<Manifest>>> = OnceLock::new();
    CELL.get_or_init(|| {
        MANIFESTS
            .iter()
            .map(|t| Arc::new(Manifest::parse(t).expect("bundled manifest parses")))
            .collect()
    })
}

/// The manifest describing `kernel`, if it is a known kernel.
pub fn manifest_for(kernel: &str) -> Option<Arc<Manifest>> {
    manifests().iter().find(|m| m.kernels.iter().any(|k| k == kernel)).cloned()
}

pub fn kernel_names() -> Vec<&'static str> {
    manifests().iter().flat_map(|m| m.kernels.iter().map(String::as_str)).collect()
}

/// Named argument columns of one call.
#[derive(Debug)]
pub struct Args {
    rows: usize,
    cols: HashMap<String, Column>,
}

macro_rules! getter {
    ($name:ident, $variant:ident, $t:ty) => {
        pub fn $name(&mut self, name: &str) -> Result<Vec<$t>, String> {
            match self.cols.remove(name) {
                Some(Column::$variant(v)) => Ok(v),
                Some(_) => Err(format!("argument `{name}` has the wrong type")),
                None => Err(format!("missing argument `{name}`")),
            }
        }
    };
}

impl Args {
    pub fn rows(&self) -> usize {
        self.rows
    }

    getter!(ints, Int, i32);
    getter!(longs, Long, i64);
    getter!(floats, Float, f32);
    getter!(doubles, Double, f64);
    getter!(strings, Str, String);

    /// A column that must hold one value repeated on every row.
    pub fn scalar(&mut self, name: &str) -> Result<f64, String> {
        let v = self.doubles(name)?;
        match v.first() {
            Some(&x) if v.iter().all(|&y| y.to_bits() == x.to_bits()) => Ok(x),
            Some(_) => Err(format!("`{name}` must be the same on every row")),
            None => Err(format!("`{name}` needs at least one row")),
        }
    }

    fn single_row(&self) -> Result<(), String> {
        if self.rows == 1 {
            Ok(())
        } else {
            Err(format!("function takes exactly one row, got {}", self.rows))
        }
    }
}

#[derive(Debug, Default)]
pub struct Reply {
    rows: usize,
    cols: HashMap<String, Column>,
}

impl Reply {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            cols: HashMap::new(),
        }
    }

    pub fn with(mut self, name: &str, col: Column) -> Self {
        self.cols.insert(name.to_owned(), col);
        self
    }
}

pub trait Kernel: Send {
    fn invoke(&mut self, function: &str, args: Args) -> Result<Reply, String>;
}

pub struct Dispatcher {
    manifest: Arc<Manifest>,
    kernel: Box<dyn Kernel>,
}

impl Dispatcher {
    pub fn new(manifest: Arc<Manifest>, kernel: Box<dyn Kernel>) -> Self {
        Self { manifest, kernel }
    }

    pub fn manifest(&self) -> &Arc<Manifest> {
        &self.manifest
    }

    pub fn handle(&mut self, frame: &CallFrame) -> CallFrame {
        let id = frame.call_id;
        self.run(frame).unwrap_or_else(|msg| CallFrame::error(id, msg))
    }

    /// Byte-level entry point; undecodable input still gets an error reply.
    pub fn handle_bytes(&mut self, bytes: &[u8]) -> Vec<u8> {
        match CallFrame::decode(bytes) {
            Ok(f) => self.handle(&f).encode(),
            Err(e) => {
                let id = bytes.get(..4).map_or(0, |b| u32::from_le_bytes(b.try_into().expect("4 bytes")));
                CallFrame::error(id, format!("malformed call frame: {e}")).encode()
            }
        }
    }

    fn run(&mut self, frame: &CallFrame) -> Result<CallFrame, String> {
        let f = self
            .manifest
            .by_id(frame.function_id)
            .ok_or_else(|| format!("unknown function id {}", frame.function_id))?
            .clone();
        let cols = unpack(&f.args, frame)?;
        let args = Args {
            rows: frame.call_count as usize,
            cols: f.args.iter().map(|p| p.name.clone()).zip(cols).collect(),
        };
        let mut reply = self.kernel.invoke(&f.name, args)?;
        let mut out_cols = Vec::with_capacity(f.results.len());
        for p in &f.results {
            out_cols.push(
                reply
                    .cols
                    .remove(&p.name)
                    .ok_or_else(|| format!("kernel produced no `{}`", p.name))?,
            );
        }
        let mut out = CallFrame::new(frame.call_id, frame.function_id, 0);
        pack(&f.results, &out_cols, reply.rows, &mut out)?;
        Ok(out)
    }
}

/// Builds a fresh kernel instance by name.
pub fn instantiate(kernel: &str, exec: Exec) -> Option<Dispatcher> {
    let manifest = manifest_for(kernel)?;
    let tree = ForceKernel::Tree(TreeConfig::default());
    let k: Box<dyn Kernel> = match kernel {
        "gravity-direct" | "gas-direct" => Box::new(NbodyKernel::new(ForceKernel::Direct, exec)),
        "gravity-tree" | "gas-tree" => Box::new(NbodyKernel::new(tree, exec)),
        "coupling-direct" => Box::new(CouplingKernel::new(ForceKernel::Direct, exec)),
        "coupling-tree" => Box::new(CouplingKernel::new(tree, exec)),
        "stellar" => Box::new(StellarKernel::new()),
        "test" => Box::new(TestKernel::default()),
        _ => return None,
    };
    Some(Dispatcher::new(manifest, k))
}

fn ids(v: Vec<i64>) -> Result<Vec<u64>, String> {
    v.into_iter()
        .map(|i| u64::try_from(i).map_err(|_| format!("negative particle id {i}")))
        .collect()
}

fn rows_of(set: &ParticleSet, ids: &[u64]) -> Result<Vec<usize>, String> {
    let index: HashMap<u64, usize> = set.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    ids.iter()
        .map(|id| index.get(id).copied().ok_or_else(|| format!("unknown particle id {id}")))
        .collect()
}

fn xyz(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> Vec<Vec3> {
    x.into_iter().zip(y).zip(z).map(|((x, y), z)| [x, y, z]).collect()
}

fn split3(v: &[Vec3]) -> [Column; 3] {
    [0, 1, 2].map(|k| Column::Double(v.iter().map(|p| p[k]).collect()))
}

/// Self-gravitating particles integrated with kick-drift-kick leapfrog.
pub struct NbodyKernel {
    set: ParticleSet,
    model: SelfGravity,
    time: f64,
}

impl NbodyKernel {
    pub fn new(kernel: ForceKernel, exec: Exec) -> Self {
        Self {
            set: ParticleSet::new(),
            model: SelfGravity {
                kernel,
                exec,
                ..SelfGravity::default()
            },
            time: 0.0,
        }
    }
}

impl Kernel for NbodyKernel {
    fn invoke(&mut self, function: &str, mut a: Args) -> Result<Reply, String> {
        let n = a.rows();
        match function {
            "new_particle" => {
                let ids = ids(a.longs("id")?)?;
                let pos = xyz(a.doubles("x")?, a.doubles("y")?, a.doubles("z")?);
                let vel = xyz(a.doubles("vx")?, a.doubles("vy")?, a.doubles("vz")?);
                let add = ParticleSet::from_columns(ids, a.doubles("mass")?, pos, vel).map_err(|e| e.to_string())?;
                self.set = self.set.union(&add).map_err(|e| e.to_string())?;
                Ok(Reply::new(n))
            }
            "get_state" => {
                let rows = rows_of(&self.set, &ids(a.longs("id")?)?)?;
                let s = &self.set;
                let pos: Vec<Vec3> = rows.iter().map(|&r| s.pos[r]).collect();
                let vel: Vec<Vec3> = rows.iter().map(|&r| s.vel[r]).collect();
                let [x, y, z] = split3(&pos);
                let [vx, vy, vz] = split3(&vel);
                Ok(Reply::new(n)
                    .with("mass", Column::Double(rows.iter().map(|&r| s.mass[r]).collect()))
                    .with("x", x)
                    .with("y", y)
                    .with("z", z)
                    .with("vx", vx)
                    .with("vy", vy)
                    .with("vz", vz))
            }
            "set_mass" => {
                let rows = rows_of(&self.set, &ids(a.longs("id")?)?)?;
                let mass = a.doubles("mass")?;
                if let Some(m) = mass.iter().find(|m| !(**m >= 0.0)) {
                    return Err(format!("mass must be non-negative, got {m}"));
                }
                for (r, m) in rows.into_iter().zip(mass) {
                    self.set.mass[r] = m;
                }
                Ok(Reply::new(n))
            }
            "kick" => {
                let rows = rows_of(&self.set, &ids(a.longs("id")?)?)?;
                let acc = xyz(a.doubles("ax")?, a.doubles("ay")?, a.doubles("az")?);
                let dt = a.doubles("dt")?;
                for ((r, g), dt) in rows.into_iter().zip(acc).zip(dt) {
                    for k in 0..3 {
                        self.set.vel[r][k] += g[k] * dt;
                    }
                }
                Ok(Reply::new(n))
            }
            "evolve_model" => {
                a.single_row()?;
                let dt = a.doubles("dt")?[0];
                if !(dt > 0.0) || !dt.is_finite() {
                    return Err(format!("time step must be positive, got {dt}"));
                }
                if !self.set.is_empty() {
                    self.model.step(&mut self.set, dt).map_err(|e| e.to_string())?;
                }
                self.time += dt;
                Ok(Reply::new(1).with("time", Column::Double(vec![self.time])))
            }
            "get_kinetic_energy" => Ok(Reply::new(1).with("energy", Column::Double(vec![self.set.kinetic_energy()]))),
            "get_potential_energy" => {
                let e = gravity::potential_energy(&self.set, self.model.eps, self.model.exec).map_err(|e| e.to_string())?;
                Ok(Reply::new(1).with("energy", Column::Double(vec![e])))
            }
            "get_all" => {
                let s = &self.set;
                let [x, y, z] = split3(&s.pos);
                let [vx, vy, vz] = split3(&s.vel);
                Ok(Reply::new(s.len())
                    .with("id", Column::Long(s.ids.iter().map(|&i| i as i64).collect()))
                    .with("mass", Column::Double(s.mass.clone()))
                    .with("x", x)
                    .with("y", y)
                    .with("z", z)
                    .with("vx", vx)
                    .with("vy", vy)
                    .with("vz", vz))
            }
            "set_parameters" => {
                a.single_row()?;
                let eps = a.doubles("eps")?[0];
                let theta = a.doubles("theta")?[0];
                let wind = a.doubles("wind")?[0];
                gravity::check_softening(eps).map_err(|e| e.to_string())?;
                if !wind.is_finite() {
                    return Err(format!("wind must be finite, got {wind}"));
                }
                if let ForceKernel::Tree(cfg) = &mut self.model.kernel {
                    *cfg = TreeConfig::new(theta, cfg.leaf_capacity).map_err(|e| e.to_string())?;
                }
                self.model.eps = eps;
                self.model.wind = wind;
                Ok(Reply::new(1))
            }
            "get_number_of_particles" => Ok(Reply::new(1).with("n", Column::Int(vec![self.set.len() as i32]))),
            "get_time" => Ok(Reply::new(1).with("time", Column::Double(vec![self.time]))),
            other => Err(format!("function `{other}` not implemented")),
        }
    }
}

/// Evaluates the field of a source set at arbitrary points.
pub struct CouplingKernel {
    mass: Vec<f64>,
    pos: Vec<Vec3>,
    kernel: ForceKernel,
    exec: Exec,
}

impl CouplingKernel {
    pub fn new(kernel: ForceKernel, exec: Exec) -> Self {
        Self {
            mass: Vec::new(),
            pos: Vec::new(),
            kernel,
            exec,
        }
    }
}

impl Kernel for CouplingKernel {
    fn invoke(&mut self, function: &str, mut a: Args) -> Result<Reply, String> {
        let n = a.rows();
        match function {
            "set_sources" => {
                self.pos = xyz(a.doubles("x")?, a.doubles("y")?, a.doubles("z")?);
                self.mass = a.doubles("mass")?;
                Ok(Reply::new(n))
            }
            "get_gravity_at_point" | "get_potential_at_point" => {
                let pts = xyz(a.doubles("x")?, a.doubles("y")?, a.doubles("z")?);
                if n == 0 {
                    let empty = Column::Double(Vec::new());
                    return Ok(Reply::new(0)
                        .with("ax", empty.clone())
                        .with("ay", empty.clone())
                        .with("az", empty.clone())
                        .with("phi", empty));
                }
                let eps = a.scalar("eps")?;
                let field = Field::new(&self.mass, &self.pos);
                if function == "get_gravity_at_point" {
                    let acc = self
                        .kernel
                        .accelerations(field, Targets::Points(&pts), eps, self.exec)
                        .map_err(|e| e.to_string())?;
                    let [ax, ay, az] = split3(&acc);
                    Ok(Reply::new(n).with("ax", ax).with("ay", ay).with("az", az))
                } else {
                    let phi = gravity::potentials(field, Targets::Points(&pts), eps, self.exec).map_err(|e| e.to_string())?;
                    Ok(Reply::new(n).with("phi", Column::Double(phi)))
                }
            }
            "set_parameters" => {
                a.single_row()?;
                let theta = a.doubles("theta")?[0];
                if let ForceKernel::Tree(cfg) = &mut self.kernel {
                    *cfg = TreeConfig::new(theta, cfg.leaf_capacity).map_err(|e| e.to_string())?;
                }
                Ok(Reply::new(1))
            }
            other => Err(format!("function `{other}` not implemented")),
        }
    }
}

/// Table-driven stellar evolution.
pub struct StellarKernel {
    pop: StellarPopulation,
    time: f64,
    pending: Vec<SupernovaEvent>,
}

impl StellarKernel {
    pub fn new() -> Self {
        Self::with_table(Arc::new(EvolutionTable::synthetic()))
    }

    pub fn with_table(table: Arc<EvolutionTable>) -> Self {
        Self {
            pop: StellarPopulation::new(table),
            time: 0.0,
            pending: Vec::new(),
        }
    }

    fn rows(&self, ids: &[u64]) -> Result<Vec<usize>, String> {
        let index: HashMap<u64, usize> = self.pop.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        ids.iter()
            .map(|id| index.get(id).copied().ok_or_else(|| format!("unknown star id {id}")))
            .collect()
    }
}

impl Default for StellarKernel {
    fn default() -> Self {
        Self::new()
    }
}

impl Kernel for StellarKernel {
    fn invoke(&mut self, function: &str, mut a: Args) -> Result<Reply, String> {
        let n = a.rows();
        match function {
            "new_star" => {
                let ids = ids(a.longs("id")?)?;
                let (mass, age) = (a.doubles("mass")?, a.doubles("age")?);
                let mut next = self.pop.clone();
                for ((id, m), t) in ids.into_iter().zip(mass).zip(age) {
                    next.add_star(id, m, t).map_err(|e| e.to_string())?;
                }
                self.pop = next;
                Ok(Reply::new(n))
            }
            "evolve_model" => {
                a.single_row()?;
                let dt = a.doubles("dt")?[0];
                let events = self.pop.evolve(dt).map_err(|e| e.to_string())?;
                self.time += dt;
                let count = events.len() as i32;
                self.pending.extend(events);
                Ok(Reply::new(1).with("supernovae", Column::Int(vec![count])))
            }
            "get_mass" | "get_age" => {
                let rows = self.rows(&ids(a.longs("id")?)?)?;
                let (key, src) = if function == "get_mass" {
                    ("mass", &self.pop.mass)
                } else {
                    ("age", &self.pop.age)
                };
                Ok(Reply::new(n).with(key, Column::Double(rows.iter().map(|&r| src[r]).collect())))
            }
            "get_time" => Ok(Reply::new(1).with("time", Column::Double(vec![self.time]))),
            "get_supernovae" => {
                let ev = std::mem::take(&mut self.pending);
                let col = |f: fn(&SupernovaEvent) -> f64| Column::Double(ev.iter().map(f).collect());
                Ok(Reply::new(ev.len())
                    .with("id", Column::Long(ev.iter().map(|e| e.id as i64).collect()))
                    .with("initial_mass", col(|e| e.initial_mass))
                    .with("age", col(|e| e.age))
                    .with("mass_before", col(|e| e.mass_before))
                    .with("remnant_mass", col(|e| e.remnant_mass)))
            }
            other => Err(format!("function `{other}` not implemented")),
        }
    }
}

/// Exercises every argument type.
#[derive(Debug, Default)]
pub struct TestKernel {
    radius: f64,
}

impl Kernel for TestKernel {
    fn invoke(&mut self, function: &str, mut a: Args) -> Result<Reply, String> {
        let n = a.rows();
        match function {
            "echo_int" => Ok(Reply::new(n).with("x", Column::Int(a.ints("x")?))),
            "echo_long" => Ok(Reply::new(n).with("x", Column::Long(a.longs("x")?))),
            "echo_float" => Ok(Reply::new(n).with("x", Column::Float(a.floats("x")?))),
            "echo_double" => Ok(Reply::new(n).with("x", Column::Double(a.doubles("x")?))),
            "echo_string" => Ok(Reply::new(n).with("s", Column::Str(a.strings("s")?))),
            "set_radius" => {
                a.single_row()?;
                let r = a.doubles("r")?[0];
                if !(r >= 0.0) {
                    return Err(format!("radius must be non-negative, got {r}"));
                }
                self.radius = r;
                Ok(Reply::new(1))
            }
            "get_radius" => Ok(Reply::new(1).with("r", Column::Double(vec![self.radius]))),
            "fail" => Err(a.strings("message")?.join("; ")),
            "mix" => {
                let (i, l, f, d) = (a.ints("a")?, a.longs("b")?, a.floats("c")?, a.doubles("d")?);
                let s = a.strings("e")?;
                let total = (0..n).map(|k| i[k] as f64 + l[k] as f64 + f64::from(f[k]) + d[k]).collect();
                let label = s.iter().map(|s| format!("{s}!")).collect();
                Ok(Reply::new(n).with("total", Column::Double(total)).with("label", Column::Str(label)))
            }
            "sleep" => {
                let ms: i64 = a.ints("ms")?.iter().map(|&m| i64::from(m.max(0))).sum();
                std::thread::sleep(Duration::from_millis(ms as u64));
                Ok(Reply::new(n))
            }
            other => Err(format!("function `{other}` not implemented")),
        }
    }
}
