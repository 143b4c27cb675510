//! The embedded-cluster run: the bridge scheme driven through four workers.
//!
//! Per step: half kick (coupling worker evaluates each system's field at
//! the other's particles), gravity and gas evolve concurrently, half kick.
//! Every `stride` steps the stellar worker evolves the stars and the new
//! masses go back into the gravity worker. Nothing passes between workers
//! except through this driver.

use jungle::coupler::{Coupler, CouplerError, Value, Worker};
use jungle::units::{NbodyUnits, Quantity, QuantityVec, Unit, UnitRegistry};
use jungle_kernels::plummer::{plummer_sphere, salpeter_masses};
use jungle_kernels::ParticleSet;

use crate::scenario::{parse_quantity, Physics, Role};
use crate::snapshot::{Snapshot, SnapshotUnits};
use crate::CliError;

/// Initial conditions in snapshot units (MSun, pc, km/s, Myr).
pub fn generate(physics: &Physics, seed: u64, units: &UnitRegistry) -> Result<Snapshot, CliError> {
    let [msun, pc, kms, _] = SnapshotUnits::default().resolve(units)?;
    let lo = parse_quantity(&physics.star_mass_min, units)?.value_in(&msun)?;
    let hi = parse_quantity(&physics.star_mass_max, units)?.value_in(&msun)?;
    if !(lo > 0.0 && hi >= lo) {
        return Err(CliError::Config(format!("star mass range [{lo}, {hi}] MSun is empty")));
    }
    let gas_total = parse_quantity(&physics.gas_mass, units)?.value_in(&msun)?;
    let length = parse_quantity(&physics.length_scale, units)?;

    let (ns, ng) = (physics.stars, physics.gas);
    let mut stars = plummer_sphere(ns, seed, 1);
    stars.mass = salpeter_masses(ns, lo, hi, seed ^ 0x5eed_5a17);
    let mut gas = plummer_sphere(ng, seed.wrapping_add(1), ns as u64 + 1);
    let per_gas = if ng > 0 { gas_total / ng as f64 } else { 0.0 };
    gas.mass = vec![per_gas; ng];

    // both components share one N-body system of the combined mass
    let total = stars.total_mass() + gas.total_mass();
    let nb = NbodyUnits::new(&length, &Quantity::new(total, &msun))?;
    let to_pc = nb.length.factor_to(&pc)?;
    let to_kms = nb.speed.factor_to(&kms)?;
    for set in [&mut stars, &mut gas] {
        for p in set.pos.iter_mut().flatten() {
            *p *= to_pc;
        }
        for v in set.vel.iter_mut().flatten() {
            *v *= to_kms;
        }
    }
    Ok(Snapshot {
        units: SnapshotUnits::default(),
        time: 0.0,
        age: vec![0.0; ns],
        m0: stars.mass.clone(),
        stars,
        gas,
    })
}

/// The N-body unit system of a snapshot: `length` and its total mass.
pub fn nbody_units(snap: &Snapshot, length: &Quantity, units: &UnitRegistry) -> Result<NbodyUnits, CliError> {
    let [msun, ..] = snap.units.resolve(units)?;
    let total = snap.stars.total_mass() + snap.gas.total_mass();
    if !(total > 0.0) {
        return Err(CliError::Config("initial conditions have no mass".into()));
    }
    Ok(NbodyUnits::new(length, &Quantity::new(total, &msun))?)
}

/// Worker failures carry the worker's name and resource.
fn on(w: &Worker) -> impl Fn(CouplerError) -> CliError + '_ {
    move |source| CliError::Worker {
        worker: w.info().name.clone(),
        resource: w.info().resource.clone(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    /// Model time in N-body units.
    pub time: f64,
    pub energy: f64,
    pub drift: f64,
    pub supernovae: u32,
}

pub struct Workers {
    pub gravity: Worker,
    pub gas: Worker,
    pub coupling: Worker,
    pub stellar: Worker,
}

impl Workers {
    pub fn create(coupler: &Coupler, request: impl Fn(Role) -> jungle::coupler::WorkerRequest) -> Result<Self, CliError> {
        let make = |role| {
            let req = request(role);
            coupler.create_worker(&req).map_err(|source| CliError::Worker {
                worker: req.name.clone(),
                resource: req.resource.clone(),
                source,
            })
        };
        Ok(Self {
            gravity: make(Role::Gravity)?,
            gas: make(Role::Gas)?,
            coupling: make(Role::Coupling)?,
            stellar: make(Role::Stellar)?,
        })
    }

    pub fn all(&self) -> [&Worker; 4] {
        [&self.gravity, &self.gas, &self.coupling, &self.stellar]
    }
}

struct U {
    length: Unit,
    mass: Unit,
    speed: Unit,
    acceleration: Unit,
    time: Unit,
    energy: Unit,
    snap: [Unit; 4],
}

/// Columns of a `get_all` reply, N-body units.
struct State {
    ids: Vec<i64>,
    mass: Vec<f64>,
    pos: [Vec<f64>; 3],
    vel: [Vec<f64>; 3],
}

pub struct Simulation<'a> {
    w: &'a Workers,
    u: U,
    star_ids: Vec<i64>,
    m0: Vec<f64>,
    dt: f64,
    stride: u32,
    eps: f64,
    steps: u64,
    time: f64,
    time_offset: f64,
    e0: f64,
    /// Energy change from stellar mass loss, excluded from the drift.
    stellar_de: f64,
    supernovae: u64,
}

impl<'a> Simulation<'a> {
    /// Loads `ics` into the workers and records the initial energy.
    pub fn start(
        w: &'a Workers,
        ics: &Snapshot,
        physics: &Physics,
        nb: &NbodyUnits,
        units: &UnitRegistry,
    ) -> Result<Self, CliError> {
        let snap = ics.units.resolve(units)?;
        let u = U {
            length: nb.length.clone(),
            mass: nb.mass.clone(),
            speed: nb.speed.clone(),
            acceleration: nb.acceleration.clone(),
            time: nb.time.clone(),
            energy: nb.energy.clone(),
            snap,
        };
        let dt = parse_quantity(&physics.dt, units)?.value_in(&u.time)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CliError::Config(format!("physics.dt must be positive, got `{}`", physics.dt)));
        }
        let eps = parse_quantity(&physics.eps, units)?.value_in(&u.length)?;
        if !(eps >= 0.0) {
            return Err(CliError::Config(format!("physics.eps must be non-negative, got `{}`", physics.eps)));
        }
        let wind = match &physics.wind {
            Some(text) => parse_quantity(text, units)?.value_in(&u.acceleration)?,
            None => 0.0,
        };
        let time_offset = Quantity::new(ics.time, &u.snap[3]).value_in(&u.time)?;

        let [msun, pc, kms, myr] = &u.snap;
        let load = |worker: &Worker, set: &ParticleSet| -> Result<(), CliError> {
            let col = |f: &dyn Fn(usize) -> f64, unit: &Unit| Value::Quantity(QuantityVec::new((0..set.len()).map(f).collect(), unit));
            worker
                .call(
                    "new_particle",
                    &[
                        Value::Long(set.ids.iter().map(|&i| i as i64).collect()),
                        col(&|i| set.mass[i], msun),
                        col(&|i| set.pos[i][0], pc),
                        col(&|i| set.pos[i][1], pc),
                        col(&|i| set.pos[i][2], pc),
                        col(&|i| set.vel[i][0], kms),
                        col(&|i| set.vel[i][1], kms),
                        col(&|i| set.vel[i][2], kms),
                    ],
                )
                .map_err(on(worker))?;
            Ok(())
        };
        load(&w.gravity, &ics.stars)?;
        load(&w.gas, &ics.gas)?;
        let params = |wind: f64| {
            [
                Value::Quantity(QuantityVec::new(vec![eps], &u.length)),
                Value::Double(vec![physics.theta]),
                Value::Quantity(QuantityVec::new(vec![wind], &u.acceleration)),
            ]
        };
        w.gravity.call("set_parameters", &params(0.0)).map_err(on(&w.gravity))?;
        w.gas.call("set_parameters", &params(wind)).map_err(on(&w.gas))?;
        w.coupling
            .call("set_parameters", &[Value::Double(vec![physics.theta])])
            .map_err(on(&w.coupling))?;
        let star_ids: Vec<i64> = ics.stars.ids.iter().map(|&i| i as i64).collect();
        if !star_ids.is_empty() {
            w.stellar
                .call(
                    "new_star",
                    &[
                        Value::Long(star_ids.clone()),
                        Value::Quantity(QuantityVec::new(ics.m0.clone(), msun)),
                        Value::Quantity(QuantityVec::new(ics.age.clone(), myr)),
                    ],
                )
                .map_err(on(&w.stellar))?;
        }

        let mut sim = Self {
            w,
            u,
            star_ids,
            m0: ics.m0.clone(),
            dt,
            stride: physics.stellar_stride,
            eps,
            steps: 0,
            time: 0.0,
            time_offset,
            e0: 0.0,
            stellar_de: 0.0,
            supernovae: 0,
        };
        sim.e0 = sim.energy()?;
        Ok(sim)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn supernovae(&self) -> u64 {
        self.supernovae
    }

    pub fn initial_energy(&self) -> f64 {
        self.e0
    }

    fn read_state(&self, worker: &Worker, pending: jungle::coupler::PendingCall) -> Result<State, CliError> {
        let r = pending.wait().map_err(on(worker))?;
        let col = |i: usize, unit: &Unit| r[i].values_in(unit).map_err(on(worker));
        Ok(State {
            ids: r[0].longs().unwrap_or_default().to_vec(),
            mass: col(1, &self.u.mass)?,
            pos: [col(2, &self.u.length)?, col(3, &self.u.length)?, col(4, &self.u.length)?],
            vel: [col(5, &self.u.speed)?, col(6, &self.u.speed)?, col(7, &self.u.speed)?],
        })
    }

    fn both_states(&self) -> Result<(State, State), CliError> {
        let (g, s) = (&self.w.gravity, &self.w.gas);
        let ps = g.call_async("get_all", &[]).map_err(on(g))?;
        let pg = s.call_async("get_all", &[]).map_err(on(s))?;
        Ok((self.read_state(g, ps)?, self.read_state(s, pg)?))
    }

    fn q(&self, values: Vec<f64>, unit: &Unit) -> Value {
        Value::Quantity(QuantityVec::new(values, unit))
    }

    fn sources(&self, s: &State) -> [Value; 4] {
        let l = &self.u.length;
        [
            self.q(s.mass.clone(), &self.u.mass),
            self.q(s.pos[0].clone(), l),
            self.q(s.pos[1].clone(), l),
            self.q(s.pos[2].clone(), l),
        ]
    }

    fn points(&self, s: &State) -> [Value; 4] {
        let l = &self.u.length;
        [
            self.q(vec![self.eps; s.ids.len()], l),
            self.q(s.pos[0].clone(), l),
            self.q(s.pos[1].clone(), l),
            self.q(s.pos[2].clone(), l),
        ]
    }

    /// Kicks each system by the other's field for `dt`.
    fn bridge_kick(&self, dt: f64) -> Result<(), CliError> {
        let (stars, gas) = self.both_states()?;
        if stars.ids.is_empty() || gas.ids.is_empty() {
            return Ok(());
        }
        let c = &self.w.coupling;
        // four pipelined calls; the worker answers them in order
        let calls = [
            c.call_async("set_sources", &self.sources(&gas)),
            c.call_async("get_gravity_at_point", &self.points(&stars)),
            c.call_async("set_sources", &self.sources(&stars)),
            c.call_async("get_gravity_at_point", &self.points(&gas)),
        ];
        let mut replies = Vec::new();
        for call in calls {
            replies.push(call.map_err(on(c))?.wait().map_err(on(c))?);
        }
        let kick = |worker: &Worker, s: &State, acc: &[Value]| {
            worker
                .call_async(
                    "kick",
                    &[
                        Value::Long(s.ids.clone()),
                        acc[0].clone(),
                        acc[1].clone(),
                        acc[2].clone(),
                        self.q(vec![dt; s.ids.len()], &self.u.time),
                    ],
                )
                .map_err(on(worker))
        };
        let ks = kick(&self.w.gravity, &stars, &replies[1])?;
        let kg = kick(&self.w.gas, &gas, &replies[3])?;
        ks.wait().map_err(on(&self.w.gravity))?;
        kg.wait().map_err(on(&self.w.gas))?;
        Ok(())
    }

    /// Kinetic plus all pairwise potential energy, N-body units.
    pub fn energy(&self) -> Result<f64, CliError> {
        let (g, s, c) = (&self.w.gravity, &self.w.gas, &self.w.coupling);
        let calls = [
            (g, g.call_async("get_kinetic_energy", &[])),
            (g, g.call_async("get_potential_energy", &[])),
            (s, s.call_async("get_kinetic_energy", &[])),
            (s, s.call_async("get_potential_energy", &[])),
        ];
        let mut e = 0.0;
        for (w, call) in calls {
            let r = call.map_err(on(w))?.wait().map_err(on(w))?;
            e += r[0].values_in(&self.u.energy).map_err(on(w))?[0];
        }
        let (stars, gas) = self.both_states()?;
        if !stars.ids.is_empty() && !gas.ids.is_empty() {
            let set = c.call_async("set_sources", &self.sources(&gas)).map_err(on(c))?;
            let phi = c.call_async("get_potential_at_point", &self.points(&stars)).map_err(on(c))?;
            set.wait().map_err(on(c))?;
            let phi = phi.wait().map_err(on(c))?[0].doubles().unwrap_or_default().to_vec();
            e += stars.mass.iter().zip(&phi).map(|(m, p)| m * p).sum::<f64>();
        }
        Ok(e)
    }

    pub fn drift_of(&self, energy: f64) -> f64 {
        (energy - self.e0 - self.stellar_de) / self.e0.abs()
    }

    /// One bridge step.
    pub fn step(&mut self) -> Result<StepInfo, CliError> {
        let half = 0.5 * self.dt;
        self.bridge_kick(half)?;
        let (g, s) = (&self.w.gravity, &self.w.gas);
        let dt = [self.q(vec![self.dt], &self.u.time)];
        let eg = g.call_async("evolve_model", &dt).map_err(on(g))?;
        let es = s.call_async("evolve_model", &dt).map_err(on(s))?;
        eg.wait().map_err(on(g))?;
        es.wait().map_err(on(s))?;
        self.bridge_kick(half)?;
        self.steps += 1;
        self.time += self.dt;

        let mut supernovae = 0;
        if self.steps % u64::from(self.stride) == 0 && !self.star_ids.is_empty() {
            let before = self.energy()?;
            let st = &self.w.stellar;
            let span = self.q(vec![f64::from(self.stride) * self.dt], &self.u.time);
            let r = st.call("evolve_model", &[span]).map_err(on(st))?;
            supernovae = r[0].ints().and_then(|v| v.first().copied()).unwrap_or(0).max(0) as u32;
            let masses = st
                .call("get_mass", &[Value::Long(self.star_ids.clone())])
                .map_err(on(st))?
                .remove(0);
            g.call("set_mass", &[Value::Long(self.star_ids.clone()), masses]).map_err(on(g))?;
            self.stellar_de += self.energy()? - before;
            self.supernovae += u64::from(supernovae);
        }
        let energy = self.energy()?;
        Ok(StepInfo {
            step: self.steps,
            time: self.time,
            energy,
            drift: self.drift_of(energy),
            supernovae,
        })
    }

    /// Current state in snapshot units.
    pub fn snapshot(&self) -> Result<Snapshot, CliError> {
        let [msun, pc, kms, myr] = &self.u.snap;
        let convert = |s: &State| -> Result<ParticleSet, CliError> {
            let m = QuantityVec::new(s.mass.clone(), &self.u.mass).convert(msun)?.values;
            let p: Vec<Vec<f64>> = s
                .pos
                .iter()
                .map(|c| QuantityVec::new(c.clone(), &self.u.length).convert(pc).map(|q| q.values))
                .collect::<Result<_, _>>()?;
            let v: Vec<Vec<f64>> = s
                .vel
                .iter()
                .map(|c| QuantityVec::new(c.clone(), &self.u.speed).convert(kms).map(|q| q.values))
                .collect::<Result<_, _>>()?;
            let n = s.ids.len();
            ParticleSet::from_columns(
                s.ids.iter().map(|&i| i as u64).collect(),
                m,
                (0..n).map(|i| [p[0][i], p[1][i], p[2][i]]).collect(),
                (0..n).map(|i| [v[0][i], v[1][i], v[2][i]]).collect(),
            )
            .map_err(|e| CliError::Config(e.to_string()))
        };
        let (stars, gas) = self.both_states()?;
        let age = if self.star_ids.is_empty() {
            Vec::new()
        } else {
            let st = &self.w.stellar;
            st.call("get_age", &[Value::Long(stars.ids.clone())]).map_err(on(st))?[0]
                .values_in(myr)
                .map_err(on(st))?
        };
        // the gravity worker may order stars differently from the initial conditions
        let m0 = stars
            .ids
            .iter()
            .map(|id| {
                let row = self.star_ids.iter().position(|s| s == id).expect("stars keep their ids");
                self.m0[row]
            })
            .collect();
        let time = Quantity::new(self.time, &self.u.time).value_in(myr)? + Quantity::new(self.time_offset, &self.u.time).value_in(myr)?;
        Ok(Snapshot {
            units: SnapshotUnits::default(),
            time,
            stars: convert(&stars)?,
            age,
            m0,
            gas: convert(&gas)?,
        })
    }
}
