//! Operator-split coupling of two self-gravitating systems.
//!
//! One step is a half kick of each system by the other's field, an
//! independent leapfrog drift of each system under its own gravity, and a
//! closing half kick. Stellar evolution runs every `stellar_stride` steps and
//! writes the new masses back into the star set.

use std::collections::HashMap;

use crate::gravity::{self, Field, Targets};
use crate::integrator::{ForceKernel, SelfGravity};
use crate::particles::ParticleSet;
use crate::stellar::{StellarPopulation, SupernovaEvent};
use crate::{Exec, KernelError, Result};

/// Kicks each set's velocities by the other set's field for `dt`.
/// Positions are untouched.
pub fn bridge_kick(
    a: &mut ParticleSet,
    b: &mut ParticleSet,
    dt: f64,
    kernel: ForceKernel,
    eps: f64,
    exec: Exec,
) -> Result<()> {
    if !a.is_disjoint(b) {
        return Err(KernelError::InvalidConfig("bridged sets share particle ids".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(());
    }
    let on_a = kernel.accelerations(Field::of(b), Targets::Points(&a.pos), eps, exec)?;
    let on_b = kernel.accelerations(Field::of(a), Targets::Points(&b.pos), eps, exec)?;
    a.kick(&on_a, dt)?;
    b.kick(&on_b, dt)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeConfig {
    pub dt: f64,
    /// Run stellar evolution every n-th step; `None` never runs it.
    pub stellar_stride: Option<u32>,
    pub kick_kernel: ForceKernel,
    /// Softening of the cross-system kicks.
    pub eps: f64,
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(KernelError::InvalidConfig(format!("bridge dt must be positive, got {}", self.dt)));
        }
        if self.stellar_stride == Some(0) {
            return Err(KernelError::InvalidConfig("stellar stride must be at least 1".into()));
        }
        gravity::check_softening(self.eps)?;
        if let ForceKernel::Tree(cfg) = self.kick_kernel {
            cfg.validate()?;
        }
        Ok(())
    }
}

/// Scale factors between the stellar kernel (MSun, Myr) and natural units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StellarScales {
    pub myr_per_time: f64,
    pub msun_per_mass: f64,
}

impl Default for StellarScales {
    fn default() -> Self {
        Self {
            myr_per_time: 1.0,
            msun_per_mass: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub stellar_ran: bool,
    pub supernovae: Vec<SupernovaEvent>,
    /// Energy change caused by the stellar mass update, natural units.
    pub stellar_energy_change: f64,
}

/// The full coupled integrator for a star set and a gas set.
#[derive(Debug, Clone)]
pub struct Bridge {
    pub cfg: BridgeConfig,
    pub stars: SelfGravity,
    pub gas: SelfGravity,
    pub scales: StellarScales,
    pub exec: Exec,
    steps: u64,
}

impl Bridge {
    pub fn new(cfg: BridgeConfig, stars: SelfGravity, gas: SelfGravity) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            stars,
            gas,
            scales: StellarScales::default(),
            exec: Exec::default(),
            steps: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Kinetic plus all pairwise potential energy of both systems, using the
    /// softening each force term was computed with.
    pub fn energy(&self, stars: &ParticleSet, gas: &ParticleSet) -> Result<f64> {
        let exec = self.exec;
        Ok(stars.kinetic_energy()
            + gas.kinetic_energy()
            + gravity::potential_energy(stars, self.stars.eps, exec)?
            + gravity::potential_energy(gas, self.gas.eps, exec)?
            + gravity::interaction_energy(stars, gas, self.cfg.eps, exec)?)
    }

    pub fn step(
        &mut self,
        stars: &mut ParticleSet,
        gas: &mut ParticleSet,
        stellar: Option<&mut StellarPopulation>,
    ) -> Result<StepReport> {
        let half = 0.5 * self.cfg.dt;
        let dt = self.cfg.dt;
        bridge_kick(stars, gas, half, self.cfg.kick_kernel, self.cfg.eps, self.exec)?;
        let (rs, rg) = self.exec.join(
            || drift(&self.stars, stars, dt),
            || drift(&self.gas, gas, dt),
        );
        rs?;
        rg?;
        bridge_kick(stars, gas, half, self.cfg.kick_kernel, self.cfg.eps, self.exec)?;
        self.steps += 1;

        let mut report = StepReport::default();
        if let (Some(n), Some(pop)) = (self.cfg.stellar_stride, stellar) {
            if self.steps % u64::from(n) == 0 {
                let e0 = self.energy(stars, gas)?;
                report.supernovae = pop.evolve(f64::from(n) * dt * self.scales.myr_per_time)?;
                write_back_masses(pop, stars, self.scales.msun_per_mass)?;
                report.stellar_energy_change = self.energy(stars, gas)? - e0;
                report.stellar_ran = true;
            }
        }
        Ok(report)
    }
}

fn drift(model: &SelfGravity, set: &mut ParticleSet, dt: f64) -> Result<()> {
    if set.is_empty() {
        return Ok(());
    }
    model.step(set, dt)
}

/// Copies stellar masses into the matching rows of `stars`.
pub fn write_back_masses(pop: &StellarPopulation, stars: &mut ParticleSet, msun_per_mass: f64) -> Result<()> {
    let rows: HashMap<u64, usize> = stars.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    for (id, m) in pop.ids.iter().zip(&pop.mass) {
        let &row = rows.get(id).ok_or(KernelError::UnknownId(*id))?;
        stars.mass[row] = m / msun_per_mass;
    }
    Ok(())
}
