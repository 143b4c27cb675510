use crate::gravity::{self, Field, Targets};
use crate::particles::{norm2, sub, ParticleSet, Vec3};
use crate::tree::{self, TreeConfig};
use crate::{Exec, KernelError, Result};

/// Interchangeable gravity kernels. Both compute the same physical field;
/// `Tree` trades accuracy for speed through its opening angle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ForceKernel {
    #[default]
    Direct,
    Tree(TreeConfig),
}

impl ForceKernel {
    pub fn accelerations(&self, field: Field<'_>, targets: Targets<'_>, eps: f64, exec: Exec) -> Result<Vec<Vec3>> {
        match self {
            ForceKernel::Direct => gravity::accelerations(field, targets, eps, exec),
            ForceKernel::Tree(cfg) => tree::accelerations(field, targets, eps, *cfg, exec),
        }
    }
}

/// The self-gravity model a single kernel integrates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfGravity {
    pub eps: f64,
    pub kernel: ForceKernel,
    /// Uniform outward acceleration about the set's centre of mass; a crude
    /// stand-in for gas expulsion. Zero disables it.
    pub wind: f64,
    pub exec: Exec,
}

impl Default for SelfGravity {
    fn default() -> Self {
        Self {
            eps: 0.0,
            kernel: ForceKernel::Direct,
            wind: 0.0,
            exec: Exec::default(),
        }
    }
}

impl SelfGravity {
    pub fn with_softening(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    pub fn accelerations(&self, set: &ParticleSet) -> Result<Vec<Vec3>> {
        let mut acc = self.kernel.accelerations(Field::of(set), Targets::Sources, self.eps, self.exec)?;
        if self.wind != 0.0 {
            let c = set.center_of_mass();
            for (a, r) in acc.iter_mut().zip(&set.pos) {
                let d = sub(*r, c);
                let len = norm2(d).sqrt();
                if len > 0.0 {
                    for k in 0..3 {
                        a[k] += self.wind * d[k] / len;
                    }
                }
            }
        }
        Ok(acc)
    }

    /// One kick-drift-kick step of `dt`.
    pub fn step(&self, set: &mut ParticleSet, dt: f64) -> Result<()> {
        kdk_step(set, dt, |s| self.accelerations(s))
    }
}

/// Second-order kick-drift-kick leapfrog.
///
/// Half kick with the current field, full drift, half kick with the field at
/// the new positions.
pub fn kdk_step<F>(set: &mut ParticleSet, dt: f64, mut accel: F) -> Result<()>
where
    F: FnMut(&ParticleSet) -> Result<Vec<Vec3>>,
{
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(KernelError::InvalidConfig(format!("time step must be positive, got {dt}")));
    }
    let a0 = accel(set)?;
    set.kick(&a0, 0.5 * dt)?;
    set.drift(dt);
    let a1 = accel(set)?;
    set.kick(&a1, 0.5 * dt)?;
    Ok(())
}
