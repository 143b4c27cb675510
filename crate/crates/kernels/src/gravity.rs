//! Direct-sum Plummer-softened Newtonian gravity, G = 1.
//!
//! The acceleration at a target `r_i` is
//! `sum_j m_j (r_j - r_i) / (|r_j - r_i|^2 + eps^2)^(3/2)`, with the
//! target's own source row excluded when targets are the sources themselves.

use crate::particles::{norm2, sub, ParticleSet, Vec3};
use crate::{Exec, KernelError, Result};

/// Gravitating sources: masses and positions.
#[derive(Debug, Clone, Copy)]
pub struct Field<'a> {
    pub mass: &'a [f64],
    pub pos: &'a [Vec3],
}

impl<'a> Field<'a> {
    pub fn new(mass: &'a [f64], pos: &'a [Vec3]) -> Self {
        debug_assert_eq!(mass.len(), pos.len());
        Self { mass, pos }
    }

    pub fn of(set: &'a ParticleSet) -> Self {
        Self::new(&set.mass, &set.pos)
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

/// Where accelerations are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// The field's own particles; row `i` skips source `i`.
    Sources,
    /// External points, not part of the field.
    Points(&'a [Vec3]),
}

impl Targets<'_> {
    pub(crate) fn resolve<'b>(&'b self, field: &Field<'b>) -> (&'b [Vec3], bool) {
        match self {
            Targets::Sources => (field.pos, true),
            Targets::Points(p) => (p, false),
        }
    }
}

#[inline]
pub(crate) fn check_separation(r2: f64, eps2: f64, source: usize, target: usize) -> Result<()> {
    if r2 == 0.0 && eps2 == 0.0 {
        return Err(KernelError::CoincidentParticles {
            source_index: source,
            target_index: target,
        });
    }
    Ok(())
}

pub fn check_softening(eps: f64) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(KernelError::InvalidConfig(format!("softening must be >= 0, got {eps}")));
    }
    Ok(())
}

/// Accumulates the pull of `field` rows `js` on a target at `p`.
#[inline]
pub(crate) fn accumulate<I: Iterator<Item = usize>>(
    field: &Field<'_>,
    js: I,
    p: Vec3,
    skip: Option<usize>,
    eps2: f64,
    target: usize,
    acc: &mut Vec3,
) -> Result<()> {
    for j in js {
        if Some(j) == skip {
            continue;
        }
        let d = sub(field.pos[j], p);
        let r2 = norm2(d);
        check_separation(r2, eps2, j, target)?;
        let s2 = r2 + eps2;
        let inv = field.mass[j] / (s2 * s2.sqrt());
        acc[0] += d[0] * inv;
        acc[1] += d[1] * inv;
        acc[2] += d[2] * inv;
    }
    Ok(())
}

/// Exact O(N*M) accelerations.
pub fn accelerations(field: Field<'_>, targets: Targets<'_>, eps: f64, exec: Exec) -> Result<Vec<Vec3>> {
    check_softening(eps)?;
    let eps2 = eps * eps;
    let (points, is_self) = targets.resolve(&field);
    exec.try_map(points.len(), |i| {
        let mut acc = [0.0; 3];
        let skip = is_self.then_some(i);
        accumulate(&field, 0..field.len(), points[i], skip, eps2, i, &mut acc)?;
        Ok(acc)
    })
}

/// Softened potential `-sum_j m_j / sqrt(r^2 + eps^2)` at each target.
pub fn potentials(field: Field<'_>, targets: Targets<'_>, eps: f64, exec: Exec) -> Result<Vec<f64>> {
    check_softening(eps)?;
    let eps2 = eps * eps;
    let (points, is_self) = targets.resolve(&field);
    exec.try_map(points.len(), |i| {
        let mut phi = 0.0;
        for j in 0..field.len() {
            if is_self && j == i {
                continue;
            }
            let r2 = norm2(sub(field.pos[j], points[i]));
            check_separation(r2, eps2, j, i)?;
            phi -= field.mass[j] / (r2 + eps2).sqrt();
        }
        Ok(phi)
    })
}

/// Pairwise potential energy of a set with itself.
pub fn potential_energy(set: &ParticleSet, eps: f64, exec: Exec) -> Result<f64> {
    let phi = potentials(Field::of(set), Targets::Sources, eps, exec)?;
    Ok(0.5 * set.mass.iter().zip(&phi).map(|(m, p)| m * p).sum::<f64>())
}

/// Interaction energy between two disjoint sets.
pub fn interaction_energy(a: &ParticleSet, b: &ParticleSet, eps: f64, exec: Exec) -> Result<f64> {
    let phi = potentials(Field::of(b), Targets::Points(&a.pos), eps, exec)?;
    Ok(a.mass.iter().zip(&phi).map(|(m, p)| m * p).sum())
}

/// Kinetic plus potential energy of one self-gravitating set.
pub fn total_energy(set: &ParticleSet, eps: f64, exec: Exec) -> Result<f64> {
    Ok(set.kinetic_energy() + potential_energy(set, eps, exec)?)
}
