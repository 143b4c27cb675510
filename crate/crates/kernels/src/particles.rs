use std::collections::HashSet;

use crate::{KernelError, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm2(a: Vec3) -> f64 {
    a[0] * a[0] + a[1] * a[1] + a[2] * a[2]
}

/// Columnar particle state in natural units.
///
/// Ids are unique within a set and stay attached to the same row across
/// every operation in this crate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParticleSet {
    pub ids: Vec<u64>,
    pub mass: Vec<f64>,
    pub pos: Vec<Vec3>,
    pub vel: Vec<Vec3>,
}

impl ParticleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_columns(ids: Vec<u64>, mass: Vec<f64>, pos: Vec<Vec3>, vel: Vec<Vec3>) -> Result<Self> {
        let n = ids.len();
        for len in [mass.len(), pos.len(), vel.len()] {
            if len != n {
                return Err(KernelError::LengthMismatch { expected: n, got: len });
            }
        }
        let set = Self { ids, mass, pos, vel };
        set.check_unique_ids()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u64, mass: f64, pos: Vec3, vel: Vec3) -> Result<()> {
        if self.ids.contains(&id) {
            return Err(KernelError::DuplicateId(id));
        }
        self.ids.push(id);
        self.mass.push(mass);
        self.pos.push(pos);
        self.vel.push(vel);
        Ok(())
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }

    pub fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        for &id in &self.ids {
            if !seen.insert(id) {
                return Err(KernelError::DuplicateId(id));
            }
        }
        Ok(())
    }

    /// True when no id appears in both sets.
    pub fn is_disjoint(&self, other: &ParticleSet) -> bool {
        let mine: HashSet<u64> = self.ids.iter().copied().collect();
        other.ids.iter().all(|id| !mine.contains(id))
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = [0.0; 3];
        for (m, v) in self.mass.iter().zip(&self.vel) {
            for k in 0..3 {
                p[k] += m * v[k];
            }
        }
        p
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.mass
            .iter()
            .zip(&self.vel)
            .map(|(m, v)| 0.5 * m * norm2(*v))
            .sum()
    }

    pub fn center_of_mass(&self) -> Vec3 {
        let m = self.total_mass();
        let mut c = [0.0; 3];
        if m == 0.0 {
            return c;
        }
        for (mi, r) in self.mass.iter().zip(&self.pos) {
            for k in 0..3 {
                c[k] += mi * r[k];
            }
        }
        c.map(|x| x / m)
    }

    /// Concatenation of two sets; ids must be disjoint.
    pub fn union(&self, other: &ParticleSet) -> Result<ParticleSet> {
        let mut out = self.clone();
        out.ids.extend_from_slice(&other.ids);
        out.mass.extend_from_slice(&other.mass);
        out.pos.extend_from_slice(&other.pos);
        out.vel.extend_from_slice(&other.vel);
        out.check_unique_ids()?;
        Ok(out)
    }

    /// Adds `accel * dt` to every velocity.
    pub fn kick(&mut self, accel: &[Vec3], dt: f64) -> Result<()> {
        if accel.len() != self.len() {
            return Err(KernelError::LengthMismatch {
                expected: self.len(),
                got: accel.len(),
            });
        }
        for (v, a) in self.vel.iter_mut().zip(accel) {
            for k in 0..3 {
                v[k] += a[k] * dt;
            }
        }
        Ok(())
    }

    pub fn drift(&mut self, dt: f64) {
        for (r, v) in self.pos.iter_mut().zip(&self.vel) {
            for k in 0..3 {
                r[k] += v[k] * dt;
            }
        }
    }
}
