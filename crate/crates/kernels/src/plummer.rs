//! Seeded initial conditions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::particles::{ParticleSet, Vec3};

fn isotropic(rng: &mut impl Rng, len: f64) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let s = (1.0 - z * z).sqrt();
    [len * s * phi.cos(), len * s * phi.sin(), len * z]
}

/// Plummer sphere of `n` equal-mass particles in N-body units: total mass 1,
/// virial radius 1, centre of mass at rest at the origin. Ids run from
/// `first_id`.
pub fn plummer_sphere(n: usize, seed: u64, first_id: u64) -> ParticleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParticleSet::new();
    if n == 0 {
        return set;
    }
    let m = 1.0 / n as f64;
    let pos_scale = 3.0 * std::f64::consts::PI / 16.0;
    let vel_scale = 1.0 / pos_scale.sqrt();
    for i in 0..n {
        // truncate the infinite tail at 10 scale radii
        let r = loop {
            let x: f64 = rng.random_range(1e-10..1.0);
            let r = 1.0 / (x.powf(-2.0 / 3.0) - 1.0).sqrt();
            if r < 10.0 {
                break r;
            }
        };
        let q = loop {
            let x: f64 = rng.random();
            let y: f64 = rng.random_range(0.0..0.1);
            if y < x * x * (1.0 - x * x).powf(3.5) {
                break x;
            }
        };
        let escape = std::f64::consts::SQRT_2 * (1.0 + r * r).powf(-0.25);
        let pos = isotropic(&mut rng, r * pos_scale);
        let vel = isotropic(&mut rng, q * escape * vel_scale);
        set.ids.push(first_id + i as u64);
        set.mass.push(m);
        set.pos.push(pos);
        set.vel.push(vel);
    }
    recentre(&mut set);
    set
}

/// Moves the centre of mass to the origin and removes net momentum.
pub fn recentre(set: &mut ParticleSet) {
    let mtot = set.total_mass();
    if mtot == 0.0 {
        return;
    }
    let c = set.center_of_mass();
    let p = set.momentum();
    for (r, v) in set.pos.iter_mut().zip(set.vel.iter_mut()) {
        for k in 0..3 {
            r[k] -= c[k];
            v[k] -= p[k] / mtot;
        }
    }
}

/// Masses drawn from a Salpeter power law `dN/dm ~ m^-2.35` on `[lo, hi]`.
pub fn salpeter_masses(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = 2.35f64;
    let e = 1.0 - alpha;
    let (a, b) = (lo.powf(e), hi.powf(e));
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (a + u * (b - a)).powf(1.0 / e)
        })
        .collect()
}
