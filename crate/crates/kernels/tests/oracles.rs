//! Kernel results checked against independently written references.

use std::sync::Arc;

use jungle_kernels::gravity::{self, Field, Targets};
use jungle_kernels::plummer::plummer_sphere;
use jungle_kernels::{
    bridge_kick, Bridge, BridgeConfig, EvolutionTable, Exec, ForceKernel, ParticleSet, SelfGravity,
    StellarPopulation, TreeConfig, Vec3,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pairwise reference: visits each unordered pair once, applying the force
/// to both ends. Different loop order and arithmetic from the kernel.
fn pairwise_reference(set: &ParticleSet, eps: f64) -> Vec<Vec3> {
    let n = set.len();
    let mut acc = vec![[0.0f64; 3]; n];
    for i in (0..n).rev() {
        for j in 0..i {
            let dx = set.pos[i][0] - set.pos[j][0];
            let dy = set.pos[i][1] - set.pos[j][1];
            let dz = set.pos[i][2] - set.pos[j][2];
            let r2 = dx.mul_add(dx, dy.mul_add(dy, dz * dz)) + eps * eps;
            let f = 1.0 / (r2.sqrt() * r2);
            acc[j][0] += set.mass[i] * f * dx;
            acc[j][1] += set.mass[i] * f * dy;
            acc[j][2] += set.mass[i] * f * dz;
            acc[i][0] -= set.mass[j] * f * dx;
            acc[i][1] -= set.mass[j] * f * dy;
            acc[i][2] -= set.mass[j] * f * dz;
        }
    }
    acc
}

fn random_set(n: usize, seed: u64) -> ParticleSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParticleSet::new();
    for i in 0..n {
        let pos = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let vel = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        set.push(i as u64, rng.random_range(0.1..2.0), pos, vel).unwrap();
    }
    set
}

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn max_rel_err(got: &[Vec3], want: &[Vec3]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| norm([g[0] - w[0], g[1] - w[1], g[2] - w[2]]) / norm(*w))
        .fold(0.0, f64::max)
}

fn rms_rel_err(got: &[Vec3], want: &[Vec3]) -> f64 {
    let s: f64 = got
        .iter()
        .zip(want)
        .map(|(g, w)| (norm([g[0] - w[0], g[1] - w[1], g[2] - w[2]]) / norm(*w)).powi(2))
        .sum();
    (s / got.len() as f64).sqrt()
}

#[test]
fn direct_sum_matches_pairwise_reference() {
    for (seed, eps) in [(1, 0.0), (2, 0.01), (3, 0.2)] {
        let set = random_set(64, seed);
        let want = pairwise_reference(&set, eps);
        let got = gravity::accelerations(Field::of(&set), Targets::Sources, eps, Exec::Parallel).unwrap();
        let err = max_rel_err(&got, &want);
        assert!(err < 1e-13, "seed {seed}: {err}");
    }
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let set = plummer_sphere(500, 5, 0);
    let a = gravity::accelerations(Field::of(&set), Targets::Sources, 0.01, Exec::Sequential).unwrap();
    let b = gravity::accelerations(Field::of(&set), Targets::Sources, 0.01, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    let cfg = TreeConfig::default();
    let ta = jungle_kernels::tree::accelerations(Field::of(&set), Targets::Sources, 0.01, cfg, Exec::Sequential).unwrap();
    let tb = jungle_kernels::tree::accelerations(Field::of(&set), Targets::Sources, 0.01, cfg, Exec::Parallel).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn tight_tree_equals_direct() {
    let set = random_set(128, 17);
    let cfg = TreeConfig::new(1e-9, 8).unwrap();
    let tree = jungle_kernels::tree::accelerations(Field::of(&set), Targets::Sources, 0.0, cfg, Exec::Parallel).unwrap();
    let direct = gravity::accelerations(Field::of(&set), Targets::Sources, 0.0, Exec::Parallel).unwrap();
    assert!(max_rel_err(&tree, &direct) < 1e-10);
}

#[test]
fn tree_error_shrinks_with_opening_angle() {
    let set = plummer_sphere(4096, 23, 0);
    let eps = 1e-3;
    let direct = gravity::accelerations(Field::of(&set), Targets::Sources, eps, Exec::Parallel).unwrap();
    let mut last = f64::INFINITY;
    for theta in [0.8, 0.5, 0.3, 0.1] {
        let cfg = TreeConfig::new(theta, 8).unwrap();
        let tree =
            jungle_kernels::tree::accelerations(Field::of(&set), Targets::Sources, eps, cfg, Exec::Parallel).unwrap();
        let err = rms_rel_err(&tree, &direct);
        if theta == 0.5 {
            assert!(err < 1e-2, "theta 0.5 rms error {err}");
        }
        assert!(err <= last, "theta {theta}: {err} > {last}");
        last = err;
    }
}

fn circular_binary() -> ParticleSet {
    // unit separation, total mass 1: angular frequency 1, period 2 pi
    ParticleSet::from_columns(
        vec![1, 2],
        vec![0.5, 0.5],
        vec![[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]],
        vec![[0.0, 0.5, 0.0], [0.0, -0.5, 0.0]],
    )
    .unwrap()
}

fn separation(set: &ParticleSet) -> f64 {
    norm([
        set.pos[0][0] - set.pos[1][0],
        set.pos[0][1] - set.pos[1][1],
        set.pos[0][2] - set.pos[1][2],
    ])
}

#[test]
fn circular_orbit_keeps_its_radius() {
    let mut set = circular_binary();
    let model = SelfGravity::default();
    let steps = 1000;
    let dt = std::f64::consts::TAU / steps as f64;
    for _ in 0..steps {
        model.step(&mut set, dt).unwrap();
    }
    let drift = (separation(&set) - 1.0).abs();
    assert!(drift < 1e-6, "radius drift {drift}");
}

#[test]
fn leapfrog_is_time_reversible() {
    let start = plummer_sphere(16, 99, 0);
    let mut set = start.clone();
    let model = SelfGravity::with_softening(0.05);
    for _ in 0..100 {
        model.step(&mut set, 0.01).unwrap();
    }
    for v in &mut set.vel {
        *v = v.map(|x| -x);
    }
    for _ in 0..100 {
        model.step(&mut set, 0.01).unwrap();
    }
    for (a, b) in set.pos.iter().zip(&start.pos) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn cross_kick_is_antisymmetric() {
    let mut star = ParticleSet::from_columns(vec![1], vec![3.0], vec![[0.1, 0.2, -0.3]], vec![[0.0; 3]]).unwrap();
    let mut gas = ParticleSet::from_columns(vec![2], vec![0.7], vec![[-0.4, 0.5, 0.9]], vec![[0.1; 3]]).unwrap();
    let (p_star, p_gas) = (star.momentum(), gas.momentum());
    bridge_kick(&mut star, &mut gas, 0.05, ForceKernel::Direct, 0.01, Exec::Sequential).unwrap();
    let d_star = star.momentum().iter().zip(&p_star).map(|(a, b)| a - b).collect::<Vec<_>>();
    let d_gas = gas.momentum().iter().zip(&p_gas).map(|(a, b)| a - b).collect::<Vec<_>>();
    for k in 0..3 {
        assert!((d_star[k] + d_gas[k]).abs() <= 1e-13 * d_star[k].abs().max(1e-300), "{d_star:?} {d_gas:?}");
    }
}

#[test]
fn tight_tree_kick_equals_direct_kick() {
    let stars = random_set(80, 5);
    let mut gas = random_set(120, 6);
    for id in &mut gas.ids {
        *id += 1000;
    }
    let tree = ForceKernel::Tree(TreeConfig::new(1e-9, 8).unwrap());
    let (mut s1, mut g1) = (stars.clone(), gas.clone());
    let (mut s2, mut g2) = (stars, gas);
    bridge_kick(&mut s1, &mut g1, 0.01, ForceKernel::Direct, 0.01, Exec::Parallel).unwrap();
    bridge_kick(&mut s2, &mut g2, 0.01, tree, 0.01, Exec::Parallel).unwrap();
    for (a, b) in s1.vel.iter().chain(&g1.vel).zip(s2.vel.iter().chain(&g2.vel)) {
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() <= 1e-10 * a[k].abs().max(1e-12));
        }
    }
}

fn plummer_pair(n: usize, seed: u64) -> (ParticleSet, ParticleSet) {
    let mut stars = plummer_sphere(n, seed, 0);
    let mut gas = plummer_sphere(n, seed + 1_000_000, 1_000_000);
    // half the mass in each component; the combined potential is unchanged
    for m in stars.mass.iter_mut().chain(gas.mass.iter_mut()) {
        *m *= 0.5;
    }
    (stars, gas)
}

fn bridge(dt: f64, eps: f64) -> Bridge {
    Bridge::new(
        BridgeConfig {
            dt,
            stellar_stride: None,
            kick_kernel: ForceKernel::Direct,
            eps,
        },
        SelfGravity::with_softening(eps),
        SelfGravity::with_softening(eps),
    )
    .unwrap()
}

#[test]
fn bridge_without_gas_is_plain_leapfrog() {
    let mut stars = plummer_sphere(32, 8, 0);
    let mut alone = stars.clone();
    let mut gas = ParticleSet::new();
    let mut b = bridge(0.01, 0.01);
    let model = SelfGravity::with_softening(0.01);
    for _ in 0..10 {
        b.step(&mut stars, &mut gas, None).unwrap();
        model.step(&mut alone, 0.01).unwrap();
    }
    assert_eq!(stars, alone);
}

#[test]
fn bridge_conserves_momentum() {
    let (mut stars, mut gas) = plummer_pair(64, 31);
    let mut b = bridge(1.0 / 128.0, 0.01);
    let scale: f64 = stars
        .mass
        .iter()
        .zip(&stars.vel)
        .chain(gas.mass.iter().zip(&gas.vel))
        .map(|(m, v)| m * norm(*v))
        .sum();
    for _ in 0..20 {
        let before = [stars.momentum(), gas.momentum()];
        b.step(&mut stars, &mut gas, None).unwrap();
        let after = [stars.momentum(), gas.momentum()];
        for k in 0..3 {
            let d = (after[0][k] + after[1][k]) - (before[0][k] + before[1][k]);
            assert!(d.abs() <= 1e-10 * scale, "momentum change {d}");
        }
    }
}

/// Largest relative energy error seen while integrating for `span` time.
fn energy_error(seed: u64, dt: f64, span: f64, eps: f64) -> f64 {
    let (mut stars, mut gas) = plummer_pair(64, seed);
    let mut b = bridge(dt, eps);
    let e0 = b.energy(&stars, &gas).unwrap();
    let steps = (span / dt).round() as usize;
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        b.step(&mut stars, &mut gas, None).unwrap();
        worst = worst.max(((b.energy(&stars, &gas).unwrap() - e0) / e0).abs());
    }
    worst
}

#[test]
fn bridge_energy_error_is_second_order() {
    let dt = 1.0 / 64.0;
    for seed in [1, 2, 3] {
        let coarse = energy_error(seed, dt, 100.0 * dt, 0.05);
        let fine = energy_error(seed, dt / 2.0, 100.0 * dt, 0.05);
        let ratio = coarse / fine;
        assert!((2.5..=6.0).contains(&ratio), "seed {seed}: ratio {ratio} ({coarse} / {fine})");
    }
}

#[test]
fn bridge_converges_to_monolithic_integration() {
    let (stars0, gas0) = plummer_pair(24, 77);
    let union0 = stars0.union(&gas0).unwrap();
    let span = 0.25;
    let mut errors = Vec::new();
    for steps in [16usize, 32, 64] {
        let dt = span / steps as f64;
        let (mut stars, mut gas) = (stars0.clone(), gas0.clone());
        let mut b = bridge(dt, 0.05);
        let mut union = union0.clone();
        // monolithic reference at a much finer step
        let fine = SelfGravity::with_softening(0.05);
        for _ in 0..steps {
            b.step(&mut stars, &mut gas, None).unwrap();
        }
        for _ in 0..steps * 16 {
            fine.step(&mut union, dt / 16.0).unwrap();
        }
        let worst = stars
            .pos
            .iter()
            .chain(&gas.pos)
            .zip(&union.pos)
            .map(|(a, b)| norm([a[0] - b[0], a[1] - b[1], a[2] - b[2]]))
            .fold(0.0, f64::max);
        errors.push(worst);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[2] < errors[0] / 8.0, "{errors:?}");
}

#[test]
fn massive_star_explodes_exactly_once() {
    let table = Arc::new(EvolutionTable::synthetic());
    let mut pop = StellarPopulation::new(table.clone());
    pop.add_star(1, 20.0, 0.0).unwrap();
    pop.add_star(2, 1.0, 0.0).unwrap();
    let life = table.lifetime(20.0);
    let mut events = Vec::new();
    let mut total = pop.total_mass();
    let mut t = 0.0;
    while t < 2.0 * life {
        events.extend(pop.evolve(0.7).unwrap());
        t += 0.7;
        let now = pop.total_mass();
        assert!(now <= total);
        total = now;
    }
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].id, 1);
    assert_eq!(pop.mass[0], table.remnant_mass());
    assert!(pop.total_mass() < 21.0);
}

#[test]
fn stellar_coupling_writes_masses_back() {
    let table = Arc::new(EvolutionTable::synthetic());
    let mut stars = ParticleSet::new();
    let mut pop = StellarPopulation::new(table.clone());
    for (id, m0) in [(1u64, 30.0), (2, 2.0)] {
        pop.add_star(id, m0, 0.0).unwrap();
        stars.push(id, m0, [id as f64, 0.0, 0.0], [0.0; 3]).unwrap();
    }
    let mut gas = ParticleSet::new();
    let mut b = bridge(1.0, 0.1);
    b.cfg.stellar_stride = Some(2);
    let r1 = b.step(&mut stars, &mut gas, Some(&mut pop)).unwrap();
    assert!(!r1.stellar_ran);
    let r2 = b.step(&mut stars, &mut gas, Some(&mut pop)).unwrap();
    assert!(r2.stellar_ran);
    assert_eq!(pop.age, vec![2.0, 2.0]);
    assert_eq!(stars.mass, pop.mass);
    assert!(stars.mass[0] < 30.0);
}
