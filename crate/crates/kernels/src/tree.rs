//! Barnes-Hut octree gravity with monopole cell acceptance.
//!
//! A cell of side `s` whose centre of mass lies at distance `d` from the
//! target is used as a point mass when `s < theta * d` and the target lies
//! outside the cell. Otherwise the cell is opened. Leaves are summed
//! directly with the same arithmetic as [`crate::gravity`].

use crate::gravity::{accumulate, check_softening, Field, Targets};
use crate::particles::{norm2, sub, Vec3};
use crate::{Exec, KernelError, Result};

const MAX_DEPTH: usize = 48;
const NO_CHILD: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeConfig {
    /// Opening angle. Zero requests the exact direct sum.
    pub theta: f64,
    pub leaf_capacity: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self { theta: 0.5, leaf_capacity: 8 }
    }
}

impl TreeConfig {
    pub fn new(theta: f64, leaf_capacity: usize) -> Result<Self> {
        let cfg = Self { theta, leaf_capacity };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(KernelError::InvalidConfig(format!(
                "opening angle must lie in [0, 1], got {}",
                self.theta
            )));
        }
        if self.leaf_capacity == 0 {
            return Err(KernelError::InvalidConfig("leaf capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Cell {
    center: Vec3,
    half: f64,
    mass: f64,
    com: Vec3,
    /// Range into `Octree::order` covered by this cell.
    start: u32,
    end: u32,
    children: [u32; 8],
    leaf: bool,
}

/// An octree over one [`Field`]. Building is sequential and depends only on
/// the input ordering, so repeated builds are identical.
#[derive(Debug, Clone)]
pub struct Octree<'a> {
    field: Field<'a>,
    cells: Vec<Cell>,
    order: Vec<u32>,
    cfg: TreeConfig,
}

impl<'a> Octree<'a> {
    pub fn build(field: Field<'a>, cfg: TreeConfig) -> Result<Self> {
        cfg.validate()?;
        let n = field.len();
        let mut tree = Octree {
            field,
            cells: Vec::with_capacity(2 * n / cfg.leaf_capacity.max(1) + 1),
            order: (0..n as u32).collect(),
            cfg,
        };
        if n == 0 {
            return Ok(tree);
        }
        let (center, half) = bounding_cube(field.pos);
        tree.cells.push(Cell {
            center,
            half,
            mass: 0.0,
            com: [0.0; 3],
            start: 0,
            end: n as u32,
            children: [NO_CHILD; 8],
            leaf: true,
        });
        tree.split(0, 0);
        Ok(tree)
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    fn split(&mut self, idx: usize, depth: usize) {
        let (start, end, center, half) = {
            let c = &self.cells[idx];
            (c.start as usize, c.end as usize, c.center, c.half)
        };
        if end - start > self.cfg.leaf_capacity && depth < MAX_DEPTH {
            // Bucket this cell's particles by octant, keeping input order within a bucket.
            let slice: Vec<u32> = self.order[start..end].to_vec();
            let mut buckets: [Vec<u32>; 8] = Default::default();
            for &p in &slice {
                buckets[octant(center, self.field.pos[p as usize])].push(p);
            }
            let mut cursor = start;
            let mut children = [NO_CHILD; 8];
            for (oct, bucket) in buckets.iter().enumerate() {
                if bucket.is_empty() {
                    continue;
                }
                self.order[cursor..cursor + bucket.len()].copy_from_slice(bucket);
                let q = half / 2.0;
                let child_center = [
                    center[0] + if oct & 1 != 0 { q } else { -q },
                    center[1] + if oct & 2 != 0 { q } else { -q },
                    center[2] + if oct & 4 != 0 { q } else { -q },
                ];
                children[oct] = self.cells.len() as u32;
                self.cells.push(Cell {
                    center: child_center,
                    half: q,
                    mass: 0.0,
                    com: [0.0; 3],
                    start: cursor as u32,
                    end: (cursor + bucket.len()) as u32,
                    children: [NO_CHILD; 8],
                    leaf: true,
                });
                cursor += bucket.len();
            }
            self.cells[idx].children = children;
            self.cells[idx].leaf = false;
            for child in children.into_iter().filter(|&c| c != NO_CHILD) {
                self.split(child as usize, depth + 1);
            }
        }
        self.summarise(idx);
    }

    fn summarise(&mut self, idx: usize) {
        let (start, end) = (self.cells[idx].start as usize, self.cells[idx].end as usize);
        let mut mass = 0.0;
        let mut moment = [0.0; 3];
        for &p in &self.order[start..end] {
            let m = self.field.mass[p as usize];
            let r = self.field.pos[p as usize];
            mass += m;
            for k in 0..3 {
                moment[k] += m * r[k];
            }
        }
        let cell = &mut self.cells[idx];
        cell.mass = mass;
        cell.com = if mass > 0.0 { moment.map(|x| x / mass) } else { cell.center };
    }

    fn accel_at(&self, p: Vec3, skip: Option<usize>, eps2: f64, target: usize) -> Result<Vec3> {
        let mut acc = [0.0; 3];
        if self.cells.is_empty() {
            return Ok(acc);
        }
        let theta = self.cfg.theta;
        let mut stack = vec![0u32];
        while let Some(ci) = stack.pop() {
            let cell = &self.cells[ci as usize];
            if cell.leaf {
                let members = &self.order[cell.start as usize..cell.end as usize];
                accumulate(&self.field, members.iter().map(|&j| j as usize), p, skip, eps2, target, &mut acc)?;
                continue;
            }
            let d = sub(cell.com, p);
            let r2 = norm2(d);
            let size = 2.0 * cell.half;
            if theta > 0.0 && size * size < theta * theta * r2 && !contains(cell, p) {
                let s2 = r2 + eps2;
                let inv = cell.mass / (s2 * s2.sqrt());
                acc[0] += d[0] * inv;
                acc[1] += d[1] * inv;
                acc[2] += d[2] * inv;
            } else {
                // reversed so children are visited in octant order
                for &c in cell.children.iter().rev() {
                    if c != NO_CHILD {
                        stack.push(c);
                    }
                }
            }
        }
        Ok(acc)
    }

    pub fn accelerations(&self, targets: Targets<'_>, eps: f64, exec: Exec) -> Result<Vec<Vec3>> {
        check_softening(eps)?;
        let eps2 = eps * eps;
        let (points, is_self) = targets.resolve(&self.field);
        exec.try_map(points.len(), |i| self.accel_at(points[i], is_self.then_some(i), eps2, i))
    }
}

/// Convenience wrapper: build a tree over `field` and evaluate it once.
/// `theta == 0` takes the direct-sum path.
pub fn accelerations(field: Field<'_>, targets: Targets<'_>, eps: f64, cfg: TreeConfig, exec: Exec) -> Result<Vec<Vec3>> {
    cfg.validate()?;
    if cfg.theta == 0.0 {
        return crate::gravity::accelerations(field, targets, eps, exec);
    }
    Octree::build(field, cfg)?.accelerations(targets, eps, exec)
}

fn bounding_cube(pos: &[Vec3]) -> (Vec3, f64) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in pos {
        for k in 0..3 {
            lo[k] = lo[k].min(r[k]);
            hi[k] = hi[k].max(r[k]);
        }
    }
    let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
    let span = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
    // pad so points on the upper faces fall strictly inside
    let half = if span > 0.0 { 0.5 * span * (1.0 + 1e-9) } else { 1.0 };
    (center, half)
}

#[inline]
fn octant(center: Vec3, p: Vec3) -> usize {
    (p[0] >= center[0]) as usize | ((p[1] >= center[1]) as usize) << 1 | ((p[2] >= center[2]) as usize) << 2
}

#[inline]
fn contains(cell: &Cell, p: Vec3) -> bool {
    (0..3).all(|k| (p[k] - cell.center[k]).abs() <= cell.half)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParticleSet;

    fn grid_set() -> ParticleSet {
        let mut set = ParticleSet::new();
        let mut id = 0;
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    set.push(id, 1.0 + id as f64 * 0.01, [x as f64, y as f64 * 1.1, z as f64 * 0.9], [0.0; 3])
                        .unwrap();
                    id += 1;
                }
            }
        }
        set
    }

    #[test]
    fn empty_tree_gives_zero_field() {
        let set = ParticleSet::new();
        let pts = [[1.0, 2.0, 3.0]];
        let tree = Octree::build(Field::of(&set), TreeConfig::default()).unwrap();
        assert_eq!(tree.accelerations(Targets::Points(&pts), 0.0, Exec::Sequential).unwrap(), vec![[0.0; 3]]);
    }

    #[test]
    fn leaves_respect_capacity_and_cover_all_particles() {
        let set = grid_set();
        let tree = Octree::build(Field::of(&set), TreeConfig::new(0.5, 4).unwrap()).unwrap();
        let mut covered = 0;
        for cell in tree.cells.iter().filter(|c| c.leaf) {
            assert!((cell.end - cell.start) as usize <= 4);
            covered += cell.end - cell.start;
        }
        assert_eq!(covered as usize, set.len());
        let root_mass = tree.cells[0].mass;
        assert!((root_mass - set.total_mass()).abs() < 1e-12);
    }

    #[test]
    fn invalid_opening_angle_rejected() {
        assert!(TreeConfig::new(1.5, 8).is_err());
        assert!(TreeConfig::new(0.5, 0).is_err());
    }

    #[test]
    fn coincident_particles_terminate_build() {
        let mut set = ParticleSet::new();
        for i in 0..20 {
            set.push(i, 1.0, [0.25; 3], [0.0; 3]).unwrap();
        }
        let tree = Octree::build(Field::of(&set), TreeConfig::new(0.5, 2).unwrap()).unwrap();
        let a = tree.accelerations(Targets::Sources, 0.01, Exec::Sequential).unwrap();
        assert!(a.iter().all(|v| v.iter().all(|x| x.abs() < 1e-12)));
    }

    #[test]
    fn zero_theta_is_the_direct_sum() {
        let set = grid_set();
        let cfg = TreeConfig::new(0.0, 8).unwrap();
        let t = accelerations(Field::of(&set), Targets::Sources, 0.0, cfg, Exec::Sequential).unwrap();
        let d = crate::gravity::accelerations(Field::of(&set), Targets::Sources, 0.0, Exec::Sequential).unwrap();
        assert_eq!(t, d);
    }
}
