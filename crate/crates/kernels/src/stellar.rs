//! Parameterised stellar evolution: a grid lookup over initial mass and age.
//!
//! Units are solar masses, Myr, solar radii and solar luminosities. Values
//! are bilinearly interpolated in (ln initial mass, age) and clamped at the
//! grid edges. Stars at or above the supernova threshold that age past their
//! lifetime explode once and keep the remnant mass from then on.
//!
//! The bundled table is synthetic. Lifetimes follow
//! `t(m) = 3 Myr + 10 Gyr * m^-2.5`; it is not fitted to real tracks.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::{KernelError, Result};

/// Text form of [`EvolutionTable::synthetic`].
pub const SYNTHETIC_TABLE: &str = include_str!("../data/synthetic.table");

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarState {
    pub mass: f64,
    pub radius: f64,
    pub luminosity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionTable {
    initial_masses: Vec<f64>,
    ages: Vec<f64>,
    lifetimes: Vec<f64>,
    mass: Vec<f64>,
    radius: Vec<f64>,
    luminosity: Vec<f64>,
    supernova_threshold: f64,
    remnant_mass: f64,
}

fn table_err(msg: impl Into<String>) -> KernelError {
    KernelError::Table(msg.into())
}

/// Index `i` and weight `w` such that the value is `(1-w) v[i] + w v[i+1]`.
fn bracket(xs: &[f64], x: f64) -> (usize, f64) {
    let n = xs.len();
    if x <= xs[0] {
        return (0, 0.0);
    }
    if x >= xs[n - 1] {
        return (n - 2, 1.0);
    }
    let i = xs.partition_point(|&v| v <= x) - 1;
    (i, (x - xs[i]) / (xs[i + 1] - xs[i]))
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a * (1.0 - w) + b * w
}

impl EvolutionTable {
    /// Builds a table from row-major grids (`values[i * ages.len() + j]` is
    /// initial mass `i` at age `j`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_grid(
        initial_masses: Vec<f64>,
        ages: Vec<f64>,
        lifetimes: Vec<f64>,
        mass: Vec<f64>,
        radius: Vec<f64>,
        luminosity: Vec<f64>,
        supernova_threshold: f64,
        remnant_mass: f64,
    ) -> Result<Self> {
        let table = Self {
            initial_masses,
            ages,
            lifetimes,
            mass,
            radius,
            luminosity,
            supernova_threshold,
            remnant_mass,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        let (nm, na) = (self.initial_masses.len(), self.ages.len());
        if nm < 2 || na < 2 {
            return Err(table_err("need at least two initial masses and two ages"));
        }
        if !self.initial_masses.windows(2).all(|w| w[0] < w[1]) || self.initial_masses[0] <= 0.0 {
            return Err(table_err("initial masses must be positive and strictly increasing"));
        }
        if !self.ages.windows(2).all(|w| w[0] < w[1]) || self.ages[0] < 0.0 {
            return Err(table_err("ages must be non-negative and strictly increasing"));
        }
        if self.lifetimes.len() != nm || self.lifetimes.iter().any(|&t| !(t > 0.0)) {
            return Err(table_err("one positive lifetime per initial mass required"));
        }
        for grid in [&self.mass, &self.radius, &self.luminosity] {
            if grid.len() != nm * na {
                return Err(table_err(format!("grid has {} values, expected {}", grid.len(), nm * na)));
            }
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(table_err("grid values must be finite"));
            }
        }
        for i in 0..nm {
            let row = &self.mass[i * na..(i + 1) * na];
            if row.windows(2).any(|w| w[1] > w[0]) {
                return Err(table_err(format!(
                    "mass must not increase with age (initial mass {})",
                    self.initial_masses[i]
                )));
            }
            if row.iter().any(|&m| m <= 0.0 || m > self.initial_masses[i]) {
                return Err(table_err("current mass must lie in (0, initial mass]"));
            }
        }
        if !(self.remnant_mass > 0.0) || !(self.supernova_threshold > 0.0) {
            return Err(table_err("remnant mass and supernova threshold must be positive"));
        }
        Ok(())
    }

    /// The bundled synthetic grid.
    pub fn synthetic() -> Self {
        let initial_masses = vec![
            0.1, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0, 30.0, 50.0, 80.0, 100.0,
        ];
        let ages = vec![
            0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 50.0, 70.0, 100.0, 200.0, 500.0,
            1000.0, 2000.0, 5000.0, 10000.0, 13700.0,
        ];
        let threshold = 8.0;
        let remnant = 1.4;
        let lifetime = |m: f64| 3.0 + 1.0e4 * m.powf(-2.5);
        let (mut mass, mut radius, mut luminosity) = (Vec::new(), Vec::new(), Vec::new());
        let lifetimes: Vec<f64> = initial_masses.iter().map(|&m| lifetime(m)).collect();
        for (&m0, &life) in initial_masses.iter().zip(&lifetimes) {
            let loss = 0.05 + 0.25 * (m0.log10() / 2.0).clamp(0.0, 1.0);
            let end_mass = m0 * (1.0 - loss);
            for &age in &ages {
                if age < life {
                    let x = age / life;
                    mass.push(m0 * (1.0 - loss * x * x));
                    radius.push(m0.powf(0.8) * (1.0 + x));
                    luminosity.push(m0.powf(3.5) * (1.0 + x));
                } else if m0 >= threshold {
                    mass.push(remnant);
                    radius.push(1.0e-5);
                    luminosity.push(0.0);
                } else {
                    mass.push((0.6 + 0.1 * m0).min(end_mass));
                    radius.push(0.01);
                    luminosity.push(1.0e-3);
                }
            }
        }
        Self::from_grid(initial_masses, ages, lifetimes, mass, radius, luminosity, threshold, remnant)
            .expect("synthetic table is valid")
    }

    /// Parses the plain-text grid format.
    ///
    /// ```text
    /// supernova_threshold 8
    /// remnant_mass 1.4
    /// ages 0 1 2
    /// lifetime <initial mass> <Myr>
    /// node <initial mass> <age> <mass> <radius> <luminosity>
    /// ```
    /// Blank lines and `#` comments are ignored. Every (lifetime mass, age)
    /// pair needs exactly one `node` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut threshold = None;
        let mut remnant = None;
        let mut ages: Option<Vec<f64>> = None;
        let mut lifetimes: Vec<(f64, f64)> = Vec::new();
        let mut nodes: Vec<[f64; 5]> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let nums: Vec<f64> = parts
                .map(|p| p.parse::<f64>().map_err(|e| table_err(format!("line {}: {e}", lineno + 1))))
                .collect::<Result<_>>()?;
            let want = |n: usize| -> Result<()> {
                if nums.len() == n {
                    Ok(())
                } else {
                    Err(table_err(format!("line {}: `{key}` takes {n} values", lineno + 1)))
                }
            };
            match key {
                "supernova_threshold" => {
                    want(1)?;
                    threshold = Some(nums[0]);
                }
                "remnant_mass" => {
                    want(1)?;
                    remnant = Some(nums[0]);
                }
                "ages" => ages = Some(nums),
                "lifetime" => {
                    want(2)?;
                    lifetimes.push((nums[0], nums[1]));
                }
                "node" => {
                    want(5)?;
                    nodes.push([nums[0], nums[1], nums[2], nums[3], nums[4]]);
                }
                other => return Err(table_err(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        let ages = ages.ok_or_else(|| table_err("missing `ages` line"))?;
        let threshold = threshold.ok_or_else(|| table_err("missing `supernova_threshold`"))?;
        let remnant = remnant.ok_or_else(|| table_err("missing `remnant_mass`"))?;
        lifetimes.sort_by(|a, b| a.0.total_cmp(&b.0));
        let initial_masses: Vec<f64> = lifetimes.iter().map(|l| l.0).collect();
        let na = ages.len();
        let size = initial_masses.len() * na;
        let mut grids = [vec![f64::NAN; size], vec![f64::NAN; size], vec![f64::NAN; size]];
        let mut filled = vec![false; size];
        for [m0, age, m, r, l] in nodes {
            let i = initial_masses
                .iter()
                .position(|&x| x == m0)
                .ok_or_else(|| table_err(format!("node for initial mass {m0} has no lifetime line")))?;
            let j = ages
                .iter()
                .position(|&x| x == age)
                .ok_or_else(|| table_err(format!("node age {age} not listed in `ages`")))?;
            let k = i * na + j;
            if filled[k] {
                return Err(table_err(format!("duplicate node ({m0}, {age})")));
            }
            filled[k] = true;
            grids[0][k] = m;
            grids[1][k] = r;
            grids[2][k] = l;
        }
        if let Some(k) = filled.iter().position(|f| !f) {
            return Err(table_err(format!(
                "missing node ({}, {})",
                initial_masses[k / na],
                ages[k % na]
            )));
        }
        let [mass, radius, luminosity] = grids;
        Self::from_grid(
            initial_masses,
            ages,
            lifetimes.iter().map(|l| l.1).collect(),
            mass,
            radius,
            luminosity,
            threshold,
            remnant,
        )
    }

    /// Serialises to the format read by [`EvolutionTable::parse`]. Values
    /// use shortest round-trip formatting, so parsing the output is lossless.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let na = self.ages.len();
        let _ = writeln!(out, "supernova_threshold {:?}", self.supernova_threshold);
        let _ = writeln!(out, "remnant_mass {:?}", self.remnant_mass);
        let ages: Vec<String> = self.ages.iter().map(|a| format!("{a:?}")).collect();
        let _ = writeln!(out, "ages {}", ages.join(" "));
        for (i, (&m0, &t)) in self.initial_masses.iter().zip(&self.lifetimes).enumerate() {
            let _ = writeln!(out, "lifetime {m0:?} {t:?}");
            for (j, age) in self.ages.iter().enumerate() {
                let k = i * na + j;
                let _ = writeln!(
                    out,
                    "node {m0:?} {age:?} {:?} {:?} {:?}",
                    self.mass[k], self.radius[k], self.luminosity[k]
                );
            }
        }
        out
    }

    pub fn initial_masses(&self) -> &[f64] {
        &self.initial_masses
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn supernova_threshold(&self) -> f64 {
        self.supernova_threshold
    }

    pub fn remnant_mass(&self) -> f64 {
        self.remnant_mass
    }

    /// Tabulated values at grid node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> StarState {
        let k = i * self.ages.len() + j;
        StarState {
            mass: self.mass[k],
            radius: self.radius[k],
            luminosity: self.luminosity[k],
        }
    }

    /// Lifetime, interpolated log-log in initial mass.
    pub fn lifetime(&self, initial_mass: f64) -> f64 {
        let (i, w) = bracket(&self.initial_masses_ln(), initial_mass.ln());
        lerp(self.lifetimes[i].ln(), self.lifetimes[i + 1].ln(), w).exp()
    }

    pub fn explodes(&self, initial_mass: f64) -> bool {
        initial_mass >= self.supernova_threshold
    }

    fn initial_masses_ln(&self) -> Vec<f64> {
        self.initial_masses.iter().map(|m| m.ln()).collect()
    }

    pub fn lookup(&self, initial_mass: f64, age: f64) -> StarState {
        let na = self.ages.len();
        let (i, wm) = if let Some(i) = self.initial_masses.iter().position(|&m| m == initial_mass) {
            // exact row: keeps node values bit-exact
            (i.min(self.initial_masses.len() - 2), if i == self.initial_masses.len() - 1 { 1.0 } else { 0.0 })
        } else {
            bracket(&self.initial_masses_ln(), initial_mass.ln())
        };
        let (j, wa) = bracket(&self.ages, age);
        let at = |grid: &[f64], row: usize| lerp(grid[row * na + j], grid[row * na + j + 1], wa);
        let on_row = wm == 0.0 || wm == 1.0;
        let mass = if on_row {
            at(&self.mass, if wm == 0.0 { i } else { i + 1 })
        } else {
            // interpolate the retained fraction so the star keeps its own scale
            let f0 = at(&self.mass, i) / self.initial_masses[i];
            let f1 = at(&self.mass, i + 1) / self.initial_masses[i + 1];
            lerp(f0, f1, wm) * initial_mass
        };
        StarState {
            mass,
            radius: lerp(at(&self.radius, i), at(&self.radius, i + 1), wm),
            luminosity: lerp(at(&self.luminosity, i), at(&self.luminosity, i + 1), wm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupernovaEvent {
    pub id: u64,
    pub initial_mass: f64,
    /// Age at which the star exploded.
    pub age: f64,
    pub mass_before: f64,
    pub remnant_mass: f64,
}

/// A population of stars tracked by the stellar-evolution kernel.
#[derive(Debug, Clone, Default)]
pub struct StellarPopulation {
    table: Option<Arc<EvolutionTable>>,
    pub ids: Vec<u64>,
    pub initial_mass: Vec<f64>,
    pub age: Vec<f64>,
    pub mass: Vec<f64>,
    pub radius: Vec<f64>,
    pub luminosity: Vec<f64>,
    pub remnant: Vec<bool>,
}

impl StellarPopulation {
    pub fn new(table: Arc<EvolutionTable>) -> Self {
        Self {
            table: Some(table),
            ..Self::default()
        }
    }

    pub fn set_table(&mut self, table: Arc<EvolutionTable>) {
        self.table = Some(table);
    }

    pub fn table(&self) -> Result<&EvolutionTable> {
        self.table.as_deref().ok_or(KernelError::TableMissing)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn add_star(&mut self, id: u64, initial_mass: f64, age: f64) -> Result<()> {
        if self.ids.contains(&id) {
            return Err(KernelError::DuplicateId(id));
        }
        if !(initial_mass > 0.0) || !(age >= 0.0) {
            return Err(KernelError::InvalidConfig(format!(
                "star {id}: initial mass must be positive and age non-negative"
            )));
        }
        let table = self.table()?;
        let remnant = table.explodes(initial_mass) && age >= table.lifetime(initial_mass);
        let state = if remnant {
            StarState {
                mass: table.remnant_mass(),
                radius: 1.0e-5,
                luminosity: 0.0,
            }
        } else {
            table.lookup(initial_mass, age)
        };
        self.ids.push(id);
        self.initial_mass.push(initial_mass);
        self.age.push(age);
        self.mass.push(state.mass);
        self.radius.push(state.radius);
        self.luminosity.push(state.luminosity);
        self.remnant.push(remnant);
        Ok(())
    }

    /// Advances every star by `dt` Myr. Masses never increase.
    pub fn evolve(&mut self, dt: f64) -> Result<Vec<SupernovaEvent>> {
        let table = self.table.clone().ok_or(KernelError::TableMissing)?;
        if !(dt >= 0.0) {
            return Err(KernelError::InvalidConfig(format!("time step must be non-negative, got {dt}")));
        }
        let mut events = Vec::new();
        if dt == 0.0 {
            return Ok(events);
        }
        for k in 0..self.len() {
            let old_age = self.age[k];
            let new_age = old_age + dt;
            self.age[k] = new_age;
            if self.remnant[k] {
                continue;
            }
            let m0 = self.initial_mass[k];
            let life = table.lifetime(m0);
            if table.explodes(m0) && old_age < life && new_age >= life {
                let before = self.mass[k];
                let after = table.remnant_mass().min(before);
                events.push(SupernovaEvent {
                    id: self.ids[k],
                    initial_mass: m0,
                    age: life,
                    mass_before: before,
                    remnant_mass: after,
                });
                self.mass[k] = after;
                self.radius[k] = 1.0e-5;
                self.luminosity[k] = 0.0;
                self.remnant[k] = true;
                continue;
            }
            let state = table.lookup(m0, new_age);
            self.mass[k] = state.mass.min(self.mass[k]);
            self.radius[k] = state.radius;
            self.luminosity[k] = state.luminosity;
        }
        Ok(events)
    }
}
