//! Dimension-checked quantities.
//!
//! Every unit is a positive scale factor onto the coherent SI unit of its
//! dimension. There are no affine units. Conversions between units of
//! different dimension fail with [`UnitError::DimensionMismatch`], which at
//! the coupler boundary means two models were wired together illegally.

use std::collections::HashMap;
use std::fmt;
use std::ops::{Div, Mul};
use std::sync::Arc;

use thiserror::Error;

pub const DEFAULT_TABLE: &str = include_str!("../data/units.table");

/// Gravitational constant in SI units.
pub const G_SI: f64 = 6.674_30e-11;

const BASE_NAMES: [&str; 7] = ["L", "M", "T", "Θ", "I", "N", "J"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UnitError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: Dimension, right: Dimension },
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unit table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unit `{name}` has non-positive scale {scale}")]
    InvalidScale { name: String, scale: f64 },
}

/// Exponents over (length, mass, time, temperature, current, amount,
/// luminous intensity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Dimension(pub [i8; 7]);

impl Dimension {
    pub const NONE: Dimension = Dimension([0; 7]);
    pub const LENGTH: Dimension = Dimension([1, 0, 0, 0, 0, 0, 0]);
    pub const MASS: Dimension = Dimension([0, 1, 0, 0, 0, 0, 0]);
    pub const TIME: Dimension = Dimension([0, 0, 1, 0, 0, 0, 0]);
    pub const SPEED: Dimension = Dimension([1, 0, -1, 0, 0, 0, 0]);
    pub const ACCELERATION: Dimension = Dimension([1, 0, -2, 0, 0, 0, 0]);
    pub const ENERGY: Dimension = Dimension([2, 1, -2, 0, 0, 0, 0]);

    pub fn exponents(&self) -> [i8; 7] {
        self.0
    }

    pub fn inverse(self) -> Dimension {
        Dimension(self.0.map(|e| -e))
    }

    pub fn pow(self, n: i8) -> Dimension {
        Dimension(self.0.map(|e| e * n))
    }
}

impl Mul for Dimension {
    type Output = Dimension;
    fn mul(self, rhs: Dimension) -> Dimension {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        Dimension(out)
    }
}

impl Div for Dimension {
    type Output = Dimension;
    fn div(self, rhs: Dimension) -> Dimension {
        self * rhs.inverse()
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Dimension::NONE {
            return f.write_str("1");
        }
        let parts: Vec<String> = BASE_NAMES
            .iter()
            .zip(self.0)
            .filter(|(_, e)| *e != 0)
            .map(|(n, e)| if e == 1 { n.to_string() } else { format!("{n}^{e}") })
            .collect();
        f.write_str(&parts.join("·"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    name: Arc<str>,
    dimension: Dimension,
    scale: f64,
}

impl Unit {
    pub fn new(name: impl Into<Arc<str>>, dimension: Dimension, scale: f64) -> Result<Self, UnitError> {
        let name = name.into();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(UnitError::InvalidScale {
                name: name.to_string(),
                scale,
            });
        }
        Ok(Self { name, dimension, scale })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimension(&self) -> Dimension {
        self.dimension
    }

    /// Factor onto the coherent SI unit.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// The coherent SI unit of this dimension.
    pub fn base(&self) -> Unit {
        Unit {
            name: format!("SI[{}]", self.dimension).into(),
            dimension: self.dimension,
            scale: 1.0,
        }
    }

    fn ensure_same_dimension(&self, other: &Unit) -> Result<(), UnitError> {
        if self.dimension != other.dimension {
            return Err(UnitError::DimensionMismatch {
                left: self.dimension,
                right: other.dimension,
            });
        }
        Ok(())
    }

    /// Multiplier taking a value in `self` to a value in `target`.
    pub fn factor_to(&self, target: &Unit) -> Result<f64, UnitError> {
        self.ensure_same_dimension(target)?;
        Ok(self.scale / target.scale)
    }

    pub fn times(&self, other: &Unit) -> Unit {
        Unit {
            name: format!("{}*{}", self.name, other.name).into(),
            dimension: self.dimension * other.dimension,
            scale: self.scale * other.scale,
        }
    }

    pub fn per(&self, other: &Unit) -> Unit {
        Unit {
            name: format!("{}/{}", self.name, other.name).into(),
            dimension: self.dimension / other.dimension,
            scale: self.scale / other.scale,
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantity {
    pub value: f64,
    pub unit: Unit,
}

impl Quantity {
    pub fn new(value: f64, unit: &Unit) -> Self {
        Self {
            value,
            unit: unit.clone(),
        }
    }

    pub fn dimension(&self) -> Dimension {
        self.unit.dimension
    }

    /// `value * unit.scale / target.scale`, refusing cross-dimension moves.
    /// Equal scales leave the value untouched.
    pub fn convert(&self, target: &Unit) -> Result<Quantity, UnitError> {
        self.unit.ensure_same_dimension(target)?;
        let (s, t) = (self.unit.scale, target.scale);
        Ok(Quantity {
            value: if s == t { self.value } else { self.value * s / t },
            unit: target.clone(),
        })
    }

    pub fn value_in(&self, target: &Unit) -> Result<f64, UnitError> {
        Ok(self.convert(target)?.value)
    }

    pub fn to_base(&self) -> Quantity {
        Quantity {
            value: self.value * self.unit.scale,
            unit: self.unit.base(),
        }
    }

    /// Add/sub express `b` in `a`'s unit first; mul/div compose units.
    pub fn combine(&self, other: &Quantity, op: Op) -> Result<Quantity, UnitError> {
        match op {
            Op::Add | Op::Sub => {
                let b = other.convert(&self.unit)?.value;
                let value = if op == Op::Add { self.value + b } else { self.value - b };
                Ok(Quantity {
                    value,
                    unit: self.unit.clone(),
                })
            }
            Op::Mul => Ok(Quantity {
                value: self.value * other.value,
                unit: self.unit.times(&other.unit),
            }),
            Op::Div => Ok(Quantity {
                value: self.value / other.value,
                unit: self.unit.per(&other.unit),
            }),
        }
    }

    pub fn add(&self, other: &Quantity) -> Result<Quantity, UnitError> {
        self.combine(other, Op::Add)
    }

    pub fn sub(&self, other: &Quantity) -> Result<Quantity, UnitError> {
        self.combine(other, Op::Sub)
    }

    pub fn mul(&self, other: &Quantity) -> Quantity {
        self.combine(other, Op::Mul).expect("multiplication is total")
    }

    pub fn div(&self, other: &Quantity) -> Quantity {
        self.combine(other, Op::Div).expect("division is total")
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.value, self.unit)
    }
}

/// A column of values sharing one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantityVec {
    pub values: Vec<f64>,
    pub unit: Unit,
}

impl QuantityVec {
    pub fn new(values: Vec<f64>, unit: &Unit) -> Self {
        Self {
            values,
            unit: unit.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn convert(&self, target: &Unit) -> Result<QuantityVec, UnitError> {
        self.unit.ensure_same_dimension(target)?;
        // multiply then divide, matching `Quantity::convert` bit for bit
        let (s, t) = (self.unit.scale, target.scale);
        let values = if s == t {
            self.values.clone()
        } else {
            self.values.iter().map(|v| v * s / t).collect()
        };
        Ok(QuantityVec {
            values,
            unit: target.clone(),
        })
    }

    pub fn get(&self, i: usize) -> Option<Quantity> {
        self.values.get(i).map(|&v| Quantity::new(v, &self.unit))
    }
}

/// Named units, loadable from the plain-text `name exponents scale` table.
#[derive(Debug, Clone, Default)]
pub struct UnitRegistry {
    units: HashMap<String, Unit>,
}

impl UnitRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry seeded from the bundled table.
    pub fn with_defaults() -> Self {
        Self::parse(DEFAULT_TABLE).expect("bundled unit table is valid")
    }

    pub fn parse(text: &str) -> Result<Self, UnitError> {
        let mut reg = Self::empty();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| UnitError::Parse { line: i + 1, msg };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(perr(format!("expected `name exponents scale`, got {} columns", cols.len())));
            }
            let exps: Vec<i8> = cols[1]
                .split(',')
                .map(|e| e.trim().parse::<i8>().map_err(|e| perr(format!("bad exponent: {e}"))))
                .collect::<Result<_, _>>()?;
            let exps: [i8; 7] = exps
                .try_into()
                .map_err(|v: Vec<i8>| perr(format!("expected 7 exponents, got {}", v.len())))?;
            let scale: f64 = cols[2].parse().map_err(|e| perr(format!("bad scale: {e}")))?;
            reg.insert(Unit::new(cols[0], Dimension(exps), scale)?);
        }
        Ok(reg)
    }

    pub fn insert(&mut self, unit: Unit) {
        self.units.insert(unit.name().to_string(), unit);
    }

    pub fn get(&self, name: &str) -> Result<Unit, UnitError> {
        self.units.get(name).cloned().ok_or_else(|| UnitError::UnknownUnit(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.units.contains_key(name)
    }

    pub fn quantity(&self, value: f64, unit: &str) -> Result<Quantity, UnitError> {
        Ok(Quantity::new(value, &self.get(unit)?))
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.units.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }
}

/// N-body natural units (G = 1) pinned to a physical length and mass scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NbodyUnits {
    pub length: Unit,
    pub mass: Unit,
    pub time: Unit,
    pub speed: Unit,
    pub acceleration: Unit,
    pub energy: Unit,
    /// Energy per unit mass.
    pub potential: Unit,
}

impl NbodyUnits {
    pub fn new(length: &Quantity, mass: &Quantity) -> Result<Self, UnitError> {
        let l = length.convert(&Unit::new("m", Dimension::LENGTH, 1.0)?)?.value;
        let m = mass.convert(&Unit::new("kg", Dimension::MASS, 1.0)?)?.value;
        let t = (l * l * l / (G_SI * m)).sqrt();
        Ok(Self {
            length: Unit::new("nbody_length", Dimension::LENGTH, l)?,
            mass: Unit::new("nbody_mass", Dimension::MASS, m)?,
            time: Unit::new("nbody_time", Dimension::TIME, t)?,
            speed: Unit::new("nbody_speed", Dimension::SPEED, l / t)?,
            acceleration: Unit::new("nbody_acceleration", Dimension::ACCELERATION, l / (t * t))?,
            energy: Unit::new("nbody_energy", Dimension::ENERGY, m * l * l / (t * t))?,
            potential: Unit::new("nbody_potential", Dimension::SPEED * Dimension::SPEED, l * l / (t * t))?,
        })
    }

    pub fn register(&self, reg: &mut UnitRegistry) {
        for u in [
            &self.length,
            &self.mass,
            &self.time,
            &self.speed,
            &self.acceleration,
            &self.energy,
            &self.potential,
        ] {
            reg.insert(u.clone());
        }
    }
}
