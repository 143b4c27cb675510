//! Particle snapshot files.
//!
//! ```text
//! # free comment lines
//! counts <stars> <gas>
//! units mass MSun length pc speed km/s age Myr
//! time <t in the age unit>
//! <one line per star:  id mass x y z vx vy vz age m0>
//! <one line per gas particle:  id mass x y z vx vy vz>
//! ```
//!
//! Numbers are written in the shortest form that reads back to the same
//! double, so a write/read round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use jungle::units::{Unit, UnitRegistry};
use jungle_kernels::ParticleSet;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotUnits {
    pub mass: String,
    pub length: String,
    pub speed: String,
    pub age: String,
}

impl Default for SnapshotUnits {
    fn default() -> Self {
        Self {
            mass: "MSun".into(),
            length: "pc".into(),
            speed: "km/s".into(),
            age: "Myr".into(),
        }
    }
}

impl SnapshotUnits {
    /// Looks the four units up and checks their dimensions.
    pub fn resolve(&self, reg: &UnitRegistry) -> Result<[Unit; 4], CliError> {
        use jungle::units::Dimension as D;
        let mut out = Vec::new();
        for (name, dim) in [
            (&self.mass, D::MASS),
            (&self.length, D::LENGTH),
            (&self.speed, D::SPEED),
            (&self.age, D::TIME),
        ] {
            let u = reg.get(name).map_err(|e| CliError::Config(e.to_string()))?;
            if u.dimension() != dim {
                return Err(CliError::Config(format!("snapshot unit `{name}` has the wrong dimension")));
            }
            out.push(u);
        }
        Ok(out.try_into().expect("four units"))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    pub units: SnapshotUnits,
    pub time: f64,
    pub stars: ParticleSet,
    pub age: Vec<f64>,
    /// Initial (zero-age) stellar masses.
    pub m0: Vec<f64>,
    pub gas: ParticleSet,
}

fn row(out: &mut String, id: u64, m: f64, p: [f64; 3], v: [f64; 3]) {
    let _ = write!(out, "{id} {m} {} {} {} {} {} {}", p[0], p[1], p[2], v[0], v[1], v[2]);
}

impl Snapshot {
    pub fn to_text(&self) -> String {
        let u = &self.units;
        let mut out = String::from("# jungle particle snapshot\n");
        let _ = writeln!(out, "counts {} {}", self.stars.len(), self.gas.len());
        let _ = writeln!(out, "units mass {} length {} speed {} age {}", u.mass, u.length, u.speed, u.age);
        let _ = writeln!(out, "time {}", self.time);
        let s = &self.stars;
        for i in 0..s.len() {
            row(&mut out, s.ids[i], s.mass[i], s.pos[i], s.vel[i]);
            let _ = writeln!(out, " {} {}", self.age[i], self.m0[i]);
        }
        let g = &self.gas;
        for i in 0..g.len() {
            row(&mut out, g.ids[i], g.mass[i], g.pos[i], g.vel[i]);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let err = |line: usize, msg: String| CliError::Snapshot { line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let mut header = |key: &str| -> Result<(usize, Vec<&str>), CliError> {
            let (n, l) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` line")))?;
            let mut cols = l.split_whitespace();
            if cols.next() != Some(key) {
                return Err(err(n, format!("expected `{key}`")));
            }
            Ok((n, cols.collect()))
        };
        let (n, counts) = header("counts")?;
        let [ns, ng]: [usize; 2] = match counts.as_slice() {
            [a, b] => [
                a.parse().map_err(|_| err(n, "bad star count".into()))?,
                b.parse().map_err(|_| err(n, "bad gas count".into()))?,
            ],
            _ => return Err(err(n, "expected `counts <stars> <gas>`".into())),
        };
        let (n, u) = header("units")?;
        let units = match u.as_slice() {
            ["mass", m, "length", l, "speed", s, "age", a] => SnapshotUnits {
                mass: m.to_string(),
                length: l.to_string(),
                speed: s.to_string(),
                age: a.to_string(),
            },
            _ => return Err(err(n, "expected `units mass <u> length <u> speed <u> age <u>`".into())),
        };
        let (n, t) = header("time")?;
        let time = match t.as_slice() {
            [v] => v.parse().map_err(|_| err(n, "bad time".into()))?,
            _ => return Err(err(n, "expected `time <t>`".into())),
        };

        let mut snap = Snapshot {
            units,
            time,
            ..Default::default()
        };
        for k in 0..ns + ng {
            let star = k < ns;
            let (n, l) = lines.next().ok_or_else(|| err(0, format!("expected {} particles, found {k}", ns + ng)))?;
            let cols: Vec<&str> = l.split_whitespace().collect();
            let want = if star { 10 } else { 8 };
            if cols.len() != want {
                return Err(err(n, format!("expected {want} columns, got {}", cols.len())));
            }
            let id: u64 = cols[0].parse().map_err(|_| err(n, format!("bad id `{}`", cols[0])))?;
            let mut v = [0.0f64; 9];
            for (slot, c) in v.iter_mut().zip(&cols[1..]) {
                *slot = c.parse().map_err(|_| err(n, format!("bad number `{c}`")))?;
            }
            let set = if star { &mut snap.stars } else { &mut snap.gas };
            set.push(id, v[0], [v[1], v[2], v[3]], [v[4], v[5], v[6]])
                .map_err(|e| err(n, e.to_string()))?;
            if star {
                snap.age.push(v[7]);
                snap.m0.push(v[8]);
            }
        }
        if let Some((n, _)) = lines.next() {
            return Err(err(n, "trailing data after the last particle".into()));
        }
        if !snap.stars.is_disjoint(&snap.gas) {
            return Err(err(0, "a star and a gas particle share an id".into()));
        }
        Ok(snap)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Snapshot {
        let mut s = Snapshot {
            time: 0.25,
            ..Default::default()
        };
        s.stars.push(1, 12.5, [0.1, -0.2, 0.3], [1.0, 2.0, -3.0]).unwrap();
        s.age.push(0.25);
        s.m0.push(13.0);
        s.gas.push(2, 0.2, [1e-17, 5.0, -7.25], [0.0, -0.0, 1e300]).unwrap();
        s
    }

    #[test]
    fn layout() {
        let text = sample().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "counts 1 1");
        assert_eq!(lines[2], "units mass MSun length pc speed km/s age Myr");
        assert_eq!(lines[4], "1 12.5 0.1 -0.2 0.3 1 2 -3 0.25 13");
        assert_eq!(lines[5].split_whitespace().count(), 8);
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample();
        let back = Snapshot::parse(&s.to_text()).unwrap();
        assert_eq!(back.to_text(), s.to_text());
        assert_eq!(back.gas.pos[0][0].to_bits(), 1e-17f64.to_bits());
        assert_eq!(back.gas.vel[0][1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn damage_is_reported_with_its_line() {
        let text = sample().to_text();
        let short = text.replace(" 0.25 13", "");
        assert!(matches!(Snapshot::parse(&short), Err(CliError::Snapshot { line: 5, .. })));
        let missing = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(Snapshot::parse(&missing).is_err());
        let extra = format!("{text}3 1 1 1 1 1 1 1\n");
        assert!(Snapshot::parse(&extra).is_err());
        assert!(Snapshot::parse(&text.replace("counts 1 1", "counts one 1")).is_err());
    }

    #[test]
    fn shared_ids_rejected() {
        let text = sample().to_text().replace("\n2 0.2", "\n1 0.2");
        assert!(Snapshot::parse(&text).is_err());
    }

    #[test]
    fn units_are_checked() {
        let reg = UnitRegistry::with_defaults();
        assert!(SnapshotUnits::default().resolve(&reg).is_ok());
        let bad = SnapshotUnits {
            mass: "pc".into(),
            ..Default::default()
        };
        assert!(bad.resolve(&reg).is_err());
    }

    proptest! {
        #[test]
        fn any_finite_values_round_trip(
            rows in prop::collection::vec((any::<f64>(), any::<f64>(), any::<f64>()), 0..20),
        ) {
            let mut s = Snapshot::default();
            for (i, (a, b, c)) in rows.iter().enumerate() {
                let f = |x: f64| if x.is_finite() { x } else { 1.0 };
                s.stars.push(i as u64, f(*a), [f(*b), f(*c), f(*a)], [f(*c), f(*b), f(*a)]).unwrap();
                s.age.push(f(*b));
                s.m0.push(f(*c));
                s.gas.push(1000 + i as u64, f(*c), [f(*a); 3], [f(*b); 3]).unwrap();
            }
            let back = Snapshot::parse(&s.to_text()).unwrap();
            prop_assert_eq!(back.to_text(), s.to_text());
            for (x, y) in back.stars.pos.iter().flatten().zip(s.stars.pos.iter().flatten()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
