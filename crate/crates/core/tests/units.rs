//! Quantity laws, and conversion at the coupler boundary.

use jungle::coupler::{ChannelKind, Coupler, CouplerError, Value, WorkerRequest};
use jungle::units::{Dimension, Quantity, QuantityVec, Unit, UnitRegistry};
use proptest::prelude::*;

fn registry() -> UnitRegistry {
    UnitRegistry::with_defaults()
}

fn unit_name() -> impl Strategy<Value = String> {
    let names: Vec<String> = registry().names().into_iter().map(String::from).collect();
    proptest::sample::select(names)
}

/// Three unit names sharing a dimension.
fn same_dimension_triple() -> impl Strategy<Value = (String, String, String)> {
    let reg = registry();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for n in reg.names() {
        let d = reg.get(n).unwrap().dimension();
        match groups.iter_mut().find(|g| reg.get(&g[0]).unwrap().dimension() == d) {
            Some(g) => g.push(n.to_string()),
            None => groups.push(vec![n.to_string()]),
        }
    }
    proptest::sample::select(groups).prop_flat_map(|g| {
        let pick = || proptest::sample::select(g.clone());
        (pick(), pick(), pick())
    })
}

fn dimension() -> impl Strategy<Value = Dimension> {
    proptest::array::uniform7(-4i8..=4).prop_map(Dimension)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 512,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn conversion_round_trips(a in unit_name(), b in unit_name(), v in -1e30f64..1e30) {
        let reg = registry();
        let (ua, ub) = (reg.get(&a).unwrap(), reg.get(&b).unwrap());
        let q = Quantity::new(v, &ua);
        match q.convert(&ub) {
            Ok(there) => {
                prop_assert_eq!(ua.dimension(), ub.dimension());
                let back = there.value_in(&ua).unwrap();
                prop_assert!(close(back, v, 4.0 * f64::EPSILON), "{} -> {} -> {}", v, there.value, back);
            }
            Err(_) => prop_assert_ne!(ua.dimension(), ub.dimension()),
        }
    }

    #[test]
    fn conversion_is_transitive((a, b, c) in same_dimension_triple(), v in -1e20f64..1e20) {
        let reg = registry();
        let (ua, ub, uc) = (reg.get(&a).unwrap(), reg.get(&b).unwrap(), reg.get(&c).unwrap());
        let q = Quantity::new(v, &ua);
        let via = q.convert(&ub).unwrap().value_in(&uc).unwrap();
        let direct = q.value_in(&uc).unwrap();
        prop_assert!(close(via, direct, 4.0 * f64::EPSILON));
    }

    #[test]
    fn vector_and_scalar_conversion_agree((a, b, _) in same_dimension_triple(), vs in prop::collection::vec(-1e10f64..1e10, 0..20)) {
        let reg = registry();
        let (ua, ub) = (reg.get(&a).unwrap(), reg.get(&b).unwrap());
        let converted = QuantityVec::new(vs.clone(), &ua).convert(&ub).unwrap();
        for (v, c) in vs.iter().zip(&converted.values) {
            prop_assert_eq!(Quantity::new(*v, &ua).value_in(&ub).unwrap().to_bits(), c.to_bits());
        }
    }

    #[test]
    fn dimensions_form_an_abelian_group(a in dimension(), b in dimension(), c in dimension()) {
        prop_assume!([a, b, c].iter().all(|d| d.0.iter().all(|e| e.abs() <= 4)));
        prop_assert_eq!(a * b, b * a);
        prop_assert_eq!((a * b) * c, a * (b * c));
        prop_assert_eq!(a * Dimension::NONE, a);
        prop_assert_eq!(a * a.inverse(), Dimension::NONE);
        prop_assert_eq!(a / b, a * b.inverse());
        prop_assert_eq!(a.pow(2), a * a);
    }

    #[test]
    fn products_carry_dimension_and_scale(a in unit_name(), b in unit_name(), x in -1e6f64..1e6, y in 1e-6f64..1e6) {
        let reg = registry();
        let (ua, ub) = (reg.get(&a).unwrap(), reg.get(&b).unwrap());
        let (p, q) = (Quantity::new(x, &ua), Quantity::new(y, &ub));
        let prod = p.mul(&q);
        prop_assert_eq!(prod.dimension(), ua.dimension() * ub.dimension());
        prop_assert!(close(prod.to_base().value, p.to_base().value * q.to_base().value, 8.0 * f64::EPSILON));
        let quot = p.div(&q);
        prop_assert_eq!(quot.dimension(), ua.dimension() / ub.dimension());
        prop_assert!(close(quot.mul(&q).to_base().value, p.to_base().value, 16.0 * f64::EPSILON));
    }

    #[test]
    fn addition_needs_matching_dimensions(a in unit_name(), b in unit_name(), x in -1e6f64..1e6, y in -1e6f64..1e6) {
        let reg = registry();
        let (ua, ub) = (reg.get(&a).unwrap(), reg.get(&b).unwrap());
        let (p, q) = (Quantity::new(x, &ua), Quantity::new(y, &ub));
        match p.add(&q) {
            Ok(sum) => {
                prop_assert_eq!(sum.unit.name(), ua.name());
                let other = q.add(&p).unwrap().value_in(&ua).unwrap();
                // cancellation makes a relative bound meaningless; compare against the operands
                let scale = x.abs() + q.value_in(&ua).unwrap().abs();
                prop_assert!((sum.value - other).abs() <= 8.0 * f64::EPSILON * scale);
            }
            Err(_) => prop_assert_ne!(ua.dimension(), ub.dimension()),
        }
    }
}

fn test_worker() -> jungle::coupler::Worker {
    Coupler::new(registry())
        .create_worker(&WorkerRequest {
            name: "t".into(),
            kernel: "test".into(),
            resource: "local".into(),
            nodes: 1,
            channel: ChannelKind::Inproc,
        })
        .unwrap()
}

proptest! {
    #![proptest_config(config())]

    /// Arguments reach the kernel in the manifest's unit, whatever unit the
    /// caller used.
    #[test]
    fn coupler_converts_before_sending(unit in prop::sample::select(vec!["m", "km", "AU", "pc", "kpc", "RSun"]), v in 0f64..1e12) {
        let reg = registry();
        let w = test_worker();
        let u = reg.get(unit).unwrap();
        w.call("set_radius", &[Value::Quantity(QuantityVec::new(vec![v], &u))]).unwrap();
        let out = w.call("get_radius", &[]).unwrap();
        let q = out[0].quantity().unwrap();
        prop_assert_eq!(q.unit.name(), "m");
        prop_assert_eq!(q.values[0].to_bits(), Quantity::new(v, &u).value_in(&reg.get("m").unwrap()).unwrap().to_bits());
        prop_assert!(close(out[0].values_in(&u).unwrap()[0], v, 4.0 * f64::EPSILON));
    }

    /// Wrong-dimension arguments are refused before anything is sent.
    #[test]
    fn wrong_dimension_is_refused_locally(unit in prop::sample::select(vec!["kg", "s", "MSun", "J", "K", "km/s"]), v in -1e6f64..1e6) {
        let w = test_worker();
        let u = registry().get(unit).unwrap();
        let err = w.call("set_radius", &[Value::Quantity(QuantityVec::new(vec![v], &u))]).unwrap_err();
        let is_mismatch = matches!(err, CouplerError::DimensionMismatch { .. });
        prop_assert!(is_mismatch, "{}", err);
        prop_assert_eq!(w.stats().bytes_sent, 0);
    }
}

#[test]
fn bare_numbers_need_a_unit() {
    let w = test_worker();
    let err = w.call("set_radius", &[Value::Double(vec![1.0])]).unwrap_err();
    assert!(matches!(err, CouplerError::MissingUnit { .. }), "{err}");
}

#[test]
fn invalid_scales_are_rejected() {
    for s in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(Unit::new("bad", Dimension::LENGTH, s).is_err());
    }
}
