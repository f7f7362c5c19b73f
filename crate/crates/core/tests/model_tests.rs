use std::sync::Arc;

use mfgcn::io::parse_model;
use mfgcn::measure::MeasureView;
use mfgcn::model::{check_gradients, MeasureTerm, ModelSpec, RunningTerm, TermCosts};
use proptest::prelude::*;

mod common;
use common::{canonical_dynamics, canonical_model};

fn quartic_costs() -> TermCosts {
    TermCosts {
        running: vec![
            RunningTerm::QuadX { c: 0.5 },
            RunningTerm::QuadControl { c: 0.5 },
            RunningTerm::QuarticControl { c: 0.2 },
            RunningTerm::CrossXControl { c: 0.3 },
        ],
        mean_field: vec![MeasureTerm::DevMean { c: 0.5, s: 0.8 }],
        terminal: vec![MeasureTerm::Pairwise { c: 1.0 }],
    }
}

fn quartic_model() -> ModelSpec {
    ModelSpec::new(canonical_dynamics(0.2), Arc::new(quartic_costs()), 1.0, 10.0).unwrap()
}

#[test]
fn declared_gradients_match_finite_differences() {
    let e1 = TermCosts {
        running: vec![RunningTerm::QuadControl { c: 0.5 }],
        mean_field: vec![MeasureTerm::DevMean { c: 1.0, s: 1.0 }],
        terminal: vec![MeasureTerm::DevMean { c: 1.0, s: 1.0 }],
    };
    for (name, check) in [
        ("lq", check_gradients(&*canonical_model().costs, 1.0)),
        ("e1", check_gradients(&e1, 1.0)),
        ("quartic", check_gradients(&quartic_costs(), 1.0)),
    ] {
        assert!(check.passes(1e-6), "{name}: {} at {}", check.max_rel_err, check.worst);
        assert!(check.points > 0);
    }
}

#[test]
fn custom_file_with_bad_constraint_names_it() {
    let text = r#"{
        "costs": {"kind": "lq", "q": 0, "qbar": 1, "s": 2, "qT": 1, "qbarT": 0, "sT": 0},
        "horizon": {"T": 1}
    }"#;
    let err = parse_model(text).unwrap_err().to_string();
    assert!(err.contains("q+qbar-qbar*s >= 0"), "{err}");
}

#[test]
fn lq_minimizer_is_minus_b2_y() {
    let model = canonical_model();
    for y in [-2.0, 0.0, 0.7, 3.1] {
        let a = model.minimize_hamiltonian(0.3, 1.0, y, 0.4, -0.2).unwrap();
        assert!((a + y).abs() < 1e-12, "{a} vs {}", -y);
    }
}

proptest! {
    #[test]
    fn minimizer_is_a_local_minimum(
        t in 0.0f64..1.0, x in -3.0f64..3.0, y in -5.0f64..5.0, z in -2.0f64..2.0, zt in -2.0f64..2.0,
    ) {
        let model = quartic_model();
        let cloud = [-0.5, 0.3, 1.2];
        let m = MeasureView::new(&cloud);
        let a = model.minimize_hamiltonian(t, x, y, z, zt).unwrap();
        let h = model.hamiltonian(t, a, x, y, z, zt, &m);
        for d in [1e-3, 1e-1, 1.0] {
            prop_assert!(model.hamiltonian(t, a + d, x, y, z, zt, &m) >= h - 1e-12);
            prop_assert!(model.hamiltonian(t, a - d, x, y, z, zt, &m) >= h - 1e-12);
        }
    }
}
