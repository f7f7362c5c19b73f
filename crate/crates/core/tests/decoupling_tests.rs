use std::sync::Arc;

use mfgcn::decoupling::{decoupling_function, flow_map, verify_decoupling, verify_semigroup, x_grid, UTableEntry};
use mfgcn::model::{LinearStateSpec, MeasureTerm, ModelSpec, RunningTerm, TermCosts};
use mfgcn::oracle::{solve_riccati, LqSpec};
use mfgcn::simulate::TimeGrid;
use mfgcn::{solve_mfg, w2, EmpiricalMeasure1D, SolverConfig};

mod common;
use common::{canonical_law, canonical_model, rms};

fn small() -> SolverConfig {
    SolverConfig {
        k: 4,
        m: 64,
        ..Default::default()
    }
}

fn grid() -> TimeGrid {
    TimeGrid::new(0.0, 1.0, 10).unwrap()
}

fn cloud() -> EmpiricalMeasure1D {
    EmpiricalMeasure1D::new((0..64).map(|i| 0.5 + (i as f64 * 0.37).sin()).collect()).unwrap()
}

fn static_model(terminal: MeasureTerm) -> ModelSpec {
    let costs = TermCosts {
        running: vec![RunningTerm::QuadControl { c: 0.5 }],
        mean_field: vec![],
        terminal: vec![terminal],
    };
    ModelSpec::new(LinearStateSpec::default(), Arc::new(costs), 1.0, 10.0).unwrap()
}

#[test]
fn flow_map_at_its_start_is_the_identity() {
    let m = cloud();
    let r = flow_map(&canonical_model(), &grid(), 0.3, 0.3, &m, &small()).unwrap();
    assert!(r.x.iter().all(|x| *x == m));
}

#[test]
fn frozen_dynamics_keep_the_law() {
    let m = cloud();
    let r = flow_map(&static_model(MeasureTerm::QuadX { c: 0.5 }), &grid(), 0.2, 0.8, &m, &small()).unwrap();
    for x in &r.x {
        assert_eq!(w2(x, &m), 0.0);
    }
}

#[test]
fn linear_terminal_cost_gives_unit_decoupling_function() {
    let u = decoupling_function(
        &static_model(MeasureTerm::LinearX { c: 1.0 }),
        &grid(),
        0.4,
        Some(&[-1.0, 0.0, 2.5]),
        &cloud(),
        &small(),
    )
    .unwrap();
    for v in &u.u {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    assert!(!u.flagged);
}

#[test]
fn lq_decoupling_function_matches_oracle() {
    let model = canonical_model();
    let m = cloud();
    let cfg = SolverConfig {
        k: 16,
        m: 128,
        ..Default::default()
    };
    let xs = x_grid(&m, 5);
    let u = decoupling_function(&model, &grid(), 0.0, Some(&xs), &m, &cfg).unwrap();
    let sol = solve_riccati(&LqSpec::from_model(&model).unwrap(), &grid()).unwrap();
    let want: Vec<f64> = xs.iter().map(|x| sol.p[0] * x + sol.r[0] * m.mean()).collect();
    let err: Vec<f64> = u.u.iter().zip(&want).map(|(a, b)| a - b).collect();
    assert!(rms(&err) <= 0.05 * rms(&want), "{:?} vs {want:?}", u.u);
    assert!(u.monotonicity_margin() > 0.0);
}

#[test]
fn degenerate_semigroup_legs_have_zero_residual() {
    let m = cloud();
    for (s, t, u) in [(0.0, 0.0, 0.6), (0.0, 0.6, 0.6)] {
        let r = verify_semigroup(&canonical_model(), &grid(), s, t, u, &m, &small()).unwrap();
        assert_eq!(r.residual, 0.0);
        assert!(r.pass);
        assert!(r.baseline > 0.0);
    }
}

#[test]
fn decoupling_error_vanishes_at_maturity() {
    let model = canonical_model();
    let g = grid();
    let cfg = small();
    let eq = solve_mfg(&model, &g, &canonical_law(), &cfg).unwrap();
    let tables = (0..cfg.k)
        .map(|kappa| {
            let m = eq.flow.at(kappa, g.n);
            let xs: Vec<f64> = m.values().to_vec();
            let table = decoupling_function(&model, &g, 1.0, Some(&xs), m, &cfg).unwrap();
            UTableEntry { j: g.n, kappa, table }
        })
        .collect::<Vec<_>>();
    let rep = verify_decoupling(&eq.states, &tables);
    assert!(rep.max_error < 1e-12, "{}", rep.max_error);
}

#[test]
fn times_off_the_grid_are_rejected() {
    assert!(flow_map(&canonical_model(), &grid(), 0.0, 0.55, &cloud(), &small()).is_err());
}
