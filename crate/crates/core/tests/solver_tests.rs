use std::sync::Arc;

use mfgcn::fbsde::MfgSystem;
use mfgcn::lsmc::martingale_check;
use mfgcn::model::{LinearStateSpec, MeasureTerm, ModelSpec, RunningTerm, TermCosts};
use mfgcn::oracle::{individual_offset, solve_riccati, LqSpec};
use mfgcn::simulate::{InitialLaw, StateField, TimeGrid};
use mfgcn::{solve_individual, solve_mfg, EmpiricalMeasure1D, MeasureFlow, SolverConfig};

mod common;
use common::{canonical_dynamics, canonical_law, canonical_model, rms, CANONICAL};

fn small() -> SolverConfig {
    SolverConfig {
        k: 16,
        m: 128,
        ..Default::default()
    }
}

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, n).unwrap()
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = canonical_model();
    let runs: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&t| {
            let cfg = SolverConfig {
                threads: Some(t),
                ..small()
            };
            solve_mfg(&model, &grid(20), &canonical_law(), &cfg).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.states, runs[0].states);
        assert_eq!(r.policy, runs[0].policy);
        assert_eq!(r.report.residual_history, runs[0].report.residual_history);
    }
}

#[test]
fn report_history_matches_iterations() {
    let sol = solve_mfg(&canonical_model(), &grid(20), &canonical_law(), &small()).unwrap();
    assert!(sol.report.converged);
    assert_eq!(sol.report.residual_history.len(), sol.report.outer_iters);
}

#[test]
fn backward_defect_is_a_martingale_increment() {
    let model = canonical_model();
    let g = grid(20);
    let sol = solve_mfg(&model, &g, &canonical_law(), &small()).unwrap();
    let check = martingale_check(&MfgSystem::new(&model, g), &sol.flow, &sol.states, &sol.noise).unwrap();
    let (mean, se) = check.pooled();
    assert!(mean.abs() <= 3.0 * se, "pooled defect {mean} with SE {se}");
}

#[test]
fn individual_solve_matches_frozen_mean_oracle() {
    let model = ModelSpec::lq(canonical_dynamics(0.0), CANONICAL, 1.0, 10.0).unwrap();
    let g = grid(25);
    let cfg = small();
    let mbar: Vec<f64> = (0..=g.n).map(|j| 1.0 + 0.5 * g.t(j)).collect();
    let measures = (0..cfg.k)
        .flat_map(|_| mbar.iter().map(|&v| EmpiricalMeasure1D::dirac(v).unwrap()))
        .collect();
    let flow = MeasureFlow::from_parts(cfg.k, g.n, measures, None).unwrap();
    let (_, states, report) = solve_individual(&model, &flow, &g, &canonical_law(), &cfg).unwrap();
    assert!(report.converged);

    let lq = LqSpec::from_model(&model).unwrap();
    let sol = solve_riccati(&lq, &g).unwrap();
    let r = individual_offset(&lq, &g, &mbar).unwrap();
    let x0 = states.column(StateField::X, 0);
    let y0 = states.column(StateField::Y, 0);
    let want: Vec<f64> = x0.iter().map(|x| sol.p[0] * x + r[0]).collect();
    let err: Vec<f64> = y0.iter().zip(&want).map(|(a, b)| a - b).collect();
    assert!(rms(&err) <= 0.05 * rms(&want), "{} vs {}", rms(&err), rms(&want));
}

#[test]
fn zero_common_noise_gives_identical_path_laws() {
    let model = ModelSpec::lq(canonical_dynamics(0.0), CANONICAL, 1.0, 10.0).unwrap();
    let cfg = small();
    let sol = solve_mfg(&model, &grid(20), &canonical_law(), &cfg).unwrap();
    let means: Vec<f64> = (0..cfg.k).map(|k| sol.states.path_mean(k, 20)).collect();
    let grand = means.iter().sum::<f64>() / cfg.k as f64;
    let spread = (means.iter().map(|v| (v - grand).powi(2)).sum::<f64>() / (cfg.k - 1) as f64).sqrt();
    let within = sol.flow.at(0, 20).std_dev();
    assert!(spread <= 3.0 * within / (cfg.m as f64).sqrt(), "{spread} vs {within}");
    // no common noise: Zt must vanish
    assert!(sol.states.column(StateField::Zt, 5).iter().all(|z| z.abs() < 0.05));
}

#[test]
fn coupling_free_problem_converges_at_once() {
    let dynamics = LinearStateSpec {
        b1: 0.1.into(),
        sigma0: 0.3.into(),
        tsigma0: 0.2.into(),
        ..Default::default()
    };
    let costs = TermCosts {
        running: vec![RunningTerm::QuadX { c: 0.5 }, RunningTerm::QuadControl { c: 0.5 }],
        mean_field: vec![],
        terminal: vec![MeasureTerm::QuadX { c: 0.5 }],
    };
    let model = ModelSpec::new(dynamics, Arc::new(costs), 1.0, 10.0).unwrap();
    assert!(model.is_coupling_free());
    let sol = solve_mfg(&model, &grid(10), &canonical_law(), &small()).unwrap();
    assert!(sol.report.converged);
    assert!(sol.report.outer_iters <= 2, "{} iterations", sol.report.outer_iters);
}

#[test]
fn single_step_linear_terminal_gives_unit_adjoint() {
    let costs = TermCosts {
        running: vec![RunningTerm::QuadControl { c: 0.5 }],
        mean_field: vec![],
        terminal: vec![MeasureTerm::LinearX { c: 1.0 }],
    };
    let dynamics = LinearStateSpec {
        sigma0: 0.3.into(),
        ..Default::default()
    };
    let model = ModelSpec::new(dynamics, Arc::new(costs), 1.0, 10.0).unwrap();
    let sol = solve_mfg(&model, &grid(1), &InitialLaw::Constant { value: 0.5 }, &small()).unwrap();
    for y in sol.states.column(StateField::Y, 0) {
        assert!((y - 1.0).abs() < 1e-9, "{y}");
    }
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = SolverConfig {
        damping: 0.0,
        ..small()
    };
    let err = solve_mfg(&canonical_model(), &grid(5), &canonical_law(), &cfg).unwrap_err();
    assert!(err.to_string().contains("damping"), "{err}");
}
