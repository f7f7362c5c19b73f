//! Shared fixtures for the benchmarks.

use mfgcn::model::{LinearStateSpec, LqParams, ModelSpec};
use mfgcn::{InitialLaw, SolverConfig, TimeGrid};

/// The linear-quadratic reference game on `[0, 1]`.
pub fn reference_model() -> ModelSpec {
    let dynamics = LinearStateSpec {
        b1: 0.1.into(),
        b2: 1.0.into(),
        sigma0: 0.3.into(),
        tsigma0: 0.2.into(),
        ..Default::default()
    };
    let costs = LqParams {
        q: 1.0,
        qbar: 0.5,
        s: 0.8,
        q_t: 1.0,
        qbar_t: 0.5,
        s_t: 0.8,
    };
    ModelSpec::lq(dynamics, costs, 1.0, 10.0).expect("reference model is valid")
}

pub fn reference_law() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: 1.0,
        variance: 0.25,
    }
}

pub fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, n).expect("valid grid")
}

pub fn config(k: usize, m: usize) -> SolverConfig {
    SolverConfig {
        k,
        m,
        threads: Some(1),
        ..Default::default()
    }
}
