//! Particle solvers and verification tools for mean-field games with common
//! noise and the conditional McKean–Vlasov FBSDEs behind them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assumptions;
pub mod continuation;
pub mod decoupling;
pub mod error;
pub mod fbsde;
pub mod io;
pub mod lsmc;
pub mod measure;
pub mod mfg;
pub mod model;
pub mod oracle;
pub mod simulate;

pub use assumptions::{AssumptionReport, ConditionId};
pub use continuation::{solve_continuation, ContinuationConfig, ContinuationResult, Drivers, OperatorSpec};
pub use decoupling::{decoupling_function, flow_map, verify_decoupling, verify_semigroup, UGridResult};
pub use error::{Error, Result};
pub use lsmc::{DecouplingTable, FeedbackPolicy};
pub use measure::{w2, EmpiricalMeasure1D, MeasureFlow};
pub use mfg::{solve_individual, solve_mfg, MfgSolution, SolverConfig, SolverReport};
pub use model::{LinearStateSpec, LqParams, ModelSpec, TermCosts};
pub use oracle::{solve_riccati, LqSpec, RiccatiSolution};
pub use simulate::{InitialCloud, InitialLaw, NoiseBundle, ParticleStates, TimeGrid};
