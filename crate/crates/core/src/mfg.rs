//! Damped Picard iteration on the conditional flow and feedback policy.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{DiscreteFbsde, MfgSystem};
use crate::lsmc::{backward_pass, BackwardOptions, FeedbackPolicy};
use crate::measure::MeasureFlow;
use crate::model::ModelSpec;
use crate::simulate::{
    forward_pass, generate_noise_keyed, InitialCloud, InitialLaw, NoiseBundle, NoiseKeys, ParticleStates,
    StateField, TimeGrid,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub damping: f64,
    /// Absolute W2 tolerance; `None` means `1e-3` times the RMS of the initial cloud.
    pub tol_flow: Option<f64>,
    pub tol_policy: f64,
    pub k: usize,
    pub m: usize,
    pub seed: u64,
    /// Seed of the common noise; `None` reuses `seed`.
    pub common_seed: Option<u64>,
    /// Seed of the initial draw; `None` reuses `seed`.
    pub initial_seed: Option<u64>,
    /// Global index of the grid's first step, for noise keyed on a parent grid.
    pub step_offset: usize,
    pub degree: usize,
    pub threads: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 50,
            damping: 0.5,
            tol_flow: None,
            tol_policy: 1e-3,
            k: 64,
            m: 512,
            seed: 42,
            common_seed: None,
            initial_seed: None,
            step_offset: 0,
            degree: 2,
            threads: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            errs.push(format!("damping must lie in (0, 1], got {}", self.damping));
        }
        if let Some(t) = self.tol_flow {
            if !(t > 0.0) {
                errs.push("tol_flow must be positive".into());
            }
        }
        if !(self.tol_policy > 0.0) {
            errs.push("tol_policy must be positive".into());
        }
        if self.k == 0 || self.m == 0 {
            errs.push("K and M must be at least 1".into());
        }
        if self.max_outer == 0 {
            errs.push("max_outer must be at least 1".into());
        }
        if self.degree > crate::lsmc::MAX_DEGREE {
            errs.push(format!("degree must be at most {}", crate::lsmc::MAX_DEGREE));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn noise_keys(&self) -> NoiseKeys {
        NoiseKeys {
            individual_seed: self.seed,
            common_seed: self.common_seed.unwrap_or(self.seed),
            step_offset: self.step_offset,
        }
    }

    pub fn initial_seed(&self) -> u64 {
        self.initial_seed.unwrap_or(self.seed)
    }

    /// Runs `f` on a dedicated pool when a thread count is set.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationResidual {
    pub flow: f64,
    pub policy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub outer_iters: usize,
    pub residual_history: Vec<IterationResidual>,
    pub converged: bool,
    pub y0: Summary,
    pub wall_time_secs: f64,
    pub degenerate_slices: usize,
    pub tol_flow: f64,
    pub tol_policy: f64,
}

/// Output of a Picard solve.
#[derive(Clone, Debug)]
pub struct MfgSolution {
    pub policy: FeedbackPolicy,
    pub flow: MeasureFlow,
    pub states: ParticleStates,
    pub report: SolverReport,
    pub noise: NoiseBundle,
    pub initial: InitialCloud,
}

/// Measure argument used by the backward pass.
#[derive(Clone, Copy, Debug)]
pub enum FlowSource<'a> {
    /// Rebuilt from the current forward states (the game fixed point).
    Own,
    /// Held fixed (individual control problem).
    Frozen(&'a MeasureFlow),
}

/// Generic damped Picard loop over a discrete FBSDE with fixed noise.
#[allow(clippy::too_many_arguments)]
pub fn picard<S: DiscreteFbsde + ?Sized>(
    system: &S,
    noise: &NoiseBundle,
    xi: &InitialCloud,
    source: FlowSource<'_>,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<(FeedbackPolicy, MeasureFlow, ParticleStates, SolverReport)> {
    config.validate()?;
    let start = Instant::now();
    let (k, m, n) = (noise.k(), noise.m(), noise.grid().n);
    let tol_flow = config.tol_flow.unwrap_or(1e-3 * xi.rms().max(1e-12));
    let opts = BackwardOptions {
        degree: config.degree,
        exogenous_flow: matches!(source, FlowSource::Frozen(_)),
    };
    if let FlowSource::Frozen(f) = source {
        if f.k() != k || f.n() != n {
            return Err(Error::domain("frozen flow does not cover the grid"));
        }
    }
    let mut policy = match warm {
        Some(p) if p.k() == k && p.n() == n && p.degree() == config.degree => p.clone(),
        _ => FeedbackPolicy::zero(k, n, config.degree),
    };
    let undamped_first = warm.is_none();
    let mut states = ParticleStates::zeros(k, m, n)?;
    let mut prev_flow: Option<MeasureFlow> = None;
    let mut history = Vec::new();
    let mut converged = false;
    let mut degenerate = 0;
    let mut flow_out = None;

    for it in 1..=config.max_outer {
        forward_pass(system, &policy, noise, xi, &mut states)?;
        let own;
        let flow = match source {
            FlowSource::Own => {
                own = MeasureFlow::from_states(&states, false)?;
                &own
            }
            FlowSource::Frozen(f) => f,
        };
        let (fit, diag) = backward_pass(system, flow, &mut states, noise, &opts)?;
        degenerate = diag.degenerate_slices;
        let flow_res = match (&source, &prev_flow) {
            (FlowSource::Own, Some(prev)) => prev.distance(flow),
            (FlowSource::Own, None) => f64::INFINITY,
            (FlowSource::Frozen(_), _) => 0.0,
        };
        let pol_res = policy.sup_diff(&fit);
        history.push(IterationResidual {
            flow: flow_res,
            policy: pol_res,
        });
        policy = if it == 1 && undamped_first {
            fit
        } else {
            policy.damped_toward(&fit, config.damping)
        };
        let done = flow_res < tol_flow && pol_res < config.tol_policy;
        if matches!(source, FlowSource::Own) {
            prev_flow = Some(flow.clone());
        } else {
            flow_out = Some(flow.clone());
        }
        if done && (it >= 2 || !undamped_first) {
            converged = true;
            break;
        }
    }
    let flow = match source {
        FlowSource::Own => MeasureFlow::from_states(&states, true)?,
        FlowSource::Frozen(f) => flow_out.unwrap_or_else(|| f.clone()),
    };
    let report = SolverReport {
        outer_iters: history.len(),
        residual_history: history,
        converged,
        y0: Summary::of(&states.column(StateField::Y, 0)),
        wall_time_secs: start.elapsed().as_secs_f64(),
        degenerate_slices: degenerate,
        tol_flow,
        tol_policy: config.tol_policy,
    };
    Ok((policy, flow, states, report))
}

/// Realized noise and initial particles for a config.
pub fn prepare(grid: &TimeGrid, xi: &InitialLaw, config: &SolverConfig) -> Result<(NoiseBundle, InitialCloud)> {
    config.validate()?;
    let noise = generate_noise_keyed(grid, config.k, config.m, config.noise_keys())?;
    let cloud = xi.sample(config.k, config.m, config.initial_seed())?;
    Ok((noise, cloud))
}

/// Solves the game on `grid` starting from the law `xi`.
pub fn solve_mfg(model: &ModelSpec, grid: &TimeGrid, xi: &InitialLaw, config: &SolverConfig) -> Result<MfgSolution> {
    config.install(|| {
        let (noise, initial) = prepare(grid, xi, config)?;
        solve_mfg_with(model, noise, initial, config, None)
    })?
}

/// Solves the game on pre-generated noise and initial particles.
pub fn solve_mfg_with(
    model: &ModelSpec,
    noise: NoiseBundle,
    initial: InitialCloud,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<MfgSolution> {
    check_horizon(model, noise.grid())?;
    let system = MfgSystem::new(model, *noise.grid());
    let (policy, flow, states, report) = picard(&system, &noise, &initial, FlowSource::Own, config, warm)?;
    Ok(MfgSolution {
        policy,
        flow,
        states,
        report,
        noise,
        initial,
    })
}

/// Individual control problem against a frozen flow.
pub fn solve_individual(
    model: &ModelSpec,
    frozen_flow: &MeasureFlow,
    grid: &TimeGrid,
    xi: &InitialLaw,
    config: &SolverConfig,
) -> Result<(FeedbackPolicy, ParticleStates, SolverReport)> {
    config.install(|| {
        let (noise, initial) = prepare(grid, xi, config)?;
        solve_individual_with(model, frozen_flow, &noise, &initial, config, None)
    })?
}

pub fn solve_individual_with(
    model: &ModelSpec,
    frozen_flow: &MeasureFlow,
    noise: &NoiseBundle,
    initial: &InitialCloud,
    config: &SolverConfig,
    warm: Option<&FeedbackPolicy>,
) -> Result<(FeedbackPolicy, ParticleStates, SolverReport)> {
    check_horizon(model, noise.grid())?;
    let system = MfgSystem::new(model, *noise.grid());
    let (policy, _, states, report) = picard(&system, noise, initial, FlowSource::Frozen(frozen_flow), config, warm)?;
    Ok((policy, states, report))
}

fn check_horizon(model: &ModelSpec, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon - model.horizon).abs() > 1e-12 * model.horizon.max(1.0) {
        return Err(Error::domain(format!(
            "grid horizon {} differs from model horizon {}",
            grid.horizon, model.horizon
        )));
    }
    Ok(())
}
