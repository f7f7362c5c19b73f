//! Flow maps started from arbitrary times and laws, tabulation of the
//! decoupling function `U(s, x, m)`, and the semigroup and decoupling checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{w2, EmpiricalMeasure1D, MeasureView};
use crate::mfg::{prepare, solve_individual_with, solve_mfg_with, MfgSolution, SolverConfig};
use crate::model::ModelSpec;
use crate::simulate::{mix, InitialCloud, InitialLaw, ParticleStates, TimeGrid};

/// Grid points of a default U table.
pub const U_GRID_POINTS: usize = 21;
/// Half-width of a default U table, in std of the reference cloud.
pub const U_GRID_STDS: f64 = 3.0;
/// A U table is flagged when its path spread exceeds this multiple of the MC tolerance.
pub const SPREAD_FLAG_FACTOR: f64 = 10.0;

const TAG_FLOW: u64 = 0xf10e_0001;
const TAG_BASELINE: u64 = 0xba5e_0002;

/// Conditional laws at time `t` of the solution started from `m` at time `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMapResult {
    pub s: f64,
    pub t: f64,
    pub x: Vec<EmpiricalMeasure1D>,
    pub y: Vec<EmpiricalMeasure1D>,
    pub converged: bool,
}

fn step_index(grid: &TimeGrid, t: f64) -> Result<usize> {
    let pos = (t - grid.s) / grid.dt();
    let j = pos.round();
    if (pos - j).abs() > 1e-9 || j < 0.0 || j as usize > grid.n {
        return Err(Error::domain(format!("time {t} is not a point of the grid")));
    }
    Ok(j as usize)
}

fn law_of(m: &EmpiricalMeasure1D) -> InitialLaw {
    InitialLaw::Sample {
        values: m.values().to_vec(),
    }
}

/// Config for a solve started at global step `s_index` with common noise
/// keyed by `(common seed, s_index)`.
fn config_from(config: &SolverConfig, s_index: usize) -> SolverConfig {
    SolverConfig {
        common_seed: Some(mix(config.common_seed.unwrap_or(config.seed), TAG_FLOW ^ s_index as u64)),
        step_offset: s_index,
        ..config.clone()
    }
}

fn solve_from(
    model: &ModelSpec,
    grid: &TimeGrid,
    s_index: usize,
    xi: &InitialLaw,
    config: &SolverConfig,
) -> Result<MfgSolution> {
    let tail = grid.tail(s_index)?;
    let (noise, initial) = prepare(&tail, xi, config)?;
    solve_mfg_with(model, noise, initial, config, None)
}

/// The flow map from `(s, m)` to time `t`, both points of `grid`.
pub fn flow_map(
    model: &ModelSpec,
    grid: &TimeGrid,
    s: f64,
    t: f64,
    m: &EmpiricalMeasure1D,
    config: &SolverConfig,
) -> Result<FlowMapResult> {
    let (si, ti) = (step_index(grid, s)?, step_index(grid, t)?);
    if si > ti || si >= grid.n {
        return Err(Error::domain(format!("flow map needs s < T and s <= t, got s={s}, t={t}")));
    }
    config.install(|| {
        let cfg = config_from(config, si);
        let sol = solve_from(model, grid, si, &law_of(m), &cfg)?;
        let rel = ti - si;
        let x = if rel == 0 {
            vec![m.clone(); cfg.k]
        } else {
            (0..cfg.k).map(|kappa| sol.flow.at(kappa, rel).clone()).collect()
        };
        let y = (0..cfg.k)
            .map(|kappa| EmpiricalMeasure1D::new(sol.states.y_slice(kappa, rel).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowMapResult {
            s,
            t,
            x,
            y,
            converged: sol.report.converged,
        })
    })?
}

/// Tabulated decoupling function at one time and initial law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UGridResult {
    pub s: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Standard deviation over common paths of the per-path values.
    pub kappa_spread: Vec<f64>,
    pub k: usize,
    /// Monte Carlo tolerance the spread is judged against.
    pub mc_tol: f64,
    pub flagged: bool,
    pub converged: bool,
    pub m_mean: f64,
}

impl UGridResult {
    /// Linear interpolation, with linear extrapolation beyond the end points.
    pub fn interpolate(&self, x: f64) -> f64 {
        let n = self.x.len();
        if n == 1 {
            return self.u[0];
        }
        let k = self.x.partition_point(|&g| g <= x).clamp(1, n - 1);
        let (x0, x1) = (self.x[k - 1], self.x[k]);
        let w = (x - x0) / (x1 - x0);
        (1.0 - w) * self.u[k - 1] + w * self.u[k]
    }

    /// Standard error of each grid value, `spread / sqrt(K)`.
    pub fn std_err(&self) -> Vec<f64> {
        self.kappa_spread.iter().map(|s| s / (self.k as f64).sqrt()).collect()
    }

    /// Smallest secant slope over all grid pairs, relative to the largest
    /// absolute secant slope. Non-negative for a monotone table.
    pub fn monotonicity_margin(&self) -> f64 {
        let n = self.x.len();
        let mut min_slope = f64::INFINITY;
        let mut scale = 0.0f64;
        for a in 0..n {
            for b in a + 1..n {
                let slope = (self.u[b] - self.u[a]) / (self.x[b] - self.x[a]);
                min_slope = min_slope.min(slope);
                scale = scale.max(slope.abs());
            }
        }
        if scale == 0.0 || !min_slope.is_finite() {
            0.0
        } else {
            min_slope / scale
        }
    }

    /// Largest adjacent finite-difference slope.
    pub fn lipschitz_estimate(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.u.windows(2))
            .map(|(x, u)| ((u[1] - u[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max)
    }
}

/// Default grid: 21 points over mean +/- 3 std of `m` (+/- 1 for a Dirac).
pub fn default_x_grid(m: &EmpiricalMeasure1D) -> Vec<f64> {
    x_grid(m, U_GRID_POINTS)
}

/// `points` equally spaced points over mean +/- 3 std of `m`.
pub fn x_grid(m: &EmpiricalMeasure1D, points: usize) -> Vec<f64> {
    let (mu, sd) = (m.mean(), m.std_dev());
    let half = if sd > 0.0 { U_GRID_STDS * sd } else { 1.0 };
    if points <= 1 {
        return vec![mu];
    }
    (0..points)
        .map(|i| mu - half + 2.0 * half * i as f64 / (points - 1) as f64)
        .collect()
}

/// `U(s, x, m)` on an x grid: the equilibrium flow from `(s, m)` is frozen and
/// the individual problem is solved from each Dirac initial condition.
pub fn decoupling_function(
    model: &ModelSpec,
    grid: &TimeGrid,
    s: f64,
    x_grid: Option<&[f64]>,
    m: &EmpiricalMeasure1D,
    config: &SolverConfig,
) -> Result<UGridResult> {
    let si = step_index(grid, s)?;
    let xs: Vec<f64> = match x_grid {
        Some(g) if !g.is_empty() => g.to_vec(),
        _ => default_x_grid(m),
    };
    if si == grid.n {
        let mv = m.view();
        return Ok(UGridResult {
            s,
            u: xs.iter().map(|&x| model.costs.dx_g(x, &mv)).collect(),
            kappa_spread: vec![0.0; xs.len()],
            x: xs,
            k: config.k,
            mc_tol: 0.0,
            flagged: false,
            converged: true,
            m_mean: m.mean(),
        });
    }
    config.install(|| {
        let cfg = config_from(config, si);
        let eq = solve_from(model, grid, si, &law_of(m), &cfg)?;
        let mut u = Vec::with_capacity(xs.len());
        let mut spread = Vec::with_capacity(xs.len());
        let mut mc_tol_sq = 0.0;
        let mut converged = eq.report.converged;
        let mut warm = None;
        for &x in &xs {
            let initial = InitialCloud::Shared(vec![x; cfg.m]);
            let (policy, states, report) =
                solve_individual_with(model, &eq.flow, &eq.noise, &initial, &cfg, warm.as_ref())?;
            converged &= report.converged;
            let per_path: Vec<f64> = (0..cfg.k).map(|kappa| states.y(kappa, 0, 0)).collect();
            let mean = per_path.iter().sum::<f64>() / cfg.k as f64;
            let var = per_path.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (cfg.k.max(2) - 1) as f64;
            u.push(mean);
            spread.push(var.sqrt());
            mc_tol_sq += next_step_mc_var(&states);
            warm = Some(policy);
        }
        let mc_tol = (mc_tol_sq / xs.len() as f64).sqrt();
        let flagged = spread.iter().any(|s| *s > SPREAD_FLAG_FACTOR * mc_tol.max(1e-12));
        Ok(UGridResult {
            s,
            x: xs.clone(),
            u,
            kappa_spread: spread,
            k: cfg.k,
            mc_tol,
            flagged,
            converged,
            m_mean: m.mean(),
        })
    })?
}

/// Mean over paths of the squared standard error of the first-step Y mean.
fn next_step_mc_var(states: &ParticleStates) -> f64 {
    let (k, m) = (states.k(), states.m());
    if states.n() == 0 || m < 2 {
        return 0.0;
    }
    (0..k)
        .map(|kappa| MeasureView::new(states.y_slice(kappa, 1)).variance() / m as f64)
        .sum::<f64>()
        / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemigroupReport {
    pub s: f64,
    pub t: f64,
    pub u: f64,
    pub residual: f64,
    pub baseline: f64,
    pub pass: bool,
    pub converged: bool,
}

fn joint_distance(a: &ParticleStates, ja: usize, b: &ParticleStates, jb: usize) -> Result<f64> {
    let k = a.k();
    let mut total = 0.0;
    for kappa in 0..k {
        let xa = EmpiricalMeasure1D::new(a.x_slice(kappa, ja).to_vec())?;
        let xb = EmpiricalMeasure1D::new(b.x_slice(kappa, jb).to_vec())?;
        let ya = EmpiricalMeasure1D::new(a.y_slice(kappa, ja).to_vec())?;
        let yb = EmpiricalMeasure1D::new(b.y_slice(kappa, jb).to_vec())?;
        total += w2(&xa, &xb) + w2(&ya, &yb);
    }
    Ok(total / k as f64)
}

/// Compares `Theta^{s,u}(m)` with `Theta^{t,u}(Theta_X^{s,t}(m))`.
///
/// Both legs share the common increments on `[t, u]` (keyed by global step)
/// and the individual seed. The second leg restarts each path from the sorted
/// X-cloud at `t`, which decorrelates particles from their individual noise.
/// The baseline compares two solves from `(s, m)` that differ only in the
/// individual seed.
pub fn verify_semigroup(
    model: &ModelSpec,
    grid: &TimeGrid,
    s: f64,
    t: f64,
    u: f64,
    m: &EmpiricalMeasure1D,
    config: &SolverConfig,
) -> Result<SemigroupReport> {
    let (si, ti, ui) = (step_index(grid, s)?, step_index(grid, t)?, step_index(grid, u)?);
    if !(si <= ti && ti <= ui && si < grid.n) {
        return Err(Error::domain(format!("semigroup check needs s <= t <= u, s < T; got {s}, {t}, {u}")));
    }
    config.install(|| {
        let cfg = config_from(config, si);
        let a = solve_from(model, grid, si, &law_of(m), &cfg)?;
        let alt = SolverConfig {
            seed: mix(cfg.seed, TAG_BASELINE),
            initial_seed: Some(mix(cfg.initial_seed(), TAG_BASELINE)),
            common_seed: cfg.common_seed,
            ..cfg.clone()
        };
        let a2 = solve_from(model, grid, si, &law_of(m), &alt)?;
        let baseline = joint_distance(&a.states, ui - si, &a2.states, ui - si)?;
        let mut converged = a.report.converged && a2.report.converged;

        let residual = if ti == si || ti == ui {
            // identity leg: the composed map returns A's own law at u
            0.0
        } else {
            let clouds = (0..cfg.k)
                .map(|kappa| {
                    let mut c = a.states.x_slice(kappa, ti - si).to_vec();
                    c.sort_by(f64::total_cmp);
                    c
                })
                .collect();
            let b_cfg = SolverConfig {
                step_offset: ti,
                ..cfg.clone()
            };
            let b = solve_from(model, grid, ti, &InitialLaw::PerPath { clouds }, &b_cfg)?;
            converged &= b.report.converged;
            joint_distance(&a.states, ui - si, &b.states, ui - ti)?
        };
        Ok(SemigroupReport {
            s,
            t,
            u,
            residual,
            baseline,
            pass: residual <= 3.0 * baseline,
            converged,
        })
    })?
}

/// A U table attached to one equilibrium step and common path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTableEntry {
    pub j: usize,
    pub kappa: usize,
    pub table: UGridResult,
}

/// U tables at the equilibrium conditional laws `m_j^kappa` for the selected
/// steps and paths, each on `x_points` grid points.
#[allow(clippy::too_many_arguments)]
pub fn tables_along_equilibrium(
    model: &ModelSpec,
    grid: &TimeGrid,
    eq: &MfgSolution,
    steps: &[usize],
    paths: &[usize],
    x_points: usize,
    config: &SolverConfig,
) -> Result<Vec<UTableEntry>> {
    let jobs: Vec<(usize, usize)> = steps.iter().flat_map(|&j| paths.iter().map(move |&k| (j, k))).collect();
    jobs.par_iter()
        .map(|&(j, kappa)| {
            let m = eq.flow.at(kappa, j);
            let xs = x_grid(m, x_points);
            let table = decoupling_function(model, grid, grid.t(j), Some(&xs), m, config)?;
            Ok(UTableEntry { j, kappa, table })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecouplingReport {
    /// `(step, relative L2 error)` per checked step.
    pub per_step: Vec<(usize, f64)>,
    pub max_error: f64,
}

/// Relative L2 error of `Y_j` against `U(t_j, X_j, m_j)` over the particles of
/// the paths that have a table at step `j`; maximum over steps.
pub fn verify_decoupling(states: &ParticleStates, tables: &[UTableEntry]) -> DecouplingReport {
    let mut steps: Vec<usize> = tables.iter().map(|e| e.j).collect();
    steps.sort_unstable();
    steps.dedup();
    let per_step: Vec<(usize, f64)> = steps
        .iter()
        .map(|&j| {
            let (mut num, mut den) = (0.0, 0.0);
            for e in tables.iter().filter(|e| e.j == j) {
                for (&x, &y) in states.x_slice(e.kappa, j).iter().zip(states.y_slice(e.kappa, j)) {
                    let d = y - e.table.interpolate(x);
                    num += d * d;
                    den += y * y;
                }
            }
            (j, if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
        })
        .collect();
    let max_error = per_step.iter().map(|p| p.1).fold(0.0, f64::max);
    DecouplingReport { per_step, max_error }
}

/// `sup_x |U(s,x,m + delta) - U(s,x,m)| / delta` for each shift, on a common x grid.
pub fn lipschitz_in_measure(
    model: &ModelSpec,
    grid: &TimeGrid,
    s: f64,
    m: &EmpiricalMeasure1D,
    deltas: &[f64],
    x_points: usize,
    config: &SolverConfig,
) -> Result<Vec<(f64, f64)>> {
    let xs = x_grid(m, x_points);
    let base = decoupling_function(model, grid, s, Some(&xs), m, config)?;
    deltas
        .iter()
        .map(|&d| {
            let shifted = decoupling_function(model, grid, s, Some(&xs), &m.shifted(d), config)?;
            let sup = base
                .u
                .iter()
                .zip(&shifted.u)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((d, sup / d))
        })
        .collect()
}

/// Relative variation `(max - min) / mean` of a set of slope estimates.
pub fn relative_variation(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    if mean == 0.0 {
        0.0
    } else {
        (max - min) / mean.abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(x: Vec<f64>, u: Vec<f64>) -> UGridResult {
        let n = x.len();
        UGridResult {
            s: 0.0,
            x,
            u,
            kappa_spread: vec![0.0; n],
            k: 1,
            mc_tol: 0.0,
            flagged: false,
            converged: true,
            m_mean: 0.0,
        }
    }

    #[test]
    fn interpolation_and_extrapolation() {
        let t = table(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 3.0]);
        assert_eq!(t.interpolate(0.5), 1.0);
        assert_eq!(t.interpolate(1.5), 2.5);
        assert_eq!(t.interpolate(-1.0), -2.0);
        assert_eq!(t.interpolate(3.0), 4.0);
    }

    #[test]
    fn monotonicity_margin_sign() {
        assert!(table(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 3.0]).monotonicity_margin() > 0.0);
        assert!(table(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.5]).monotonicity_margin() < 0.0);
    }

    #[test]
    fn step_lookup() {
        let g = TimeGrid::new(0.0, 1.0, 50).unwrap();
        assert_eq!(step_index(&g, 0.5).unwrap(), 25);
        assert!(step_index(&g, 0.511).is_err());
    }
}
