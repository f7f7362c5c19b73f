//! Method of continuation for the discrete FBSDE: a homotopy from a linear
//! monotone base system to the game system, each level solved by damped
//! forward/backward sweeps with the homotopy increment frozen at the
//! previous iterate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{DiscreteFbsde, Feedback, ForwardStep};
use crate::lsmc::{backward_pass, BackwardOptions, FeedbackPolicy, PolicySlice};
use crate::measure::{MeasureFlow, MeasureView};
use crate::model::{ModelSpec, TimeFunction};
use crate::simulate::{forward_pass, InitialCloud, NoiseBundle, ParticleStates, TimeGrid};

/// The bounded linear maps `c1 = b2`, `c2 = sigma2`, `c3 = tsigma2` of the
/// base system and their adjoints (equal to them in one dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub c1: TimeFunction,
    pub c2: TimeFunction,
    pub c3: TimeFunction,
    pub c1_adj: TimeFunction,
    pub c2_adj: TimeFunction,
    pub c3_adj: TimeFunction,
    /// Monotonicity margin from the assumption audit, when known.
    pub beta: Option<f64>,
}

impl OperatorSpec {
    pub fn from_model(model: &ModelSpec) -> Self {
        let d = &model.dynamics;
        Self {
            c1: d.b2.clone(),
            c2: d.sigma2.clone(),
            c3: d.tsigma2.clone(),
            c1_adj: d.b2.clone(),
            c2_adj: d.sigma2.clone(),
            c3_adj: d.tsigma2.clone(),
            beta: None,
        }
    }

    pub fn sup_abs(&self) -> f64 {
        [&self.c1, &self.c2, &self.c3].iter().fold(0.0, |a, f| a.max(f.sup_abs()))
    }

    /// Base forward coefficients `-cbar (c1 y + c2 z + c3 zt)`.
    fn base(&self, t: f64, y: f64, z: f64, zt: f64) -> (f64, f64, f64) {
        let l = self.c1.eval(t) * y + self.c2.eval(t) * z + self.c3.eval(t) * zt;
        (-self.c1_adj.eval(t) * l, -self.c2_adj.eval(t) * l, -self.c3_adj.eval(t) * l)
    }
}

/// Per-particle perturbations of the blended system, indexed like
/// [`ParticleStates`]; empty vectors mean zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Drivers {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub psi_common: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Terminal perturbation indexed `kappa * M + i`.
    pub eta: Vec<f64>,
}

impl Drivers {
    fn get(v: &[f64], idx: usize) -> f64 {
        if v.is_empty() {
            0.0
        } else {
            v[idx]
        }
    }
}

/// Blended system at level `alpha0` with increment `delta` evaluated at `prev`.
struct BlendedSystem<'a> {
    model: &'a ModelSpec,
    ops: &'a OperatorSpec,
    grid: TimeGrid,
    alpha0: f64,
    delta: f64,
    prev: &'a ParticleStates,
    prev_flow: &'a MeasureFlow,
    drivers: &'a Drivers,
}

impl BlendedSystem<'_> {
    fn idx(&self, kappa: usize, i: usize, j: usize) -> usize {
        (kappa * (self.grid.n + 1) + j) * self.prev.m() + i
    }

    fn prev_feedback(&self, kappa: usize, i: usize, j: usize) -> (f64, Feedback) {
        let p = self.prev;
        (
            p.x(kappa, i, j),
            Feedback {
                y: p.y(kappa, i, j),
                z: p.z(kappa, i, j),
                zt: p.zt(kappa, i, j),
            },
        )
    }
}

impl DiscreteFbsde for BlendedSystem<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn forward(&self, kappa: usize, i: usize, j: usize, t: f64, x: f64, fb: Feedback) -> Result<ForwardStep> {
        let c = self.model.dynamics.at(t);
        let a = self.model.minimize_with_load(t, x, c.control_load(fb.y, fb.z, fb.zt))?;
        let (b0, s0, st0) = self.ops.base(t, fb.y, fb.z, fb.zt);
        let (w, v) = (self.alpha0, 1.0 - self.alpha0);
        let mut drift = w * c.drift(x, a) + v * b0;
        let mut vol = w * c.vol(x, a) + v * s0;
        let mut cvol = w * c.common_vol(x, a) + v * st0;
        if self.delta != 0.0 {
            let (xp, p) = self.prev_feedback(kappa, i, j);
            let ap = self.model.minimize_with_load(t, xp, c.control_load(p.y, p.z, p.zt))?;
            let (pb0, ps0, pst0) = self.ops.base(t, p.y, p.z, p.zt);
            drift += self.delta * (c.drift(xp, ap) - pb0);
            vol += self.delta * (c.vol(xp, ap) - ps0);
            cvol += self.delta * (c.common_vol(xp, ap) - pst0);
        }
        let idx = self.idx(kappa, i, j);
        Ok(ForwardStep {
            drift: drift + Drivers::get(&self.drivers.phi, idx),
            vol: vol + Drivers::get(&self.drivers.psi, idx),
            common_vol: cvol + Drivers::get(&self.drivers.psi_common, idx),
            control: a,
        })
    }

    fn generator(
        &self,
        kappa: usize,
        i: usize,
        j: usize,
        t: f64,
        x: f64,
        fb: Feedback,
        m: &MeasureView,
    ) -> Result<f64> {
        let mut h = (1.0 - self.alpha0) * x;
        if self.alpha0 != 0.0 {
            h += self.alpha0 * self.model.dx_hbar(t, x, fb.y, fb.z, fb.zt, m)?;
        }
        if self.delta != 0.0 {
            let (xp, p) = self.prev_feedback(kappa, i, j);
            let mp = self.prev_flow.at(kappa, j).view();
            h += self.delta * (self.model.dx_hbar(t, xp, p.y, p.z, p.zt, &mp)? - xp);
        }
        Ok(h - Drivers::get(&self.drivers.gamma, self.idx(kappa, i, j)))
    }

    fn terminal(&self, kappa: usize, i: usize, x: f64, m: &MeasureView) -> f64 {
        let n = self.grid.n;
        let mut g = self.alpha0 * self.model.costs.dx_g(x, m);
        if self.delta != 0.0 {
            let xp = self.prev.x(kappa, i, n);
            let mp = self.prev_flow.at(kappa, n).view();
            g += self.delta * self.model.costs.dx_g(xp, &mp);
        }
        g + Drivers::get(&self.drivers.eta, kappa * self.prev.m() + i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContinuationConfig {
    pub delta: f64,
    pub delta_floor: f64,
    /// Absolute sweep tolerance; `None` means `1e-4` times the RMS of the initial cloud.
    pub inner_tol: Option<f64>,
    pub max_sweeps: usize,
    pub damping: f64,
    pub degree: usize,
    /// Constant Y value of the starting iterate (0 gives the zero iterate).
    pub init_offset: f64,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        Self {
            delta: 0.125,
            delta_floor: 1.0 / 64.0,
            inner_tol: None,
            max_sweeps: 200,
            damping: 0.5,
            degree: 2,
            init_offset: 0.0,
        }
    }
}

impl ContinuationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            errs.push("delta must lie in (0, 1]".to_string());
        }
        if !(self.delta_floor > 0.0 && self.delta_floor <= self.delta) {
            errs.push("delta_floor must lie in (0, delta]".to_string());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            errs.push("damping must lie in (0, 1]".to_string());
        }
        if self.max_sweeps == 0 {
            errs.push("max_sweeps must be positive".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub alpha: f64,
    pub delta: f64,
    pub sweeps: usize,
    pub contraction: f64,
    pub final_change: f64,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct ContinuationResult {
    pub states: ParticleStates,
    pub policy: FeedbackPolicy,
    pub flow: MeasureFlow,
    pub log: Vec<LevelLog>,
    pub converged: bool,
    pub final_alpha: f64,
}

struct Iterate {
    states: ParticleStates,
    policy: FeedbackPolicy,
    flow: MeasureFlow,
}

struct Sweeper<'a> {
    model: &'a ModelSpec,
    ops: &'a OperatorSpec,
    noise: &'a NoiseBundle,
    xi: &'a InitialCloud,
    drivers: &'a Drivers,
    cfg: &'a ContinuationConfig,
}

impl Sweeper<'_> {
    /// One forward/backward sweep of the level `(alpha0, delta)` system from `cur`.
    fn sweep(&self, cur: &Iterate, alpha0: f64, delta: f64) -> Result<Iterate> {
        let grid = *self.noise.grid();
        let system = BlendedSystem {
            model: self.model,
            ops: self.ops,
            grid,
            alpha0,
            delta,
            prev: &cur.states,
            prev_flow: &cur.flow,
            drivers: self.drivers,
        };
        let mut states = ParticleStates::zeros(self.noise.k(), self.noise.m(), grid.n)?;
        forward_pass(&system, &cur.policy, self.noise, self.xi, &mut states)?;
        let flow = MeasureFlow::from_states(&states, false)?;
        let opts = BackwardOptions {
            degree: self.cfg.degree,
            exogenous_flow: false,
        };
        let (fit, _) = backward_pass(&system, &flow, &mut states, self.noise, &opts)?;
        let policy = cur.policy.damped_toward(&fit, self.cfg.damping);
        Ok(Iterate { states, policy, flow })
    }

    /// Sweeps until the sup change of X and Y drops below `tol`. Returns the
    /// iterate, the change history and whether it converged.
    fn solve_level(
        &self,
        start: Iterate,
        alpha0: f64,
        delta: f64,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<(Iterate, Vec<f64>, bool)> {
        let mut cur = start;
        let mut changes = Vec::new();
        for _ in 0..max_sweeps {
            let next = match self.sweep(&cur, alpha0, delta) {
                Ok(it) => it,
                Err(Error::Numeric(_)) => return Ok((cur, changes, false)),
                Err(e) => return Err(e),
            };
            let (dx, dy) = next.states.sup_change(&cur.states);
            let change = dx.max(dy);
            changes.push(change);
            cur = next;
            if !change.is_finite() || change > 1e8 * tol.max(1.0) {
                return Ok((cur, changes, false));
            }
            if change < tol && changes.len() >= 2 {
                return Ok((cur, changes, true));
            }
        }
        Ok((cur, changes, false))
    }

    /// Backward pass of the undeformed target system (`alpha0 = 1`, no frozen
    /// increment) on the last forward states, so that the returned Y and Z
    /// solve the target system on those states rather than the last level's
    /// blend with the previous iterate.
    fn endpoint(&self, mut cur: Iterate) -> Result<Iterate> {
        let grid = *self.noise.grid();
        let prev = cur.states.clone();
        let system = BlendedSystem {
            model: self.model,
            ops: self.ops,
            grid,
            alpha0: 1.0,
            delta: 0.0,
            prev: &prev,
            prev_flow: &cur.flow,
            drivers: self.drivers,
        };
        let opts = BackwardOptions {
            degree: self.cfg.degree,
            exogenous_flow: false,
        };
        let (fit, _) = backward_pass(&system, &cur.flow, &mut cur.states, self.noise, &opts)?;
        cur.policy = fit;
        Ok(cur)
    }

    fn start(&self, offset: f64) -> Result<Iterate> {
        let grid = self.noise.grid();
        let (k, m, n) = (self.noise.k(), self.noise.m(), grid.n);
        let mut policy = FeedbackPolicy::zero(k, n, self.cfg.degree);
        let mut states = ParticleStates::zeros(k, m, n)?;
        if offset != 0.0 {
            let mut slice = PolicySlice::zero(self.cfg.degree);
            slice.y[0] = offset;
            policy = FeedbackPolicy::from_slices(k, n, self.cfg.degree, vec![slice; k * (n + 1)])?;
            states.y.iter_mut().for_each(|v| *v = offset);
        }
        let flow = MeasureFlow::from_states(&states, false)?;
        Ok(Iterate { states, policy, flow })
    }
}

/// Geometric-mean ratio of successive changes over the last few sweeps.
pub fn contraction_factor(changes: &[f64]) -> f64 {
    let tail: Vec<f64> = changes.iter().rev().take(6).rev().copied().collect();
    if tail.len() < 2 {
        return 0.0;
    }
    let (first, last) = (tail[0], tail[tail.len() - 1]);
    if first <= 0.0 {
        return 0.0;
    }
    (last / first).max(0.0).powf(1.0 / (tail.len() - 1) as f64)
}

/// Runs the homotopy from the base system to the game system.
pub fn solve_continuation(
    model: &ModelSpec,
    ops: &OperatorSpec,
    noise: &NoiseBundle,
    xi: &InitialCloud,
    drivers: &Drivers,
    cfg: &ContinuationConfig,
) -> Result<ContinuationResult> {
    cfg.validate()?;
    let tol = cfg.inner_tol.unwrap_or(1e-4 * xi.rms().max(1e-12));
    let sw = Sweeper {
        model,
        ops,
        noise,
        xi,
        drivers,
        cfg,
    };
    let mut log = Vec::new();

    let (mut cur, changes, ok) = sw.solve_level(sw.start(cfg.init_offset)?, 0.0, 0.0, tol, cfg.max_sweeps)?;
    log.push(LevelLog {
        alpha: 0.0,
        delta: 0.0,
        sweeps: changes.len(),
        contraction: contraction_factor(&changes),
        final_change: changes.last().copied().unwrap_or(0.0),
        converged: ok,
    });
    if !ok {
        return Ok(finish(cur, log, false, 0.0));
    }

    let mut alpha = 0.0;
    let mut delta = cfg.delta;
    while alpha < 1.0 {
        let step = delta.min(1.0 - alpha);
        let saved = Iterate {
            states: cur.states.clone(),
            policy: cur.policy.clone(),
            flow: cur.flow.clone(),
        };
        let (next, changes, ok) = sw.solve_level(cur, alpha, step, tol, cfg.max_sweeps)?;
        log.push(LevelLog {
            alpha: alpha + step,
            delta: step,
            sweeps: changes.len(),
            contraction: contraction_factor(&changes),
            final_change: changes.last().copied().unwrap_or(0.0),
            converged: ok,
        });
        if ok {
            alpha = if 1.0 - (alpha + step) < 1e-12 { 1.0 } else { alpha + step };
            cur = next;
        } else {
            cur = saved;
            delta *= 0.5;
            if delta < cfg.delta_floor {
                return Ok(finish(cur, log, false, alpha));
            }
        }
    }
    let cur = sw.endpoint(cur)?;
    Ok(finish(cur, log, true, 1.0))
}

fn finish(cur: Iterate, log: Vec<LevelLog>, converged: bool, final_alpha: f64) -> ContinuationResult {
    let flow = MeasureFlow::from_states(&cur.states, true).unwrap_or(cur.flow);
    ContinuationResult {
        states: cur.states,
        policy: cur.policy,
        flow,
        log,
        converged,
        final_alpha,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub delta: f64,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub alpha0: f64,
    pub rows: Vec<ProbeRow>,
    /// Largest probed step whose factor is below one.
    pub largest_contracting: Option<f64>,
}

pub const PROBE_DELTAS: [f64; 4] = [0.5, 0.25, 0.125, 0.0625];
pub const PROBE_SWEEPS: usize = 8;

/// Empirical contraction factor `(d_n / d_2)^(1/(n-2))` of the level sweep
/// at `alpha0 = 1/2`, started from the zero iterate, for each probed step.
pub fn probe_delta(
    model: &ModelSpec,
    ops: &OperatorSpec,
    noise: &NoiseBundle,
    xi: &InitialCloud,
    drivers: &Drivers,
    cfg: &ContinuationConfig,
) -> Result<ProbeReport> {
    let sw = Sweeper {
        model,
        ops,
        noise,
        xi,
        drivers,
        cfg,
    };
    let alpha0 = 0.5;
    let mut rows = Vec::new();
    for &delta in &PROBE_DELTAS {
        let (_, changes, _) = sw.solve_level(sw.start(0.0)?, alpha0, delta, 0.0, PROBE_SWEEPS)?;
        let factor = probe_factor(&changes);
        rows.push(ProbeRow { delta, factor });
    }
    let largest_contracting = rows.iter().filter(|r| r.factor < 1.0).map(|r| r.delta).fold(None, |a, d| {
        Some(a.map_or(d, |v: f64| v.max(d)))
    });
    Ok(ProbeReport {
        alpha0,
        rows,
        largest_contracting,
    })
}

fn probe_factor(changes: &[f64]) -> f64 {
    let n = changes.len();
    if n < 3 {
        return if changes.last().is_some_and(|c| !c.is_finite()) {
            f64::INFINITY
        } else {
            0.0
        };
    }
    let (d2, dn) = (changes[1], changes[n - 1]);
    if !dn.is_finite() {
        return f64::INFINITY;
    }
    let scale = changes.iter().copied().filter(|c| c.is_finite()).fold(0.0, f64::max);
    if d2 <= 1e-14 * scale.max(1e-300) {
        return 0.0;
    }
    (dn / d2).powf(1.0 / (n - 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors() {
        assert!((probe_factor(&[1.0, 0.5, 0.25, 0.125]) - 0.5).abs() < 1e-12);
        assert_eq!(probe_factor(&[1.0, 0.0, 0.0]), 0.0);
        assert!(probe_factor(&[1.0, 1.0, 4.0]) > 1.0);
        assert!((contraction_factor(&[8.0, 4.0, 2.0]) - 0.5).abs() < 1e-12);
    }
}
