//! Closed-form linear-quadratic benchmark.
//!
//! With the ansatz `Y = P x + R mbar` the adjoint system reduces to
//!
//! ```text
//! P' = -2 b1 P + b2^2 P^2 - (q + qbar),            P(T) = qT + qbarT
//! R' = -2 b1 R + b2^2 R (2P + R) + qbar s,         R(T) = -qbarT sT
//! ```
//!
//! and the conditional mean follows `d mbar = (b1 - b2^2 (P + R)) mbar dt + tsigma dWt`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LqParams, ModelSpec};
use crate::simulate::TimeGrid;

/// Substeps of the integrator per solver step.
pub const SUBSTEPS: usize = 10;
const BLOWUP: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqSpec {
    pub params: LqParams,
    pub b1: f64,
    pub b2: f64,
    pub sigma: f64,
    pub tsigma: f64,
}

impl LqSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = self.params.validate();
        if self.b2 == 0.0 {
            errs.push("b2 must be non-zero".into());
        }
        if ![self.b1, self.b2, self.sigma, self.tsigma].iter().all(|v| v.is_finite()) {
            errs.push("dynamics must be finite".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Extracts the benchmark from a model built with the LQ constructor and
    /// constant coefficients `b0 = 0`, additive volatilities.
    pub fn from_model(model: &ModelSpec) -> Result<Self> {
        let params = model
            .lq
            .ok_or_else(|| Error::domain("model was not built from LQ parameters"))?;
        let d = &model.dynamics;
        let constant = |f: &crate::model::TimeFunction, name: &str| {
            f.as_constant()
                .ok_or_else(|| Error::domain(format!("{name} must be constant for the analytic benchmark")))
        };
        for (f, name) in [
            (&d.b0, "b0"),
            (&d.sigma1, "sigma1"),
            (&d.sigma2, "sigma2"),
            (&d.tsigma1, "tsigma1"),
            (&d.tsigma2, "tsigma2"),
        ] {
            if constant(f, name)? != 0.0 {
                return Err(Error::domain(format!("{name} must be zero for the analytic benchmark")));
            }
        }
        let spec = Self {
            params,
            b1: constant(&d.b1, "b1")?,
            b2: constant(&d.b2, "b2")?,
            sigma: constant(&d.sigma0, "sigma0")?,
            tsigma: constant(&d.tsigma0, "tsigma0")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn rhs(&self, p: f64, r: f64) -> (f64, f64) {
        let q = &self.params;
        let b2sq = self.b2 * self.b2;
        (
            -2.0 * self.b1 * p + b2sq * p * p - (q.q + q.qbar),
            -2.0 * self.b1 * r + b2sq * r * (2.0 * p + r) + q.qbar * q.s,
        )
    }
}

/// P and R on the grid points `t_0 .. t_N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub t: Vec<f64>,
    pub p: Vec<f64>,
    pub r: Vec<f64>,
}

pub fn solve_riccati(lq: &LqSpec, grid: &TimeGrid) -> Result<RiccatiSolution> {
    solve_riccati_with_substeps(lq, grid, SUBSTEPS)
}

/// Backward fixed-step RK4 with `substeps` steps per grid interval.
pub fn solve_riccati_with_substeps(lq: &LqSpec, grid: &TimeGrid, substeps: usize) -> Result<RiccatiSolution> {
    lq.validate()?;
    let n = grid.n;
    let h = grid.dt() / substeps.max(1) as f64;
    let mut p = vec![0.0; n + 1];
    let mut r = vec![0.0; n + 1];
    let (mut pc, mut rc) = (lq.params.q_t + lq.params.qbar_t, -lq.params.qbar_t * lq.params.s_t);
    p[n] = pc;
    r[n] = rc;
    for j in (0..n).rev() {
        for _ in 0..substeps.max(1) {
            // integrate in reversed time tau = T - t, so d/dtau = -d/dt
            let f = |pp: f64, rr: f64| {
                let (a, b) = lq.rhs(pp, rr);
                (-a, -b)
            };
            let k1 = f(pc, rc);
            let k2 = f(pc + 0.5 * h * k1.0, rc + 0.5 * h * k1.1);
            let k3 = f(pc + 0.5 * h * k2.0, rc + 0.5 * h * k2.1);
            let k4 = f(pc + h * k3.0, rc + h * k3.1);
            pc += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            rc += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            if !(pc.abs() <= BLOWUP && rc.abs() <= BLOWUP) {
                return Err(Error::numeric(format!(
                    "Riccati solution blew up near t={} (P={pc}, R={rc})",
                    grid.t(j)
                )));
            }
        }
        p[j] = pc;
        r[j] = rc;
    }
    Ok(RiccatiSolution {
        t: (0..=n).map(|j| grid.t(j)).collect(),
        p,
        r,
    })
}

/// `(Y, alpha)` of the benchmark at grid step `j`.
pub fn analytic_feedback(lq: &LqSpec, sol: &RiccatiSolution, j: usize, x: f64, mbar: f64) -> (f64, f64) {
    let y = sol.p[j] * x + sol.r[j] * mbar;
    (y, -lq.b2 * y)
}

/// Conditional mean path driven by the given common increments. Each step
/// integrates the linear SDE exactly with the rate frozen at the step's
/// midpoint value, and scales the increment to the exact step variance.
pub fn mean_path(lq: &LqSpec, sol: &RiccatiSolution, grid: &TimeGrid, m0: f64, dwt: &[f64]) -> Vec<f64> {
    let dt = grid.dt();
    let mut out = Vec::with_capacity(grid.n + 1);
    let mut m = m0;
    out.push(m);
    for j in 0..grid.n {
        let rate = |idx: usize| lq.b1 - lq.b2 * lq.b2 * (sol.p[idx] + sol.r[idx]);
        let a = 0.5 * (rate(j) + rate(j + 1));
        let growth = (a * dt).exp();
        let var_factor = if (a * dt).abs() < 1e-12 {
            1.0
        } else {
            ((2.0 * a * dt).exp() - 1.0) / (2.0 * a * dt)
        };
        let shock = dwt.get(j).copied().unwrap_or(0.0);
        m = growth * m + lq.tsigma * var_factor.sqrt() * shock;
        out.push(m);
    }
    out
}

/// Offset `r(t)` in `Y = P x + r` for the individual problem against a
/// deterministic frozen mean path, solving `r' = (b2^2 P - b1) r + qbar s mbar(t)`,
/// `r(T) = -qbarT sT mbar(T)`, jointly with P by RK4 (mean path linearly interpolated).
pub fn individual_offset(lq: &LqSpec, grid: &TimeGrid, mbar: &[f64]) -> Result<Vec<f64>> {
    lq.validate()?;
    let n = grid.n;
    if mbar.len() != n + 1 {
        return Err(Error::domain("mean path must have N+1 points"));
    }
    let q = &lq.params;
    let b2sq = lq.b2 * lq.b2;
    let h = grid.dt() / SUBSTEPS as f64;
    let mut p = q.q_t + q.qbar_t;
    let mut r = -q.qbar_t * q.s_t * mbar[n];
    let mut out = vec![0.0; n + 1];
    out[n] = r;
    for j in (0..n).rev() {
        for sub in 0..SUBSTEPS {
            // tau measured backward from t_{j+1}
            let mb = |tau: f64| {
                let w = tau / grid.dt();
                (1.0 - w) * mbar[j + 1] + w * mbar[j]
            };
            let f = |tau: f64, pp: f64, rr: f64| {
                let dp = -2.0 * lq.b1 * pp + b2sq * pp * pp - (q.q + q.qbar);
                let dr = (b2sq * pp - lq.b1) * rr + q.qbar * q.s * mb(tau);
                (-dp, -dr)
            };
            let tau = sub as f64 * h;
            let k1 = f(tau, p, r);
            let k2 = f(tau + 0.5 * h, p + 0.5 * h * k1.0, r + 0.5 * h * k1.1);
            let k3 = f(tau + 0.5 * h, p + 0.5 * h * k2.0, r + 0.5 * h * k2.1);
            let k4 = f(tau + h, p + h * k3.0, r + h * k3.1);
            p += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            r += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        out[j] = r;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(q: f64, qbar: f64, s: f64, q_t: f64, qbar_t: f64, s_t: f64, b1: f64) -> LqSpec {
        LqSpec {
            params: LqParams {
                q,
                qbar,
                s,
                q_t,
                qbar_t,
                s_t,
            },
            b1,
            b2: 1.0,
            sigma: 0.3,
            tsigma: 0.2,
        }
    }

    #[test]
    fn trivial_fixed_point() {
        let lq = spec(1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        let grid = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let sol = solve_riccati(&lq, &grid).unwrap();
        assert!(sol.p.iter().all(|p| (p - 1.0).abs() < 1e-14));
        assert!(sol.r.iter().all(|r| r.abs() < 1e-14));
    }

    #[test]
    fn terminal_identities() {
        let lq = spec(1.0, 0.5, 0.8, 1.0, 0.5, 0.8, 0.1);
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sol = solve_riccati(&lq, &grid).unwrap();
        assert_eq!(sol.p[50], 1.5);
        assert_eq!(sol.r[50], -0.4);
        let (y, a) = analytic_feedback(&lq, &sol, 50, 2.0, 0.5);
        assert_eq!(y, 1.5 * 2.0 - 0.4 * 0.5);
        assert_eq!(a, -y);
        let (y_mean, _) = analytic_feedback(&lq, &sol, 10, 0.7, 0.7);
        assert!((y_mean - (sol.p[10] + sol.r[10]) * 0.7).abs() < 1e-15);
    }

    #[test]
    fn blow_up_detected() {
        // negative effective cost with strong destabilizing drift diverges
        let mut lq = spec(1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0);
        lq.b2 = 30.0;
        lq.params.q_t = 1e4;
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        assert!(solve_riccati_with_substeps(&lq, &grid, 1).is_err());
    }

    #[test]
    fn deterministic_mean_without_common_noise() {
        let mut lq = spec(1.0, 0.5, 0.8, 1.0, 0.5, 0.8, 0.1);
        lq.tsigma = 0.0;
        let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let sol = solve_riccati(&lq, &grid).unwrap();
        let a = mean_path(&lq, &sol, &grid, 1.0, &[0.3; 50]);
        let b = mean_path(&lq, &sol, &grid, 1.0, &[-0.1; 50]);
        assert_eq!(a, b);
    }
}
