//! Backward least-squares Monte Carlo pass and the per-(path, step)
//! regression tables that carry the feedback `x -> (Y, Z, Zt)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{DiscreteFbsde, Feedback, MfgSystem};
use crate::measure::{MeasureFlow, MeasureView};
use crate::model::ModelSpec;
use crate::simulate::{NoiseBundle, ParticleStates};

/// Evaluation range of a slice, in units of the fitting cloud's std.
pub const CLAMP_STDS: f64 = 4.0;
pub const MAX_DEGREE: usize = 4;

/// Regression coefficients for one common path and one time step, in the
/// monomial basis of `(x - center) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySlice {
    pub center: f64,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub zt: Vec<f64>,
    pub residual: f64,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PolicyValue {
    pub y: f64,
    pub z: f64,
    pub zt: f64,
    pub clamped: bool,
}

fn horner(coefs: &[f64], u: f64) -> f64 {
    coefs.iter().rev().fold(0.0, |acc, c| acc * u + c)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Rewrites `sum a_v ((x - c0)/s0)^v` in the basis `((x - c1)/s1)^v`.
pub fn recenter(coefs: &[f64], from: (f64, f64), to: (f64, f64)) -> Vec<f64> {
    let (c0, s0) = from;
    let (c1, s1) = to;
    if c0 == c1 && s0 == s1 {
        return coefs.to_vec();
    }
    let r = s1 / s0;
    let d = (c1 - c0) / s0;
    let mut out = vec![0.0; coefs.len()];
    for (v, a) in coefs.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        for (k, o) in out.iter_mut().enumerate().take(v + 1) {
            *o += a * binomial(v, k) * r.powi(k as i32) * d.powi((v - k) as i32);
        }
    }
    out
}

impl PolicySlice {
    pub fn zero(degree: usize) -> Self {
        Self {
            center: 0.0,
            scale: 1.0,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
            y: vec![0.0; degree + 1],
            z: vec![0.0; degree + 1],
            zt: vec![0.0; degree + 1],
            residual: 0.0,
            degenerate: false,
        }
    }

    pub fn evaluate(&self, x: f64) -> PolicyValue {
        let clamped = x < self.lo || x > self.hi;
        let u = (x.clamp(self.lo, self.hi) - self.center) / self.scale;
        PolicyValue {
            y: horner(&self.y, u),
            z: horner(&self.z, u),
            zt: horner(&self.zt, u),
            clamped,
        }
    }

    fn in_basis_of(&self, other: &PolicySlice) -> PolicySlice {
        let from = (self.center, self.scale);
        let to = (other.center, other.scale);
        PolicySlice {
            center: other.center,
            scale: other.scale,
            lo: other.lo,
            hi: other.hi,
            y: recenter(&self.y, from, to),
            z: recenter(&self.z, from, to),
            zt: recenter(&self.zt, from, to),
            residual: self.residual,
            degenerate: self.degenerate,
        }
    }
}

/// Feedback tables for every common path and time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    degree: usize,
    k: usize,
    n: usize,
    slices: Vec<PolicySlice>,
}

/// The same tables viewed as a numerical decoupling function.
pub type DecouplingTable = FeedbackPolicy;

impl FeedbackPolicy {
    /// Policy returning zero everywhere.
    pub fn zero(k: usize, n: usize, degree: usize) -> Self {
        Self {
            degree,
            k,
            n,
            slices: vec![PolicySlice::zero(degree); k * (n + 1)],
        }
    }

    pub fn from_slices(k: usize, n: usize, degree: usize, slices: Vec<PolicySlice>) -> Result<Self> {
        if slices.len() != k * (n + 1) {
            return Err(Error::domain("policy needs K*(N+1) slices"));
        }
        if slices.iter().any(|s| s.y.len() != degree + 1 || s.z.len() != degree + 1 || s.zt.len() != degree + 1) {
            return Err(Error::domain("slice coefficient length does not match degree"));
        }
        Ok(Self { degree, k, n, slices })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn slice(&self, kappa: usize, j: usize) -> &PolicySlice {
        &self.slices[kappa * (self.n + 1) + j]
    }

    pub fn slices(&self) -> &[PolicySlice] {
        &self.slices
    }

    pub fn evaluate(&self, kappa: usize, j: usize, x: f64) -> PolicyValue {
        self.slice(kappa, j).evaluate(x)
    }

    /// Largest coefficient difference, after expressing `self` in the basis of `other`.
    pub fn sup_diff(&self, other: &FeedbackPolicy) -> f64 {
        assert_eq!((self.k, self.n, self.degree), (other.k, other.n, other.degree));
        self.slices
            .iter()
            .zip(&other.slices)
            .map(|(a, b)| {
                let a = a.in_basis_of(b);
                a.y.iter()
                    .zip(&b.y)
                    .chain(a.z.iter().zip(&b.z))
                    .chain(a.zt.iter().zip(&b.zt))
                    .fold(0.0f64, |s, (u, v)| s.max((u - v).abs()))
            })
            .fold(0.0, f64::max)
    }

    /// `(1 - lambda) * self + lambda * fit`, in the fit's basis and clamp range.
    pub fn damped_toward(&self, fit: &FeedbackPolicy, lambda: f64) -> FeedbackPolicy {
        let slices = self
            .slices
            .iter()
            .zip(&fit.slices)
            .map(|(old, new)| {
                let old = old.in_basis_of(new);
                let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
                    a.iter().zip(b).map(|(u, v)| (1.0 - lambda) * u + lambda * v).collect()
                };
                PolicySlice {
                    y: mix(&old.y, &new.y),
                    z: mix(&old.z, &new.z),
                    zt: mix(&old.zt, &new.zt),
                    ..new.clone()
                }
            })
            .collect();
        FeedbackPolicy {
            degree: fit.degree,
            k: fit.k,
            n: fit.n,
            slices,
        }
    }
}

/// Options for [`backward_pass`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardOptions {
    pub degree: usize,
    /// The flow is exogenous (frozen) rather than built from these states.
    pub exogenous_flow: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            degree: 2,
            exogenous_flow: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackwardDiagnostics {
    pub degenerate_slices: usize,
    pub max_residual: f64,
    /// Cross-path common-noise coefficient per step.
    pub zt: Vec<f64>,
}

/// Least squares via SVD with a relative singular-value cutoff. Returns the
/// coefficients and the RMS residual.
pub(crate) fn lstsq(a: DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |m, s| m.max(*s));
    let eps = (smax * 1e-12).max(f64::MIN_POSITIVE);
    let coefs = svd.solve(b, eps).map_err(|e| Error::numeric(format!("least squares failed: {e}")))?;
    let resid = &a * &coefs - b;
    let rms = (resid.norm_squared() / b.len().max(1) as f64).sqrt();
    if coefs.iter().any(|c| !c.is_finite()) {
        return Err(Error::numeric("least squares produced non-finite coefficients"));
    }
    Ok((coefs, rms))
}

struct Standardized {
    center: f64,
    scale: f64,
    degree: usize,
    degenerate: bool,
}

fn standardize(xs: &[f64], degree: usize) -> Standardized {
    let m = xs.len();
    let center = xs.iter().sum::<f64>() / m as f64;
    let var = xs.iter().map(|x| (x - center) * (x - center)).sum::<f64>() / m as f64;
    let scale = var.sqrt();
    let mut eff = degree;
    while eff > 0 && 2 * (eff + 1) >= m {
        eff -= 1;
    }
    if !(scale > 1e-12 * center.abs().max(1.0)) || eff == 0 && degree > 0 {
        return Standardized {
            center,
            scale: 1.0,
            degree: 0,
            degenerate: degree > 0,
        };
    }
    Standardized {
        center,
        scale,
        degree: eff,
        degenerate: false,
    }
}

fn basis_row(u: f64, degree: usize, out: &mut [f64]) {
    let mut p = 1.0;
    for o in out.iter_mut().take(degree + 1) {
        *o = p;
        p *= u;
    }
}

struct StageOne {
    std: Standardized,
    a: Vec<f64>,
    w: Vec<f64>,
    a_mean: f64,
    residual: f64,
}

fn regress_within_path(xs: &[f64], y_next: &[f64], dw: &[f64], degree: usize) -> Result<StageOne> {
    let m = xs.len();
    let std = standardize(xs, degree);
    let p = std.degree + 1;
    let with_z = m > 2 * p;
    let cols = if with_z { 2 * p } else { p };
    let mut design = DMatrix::<f64>::zeros(m, cols);
    let mut row = vec![0.0; p];
    for i in 0..m {
        basis_row((xs[i] - std.center) / std.scale, std.degree, &mut row);
        for v in 0..p {
            design[(i, v)] = row[v];
            if with_z {
                design[(i, p + v)] = row[v] * dw[i];
            }
        }
    }
    let b = DVector::from_column_slice(y_next);
    let (coefs, residual) = lstsq(design, &b)?;
    let a: Vec<f64> = coefs.iter().take(p).copied().collect();
    let w: Vec<f64> = if with_z {
        coefs.iter().skip(p).copied().collect()
    } else {
        vec![0.0; p]
    };
    let a_mean = xs
        .iter()
        .map(|x| horner(&a, (x - std.center) / std.scale))
        .sum::<f64>()
        / m as f64;
    Ok(StageOne {
        std,
        a,
        w,
        a_mean,
        residual,
    })
}

/// Common-noise coefficient from the cross-path regression of per-path
/// conditional means on `[1, dWt, mean, exogenous mean, variance]`.
fn cross_path_zt(a_mean: &[f64], dwt: &[f64], features: &[Vec<f64>]) -> Result<f64> {
    let k = a_mean.len();
    if k < 3 {
        return Ok(0.0);
    }
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; k], dwt.to_vec()];
    // orthonormal copy of the kept columns, for the collinearity screen
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in &cols {
        push_orthonormal(&mut basis, c);
    }
    for f in features {
        if k <= cols.len() + 1 {
            break;
        }
        // keep a feature only if the kept columns explain less than
        // FEATURE_R2_MAX of its variation across paths
        let mean = f.iter().sum::<f64>() / k as f64;
        let total: f64 = f.iter().map(|v| (v - mean) * (v - mean)).sum();
        if !(total > 1e-24 * mean.abs().max(1.0).powi(2) * k as f64) {
            continue;
        }
        let resid = residual_norm_sq(&basis, f);
        if resid > (1.0 - FEATURE_R2_MAX) * total {
            push_orthonormal(&mut basis, f);
            cols.push(f.clone());
        }
    }
    let design = DMatrix::from_fn(k, cols.len(), |r, c| cols[c][r]);
    let (coefs, _) = lstsq(design, &DVector::from_column_slice(a_mean))?;
    Ok(coefs[1])
}

/// Largest share of a path feature's variation that may already be explained
/// by the kept columns; near-collinear features make the fit unstable.
const FEATURE_R2_MAX: f64 = 0.99;

fn project_out(basis: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut r = v.to_vec();
    for b in basis {
        let d: f64 = b.iter().zip(&r).map(|(x, y)| x * y).sum();
        r.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
    r
}

fn residual_norm_sq(basis: &[Vec<f64>], v: &[f64]) -> f64 {
    project_out(basis, v).iter().map(|x| x * x).sum()
}

fn push_orthonormal(basis: &mut Vec<Vec<f64>>, v: &[f64]) {
    let r = project_out(basis, v);
    let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        basis.push(r.into_iter().map(|x| x / norm).collect());
    }
}

/// One backward sweep. Fills Y, Z, Zt in `states` and returns the fitted tables.
///
/// At every step the next-step values are regressed within each path on
/// `[phi(x), phi(x) dW]`, giving the conditional mean and Z jointly; Zt comes
/// from the cross-path regression; the generator is applied explicitly at
/// the predictor and the result projected back on `phi`.
pub fn backward_pass<S: DiscreteFbsde + ?Sized>(
    system: &S,
    flow: &MeasureFlow,
    states: &mut ParticleStates,
    noise: &NoiseBundle,
    opts: &BackwardOptions,
) -> Result<(FeedbackPolicy, BackwardDiagnostics)> {
    let (k, m, n) = (states.k(), states.m(), states.n());
    let degree = opts.degree;
    if degree > MAX_DEGREE {
        return Err(Error::domain(format!("basis degree {degree} exceeds {MAX_DEGREE}")));
    }
    if flow.k() != k || flow.n() != n {
        return Err(Error::domain("flow and state shapes differ"));
    }
    if !states.populated().x {
        return Err(Error::domain("forward states are not populated"));
    }
    let grid = *noise.grid();
    let dt = grid.dt();
    let path_len = states.path_len();
    let mut slices = vec![PolicySlice::zero(degree); k * (n + 1)];
    let mut diag = BackwardDiagnostics {
        zt: vec![0.0; n + 1],
        ..Default::default()
    };

    // terminal slice
    {
        let xs_all = &states.x;
        let terminal: Vec<Result<(Vec<f64>, PolicySlice)>> = (0..k)
            .into_par_iter()
            .map(|kappa| {
                let start = (kappa * (n + 1) + n) * m;
                let xs = &xs_all[start..start + m];
                let mv = flow.at(kappa, n).view();
                let ys: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| system.terminal(kappa, i, x, &mv))
                    .collect();
                let std = standardize(xs, degree);
                let (beta, residual) = project(xs, &ys, &std)?;
                Ok((ys, make_slice(&std, degree, beta, vec![0.0], 0.0, residual)))
            })
            .collect();
        for (kappa, r) in terminal.into_iter().enumerate() {
            let (ys, slice) = r?;
            let start = (kappa * (n + 1) + n) * m;
            states.y[start..start + m].copy_from_slice(&ys);
            diag.max_residual = diag.max_residual.max(slice.residual);
            diag.degenerate_slices += slice.degenerate as usize;
            slices[kappa * (n + 1) + n] = slice;
        }
    }

    for j in (0..n).rev() {
        let t = grid.t(j);
        let stage: Vec<StageOne> = {
            let (xs_all, ys_all) = (&states.x, &states.y);
            (0..k)
                .into_par_iter()
                .map(|kappa| {
                    let base = kappa * (n + 1);
                    let xs = &xs_all[(base + j) * m..(base + j + 1) * m];
                    let yn = &ys_all[(base + j + 1) * m..(base + j + 2) * m];
                    regress_within_path(xs, yn, noise.dw_slice(kappa, j), degree)
                })
                .collect::<Result<Vec<_>>>()?
        };

        let a_mean: Vec<f64> = stage.iter().map(|s| s.a_mean).collect();
        let dwt: Vec<f64> = (0..k).map(|kappa| noise.dwt(kappa, j)).collect();
        let mut features = vec![(0..k).map(|kappa| states.path_mean(kappa, j)).collect::<Vec<_>>()];
        if opts.exogenous_flow {
            features.push((0..k).map(|kappa| flow.at(kappa, j).mean()).collect());
        }
        if k >= 16 {
            features.push(
                (0..k)
                    .map(|kappa| MeasureView::new(states.x_slice(kappa, j)).variance())
                    .collect(),
            );
        }
        let zt = cross_path_zt(&a_mean, &dwt, &features)?;
        diag.zt[j] = zt;

        let results: Vec<Result<PolicySlice>> = states
            .x
            .par_chunks(path_len)
            .zip(states.y.par_chunks_mut(path_len))
            .zip(states.z.par_chunks_mut(path_len))
            .zip(states.zt.par_chunks_mut(path_len))
            .zip(stage.par_iter())
            .enumerate()
            .map(|(kappa, ((((xp, yp), zp), ztp), st))| {
                let xs = &xp[j * m..(j + 1) * m];
                let mv = flow.at(kappa, j).view();
                let common = zt * dwt[kappa];
                let mut vals = vec![0.0; m];
                let mut zs = vec![0.0; m];
                for i in 0..m {
                    let u = (xs[i] - st.std.center) / st.std.scale;
                    let pred = horner(&st.a, u) - common;
                    let zi = horner(&st.w, u);
                    let h = system.generator(
                        kappa,
                        i,
                        j,
                        t,
                        xs[i],
                        Feedback {
                            y: pred,
                            z: zi,
                            zt,
                        },
                        &mv,
                    )?;
                    vals[i] = pred + h * dt;
                    zs[i] = zi;
                }
                let (beta, _) = project(xs, &vals, &st.std)?;
                for i in 0..m {
                    let u = (xs[i] - st.std.center) / st.std.scale;
                    let y = horner(&beta, u);
                    if !y.is_finite() {
                        return Err(Error::numeric(format!(
                            "backward value became non-finite at (kappa={kappa}, i={i}, j={j})"
                        )));
                    }
                    yp[j * m + i] = y;
                    zp[j * m + i] = zs[i];
                    ztp[j * m + i] = zt;
                }
                Ok(make_slice(&st.std, degree, beta, st.w.clone(), zt, st.residual))
            })
            .collect();
        for (kappa, r) in results.into_iter().enumerate() {
            let slice = r?;
            diag.max_residual = diag.max_residual.max(slice.residual);
            diag.degenerate_slices += slice.degenerate as usize;
            slices[kappa * (n + 1) + j] = slice;
        }
    }
    // the terminal Z entries carry no information; repeat the last step's values
    for kappa in 0..k {
        let base = kappa * (n + 1);
        let (w, zt) = (slices[base + n - 1].z.clone(), slices[base + n - 1].zt.clone());
        let (c, s) = (slices[base + n - 1].center, slices[base + n - 1].scale);
        let last = &mut slices[base + n];
        last.z = recenter(&w, (c, s), (last.center, last.scale));
        last.zt = zt;
    }
    states.populated.y = true;
    states.populated.z = true;
    states.populated.zt = true;
    let policy = FeedbackPolicy { degree, k, n, slices };
    Ok((policy, diag))
}

fn project(xs: &[f64], vals: &[f64], std: &Standardized) -> Result<(Vec<f64>, f64)> {
    let p = std.degree + 1;
    let design = DMatrix::from_fn(xs.len(), p, |i, v| ((xs[i] - std.center) / std.scale).powi(v as i32));
    let (beta, resid) = lstsq(design, &DVector::from_column_slice(vals))?;
    Ok((beta.iter().copied().collect(), resid))
}

fn make_slice(std: &Standardized, degree: usize, y: Vec<f64>, z: Vec<f64>, zt: f64, residual: f64) -> PolicySlice {
    let pad = |mut v: Vec<f64>| {
        v.resize(degree + 1, 0.0);
        v
    };
    let (lo, hi) = if std.degree == 0 {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        (
            std.center - CLAMP_STDS * std.scale,
            std.center + CLAMP_STDS * std.scale,
        )
    };
    PolicySlice {
        center: std.center,
        scale: std.scale,
        lo,
        hi,
        y: pad(y),
        z: pad(z),
        zt: pad(vec![zt]),
        residual,
        degenerate: std.degenerate,
    }
}

/// Backward pass of the game system against `flow`.
pub fn backward_mfg(
    model: &ModelSpec,
    flow: &MeasureFlow,
    states: &mut ParticleStates,
    noise: &NoiseBundle,
    opts: &BackwardOptions,
) -> Result<(FeedbackPolicy, BackwardDiagnostics)> {
    let system = MfgSystem::new(model, *noise.grid());
    backward_pass(&system, flow, states, noise, opts)
}

const PREDICTOR_ITERS: usize = 8;

/// Per-(path, step) sample mean and standard error of the one-step defect
/// `Y_{j+1} - Y_j + H dt - Z dW - Zt dWt`.
#[derive(Clone, Debug, PartialEq)]
pub struct MartingaleCheck {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

impl MartingaleCheck {
    /// Largest |mean| / SE over all (path, step) cells with positive SE.
    pub fn max_t_stat(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.std_err)
            .filter(|(_, s)| **s > 0.0)
            .map(|(m, s)| m.abs() / s)
            .fold(0.0, f64::max)
    }

    /// Mean residual over all cells and its standard error, treating cells
    /// as independent.
    pub fn pooled(&self) -> (f64, f64) {
        let n = self.mean.len().max(1) as f64;
        let mean = self.mean.iter().sum::<f64>() / n;
        let se = self.std_err.iter().map(|s| s * s).sum::<f64>().sqrt() / n;
        (mean, se)
    }
}

/// Per-cell statistics of the one-step BSDE defect
/// `Y_{j+1} - Y_j + H dt - Z dW - Zt dWt` over the particles of each path,
/// with `H` evaluated at the same predictor as the backward pass.
pub fn martingale_check<S: DiscreteFbsde + ?Sized>(
    system: &S,
    flow: &MeasureFlow,
    states: &ParticleStates,
    noise: &NoiseBundle,
) -> Result<MartingaleCheck> {
    let (k, m, n) = (states.k(), states.m(), states.n());
    let grid = *noise.grid();
    let dt = grid.dt();
    let mut mean = Vec::with_capacity(k * n);
    let mut std_err = Vec::with_capacity(k * n);
    for kappa in 0..k {
        for j in 0..n {
            let mv = flow.at(kappa, j).view();
            let mut r = Vec::with_capacity(m);
            for i in 0..m {
                let fb = Feedback {
                    y: states.y(kappa, i, j),
                    z: states.z(kappa, i, j),
                    zt: states.zt(kappa, i, j),
                };
                let (t, x) = (grid.t(j), states.x(kappa, i, j));
                // the scheme evaluates H at the predictor p with Y_j = p + H(p) dt;
                // recover p by fixed point, which contracts at rate O(dt)
                let base = fb.y;
                let mut pred = base;
                let mut h = 0.0;
                for _ in 0..PREDICTOR_ITERS {
                    h = system.generator(kappa, i, j, t, x, Feedback { y: pred, ..fb }, &mv)?;
                    pred = base - h * dt;
                }
                r.push(states.y(kappa, i, j + 1) - fb.y + h * dt - fb.z * noise.dw(kappa, i, j) - fb.zt * noise.dwt(kappa, j));
            }
            let mu = r.iter().sum::<f64>() / m as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (m.max(2) - 1) as f64;
            mean.push(mu);
            std_err.push((var / m as f64).sqrt());
        }
    }
    Ok(MartingaleCheck { mean, std_err })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recenter_preserves_polynomial() {
        let coefs = [0.3, -1.2, 0.7, 0.05];
        let from = (1.5, 0.4);
        let to = (-0.2, 2.3);
        let moved = recenter(&coefs, from, to);
        for &x in &[-3.0, -0.5, 0.0, 1.1, 4.0] {
            let a = horner(&coefs, (x - from.0) / from.1);
            let b = horner(&moved, (x - to.0) / to.1);
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn degree_zero_slice_is_constant() {
        let mut s = PolicySlice::zero(0);
        s.y[0] = 3.25;
        for x in [-1e6, 0.0, 17.0] {
            assert_eq!(s.evaluate(x).y, 3.25);
            assert!(!s.evaluate(x).clamped);
        }
    }

    #[test]
    fn exact_linear_fit_and_clamp() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let std = standardize(&xs, 2);
        let (beta, resid) = project(&xs, &ys, &std).unwrap();
        let slice = make_slice(&std, 2, beta, vec![0.0], 0.0, resid);
        assert!((slice.evaluate(1.5).y - 3.0).abs() < 1e-9);
        let far = slice.evaluate(1e3);
        assert!(far.clamped);
        assert!((far.y - 2.0 * slice.hi).abs() < 1e-8);
    }

    #[test]
    fn damping_halfway() {
        let mut a = FeedbackPolicy::zero(1, 1, 1);
        let mut b = FeedbackPolicy::zero(1, 1, 1);
        a.slices[0].y = vec![1.0, 2.0];
        b.slices[0].y = vec![3.0, 0.0];
        let d = a.damped_toward(&b, 0.5);
        assert_eq!(d.slices[0].y, vec![2.0, 1.0]);
        assert_eq!(a.sup_diff(&b), 2.0);
    }
}
