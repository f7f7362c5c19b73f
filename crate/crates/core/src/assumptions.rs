//! Monte Carlo audits of the structural conditions on a model: monotonicity
//! of the costs, Lipschitz, growth and convexity bounds, and monotonicity of
//! the reduced FBSDE coefficients.
//!
//! Every check draws coupled particle clouds from a seeded generator, so a
//! report is a deterministic function of `(model, trials, cloud_size, seed)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::measure::{w2, EmpiricalMeasure1D, MeasureView};
use crate::model::ModelSpec;
use crate::simulate::mix;

pub const DEFAULT_TRIALS: usize = 200;
pub const DEFAULT_CLOUD_SIZE: usize = 64;
/// Bootstrap resamples behind each tolerance.
pub const BOOTSTRAP_RESAMPLES: usize = 64;

const TAG_WEAK: u64 = 0x3ea0_0001;
const TAG_LL: u64 = 0x3ea0_0002;
const TAG_LIP: u64 = 0x3ea0_0003;
const TAG_FBSDE: u64 = 0x3ea0_0004;
const TAG_WMR: u64 = 0x3ea0_0005;
const TAG_BOOT: u64 = 0x3ea0_00ff;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionId {
    /// Lipschitz gradients.
    C2,
    /// Growth of the gradients.
    C3,
    /// Strict convexity in the control.
    C4,
    /// Lipschitz dependence on the measure.
    C6,
    /// Weak monotonicity.
    C8,
    /// Lasry–Lions monotonicity.
    LL,
    /// Weak mean reversion.
    WMR,
    /// Monotonicity of the reduced coefficients.
    B2,
    /// Monotonicity of the reduced coefficients at a fixed measure.
    B6,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub condition_id: ConditionId,
    pub pass: bool,
    /// Smallest observed slack; negative values refute the condition.
    pub margin: f64,
    /// Estimated constant; `None` when the sample leaves it unbounded.
    pub constant_estimate: Option<f64>,
    /// Sampled quantities at the worst case.
    pub witness: BTreeMap<String, f64>,
    pub trials: usize,
    pub seed: u64,
    pub tol: f64,
}

impl AssumptionReport {
    fn new(id: ConditionId, margin: f64, tol: f64, trials: usize, seed: u64) -> Self {
        Self {
            condition_id: id,
            pass: margin >= -tol,
            margin,
            constant_estimate: None,
            witness: BTreeMap::new(),
            trials,
            seed,
            tol,
        }
    }

    fn with(mut self, key: &str, value: f64) -> Self {
        self.witness.insert(key.to_string(), value);
        self
    }
}

fn rng_for(seed: u64, tag: u64, trial: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, tag), trial as u64))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A coupled pair of clouds on a shared index set: Gaussian marginals with
/// random means, scales and correlation.
#[derive(Clone, Debug)]
struct CoupledClouds {
    xi: Vec<f64>,
    xi_prime: Vec<f64>,
}

fn coupled_clouds(rng: &mut ChaCha8Rng, n: usize) -> CoupledClouds {
    let a = rng.random_range(-2.0..2.0);
    let a2 = rng.random_range(-2.0..2.0);
    let s = rng.random_range(0.2..2.0);
    let s2 = rng.random_range(0.2..2.0);
    let rho: f64 = rng.random_range(-1.0..1.0);
    let mut xi = Vec::with_capacity(n);
    let mut xi_prime = Vec::with_capacity(n);
    for _ in 0..n {
        let (u, v) = (normal(rng), normal(rng));
        xi.push(a + s * u);
        xi_prime.push(a2 + s2 * (rho * u + (1.0 - rho * rho).sqrt() * v));
    }
    CoupledClouds { xi, xi_prime }
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Standard error of `stat` under resampling of the index set.
fn bootstrap_se(n: usize, seed: u64, stat: impl Fn(&[usize]) -> f64) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, TAG_BOOT));
    let vals: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            stat(&idx)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
}

fn tolerance(se: f64, estimate: f64) -> f64 {
    (3.0 * se).max(1e-9 * (1.0 + estimate.abs()))
}

/// Worst trial: index, value, and a closure-free record of what produced it.
struct Worst {
    trial: usize,
    value: f64,
    part: usize,
}

fn argmin(values: &[(f64, usize)]) -> Worst {
    let mut best = Worst {
        trial: 0,
        value: f64::INFINITY,
        part: 0,
    };
    for (trial, &(v, part)) in values.iter().enumerate() {
        if v < best.value {
            best = Worst { trial, value: v, part };
        }
    }
    best
}

fn cloud_stats(c: &CoupledClouds) -> (f64, f64, f64) {
    let n = c.xi.len().max(1) as f64;
    let m1 = c.xi.iter().sum::<f64>() / n;
    let m2 = c.xi_prime.iter().sum::<f64>() / n;
    let d: Vec<f64> = c.xi.iter().zip(&c.xi_prime).map(|(a, b)| a - b).collect();
    let dm = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - dm) * (v - dm)).sum::<f64>() / n;
    (m1, m2, var)
}

/// `E[<dh(xi, P_xi) - dh(xi', P_xi'), xi - xi'>]` on the given index subset.
fn weak_expression(xi: &[f64], xp: &[f64], dh: &dyn Fn(f64, &MeasureView) -> f64) -> f64 {
    let (m, mp) = (MeasureView::new(xi), MeasureView::new(xp));
    let n = xi.len().max(1) as f64;
    xi.iter().zip(xp).map(|(&a, &b)| (dh(a, &m) - dh(b, &mp)) * (a - b)).sum::<f64>() / n
}

/// `E[h(xi', P_xi') + h(xi, P_xi) - h(xi, P_xi') - h(xi', P_xi)]`.
fn ll_expression(xi: &[f64], xp: &[f64], h: &dyn Fn(f64, &MeasureView) -> f64) -> f64 {
    let (m, mp) = (MeasureView::new(xi), MeasureView::new(xp));
    let n = xi.len().max(1) as f64;
    xi.iter()
        .zip(xp)
        .map(|(&a, &b)| h(b, &mp) + h(a, &m) - h(a, &mp) - h(b, &m))
        .sum::<f64>()
        / n
}

/// Random `(t, alpha)` at which the running-cost parts are evaluated.
fn time_control(rng: &mut ChaCha8Rng, horizon: f64) -> (f64, f64) {
    (rng.random_range(0.0..horizon), normal(rng))
}

struct CloudTrial {
    clouds: CoupledClouds,
    t: f64,
    a: f64,
}

fn cloud_trials(model: &ModelSpec, trials: usize, cloud_size: usize, seed: u64, tag: u64) -> Vec<CloudTrial> {
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, tag, k);
            let clouds = coupled_clouds(&mut rng, cloud_size.max(1));
            let (t, a) = time_control(&mut rng, model.horizon);
            CloudTrial { clouds, t, a }
        })
        .collect()
}

/// Statistic on a trial: part index (0 terminal, 1 running) and the two clouds.
type CloudStat<'a> = dyn Fn(&CloudTrial, usize, &[f64], &[f64]) -> f64 + Sync + 'a;

/// Evaluates a two-part (terminal, running) cloud statistic over all trials
/// and reports the minimum with a bootstrap tolerance.
fn cloud_report(
    id: ConditionId,
    trials: &[CloudTrial],
    seed: u64,
    stat: &CloudStat<'_>,
) -> AssumptionReport {
    let values: Vec<(f64, usize)> = trials
        .par_iter()
        .map(|tr| {
            let g = stat(tr, 0, &tr.clouds.xi, &tr.clouds.xi_prime);
            let f = stat(tr, 1, &tr.clouds.xi, &tr.clouds.xi_prime);
            if f < g {
                (f, 1)
            } else {
                (g, 0)
            }
        })
        .collect();
    let worst = argmin(&values);
    if trials.is_empty() {
        return AssumptionReport::new(id, 0.0, 0.0, 0, seed);
    }
    let tr = &trials[worst.trial];
    let se = bootstrap_se(tr.clouds.xi.len(), mix(seed, worst.trial as u64), |idx| {
        stat(tr, worst.part, &pick(&tr.clouds.xi, idx), &pick(&tr.clouds.xi_prime, idx))
    });
    let (m1, m2, var) = cloud_stats(&tr.clouds);
    AssumptionReport::new(id, worst.value, tolerance(se, worst.value), trials.len(), seed)
        .with("trial", worst.trial as f64)
        .with("part_running", worst.part as f64)
        .with("t", tr.t)
        .with("alpha", tr.a)
        .with("mean_xi", m1)
        .with("mean_xi_prime", m2)
        .with("var_diff", var)
}

/// Weak monotonicity of `dx g` and of `dx f` at a random common `(t, alpha)`.
pub fn check_weak_monotonicity(model: &ModelSpec, trials: usize, cloud_size: usize, seed: u64) -> AssumptionReport {
    let costs = &*model.costs;
    let samples = cloud_trials(model, trials, cloud_size, seed, TAG_WEAK);
    cloud_report(ConditionId::C8, &samples, seed, &|tr, part, xi, xp| {
        if part == 0 {
            weak_expression(xi, xp, &|x, m| costs.dx_g(x, m))
        } else {
            weak_expression(xi, xp, &|x, m| costs.dx_f0(tr.t, x, tr.a) + costs.dx_f1(tr.t, x, m))
        }
    })
}

/// Lasry–Lions monotonicity of `g` and of `f1` at a random time.
pub fn check_ll_monotonicity(model: &ModelSpec, trials: usize, cloud_size: usize, seed: u64) -> AssumptionReport {
    let costs = &*model.costs;
    let samples = cloud_trials(model, trials, cloud_size, seed, TAG_LL);
    cloud_report(ConditionId::LL, &samples, seed, &|tr, part, xi, xp| {
        if part == 0 {
            ll_expression(xi, xp, &|x, m| costs.g(x, m))
        } else {
            ll_expression(xi, xp, &|x, m| costs.f1(tr.t, x, m))
        }
    })
}

/// Weak mean reversion: `<x, dx g(0, delta_x)> >= -C (1 + |x|)` and the
/// running analogue at zero control; reports the smallest admissible `C`.
pub fn check_weak_mean_reverting(model: &ModelSpec, trials: usize, seed: u64) -> AssumptionReport {
    let costs = &*model.costs;
    let vals: Vec<(f64, f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(seed, TAG_WMR, k);
            let x = 3.0 * normal(&mut rng);
            let t = rng.random_range(0.0..model.horizon);
            let dirac = [x];
            let m = MeasureView::new(&dirac);
            let g = -x * costs.dx_g(0.0, &m) / (1.0 + x.abs());
            let f = -x * (costs.dx_f0(t, 0.0, 0.0) + costs.dx_f1(t, 0.0, &m)) / (1.0 + x.abs());
            (g.max(f), x, t)
        })
        .collect();
    let (c_hat, x, t) = vals.iter().copied().fold((0.0, 0.0, 0.0), |a, v| if v.0 > a.0 { v } else { a });
    let margin = model.lipschitz - c_hat;
    let mut r = AssumptionReport::new(ConditionId::WMR, margin, tolerance(0.0, c_hat), trials, seed)
        .with("x", x)
        .with("t", t);
    r.constant_estimate = Some(c_hat);
    r
}

/// Random point in `(t, x, alpha)` with a random Gaussian measure.
struct Point {
    t: f64,
    x: f64,
    a: f64,
    m: Vec<f64>,
}

fn random_point(rng: &mut ChaCha8Rng, horizon: f64, cloud: usize) -> Point {
    let mu = rng.random_range(-2.0..2.0);
    let s = rng.random_range(0.2..2.0);
    Point {
        t: rng.random_range(0.0..horizon),
        x: 2.0 * normal(rng),
        a: 2.0 * normal(rng),
        m: (0..cloud).map(|_| mu + s * normal(rng)).collect(),
    }
}

const GRADIENTS: [&str; 4] = ["dx_f0", "da_f0", "dx_f1", "dx_g"];

fn gradient(model: &ModelSpec, name: &str, t: f64, x: f64, a: f64, m: &MeasureView) -> f64 {
    let c = &*model.costs;
    match name {
        "dx_f0" => c.dx_f0(t, x, a),
        "da_f0" => c.da_f0(t, x, a),
        "dx_f1" => c.dx_f1(t, x, m),
        _ => c.dx_g(x, m),
    }
}

/// Lipschitz (C2), growth (C3), convexity (C4) and measure-Lipschitz (C6)
/// audits of the cost gradients.
pub fn check_convexity_lipschitz(model: &ModelSpec, trials: usize, seed: u64) -> Vec<AssumptionReport> {
    let cloud = DEFAULT_CLOUD_SIZE;
    let costs = &*model.costs;
    let k = model.lipschitz;

    struct Sample {
        lip: [f64; 4],
        growth: f64,
        convex: f64,
        meas: f64,
        p: Point,
        q: Point,
    }

    let samples: Vec<Sample> = (0..trials)
        .into_par_iter()
        .map(|idx| {
            let mut rng = rng_for(seed, TAG_LIP, idx);
            let p = random_point(&mut rng, model.horizon, cloud);
            let mut q = random_point(&mut rng, model.horizon, cloud);
            q.t = p.t;
            let (mp, mq) = (MeasureView::new(&p.m), MeasureView::new(&q.m));
            let (dx, da) = (q.x - p.x, q.a - p.a);
            let w = w2(
                &EmpiricalMeasure1D::new(p.m.clone()).expect("finite cloud"),
                &EmpiricalMeasure1D::new(q.m.clone()).expect("finite cloud"),
            );

            // one argument moved at a time, so each ratio is exact for its direction
            let mut lip = [0.0; 4];
            for (slot, name) in GRADIENTS.iter().enumerate() {
                let base = gradient(model, name, p.t, p.x, p.a, &mp);
                let mut r = (gradient(model, name, p.t, q.x, p.a, &mp) - base).abs() / dx.abs().max(1e-300);
                if name.ends_with("f0") {
                    r = r.max((gradient(model, name, p.t, p.x, q.a, &mp) - base).abs() / da.abs().max(1e-300));
                }
                if *name == "dx_f1" || *name == "dx_g" {
                    r = r.max((gradient(model, name, p.t, p.x, p.a, &mq) - base).abs() / w.max(1e-300));
                }
                lip[slot] = r;
            }

            let scale = 1.0 + p.x.abs() + p.a.abs() + mp.second_moment.sqrt();
            let growth = [
                costs.dx_f0(p.t, p.x, p.a) + costs.dx_f1(p.t, p.x, &mp),
                costs.da_f0(p.t, p.x, p.a),
                costs.dx_g(p.x, &mp),
            ]
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
                / scale;

            // full running cost at a common measure
            let f = |x: f64, a: f64| costs.f0(p.t, x, a) + costs.f1(p.t, x, &mp);
            let slack = f(q.x, q.a)
                - f(p.x, p.a)
                - (costs.dx_f0(p.t, p.x, p.a) + costs.dx_f1(p.t, p.x, &mp)) * dx
                - costs.da_f0(p.t, p.x, p.a) * da;
            let convex = slack / (da * da).max(1e-300);

            let meas = (costs.dx_f1(p.t, p.x, &mp) - costs.dx_f1(p.t, p.x, &mq))
                .abs()
                .max((costs.dx_g(p.x, &mp) - costs.dx_g(p.x, &mq)).abs())
                / w.max(1e-300);
            Sample {
                lip,
                growth,
                convex,
                meas,
                p,
                q,
            }
        })
        .collect();

    let argmax = |f: &dyn Fn(&Sample) -> f64| -> (usize, f64) {
        samples
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, s)| if f(s) > acc.1 { (i, f(s)) } else { acc })
    };

    // C2
    let (i2, k2) = argmax(&|s| s.lip.iter().copied().fold(0.0, f64::max));
    let mut c2 = AssumptionReport::new(ConditionId::C2, k - k2, tolerance(0.0, k2), trials, seed);
    c2.constant_estimate = Some(k2);
    for (slot, name) in GRADIENTS.iter().enumerate() {
        let best = samples.iter().map(|s| s.lip[slot]).fold(0.0, f64::max);
        c2.witness.insert(name.replace('_', ""), best);
    }
    if let Some(s) = samples.get(i2) {
        c2 = c2.with("x", s.p.x).with("alpha", s.p.a).with("x_prime", s.q.x).with("alpha_prime", s.q.a);
    }

    // C3
    let (i3, k3) = argmax(&|s| s.growth);
    let mut c3 = AssumptionReport::new(ConditionId::C3, k - k3, tolerance(0.0, k3), trials, seed);
    c3.constant_estimate = Some(k3);
    if let Some(s) = samples.get(i3) {
        c3 = c3.with("x", s.p.x).with("alpha", s.p.a).with("t", s.p.t);
    }

    // C4
    let (i4, c_hat) = samples
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if s.convex < acc.1 { (i, s.convex) } else { acc });
    let declared = costs.convexity_margin();
    let tol4 = 1e-8 * (1.0 + c_hat.abs());
    let margin4 = if samples.is_empty() { 0.0 } else { c_hat - declared };
    let mut c4 = AssumptionReport::new(ConditionId::C4, margin4, tol4, trials, seed);
    c4.pass = margin4 >= -tol4 && declared > 0.0;
    c4.constant_estimate = if samples.is_empty() { None } else { Some(c_hat) };
    c4 = c4.with("declared_c_f", declared);
    if let Some(s) = samples.get(i4) {
        c4 = c4.with("x", s.p.x).with("alpha", s.p.a).with("x_prime", s.q.x).with("alpha_prime", s.q.a);
    }

    // C6
    let (i6, k6) = argmax(&|s| s.meas);
    let mut c6 = AssumptionReport::new(ConditionId::C6, k - k6, tolerance(0.0, k6), trials, seed);
    c6.constant_estimate = Some(k6);
    if let Some(s) = samples.get(i6) {
        c6 = c6
            .with("x", s.p.x)
            .with("mean", MeasureView::new(&s.p.m).mean)
            .with("mean_prime", MeasureView::new(&s.q.m).mean);
    }
    vec![c2, c3, c4, c6]
}

/// Per-particle pair of FBSDE states `theta = (x, y, z, zt)`.
#[derive(Clone, Debug)]
struct ThetaCloud {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    zt: Vec<f64>,
}

fn theta_cloud(rng: &mut ChaCha8Rng, x: Vec<f64>) -> ThetaCloud {
    let n = x.len();
    let mut draw = || (0..n).map(|_| normal(rng)).collect::<Vec<f64>>();
    let (y, z, zt) = (draw(), draw(), draw());
    ThetaCloud { x, y, z, zt }
}

/// Sums `(S, Q, D)` of the monotonicity expression, the control-load square
/// and the squared distance, averaged over the index subset.
fn fbsde_sums(
    model: &ModelSpec,
    t: f64,
    a: &ThetaCloud,
    b: &ThetaCloud,
    idx: &[usize],
    fixed_measure: bool,
) -> Result<(f64, f64, f64)> {
    let c = model.dynamics.at(t);
    let xa = pick(&a.x, idx);
    let xb = pick(&b.x, idx);
    let (ma, mb) = (MeasureView::new(&xa), MeasureView::new(&xb));
    let mb = if fixed_measure { ma } else { mb };
    let (mut s, mut q, mut d) = (0.0, 0.0, 0.0);
    for &i in idx {
        let reduced = |th: &ThetaCloud, m: &MeasureView| -> Result<[f64; 4]> {
            let (x, y, z, zt) = (th.x[i], th.y[i], th.z[i], th.zt[i]);
            let al = model.minimize_with_load(t, x, c.control_load(y, z, zt))?;
            Ok([
                -model.dx_hbar_at(&c, t, x, y, z, zt, al, m),
                c.drift(x, al),
                c.vol(x, al),
                c.common_vol(x, al),
            ])
        };
        let (ra, rb) = (reduced(a, &ma)?, reduced(b, &mb)?);
        let delta = [a.x[i] - b.x[i], a.y[i] - b.y[i], a.z[i] - b.z[i], a.zt[i] - b.zt[i]];
        s += (0..4).map(|k| (ra[k] - rb[k]) * delta[k]).sum::<f64>();
        let load = c.control_load(delta[1], delta[2], delta[3]);
        q += load * load;
        d += delta.iter().map(|v| v * v).sum::<f64>();
    }
    let n = idx.len().max(1) as f64;
    Ok((s / n, q / n, d / n))
}

/// `-(S + beta Q) / D`, the normalized slack at `beta`.
fn normalized_margin(sqd: (f64, f64, f64), beta: f64) -> f64 {
    let (s, q, d) = sqd;
    if d <= 0.0 {
        return 0.0;
    }
    -(s + beta * q) / d
}

/// Monotonicity of the reduced coefficients `(-dx Hbar, b, sigma, tsigma)`
/// with the largest admissible `beta`, plus the terminal condition
/// `E[(dx g(x) - dx g(x')) (x - x')] >= 0`. `fixed_measure` gives the
/// version at a common measure.
pub fn check_fbsde_monotonicity(
    model: &ModelSpec,
    trials: usize,
    cloud_size: usize,
    seed: u64,
    fixed_measure: bool,
) -> Result<AssumptionReport> {
    let id = if fixed_measure { ConditionId::B6 } else { ConditionId::B2 };
    let n = cloud_size.max(1);
    let all: Vec<usize> = (0..n).collect();

    struct Trial {
        t: f64,
        a: ThetaCloud,
        b: ThetaCloud,
        sums: (f64, f64, f64),
        tol: f64,
    }
    let trials_v: Vec<Trial> = (0..trials)
        .into_par_iter()
        .map(|k| -> Result<Trial> {
            let mut rng = rng_for(seed, TAG_FBSDE ^ fixed_measure as u64, k);
            let cl = coupled_clouds(&mut rng, n);
            let t = rng.random_range(0.0..model.horizon);
            let a = theta_cloud(&mut rng, cl.xi);
            let b = theta_cloud(&mut rng, cl.xi_prime);
            let sums = fbsde_sums(model, t, &a, &b, &all, fixed_measure)?;
            let m0 = normalized_margin(sums, 0.0);
            let se = bootstrap_se(n, mix(seed, k as u64), |idx| {
                fbsde_sums(model, t, &a, &b, idx, fixed_measure)
                    .map(|s| normalized_margin(s, 0.0))
                    .unwrap_or(f64::NAN)
            });
            Ok(Trial {
                t,
                a,
                b,
                sums,
                tol: tolerance(if se.is_finite() { se } else { 0.0 }, m0),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // running part at beta = 0
    let mut worst = (usize::MAX, f64::INFINITY, 0.0);
    for (k, tr) in trials_v.iter().enumerate() {
        let m = normalized_margin(tr.sums, 0.0);
        if m < worst.1 {
            worst = (k, m, tr.tol);
        }
    }
    // largest beta keeping every trial within tolerance; linear in beta
    let mut beta_hat: Option<f64> = None;
    for tr in &trials_v {
        let (s, q, d) = tr.sums;
        if q > 1e-14 * d.max(1e-300) {
            let b = (-s + tr.tol * d) / q;
            beta_hat = Some(beta_hat.map_or(b, |v| v.min(b)));
        }
    }

    // terminal part: Dirac probes first, then the sampled clouds
    let g = |x: f64, m: &MeasureView| model.costs.dx_g(x, m);
    let mut term = (f64::INFINITY, 0.0, 0.0);
    for (x, xp) in [(1.0, 0.0), (0.0, 1.0), (-1.0, 1.0), (2.0, -2.0)] {
        let (d1, d2) = ([x], [xp]);
        let (m1, m2) = (MeasureView::new(&d1), MeasureView::new(&d2));
        let m2 = if fixed_measure { m1 } else { m2 };
        let v = (g(x, &m1) - g(xp, &m2)) * (x - xp) / ((x - xp) * (x - xp));
        if v < term.0 {
            term = (v, x, xp);
        }
    }
    let mut term_tol = tolerance(0.0, term.0);
    let mut term_trial = None;
    for (k, tr) in trials_v.iter().enumerate() {
        let (ma, mb) = (MeasureView::new(&tr.a.x), MeasureView::new(&tr.b.x));
        let mb = if fixed_measure { ma } else { mb };
        let (mut num, mut den) = (0.0, 0.0);
        for (&x, &xp) in tr.a.x.iter().zip(&tr.b.x) {
            num += (g(x, &ma) - g(xp, &mb)) * (x - xp);
            den += (x - xp) * (x - xp);
        }
        if den > 0.0 && num / den < term.0 {
            term = (num / den, f64::NAN, f64::NAN);
            term_trial = Some(k);
            term_tol = tolerance(0.0, term.0);
        }
    }

    let running_tol = if worst.0 == usize::MAX { 0.0 } else { worst.2 };
    let running_margin = if worst.0 == usize::MAX { 0.0 } else { worst.1 };
    let (margin, tol) = if term.0 < running_margin {
        (term.0, term_tol)
    } else {
        (running_margin, running_tol)
    };
    let mut r = AssumptionReport::new(id, margin, tol, trials, seed);
    r.pass = running_margin >= -running_tol && term.0 >= -term_tol && beta_hat.is_none_or(|b| b > 0.0);
    r.constant_estimate = beta_hat;
    r = r
        .with("running_margin", running_margin)
        .with("terminal_margin", term.0);
    r = match term_trial {
        Some(k) => r.with("terminal_trial", k as f64),
        None => r.with("terminal_x", term.1).with("terminal_x_prime", term.2),
    };
    if let Some(tr) = trials_v.get(worst.0) {
        r = r.with("trial", worst.0 as f64).with("t", tr.t);
    }
    Ok(r)
}

/// Runs every audit with the given sample sizes.
pub fn audit(model: &ModelSpec, trials: usize, cloud_size: usize, seed: u64) -> Result<Vec<AssumptionReport>> {
    let mut out = check_convexity_lipschitz(model, trials, seed);
    out.push(check_weak_monotonicity(model, trials, cloud_size, seed));
    out.push(check_ll_monotonicity(model, trials, cloud_size, seed));
    out.push(check_weak_mean_reverting(model, trials, seed));
    out.push(check_fbsde_monotonicity(model, trials, cloud_size, seed, false)?);
    out.push(check_fbsde_monotonicity(model, trials, cloud_size, seed, true)?);
    Ok(out)
}
