//! Linear dynamics, separable costs, the generalized Hamiltonian and its
//! minimizer.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::MeasureView;

/// A bounded coefficient of time: a constant or a right-continuous step table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeFunction {
    Constant(f64),
    /// `values[k]` holds on `[breakpoints[k], breakpoints[k+1])`; before the
    /// first breakpoint the first value applies.
    Table {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Default for TimeFunction {
    fn default() -> Self {
        TimeFunction::Constant(0.0)
    }
}

impl From<f64> for TimeFunction {
    fn from(c: f64) -> Self {
        TimeFunction::Constant(c)
    }
}

impl TimeFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant(c) => *c,
            TimeFunction::Table { breakpoints, values } => {
                let k = breakpoints.partition_point(|&b| b <= t);
                values[k.saturating_sub(1)]
            }
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            TimeFunction::Constant(c) => c.abs(),
            TimeFunction::Table { values, .. } => values.iter().fold(0.0, |a, v| a.max(v.abs())),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            TimeFunction::Constant(c) => Some(*c),
            TimeFunction::Table { values, .. } => {
                let first = values[0];
                values.iter().all(|v| *v == first).then_some(first)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant() == Some(0.0)
    }

    fn validate(&self, name: &str, errs: &mut Vec<String>) {
        match self {
            TimeFunction::Constant(c) => {
                if !c.is_finite() {
                    errs.push(format!("{name}: not finite"));
                }
            }
            TimeFunction::Table { breakpoints, values } => {
                if values.is_empty() || values.len() != breakpoints.len() {
                    errs.push(format!("{name}: breakpoints and values must be non-empty and equal length"));
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                    errs.push(format!("{name}: breakpoints must be strictly increasing"));
                }
                if breakpoints.iter().chain(values).any(|v| !v.is_finite()) {
                    errs.push(format!("{name}: non-finite entry"));
                }
            }
        }
    }

    fn scale(&self, factor: f64) -> Self {
        match self {
            TimeFunction::Constant(c) => TimeFunction::Constant(c * factor),
            TimeFunction::Table { breakpoints, values } => TimeFunction::Table {
                breakpoints: breakpoints.clone(),
                values: values.iter().map(|v| v * factor).collect(),
            },
        }
    }
}

/// Coefficients of `phi(t,x,a) = phi0(t) + phi1(t) x + phi2(t) a` for the
/// drift, idiosyncratic volatility and common volatility.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearStateSpec {
    #[serde(default)]
    pub b0: TimeFunction,
    #[serde(default)]
    pub b1: TimeFunction,
    #[serde(default)]
    pub b2: TimeFunction,
    #[serde(default)]
    pub sigma0: TimeFunction,
    #[serde(default)]
    pub sigma1: TimeFunction,
    #[serde(default)]
    pub sigma2: TimeFunction,
    #[serde(default)]
    pub tsigma0: TimeFunction,
    #[serde(default)]
    pub tsigma1: TimeFunction,
    #[serde(default)]
    pub tsigma2: TimeFunction,
}

/// Coefficients frozen at one time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StateCoefficients {
    pub b: [f64; 3],
    pub sigma: [f64; 3],
    pub tsigma: [f64; 3],
}

impl StateCoefficients {
    pub fn drift(&self, x: f64, a: f64) -> f64 {
        self.b[0] + self.b[1] * x + self.b[2] * a
    }

    pub fn vol(&self, x: f64, a: f64) -> f64 {
        self.sigma[0] + self.sigma[1] * x + self.sigma[2] * a
    }

    pub fn common_vol(&self, x: f64, a: f64) -> f64 {
        self.tsigma[0] + self.tsigma[1] * x + self.tsigma[2] * a
    }

    /// `b2 y + sigma2 z + tsigma2 zt`, the control-facing part of the Hamiltonian gradient.
    pub fn control_load(&self, y: f64, z: f64, zt: f64) -> f64 {
        self.b[2] * y + self.sigma[2] * z + self.tsigma[2] * zt
    }
}

impl LinearStateSpec {
    pub fn at(&self, t: f64) -> StateCoefficients {
        StateCoefficients {
            b: [self.b0.eval(t), self.b1.eval(t), self.b2.eval(t)],
            sigma: [self.sigma0.eval(t), self.sigma1.eval(t), self.sigma2.eval(t)],
            tsigma: [self.tsigma0.eval(t), self.tsigma1.eval(t), self.tsigma2.eval(t)],
        }
    }

    fn fields(&self) -> [(&'static str, &TimeFunction); 9] {
        [
            ("b0", &self.b0),
            ("b1", &self.b1),
            ("b2", &self.b2),
            ("sigma0", &self.sigma0),
            ("sigma1", &self.sigma1),
            ("sigma2", &self.sigma2),
            ("tsigma0", &self.tsigma0),
            ("tsigma1", &self.tsigma1),
            ("tsigma2", &self.tsigma2),
        ]
    }

    pub fn sup_abs(&self) -> f64 {
        self.fields().iter().fold(0.0, |a, (_, f)| a.max(f.sup_abs()))
    }

    /// Every coefficient multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            b0: self.b0.scale(factor),
            b1: self.b1.scale(factor),
            b2: self.b2.scale(factor),
            sigma0: self.sigma0.scale(factor),
            sigma1: self.sigma1.scale(factor),
            sigma2: self.sigma2.scale(factor),
            tsigma0: self.tsigma0.scale(factor),
            tsigma1: self.tsigma1.scale(factor),
            tsigma2: self.tsigma2.scale(factor),
        }
    }
}

/// Separable costs `f = f0(t,x,a) + f1(t,x,m)` and terminal `g(x,m)` with
/// their gradients.
pub trait CostModel: Send + Sync + fmt::Debug {
    fn f0(&self, t: f64, x: f64, a: f64) -> f64;
    fn f1(&self, t: f64, x: f64, m: &MeasureView) -> f64;
    fn g(&self, x: f64, m: &MeasureView) -> f64;

    fn dx_f0(&self, t: f64, x: f64, a: f64) -> f64;
    fn da_f0(&self, t: f64, x: f64, a: f64) -> f64;
    /// Second derivative in the control; must be at least `2 c_f`.
    fn daa_f0(&self, t: f64, x: f64, a: f64) -> f64;
    fn dx_f1(&self, t: f64, x: f64, m: &MeasureView) -> f64;
    fn dx_g(&self, x: f64, m: &MeasureView) -> f64;

    /// Declared strict-convexity margin `c_f`.
    fn convexity_margin(&self) -> f64;

    /// True when `da_f0` is affine in the control, enabling the closed-form minimizer.
    fn affine_in_control(&self) -> bool {
        false
    }

    /// True when neither `f1` nor `g` depends on the measure.
    fn measure_free(&self) -> bool {
        false
    }
}

/// Building blocks of the running cost `f0(t,x,a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunningTerm {
    /// `c x^2`
    QuadX { c: f64 },
    /// `c a^2`
    QuadControl { c: f64 },
    /// `c a^4`, requires `c >= 0`
    QuarticControl { c: f64 },
    /// `c x a`
    CrossXControl { c: f64 },
    /// `c x`
    LinearX { c: f64 },
    /// `c a`
    LinearControl { c: f64 },
}

/// Building blocks of `f1(t,x,m)` and `g(x,m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MeasureTerm {
    /// `c x^2`
    QuadX { c: f64 },
    /// `c x`
    LinearX { c: f64 },
    /// `c (x - s * mean(m))^2`
    DevMean { c: f64, s: f64 },
    /// `c * int (x - z)^2 dm(z)`
    Pairwise { c: f64 },
    /// `c * x * mean(m)`
    CrossMean { c: f64 },
}

impl MeasureTerm {
    fn value(&self, x: f64, m: &MeasureView) -> f64 {
        match *self {
            MeasureTerm::QuadX { c } => c * x * x,
            MeasureTerm::LinearX { c } => c * x,
            MeasureTerm::DevMean { c, s } => {
                let d = x - s * m.mean;
                c * d * d
            }
            MeasureTerm::Pairwise { c } => c * (x * x - 2.0 * x * m.mean + m.second_moment),
            MeasureTerm::CrossMean { c } => c * x * m.mean,
        }
    }

    fn dx(&self, x: f64, m: &MeasureView) -> f64 {
        match *self {
            MeasureTerm::QuadX { c } => 2.0 * c * x,
            MeasureTerm::LinearX { c } => c,
            MeasureTerm::DevMean { c, s } => 2.0 * c * (x - s * m.mean),
            MeasureTerm::Pairwise { c } => 2.0 * c * (x - m.mean),
            MeasureTerm::CrossMean { c } => c * m.mean,
        }
    }

    fn depends_on_measure(&self) -> bool {
        match *self {
            MeasureTerm::QuadX { .. } | MeasureTerm::LinearX { .. } => false,
            MeasureTerm::DevMean { c, s } => c != 0.0 && s != 0.0,
            MeasureTerm::Pairwise { c } | MeasureTerm::CrossMean { c } => c != 0.0,
        }
    }
}

/// Costs assembled from a term library; covers the linear-quadratic family
/// and the standard convex examples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermCosts {
    #[serde(default)]
    pub running: Vec<RunningTerm>,
    #[serde(default)]
    pub mean_field: Vec<MeasureTerm>,
    #[serde(default)]
    pub terminal: Vec<MeasureTerm>,
}

impl TermCosts {
    pub fn lq(p: &LqParams) -> Self {
        Self {
            running: vec![RunningTerm::QuadX { c: 0.5 * p.q }, RunningTerm::QuadControl { c: 0.5 }],
            mean_field: vec![MeasureTerm::DevMean { c: 0.5 * p.qbar, s: p.s }],
            terminal: vec![
                MeasureTerm::QuadX { c: 0.5 * p.q_t },
                MeasureTerm::DevMean { c: 0.5 * p.qbar_t, s: p.s_t },
            ],
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for t in &self.running {
            let c = match *t {
                RunningTerm::QuadX { c }
                | RunningTerm::QuadControl { c }
                | RunningTerm::CrossXControl { c }
                | RunningTerm::LinearX { c }
                | RunningTerm::LinearControl { c } => c,
                RunningTerm::QuarticControl { c } => {
                    if c < 0.0 {
                        errs.push("quartic_control coefficient must be non-negative".into());
                    }
                    c
                }
            };
            if !c.is_finite() {
                errs.push(format!("running term {t:?} has a non-finite coefficient"));
            }
        }
        for t in self.mean_field.iter().chain(&self.terminal) {
            let ok = match *t {
                MeasureTerm::DevMean { c, s } => c.is_finite() && s.is_finite(),
                MeasureTerm::QuadX { c }
                | MeasureTerm::LinearX { c }
                | MeasureTerm::Pairwise { c }
                | MeasureTerm::CrossMean { c } => c.is_finite(),
            };
            if !ok {
                errs.push(format!("measure term {t:?} has a non-finite coefficient"));
            }
        }
        errs
    }
}

impl CostModel for TermCosts {
    fn f0(&self, _t: f64, x: f64, a: f64) -> f64 {
        self.running
            .iter()
            .map(|term| match *term {
                RunningTerm::QuadX { c } => c * x * x,
                RunningTerm::QuadControl { c } => c * a * a,
                RunningTerm::QuarticControl { c } => c * a.powi(4),
                RunningTerm::CrossXControl { c } => c * x * a,
                RunningTerm::LinearX { c } => c * x,
                RunningTerm::LinearControl { c } => c * a,
            })
            .sum()
    }

    fn f1(&self, _t: f64, x: f64, m: &MeasureView) -> f64 {
        self.mean_field.iter().map(|term| term.value(x, m)).sum()
    }

    fn g(&self, x: f64, m: &MeasureView) -> f64 {
        self.terminal.iter().map(|term| term.value(x, m)).sum()
    }

    fn dx_f0(&self, _t: f64, x: f64, a: f64) -> f64 {
        self.running
            .iter()
            .map(|term| match *term {
                RunningTerm::QuadX { c } => 2.0 * c * x,
                RunningTerm::CrossXControl { c } => c * a,
                RunningTerm::LinearX { c } => c,
                _ => 0.0,
            })
            .sum()
    }

    fn da_f0(&self, _t: f64, x: f64, a: f64) -> f64 {
        self.running
            .iter()
            .map(|term| match *term {
                RunningTerm::QuadControl { c } => 2.0 * c * a,
                RunningTerm::QuarticControl { c } => 4.0 * c * a.powi(3),
                RunningTerm::CrossXControl { c } => c * x,
                RunningTerm::LinearControl { c } => c,
                _ => 0.0,
            })
            .sum()
    }

    fn daa_f0(&self, _t: f64, _x: f64, a: f64) -> f64 {
        self.running
            .iter()
            .map(|term| match *term {
                RunningTerm::QuadControl { c } => 2.0 * c,
                RunningTerm::QuarticControl { c } => 12.0 * c * a * a,
                _ => 0.0,
            })
            .sum()
    }

    fn dx_f1(&self, _t: f64, x: f64, m: &MeasureView) -> f64 {
        self.mean_field.iter().map(|term| term.dx(x, m)).sum()
    }

    fn dx_g(&self, x: f64, m: &MeasureView) -> f64 {
        self.terminal.iter().map(|term| term.dx(x, m)).sum()
    }

    fn convexity_margin(&self) -> f64 {
        self.running
            .iter()
            .map(|term| match *term {
                RunningTerm::QuadControl { c } => c,
                _ => 0.0,
            })
            .sum()
    }

    fn affine_in_control(&self) -> bool {
        !self
            .running
            .iter()
            .any(|t| matches!(t, RunningTerm::QuarticControl { c } if *c != 0.0))
    }

    fn measure_free(&self) -> bool {
        !self
            .mean_field
            .iter()
            .chain(&self.terminal)
            .any(MeasureTerm::depends_on_measure)
    }
}

/// Parameters of the linear-quadratic game with running cost
/// `(q x^2 + a^2 + qbar (x - s mean)^2) / 2` and terminal cost
/// `(qT x^2 + qbarT (x - sT mean)^2) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub q: f64,
    pub qbar: f64,
    pub s: f64,
    #[serde(rename = "qT")]
    pub q_t: f64,
    #[serde(rename = "qbarT")]
    pub qbar_t: f64,
    #[serde(rename = "sT")]
    pub s_t: f64,
}

impl LqParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let all = [self.q, self.qbar, self.s, self.q_t, self.qbar_t, self.s_t];
        if all.iter().any(|v| !v.is_finite()) {
            errs.push("LQ parameters must be finite".to_string());
        }
        if self.q + self.qbar - self.qbar * self.s < 0.0 {
            errs.push(format!(
                "constraint q+qbar-qbar*s >= 0 violated: {} + {} - {}*{} = {}",
                self.q,
                self.qbar,
                self.qbar,
                self.s,
                self.q + self.qbar - self.qbar * self.s
            ));
        }
        if self.q_t + self.qbar_t - self.qbar_t * self.s_t < 0.0 {
            errs.push(format!(
                "constraint qT+qbarT-qbarT*sT >= 0 violated: {} + {} - {}*{} = {}",
                self.q_t,
                self.qbar_t,
                self.qbar_t,
                self.s_t,
                self.q_t + self.qbar_t - self.qbar_t * self.s_t
            ));
        }
        errs
    }
}

/// State dimensions; the solver is scalar and all of these are 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub state: usize,
    pub control: usize,
    pub noise: usize,
    pub common_noise: usize,
}

impl Default for Dimensions {
    fn default() -> Self {
        Self {
            state: 1,
            control: 1,
            noise: 1,
            common_noise: 1,
        }
    }
}

/// Full model data: dynamics, costs, horizon and declared Lipschitz bound.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub dynamics: LinearStateSpec,
    pub costs: Arc<dyn CostModel>,
    pub horizon: f64,
    pub lipschitz: f64,
    pub dims: Dimensions,
    /// Set when the costs came from the LQ constructor; used by the oracle.
    pub lq: Option<LqParams>,
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 100;

impl ModelSpec {
    pub fn new(
        dynamics: LinearStateSpec,
        costs: Arc<dyn CostModel>,
        horizon: f64,
        lipschitz: f64,
    ) -> Result<Self> {
        let spec = Self {
            dynamics,
            costs,
            horizon,
            lipschitz,
            dims: Dimensions::default(),
            lq: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lq(dynamics: LinearStateSpec, params: LqParams, horizon: f64, lipschitz: f64) -> Result<Self> {
        let errs = params.validate();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let mut spec = Self::new(dynamics, Arc::new(TermCosts::lq(&params)), horizon, lipschitz)?;
        spec.lq = Some(params);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("horizon T must be positive, got {}", self.horizon));
        }
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            errs.push(format!("Lipschitz constant K must be positive, got {}", self.lipschitz));
        }
        for (name, f) in self.dynamics.fields() {
            f.validate(name, &mut errs);
        }
        if self.dynamics.sup_abs() > self.lipschitz {
            errs.push(format!(
                "state coefficients reach {} which exceeds the declared bound K = {}",
                self.dynamics.sup_abs(),
                self.lipschitz
            ));
        }
        let d = self.dims;
        if (d.state, d.control, d.noise, d.common_noise) != (1, 1, 1, 1) {
            errs.push("only scalar state, control and noises are supported".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// `b y + sigma z + tsigma zt + f` at control `a`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian(&self, t: f64, a: f64, x: f64, y: f64, z: f64, zt: f64, m: &MeasureView) -> f64 {
        let c = self.dynamics.at(t);
        c.drift(x, a) * y
            + c.vol(x, a) * z
            + c.common_vol(x, a) * zt
            + self.costs.f0(t, x, a)
            + self.costs.f1(t, x, m)
    }

    /// The unique root in `a` of `b2 y + sigma2 z + tsigma2 zt + da_f0(t,x,a) = 0`.
    pub fn minimize_hamiltonian(&self, t: f64, x: f64, y: f64, z: f64, zt: f64) -> Result<f64> {
        let load = self.dynamics.at(t).control_load(y, z, zt);
        self.minimize_with_load(t, x, load)
    }

    pub(crate) fn minimize_with_load(&self, t: f64, x: f64, load: f64) -> Result<f64> {
        let costs = &*self.costs;
        let phi0 = load + costs.da_f0(t, x, 0.0);
        if costs.affine_in_control() {
            let slope = costs.daa_f0(t, x, 0.0);
            if slope > 0.0 {
                return Ok(-phi0 / slope);
            }
            if phi0 == 0.0 {
                return Ok(0.0);
            }
            return Err(Error::domain(format!(
                "running cost is not strictly convex in the control (slope {slope})"
            )));
        }
        if phi0 == 0.0 {
            return Ok(0.0);
        }
        let cf = costs.convexity_margin();
        if cf <= 0.0 {
            return Err(Error::domain("convexity margin c_f must be positive"));
        }
        // phi is increasing with slope >= 2 c_f, so the root lies within |phi(0)| / (2 c_f) of 0.
        let radius = phi0.abs() / (2.0 * cf);
        let (mut lo, mut hi) = if phi0 > 0.0 { (-radius, 0.0) } else { (0.0, radius) };
        let mut a = 0.0;
        for _ in 0..NEWTON_MAX_ITERS {
            let phi = load + costs.da_f0(t, x, a);
            if phi > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let dphi = costs.daa_f0(t, x, a);
            let mut next = a - phi / dphi;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (next - a).abs() <= NEWTON_TOL * (1.0 + a.abs()) || hi - lo <= NEWTON_TOL * (1.0 + a.abs()) {
                return Ok(next);
            }
            a = next;
        }
        Err(Error::numeric(format!(
            "Hamiltonian minimizer did not converge at t={t}, x={x}, load={load}"
        )))
    }

    /// `b1 y + sigma1 z + tsigma1 zt + dx_f1 + dx_f0` evaluated at the minimizer.
    pub fn dx_hbar(&self, t: f64, x: f64, y: f64, z: f64, zt: f64, m: &MeasureView) -> Result<f64> {
        let c = self.dynamics.at(t);
        let a = self.minimize_with_load(t, x, c.control_load(y, z, zt))?;
        Ok(self.dx_hbar_at(&c, t, x, y, z, zt, a, m))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn dx_hbar_at(
        &self,
        c: &StateCoefficients,
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        zt: f64,
        a: f64,
        m: &MeasureView,
    ) -> f64 {
        c.b[1] * y + c.sigma[1] * z + c.tsigma[1] * zt + self.costs.dx_f1(t, x, m) + self.costs.dx_f0(t, x, a)
    }

    /// True when costs ignore the measure, so the game decouples into a
    /// single control problem.
    pub fn is_coupling_free(&self) -> bool {
        self.costs.measure_free()
    }

    /// A copy with every state coefficient multiplied by `factor` and the
    /// declared bound raised accordingly.
    pub fn with_scaled_dynamics(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.dynamics = self.dynamics.scaled(factor);
        out.lipschitz = self.lipschitz.max(self.lipschitz * factor.abs());
        out
    }
}

/// Worst central-difference discrepancy of the declared cost gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// Largest `|fd - declared| / (1 + |declared|)` over the probe points.
    pub max_rel_err: f64,
    /// Name of the gradient attaining it.
    pub worst: String,
    pub points: usize,
}

impl GradientCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares every declared gradient with a central difference at a fixed,
/// deterministic set of probe points and measures.
pub fn check_gradients(costs: &dyn CostModel, horizon: f64) -> GradientCheck {
    const XS: [f64; 5] = [-1.7, -0.4, 0.0, 0.9, 2.3];
    const AS: [f64; 4] = [-1.3, -0.2, 0.6, 1.9];
    let clouds: [&[f64]; 2] = [&[0.5], &[-1.0, 0.2, 0.4, 1.6]];
    let mut worst = (0.0, String::from("none"));
    let mut points = 0;
    let mut record = |name: &str, fd: f64, declared: f64| {
        let err = (fd - declared).abs() / (1.0 + declared.abs());
        if err > worst.0 || !err.is_finite() {
            worst = (if err.is_finite() { err } else { f64::INFINITY }, name.to_string());
        }
    };
    let cd = |f: &dyn Fn(f64) -> f64, v: f64| {
        let h = 1e-4 * (1.0 + v.abs());
        (f(v + h) - f(v - h)) / (2.0 * h)
    };
    for (k, &x) in XS.iter().enumerate() {
        let t = horizon * k as f64 / XS.len() as f64;
        for cloud in clouds {
            let m = MeasureView::new(cloud);
            record("dx_f1", cd(&|u| costs.f1(t, u, &m), x), costs.dx_f1(t, x, &m));
            record("dx_g", cd(&|u| costs.g(u, &m), x), costs.dx_g(x, &m));
            points += 2;
        }
        for &a in &AS {
            record("dx_f0", cd(&|u| costs.f0(t, u, a), x), costs.dx_f0(t, x, a));
            record("da_f0", cd(&|u| costs.f0(t, x, u), a), costs.da_f0(t, x, a));
            record("daa_f0", cd(&|u| costs.da_f0(t, x, u), a), costs.daa_f0(t, x, a));
            points += 3;
        }
    }
    GradientCheck {
        max_rel_err: worst.0,
        worst: worst.1,
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::EmpiricalMeasure1D;

    fn control_only(dynamics: LinearStateSpec, costs: TermCosts) -> ModelSpec {
        ModelSpec::new(dynamics, Arc::new(costs), 1.0, 10.0).unwrap()
    }

    fn half_control() -> TermCosts {
        TermCosts {
            running: vec![RunningTerm::QuadControl { c: 0.5 }],
            ..Default::default()
        }
    }

    #[test]
    fn hamiltonian_examples() {
        let m = EmpiricalMeasure1D::new(vec![0.0, 1.0]).unwrap();
        let zero = control_only(LinearStateSpec::default(), TermCosts::default());
        assert_eq!(zero.hamiltonian(0.3, 1.2, -0.7, 2.0, 3.0, 4.0, &m.view()), 0.0);

        let dyn_a = LinearStateSpec {
            b2: 1.0.into(),
            ..Default::default()
        };
        let model = control_only(dyn_a, half_control());
        assert!((model.hamiltonian(0.0, 1.0, 0.0, 2.0, 0.0, 0.0, &m.view()) - 2.5).abs() < 1e-15);

        let dyn_b = LinearStateSpec {
            b1: 1.0.into(),
            b2: 1.0.into(),
            ..Default::default()
        };
        let model = control_only(dyn_b, half_control());
        assert!((model.hamiltonian(0.0, 0.0, 1.0, 3.0, 0.0, 0.0, &m.view()) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn minimizer_examples() {
        let model = control_only(
            LinearStateSpec {
                b2: 1.0.into(),
                ..Default::default()
            },
            half_control(),
        );
        assert_eq!(model.minimize_hamiltonian(0.0, 1.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((model.minimize_hamiltonian(0.0, 1.0, 2.0, 0.0, 0.0).unwrap() + 2.0).abs() < 1e-15);

        let model = control_only(
            LinearStateSpec {
                b2: 0.5.into(),
                sigma2: 1.0.into(),
                ..Default::default()
            },
            half_control(),
        );
        assert!((model.minimize_hamiltonian(0.0, 0.0, 2.0, 1.0, 0.0).unwrap() + 2.0).abs() < 1e-15);
    }

    #[test]
    fn newton_minimizer_for_quartic_cost() {
        let costs = TermCosts {
            running: vec![
                RunningTerm::QuadControl { c: 0.5 },
                RunningTerm::QuarticControl { c: 0.25 },
            ],
            ..Default::default()
        };
        let model = control_only(
            LinearStateSpec {
                b2: 1.0.into(),
                ..Default::default()
            },
            costs,
        );
        let a = model.minimize_hamiltonian(0.0, 0.0, 3.0, 0.0, 0.0).unwrap();
        // root of a + a^3 + 3 = 0
        assert!((a + a.powi(3) + 3.0).abs() < 1e-10);
    }

    #[test]
    fn dx_hbar_examples() {
        let m = EmpiricalMeasure1D::new(vec![1.0]).unwrap();
        let zero = control_only(LinearStateSpec::default(), TermCosts::default());
        assert_eq!(zero.dx_hbar(0.0, 1.0, 2.0, 3.0, 4.0, &m.view()).unwrap(), 0.0);

        let lq = ModelSpec::lq(
            LinearStateSpec {
                b2: 1.0.into(),
                ..Default::default()
            },
            LqParams {
                q: 0.0,
                qbar: 1.0,
                s: 1.0,
                q_t: 0.0,
                qbar_t: 0.0,
                s_t: 0.0,
            },
            1.0,
            10.0,
        )
        .unwrap();
        assert!((lq.dx_hbar(0.0, 2.0, 0.0, 0.0, 0.0, &m.view()).unwrap() - 1.0).abs() < 1e-15);

        let model = control_only(
            LinearStateSpec {
                b1: 0.5.into(),
                b2: 1.0.into(),
                ..Default::default()
            },
            half_control(),
        );
        assert!((model.dx_hbar(0.0, 0.3, 2.0, 0.0, 0.0, &m.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lq_constraint_rejected() {
        let bad = LqParams {
            q: 0.0,
            qbar: 1.0,
            s: 2.0,
            q_t: 1.0,
            qbar_t: 0.0,
            s_t: 0.0,
        };
        let err = ModelSpec::lq(LinearStateSpec::default(), bad, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("q+qbar-qbar*s >= 0"));
    }

    #[test]
    fn time_table_lookup() {
        let f = TimeFunction::Table {
            breakpoints: vec![0.0, 0.5],
            values: vec![1.0, 2.0],
        };
        assert_eq!(f.eval(-0.1), 1.0);
        assert_eq!(f.eval(0.25), 1.0);
        assert_eq!(f.eval(0.5), 2.0);
        assert_eq!(f.eval(0.9), 2.0);
        assert_eq!(f.sup_abs(), 2.0);
    }

    #[test]
    fn time_function_serde_untagged() {
        let c: TimeFunction = serde_json::from_str("0.3").unwrap();
        assert_eq!(c, TimeFunction::Constant(0.3));
        let t: TimeFunction = serde_json::from_str(r#"{"breakpoints":[0,0.5],"values":[1,2]}"#).unwrap();
        assert_eq!(t.eval(0.7), 2.0);
    }
}
