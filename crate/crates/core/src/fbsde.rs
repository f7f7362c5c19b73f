//! Discrete forward-backward systems shared by the Picard and continuation
//! solvers.
//!
//! A system supplies the forward coefficients given a feedback value of
//! `(Y, Z, Zt)`, the backward generator `H` in `dY = -H dt + Z dW + Zt dWt`,
//! and the terminal condition.

use crate::error::Result;
use crate::measure::MeasureView;
use crate::model::ModelSpec;
use crate::simulate::TimeGrid;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Feedback {
    pub y: f64,
    pub z: f64,
    pub zt: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardStep {
    pub drift: f64,
    pub vol: f64,
    pub common_vol: f64,
    pub control: f64,
}

pub trait DiscreteFbsde: Sync {
    fn grid(&self) -> &TimeGrid;

    #[allow(clippy::too_many_arguments)]
    fn forward(&self, kappa: usize, i: usize, j: usize, t: f64, x: f64, fb: Feedback) -> Result<ForwardStep>;

    #[allow(clippy::too_many_arguments)]
    fn generator(
        &self,
        kappa: usize,
        i: usize,
        j: usize,
        t: f64,
        x: f64,
        fb: Feedback,
        m: &MeasureView,
    ) -> Result<f64>;

    fn terminal(&self, kappa: usize, i: usize, x: f64, m: &MeasureView) -> f64;
}

/// The game's adjoint system: control is the Hamiltonian minimizer, the
/// generator is the reduced gradient and the terminal value is `dx g`.
#[derive(Clone, Copy, Debug)]
pub struct MfgSystem<'a> {
    model: &'a ModelSpec,
    grid: TimeGrid,
}

impl<'a> MfgSystem<'a> {
    pub fn new(model: &'a ModelSpec, grid: TimeGrid) -> Self {
        Self { model, grid }
    }

    pub fn model(&self) -> &ModelSpec {
        self.model
    }
}

impl DiscreteFbsde for MfgSystem<'_> {
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn forward(&self, _kappa: usize, _i: usize, _j: usize, t: f64, x: f64, fb: Feedback) -> Result<ForwardStep> {
        let c = self.model.dynamics.at(t);
        let a = self.model.minimize_with_load(t, x, c.control_load(fb.y, fb.z, fb.zt))?;
        Ok(ForwardStep {
            drift: c.drift(x, a),
            vol: c.vol(x, a),
            common_vol: c.common_vol(x, a),
            control: a,
        })
    }

    fn generator(
        &self,
        _kappa: usize,
        _i: usize,
        _j: usize,
        t: f64,
        x: f64,
        fb: Feedback,
        m: &MeasureView,
    ) -> Result<f64> {
        self.model.dx_hbar(t, x, fb.y, fb.z, fb.zt, m)
    }

    fn terminal(&self, _kappa: usize, _i: usize, x: f64, m: &MeasureView) -> f64 {
        self.model.costs.dx_g(x, m)
    }
}
