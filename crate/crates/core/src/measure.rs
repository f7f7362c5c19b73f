//! Uniform-weight empirical measures on the real line and the exact
//! quadratic Wasserstein distance between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::ParticleStates;

/// A sorted sample cloud with uniform weights `1/n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure1D {
    values: Vec<f64>,
}

impl EmpiricalMeasure1D {
    /// Builds a measure from arbitrary samples. Values are sorted with a
    /// stable sort, so ties keep their input order.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("empirical measure needs at least one sample"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "sample {pos} is not finite ({})",
                values[pos]
            )));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn dirac(x: f64) -> Result<Self> {
        Self::new(vec![x])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }

    pub fn second_moment(&self) -> f64 {
        second_moment(self)
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / self.len() as f64
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().max(0.0).sqrt()
    }

    /// Pushforward under `x -> x + c`.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    /// Pushforward under `x -> lambda * x`.
    pub fn scaled(&self, lambda: f64) -> Self {
        let mut values: Vec<f64> = self.values.iter().map(|v| v * lambda).collect();
        if lambda < 0.0 {
            values.reverse();
        }
        Self { values }
    }

    /// Left-continuous quantile at level `u` in `[0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        let n = self.len();
        let k = ((u.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n - 1);
        self.values[k]
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::new(&self.values)
    }
}

/// Borrowed measure with cached moments, passed to cost callbacks so that
/// per-particle evaluations do not rescan the cloud.
#[derive(Clone, Copy, Debug)]
pub struct MeasureView<'a> {
    pub values: &'a [f64],
    pub mean: f64,
    pub second_moment: f64,
}

impl<'a> MeasureView<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let second_moment = values.iter().map(|v| v * v).sum::<f64>() / n;
        Self {
            values,
            mean,
            second_moment,
        }
    }

    pub fn variance(&self) -> f64 {
        (self.second_moment - self.mean * self.mean).max(0.0)
    }
}

/// `(1/n) * sum v_i^2`.
pub fn second_moment(m: &EmpiricalMeasure1D) -> f64 {
    m.values.iter().map(|v| v * v).sum::<f64>() / m.len() as f64
}

/// Quadratic Wasserstein distance between two empirical measures.
///
/// Equal sizes use the sorted pairing. Unequal sizes integrate the squared
/// difference of the two step quantile functions over the merged breakpoints
/// `i/n_a` and `j/n_b`, tracked as integers in units of `1/(n_a n_b)`.
pub fn w2(a: &EmpiricalMeasure1D, b: &EmpiricalMeasure1D) -> f64 {
    w2_sorted(&a.values, &b.values)
}

/// Same as [`w2`] on raw slices that the caller guarantees are sorted and non-empty.
pub fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    assert!(na > 0 && nb > 0, "w2 of an empty measure");
    if na == nb {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / na as f64).sqrt();
    }
    let (na_u, nb_u) = (na as u128, nb as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let end_a = (i as u128 + 1) * nb_u;
        let end_b = (j as u128 + 1) * na_u;
        let next = end_a.min(end_b);
        let d = a[i] - b[j];
        acc += (next - pos) as f64 * d * d;
        pos = next;
        if end_a == next {
            i += 1;
        }
        if end_b == next {
            j += 1;
        }
    }
    (acc / (na_u * nb_u) as f64).sqrt()
}

/// Which state field a conditional law is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CloudField {
    X,
    XY,
}

/// A paired (X, Y) cloud for one common path and time step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointCloud {
    pub x: EmpiricalMeasure1D,
    pub y: EmpiricalMeasure1D,
    pub pairs: Vec<(f64, f64)>,
}

impl JointCloud {
    /// Marginal-sum surrogate for the joint distance.
    pub fn marginal_distance(&self, other: &JointCloud) -> f64 {
        w2(&self.x, &other.x) + w2(&self.y, &other.y)
    }
}

/// Result of [`conditional_empirical`].
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionalLaw {
    X(EmpiricalMeasure1D),
    XY(JointCloud),
}

impl ConditionalLaw {
    pub fn x_marginal(&self) -> &EmpiricalMeasure1D {
        match self {
            ConditionalLaw::X(m) => m,
            ConditionalLaw::XY(j) => &j.x,
        }
    }
}

/// Law of the particles sharing common path `kappa` at step `j`.
pub fn conditional_empirical(
    states: &ParticleStates,
    kappa: usize,
    j: usize,
    field: CloudField,
) -> Result<ConditionalLaw> {
    if kappa >= states.k() || j > states.n() {
        return Err(Error::domain(format!(
            "index (kappa={kappa}, j={j}) outside K={}, N={}",
            states.k(),
            states.n()
        )));
    }
    let xs = states.x_slice(kappa, j).to_vec();
    match field {
        CloudField::X => Ok(ConditionalLaw::X(EmpiricalMeasure1D::new(xs)?)),
        CloudField::XY => {
            if !states.populated().y {
                return Err(Error::domain("Y has not been populated"));
            }
            let ys = states.y_slice(kappa, j).to_vec();
            let pairs = xs.iter().copied().zip(ys.iter().copied()).collect();
            Ok(ConditionalLaw::XY(JointCloud {
                x: EmpiricalMeasure1D::new(xs)?,
                y: EmpiricalMeasure1D::new(ys)?,
                pairs,
            }))
        }
    }
}

/// Conditional X-marginals for every common path and time step, with
/// optional Y-marginals for joint-law checks.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFlow {
    k: usize,
    n: usize,
    x: Vec<EmpiricalMeasure1D>,
    y: Option<Vec<EmpiricalMeasure1D>>,
}

impl MeasureFlow {
    /// Builds the flow from raw per-path clouds, indexed `[kappa * (n + 1) + j]`.
    pub fn from_parts(
        k: usize,
        n: usize,
        x: Vec<EmpiricalMeasure1D>,
        y: Option<Vec<EmpiricalMeasure1D>>,
    ) -> Result<Self> {
        if k == 0 || x.len() != k * (n + 1) {
            return Err(Error::domain(format!(
                "flow needs K*(N+1) = {} measures, got {}",
                k * (n + 1),
                x.len()
            )));
        }
        if let Some(y) = &y {
            if y.len() != x.len() {
                return Err(Error::domain("Y-marginals do not match X-marginals"));
            }
        }
        Ok(Self { k, n, x, y })
    }

    /// Sorts every (kappa, j) slice of the state arrays.
    pub fn from_states(states: &ParticleStates, with_y: bool) -> Result<Self> {
        use rayon::prelude::*;
        let (k, n) = (states.k(), states.n());
        let build = |field: fn(&ParticleStates, usize, usize) -> &[f64]| {
            (0..k * (n + 1))
                .into_par_iter()
                .map(|idx| EmpiricalMeasure1D::new(field(states, idx / (n + 1), idx % (n + 1)).to_vec()))
                .collect::<Result<Vec<_>>>()
        };
        let x = build(ParticleStates::x_slice)?;
        let y = if with_y && states.populated().y {
            Some(build(ParticleStates::y_slice)?)
        } else {
            None
        };
        Self::from_parts(k, n, x, y)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of time steps; measures exist for `j` in `0..=n`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn at(&self, kappa: usize, j: usize) -> &EmpiricalMeasure1D {
        &self.x[kappa * (self.n + 1) + j]
    }

    pub fn y_at(&self, kappa: usize, j: usize) -> Option<&EmpiricalMeasure1D> {
        self.y.as_ref().map(|y| &y[kappa * (self.n + 1) + j])
    }

    pub fn has_y(&self) -> bool {
        self.y.is_some()
    }

    /// Mean over paths of the largest per-step W2 change.
    pub fn distance(&self, other: &MeasureFlow) -> f64 {
        assert_eq!((self.k, self.n), (other.k, other.n), "flow shapes differ");
        let per_path: Vec<f64> = (0..self.k)
            .map(|kappa| {
                (0..=self.n)
                    .map(|j| w2(self.at(kappa, j), other.at(kappa, j)))
                    .fold(0.0, f64::max)
            })
            .collect();
        per_path.iter().sum::<f64>() / self.k as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: &[f64]) -> EmpiricalMeasure1D {
        EmpiricalMeasure1D::new(v.to_vec()).unwrap()
    }

    #[test]
    fn w2_examples() {
        assert!((w2(&m(&[0.0, 2.0]), &m(&[1.0, 3.0])) - 1.0).abs() < 1e-15);
        let a = m(&[0.3, -1.0, 2.5]);
        assert_eq!(w2(&a, &a), 0.0);
        assert!((w2(&m(&[0.0, 0.0, 0.0]), &m(&[3.0, 3.0, 3.0])) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn w2_unequal_sizes_matches_replication() {
        // {0,1} replicated three times is the same measure as itself
        let a = m(&[0.0, 1.0]);
        let b = m(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(w2(&a, &b) < 1e-15);
        let c = m(&[0.0, 1.0, 5.0]);
        let a6 = m(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let c6 = m(&[0.0, 0.0, 1.0, 1.0, 5.0, 5.0]);
        assert!((w2(&a, &c) - w2(&a6, &c6)).abs() < 1e-14);
    }

    #[test]
    fn second_moment_examples() {
        assert_eq!(second_moment(&m(&[0.0])), 0.0);
        assert_eq!(second_moment(&m(&[1.0, -1.0])), 1.0);
        assert!((second_moment(&m(&[1.0, 2.0, 3.0])) - 14.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(EmpiricalMeasure1D::new(vec![]).is_err());
        assert!(EmpiricalMeasure1D::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmpiricalMeasure1D::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn scaled_by_negative_stays_sorted() {
        let a = m(&[1.0, 2.0, 4.0]).scaled(-2.0);
        assert_eq!(a.values(), &[-8.0, -4.0, -2.0]);
    }

    #[test]
    fn view_moments() {
        let a = m(&[1.0, 2.0, 3.0, 4.0]);
        let v = a.view();
        assert_eq!(v.mean, 2.5);
        assert_eq!(v.second_moment, 7.5);
        assert!((v.variance() - 1.25).abs() < 1e-15);
    }
}
