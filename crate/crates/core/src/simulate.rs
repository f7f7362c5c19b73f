//! Time grids, keyed two-layer Brownian noise, initial laws, particle state
//! arrays and the feedback-controlled Euler–Maruyama forward pass.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fbsde::{DiscreteFbsde, Feedback};
use crate::lsmc::FeedbackPolicy;

/// Largest number of `f64` entries a single state array may hold.
pub const MAX_ARRAY_ELEMS: usize = 1 << 28;

/// Uniform grid `t_j = s + j * (T - s) / N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub s: f64,
    pub horizon: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(s: f64, horizon: f64, n: usize) -> Result<Self> {
        if !(s >= 0.0 && s < horizon && horizon.is_finite()) {
            return Err(Error::domain(format!("time grid needs 0 <= s < T, got s={s}, T={horizon}")));
        }
        if n == 0 {
            return Err(Error::domain("time grid needs at least one step"));
        }
        Ok(Self { s, horizon, n })
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.s) / self.n as f64
    }

    pub fn t(&self, j: usize) -> f64 {
        self.s + j as f64 * self.dt()
    }

    /// The tail grid starting at step `j0`, with the same step size.
    pub fn tail(&self, j0: usize) -> Result<Self> {
        if j0 >= self.n {
            return Err(Error::domain(format!("tail start {j0} must be below N={}", self.n)));
        }
        Ok(Self {
            s: self.t(j0),
            horizon: self.horizon,
            n: self.n - j0,
        })
    }
}

/// Seeds and the global index of the grid's first step. Noise for global
/// step `offset + j` is the same whichever grid asks for it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseKeys {
    pub individual_seed: u64,
    pub common_seed: u64,
    pub step_offset: usize,
}

impl NoiseKeys {
    pub fn new(seed: u64) -> Self {
        Self {
            individual_seed: seed,
            common_seed: seed,
            step_offset: 0,
        }
    }
}

const TAG_INDIVIDUAL: u64 = 0x1d1d_0001;
const TAG_COMMON: u64 = 0xc0c0_0002;
const TAG_INITIAL: u64 = 0x1717_0003;

pub(crate) fn mix(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Fills `out` with standard normals from position `start` of the keyed stream.
pub(crate) fn normal_stream(key: u64, stream: u64, start: usize, out: &mut [f64]) {
    let normal = std_normal();
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng.set_word_pos(2 * start as u128);
    for v in out.iter_mut() {
        let u = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        *v = normal.inverse_cdf(u);
    }
}

/// Individual increments `dW[kappa][j][i]` and common increments `dWt[kappa][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    grid: TimeGrid,
    k: usize,
    m: usize,
    keys: NoiseKeys,
    dw: Vec<f64>,
    dwt: Vec<f64>,
}

fn check_budget(k: usize, m: usize, n: usize) -> Result<usize> {
    let total = k
        .checked_mul(m)
        .and_then(|km| km.checked_mul(n + 1))
        .filter(|&t| t <= MAX_ARRAY_ELEMS);
    total.ok_or_else(|| {
        Error::Resource(format!(
            "K*M*(N+1) = {k}*{m}*{} exceeds the array budget of {MAX_ARRAY_ELEMS}",
            n + 1
        ))
    })
}

/// Noise with individual and common streams both keyed by `seed`.
pub fn generate_noise(grid: &TimeGrid, k: usize, m: usize, seed: u64) -> Result<NoiseBundle> {
    generate_noise_keyed(grid, k, m, NoiseKeys::new(seed))
}

pub fn generate_noise_keyed(grid: &TimeGrid, k: usize, m: usize, keys: NoiseKeys) -> Result<NoiseBundle> {
    if k == 0 || m == 0 {
        return Err(Error::domain("K and M must be at least 1"));
    }
    let n = grid.n;
    check_budget(k, m, n)?;
    let sqrt_dt = grid.dt().sqrt();
    let ind_key = mix(keys.individual_seed, TAG_INDIVIDUAL);
    let com_key = mix(keys.common_seed, TAG_COMMON);

    let mut dw = vec![0.0; k * n * m];
    dw.par_chunks_mut(n * m).enumerate().for_each(|(kappa, block)| {
        let mut buf = vec![0.0; n];
        for i in 0..m {
            normal_stream(ind_key, ((kappa as u64) << 32) | i as u64, keys.step_offset, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                block[j * m + i] = v * sqrt_dt;
            }
        }
    });
    let mut dwt = vec![0.0; k * n];
    dwt.par_chunks_mut(n).enumerate().for_each(|(kappa, row)| {
        normal_stream(com_key, kappa as u64, keys.step_offset, row);
        for v in row.iter_mut() {
            *v *= sqrt_dt;
        }
    });
    Ok(NoiseBundle {
        grid: *grid,
        k,
        m,
        keys,
        dw,
        dwt,
    })
}

impl NoiseBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn keys(&self) -> NoiseKeys {
        self.keys
    }

    pub fn dw(&self, kappa: usize, i: usize, j: usize) -> f64 {
        self.dw[(kappa * self.grid.n + j) * self.m + i]
    }

    /// Individual increments of all particles of path `kappa` over step `j`.
    pub fn dw_slice(&self, kappa: usize, j: usize) -> &[f64] {
        let start = (kappa * self.grid.n + j) * self.m;
        &self.dw[start..start + self.m]
    }

    pub fn dwt(&self, kappa: usize, j: usize) -> f64 {
        self.dwt[kappa * self.grid.n + j]
    }

    pub fn dwt_path(&self, kappa: usize) -> &[f64] {
        &self.dwt[kappa * self.grid.n..(kappa + 1) * self.grid.n]
    }
}

/// Law of the initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Constant { value: f64 },
    Gaussian { mean: f64, variance: f64 },
    /// Explicit samples; resampled at midpoint quantiles when the count differs from M.
    Sample { values: Vec<f64> },
    /// One explicit cloud per common path.
    PerPath { clouds: Vec<Vec<f64>> },
}

/// Realized initial particles.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialCloud {
    /// Same sample on every path.
    Shared(Vec<f64>),
    PerPath(Vec<Vec<f64>>),
}

impl InitialCloud {
    pub fn value(&self, kappa: usize, i: usize) -> f64 {
        match self {
            InitialCloud::Shared(v) => v[i],
            InitialCloud::PerPath(v) => v[kappa][i],
        }
    }

    pub fn path(&self, kappa: usize) -> &[f64] {
        match self {
            InitialCloud::Shared(v) => v,
            InitialCloud::PerPath(v) => &v[kappa],
        }
    }

    /// Root-mean-square magnitude, used as the natural state scale.
    pub fn rms(&self) -> f64 {
        let (sum, count) = match self {
            InitialCloud::Shared(v) => (v.iter().map(|x| x * x).sum::<f64>(), v.len()),
            InitialCloud::PerPath(v) => v
                .iter()
                .flatten()
                .fold((0.0, 0), |(s, c), x| (s + x * x, c + 1)),
        };
        (sum / count.max(1) as f64).sqrt()
    }

    /// Every particle moved by `c`.
    pub fn shifted(&self, c: f64) -> Self {
        match self {
            InitialCloud::Shared(v) => InitialCloud::Shared(v.iter().map(|x| x + c).collect()),
            InitialCloud::PerPath(v) => {
                InitialCloud::PerPath(v.iter().map(|p| p.iter().map(|x| x + c).collect()).collect())
            }
        }
    }
}

fn quantile_resample(values: &[f64], m: usize) -> Vec<f64> {
    if values.len() == m {
        return values.to_vec();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let l = sorted.len();
    (0..m)
        .map(|i| sorted[(((2 * i + 1) * l) / (2 * m)).min(l - 1)])
        .collect()
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Validation(vec![format!("initial law: {msg}")]));
        match self {
            InitialLaw::Constant { value } if !value.is_finite() => bad("value must be finite"),
            InitialLaw::Gaussian { mean, variance } if !mean.is_finite() || !(*variance >= 0.0) => {
                bad("mean must be finite and variance non-negative")
            }
            InitialLaw::Sample { values } if values.is_empty() || values.iter().any(|v| !v.is_finite()) => {
                bad("samples must be non-empty and finite")
            }
            InitialLaw::PerPath { clouds }
                if clouds.is_empty() || clouds.iter().any(|c| c.is_empty() || c.iter().any(|v| !v.is_finite())) =>
            {
                bad("per-path clouds must be non-empty and finite")
            }
            _ => Ok(()),
        }
    }

    /// Draws M particles. Random draws come from a stream keyed by `seed`
    /// alone, so the first M particles do not change when M grows.
    pub fn sample(&self, k: usize, m: usize, seed: u64) -> Result<InitialCloud> {
        self.validate()?;
        Ok(match self {
            InitialLaw::Constant { value } => InitialCloud::Shared(vec![*value; m]),
            InitialLaw::Gaussian { mean, variance } => {
                let mut z = vec![0.0; m];
                normal_stream(mix(seed, TAG_INITIAL), 0, 0, &mut z);
                let sd = variance.sqrt();
                InitialCloud::Shared(z.into_iter().map(|v| mean + sd * v).collect())
            }
            InitialLaw::Sample { values } => InitialCloud::Shared(quantile_resample(values, m)),
            InitialLaw::PerPath { clouds } => {
                if clouds.len() != k {
                    return Err(Error::domain(format!(
                        "per-path initial law has {} clouds but K={k}",
                        clouds.len()
                    )));
                }
                InitialCloud::PerPath(clouds.iter().map(|c| quantile_resample(c, m)).collect())
            }
        })
    }
}

/// Which state fields hold data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Populated {
    pub x: bool,
    pub y: bool,
    pub z: bool,
    pub zt: bool,
    pub alpha: bool,
}

/// Particle arrays indexed by common path, particle and time step. Storage is
/// per path and time-major, so every (kappa, j) cross-section is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleStates {
    k: usize,
    m: usize,
    n: usize,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) zt: Vec<f64>,
    pub(crate) alpha: Vec<f64>,
    pub(crate) populated: Populated,
}

macro_rules! field_access {
    ($get:ident, $slice:ident, $field:ident) => {
        pub fn $get(&self, kappa: usize, i: usize, j: usize) -> f64 {
            self.$field[self.idx(kappa, i, j)]
        }

        pub fn $slice(&self, kappa: usize, j: usize) -> &[f64] {
            let start = self.idx(kappa, 0, j);
            &self.$field[start..start + self.m]
        }
    };
}

impl ParticleStates {
    pub fn zeros(k: usize, m: usize, n: usize) -> Result<Self> {
        let len = check_budget(k, m, n)?;
        Ok(Self {
            k,
            m,
            n,
            x: vec![0.0; len],
            y: vec![0.0; len],
            z: vec![0.0; len],
            zt: vec![0.0; len],
            alpha: vec![0.0; len],
            populated: Populated::default(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of time steps; states exist at `j` in `0..=n`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn populated(&self) -> Populated {
        self.populated
    }

    #[inline]
    pub(crate) fn idx(&self, kappa: usize, i: usize, j: usize) -> usize {
        (kappa * (self.n + 1) + j) * self.m + i
    }

    pub(crate) fn path_len(&self) -> usize {
        (self.n + 1) * self.m
    }

    field_access!(x, x_slice, x);
    field_access!(y, y_slice, y);
    field_access!(z, z_slice, z);
    field_access!(zt, zt_slice, zt);
    field_access!(alpha, alpha_slice, alpha);

    /// All particle values of one field at step `j`, path-major.
    pub fn column(&self, field: StateField, j: usize) -> Vec<f64> {
        let src = match field {
            StateField::X => &self.x,
            StateField::Y => &self.y,
            StateField::Z => &self.z,
            StateField::Zt => &self.zt,
            StateField::Alpha => &self.alpha,
        };
        (0..self.k)
            .flat_map(|kappa| {
                let start = self.idx(kappa, 0, j);
                src[start..start + self.m].iter().copied()
            })
            .collect()
    }

    /// Per-path mean of X at step `j`.
    pub fn path_mean(&self, kappa: usize, j: usize) -> f64 {
        self.x_slice(kappa, j).iter().sum::<f64>() / self.m as f64
    }

    /// Largest absolute difference in X and in Y against another state set.
    pub fn sup_change(&self, other: &ParticleStates) -> (f64, f64) {
        let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |s, (u, v)| s.max((u - v).abs()));
        (sup(&self.x, &other.x), sup(&self.y, &other.y))
    }
}

/// Selector for [`ParticleStates::column`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateField {
    X,
    Y,
    Z,
    Zt,
    Alpha,
}

/// Euler–Maruyama forward pass of a discrete FBSDE under a feedback policy.
/// Fills X and the recorded control; Y, Z, Zt are left for the backward pass.
pub fn forward_pass<S: DiscreteFbsde + ?Sized>(
    system: &S,
    policy: &FeedbackPolicy,
    noise: &NoiseBundle,
    xi: &InitialCloud,
    states: &mut ParticleStates,
) -> Result<()> {
    let grid = *noise.grid();
    let (k, m, n) = (states.k, states.m, states.n);
    if noise.k() != k || noise.m() != m || grid.n != n {
        return Err(Error::domain("noise and state shapes differ"));
    }
    if policy.k() != k || policy.n() != n {
        return Err(Error::domain("policy and state shapes differ"));
    }
    let dt = grid.dt();
    let path_len = states.path_len();
    states
        .x
        .par_chunks_mut(path_len)
        .zip(states.alpha.par_chunks_mut(path_len))
        .enumerate()
        .try_for_each(|(kappa, (xs, als))| -> Result<()> {
            for (i, x0) in xs[..m].iter_mut().enumerate() {
                *x0 = xi.value(kappa, i);
            }
            for j in 0..=n {
                let t = grid.t(j);
                let dw = if j < n { noise.dw_slice(kappa, j) } else { &[][..] };
                let dwt = if j < n { noise.dwt(kappa, j) } else { 0.0 };
                for i in 0..m {
                    let x = xs[j * m + i];
                    let fb = policy.evaluate(kappa, j, x);
                    let step = system.forward(
                        kappa,
                        i,
                        j,
                        t,
                        x,
                        Feedback {
                            y: fb.y,
                            z: fb.z,
                            zt: fb.zt,
                        },
                    )?;
                    als[j * m + i] = step.control;
                    if j == n {
                        continue;
                    }
                    let next = x + step.drift * dt + step.vol * dw[i] + step.common_vol * dwt;
                    if !next.is_finite() {
                        return Err(Error::numeric(format!(
                            "state became non-finite at (kappa={kappa}, i={i}, j={})",
                            j + 1
                        )));
                    }
                    xs[(j + 1) * m + i] = next;
                }
            }
            Ok(())
        })?;
    states.populated.x = true;
    states.populated.alpha = true;
    Ok(())
}

/// Forward Euler of the game dynamics under `policy`, with the control taken
/// as the Hamiltonian minimizer at the policy's (Y, Z, Zt).
pub fn forward_euler(
    model: &crate::model::ModelSpec,
    policy: &FeedbackPolicy,
    noise: &NoiseBundle,
    xi: &InitialCloud,
) -> Result<ParticleStates> {
    let system = crate::fbsde::MfgSystem::new(model, *noise.grid());
    let mut states = ParticleStates::zeros(noise.k(), noise.m(), noise.grid().n)?;
    forward_pass(&system, policy, noise, xi, &mut states)?;
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_times() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.dt(), 0.25);
        assert_eq!(g.t(4), 1.0);
        let tail = g.tail(2).unwrap();
        assert_eq!(tail.s, 0.5);
        assert_eq!(tail.n, 2);
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn noise_is_deterministic_and_seed_sensitive() {
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let a = generate_noise(&g, 3, 4, 7).unwrap();
        let b = generate_noise(&g, 3, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_noise(&g, 3, 4, 8).unwrap();
        assert_ne!(a.dw(0, 0, 0), c.dw(0, 0, 0));
        assert_ne!(a.dwt(0, 0), c.dwt(0, 0));
    }

    #[test]
    fn noise_is_keyed_by_global_step() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let full = generate_noise(&g, 2, 3, 11).unwrap();
        let tail = g.tail(4).unwrap();
        let keys = NoiseKeys {
            step_offset: 4,
            ..NoiseKeys::new(11)
        };
        let part = generate_noise_keyed(&tail, 2, 3, keys).unwrap();
        for kappa in 0..2 {
            for j in 0..6 {
                assert_eq!(part.dwt(kappa, j), full.dwt(kappa, j + 4));
                for i in 0..3 {
                    assert_eq!(part.dw(kappa, i, j), full.dw(kappa, i, j + 4));
                }
            }
        }
    }

    #[test]
    fn increment_variance_matches_dt() {
        let g = TimeGrid::new(0.0, 1.0, 10_000).unwrap();
        let noise = generate_noise(&g, 1, 1, 3).unwrap();
        let dt = g.dt();
        let xs: Vec<f64> = (0..g.n).map(|j| noise.dw(0, 0, j)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var / dt - 1.0).abs() < 0.05, "variance ratio {}", var / dt);
    }

    #[test]
    fn budget_is_enforced() {
        let g = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        assert!(matches!(generate_noise(&g, 1 << 16, 1 << 16, 0), Err(Error::Resource(_))));
    }

    #[test]
    fn sample_resampling_uses_midpoint_quantiles() {
        let law = InitialLaw::Sample {
            values: vec![3.0, 1.0, 2.0, 4.0],
        };
        let cloud = law.sample(1, 2, 0).unwrap();
        assert_eq!(cloud.path(0), &[2.0, 4.0]);
        let law = InitialLaw::Sample { values: vec![5.0] };
        assert_eq!(law.sample(1, 3, 0).unwrap().path(0), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn gaussian_prefix_stable_under_growth() {
        let law = InitialLaw::Gaussian {
            mean: 1.0,
            variance: 0.25,
        };
        let a = law.sample(1, 8, 5).unwrap();
        let b = law.sample(1, 16, 5).unwrap();
        assert_eq!(a.path(0), &b.path(0)[..8]);
    }
}
