use mfgcn::oracle::{analytic_feedback, individual_offset, mean_path, solve_riccati, solve_riccati_with_substeps};
use mfgcn::{LqParams, LqSpec, TimeGrid};

const B1: f64 = 0.1;
const B2: f64 = 1.0;

fn canonical() -> LqSpec {
    LqSpec {
        params: LqParams {
            q: 1.0,
            qbar: 0.5,
            s: 0.8,
            q_t: 1.0,
            qbar_t: 0.5,
            s_t: 0.8,
        },
        b1: B1,
        b2: B2,
        sigma: 0.3,
        tsigma: 0.2,
    }
}

/// Refining grid search for the minimizer of a one-dimensional function.
fn argmin_grid(f: &dyn Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (-20.0, 20.0);
    let mut best = 0.0;
    for _ in 0..12 {
        let step = (hi - lo) / 40.0;
        let (mut k_best, mut v_best) = (0usize, f64::INFINITY);
        for k in 0..=40 {
            let v = f(lo + step * k as f64);
            if v < v_best {
                v_best = v;
                k_best = k;
            }
        }
        best = lo + step * k_best as f64;
        lo += step * k_best.saturating_sub(1) as f64;
        hi = (best + step).min(hi);
    }
    best
}

/// Two-period discrete program with step `h`, solved by exhaustive search over
/// controls against a representative mean path, iterated to a fixed point.
/// Noise does not enter the LQ feedback, so the deterministic program suffices.
struct TwoPeriod {
    lq: LqSpec,
    h: f64,
}

impl TwoPeriod {
    fn f(&self, x: f64, m: f64, a: f64) -> f64 {
        let p = &self.lq.params;
        0.5 * (p.q * x * x + a * a + p.qbar * (x - p.s * m).powi(2))
    }

    fn g(&self, x: f64, m: f64) -> f64 {
        let p = &self.lq.params;
        0.5 * (p.q_t * x * x + p.qbar_t * (x - p.s_t * m).powi(2))
    }

    fn step(&self, x: f64, a: f64) -> f64 {
        x + self.h * (self.lq.b1 * x + self.lq.b2 * a)
    }

    fn control_1(&self, x1: f64, mp: &[f64; 3]) -> f64 {
        argmin_grid(&|a| self.h * self.f(x1, mp[1], a) + self.g(self.step(x1, a), mp[2]))
    }

    fn value(&self, x0: f64, mp: &[f64; 3]) -> (f64, f64) {
        let v1 = |x1: f64| {
            let a = self.control_1(x1, mp);
            self.h * self.f(x1, mp[1], a) + self.g(self.step(x1, a), mp[2])
        };
        let total = |a: f64| self.h * self.f(x0, mp[0], a) + v1(self.step(x0, a));
        let a0 = argmin_grid(&total);
        (total(a0), a0)
    }

    /// `dV/dx0` by central difference at the fixed-point mean path.
    fn y0(&self, x0: f64, m0: f64) -> f64 {
        let mut mp = [m0; 3];
        for _ in 0..30 {
            let (_, a0) = self.value(m0, &mp);
            let m1 = self.step(m0, a0);
            let m2 = self.step(m1, self.control_1(m1, &mp));
            mp = [m0, m1, m2];
        }
        let e = 1e-3;
        (self.value(x0 + e, &mp).0 - self.value(x0 - e, &mp).0) / (2.0 * e)
    }
}

#[test]
fn riccati_matches_two_period_program() {
    let lq = canonical();
    let h = 0.01;
    let grid = TimeGrid::new(0.0, 2.0 * h, 2).unwrap();
    let sol = solve_riccati_with_substeps(&lq, &grid, 1000).unwrap();
    let (x0, m0) = (1.5, 1.0);
    let (y_ric, _) = analytic_feedback(&lq, &sol, 0, x0, m0);
    let y_dp = TwoPeriod { lq, h }.y0(x0, m0);
    assert!((y_ric - y_dp).abs() < 1e-3, "Riccati {y_ric} vs program {y_dp}");
}

#[test]
fn canonical_values() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let sol = solve_riccati(&canonical(), &grid).unwrap();
    assert!((sol.p[0] - 1.34260).abs() < 1e-4, "P0 = {}", sol.p[0]);
    assert!((sol.r[0] + 0.19570).abs() < 1e-4, "R0 = {}", sol.r[0]);
    assert!(sol.p.iter().all(|p| *p > 0.0));
}

#[test]
fn rk4_self_convergence() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let a = solve_riccati_with_substeps(&canonical(), &grid, 10).unwrap();
    let b = solve_riccati_with_substeps(&canonical(), &grid, 20).unwrap();
    assert!((a.p[0] - b.p[0]).abs() <= 1e-8);
    assert!((a.r[0] - b.r[0]).abs() <= 1e-8);
}

#[test]
fn zero_common_noise_mean_is_deterministic_ode() {
    let mut lq = canonical();
    lq.tsigma = 0.0;
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let sol = solve_riccati(&lq, &grid).unwrap();
    let path = mean_path(&lq, &sol, &grid, 1.0, &[0.7; 50]);
    // Euler on the mean ODE with a fine step
    let mut m = 1.0;
    let sub = 200;
    let h = grid.dt() / sub as f64;
    for j in 0..50 {
        for k in 0..sub {
            let w = k as f64 / sub as f64;
            let rate = |idx: usize| lq.b1 - lq.b2 * lq.b2 * (sol.p[idx] + sol.r[idx]);
            m += h * ((1.0 - w) * rate(j) + w * rate(j + 1)) * m;
        }
    }
    assert!((path[50] - m).abs() < 1e-3 * m.abs().max(1e-3), "{} vs {m}", path[50]);
}

#[test]
fn individual_offset_reduces_to_game_at_equilibrium_mean() {
    // against the equilibrium mean path, Y = P x + r must equal P x + R mbar
    let mut lq = canonical();
    lq.tsigma = 0.0;
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let sol = solve_riccati(&lq, &grid).unwrap();
    let mbar = mean_path(&lq, &sol, &grid, 1.0, &[0.0; 50]);
    let r = individual_offset(&lq, &grid, &mbar).unwrap();
    for j in [0, 10, 25, 49, 50] {
        assert!((r[j] - sol.r[j] * mbar[j]).abs() < 2e-3, "j={j}: {} vs {}", r[j], sol.r[j] * mbar[j]);
    }
}
