#![allow(dead_code)]

use mfgcn::model::{LinearStateSpec, LqParams, ModelSpec};
use mfgcn::simulate::InitialLaw;

pub const CANONICAL: LqParams = LqParams {
    q: 1.0,
    qbar: 0.5,
    s: 0.8,
    q_t: 1.0,
    qbar_t: 0.5,
    s_t: 0.8,
};

pub fn canonical_dynamics(tsigma: f64) -> LinearStateSpec {
    LinearStateSpec {
        b1: 0.1.into(),
        b2: 1.0.into(),
        sigma0: 0.3.into(),
        tsigma0: tsigma.into(),
        ..Default::default()
    }
}

pub fn canonical_model() -> ModelSpec {
    ModelSpec::lq(canonical_dynamics(0.2), CANONICAL, 1.0, 10.0).unwrap()
}

pub fn canonical_law() -> InitialLaw {
    InitialLaw::Gaussian {
        mean: 1.0,
        variance: 0.25,
    }
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Minimum-cost assignment on a square matrix (Hungarian method, O(n^3)).
fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact W2 by optimal coupling: atoms are replicated to a common count, where
/// uniform couplings are permutations, and the best permutation is found by
/// exhaustive search (small) or by the assignment solver.
pub fn coupling_oracle(a: &[f64], b: &[f64]) -> f64 {
    let l = a.len() / gcd(a.len(), b.len()) * b.len();
    let ra: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, l / a.len())).collect();
    let rb: Vec<f64> = b.iter().flat_map(|&x| std::iter::repeat_n(x, l / b.len())).collect();
    let cost: Vec<Vec<f64>> = ra.iter().map(|x| rb.iter().map(|y| (x - y) * (x - y)).collect()).collect();
    let best = if l <= 6 {
        permutations(l)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    } else {
        assignment_cost(&cost)
    };
    (best / l as f64).sqrt()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

