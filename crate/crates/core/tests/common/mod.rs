//! Numerically integrated reference values for the 1-D toy bound, written
//! without touching the library's estimator code.

#![allow(dead_code)]

use promptfl::objective::ToyModel;

const GRID: usize = 801;
const HALF_WIDTH: f64 = 12.0;

fn log_normal(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn binomial(n: usize, k: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..k {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(k as i32) * (1.0 - p).powi((n - k) as i32)
}

/// Simpson nodes for `E_{p ~ q(.|b)}`: `(probability mass, log weight)` with
/// the mass including `P(b)`, for a given count `k` of auxiliary bits equal
/// to one out of `s`.
fn nodes(toy: &ToyModel, s: usize, k: usize) -> Vec<(f64, f64)> {
    let pb = [1.0 - toy.keep_prob, toy.keep_prob];
    let mut out = Vec::with_capacity(2 * GRID);
    for b in 0..2 {
        if pb[b] == 0.0 {
            continue;
        }
        let (mu, sd) = (toy.means[b], toy.sigmas[b]);
        let lo = mu - HALF_WIDTH * sd;
        let h = 2.0 * HALF_WIDTH * sd / (GRID - 1) as f64;
        for i in 0..GRID {
            let p = lo + h * i as f64;
            let simpson = if i == 0 || i == GRID - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let mass = pb[b] * simpson * h / 3.0 * log_normal(p, mu, sd).exp();
            let q = |c: usize| log_normal(p, toy.means[c], toy.sigmas[c]).exp();
            let mixture = (q(b) + k as f64 * q(1) + (s - k) as f64 * q(0)) / (s + 1) as f64;
            let log_w = log_normal(toy.y, p, toy.noise) + log_normal(p, 0.0, 1.0) - mixture.ln();
            out.push((mass, log_w));
        }
    }
    out
}

/// `∫ (exp(-e^z) - E[exp(-e^z X)]) dz` where `X` is the mean of `j` i.i.d.
/// weights with log values `l` at masses `a`. This equals `E[log X]`, and
/// the Laplace transform of a mean of `j` copies is the `j`-th power of the
/// single-weight transform at `e^z / j`.
fn log_mean_transform(nodes: &[(f64, f64)], j: usize) -> f64 {
    let w: Vec<(f64, f64)> = nodes.iter().map(|&(a, l)| (a, l.exp() / j as f64)).collect();
    let (z0, z1, dz): (f64, f64, f64) = (-40.0, 25.0, 0.01);
    let n = ((z1 - z0) / dz).round() as usize;
    let mut total = 0.0;
    for i in 0..=n {
        let u = (z0 + dz * i as f64).exp();
        let phi: f64 = w.iter().map(|&(a, x)| a * (-u * x).exp()).sum();
        let f = (-u).exp() - phi.powi(j as i32);
        total += if i == 0 || i == n { 0.5 * f } else { f };
    }
    total * dz
}

/// `E[log mean(w_1..w_J)]`, shifting the weights by their mean log so the
/// transform integral stays inside its window.
fn expected_log_mean(nodes: &[(f64, f64)], j: usize) -> f64 {
    let m: f64 = nodes.iter().map(|(a, l)| a * l).sum();
    if j == 1 {
        return m;
    }
    let shifted: Vec<(f64, f64)> = nodes.iter().map(|&(a, l)| (a, l - m)).collect();
    m + log_mean_transform(&shifted, j)
}

/// Reference value of the bound with `s` auxiliary and `j` importance draws.
pub fn toy_reference(toy: &ToyModel, s: usize, j: usize) -> f64 {
    (0..=s)
        .map(|k| {
            let pk = binomial(s, k, toy.keep_prob);
            if pk == 0.0 {
                0.0
            } else {
                pk * expected_log_mean(&nodes(toy, s, k), j)
            }
        })
        .sum()
}

/// The `J = 1` reference computed through the transform instead of directly,
/// to check the integration window and step.
pub fn toy_reference_via_transform(toy: &ToyModel, s: usize) -> f64 {
    (0..=s)
        .map(|k| {
            let nd = nodes(toy, s, k);
            let m: f64 = nd.iter().map(|(a, l)| a * l).sum();
            let shifted: Vec<(f64, f64)> = nd.iter().map(|&(a, l)| (a, l - m)).collect();
            binomial(s, k, toy.keep_prob) * (m + log_mean_transform(&shifted, 1))
        })
        .sum()
}
