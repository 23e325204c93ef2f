//! Scalar and slice kernels shared by the graph ops and the plain-tensor API.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `tanh` through one `exp`, several times cheaper than libm's and within
/// a few ulps in absolute terms.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = fast_tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Writes `(row - mean) / sqrt(var + eps)` into `out`; returns the inverse std.
pub fn normalize_row(row: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
    inv
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

pub fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits[idx] - m - s.ln()
}

pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    match values {
        [] => Err(Error::Argument("log_sum_exp of an empty list".into())),
        [x] => Ok(*x),
        _ => {
            let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Ok(m);
            }
            Ok(m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        }
    }
}

pub fn gaussian_log_density(p: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    for ((&x, &m), &s) in p.iter().zip(mu).zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("standard deviation {s} is not positive")));
        }
        let z = (x - m) / s;
        acc += -HALF_LN_2PI - s.ln() - 0.5 * z * z;
    }
    Ok(acc)
}

/// Multi-head attention forward. Returns the output rows and the attention
/// probabilities laid out as `[heads][T][T]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    let mut oh = vec![0.0; t * dh];
    for h in 0..heads {
        gather_head(q, &mut qh, t, d, h, dh);
        gather_head(k, &mut kh, t, d, h, dh);
        gather_head(v, &mut vh, t, d, h, dh);
        let p = &mut probs[h * t * t..(h + 1) * t * t];
        gemm_nt_acc(&qh, &kh, p, t, dh, t);
        for r in 0..t {
            let row = &mut p[r * t..(r + 1) * t];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x * scale - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        oh.iter_mut().for_each(|x| *x = 0.0);
        gemm_acc(p, &vh, &mut oh, t, t, dh);
        scatter_head(&oh, &mut out, t, d, h, dh);
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    let mut gh = vec![0.0; t * dh];
    let mut dp = vec![0.0; t * t];
    let mut tmp = vec![0.0; t * dh];
    for h in 0..heads {
        gather_head(q, &mut qh, t, d, h, dh);
        gather_head(k, &mut kh, t, d, h, dh);
        gather_head(v, &mut vh, t, d, h, dh);
        gather_head(g, &mut gh, t, d, h, dh);
        let p = &probs[h * t * t..(h + 1) * t * t];

        tmp.iter_mut().for_each(|x| *x = 0.0);
        gemm_tn_acc(p, &gh, &mut tmp, t, t, dh);
        scatter_head_add(&tmp, &mut dv, t, d, h, dh);

        dp.iter_mut().for_each(|x| *x = 0.0);
        gemm_nt_acc(&gh, &vh, &mut dp, t, dh, t);
        for r in 0..t {
            let pr = &p[r * t..(r + 1) * t];
            let dr = &mut dp[r * t..(r + 1) * t];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        tmp.iter_mut().for_each(|x| *x = 0.0);
        gemm_acc(&dp, &kh, &mut tmp, t, t, dh);
        scatter_head_add(&tmp, &mut dq, t, d, h, dh);
        tmp.iter_mut().for_each(|x| *x = 0.0);
        gemm_tn_acc(&dp, &qh, &mut tmp, t, t, dh);
        scatter_head_add(&tmp, &mut dk, t, d, h, dh);
    }
    (dq, dk, dv)
}

fn gather_head(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + h * dh..r * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        dst[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
    }
}

fn scatter_head_add(src: &[f64], dst: &mut [f64], t: usize, d: usize, h: usize, dh: usize) {
    for r in 0..t {
        for c in 0..dh {
            dst[r * d + h * dh + c] += src[r * dh + c];
        }
    }
}
