use proptest::prelude::*;

use super::*;
use crate::rng::RngKey;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], key: u64) -> Tensor {
    let mut rng = RngKey::new(key).rng();
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

fn primitive_cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

#[test]
fn matmul_identity_and_hand_case() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    let b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    let err = matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[4, 2], 2);
    let w = randn(&[3, 2], 3);
    let r = grad_check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            let wv = g.constant(w.clone());
            let cw = g.mul(c, wv)?;
            Ok(g.sum_all(cw))
        },
        &[a, b],
        primitive_cfg(),
    )
    .unwrap();
    assert_eq!(r.coords_checked, 20);
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_constant_row_maps_to_zero() {
    let x = Tensor::full(&[2, 5], 3.7);
    let out = layer_norm(&x, &Tensor::full(&[5], 1.0), &Tensor::zeros(&[5]), LAYER_NORM_EPS).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_variance_shrinks_by_eps_only() {
    let x = randn(&[4, 16], 9);
    let out = layer_norm(&x, &Tensor::full(&[16], 1.0), &Tensor::zeros(&[16]), LAYER_NORM_EPS).unwrap();
    for r in 0..4 {
        let xr = x.row(r);
        let xm = xr.iter().sum::<f64>() / 16.0;
        let xv = xr.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / 16.0;
        let row = out.row(r);
        let m = row.iter().sum::<f64>() / 16.0;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 16.0;
        assert!(m.abs() < 1e-10);
        assert!((v - xv / (xv + LAYER_NORM_EPS)).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_variance_within_tolerance_for_unit_scale_rows() {
    // Output variance is var/(var + eps); rows with var ~25 land within 1e-6.
    let x = randn(&[8, 32], 10).map(|v| v * 5.0);
    let out = layer_norm(&x, &Tensor::full(&[32], 1.0), &Tensor::zeros(&[32]), LAYER_NORM_EPS).unwrap();
    for r in 0..8 {
        let row = out.row(r);
        let m = row.iter().sum::<f64>() / 32.0;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 32.0;
        assert!(m.abs() < 1e-10);
        assert!((v - 1.0).abs() < 1e-6, "variance {v}");
    }
}

#[test]
fn layer_norm_dimension_mismatch() {
    let x = Tensor::zeros(&[2, 4]);
    assert!(matches!(
        layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[4]), 1e-5),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let x = randn(&[3, 6], 4);
    let gain = randn(&[6], 5);
    let bias = randn(&[6], 6);
    let w = randn(&[3, 6], 7);
    let r = grad_check(
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
            let wv = g.constant(w.clone());
            let yw = g.mul(y, wv)?;
            Ok(g.sum_all(yw))
        },
        &[x, gain, bias],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn cross_entropy_cases() {
    let uniform = Tensor::zeros(&[10]);
    assert!((softmax_cross_entropy(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
    let peaked = Tensor::vector(vec![1000.0, 0.0]).unwrap();
    let loss = softmax_cross_entropy(&peaked, 0).unwrap();
    assert!(loss.is_finite() && loss.abs() < 1e-12);
    assert!(matches!(
        softmax_cross_entropy(&uniform, 10),
        Err(Error::Index(_))
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = randn(&[5], 11);
    let mut g = Graph::new();
    let l = g.param(logits.clone());
    let loss = g.softmax_cross_entropy(l, 2).unwrap();
    let grads = g.backward(loss).unwrap();
    let probs = softmax(&logits);
    for c in 0..5 {
        let expected = probs.data()[c] - if c == 2 { 1.0 } else { 0.0 };
        assert!((grads.get(l).unwrap().data()[c] - expected).abs() < 1e-15);
    }
    let r = grad_check(|g, p| g.softmax_cross_entropy(p[0], 2), &[logits], primitive_cfg()).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn gaussian_log_density_cases() {
    let z = Tensor::scalar(0.0);
    let one = Tensor::scalar(1.0);
    assert!((gaussian_log_density(&z, &z, &one).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
    assert!((gaussian_log_density(&one, &z, &one).unwrap() + 1.418_938_533_204_672_7).abs() < 1e-12);
    assert!(matches!(
        gaussian_log_density(&z, &z, &Tensor::scalar(0.0)),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        gaussian_log_density(&z, &z, &Tensor::scalar(-1.0)),
        Err(Error::Domain(_))
    ));
}

#[test]
fn gaussian_log_density_matches_density_product() {
    // Independent route: evaluate each univariate density directly and take
    // the log of their product.
    let p = Tensor::vector(vec![0.3, -1.2]).unwrap();
    let mu = Tensor::vector(vec![-0.5, 0.7]).unwrap();
    let sigma = Tensor::vector(vec![0.8, 2.5]).unwrap();
    let dens = |x: f64, m: f64, s: f64| {
        (-(x - m) * (x - m) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
    };
    let product = dens(0.3, -0.5, 0.8) * dens(-1.2, 0.7, 2.5);
    let got = gaussian_log_density(&p, &mu, &sigma).unwrap();
    assert!((got - product.ln()).abs() < 1e-12);
}

#[test]
fn gaussian_log_density_gradient() {
    let p = randn(&[2, 3], 12);
    let mu = randn(&[2, 3], 13);
    let sigma = randn(&[2, 3], 14).map(|v| 0.5 + v.abs());
    let r = grad_check(
        |g, v| g.gaussian_log_density(v[0], v[1], v[2]),
        &[p, mu, sigma],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn log_sum_exp_cases() {
    assert_eq!(log_sum_exp(&[-3.25]).unwrap(), -3.25);
    assert!((log_sum_exp(&[1.0, 1.0]).unwrap() - 1.693_147_180_559_945).abs() < 1e-12);
    let big = log_sum_exp(&[1000.0, 1000.0]).unwrap();
    assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-10);
    assert!(matches!(log_sum_exp(&[]), Err(Error::Argument(_))));
}

#[test]
fn log_sum_exp_gradient() {
    let vals: Vec<Tensor> = [0.3, -1.0, 2.0].iter().map(|&v| Tensor::scalar(v)).collect();
    let r = grad_check(|g, v| g.log_sum_exp(v), &vals, primitive_cfg()).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn elementwise_and_structural_op_gradients() {
    let a = randn(&[3, 4], 20).map(|v| 0.5 * v);
    let b = randn(&[3, 4], 21).map(|v| 0.5 * v);
    let w = randn(&[4, 3], 22);
    let bias = randn(&[3], 23);
    let r = grad_check(
        |g, p| {
            let s = g.add(p[0], p[1])?;
            let d = g.sub(s, p[1])?;
            let m = g.mul(d, p[1])?;
            let e = g.exp(m)?;
            let ge = g.gelu(e);
            let sc = g.scale(ge, 0.7);
            let lin = g.linear(sc, p[2], p[3])?; // 3x3
            let t = g.transpose(lin)?;
            let top = g.slice_rows(t, 0, 2)?;
            let bottom = g.slice_rows(t, 2, 1)?;
            let cat = g.concat_rows(&[bottom, top])?;
            let masked = g.mask_rows(cat, &[1.0, 0.0, 1.0])?;
            let re = g.reshape(masked, &[9])?;
            let n = g.add_n(&[re, re])?;
            Ok(g.sum_all(n))
        },
        &[a, b, w, bias],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn attention_gradient() {
    let q = randn(&[5, 8], 30);
    let k = randn(&[5, 8], 31);
    let v = randn(&[5, 8], 32);
    let w = randn(&[5, 8], 33);
    let r = grad_check(
        |g, p| {
            let o = g.attention(p[0], p[1], p[2], 2)?;
            let wv = g.constant(w.clone());
            let ow = g.mul(o, wv)?;
            Ok(g.sum_all(ow))
        },
        &[q, k, v],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn attention_rows_are_convex_combinations() {
    // With v = constant rows the output equals that row for every token.
    let mut g = Graph::new();
    let q = g.constant(randn(&[4, 4], 1));
    let k = g.constant(randn(&[4, 4], 2));
    let row = [1.0, -2.0, 0.5, 3.0];
    let v = g.constant(Tensor::from_fn(&[4, 4], |i| row[i % 4]));
    let o = g.attention(q, k, v, 2).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            assert!((g.value(o).row(r)[c] - row[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn grad_check_quadratic_and_constant() {
    let theta = randn(&[7], 40);
    let r = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum_all(sq))
        },
        &[theta],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-8, "{r:?}");

    let r = grad_check(
        |g, _| Ok(g.constant(Tensor::scalar(4.2))),
        &[randn(&[3], 41)],
        primitive_cfg(),
    )
    .unwrap();
    assert!(r.max_abs_analytic < 1e-10 && r.max_abs_numeric < 1e-10);
}

#[test]
fn five_point_stencil_is_exact_on_cubics() {
    let cube = |g: &mut Graph, p: &[Var]| {
        let sq = g.mul(p[0], p[0])?;
        let cu = g.mul(sq, p[0])?;
        Ok(g.sum_all(cu))
    };
    let theta = randn(&[5], 42);
    let coarse = GradCheckConfig {
        rel_step: 1e-2,
        ..primitive_cfg()
    };
    let two = grad_check(cube, &[theta.clone()], coarse).unwrap();
    let five = grad_check(
        cube,
        &[theta],
        GradCheckConfig {
            five_point: true,
            ..coarse
        },
    )
    .unwrap();
    assert!(two.max_rel_err > 1e-6, "{two:?}");
    assert!(five.max_rel_err < 1e-9, "{five:?}");
}

#[test]
fn grad_check_rejects_nondeterministic_loss() {
    use std::cell::Cell;
    let calls = Cell::new(0u32);
    let err = grad_check(
        |g, p| {
            calls.set(calls.get() + 1);
            let c = g.constant(Tensor::scalar(calls.get() as f64));
            let s = g.sum_all(p[0]);
            g.add(s, c)
        },
        &[Tensor::scalar(1.0)],
        primitive_cfg(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn forward_is_bit_reproducible() {
    let build = || {
        let mut g = Graph::new();
        let x = g.constant(randn(&[6, 8], 50));
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        let a = g.attention(y, y, y, 4).unwrap();
        g.value(a).clone()
    };
    assert_eq!(build().to_le_bytes(), build().to_le_bytes());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&Tensor::vector(v).unwrap());
        let s: f64 = p.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients(seed in 0u64..1000) {
        let x = randn(&[4, 4], seed);
        let w = randn(&[4, 4], seed + 1);
        let grad_of = |parts: &[bool]| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.constant(w.clone());
            let mut losses = Vec::new();
            if parts[0] {
                let m = g.matmul(xv, wv).unwrap();
                let e = g.gelu(m);
                losses.push(g.sum_all(e));
            }
            if parts[1] {
                let m = g.mul(xv, xv).unwrap();
                losses.push(g.sum_all(m));
            }
            let total = g.add_n(&losses).unwrap();
            g.backward(total).unwrap().get(xv).unwrap().clone()
        };
        let both = grad_of(&[true, true]);
        let a = grad_of(&[true, false]);
        let b = grad_of(&[false, true]);
        for i in 0..16 {
            prop_assert!((both.data()[i] - a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_bounds(v in prop::collection::vec(-700.0f64..700.0, 1..10)) {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&v).unwrap();
        prop_assert!(l >= m - 1e-12);
        prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
    }
}
