use super::*;
use crate::numerics::{grad_check, GradCheckConfig};
use proptest::prelude::*;

fn features(layers: usize, tokens: usize, d: usize, seed: u64) -> FeatureStack {
    let mut rng = RngKey::new(seed).rng();
    FeatureStack {
        layers: (0..layers)
            .map(|_| standard_normal(&[tokens, d], &mut rng))
            .collect(),
    }
}

fn gelu_ref(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Index-by-index recomputation of one encoder branch.
fn naive_branch(f: &Tensor, gain: &Tensor, bias: &Tensor, mlp: &TokenMlp) -> Vec<Vec<f64>> {
    let (t, d) = (f.rows(), f.cols());
    let mut ln = vec![vec![0.0; d]; t];
    for r in 0..t {
        let row = f.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            ln[r][c] = (row[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * gain.data()[c]
                + bias.data()[c];
        }
    }
    let hidden = mlp.w1.cols();
    let nu = mlp.w2.cols();
    let mut out = vec![vec![0.0; d]; nu];
    for c in 0..d {
        let mut h = vec![0.0; hidden];
        for (k, hk) in h.iter_mut().enumerate() {
            let mut s = mlp.b1.data()[k];
            for r in 0..t {
                s += ln[r][c] * mlp.w1.data()[r * hidden + k];
            }
            *hk = gelu_ref(s);
        }
        for (j, row) in out.iter_mut().enumerate() {
            let mut s = mlp.b2.data()[j];
            for k in 0..hidden {
                s += h[k] * mlp.w2.data()[k * nu + j];
            }
            row[c] = s;
        }
    }
    out
}

#[test]
fn pi_one_gives_all_ones() {
    let mut rng = RngKey::new(1).rng();
    let m = sample_masks(4, 17, 1.0, &mut rng).unwrap();
    assert!(m.masks.iter().flatten().all(|&x| x == 1.0));
}

#[test]
fn keep_prob_out_of_range_is_config_error() {
    let mut rng = RngKey::new(1).rng();
    for pi in [0.0, -0.1, 1.01, f64::NAN] {
        assert!(matches!(
            sample_masks(4, 17, pi, &mut rng),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn cls_always_kept() {
    let mut rng = RngKey::new(2).rng();
    for _ in 0..10_000 {
        let m = sample_masks(1, 17, 0.5, &mut rng).unwrap();
        assert_eq!(m.masks[0][0], 1.0);
    }
}

#[test]
fn keep_rate_matches_pi() {
    let mut rng = RngKey::new(3).rng();
    for pi in [0.3, 0.9] {
        let mut kept = 0.0;
        let mut total = 0.0;
        for _ in 0..100_000 {
            let m = sample_masks(1, 17, pi, &mut rng).unwrap();
            kept += m.masks[0][1..].iter().sum::<f64>();
            total += 16.0;
        }
        assert!((kept / total - pi).abs() < 0.01, "pi {pi}: {}", kept / total);
    }
}

#[test]
fn identity_and_cls_only_masks() {
    let f = features(3, 5, 4, 0);
    let ones = MaskSet {
        masks: vec![vec![1.0; 5]; 3],
    };
    assert_eq!(apply_masks(&f, &ones).unwrap(), f);
    let cls_only = MaskSet {
        masks: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]; 3],
    };
    let out = apply_masks(&f, &cls_only).unwrap();
    for (a, b) in out.layers.iter().zip(&f.layers) {
        assert_eq!(a.row(0), b.row(0));
        assert!(a.data()[4..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn random_mask_matches_row_loop() {
    let f = features(4, 17, 8, 5);
    let mut rng = RngKey::new(6).rng();
    let m = sample_masks(4, 17, 0.6, &mut rng).unwrap();
    let out = apply_masks(&f, &m).unwrap();
    for l in 0..4 {
        for r in 0..17 {
            for c in 0..8 {
                let want = f.layers[l].row(r)[c] * m.masks[l][r];
                assert_eq!(out.layers[l].row(r)[c], want);
            }
        }
    }
}

#[test]
fn mask_length_mismatch_is_dimension_error() {
    let f = features(2, 5, 4, 0);
    let m = MaskSet {
        masks: vec![vec![1.0; 4]; 2],
    };
    assert!(matches!(apply_masks(&f, &m), Err(Error::Dimension { .. })));
}

#[test]
fn zero_encoder_is_standard_normal() {
    let f = features(4, 17, 32, 7);
    let psi = encode_psi(&f, &EncoderParams::zeros(4, 17, 32, 1)).unwrap();
    assert_eq!(psi.mu.shape(), [4, 1, 32]);
    assert!(psi.mu.data().iter().all(|&x| x == 0.0));
    assert!(psi.sigma.data().iter().all(|&x| x == 1.0));
}

#[test]
fn encoder_matches_explicit_loops() {
    let f = features(2, 6, 5, 8);
    let mut phi = EncoderParams::init(2, 6, 5, 3, 0.3, RngKey::new(9));
    // non-trivial LN affine so the gain/bias indexing is exercised
    let mut rng = RngKey::new(10).rng();
    for l in &mut phi.layers {
        l.ln_gain = standard_normal(&[5], &mut rng);
        l.ln_bias = standard_normal(&[5], &mut rng);
        l.sigma.w2 = standard_normal(&[6, 3], &mut rng);
    }
    let psi = encode_psi(&f, &phi).unwrap();
    assert_eq!(psi.mu.shape(), [2, 3, 5]);
    for (i, layer) in phi.layers.iter().enumerate() {
        let mu = naive_branch(&f.layers[i], &layer.ln_gain, &layer.ln_bias, &layer.mu);
        let lv = naive_branch(&f.layers[i], &layer.ln_gain, &layer.ln_bias, &layer.sigma);
        for j in 0..3 {
            for c in 0..5 {
                let idx = (i * 3 + j) * 5 + c;
                assert!((psi.mu.data()[idx] - mu[j][c]).abs() < 1e-12);
                assert!((psi.sigma.data()[idx] - (0.5 * lv[j][c]).exp()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fresh_encoder_emits_init_sigma_scale() {
    let f = features(4, 17, 32, 11);
    let psi = encode_psi(&f, &EncoderParams::init(4, 17, 32, 1, 0.1, RngKey::new(1))).unwrap();
    for &s in psi.sigma.data() {
        assert!(s > 0.05 && s < 0.2, "{s}");
    }
}

#[test]
fn encode_is_deterministic_and_pi_one_collapses() {
    let f = features(4, 17, 16, 12);
    let phi = EncoderParams::init(4, 17, 16, 1, 0.2, RngKey::new(2));
    let mut rng = RngKey::new(3).rng();
    let a = apply_masks(&f, &sample_masks(4, 17, 1.0, &mut rng).unwrap()).unwrap();
    let b = apply_masks(&f, &sample_masks(4, 17, 1.0, &mut rng).unwrap()).unwrap();
    assert_eq!(encode_psi(&a, &phi).unwrap(), encode_psi(&b, &phi).unwrap());
    assert_eq!(encode_psi(&a, &phi).unwrap(), encode_psi(&a, &phi).unwrap());
}

#[test]
fn zero_noise_returns_mean() {
    let psi = PromptPosterior {
        mu: Tensor::from_fn(&[2, 1, 3], |i| i as f64),
        sigma: Tensor::full(&[2, 1, 3], 0.7),
    };
    assert_eq!(reparameterize(&psi, &Tensor::zeros(&[2, 1, 3])), psi.mu);
}

#[test]
fn sample_moments() {
    let psi = PromptPosterior {
        mu: Tensor::new(vec![1, 1, 3], vec![-1.0, 0.5, 2.0]).unwrap(),
        sigma: Tensor::new(vec![1, 1, 3], vec![0.5, 1.0, 2.0]).unwrap(),
    };
    let n = 100_000;
    let mut rng = RngKey::new(4).rng();
    let draws: Vec<Tensor> = (0..n).map(|_| sample_prompt(&psi, &mut rng).0).collect();
    for c in 0..3 {
        let xs: Vec<f64> = draws.iter().map(|p| p.data()[c]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s = psi.sigma.data()[c];
        let se_mean = s / (n as f64).sqrt();
        // variance of the sample variance for a Gaussian is 2σ⁴/(n-1)
        let se_var = (2.0 * s.powi(4) / (n - 1) as f64).sqrt();
        assert!((mean - psi.mu.data()[c]).abs() < 3.0 * se_mean, "mean {c}");
        assert!((var - s * s).abs() < 3.0 * se_var, "var {c}");
    }
}

#[test]
fn concat_edge_cases_and_order() {
    let gp = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
    let ip = Tensor::from_fn(&[2, 1, 4], |i| 100.0 + i as f64);
    assert_eq!(concat_global(None, Some(&ip)).unwrap().unwrap(), ip);
    assert_eq!(concat_global(Some(&gp), None).unwrap().unwrap(), gp);
    assert_eq!(concat_global(None, None).unwrap(), None);
    let out = concat_global(Some(&gp), Some(&ip)).unwrap().unwrap();
    assert_eq!(out.shape(), [2, 4, 4]);
    for l in 0..2 {
        for k in 0..4 {
            for c in 0..4 {
                let want = if k < 3 {
                    gp.data()[(l * 3 + k) * 4 + c]
                } else {
                    ip.data()[l * 4 + c]
                };
                assert_eq!(out.data()[(l * 4 + k) * 4 + c], want);
            }
        }
    }
    let bad = Tensor::zeros(&[3, 1, 4]);
    assert!(concat_global(Some(&gp), Some(&bad)).is_err());
    let bad = Tensor::zeros(&[2, 1, 5]);
    assert!(concat_global(Some(&gp), Some(&bad)).is_err());
}

#[test]
fn named_roundtrip() {
    let phi = EncoderParams::init(3, 5, 4, 2, 0.1, RngKey::new(1));
    let named = phi.to_named("encoder");
    assert_eq!(named.len(), 30);
    assert_eq!(EncoderParams::from_named(&named, "encoder", 3).unwrap(), phi);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let f = features(2, 5, 4, 13);
    let phi = EncoderParams::init(2, 5, 4, 2, 0.5, RngKey::new(14));
    let mut params: Vec<Tensor> = phi.tensors().into_iter().cloned().collect();
    params.extend(f.layers.iter().cloned());
    let weights = standard_normal(&[2, 2, 4], &mut RngKey::new(15).rng());
    let report = grad_check(
        |g, vars| {
            let ev = EncoderVars {
                layers: vars[..20].chunks(10).map(|c| c.try_into().unwrap()).collect(),
            };
            let out = ev.encode(g, &vars[20..])?;
            let mut terms = Vec::new();
            for (i, (mu, sigma)) in out.into_iter().enumerate() {
                let w = g.constant(unstack(&weights)?[i].clone());
                let a = g.mul(mu, w)?;
                let b = g.mul(sigma, w)?;
                let s = g.add(a, b)?;
                terms.push(g.sum_all(s));
            }
            g.add_n(&terms)
        },
        &params,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

proptest! {
    #[test]
    fn sigma_is_positive(seed in 0u64..1000, scale in 0.01f64..3.0) {
        let f = features(2, 5, 4, seed);
        let mut phi = EncoderParams::init(2, 5, 4, 1, scale, RngKey::new(seed));
        for t in phi.tensors_mut() {
            for x in t.data_mut() {
                *x *= 3.0;
            }
        }
        let psi = encode_psi(&f, &phi).unwrap();
        prop_assert!(psi.sigma.data().iter().all(|&s| s > 0.0));
    }

    #[test]
    fn masks_are_binary_with_cls(seed in 0u64..1000, pi in 0.01f64..=1.0, layers in 1usize..5) {
        let mut rng = RngKey::new(seed).rng();
        let m = sample_masks(layers, 9, pi, &mut rng).unwrap();
        prop_assert_eq!(m.masks.len(), layers);
        for mask in &m.masks {
            prop_assert_eq!(mask[0], 1.0);
            prop_assert!(mask.iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }
}
