//! Semi-implicit prompt posterior.
//!
//! Masked layer features are pushed through per-layer encoders that emit the
//! mean and scale of a Gaussian over instance prompt tokens. Randomness in the
//! masks makes the marginal over prompts an implicit mixture.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureStack, VitConfig};
use crate::checkpoint::{find, NamedTensors};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::RngKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Instance prompt tokens per prompted layer.
    pub instance_tokens: usize,
    /// Global prompt tokens per prompted layer.
    pub global_tokens: usize,
    /// Bernoulli keep-probability of each non-CLS token in the masks.
    pub keep_prob: f64,
    /// Global prompts enter the first `global_depth` layers.
    pub global_depth: usize,
    /// Instance prompts enter the first `instance_depth` layers.
    pub instance_depth: usize,
    pub aux_samples: usize,
    pub importance_samples: usize,
    pub inference_samples: usize,
    /// Initial posterior scale produced by a freshly initialized encoder.
    pub init_sigma: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            instance_tokens: 1,
            global_tokens: 9,
            keep_prob: 0.9,
            global_depth: 4,
            instance_depth: 4,
            aux_samples: 1,
            importance_samples: 1,
            inference_samples: 5,
            init_sigma: 0.1,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self, vit: &VitConfig) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must lie in (0, 1], got {}",
                self.keep_prob
            )));
        }
        if self.importance_samples == 0 {
            return Err(Error::Config("importance_samples must be at least 1".into()));
        }
        if self.inference_samples == 0 {
            return Err(Error::Config("inference_samples must be at least 1".into()));
        }
        if self.global_depth > vit.layers || self.instance_depth > vit.layers {
            return Err(Error::Config(format!(
                "prompt depths ({}, {}) exceed {} layers",
                self.global_depth, self.instance_depth, vit.layers
            )));
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config("init_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Whether instance prompts exist at all.
    pub fn has_instance(&self) -> bool {
        self.instance_tokens > 0 && self.instance_depth > 0
    }

    pub fn has_global(&self) -> bool {
        self.global_tokens > 0 && self.global_depth > 0
    }
}

fn check_keep_prob(pi: f64) -> Result<()> {
    if pi > 0.0 && pi <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("keep_prob must lie in (0, 1], got {pi}")))
    }
}

/// One binary mask per layer over the token axis. Position 0 (CLS) is always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<Vec<f64>>,
}

pub fn sample_masks<R: Rng + ?Sized>(
    layers: usize,
    tokens: usize,
    keep_prob: f64,
    rng: &mut R,
) -> Result<MaskSet> {
    check_keep_prob(keep_prob)?;
    if tokens == 0 {
        return Err(Error::Argument("masks need at least the CLS position".into()));
    }
    let masks = (0..layers)
        .map(|_| {
            let mut m = Vec::with_capacity(tokens);
            m.push(1.0);
            for _ in 1..tokens {
                m.push(if rng.gen::<f64>() < keep_prob { 1.0 } else { 0.0 });
            }
            m
        })
        .collect();
    Ok(MaskSet { masks })
}

/// Row-wise zeroing of each layer's features. Extra feature layers beyond the
/// mask count are dropped, so a mask set for the first `k` layers yields `k` entries.
pub fn apply_masks(features: &FeatureStack, masks: &MaskSet) -> Result<FeatureStack> {
    if masks.masks.len() > features.layers.len() {
        return Err(dim_err(
            "apply_masks",
            format!("{} masks for {} layers", masks.masks.len(), features.layers.len()),
        ));
    }
    let layers = masks
        .masks
        .iter()
        .zip(&features.layers)
        .map(|(m, f)| {
            if m.len() != f.rows() {
                return Err(dim_err(
                    "apply_masks",
                    format!("mask of length {} for {} tokens", m.len(), f.rows()),
                ));
            }
            let d = f.cols();
            let mut out = f.clone();
            for (r, &keep) in m.iter().enumerate() {
                if keep == 0.0 {
                    out.data_mut()[r * d..(r + 1) * d].fill(0.0);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureStack { layers })
}

/// Masked features placed on a graph as constants, one per mask.
pub fn masked_constants(g: &mut Graph, features: &FeatureStack, masks: &MaskSet) -> Result<Vec<Var>> {
    let masked = apply_masks(features, masks)?;
    Ok(masked.layers.into_iter().map(|t| g.constant(t)).collect())
}

/// Two-layer MLP along the token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Encoder module for one layer. The mean and scale branches share nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub mu: TokenMlp,
    pub sigma: TokenMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<EncoderLayer>,
}

impl TokenMlp {
    fn init(tokens: usize, out: usize, out_scale: f64, out_bias: f64, key: RngKey) -> Self {
        let mut rng = key.rng();
        let s1 = (1.0 / tokens as f64).sqrt();
        let s2 = out_scale * (1.0 / tokens as f64).sqrt();
        let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
        TokenMlp {
            w1: Tensor::from_fn(&[tokens, tokens], |_| normal(s1)),
            b1: Tensor::zeros(&[tokens]),
            w2: Tensor::from_fn(&[tokens, out], |_| normal(s2)),
            b2: Tensor::full(&[out], out_bias),
        }
    }

    fn zeros(tokens: usize, out: usize) -> Self {
        TokenMlp {
            w1: Tensor::zeros(&[tokens, tokens]),
            b1: Tensor::zeros(&[tokens]),
            w2: Tensor::zeros(&[tokens, out]),
            b2: Tensor::zeros(&[out]),
        }
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

const MLP_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl EncoderParams {
    /// Random encoder whose scale branch starts out emitting `init_sigma`.
    pub fn init(
        depth: usize,
        tokens: usize,
        dim: usize,
        instance_tokens: usize,
        init_sigma: f64,
        key: RngKey,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let k = key.child(i as u64);
                EncoderLayer {
                    ln_gain: Tensor::full(&[dim], 1.0),
                    ln_bias: Tensor::zeros(&[dim]),
                    mu: TokenMlp::init(tokens, instance_tokens, 0.1, 0.0, k.child(0)),
                    sigma: TokenMlp::init(
                        tokens,
                        instance_tokens,
                        0.01,
                        2.0 * init_sigma.ln(),
                        k.child(1),
                    ),
                }
            })
            .collect();
        EncoderParams { layers }
    }

    /// All-zero encoder: emits a standard-normal posterior.
    pub fn zeros(depth: usize, tokens: usize, dim: usize, instance_tokens: usize) -> Self {
        let layers = (0..depth)
            .map(|_| EncoderLayer {
                ln_gain: Tensor::zeros(&[dim]),
                ln_bias: Tensor::zeros(&[dim]),
                mu: TokenMlp::zeros(tokens, instance_tokens),
                sigma: TokenMlp::zeros(tokens, instance_tokens),
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.ln_gain);
            out.push(&l.ln_bias);
            out.extend(l.mu.tensors());
            out.extend(l.sigma.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.ln_gain);
            out.push(&mut l.ln_bias);
            out.extend(l.mu.tensors_mut());
            out.extend(l.sigma.tensors_mut());
        }
        out
    }

    fn names(depth: usize, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..depth {
            out.push(format!("{prefix}.{i}.ln_gain"));
            out.push(format!("{prefix}.{i}.ln_bias"));
            for branch in ["mu", "sigma"] {
                for n in MLP_NAMES {
                    out.push(format!("{prefix}.{i}.{branch}.{n}"));
                }
            }
        }
        out
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        Self::names(self.layers.len(), prefix)
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn from_named(named: &NamedTensors, prefix: &str, depth: usize) -> Result<Self> {
        let names = Self::names(depth, prefix);
        let mut it = names.iter();
        let mut next = || find(named, it.next().unwrap()).cloned();
        let mut layers = Vec::with_capacity(depth);
        for _ in 0..depth {
            let ln_gain = next()?;
            let ln_bias = next()?;
            let mut mlp = || -> Result<TokenMlp> {
                Ok(TokenMlp {
                    w1: next()?,
                    b1: next()?,
                    w2: next()?,
                    b2: next()?,
                })
            };
            let mu = mlp()?;
            let sigma = mlp()?;
            layers.push(EncoderLayer {
                ln_gain,
                ln_bias,
                mu,
                sigma,
            });
        }
        Ok(EncoderParams { layers })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        let vars = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<Vec<_>>();
        EncoderVars {
            layers: vars.chunks(10).map(|c| c.try_into().unwrap()).collect(),
        }
    }
}

/// Encoder tensors placed on a graph, ten leaves per layer in
/// [`EncoderParams::tensors`] order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub layers: Vec<[Var; 10]>,
}

impl EncoderVars {
    pub fn leaves(&self) -> Vec<Var> {
        self.layers.iter().flatten().copied().collect()
    }

    fn mlp(g: &mut Graph, xt: Var, w: &[Var]) -> Result<Var> {
        let h = g.linear(xt, w[0], w[1])?;
        let h = g.gelu(h);
        let o = g.linear(h, w[2], w[3])?;
        g.transpose(o)
    }

    /// Mean and scale blocks `[ν×d]` for each encoded layer from the masked
    /// features `fhat[i]` of shape `[(M+1)×d]`.
    pub fn encode(&self, g: &mut Graph, fhat: &[Var]) -> Result<Vec<(Var, Var)>> {
        if fhat.len() < self.layers.len() {
            return Err(dim_err(
                "encode_psi",
                format!("{} feature layers for {} encoders", fhat.len(), self.layers.len()),
            ));
        }
        self.layers
            .iter()
            .zip(fhat)
            .map(|(w, &f)| {
                let x = g.layer_norm(f, w[0], w[1], LAYER_NORM_EPS)?;
                let xt = g.transpose(x)?;
                let mu = Self::mlp(g, xt, &w[2..6])?;
                let log_var = Self::mlp(g, xt, &w[6..10])?;
                let half = g.scale(log_var, 0.5);
                let sigma = g.exp(half)?;
                Ok((mu, sigma))
            })
            .collect()
    }
}

/// Gaussian posterior over instance prompts, both fields `[depth×ν×d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPosterior {
    pub mu: Tensor,
    pub sigma: Tensor,
}

fn stack(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Argument("cannot stack zero blocks".into()))?;
    let mut shape = vec![blocks.len()];
    shape.extend_from_slice(first.shape());
    let data = blocks.iter().flat_map(|b| b.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Splits a `[L×n×d]` stack into `L` blocks of `[n×d]`.
pub fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(dim_err("unstack", format!("expected rank 3, got {s:?}")));
    }
    let n = s[1] * s[2];
    (0..s[0])
        .map(|i| Tensor::new(vec![s[1], s[2]], t.data()[i * n..(i + 1) * n].to_vec()))
        .collect()
}

pub fn encode_psi(fhat: &FeatureStack, phi: &EncoderParams) -> Result<PromptPosterior> {
    let mut g = Graph::new();
    let ev = phi.bind(&mut g, false);
    let fv: Vec<Var> = fhat.layers.iter().map(|f| g.constant(f.clone())).collect();
    let out = ev.encode(&mut g, &fv)?;
    let mu: Vec<Tensor> = out.iter().map(|(m, _)| g.value(*m).clone()).collect();
    let sigma: Vec<Tensor> = out.iter().map(|(_, s)| g.value(*s).clone()).collect();
    Ok(PromptPosterior {
        mu: stack(&mu)?,
        sigma: stack(&sigma)?,
    })
}

pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Reparameterized draw `p = μ + Σ ⊙ ε`, returning the noise too.
pub fn sample_prompt<R: Rng + ?Sized>(psi: &PromptPosterior, rng: &mut R) -> (Tensor, Tensor) {
    let eps = standard_normal(psi.mu.shape(), rng);
    let p = reparameterize(psi, &eps);
    (p, eps)
}

pub fn reparameterize(psi: &PromptPosterior, eps: &Tensor) -> Tensor {
    let data = psi
        .mu
        .data()
        .iter()
        .zip(psi.sigma.data())
        .zip(eps.data())
        .map(|((m, s), e)| m + s * e)
        .collect();
    Tensor::from_parts(psi.mu.shape().to_vec(), data)
}

/// Per-layer `[global; instance]` blocks. Either side may be absent.
pub fn concat_global(global: Option<&Tensor>, instance: Option<&Tensor>) -> Result<Option<Tensor>> {
    match (global, instance) {
        (None, None) => Ok(None),
        (Some(t), None) | (None, Some(t)) => Ok(Some(t.clone())),
        (Some(gp), Some(ip)) => {
            let (gs, is) = (gp.shape(), ip.shape());
            if gs.len() != 3 || is.len() != 3 || gs[0] != is[0] || gs[2] != is[2] {
                return Err(dim_err("concat_global", format!("{gs:?} with {is:?}")));
            }
            let (l, kg, ki, d) = (gs[0], gs[1], is[1], gs[2]);
            let mut data = Vec::with_capacity(l * (kg + ki) * d);
            for i in 0..l {
                data.extend_from_slice(&gp.data()[i * kg * d..(i + 1) * kg * d]);
                data.extend_from_slice(&ip.data()[i * ki * d..(i + 1) * ki * d]);
            }
            Ok(Some(Tensor::from_parts(vec![l, kg + ki, d], data)))
        }
    }
}

#[cfg(test)]
mod tests;
