//! Surrogate evidence bound with the mixture denominator and importance
//! reweighting, per sample and averaged over a batch.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::backbone::{BackboneParams, HeadParams};
use crate::model::{BoundModel, GlobalModel, ModelSpec, PosteriorMode, Sample, Trainable};
use crate::numerics::{kernels, Graph, Tensor, Var};
use crate::rng::{tags, RngKey};
use crate::sivi_prompt::{masked_constants, sample_masks, standard_normal};

/// Log density of `N(0, I)` over all entries of `p`.
pub fn prior_log_density(p: &Tensor) -> f64 {
    let n = p.len() as f64;
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * p.data().iter().map(|x| x * x).sum::<f64>()
}

/// Scalar pieces of one importance sample `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTerm {
    pub log_lik: f64,
    pub log_prior: f64,
    /// `log q(p^j | ψ^j)`
    pub log_q_own: f64,
    /// `log q(p^j | ψ̃^s)` for each auxiliary posterior.
    pub log_q_aux: Vec<f64>,
}

impl ImportanceTerm {
    /// `log Ω^j`: log of the equal-weight mixture over own and auxiliary components.
    pub fn log_omega(&self) -> Result<f64> {
        let mut all = Vec::with_capacity(1 + self.log_q_aux.len());
        all.push(self.log_q_own);
        all.extend_from_slice(&self.log_q_aux);
        Ok(kernels::log_sum_exp(&all)? - (all.len() as f64).ln())
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.log_lik + self.log_prior - self.log_omega()?)
    }
}

/// Log-mean-exp over the importance terms.
pub fn combine(terms: &[ImportanceTerm]) -> Result<f64> {
    let vals = terms.iter().map(|t| t.value()).collect::<Result<Vec<_>>>()?;
    Ok(kernels::log_sum_exp(&vals)? - (vals.len() as f64).ln())
}

/// Per-sample record of an objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSample {
    pub terms: Vec<ImportanceTerm>,
    pub value: f64,
}

/// Masks then noise for one posterior draw. Masks come first so that the
/// noise of a draw is unaffected by whether masking is degenerate.
fn draw_posterior(
    g: &mut Graph,
    model: &BoundModel,
    spec: &ModelSpec,
    sample: &Sample,
    key: RngKey,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let enc = model.encoder.as_ref().expect("caller checked");
    let depth = enc.layers.len();
    let tokens = spec.vit.tokens();
    let mut rng = key.rng();
    let masks = sample_masks(depth, tokens, spec.prompt.keep_prob, &mut rng)?;
    let fhat = masked_constants(g, &sample.pass.features, &masks)?;
    let out = enc.encode(g, &fhat)?;
    Ok(out.into_iter().unzip())
}

/// The per-sample bound on a graph. Stochastic draws are keyed by `key`:
/// auxiliary posterior `s` uses `key/AUX/s`, importance sample `j` uses
/// `key/MAIN/j` (mask, then noise).
pub fn surrogate_elbo_graph(
    g: &mut Graph,
    model: &BoundModel,
    spec: &ModelSpec,
    sample: &Sample,
    key: RngKey,
) -> Result<(Var, ObjectiveSample)> {
    let label = sample.label;
    let pc = &spec.prompt;
    if model.encoder.is_none() || spec.method.posterior() == PosteriorMode::Deterministic {
        let mu = match model.encoder {
            Some(_) => draw_posterior(g, model, spec, sample, key.path(&[tags::MAIN_POSTERIOR, 0]))?.0,
            None => Vec::new(),
        };
        let logits = model.logits(g, &sample.pass, &mu)?;
        let ce = g.softmax_cross_entropy(logits, label)?;
        let v = g.scale(ce, -1.0);
        let value = g.value(v).item();
        let term = ImportanceTerm {
            log_lik: value,
            log_prior: 0.0,
            log_q_own: 0.0,
            log_q_aux: vec![],
        };
        return Ok((v, ObjectiveSample { terms: vec![term], value }));
    }

    let mut aux = Vec::with_capacity(pc.aux_samples);
    for s in 0..pc.aux_samples {
        let (mu, sigma) =
            draw_posterior(g, model, spec, sample, key.path(&[tags::AUX_POSTERIOR, s as u64]))?;
        let mu = g.concat_rows(&mu)?;
        let sigma = g.concat_rows(&sigma)?;
        aux.push((mu, sigma));
    }

    let mut term_vars = Vec::with_capacity(pc.importance_samples);
    let mut terms = Vec::with_capacity(pc.importance_samples);
    for j in 0..pc.importance_samples {
        let jkey = key.path(&[tags::MAIN_POSTERIOR, j as u64]);
        let (mu, sigma) = draw_posterior(g, model, spec, sample, jkey)?;
        let mut rng = jkey.child(tags::NOISE).rng();
        let mut prompt = Vec::with_capacity(mu.len());
        for (&m, &s) in mu.iter().zip(&sigma) {
            let eps = standard_normal(g.value(m).shape(), &mut rng);
            let e = g.constant(eps);
            let se = g.mul(s, e)?;
            prompt.push(g.add(m, se)?);
        }
        let logits = model.logits(g, &sample.pass, &prompt)?;
        let ce = g.softmax_cross_entropy(logits, label)?;
        let log_lik = g.scale(ce, -1.0);

        let p_all = g.concat_rows(&prompt)?;
        let mu_all = g.concat_rows(&mu)?;
        let sigma_all = g.concat_rows(&sigma)?;
        let log_prior = g.std_normal_log_density(p_all);
        let log_q_own = g.gaussian_log_density(p_all, mu_all, sigma_all)?;
        let mut comps = vec![log_q_own];
        for &(am, asig) in &aux {
            comps.push(g.gaussian_log_density(p_all, am, asig)?);
        }
        let lse = g.log_sum_exp(&comps)?;
        let log_omega = g.add_const(lse, -((comps.len() as f64).ln()));
        let num = g.add(log_lik, log_prior)?;
        let t = g.sub(num, log_omega)?;
        term_vars.push(t);
        terms.push(ImportanceTerm {
            log_lik: g.value(log_lik).item(),
            log_prior: g.value(log_prior).item(),
            log_q_own: g.value(log_q_own).item(),
            log_q_aux: comps[1..].iter().map(|&c| g.value(c).item()).collect(),
        });
    }
    let lse = g.log_sum_exp(&term_vars)?;
    let v = g.add_const(lse, -((term_vars.len() as f64).ln()));
    let value = g.value(v).item();
    Ok((v, ObjectiveSample { terms, value }))
}

/// Batch mean of the per-sample bound on one graph. Sample `i` draws from
/// `keys[i]`.
pub fn batch_objective_graph(
    g: &mut Graph,
    model: &BoundModel,
    spec: &ModelSpec,
    batch: &[&Sample],
    keys: &[RngKey],
) -> Result<(Var, Vec<ObjectiveSample>)> {
    if batch.is_empty() {
        return Err(Error::Argument("batch objective of an empty batch".into()));
    }
    if keys.len() != batch.len() {
        return Err(Error::Argument(format!(
            "{} keys for {} samples",
            keys.len(),
            batch.len()
        )));
    }
    let mut vars = Vec::with_capacity(batch.len());
    let mut recs = Vec::with_capacity(batch.len());
    for (s, &k) in batch.iter().zip(keys) {
        let (v, r) = surrogate_elbo_graph(g, model, spec, s, k)?;
        vars.push(v);
        recs.push(r);
    }
    let total = g.add_n(&vars)?;
    Ok((g.scale(total, 1.0 / batch.len() as f64), recs))
}

/// Value-only evaluation of the per-sample bound.
pub fn surrogate_elbo(
    spec: &ModelSpec,
    backbone: &BackboneParams,
    model: &GlobalModel,
    head: &HeadParams,
    sample: &Sample,
    key: RngKey,
) -> Result<ObjectiveSample> {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, spec, backbone, model, head, Trainable::NONE)?;
    Ok(surrogate_elbo_graph(&mut g, &bound, spec, sample, key)?.1)
}

/// Value-only batch mean.
pub fn batch_objective(
    spec: &ModelSpec,
    backbone: &BackboneParams,
    model: &GlobalModel,
    head: &HeadParams,
    batch: &[&Sample],
    keys: &[RngKey],
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, spec, backbone, model, head, Trainable::NONE)?;
    let (v, _) = batch_objective_graph(&mut g, &bound, spec, batch, keys)?;
    Ok(g.value(v).item())
}

/// One-dimensional analogue of the bound, used to check the estimator
/// against numerically integrated references.
///
/// The mixing variable is a single Bernoulli(π) mask bit `b`; the posterior
/// given `b` is `N(means[b], sigmas[b]²)`, the prior is `N(0, 1)` and the
/// likelihood is `N(y; p, noise²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyModel {
    pub means: [f64; 2],
    pub sigmas: [f64; 2],
    pub keep_prob: f64,
    pub y: f64,
    pub noise: f64,
}

impl Default for ToyModel {
    fn default() -> Self {
        ToyModel {
            means: [-1.0, 1.0],
            sigmas: [0.6, 0.4],
            keep_prob: 0.5,
            y: 0.7,
            noise: 0.8,
        }
    }
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

impl ToyModel {
    pub fn log_lik(&self, p: f64) -> f64 {
        normal_log_pdf(self.y, p, self.noise)
    }

    pub fn log_q(&self, p: f64, b: usize) -> f64 {
        normal_log_pdf(p, self.means[b], self.sigmas[b])
    }

    fn draw_b<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        let m = sample_masks(1, 2, self.keep_prob, rng)?;
        Ok(m.masks[0][1] as usize)
    }

    /// One realization of the bound with `s` auxiliary and `j` importance draws.
    pub fn draw(&self, s: usize, j: usize, key: RngKey) -> Result<f64> {
        if j == 0 {
            return Err(Error::Config("importance_samples must be at least 1".into()));
        }
        let mut aux_rng = key.child(tags::AUX_POSTERIOR).rng();
        let aux = (0..s)
            .map(|_| self.draw_b(&mut aux_rng))
            .collect::<Result<Vec<_>>>()?;
        let mut main = key.child(tags::MAIN_POSTERIOR).rng();
        let mut terms = Vec::with_capacity(j);
        for _ in 0..j {
            let b = self.draw_b(&mut main)?;
            let eps: f64 = main.sample(StandardNormal);
            let p = self.means[b] + self.sigmas[b] * eps;
            terms.push(ImportanceTerm {
                log_lik: self.log_lik(p),
                log_prior: normal_log_pdf(p, 0.0, 1.0),
                log_q_own: self.log_q(p, b),
                log_q_aux: aux.iter().map(|&a| self.log_q(p, a)).collect(),
            });
        }
        combine(&terms)
    }

    /// Mean and standard error over `n` independent realizations.
    pub fn monte_carlo(&self, s: usize, j: usize, n: usize, key: RngKey) -> Result<(f64, f64)> {
        let xs = (0..n)
            .map(|i| self.draw(s, j, key.child(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_stderr(&xs))
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests;
