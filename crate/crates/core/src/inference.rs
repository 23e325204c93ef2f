//! Mask-averaged prediction and client-level accuracy.

use crate::backbone::{BackboneParams, HeadParams};
use crate::error::{Error, Result};
use crate::model::{BoundModel, GlobalModel, ModelSpec, Sample, Trainable};
use crate::numerics::{softmax, Graph, Var};
use crate::parallel;
use crate::rng::RngKey;
use crate::sivi_prompt::{masked_constants, sample_masks};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Class distribution of each mask draw.
    pub per_sample: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub class: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean written as `a₀ + Σ(aᵥ − a₀)/V`, which returns `a₀` bit for bit when
/// every draw agrees.
fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let v = rows.len() as f64;
    let first = &rows[0];
    (0..first.len())
        .map(|c| first[c] + rows[1..].iter().map(|r| r[c] - first[c]).sum::<f64>() / v)
        .collect()
}

fn instance_means(g: &mut Graph, bound: &BoundModel, spec: &ModelSpec, sample: &Sample, key: RngKey) -> Result<Vec<Var>> {
    let Some(enc) = &bound.encoder else {
        return Ok(Vec::new());
    };
    let mut rng = key.rng();
    let masks = sample_masks(enc.layers.len(), spec.vit.tokens(), spec.prompt.keep_prob, &mut rng)?;
    let fhat = masked_constants(g, &sample.pass.features, &masks)?;
    Ok(enc.encode(g, &fhat)?.into_iter().map(|(mu, _)| mu).collect())
}

/// Draws `v` mask sets (stream `key/v`), sets each prompt to its posterior
/// mean and averages the resulting class distributions. Models without an
/// encoder are deterministic and run once.
pub fn predict(
    spec: &ModelSpec,
    backbone: &BackboneParams,
    model: &GlobalModel,
    head: &HeadParams,
    sample: &Sample,
    v: usize,
    key: RngKey,
) -> Result<PredictionResult> {
    if v == 0 {
        return Err(Error::Config("inference_samples must be at least 1".into()));
    }
    let mut g = Graph::new();
    let bound = BoundModel::bind(&mut g, spec, backbone, model, head, Trainable::NONE)?;
    let draws = if bound.encoder.is_some() { v } else { 1 };
    let mut per_sample = Vec::with_capacity(draws);
    for i in 0..draws {
        let mu = instance_means(&mut g, &bound, spec, sample, key.child(i as u64))?;
        let logits = bound.logits(&mut g, &sample.pass, &mu)?;
        per_sample.push(softmax(g.value(logits)).into_data());
    }
    let mean = mean_of(&per_sample);
    let class = argmax(&mean);
    Ok(PredictionResult {
        per_sample,
        mean,
        class,
    })
}

/// Test set of one client together with the head it predicts with.
pub struct EvalClient<'a> {
    pub id: usize,
    pub test: &'a [Sample],
    pub head: &'a HeadParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub average: f64,
    pub worst: f64,
    pub per_client: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(per_client: Vec<f64>) -> Result<Self> {
        if per_client.is_empty() {
            return Err(Error::Config("nothing to evaluate".into()));
        }
        let average = per_client.iter().sum::<f64>() / per_client.len() as f64;
        let worst = per_client.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(EvalReport {
            average,
            worst,
            per_client,
        })
    }
}

/// Accuracy of one client; instance `i` of client `c` draws from `key/c/id_i`.
pub fn client_accuracy(
    spec: &ModelSpec,
    backbone: &BackboneParams,
    model: &GlobalModel,
    client: &EvalClient,
    v: usize,
    key: RngKey,
) -> Result<f64> {
    if client.test.is_empty() {
        return Err(Error::Config(format!("client {} has an empty test split", client.id)));
    }
    let ckey = key.child(client.id as u64);
    let mut correct = 0usize;
    for s in client.test {
        let p = predict(spec, backbone, model, client.head, s, v, ckey.child(s.id as u64))?;
        correct += usize::from(p.class == s.label);
    }
    Ok(correct as f64 / client.test.len() as f64)
}

/// Unweighted mean and minimum of per-client accuracies.
pub fn evaluate(
    spec: &ModelSpec,
    backbone: &BackboneParams,
    model: &GlobalModel,
    clients: &[EvalClient],
    v: usize,
    key: RngKey,
) -> Result<EvalReport> {
    if let Some(c) = clients.iter().find(|c| c.test.is_empty()) {
        return Err(Error::Config(format!("client {} has an empty test split", c.id)));
    }
    let accs = parallel::map(clients, |_, c| client_accuracy(spec, backbone, model, c, v, key))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_accuracies(accs)
}

#[cfg(test)]
mod tests;
