//! Centralized warm-up of the backbone on an upstream synthetic task, run
//! once before federation so the frozen features carry some structure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, BackboneParams, HeadParams, VitConfig};
use crate::datagen::{generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::parallel;
use crate::rng::{tags, RngKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmupConfig {
    /// Upstream data: its own templates and styles, unrelated to the
    /// downstream classes.
    pub data: SyntheticSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            data: SyntheticSpec {
                num_domains: 12,
                num_classes: 20,
                samples_per_domain_class: 4,
                template_seed: 1001,
                style_seed: 1002,
                ..SyntheticSpec::default()
            },
            epochs: 6,
            batch_size: 32,
            lr: 3e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    /// Mean cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy during the last epoch.
    pub final_accuracy: f64,
}

/// Adam state for a flat list of tensors.
struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[&mut Tensor], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
        }
    }

    /// Descent step on `grads`.
    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Loss and gradients (backbone tensors, then head weight and bias) for one image.
fn sample_grads(backbone: &BackboneParams, head: &HeadParams, patches: &Tensor, label: usize) -> Result<(f64, bool, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g, true);
    let hv = head.bind(&mut g, true);
    let pv = g.constant(patches.clone());
    let f1 = bb.embed(&mut g, pv)?;
    let (_, cls) = bb.run(&mut g, f1, &[])?;
    let logits = hv.apply(&mut g, cls)?;
    let correct = crate::inference::argmax(g.value(logits).data()) == label;
    let loss = g.softmax_cross_entropy(logits, label)?;
    let grads = g.backward(loss)?;
    let mut leaves = BackboneParams::leaves(&bb);
    leaves.push(hv.weight);
    leaves.push(hv.bias);
    Ok((
        g.value(loss).item(),
        correct,
        leaves.into_iter().map(|v| grads.get_or_zeros(v, &g)).collect(),
    ))
}

/// Trains backbone and a throwaway head with Adam on the upstream task and
/// returns the backbone. The head is discarded.
pub fn warm_up(vit: &VitConfig, init: &BackboneParams, cfg: &WarmupConfig) -> Result<(BackboneParams, WarmupReport)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("warmup epochs and batch size must be positive".into()));
    }
    let data = SyntheticSpec {
        channels: vit.channels,
        height: vit.image_h,
        width: vit.image_w,
        ..cfg.data.clone()
    };
    let ds = generate(&data)?;
    let patches: Vec<Tensor> = ds
        .images
        .iter()
        .map(|im| patchify(im, vit))
        .collect::<Result<_>>()?;
    let mut backbone = init.clone();
    let key = RngKey::new(cfg.seed).child(tags::WARMUP);
    let mut head = HeadParams::random(vit.dim, data.num_classes, 0.02, key.child(0));
    let mut adam = {
        let mut all = backbone.tensors_mut();
        all.push(&mut head.weight);
        all.push(&mut head.bias);
        Adam::new(&all, cfg.lr)
    };
    let mut report = WarmupReport {
        epoch_loss: Vec::new(),
        final_accuracy: 0.0,
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut order = idx.clone();
        order.shuffle(&mut key.path(&[1, epoch as u64]).rng());
        let (mut total, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let per = parallel::map(batch, |_, &i| sample_grads(&backbone, &head, &patches[i], ds.labels[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut sum: Vec<Tensor> = per[0].2.iter().map(|t| Tensor::zeros(t.shape())).collect();
            for (loss, ok, gr) in &per {
                total += loss;
                hits += usize::from(*ok);
                for (s, g) in sum.iter_mut().zip(gr) {
                    s.axpy(1.0 / batch.len() as f64, g)?;
                }
            }
            let mut all = backbone.tensors_mut();
            all.push(&mut head.weight);
            all.push(&mut head.bias);
            adam.step(all, &sum);
        }
        report.epoch_loss.push(total / ds.len() as f64);
        report.final_accuracy = hits as f64 / ds.len() as f64;
    }
    Ok((backbone, report))
}
