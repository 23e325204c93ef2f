//! Finite-difference checks of every differentiable piece: graph
//! primitives, the prompted forward pass, and the full surrogate objective
//! with its stochastic draws frozen.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, BackboneParams, HeadParams, VitConfig};
use crate::error::Result;
use crate::model::{BoundModel, GlobalModel, Method, ModelSpec, Sample};
use crate::numerics::{grad_check, GradCheckConfig, Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::objective::surrogate_elbo_graph;
use crate::rng::RngKey;
use crate::sivi_prompt::PromptConfig;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Primitive,
    Forward,
    Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub name: String,
    pub kind: CheckKind,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub coords: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteConfig {
    pub vit: VitConfig,
    pub prompt: PromptConfig,
    pub seed: u64,
    /// Coordinates probed per tensor in the composite checks.
    pub max_coords: usize,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        GradSuiteConfig {
            vit: VitConfig::default(),
            prompt: PromptConfig::default(),
            seed: 0,
            max_coords: 6,
        }
    }
}

fn randn(shape: &[usize], key: RngKey, scale: f64) -> Tensor {
    let mut rng = key.rng();
    Tensor::from_fn(shape, |_| scale * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal))
}

type Loss = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// `Σ out ⊙ w` for a fixed random `w`, so no gradient entry is trivially symmetric.
fn weighted(w: Tensor) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    move |g: &mut Graph, out: Var| {
        let wv = g.constant(w.clone());
        let m = g.mul(out, wv)?;
        Ok(g.sum_all(m))
    }
}

fn primitives(key: RngKey) -> Vec<(&'static str, Vec<Tensor>, Loss)> {
    let r = |i: u64, shape: &[usize]| randn(shape, key.child(i), 1.0);
    let mut out: Vec<(&'static str, Vec<Tensor>, Loss)> = Vec::new();
    let w34 = weighted(r(100, &[3, 4]));
    out.push(("matmul", vec![r(1, &[3, 5]), r(2, &[5, 4])], Box::new(move |g, p| {
        let y = g.matmul(p[0], p[1])?;
        w34(g, y)
    })));
    let w34 = weighted(r(101, &[3, 4]));
    out.push(("linear", vec![r(3, &[3, 5]), r(4, &[5, 4]), r(5, &[4])], Box::new(move |g, p| {
        let y = g.linear(p[0], p[1], p[2])?;
        w34(g, y)
    })));
    for (i, name) in ["add", "sub", "mul"].into_iter().enumerate() {
        let w = weighted(r(110 + i as u64, &[2, 3]));
        out.push((name, vec![r(6, &[2, 3]), r(7, &[2, 3])], Box::new(move |g, p| {
            let y = match name {
                "add" => g.add(p[0], p[1])?,
                "sub" => g.sub(p[0], p[1])?,
                _ => g.mul(p[0], p[1])?,
            };
            w(g, y)
        })));
    }
    let w = weighted(r(120, &[2, 3]));
    out.push(("add_n", vec![r(8, &[2, 3]), r(9, &[2, 3]), r(10, &[2, 3])], Box::new(move |g, p| {
        let y = g.add_n(p)?;
        w(g, y)
    })));
    let w = weighted(r(121, &[2, 3]));
    out.push(("scale", vec![r(11, &[2, 3])], Box::new(move |g, p| {
        let y = g.scale(p[0], -1.7);
        w(g, y)
    })));
    let w = weighted(r(122, &[2, 3]));
    out.push(("add_const", vec![r(12, &[2, 3])], Box::new(move |g, p| {
        let y = g.add_const(p[0], 0.4);
        w(g, y)
    })));
    let w = weighted(r(123, &[2, 3]));
    out.push(("exp", vec![r(13, &[2, 3])], Box::new(move |g, p| {
        let y = g.exp(p[0])?;
        w(g, y)
    })));
    let w = weighted(r(124, &[2, 5]));
    out.push(("gelu", vec![r(14, &[2, 5])], Box::new(move |g, p| {
        let y = g.gelu(p[0]);
        w(g, y)
    })));
    let w = weighted(r(125, &[3, 6]));
    out.push(("layer_norm", vec![r(15, &[3, 6]), r(16, &[6]), r(17, &[6])], Box::new(move |g, p| {
        let y = g.layer_norm(p[0], p[1], p[2], LAYER_NORM_EPS)?;
        w(g, y)
    })));
    let w = weighted(r(126, &[4, 2]));
    out.push(("transpose", vec![r(18, &[2, 4])], Box::new(move |g, p| {
        let y = g.transpose(p[0])?;
        w(g, y)
    })));
    let w = weighted(r(127, &[5, 8]));
    out.push(("attention", vec![r(19, &[5, 8]), r(20, &[5, 8]), r(21, &[5, 8])], Box::new(move |g, p| {
        let y = g.attention(p[0], p[1], p[2], 2)?;
        w(g, y)
    })));
    let w = weighted(r(128, &[5, 3]));
    out.push(("concat_rows", vec![r(22, &[2, 3]), r(23, &[3, 3])], Box::new(move |g, p| {
        let y = g.concat_rows(&[p[1], p[0]])?;
        w(g, y)
    })));
    let w = weighted(r(129, &[2, 3]));
    out.push(("slice_rows", vec![r(24, &[4, 3])], Box::new(move |g, p| {
        let y = g.slice_rows(p[0], 1, 2)?;
        w(g, y)
    })));
    let w = weighted(r(130, &[3, 3]));
    out.push(("mask_rows", vec![r(25, &[3, 3])], Box::new(move |g, p| {
        let y = g.mask_rows(p[0], &[1.0, 0.0, 1.0])?;
        w(g, y)
    })));
    let w = weighted(r(131, &[6]));
    out.push(("reshape", vec![r(26, &[2, 3])], Box::new(move |g, p| {
        let y = g.reshape(p[0], &[6])?;
        w(g, y)
    })));
    out.push(("sum_all", vec![r(27, &[2, 3])], Box::new(|g, p| Ok(g.sum_all(p[0])))));
    out.push(("softmax_cross_entropy", vec![r(28, &[6])], Box::new(|g, p| g.softmax_cross_entropy(p[0], 2))));
    let sigma = r(29, &[2, 3]).map(|v| 0.5 + v.abs());
    out.push((
        "gaussian_log_density",
        vec![r(30, &[2, 3]), r(31, &[2, 3]), sigma],
        Box::new(|g, p| g.gaussian_log_density(p[0], p[1], p[2])),
    ));
    out.push(("std_normal_log_density", vec![r(32, &[2, 3])], Box::new(|g, p| Ok(g.std_normal_log_density(p[0])))));
    out.push((
        "log_sum_exp",
        vec![Tensor::scalar(0.3), Tensor::scalar(-1.0), Tensor::scalar(2.0)],
        Box::new(|g, p| g.log_sum_exp(p)),
    ));
    out
}

fn row(name: &str, kind: CheckKind, tolerance: f64, loss: impl Fn(&mut Graph, &[Var]) -> Result<Var>, params: &[Tensor], cap: Option<usize>) -> Result<GradCheckRow> {
    let r = grad_check(
        loss,
        params,
        match kind {
            CheckKind::Primitive => GradCheckConfig {
                max_coords_per_tensor: cap,
                ..GradCheckConfig::default()
            },
            // composite losses are large sums, so a two-point difference at a
            // small step loses the small coordinates to rounding
            _ => GradCheckConfig {
                max_coords_per_tensor: cap,
                rel_step: 1e-3,
                five_point: true,
                ..GradCheckConfig::default()
            },
        },
    )?;
    Ok(GradCheckRow {
        name: name.into(),
        kind,
        max_rel_err: r.max_rel_err,
        tolerance,
        coords: r.coords_checked,
    })
}

/// Writes `gradcheck.csv` (name, kind, max_rel_err, tolerance, coords) into `dir`.
pub fn write_csv(dir: &Path, rows: &[GradCheckRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every check; rows are returned whether or not they pass.
pub fn run(cfg: &GradSuiteConfig) -> Result<Vec<GradCheckRow>> {
    let key = RngKey::new(cfg.seed);
    let mut rows = Vec::new();
    for (name, params, loss) in primitives(key.child(1)) {
        rows.push(row(name, CheckKind::Primitive, PRIMITIVE_TOL, loss, &params, None)?);
    }

    let vit = &cfg.vit;
    let backbone = BackboneParams::init(vit, key.child(2))?;
    let image = randn(&vit.image_shape(), key.child(3), 1.0);
    let patches = patchify(&image, vit)?;
    let cap = Some(cfg.max_coords);

    // prompted forward: a fresh block at every layer plus the head
    let blocks: Vec<Tensor> = (0..vit.layers)
        .map(|i| randn(&[2, vit.dim], key.path(&[4, i as u64]), 0.3))
        .collect();
    let head = HeadParams::random(vit.dim, vit.num_classes, 0.3, key.child(5));
    let mut params = blocks.clone();
    params.push(head.weight.clone());
    params.push(head.bias.clone());
    let layers = vit.layers;
    let fwd = |g: &mut Graph, p: &[Var]| -> Result<Var> {
        let bb = backbone.bind(g, false);
        let pv = g.constant(patches.clone());
        let f1 = bb.embed(g, pv)?;
        let prompts: Vec<Option<Var>> = p[..layers].iter().map(|&v| Some(v)).collect();
        let (_, cls) = bb.run(g, f1, &prompts)?;
        let hv = crate::backbone::HeadVars {
            weight: p[layers],
            bias: p[layers + 1],
        };
        let logits = hv.apply(g, cls)?;
        g.softmax_cross_entropy(logits, 1)
    };
    rows.push(row("prompted_forward", CheckKind::Forward, COMPOSITE_TOL, fwd, &params, cap)?);

    // full objective with draws frozen by a fixed key
    let spec = ModelSpec::new(vit, Method::PFedBayesPt, &cfg.prompt)?;
    let mut model = GlobalModel::init(&spec, key.child(6));
    model.head = Some(HeadParams::random(vit.dim, vit.num_classes, 0.3, key.child(7)));
    let pass = crate::backbone::clean_pass(&image, &backbone)?;
    let sample = Sample {
        id: 0,
        label: 1,
        pass: std::sync::Arc::new(pass),
    };
    let draw = key.child(8);
    let mut params: Vec<Tensor> = Vec::new();
    params.extend(model.global_prompt.clone());
    let h = model.head.clone().expect("shared head");
    params.push(h.weight);
    params.push(h.bias);
    if let Some(e) = &model.encoder {
        params.extend(e.tensors().into_iter().cloned());
    }
    let obj = |g: &mut Graph, p: &[Var]| -> Result<Var> {
        let bound = BoundModel::from_leaves(g, &spec, &backbone, &model, p)?;
        Ok(surrogate_elbo_graph(g, &bound, &spec, &sample, draw)?.0)
    };
    rows.push(row("surrogate_elbo", CheckKind::Objective, COMPOSITE_TOL, obj, &params, cap)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    #[test]
    fn every_check_passes_on_a_tiny_model() {
        let cfg = GradSuiteConfig {
            vit: testutil::tiny_vit(),
            prompt: PromptConfig {
                instance_tokens: 1,
                global_tokens: 2,
                global_depth: 2,
                instance_depth: 2,
                aux_samples: 2,
                importance_samples: 2,
                keep_prob: 0.7,
                init_sigma: 0.5,
                ..PromptConfig::default()
            },
            seed: 3,
            max_coords: 4,
        };
        let rows = run(&cfg).unwrap();
        assert_eq!(rows.iter().filter(|r| r.kind == CheckKind::Primitive).count(), 22);
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }
}
