//! Frozen vision transformer.
//!
//! Pre-norm transformer blocks with GELU MLPs. Token row 0 is always the CLS
//! token; prompt tokens, when present, sit between CLS and the patch tokens:
//! `[c, prompts, patches]`. A layer that receives fresh prompts discards the
//! prompt outputs of the previous layer; a layer without fresh prompts passes
//! them through.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::RngKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            layers: 4,
            dim: 32,
            heads: 4,
            mlp_hidden: 64,
            channels: 3,
            image_h: 16,
            image_w: 16,
            patch_h: 4,
            patch_w: 4,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("vit.layers must be at least 1".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "vit.dim {} must be a positive multiple of vit.heads {}",
                self.dim, self.heads
            ));
        }
        if self.patch_h == 0
            || self.patch_w == 0
            || self.image_h % self.patch_h != 0
            || self.image_w % self.patch_w != 0
        {
            return fail(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.image_h, self.image_w, self.patch_h, self.patch_w
            ));
        }
        if self.channels == 0 || self.mlp_hidden == 0 || self.num_classes < 2 {
            return fail("vit.channels, vit.mlp_hidden must be positive and num_classes >= 2".into());
        }
        Ok(())
    }

    /// Patch count `M`.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_h) * (self.image_w / self.patch_w)
    }

    /// `M + 1`.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_h * self.patch_w
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_h, self.image_w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 16] = [
        "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain",
        "ln2_bias", "w1", "b1", "w2", "b2",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Backbone weights. Never modified by federated training.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: VitConfig,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    /// `[1×d]`
    pub cls: Tensor,
    /// `[M×d]`, added to patch rows only.
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

/// Linear classifier over the final CLS embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[d×C]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

impl HeadParams {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        HeadParams {
            weight: Tensor::zeros(&[dim, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn random(dim: usize, classes: usize, scale: f64, key: RngKey) -> Self {
        let mut rng = key.rng();
        HeadParams {
            weight: Tensor::from_fn(&[dim, classes], |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }

    pub fn from_named(named: &NamedTensors, prefix: &str) -> Result<Self> {
        Ok(HeadParams {
            weight: crate::checkpoint::find(named, &format!("{prefix}.weight"))?.clone(),
            bias: crate::checkpoint::find(named, &format!("{prefix}.bias"))?.clone(),
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> HeadVars {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        HeadVars {
            weight: leaf(g, &self.weight),
            bias: leaf(g, &self.bias),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    /// Logits `[C]` from a `[1×d]` representation.
    pub fn apply(&self, g: &mut Graph, rep: Var) -> Result<Var> {
        let out = g.linear(rep, self.weight, self.bias)?;
        let c = g.value(out).len();
        g.reshape(out, &[c])
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    vars: [Var; 16],
}

impl LayerVars {
    fn get(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Backbone tensors placed on a graph.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub patch_proj: Var,
    pub patch_bias: Var,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    heads: usize,
    patches: usize,
}

/// Inputs of every transformer layer from the unprompted pass:
/// `layers[i]` is the `[(M+1)×d]` input of layer `i` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
}

/// Everything the frozen backbone yields for one image, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPass {
    pub features: FeatureStack,
    /// Final-normalized CLS embedding `[1×d]`, the head input of the unprompted pass.
    pub cls_final: Tensor,
}

/// Which layers receive fresh prompt tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthMode {
    Shallow,
    Deep,
}

impl DepthMode {
    pub fn depth(self, layers: usize) -> usize {
        match self {
            DepthMode::Shallow => 1,
            DepthMode::Deep => layers,
        }
    }
}

/// Splits an image `[channels×H×W]` into flattened patches `[M×(channels·ph·pw)]`.
/// Patches are ordered row-major over the patch grid; within a patch the
/// layout is channel, then pixel row, then pixel column.
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let [c, h, w] = cfg.image_shape();
    if image.shape() != [c, h, w] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured {:?}",
            image.shape(),
            [c, h, w]
        )));
    }
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let (gh, gw) = (h / ph, w / pw);
    let pd = cfg.patch_dim();
    let px = image.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for i in 0..ph {
                    let row = (ch * h + gy * ph + i) * w + gx * pw;
                    out.extend_from_slice(&px[row..row + pw]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], out)
}

impl BackboneParams {
    /// Fixed-seed random initialization.
    pub fn init(config: &VitConfig, key: RngKey) -> Result<Self> {
        config.validate()?;
        let mut rng = key.rng();
        let d = config.dim;
        let mut normal = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        let pd = config.patch_dim();
        let patch_proj = normal(&[pd, d], (1.0 / pd as f64).sqrt());
        let cls = normal(&[1, d], 0.5);
        let pos = normal(&[config.num_patches(), d], 0.5);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let hd = config.mlp_hidden;
            layers.push(LayerParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: normal(&[d, d], (1.0 / d as f64).sqrt()),
                bq: Tensor::zeros(&[d]),
                wk: normal(&[d, d], (1.0 / d as f64).sqrt()),
                bk: Tensor::zeros(&[d]),
                wv: normal(&[d, d], (1.0 / d as f64).sqrt()),
                bv: Tensor::zeros(&[d]),
                wo: normal(&[d, d], (0.5 / d as f64).sqrt()),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: normal(&[d, hd], (1.0 / d as f64).sqrt()),
                b1: Tensor::zeros(&[hd]),
                w2: normal(&[hd, d], (0.5 / hd as f64).sqrt()),
                b2: Tensor::zeros(&[d]),
            });
        }
        Ok(BackboneParams {
            config: config.clone(),
            patch_proj,
            patch_bias: Tensor::zeros(&[d]),
            cls,
            pos,
            layers,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        })
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone.patch_proj".to_string(), &self.patch_proj),
            ("backbone.patch_bias".to_string(), &self.patch_bias),
            ("backbone.cls".to_string(), &self.cls),
            ("backbone.pos".to_string(), &self.pos),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(l.tensors()) {
                out.push((format!("backbone.layers.{i}.{name}"), t));
            }
        }
        out.push(("backbone.final_gain".to_string(), &self.final_gain));
        out.push(("backbone.final_bias".to_string(), &self.final_bias));
        out
    }

    /// Mutable views in the same order as [`Self::to_named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_proj,
            &mut self.patch_bias,
            &mut self.cls,
            &mut self.pos,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn to_named(&self) -> NamedTensors {
        self.tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    pub fn from_named(config: &VitConfig, named: &NamedTensors) -> Result<Self> {
        let mut params = Self::init(config, RngKey::new(0))?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = crate::checkpoint::find(named, name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(params)
    }

    /// SHA-256 over the serialized weights.
    pub fn fingerprint(&self) -> String {
        crate::checkpoint::fingerprint(&self.to_named())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let patch_proj = leaf(&self.patch_proj);
        let patch_bias = leaf(&self.patch_bias);
        let cls = leaf(&self.cls);
        let pos = leaf(&self.pos);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let ts = l.tensors();
                LayerVars {
                    vars: std::array::from_fn(|i| leaf(ts[i])),
                }
            })
            .collect();
        BackboneVars {
            patch_proj,
            patch_bias,
            cls,
            pos,
            layers,
            final_gain: leaf(&self.final_gain),
            final_bias: leaf(&self.final_bias),
            heads: self.config.heads,
            patches: self.config.num_patches(),
        }
    }

    /// All trainable leaves of a bound backbone, in [`Self::tensors_mut`] order.
    pub fn leaves(vars: &BackboneVars) -> Vec<Var> {
        let mut out = vec![vars.patch_proj, vars.patch_bias, vars.cls, vars.pos];
        for l in &vars.layers {
            out.extend(l.vars.iter().copied());
        }
        out.push(vars.final_gain);
        out.push(vars.final_bias);
        out
    }
}

impl BackboneVars {
    /// `[CLS; patch projections + positions]`, shape `[(M+1)×d]`.
    pub fn embed(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let proj = g.linear(patches, self.patch_proj, self.patch_bias)?;
        let with_pos = g.add(proj, self.pos)?;
        g.concat_rows(&[self.cls, with_pos])
    }

    fn block(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let lv = &self.layers[layer];
        let h = g.layer_norm(x, lv.get(0), lv.get(1), LAYER_NORM_EPS)?;
        let q = g.linear(h, lv.get(2), lv.get(3))?;
        let k = g.linear(h, lv.get(4), lv.get(5))?;
        let v = g.linear(h, lv.get(6), lv.get(7))?;
        let a = g.attention(q, k, v, self.heads)?;
        let o = g.linear(a, lv.get(8), lv.get(9))?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, lv.get(10), lv.get(11), LAYER_NORM_EPS)?;
        let h = g.linear(h, lv.get(12), lv.get(13))?;
        let h = g.gelu(h);
        let h = g.linear(h, lv.get(14), lv.get(15))?;
        g.add(x, h)
    }

    /// Runs all layers from the embedded tokens `f1`.
    ///
    /// `prompts[i]`, when present, is a `[K_i×d]` block spliced in front of the
    /// patch tokens at the input of layer `i`, replacing any prompt outputs
    /// carried over from layer `i-1`. Returns the inputs of every layer and
    /// the final-normalized CLS row.
    pub fn run(
        &self,
        g: &mut Graph,
        f1: Var,
        prompts: &[Option<Var>],
    ) -> Result<(Vec<Var>, Var)> {
        let layers = self.layers.len();
        if prompts.len() > layers {
            return Err(dim_err(
                "prompted_forward",
                format!("{} prompt blocks for {layers} layers", prompts.len()),
            ));
        }
        let d = g.value(f1).cols();
        let mut x = f1;
        let mut carried = 0usize;
        let mut inputs = Vec::with_capacity(layers);
        for i in 0..layers {
            if let Some(Some(p)) = prompts.get(i) {
                let ps = g.value(*p).shape().to_vec();
                if ps.len() != 2 || ps[1] != d {
                    return Err(dim_err(
                        "prompted_forward",
                        format!("layer {i} prompt block {ps:?}, expected width {d}"),
                    ));
                }
                let cls = g.slice_rows(x, 0, 1)?;
                let patches = g.slice_rows(x, 1 + carried, self.patches)?;
                x = g.concat_rows(&[cls, *p, patches])?;
                carried = ps[0];
            }
            inputs.push(x);
            x = self.block(g, i, x)?;
        }
        let cls = g.slice_rows(x, 0, 1)?;
        let out = g.layer_norm(cls, self.final_gain, self.final_bias, LAYER_NORM_EPS)?;
        Ok((inputs, out))
    }
}

/// Patch embedding of a single image.
pub fn patch_embed(image: &Tensor, params: &BackboneParams) -> Result<Tensor> {
    let patches = patchify(image, &params.config)?;
    let mut g = Graph::new();
    let bb = params.bind(&mut g, false);
    let pv = g.constant(patches);
    let e = bb.embed(&mut g, pv)?;
    Ok(g.value(e).clone())
}

/// Unprompted pass: layer inputs and the final CLS embedding.
pub fn clean_pass(image: &Tensor, params: &BackboneParams) -> Result<CleanPass> {
    let patches = patchify(image, &params.config)?;
    let mut g = Graph::new();
    let bb = params.bind(&mut g, false);
    let pv = g.constant(patches);
    let f1 = bb.embed(&mut g, pv)?;
    let (inputs, cls) = bb.run(&mut g, f1, &[])?;
    Ok(CleanPass {
        features: FeatureStack {
            layers: inputs.iter().map(|&v| g.value(v).clone()).collect(),
        },
        cls_final: g.value(cls).clone(),
    })
}

/// Unprompted pass returning the feature stack and the head's logits.
pub fn clean_forward(
    image: &Tensor,
    params: &BackboneParams,
    head: &HeadParams,
) -> Result<(FeatureStack, Tensor)> {
    let pass = clean_pass(image, params)?;
    let mut g = Graph::new();
    let hv = head.bind(&mut g, false);
    let rep = g.constant(pass.cls_final);
    let logits = hv.apply(&mut g, rep)?;
    Ok((pass.features, g.value(logits).clone()))
}

/// Prompted pass. `prompts[i]` is the fresh block for layer `i`, or `None`
/// to carry the previous layer's prompt outputs through.
pub fn prompted_forward(
    image: &Tensor,
    params: &BackboneParams,
    prompts: &[Option<Tensor>],
    head: &HeadParams,
) -> Result<Tensor> {
    let patches = patchify(image, &params.config)?;
    let mut g = Graph::new();
    let bb = params.bind(&mut g, false);
    let hv = head.bind(&mut g, false);
    let pv = g.constant(patches);
    let f1 = bb.embed(&mut g, pv)?;
    let pvars: Vec<Option<Var>> = prompts
        .iter()
        .map(|p| p.as_ref().map(|t| g.constant(t.clone())))
        .collect();
    let (_, cls) = bb.run(&mut g, f1, &pvars)?;
    let logits = hv.apply(&mut g, cls)?;
    Ok(g.value(logits).clone())
}

/// Per-layer prompt list for a `[K×d]` block under a depth mode: the same
/// block is offered to layer 0 only (shallow) or to every layer (deep).
pub fn layer_prompts(mode: DepthMode, layers: usize, blocks: &[Tensor]) -> Vec<Option<Tensor>> {
    let depth = mode.depth(layers);
    (0..layers)
        .map(|i| if i < depth { blocks.get(i).cloned() } else { None })
        .collect()
}
