//! Trainable parameter groups around the frozen backbone, and the method
//! matrix that decides which groups exist.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, BackboneVars, CleanPass, HeadParams, HeadVars, VitConfig};
use crate::checkpoint::{find, NamedTensors};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::rng::{tags, RngKey};
use crate::sivi_prompt::{EncoderParams, EncoderVars, PromptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "head-tune")]
    HeadTune,
    #[serde(rename = "fedvpt")]
    FedVpt,
    #[serde(rename = "fedvpt-d")]
    FedVptDeep,
    #[serde(rename = "pfedbayespt")]
    PFedBayesPt,
    #[serde(rename = "pfedbayespt-g")]
    PFedBayesPtG,
    #[serde(rename = "pfedbayespt-d")]
    PFedBayesPtD,
}

/// How instance prompts are drawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorMode {
    /// Masked features, Gaussian draw, mixture density terms.
    SemiImplicit,
    /// The mean itself, no density terms.
    Deterministic,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::HeadTune,
        Method::FedVpt,
        Method::FedVptDeep,
        Method::PFedBayesPt,
        Method::PFedBayesPtG,
        Method::PFedBayesPtD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::HeadTune => "head-tune",
            Method::FedVpt => "fedvpt",
            Method::FedVptDeep => "fedvpt-d",
            Method::PFedBayesPt => "pfedbayespt",
            Method::PFedBayesPtG => "pfedbayespt-g",
            Method::PFedBayesPtD => "pfedbayespt-d",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {s:?}; expected one of {names:?}"))
            })
    }

    /// Baselines that keep the classifier on the client.
    pub fn local_head(self) -> bool {
        matches!(self, Method::FedVpt | Method::FedVptDeep)
    }

    pub fn is_bayesian(self) -> bool {
        matches!(
            self,
            Method::PFedBayesPt | Method::PFedBayesPtG | Method::PFedBayesPtD
        )
    }

    pub fn posterior(self) -> PosteriorMode {
        match self {
            Method::PFedBayesPtD => PosteriorMode::Deterministic,
            _ => PosteriorMode::SemiImplicit,
        }
    }

    /// Prompt layout this method actually uses, derived from the shared
    /// configuration. Baseline prompts reuse the full per-layer budget.
    pub fn prompt_config(self, cfg: &PromptConfig, layers: usize) -> PromptConfig {
        let mut out = cfg.clone();
        match self {
            Method::HeadTune => {
                out.global_tokens = 0;
                out.global_depth = 0;
                out.instance_tokens = 0;
                out.instance_depth = 0;
            }
            Method::FedVpt | Method::FedVptDeep => {
                out.global_tokens = cfg.global_tokens + cfg.instance_tokens;
                out.global_depth = if self == Method::FedVpt { 1 } else { layers };
                out.instance_tokens = 0;
                out.instance_depth = 0;
            }
            Method::PFedBayesPt => {}
            Method::PFedBayesPtG => {
                out.keep_prob = 1.0;
                out.aux_samples = 0;
            }
            Method::PFedBayesPtD => {
                out.keep_prob = 1.0;
                out.aux_samples = 0;
                out.importance_samples = 1;
                out.inference_samples = 1;
            }
        }
        out
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Static description of a model: backbone shape, method, and the method's
/// effective prompt layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub vit: VitConfig,
    pub method: Method,
    pub prompt: PromptConfig,
}

impl ModelSpec {
    pub fn new(vit: &VitConfig, method: Method, prompt: &PromptConfig) -> Result<Self> {
        vit.validate()?;
        prompt.validate(vit)?;
        Ok(ModelSpec {
            vit: vit.clone(),
            method,
            prompt: method.prompt_config(prompt, vit.layers),
        })
    }

    pub fn uses_backbone(&self) -> bool {
        self.method != Method::HeadTune
    }
}

/// The parameter groups that cross the wire. Groups a method does not use are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    /// `[global_depth × K̄ × d]`
    pub global_prompt: Option<Tensor>,
    pub head: Option<HeadParams>,
    pub encoder: Option<EncoderParams>,
}

pub const GLOBAL_PROMPT_INIT_STD: f64 = 0.1;

impl GlobalModel {
    pub fn init(spec: &ModelSpec, key: RngKey) -> Self {
        let key = key.child(tags::INIT);
        let d = spec.vit.dim;
        let p = &spec.prompt;
        let global_prompt = p.has_global().then(|| {
            let mut rng = key.child(0).rng();
            Tensor::from_fn(&[p.global_depth, p.global_tokens, d], |_| {
                GLOBAL_PROMPT_INIT_STD * rng.sample::<f64, _>(StandardNormal)
            })
        });
        let head = (!spec.method.local_head()).then(|| HeadParams::zeros(d, spec.vit.num_classes));
        let encoder = (spec.method.is_bayesian() && p.has_instance()).then(|| {
            EncoderParams::init(
                p.instance_depth,
                spec.vit.tokens(),
                d,
                p.instance_tokens,
                p.init_sigma,
                key.child(1),
            )
        });
        GlobalModel {
            global_prompt,
            head,
            encoder,
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        let mut out = Vec::new();
        if let Some(p) = &self.global_prompt {
            out.push(("global_prompt".to_string(), p.clone()));
        }
        if let Some(h) = &self.head {
            out.extend(h.to_named("head"));
        }
        if let Some(e) = &self.encoder {
            out.extend(e.to_named("encoder"));
        }
        out
    }

    /// Reads back the groups `spec` says exist.
    pub fn from_named(spec: &ModelSpec, named: &NamedTensors) -> Result<Self> {
        let template = GlobalModel::init(spec, RngKey::new(0));
        let out = GlobalModel {
            global_prompt: match template.global_prompt {
                Some(_) => Some(find(named, "global_prompt")?.clone()),
                None => None,
            },
            head: match template.head {
                Some(_) => Some(HeadParams::from_named(named, "head")?),
                None => None,
            },
            encoder: match &template.encoder {
                Some(e) => Some(EncoderParams::from_named(named, "encoder", e.layers.len())?),
                None => None,
            },
        };
        if !out.same_structure(&template) {
            return Err(Error::Format("stored model does not match the configured shapes".into()));
        }
        Ok(out)
    }

    /// Every tensor in wire order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some(p) = &self.global_prompt {
            out.push(p);
        }
        if let Some(h) = &self.head {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        if let Some(e) = &self.encoder {
            out.extend(e.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.global_prompt {
            out.push(p);
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        if let Some(e) = &mut self.encoder {
            out.extend(e.tensors_mut());
        }
        out
    }

    /// Same groups present with the same tensor shapes.
    pub fn same_structure(&self, other: &GlobalModel) -> bool {
        self.global_prompt.is_some() == other.global_prompt.is_some()
            && self.head.is_some() == other.head.is_some()
            && self.encoder.is_some() == other.encoder.is_some()
            && self.tensors().len() == other.tensors().len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// A training or test instance with its frozen-backbone pass precomputed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    pub pass: Arc<CleanPass>,
}

/// Which parameter groups receive gradients on a graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct Trainable {
    pub global_prompt: bool,
    pub head: bool,
    pub encoder: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        global_prompt: false,
        head: false,
        encoder: false,
    };
    pub const ALL: Trainable = Trainable {
        global_prompt: true,
        head: true,
        encoder: true,
    };
}

/// Model tensors placed on a graph. The head is whichever classifier the
/// client uses (the shared one or its own).
pub struct BoundModel {
    pub backbone: Option<BackboneVars>,
    pub global_prompt: Option<Var>,
    /// Per-layer `[K̄×d]` views of the global prompt.
    global_blocks: Vec<Var>,
    pub head: HeadVars,
    pub encoder: Option<EncoderVars>,
}

impl BoundModel {
    pub fn bind(
        g: &mut Graph,
        spec: &ModelSpec,
        backbone: &BackboneParams,
        model: &GlobalModel,
        head: &HeadParams,
        trainable: Trainable,
    ) -> Result<Self> {
        let leaf = |g: &mut Graph, t: &Tensor, train: bool| {
            if train {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut leaves = Vec::new();
        if let Some(p) = &model.global_prompt {
            leaves.push(leaf(g, p, trainable.global_prompt));
        }
        leaves.push(leaf(g, &head.weight, trainable.head));
        leaves.push(leaf(g, &head.bias, trainable.head));
        if let Some(e) = &model.encoder {
            for t in e.tensors() {
                leaves.push(leaf(g, t, trainable.encoder));
            }
        }
        Self::from_leaves(g, spec, backbone, model, &leaves)
    }

    /// Wires already-placed leaves, given in [`Self::leaves`] order, into a
    /// model shaped like `layout`.
    pub fn from_leaves(
        g: &mut Graph,
        spec: &ModelSpec,
        backbone: &BackboneParams,
        layout: &GlobalModel,
        leaves: &[Var],
    ) -> Result<Self> {
        let want = layout.global_prompt.is_some() as usize
            + 2
            + layout.encoder.as_ref().map_or(0, |e| 10 * e.layers.len());
        if leaves.len() != want {
            return Err(Error::Argument(format!(
                "{} leaves for a model with {want}",
                leaves.len()
            )));
        }
        let bb = spec.uses_backbone().then(|| backbone.bind(g, false));
        let mut it = leaves.iter().copied();
        let (global_prompt, global_blocks) = match &layout.global_prompt {
            Some(_) => {
                let v = it.next().unwrap();
                let s = g.value(v).shape().to_vec();
                let flat = g.reshape(v, &[s[0] * s[1], s[2]])?;
                let blocks = (0..s[0])
                    .map(|i| g.slice_rows(flat, i * s[1], s[1]))
                    .collect::<Result<Vec<_>>>()?;
                (Some(v), blocks)
            }
            None => (None, Vec::new()),
        };
        let head = HeadVars {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        };
        let rest: Vec<Var> = it.collect();
        let encoder = layout.encoder.as_ref().map(|_| EncoderVars {
            layers: rest.chunks(10).map(|c| c.try_into().unwrap()).collect(),
        });
        Ok(BoundModel {
            backbone: bb,
            global_prompt,
            global_blocks,
            head,
            encoder,
        })
    }

    /// Trainable leaves grouped as (shared groups in wire order, head).
    pub fn leaves(&self) -> Vec<Var> {
        let mut out = Vec::new();
        if let Some(p) = self.global_prompt {
            out.push(p);
        }
        out.push(self.head.weight);
        out.push(self.head.bias);
        if let Some(e) = &self.encoder {
            out.extend(e.leaves());
        }
        out
    }

    /// Logits for one instance given per-layer instance blocks `[ν×d]`.
    /// Without a backbone (head-only tuning) the cached clean CLS is used.
    pub fn logits(&self, g: &mut Graph, pass: &CleanPass, instance: &[Var]) -> Result<Var> {
        let Some(bb) = &self.backbone else {
            let rep = g.constant(pass.cls_final.clone());
            return self.head.apply(g, rep);
        };
        let layers = bb.layers.len();
        let depth = self.global_blocks.len().max(instance.len());
        let mut prompts = Vec::with_capacity(layers);
        for i in 0..depth {
            let block = match (self.global_blocks.get(i), instance.get(i)) {
                (Some(&gb), Some(&ib)) => Some(g.concat_rows(&[gb, ib])?),
                (Some(&b), None) | (None, Some(&b)) => Some(b),
                (None, None) => None,
            };
            prompts.push(block);
        }
        let f1 = g.constant(pass.features.layers[0].clone());
        let (_, cls) = bb.run(g, f1, &prompts)?;
        self.head.apply(g, cls)
    }
}
