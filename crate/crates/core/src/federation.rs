//! Simulated federated training: client selection, local ascent steps,
//! weighted aggregation and synchronization, for every method in the matrix.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, HeadParams};
use crate::checkpoint::{self, find, NamedTensors};
use crate::error::{Error, Result};
use crate::inference::{evaluate, EvalClient, EvalReport};
use crate::model::{BoundModel, GlobalModel, Method, ModelSpec, Sample, Trainable};
use crate::numerics::{Graph, Tensor};
use crate::objective::batch_objective_graph;
use crate::parallel;
use crate::rng::{tags, RngKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    DataSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Step size for the global prompt and the classifier.
    pub lr: f64,
    /// Step size for the encoder.
    pub lr_encoder: f64,
    pub participation: f64,
    pub weighting: Weighting,
    /// Evaluate every this many rounds (the final round is always evaluated).
    pub eval_every: usize,
    /// Evaluate every round once this many rounds remain.
    pub eval_last: usize,
    /// Head fine-tuning epochs for clients unseen during training.
    pub adapt_epochs: usize,
    /// Stop after the first evaluated round whose average accuracy reaches
    /// this value.
    pub target_average: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            rounds: 100,
            local_epochs: 5,
            batch_size: 32,
            lr: 0.01,
            lr_encoder: 0.001,
            participation: 1.0,
            weighting: Weighting::DataSize,
            eval_every: 1,
            eval_last: 10,
            adapt_epochs: 5,
            target_average: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.local_epochs == 0 {
            return fail("train.local_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("train.lr must be non-negative");
        }
        if !(self.lr_encoder >= 0.0 && self.lr_encoder.is_finite()) {
            return fail("train.lr_encoder must be non-negative");
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail("train.participation must lie in (0, 1]");
        }
        if self.eval_every == 0 {
            return fail("train.eval_every must be at least 1");
        }
        Ok(())
    }

    fn evaluates(&self, round: usize) -> bool {
        round % self.eval_every == 0 || round == self.rounds || round + self.eval_last > self.rounds
    }
}

/// Everything the simulation shares read-only across clients.
#[derive(Debug, Clone)]
pub struct FedContext {
    pub spec: ModelSpec,
    pub backbone: Arc<BackboneParams>,
    pub hyper: Hyperparams,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Last model synchronized from the server.
    pub model: GlobalModel,
    /// Classifier kept on the client by methods that do not share heads, and
    /// by clients adapted after training.
    pub local_head: Option<HeadParams>,
}

impl ClientState {
    pub fn new(id: usize, train: Vec<Sample>, test: Vec<Sample>, model: &GlobalModel, spec: &ModelSpec) -> Self {
        let local_head = spec
            .method
            .local_head()
            .then(|| HeadParams::zeros(spec.vit.dim, spec.vit.num_classes));
        ClientState {
            id,
            train,
            test,
            model: model.clone(),
            local_head,
        }
    }

    /// The classifier this client predicts with.
    pub fn head(&self) -> Result<&HeadParams> {
        self.local_head
            .as_ref()
            .or(self.model.head.as_ref())
            .ok_or_else(|| Error::Contract(format!("client {} has no classifier", self.id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub model: GlobalModel,
    pub local_head: Option<HeadParams>,
    pub samples: usize,
}

/// Uniform sample without replacement of `round(fraction·n)` clients, sorted.
pub fn select_clients(n: usize, fraction: f64, key: RngKey) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("participation must lie in (0, 1], got {fraction}")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "participation {fraction} of {n} clients selects nobody"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    if k < n {
        let (chosen, _) = ids.partial_shuffle(&mut key.rng(), k);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        ids = chosen;
    }
    Ok(ids)
}

fn trainable(method: Method) -> Trainable {
    match method {
        Method::HeadTune => Trainable {
            global_prompt: false,
            head: true,
            encoder: false,
        },
        _ => Trainable::ALL,
    }
}

/// Runs ascent steps on the batch objective. `groups` chooses which
/// parameters move; the head moves at `lr`, the prompt at `lr`, the encoder
/// at `lr_encoder`.
#[allow(clippy::too_many_arguments)]
fn ascend(
    ctx: &FedContext,
    model: &mut GlobalModel,
    head: &mut HeadParams,
    train: &[Sample],
    epochs: usize,
    groups: Trainable,
    key: RngKey,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("client has an empty training shard".into()));
    }
    let h = &ctx.hyper;
    for epoch in 0..epochs {
        let ekey = key.child(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ekey.child(tags::SHUFFLE).rng());
        for chunk in order.chunks(h.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let keys: Vec<RngKey> = batch.iter().map(|s| ekey.child(s.id as u64)).collect();
            let mut g = Graph::new();
            let bound = BoundModel::bind(&mut g, &ctx.spec, &ctx.backbone, model, head, groups)?;
            let (obj, _) = batch_objective_graph(&mut g, &bound, &ctx.spec, &batch, &keys)?;
            let grads = g.backward(obj)?;
            if let (Some(v), Some(p)) = (bound.global_prompt, model.global_prompt.as_mut()) {
                if let Some(gr) = grads.get(v) {
                    p.axpy(h.lr, gr)?;
                }
            }
            if let Some(gr) = grads.get(bound.head.weight) {
                head.weight.axpy(h.lr, gr)?;
            }
            if let Some(gr) = grads.get(bound.head.bias) {
                head.bias.axpy(h.lr, gr)?;
            }
            if let (Some(ev), Some(enc)) = (&bound.encoder, model.encoder.as_mut()) {
                for (v, t) in ev.leaves().into_iter().zip(enc.tensors_mut()) {
                    if let Some(gr) = grads.get(v) {
                        t.axpy(h.lr_encoder, gr)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// `E` epochs of mini-batch ascent starting from the client's synchronized model.
/// Draws are keyed by `(seed, round, client, epoch, sample)`.
pub fn local_update(ctx: &FedContext, client: &ClientState, round: usize) -> Result<ClientUpdate> {
    let mut model = client.model.clone();
    let mut head = client.head()?.clone();
    let key = RngKey::new(ctx.seed).path(&[tags::LOCAL, round as u64, client.id as u64]);
    ascend(
        ctx,
        &mut model,
        &mut head,
        &client.train,
        ctx.hyper.local_epochs,
        trainable(ctx.spec.method),
        key,
    )?;
    let local_head = if ctx.spec.method.local_head() {
        Some(head)
    } else {
        model.head = Some(head);
        None
    };
    Ok(ClientUpdate {
        client: client.id,
        model,
        local_head,
        samples: client.train.len(),
    })
}

/// Elementwise weighted average of every shared tensor.
pub fn aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<GlobalModel> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    for u in &updates[1..] {
        if !u.model.same_structure(&first.model) {
            return Err(Error::Protocol(format!(
                "client {} sent parameter groups that differ from client {}",
                u.client, first.client
            )));
        }
    }
    let raw: Vec<f64> = updates
        .iter()
        .map(|u| match weighting {
            Weighting::DataSize => u.samples as f64,
            Weighting::Uniform => 1.0,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::Protocol("aggregation weights sum to zero".into()));
    }
    let mut out = first.model.clone();
    for t in out.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    for (u, w) in updates.iter().zip(&raw) {
        for (acc, t) in out.tensors_mut().into_iter().zip(u.model.tensors()) {
            acc.axpy(w / total, t)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub average: f64,
    pub worst: f64,
    pub per_client: Vec<f64>,
    /// Fingerprint of the frozen backbone after the round.
    pub backbone_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainingResult {
    pub history: Vec<RoundMetrics>,
    pub model: GlobalModel,
}

/// Server state at the end of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundCheckpoint {
    pub round: usize,
    pub model: GlobalModel,
    pub local_heads: Vec<Option<HeadParams>>,
}

impl RoundCheckpoint {
    pub fn to_named(&self) -> NamedTensors {
        let mut out = vec![("meta.round".to_string(), Tensor::scalar(self.round as f64))];
        out.push((
            "meta.clients".to_string(),
            Tensor::scalar(self.local_heads.len() as f64),
        ));
        out.extend(self.model.to_named());
        for (k, h) in self.local_heads.iter().enumerate() {
            if let Some(h) = h {
                out.extend(h.to_named(&format!("client.{k}.head")));
            }
        }
        out
    }

    pub fn from_named(spec: &ModelSpec, named: &NamedTensors) -> Result<Self> {
        let round = find(named, "meta.round")?.item() as usize;
        let clients = find(named, "meta.clients")?.item() as usize;
        let model = GlobalModel::from_named(spec, named)?;
        let local_heads = (0..clients)
            .map(|k| {
                let prefix = format!("client.{k}.head");
                match find(named, &format!("{prefix}.weight")) {
                    Ok(_) => HeadParams::from_named(named, &prefix).map(Some),
                    Err(_) => Ok(None),
                }
            })
            .collect::<Result<_>>()?;
        Ok(RoundCheckpoint {
            round,
            model,
            local_heads,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_named())
    }

    pub fn load(spec: &ModelSpec, path: &Path) -> Result<Self> {
        Self::from_named(spec, &checkpoint::load(path)?)
    }
}

/// Per-client accuracy with each client's own classifier.
pub fn evaluate_clients(ctx: &FedContext, clients: &[ClientState], model: &GlobalModel, key: RngKey) -> Result<EvalReport> {
    let eval: Vec<EvalClient> = clients
        .iter()
        .map(|c| {
            Ok(EvalClient {
                id: c.id,
                test: &c.test,
                head: c.head()?,
            })
        })
        .collect::<Result<_>>()?;
    evaluate(
        &ctx.spec,
        &ctx.backbone,
        model,
        &eval,
        ctx.spec.prompt.inference_samples,
        key,
    )
}

/// Hook called after every round with the checkpoint of that round.
pub type RoundHook<'a> = &'a mut dyn FnMut(&RoundCheckpoint) -> Result<()>;

/// Rounds `start.round+1 ..= R` of select, local update, aggregate and
/// synchronize. Without `start` training begins from `clients[0].model`.
pub fn run_training(
    ctx: &FedContext,
    clients: &mut [ClientState],
    start: Option<RoundCheckpoint>,
    mut hook: Option<RoundHook>,
) -> Result<TrainingResult> {
    ctx.hyper.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("no clients to train".into()));
    }
    let initial_hash = ctx.backbone.fingerprint();
    let mut model = clients[0].model.clone();
    let mut first_round = 1;
    if let Some(cp) = start {
        if cp.local_heads.len() != clients.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} clients, run has {}",
                cp.local_heads.len(),
                clients.len()
            )));
        }
        model = cp.model;
        for (c, h) in clients.iter_mut().zip(cp.local_heads) {
            c.local_head = h;
        }
        first_round = cp.round + 1;
    }
    for c in clients.iter_mut() {
        c.model = model.clone();
    }
    let root = RngKey::new(ctx.seed);
    let mut history = Vec::new();
    for round in first_round..=ctx.hyper.rounds {
        let selected = select_clients(
            clients.len(),
            ctx.hyper.participation,
            root.path(&[tags::SELECT, round as u64]),
        )?;
        let picked: Vec<&ClientState> = selected.iter().map(|&k| &clients[k]).collect();
        let updates = parallel::map(&picked, |_, c| local_update(ctx, c, round))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        model = aggregate(&updates, ctx.hyper.weighting)?;
        for (u, &k) in updates.into_iter().zip(&selected) {
            if u.local_head.is_some() {
                clients[k].local_head = u.local_head;
            }
        }
        for c in clients.iter_mut() {
            c.model = model.clone();
        }
        let hash = ctx.backbone.fingerprint();
        if hash != initial_hash {
            return Err(Error::Contract(format!("backbone changed during round {round}")));
        }
        if ctx.hyper.evaluates(round) {
            let report = evaluate_clients(ctx, clients, &model, root.path(&[tags::EVAL, round as u64]))?;
            history.push(RoundMetrics {
                round,
                average: report.average,
                worst: report.worst,
                per_client: report.per_client,
                backbone_hash: hash,
            });
        }
        if let Some(h) = hook.as_mut() {
            h(&RoundCheckpoint {
                round,
                model: model.clone(),
                local_heads: clients.iter().map(|c| c.local_head.clone()).collect(),
            })?;
        }
        let reached = ctx.hyper.target_average.is_some_and(|t| {
            history.last().is_some_and(|m: &RoundMetrics| m.round == round && m.average >= t)
        });
        if reached {
            break;
        }
    }
    Ok(TrainingResult { history, model })
}

/// Fine-tunes only a classifier for a client that never took part in
/// training; the shared prompt and encoder stay frozen.
pub fn adapt_new_client(ctx: &FedContext, trained: &GlobalModel, client: &ClientState, epochs: usize) -> Result<ClientState> {
    if client.train.is_empty() {
        return Err(Error::Config(format!("client {} has an empty training shard", client.id)));
    }
    let mut out = client.clone();
    out.model = trained.clone();
    let mut head = match &trained.head {
        Some(h) => h.clone(),
        None => HeadParams::zeros(ctx.spec.vit.dim, ctx.spec.vit.num_classes),
    };
    let mut frozen = trained.clone();
    let key = RngKey::new(ctx.seed).path(&[tags::ADAPT, client.id as u64]);
    ascend(
        ctx,
        &mut frozen,
        &mut head,
        &client.train,
        epochs,
        Trainable {
            global_prompt: false,
            head: true,
            encoder: false,
        },
        key,
    )?;
    out.local_head = Some(head);
    Ok(out)
}
