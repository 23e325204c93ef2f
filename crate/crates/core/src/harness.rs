//! Experiment configuration and the evaluation sweeps built on the
//! federated loop: main runs, unseen clients, V sweep, ablations, ρ grid.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{clean_pass, BackboneParams, VitConfig};
use crate::datagen::{feature_shift_partition, generate, label_shift_partition, Dataset, Partition, SyntheticSpec};
use crate::error::{Error, Result};
use crate::federation::{
    adapt_new_client, evaluate_clients, run_training, ClientState, FedContext, Hyperparams, RoundCheckpoint,
    RoundMetrics,
};
use crate::model::{GlobalModel, Method, ModelSpec, Sample};
use crate::objective::mean_stderr;
use crate::parallel;
use crate::pretrain::{warm_up, WarmupConfig, WarmupReport};
use crate::rng::{tags, RngKey};
use crate::sivi_prompt::PromptConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Track {
    FeatureShift,
    LabelShift,
}

impl Track {
    pub fn name(self) -> &'static str {
        match self {
            Track::FeatureShift => "feature-shift",
            Track::LabelShift => "label-shift",
        }
    }

    pub fn parse(s: &str) -> Result<Track> {
        match s {
            "feature-shift" => Ok(Track::FeatureShift),
            "label-shift" => Ok(Track::LabelShift),
            _ => Err(Error::Config(format!(
                "unknown track {s:?} (expected feature-shift or label-shift)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Prefix of every run id.
    pub name: String,
    pub track: Track,
    pub clients: usize,
    /// Domains per client on the feature-shift track.
    pub m: usize,
    /// Classes per client on the label-shift track.
    pub s: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub vit: VitConfig,
    pub prompt: PromptConfig,
    pub data: SyntheticSpec,
    pub train: Hyperparams,
    /// Centralized backbone warm-up; `None` keeps the random backbone.
    pub warmup: Option<WarmupConfig>,
    pub backbone_seed: u64,
    /// Rounds averaged into the summary.
    pub summary_window: usize,
    pub v_values: Vec<usize>,
    pub eval_seeds: usize,
    pub rho_grid: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_track(Track::FeatureShift)
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults of a track.
    pub fn for_track(track: Track) -> Self {
        let (clients, data) = match track {
            Track::FeatureShift => (6, SyntheticSpec::default()),
            // every client draws from all domains, so only p(y) differs
            Track::LabelShift => (
                20,
                SyntheticSpec {
                    samples_per_domain_class: 20,
                    ..SyntheticSpec::default()
                },
            ),
        };
        ExperimentConfig {
            name: "run".into(),
            track,
            clients,
            m: 1,
            s: 2,
            methods: vec![Method::PFedBayesPt],
            seeds: vec![0, 1, 2],
            vit: VitConfig::default(),
            prompt: PromptConfig::default(),
            data,
            train: Hyperparams::default(),
            warmup: Some(WarmupConfig::default()),
            backbone_seed: 0,
            summary_window: 10,
            v_values: (1..=10).collect(),
            eval_seeds: 20,
            rho_grid: vec![0.0001, 0.0005, 0.001, 0.005, 0.01],
            out_dir: PathBuf::from("out"),
        }
    }

    /// Checks every field before any compute; errors name the field.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.vit.validate()?;
        self.prompt.validate(&self.vit)?;
        self.data.validate()?;
        self.train.validate()?;
        if self.data.num_classes != self.vit.num_classes {
            return fail(format!(
                "data.num_classes ({}) differs from vit.num_classes ({})",
                self.data.num_classes, self.vit.num_classes
            ));
        }
        if self.data.channels != self.vit.channels
            || self.data.height != self.vit.image_h
            || self.data.width != self.vit.image_w
        {
            return fail("data image extents differ from the vit input shape".into());
        }
        if self.clients == 0 {
            return fail("clients must be at least 1".into());
        }
        match self.track {
            Track::FeatureShift => {
                if self.m == 0 || self.m > self.data.num_domains {
                    return fail(format!("m must lie in 1..={}, got {}", self.data.num_domains, self.m));
                }
            }
            Track::LabelShift => {
                if self.s == 0 || self.s > self.data.num_classes {
                    return fail(format!("s must lie in 1..={}, got {}", self.data.num_classes, self.s));
                }
            }
        }
        if self.methods.is_empty() {
            return fail("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if self.summary_window == 0 {
            return fail("summary_window must be at least 1".into());
        }
        if self.v_values.iter().any(|&v| v == 0) {
            return fail("v_values must be positive".into());
        }
        if self.eval_seeds == 0 {
            return fail("eval_seeds must be at least 1".into());
        }
        if self.rho_grid.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return fail("rho_grid entries must be positive".into());
        }
        if let Some(w) = &self.warmup {
            if w.epochs == 0 || w.batch_size == 0 {
                return fail("warmup.epochs and warmup.batch_size must be positive".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn spec(&self, method: Method) -> Result<ModelSpec> {
        ModelSpec::new(&self.vit, method, &self.prompt)
    }

    pub fn partition(&self, ds: &Dataset, seed: u64) -> Result<Partition> {
        match self.track {
            Track::FeatureShift => feature_shift_partition(ds, self.clients, self.m, seed),
            Track::LabelShift => label_shift_partition(ds, self.clients, self.s, seed),
        }
    }

    pub fn run_id(&self, method: Method, seed: u64) -> String {
        format!("{}-{}-s{seed}", self.name, method.name())
    }
}

/// Backbone, data and cached clean passes shared by every cell of an experiment.
pub struct Prepared {
    pub backbone: Arc<BackboneParams>,
    pub dataset: Dataset,
    pub samples: Vec<Sample>,
    pub warmup: Option<WarmupReport>,
}

/// Builds (and, if configured, warms up) the backbone.
pub fn build_backbone(cfg: &ExperimentConfig) -> Result<(BackboneParams, Option<WarmupReport>)> {
    let init = BackboneParams::init(&cfg.vit, RngKey::new(cfg.backbone_seed).child(tags::INIT))?;
    match &cfg.warmup {
        Some(w) => {
            let (bb, report) = warm_up(&cfg.vit, &init, w)?;
            Ok((bb, Some(report)))
        }
        None => Ok((init, None)),
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (bb, report) = build_backbone(cfg)?;
    let mut p = prepare_with_backbone(cfg, Arc::new(bb))?;
    p.warmup = report;
    Ok(p)
}

/// Generates the data and runs the frozen backbone once over every image.
pub fn prepare_with_backbone(cfg: &ExperimentConfig, backbone: Arc<BackboneParams>) -> Result<Prepared> {
    cfg.validate()?;
    if backbone.config != cfg.vit {
        return Err(Error::Config("backbone was built for a different vit config".into()));
    }
    let dataset = generate(&cfg.data)?;
    let passes = parallel::map(&dataset.images, |_, im| clean_pass(im, &backbone))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let samples = passes
        .into_iter()
        .enumerate()
        .map(|(i, p)| Sample {
            id: i,
            label: dataset.labels[i],
            pass: Arc::new(p),
        })
        .collect();
    Ok(Prepared {
        backbone,
        dataset,
        samples,
        warmup: None,
    })
}

pub fn fed_context(cfg: &ExperimentConfig, prep: &Prepared, method: Method, seed: u64) -> Result<FedContext> {
    Ok(FedContext {
        spec: cfg.spec(method)?,
        backbone: prep.backbone.clone(),
        hyper: cfg.train.clone(),
        seed,
    })
}

/// Clients `ids` of the seed's partition, all holding the initial model.
pub fn build_clients(
    prep: &Prepared,
    ctx: &FedContext,
    partition: &Partition,
    ids: &[usize],
) -> Vec<ClientState> {
    let model = GlobalModel::init(&ctx.spec, RngKey::new(ctx.seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| prep.samples[i].clone()).collect::<Vec<_>>();
    ids.iter()
        .map(|&k| {
            let shard = &partition.clients[k];
            ClientState::new(k, pick(&shard.train), pick(&shard.test), &model, &ctx.spec)
        })
        .collect()
}

pub struct CellOutput {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub history: Vec<RoundMetrics>,
    pub model: GlobalModel,
    pub clients: Vec<ClientState>,
}

impl CellOutput {
    /// Mean Average and Worst Local accuracy over the evaluated rounds among the last `window`.
    pub fn tail(&self, rounds: usize, window: usize) -> (f64, f64) {
        let first = rounds.saturating_sub(window) + 1;
        let rows: Vec<&RoundMetrics> = self.history.iter().filter(|r| r.round >= first).collect();
        if rows.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = rows.len() as f64;
        (
            rows.iter().map(|r| r.average).sum::<f64>() / n,
            rows.iter().map(|r| r.worst).sum::<f64>() / n,
        )
    }
}

/// Trains one (method, seed) cell over all clients.
pub fn run_cell(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    method: Method,
    seed: u64,
    resume: Option<RoundCheckpoint>,
    checkpoint_dir: Option<&Path>,
) -> Result<CellOutput> {
    let ctx = fed_context(cfg, prep, method, seed)?;
    let partition = cfg.partition(&prep.dataset, seed)?;
    let ids: Vec<usize> = (0..cfg.clients).collect();
    let mut clients = build_clients(prep, &ctx, &partition, &ids);
    let run_id = cfg.run_id(method, seed);
    let result = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{run_id}.pfnt"));
            let mut save = |cp: &RoundCheckpoint| cp.save(&path);
            run_training(&ctx, &mut clients, resume, Some(&mut save))?
        }
        None => run_training(&ctx, &mut clients, resume, None)?,
    };
    Ok(CellOutput {
        run_id,
        method,
        seed,
        history: result.history,
        model: result.model,
        clients,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub method: Method,
    pub seed: u64,
    pub average: f64,
    pub worst: f64,
}

pub struct ExperimentReport {
    pub cells: Vec<CellSummary>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    /// Per-seed Average accuracies of one method, in seed order.
    pub fn averages(&self, method: Method) -> Vec<f64> {
        self.cells.iter().filter(|c| c.method == method).map(|c| c.average).collect()
    }

    pub fn row(&self, method: Method, metric: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.method == method.name() && r.metric == metric)
    }
}

fn summarize(methods: &[Method], cells: &[CellSummary]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &m in methods {
        let of: Vec<&CellSummary> = cells.iter().filter(|c| c.method == m).collect();
        for (metric, xs) in [
            ("avg_acc", of.iter().map(|c| c.average).collect::<Vec<_>>()),
            ("worst_acc", of.iter().map(|c| c.worst).collect()),
        ] {
            let (mean, stderr) = mean_stderr(&xs);
            out.push(SummaryRow {
                method: m.name().into(),
                metric: metric.into(),
                mean,
                stderr,
                n_seeds: xs.len(),
            });
        }
    }
    out
}

/// Bumped whenever a column of any emitted CSV changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Writes `run.json` with the schema version and the effective config, so
/// every CSV in `dir` can be regenerated from it.
pub fn write_run_manifest(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let doc = serde_json::json!({
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "config": cfg,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn csv_writer(dir: &Path, file: &str) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir)?;
    Ok(csv::Writer::from_path(dir.join(file))?)
}

/// Per-round rows: `run_id, method, seed, round, avg_acc, worst_acc, client_<k>...`.
pub fn write_rounds(path_dir: &Path, clients: usize, cells: &[CellOutput]) -> Result<()> {
    let mut w = csv_writer(path_dir, "rounds.csv")?;
    let mut header: Vec<String> = ["run_id", "method", "seed", "round", "avg_acc", "worst_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..clients).map(|k| format!("client_{k}")));
    w.write_record(&header)?;
    for c in cells {
        for r in &c.history {
            let mut row = vec![
                c.run_id.clone(),
                c.method.name().to_string(),
                c.seed.to_string(),
                r.round.to_string(),
                r.average.to_string(),
                r.worst.to_string(),
            ];
            row.extend(r.per_client.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(dir: &Path, file: &str, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv_writer(dir, file)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Every (method, seed) cell, the per-round CSV, final checkpoints and the
/// last-window summary.
pub fn run_experiment(cfg: &ExperimentConfig, prep: &Prepared, out: Option<&Path>) -> Result<ExperimentReport> {
    run_experiment_from(cfg, prep, None, out)
}

/// As [`run_experiment`], optionally continuing a single (method, seed) cell
/// from a round checkpoint. Only the resumed rounds enter its history.
pub fn run_experiment_from(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if resume.is_some() && cfg.methods.len() * cfg.seeds.len() != 1 {
        return Err(Error::Config("resuming needs exactly one method and one seed".into()));
    }
    let mut outputs = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let start = match resume {
                Some(p) => Some(RoundCheckpoint::load(&cfg.spec(method)?, p)?),
                None => None,
            };
            let ck = out.map(|o| o.join("checkpoints"));
            outputs.push(run_cell(cfg, prep, method, seed, start, ck.as_deref())?);
        }
    }
    let cells: Vec<CellSummary> = outputs
        .iter()
        .map(|o| {
            let (average, worst) = o.tail(cfg.train.rounds, cfg.summary_window);
            CellSummary {
                method: o.method,
                seed: o.seed,
                average,
                worst,
            }
        })
        .collect();
    let summary = summarize(&cfg.methods, &cells);
    if let Some(dir) = out {
        write_rounds(dir, cfg.clients, &outputs)?;
        write_summary(dir, "summary.csv", &summary)?;
    }
    Ok(ExperimentReport { cells, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub client_id: usize,
    pub zero_shot_acc: f64,
    pub adapted_acc: f64,
}

/// Seed-keyed split of client ids into (training, unseen) halves.
pub fn split_clients(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "generalization needs an even number of clients, got {n}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut RngKey::new(seed).path(&[tags::PARTITION, 1]).rng());
    let mut seen = ids[..n / 2].to_vec();
    let mut unseen = ids[n / 2..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok((seen, unseen))
}

/// Trains on half of the clients, then evaluates each unseen client before
/// and after fine-tuning its own head.
pub fn run_generalization(cfg: &ExperimentConfig, prep: &Prepared, out: Option<&Path>) -> Result<Vec<GeneralizationRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let (seen, unseen) = split_clients(cfg.clients, seed)?;
            let ctx = fed_context(cfg, prep, method, seed)?;
            let partition = cfg.partition(&prep.dataset, seed)?;
            let mut train = build_clients(prep, &ctx, &partition, &seen);
            let result = run_training(&ctx, &mut train, None, None)?;
            let fresh = build_clients(prep, &ctx, &partition, &unseen);
            let run_id = cfg.run_id(method, seed);
            for c in &fresh {
                let zero = adapt_new_client(&ctx, &result.model, c, 0)?;
                let adapted = adapt_new_client(&ctx, &result.model, c, ctx.hyper.adapt_epochs)?;
                let key = RngKey::new(seed).path(&[tags::EVAL, 2]);
                let acc = |s: &ClientState| -> Result<f64> {
                    Ok(evaluate_clients(&ctx, std::slice::from_ref(s), &result.model, key)?.average)
                };
                rows.push(GeneralizationRow {
                    run_id: run_id.clone(),
                    method: method.name().into(),
                    seed,
                    client_id: c.id,
                    zero_shot_acc: acc(&zero)?,
                    adapted_acc: acc(&adapted)?,
                });
            }
        }
    }
    if let Some(dir) = out {
        let mut w = csv_writer(dir, "generalization.csv")?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VSweepRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub v: usize,
    pub mean_acc: f64,
    pub stderr: f64,
    pub n_eval_seeds: usize,
}

/// Evaluation key of the `e`-th resampling seed, shared across V values.
pub fn sweep_key(seed: u64, e: usize) -> RngKey {
    RngKey::new(seed).path(&[tags::EVAL, 3, e as u64])
}

/// Average accuracy of a trained cell at each V over `eval_seeds` keys.
pub fn v_sweep(cfg: &ExperimentConfig, prep: &Prepared, cell: &CellOutput) -> Result<Vec<VSweepRow>> {
    let mut ctx = fed_context(cfg, prep, cell.method, cell.seed)?;
    let mut rows = Vec::new();
    for &v in &cfg.v_values {
        ctx.spec.prompt.inference_samples = v;
        let accs = (0..cfg.eval_seeds)
            .map(|e| Ok(evaluate_clients(&ctx, &cell.clients, &cell.model, sweep_key(cell.seed, e))?.average))
            .collect::<Result<Vec<_>>>()?;
        let (mean_acc, stderr) = mean_stderr(&accs);
        rows.push(VSweepRow {
            run_id: cell.run_id.clone(),
            method: cell.method.name().into(),
            seed: cell.seed,
            v,
            mean_acc,
            stderr,
            n_eval_seeds: accs.len(),
        });
    }
    Ok(rows)
}

/// Trains each (method, seed) cell, or resumes it from `checkpoint`, then sweeps V.
pub fn run_v_sweep(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<Vec<VSweepRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let resume = match checkpoint {
                Some(p) => Some(RoundCheckpoint::load(&cfg.spec(method)?, p)?),
                None => None,
            };
            let cell = run_cell(cfg, prep, method, seed, resume, None)?;
            rows.extend(v_sweep(cfg, prep, &cell)?);
        }
    }
    if let Some(dir) = out {
        let mut w = csv_writer(dir, "vsweep.csv")?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

pub const ABLATION_METHODS: [Method; 3] = [Method::PFedBayesPt, Method::PFedBayesPtG, Method::PFedBayesPtD];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: String,
    pub worse: String,
    /// Mean over seeds of the paired per-seed difference.
    pub mean_diff: f64,
    /// `sqrt(se_a² + se_b²)` of the two methods' Average accuracy.
    pub pooled_stderr: f64,
    /// `ok` when `mean_diff ≥ −pooled_stderr`, otherwise `inverted`.
    pub status: String,
}

pub fn compare(report: &ExperimentReport, better: Method, worse: Method) -> Result<Comparison> {
    let a = report.averages(better);
    let b = report.averages(worse);
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Config("comparison needs paired seeds for both methods".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let (mean_diff, _) = mean_stderr(&diffs);
    let pooled_stderr = (mean_stderr(&a).1.powi(2) + mean_stderr(&b).1.powi(2)).sqrt();
    Ok(Comparison {
        better: better.name().into(),
        worse: worse.name().into(),
        mean_diff,
        pooled_stderr,
        status: if mean_diff >= -pooled_stderr { "ok" } else { "inverted" }.into(),
    })
}

pub struct AblationReport {
    pub experiment: ExperimentReport,
    pub comparisons: Vec<Comparison>,
}

/// Full method, -G and -D on identical partitions and seeds.
pub fn run_ablation(cfg: &ExperimentConfig, prep: &Prepared, out: Option<&Path>) -> Result<AblationReport> {
    let cfg = ExperimentConfig {
        methods: ABLATION_METHODS.to_vec(),
        ..cfg.clone()
    };
    let experiment = run_experiment(&cfg, prep, out)?;
    let comparisons = vec![
        compare(&experiment, Method::PFedBayesPt, Method::PFedBayesPtG)?,
        compare(&experiment, Method::PFedBayesPtG, Method::PFedBayesPtD)?,
    ];
    if let Some(dir) = out {
        let mut w = csv_writer(dir, "ablation.csv")?;
        for r in &comparisons {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(AblationReport {
        experiment,
        comparisons,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub rho: f64,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

/// Repeats the experiment for each encoder step size in the grid.
pub fn run_rho_sweep(cfg: &ExperimentConfig, prep: &Prepared, out: Option<&Path>) -> Result<Vec<RhoRow>> {
    let mut rows = Vec::new();
    for &rho in &cfg.rho_grid {
        let mut c = cfg.clone();
        c.train.lr_encoder = rho;
        c.name = format!("{}-rho{rho}", cfg.name);
        let sub = out.map(|o| o.join(format!("rho-{rho}")));
        let rep = run_experiment(&c, prep, sub.as_deref())?;
        rows.extend(rep.summary.into_iter().map(|r| RhoRow {
            rho,
            method: r.method,
            metric: r.metric,
            mean: r.mean,
            stderr: r.stderr,
            n_seeds: r.n_seeds,
        }));
    }
    if let Some(dir) = out {
        let mut w = csv_writer(dir, "rho_sweep.csv")?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
