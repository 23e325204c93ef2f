use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptfl::datagen;
use promptfl::gradsuite::{self, GradSuiteConfig};
use promptfl::harness::{self, ExperimentConfig, Track};
use promptfl::model::Method;
use promptfl::objective::mean_stderr;
use promptfl::parallel::WORKERS_ENV;
use promptfl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "promptfl", version, about = "Federated prompt tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every (method, seed) cell and write rounds.csv and summary.csv.
    Train(TrainArgs),
    /// Train on half of the clients, adapt heads on the other half.
    Generalize(Common),
    /// Evaluate trained models at each number of sampled prompts.
    Vsweep(VsweepArgs),
    /// Full method against its -G and -D variants on paired seeds.
    Ablate(Common),
    /// Finite-difference gradient checks; fails if any check misses its tolerance.
    Gradcheck(Common),
    /// Generate the synthetic dataset and the first seed's partition.
    Datagen(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Method name; repeat or separate by commas.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// feature-shift or label-shift. Without --config this picks the preset.
    #[arg(long)]
    track: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Fraction of clients selected per round.
    #[arg(long)]
    frac: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    /// Prompts sampled at inference.
    #[arg(long = "V")]
    v: Option<usize>,
    /// Auxiliary posterior draws.
    #[arg(long = "S")]
    s_aux: Option<usize>,
    /// Importance samples.
    #[arg(long = "J")]
    j: Option<usize>,
    /// Mask keep probability.
    #[arg(long)]
    pi: Option<f64>,
    /// Skip backbone warm-up.
    #[arg(long)]
    no_warmup: bool,
    /// Worker threads.
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Repeat the run for every encoder step size in the config's grid.
    #[arg(long)]
    rho_sweep: bool,
    /// Continue a single cell from a round checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VsweepArgs {
    #[command(flatten)]
    common: Common,
    /// Start from this checkpoint instead of training from scratch.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let track = self.track.as_deref().map(Track::parse).transpose()?;
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::for_track(track.unwrap_or(Track::FeatureShift)),
        };
        if let Some(t) = track {
            cfg.track = t;
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        set(&mut cfg.m, self.m);
        set(&mut cfg.s, self.s);
        set(&mut cfg.clients, self.clients);
        set(&mut cfg.train.rounds, self.rounds);
        set(&mut cfg.train.participation, self.frac);
        set(&mut cfg.train.local_epochs, self.epochs);
        set(&mut cfg.train.lr, self.lr);
        set(&mut cfg.train.lr_encoder, self.lr_encoder);
        set(&mut cfg.prompt.inference_samples, self.v);
        set(&mut cfg.prompt.aux_samples, self.s_aux);
        set(&mut cfg.prompt.importance_samples, self.j);
        set(&mut cfg.prompt.keep_prob, self.pi);
        if self.no_warmup {
            cfg.warmup = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<harness::Prepared> {
    eprintln!("preparing backbone and data");
    let prep = harness::prepare(cfg)?;
    if let Some(w) = &prep.warmup {
        eprintln!(
            "warm-up: final loss {:.4}, accuracy {:.3}",
            w.epoch_loss.last().copied().unwrap_or(f64::NAN),
            w.final_accuracy
        );
    }
    Ok(prep)
}

fn print_summary(rows: &[harness::SummaryRow]) {
    println!("{:<16} {:<10} {:>8} {:>8} {:>6}", "method", "metric", "mean", "stderr", "seeds");
    for r in rows {
        println!("{:<16} {:<10} {:>8.4} {:>8.4} {:>6}", r.method, r.metric, r.mean, r.stderr, r.n_seeds);
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.common.config()?;
    let out = cfg.out_dir.clone();
    harness::write_run_manifest(&out, &cfg)?;
    let prep = prepare(&cfg)?;
    if args.rho_sweep {
        if args.resume.is_some() {
            return Err(Error::Config("--resume cannot be combined with --rho-sweep".into()));
        }
        let rows = harness::run_rho_sweep(&cfg, &prep, Some(&out))?;
        println!("{:<10} {:<16} {:<10} {:>8} {:>8}", "rho", "method", "metric", "mean", "stderr");
        for r in rows {
            println!("{:<10} {:<16} {:<10} {:>8.4} {:>8.4}", r.rho, r.method, r.metric, r.mean, r.stderr);
        }
    } else {
        let rep = harness::run_experiment_from(&cfg, &prep, args.resume.as_deref(), Some(&out))?;
        print_summary(&rep.summary);
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn generalize(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    harness::write_run_manifest(&cfg.out_dir, &cfg)?;
    let prep = prepare(&cfg)?;
    let rows = harness::run_generalization(&cfg, &prep, Some(&cfg.out_dir))?;
    println!("{:<16} {:>10} {:>10} {:>6}", "method", "zero_shot", "adapted", "rows");
    for m in &cfg.methods {
        let of: Vec<_> = rows.iter().filter(|r| r.method == m.name()).collect();
        let zero: Vec<f64> = of.iter().map(|r| r.zero_shot_acc).collect();
        let adapted: Vec<f64> = of.iter().map(|r| r.adapted_acc).collect();
        println!(
            "{:<16} {:>10.4} {:>10.4} {:>6}",
            m.name(),
            mean_stderr(&zero).0,
            mean_stderr(&adapted).0,
            of.len()
        );
    }
    Ok(())
}

fn vsweep(args: &VsweepArgs) -> Result<()> {
    let cfg = args.common.config()?;
    harness::write_run_manifest(&cfg.out_dir, &cfg)?;
    let prep = prepare(&cfg)?;
    let rows = harness::run_v_sweep(&cfg, &prep, args.checkpoint.as_deref(), Some(&cfg.out_dir))?;
    println!("{:<28} {:>3} {:>8} {:>8}", "run_id", "V", "mean", "stderr");
    for r in rows {
        println!("{:<28} {:>3} {:>8.4} {:>8.4}", r.run_id, r.v, r.mean_acc, r.stderr);
    }
    Ok(())
}

fn ablate(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    harness::write_run_manifest(&cfg.out_dir, &cfg)?;
    let prep = prepare(&cfg)?;
    let rep = harness::run_ablation(&cfg, &prep, Some(&cfg.out_dir))?;
    print_summary(&rep.experiment.summary);
    for c in &rep.comparisons {
        println!(
            "{} vs {}: diff {:+.4}, pooled stderr {:.4}, {}",
            c.better, c.worse, c.mean_diff, c.pooled_stderr, c.status
        );
    }
    Ok(())
}

fn gradcheck(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let suite = GradSuiteConfig {
        vit: cfg.vit.clone(),
        prompt: cfg.prompt.clone(),
        seed: cfg.seeds.first().copied().unwrap_or(0),
        ..GradSuiteConfig::default()
    };
    let rows = gradsuite::run(&suite)?;
    gradsuite::write_csv(&cfg.out_dir, &rows)?;
    let mut failed = Vec::new();
    for r in &rows {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e} < {:<8.0e} {}", r.name, r.max_rel_err, r.tolerance, verdict);
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn datagen(args: &Common) -> Result<()> {
    let cfg = args.config()?;
    let ds = datagen::generate(&cfg.data)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let partition = cfg.partition(&ds, seed)?;
    datagen::export(&ds, &partition, &cfg.out_dir)?;
    harness::write_run_manifest(&cfg.out_dir, &cfg)?;
    println!("{} samples, {} clients", ds.len(), partition.clients.len());
    for (k, shard) in partition.clients.iter().enumerate() {
        println!(
            "client {k}: {} train, {} test, domains {:?}, classes {}",
            shard.train.len(),
            shard.test.len(),
            partition.distinct(k, &ds.domains),
            partition.distinct(k, &ds.labels).len()
        );
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) => 3,
        Error::Contract(_) => 4,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Generalize(a) => generalize(a),
        Command::Vsweep(a) => vsweep(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Datagen(a) => datagen(a),
    }
}

fn common(cli: &Cli) -> &Common {
    match &cli.command {
        Command::Train(a) => &a.common,
        Command::Vsweep(a) => &a.common,
        Command::Generalize(a) | Command::Ablate(a) | Command::Gradcheck(a) | Command::Datagen(a) => a,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = common(&cli).workers {
        // read by the library's worker pool; set before any thread starts
        std::env::set_var(WORKERS_ENV, n.to_string());
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
