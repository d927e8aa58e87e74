use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lwfm_core::bank::{gen_synthetic_bank, read_bank, write_bank, LayerShape, SyntheticSpec};
use lwfm_core::harness::{bench_assign, bench_csv, evaluate, Hyperparams, Preset};
use lwfm_core::pipeline::{AssignMethod, PooledBank};
use lwfm_core::spm::{read_matchers, write_matchers, MatcherSet};
use lwfm_core::training::{log_csv, train, TrainConfig};
use lwfm_core::{Error, Result};

/// Few-shot similarity scoring over multi-layer feature banks.
#[derive(Parser)]
#[command(name = "lwfm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run episodic evaluation and report per-episode accuracy.
    Eval(EvalCmd),
    /// Train the per-layer matchers and write them as an MPAR file.
    Train(TrainCmd),
    /// Score one support/query pair and print the breakdown as JSON.
    ScorePair(ScorePairCmd),
    /// Write a synthetic Gaussian-prototype feature bank.
    GenSynthetic(GenCmd),
    /// Time the assignment solver on random d²×d² matrices; prints CSV.
    BenchAssign(BenchCmd),
}

#[derive(Args)]
struct ModelArgs {
    /// Matcher parameter file, or `none` for the parameter-free pipeline.
    #[arg(long, default_value = "none")]
    params: String,
    #[arg(long, default_value_t = 5.0)]
    temperature: f64,
    #[arg(long, default_value_t = 5)]
    k_top: usize,
    #[arg(long, default_value_t = 3)]
    pooled: usize,
    #[arg(long, value_delimiter = ',', default_value = "7,8")]
    layers: Vec<u32>,
    #[arg(long, default_value = "hungarian")]
    assign: AssignMethod,
    /// Dataset preset supplying alpha and beta; explicit flags win.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct EpisodeArgs {
    #[arg(long)]
    bank: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 15)]
    queries: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl ModelArgs {
    fn apply(&self, hp: Hyperparams) -> Hyperparams {
        let mut hp = Hyperparams {
            temperature: self.temperature,
            k_top: self.k_top,
            pooled: self.pooled,
            layer_ids: self.layers.clone(),
            assign: self.assign,
            ..hp
        };
        if let Some(p) = self.preset {
            hp = hp.with_preset(p);
        }
        hp.alpha = self.alpha.unwrap_or(hp.alpha);
        hp.beta = self.beta.unwrap_or(hp.beta);
        hp
    }
}

impl EpisodeArgs {
    fn hyperparams(&self) -> Hyperparams {
        self.model.apply(Hyperparams {
            n_way: self.n_way,
            k_shot: self.k_shot,
            query_per_class: self.queries,
            episode_count: self.episodes,
            seed: self.seed,
            ..Hyperparams::default()
        })
    }
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    episodes: EpisodeArgs,
    /// Report file; `.json` gives JSON, anything else CSV. Defaults to CSV on stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Include per-query class scores in a JSON report.
    #[arg(long)]
    dump_scores: bool,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    episodes: EpisodeArgs,
    #[arg(long)]
    out_params: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    decay: f64,
    #[arg(long, value_delimiter = ',', default_value = "4,6,8")]
    decay_epochs: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    steps_per_epoch: usize,
    #[arg(long, default_value_t = 4)]
    episodes_per_step: usize,
    /// Epoch log CSV; printed to stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScorePairCmd {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    support_idx: usize,
    #[arg(long)]
    query_idx: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GenCmd {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    /// Comma-separated `id:HxWxC` layer shapes.
    #[arg(long, value_delimiter = ',', default_value = "7:3x3x256,8:3x3x512")]
    layers: Vec<LayerShape>,
    #[arg(long, default_value_t = 10.0)]
    prototype_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, value_delimiter = ',', default_value = "3,4,6,9,12")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_matchers(spec: &str) -> Result<Option<MatcherSet>> {
    if spec.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    read_matchers(spec).map(Some)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Internal(e.to_string())
}

fn run_eval(cmd: EvalCmd) -> Result<()> {
    let hp = cmd.episodes.hyperparams();
    hp.validate()?;
    let matchers = load_matchers(&cmd.episodes.model.params)?;
    let bank = read_bank(&cmd.episodes.bank)?;
    let pooled = PooledBank::new(&bank, &hp.layer_ids, hp.pooled)?;
    let report = evaluate(&pooled, matchers.as_ref(), &hp, cmd.dump_scores)?;
    match &cmd.report {
        Some(path) if path.extension().is_some_and(|e| e == "json") => write_text(
            path,
            &serde_json::to_string_pretty(&report).map_err(json_error)?,
        )?,
        Some(path) => write_text(path, &report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    eprintln!(
        "{}-way {}-shot over {} episodes: {:.2} ± {:.2}%",
        hp.n_way,
        hp.k_shot,
        hp.episode_count,
        100.0 * report.mean_accuracy,
        100.0 * report.ci95
    );
    Ok(())
}

fn run_train(cmd: TrainCmd) -> Result<()> {
    let hp = cmd.episodes.hyperparams();
    let cfg = TrainConfig {
        beta: hp.beta,
        learning_rate: cmd.lr,
        decay_factor: cmd.decay,
        decay_epochs: cmd.decay_epochs,
        epochs: cmd.epochs,
        seed: cmd.episodes.seed,
        steps_per_epoch: cmd.steps_per_epoch,
        episodes_per_step: cmd.episodes_per_step,
    };
    hp.validate()?;
    cfg.validate()?;
    let bank = read_bank(&cmd.episodes.bank)?;
    let pooled = PooledBank::new(&bank, &hp.layer_ids, hp.pooled)?;
    let (params, log) = train(&pooled, &hp, &cfg)?;
    write_matchers(&params.matchers, &cmd.out_params)?;
    match &cmd.log {
        Some(path) => write_text(path, &log_csv(&log))?,
        None => print!("{}", log_csv(&log)),
    }
    Ok(())
}

fn run_score_pair(cmd: ScorePairCmd) -> Result<()> {
    let hp = cmd.model.apply(Hyperparams::default());
    let cfg = hp.score_config();
    cfg.validate()?;
    let matchers = load_matchers(&cmd.model.params)?;
    let bank = read_bank(&cmd.bank)?;
    let pooled = PooledBank::new(&bank, &hp.layer_ids, hp.pooled)?;
    let breakdown = pooled.score(cmd.support_idx, cmd.query_idx, matchers.as_ref(), &cfg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&breakdown).map_err(json_error)?
    );
    Ok(())
}

fn run_gen(cmd: GenCmd) -> Result<()> {
    let bank = gen_synthetic_bank(&SyntheticSpec {
        class_count: cmd.classes,
        images_per_class: cmd.per_class,
        layers: cmd.layers,
        prototype_scale: cmd.prototype_scale,
        noise_scale: cmd.noise_scale,
        seed: cmd.seed,
    })?;
    write_bank(&bank, &cmd.out)
}

fn run_bench(cmd: BenchCmd) -> Result<()> {
    let rows = bench_assign(&cmd.sizes, cmd.trials, cmd.seed)?;
    print!("{}", bench_csv(&rows));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(c) => run_eval(c),
        Command::Train(c) => run_train(c),
        Command::ScorePair(c) => run_score_pair(c),
        Command::GenSynthetic(c) => run_gen(c),
        Command::BenchAssign(c) => run_bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
