use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rsm_core::config::RunConfig;
use rsm_core::envs::{default_count, generate_dataset, load_dataset, Dataset, EnvConfig, EnvKind, Split, EPISODE_LEN};
use rsm_core::eval::{
    aggregate, eval_rollout, export_reconstructions, identity_baseline, random_mech_eval, render_table, EvalReport,
    DEFAULT_HORIZONS,
};
use rsm_core::model::{model_config_of, Decoder, WorldModel};
use rsm_core::netops::Checkpoint;
use rsm_core::training::{train_decoder, train_world_model, EpochMetrics, MetricsWriter};

/// Slotwise world models with reusable mechanisms.
#[derive(Parser)]
#[command(name = "rsm", version)]
struct Cli {
    /// Caps the worker threads used for data-parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets (all four splits unless --split is given).
    Generate(GenerateArgs),
    /// Train encoder and transition model.
    Train(TrainArgs),
    /// Train per-slot decoders on a frozen world model.
    TrainDecoder(TrainDecoderArgs),
    /// Multi-step H@1 evaluation on one split.
    Eval(EvalArgs),
    /// Export decoded rollout images for one episode.
    Reconstruct(ReconstructArgs),
    /// Train and evaluate at several mechanism counts.
    SweepMechanisms(SweepArgs),
    /// Aggregate evaluation reports into mean ± stderr tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Master seed; falls back to RSM_SEED, then 0.
    #[arg(long, env = "RSM_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    env: EnvKind,
    #[arg(long)]
    split: Option<Split>,
    /// Episodes per split; defaults to the standard split sizes.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = EPISODE_LEN)]
    episode_len: usize,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

/// Run configuration sources, applied in order: env defaults, file, flags, `--set`.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    env: Option<EnvKind>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "RSM_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let cfg = RunConfig::parse(&text)?;
                if let Some(env) = self.env.filter(|&e| e != cfg.model.env) {
                    return Err(usage(format!("--env {env} contradicts the config file's env {}", cfg.model.env)));
                }
                cfg
            }
            None => RunConfig::for_env(self.env.ok_or_else(|| usage("either --config or --env is required"))?),
        };
        let flags = [
            ("variant", self.variant.clone()),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDecoderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use only the first N training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Selection {
    Learned,
    Random,
    Identity,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Selection::Learned)]
    selection: Selection,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS)]
    horizons: Vec<usize>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    decoder: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS)]
    horizons: Vec<usize>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7])]
    mechanisms: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HORIZONS)]
    horizons: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// EvalReport JSON files.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Bad invocation, as opposed to a failure while running.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<Usage>() {
            return true;
        }
        if let Some(io) = e.downcast_ref::<std::io::Error>() {
            return io.kind() == std::io::ErrorKind::NotFound;
        }
        if let Some(core) = e.downcast_ref::<rsm_core::Error>() {
            return core.is_validation()
                || matches!(core, rsm_core::Error::Format { .. })
                || matches!(core, rsm_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound);
        }
        false
    })
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    rsm_core::io::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<WorldModel<f32>> {
    let ckpt = Checkpoint::load(path)?;
    model_config_of(&ckpt)?;
    Ok(WorldModel::from_checkpoint(&ckpt)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path)?)
}

fn dataset_file(env: EnvKind, split: Split) -> String {
    format!("{env}-{}.rsmd", split.name())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    if a.count.is_some() && a.split.is_none() {
        return Err(usage("--count needs --split"));
    }
    create_out(&a.out)?;
    let splits = match a.split {
        Some(s) => vec![s],
        None => Split::ALL.to_vec(),
    };
    for split in splits {
        let count = a.count.unwrap_or_else(|| default_count(a.env, split));
        let cfg = EnvConfig::for_split(a.env, split);
        let ds = generate_dataset(&cfg, split, count, a.episode_len, a.seed.seed)?;
        let path = a.out.join(dataset_file(a.env, split));
        ds.save(&path)?;
        println!("{} {count} episodes -> {}", split.name(), path.display());
    }
    Ok(())
}

fn train_one(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<WorldModel<f32>> {
    create_out(out)?;
    rsm_core::io::write_atomic(&out.join("config.txt"), cfg.serialize().as_bytes())?;
    let mut metrics = MetricsWriter::create(&out.join("metrics.ndjson"))?;
    let (model, report) = train_world_model::<f32>(data, &cfg.train_config(), &mut |m: &EpochMetrics| {
        println!("epoch {} loss {:.6}", m.epoch, m.loss);
        metrics.write(m)
    })?;
    if !report.silent_params.is_empty() {
        log::warn!("parameters without gradient in the last epoch: {:?}", report.silent_params);
    }
    let path = out.join("world.rsmc");
    model.checkpoint()?.save(&path)?;
    println!("checkpoint -> {}", path.display());
    Ok(model)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(p) = &a.train_data {
        cfg.train_data = Some(p.clone());
    }
    cfg.out_dir = Some(a.out.clone());
    let path = cfg.train_data.clone().ok_or_else(|| usage("no training data: pass --train-data"))?;
    let data = load_data(&path)?;
    train_one(&cfg, &data, &a.out)?;
    Ok(())
}

fn cmd_train_decoder(a: &TrainDecoderArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let mut data = load_data(&a.train_data)?;
    if let Some(n) = a.episodes {
        data = data.truncated(n);
    }
    let mut cfg = rsm_core::training::DecoderTrainConfig::new(a.seed.seed);
    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.microbatch = cfg.microbatch.min(cfg.batch_size);
    create_out(&a.out)?;
    let mut metrics = MetricsWriter::create(&a.out.join("decoder_metrics.ndjson"))?;
    let decoder = train_decoder(&data, &model, &cfg, &mut |m: &EpochMetrics| {
        println!("epoch {} loss {:.6}", m.epoch, m.loss);
        metrics.write(m)
    })?;
    let path = a.out.join("decoder.rsmc");
    decoder.checkpoint()?.save(&path)?;
    println!("decoder -> {}", path.display());
    Ok(())
}

fn evaluate(model: &WorldModel<f32>, data: &Dataset, selection: Selection, horizons: &[usize], seed: u64) -> Result<EvalReport> {
    Ok(match selection {
        Selection::Learned => eval_rollout(model, data, horizons, seed)?,
        Selection::Random => random_mech_eval(model, data, horizons, seed)?,
        Selection::Identity => identity_baseline(model, data, horizons, seed)?,
    })
}

fn print_report(r: &EvalReport) {
    let cells: Vec<String> = r
        .horizons
        .iter()
        .zip(&r.hits_at_1)
        .map(|(h, v)| format!("H@1[{h}]={v:.1}"))
        .collect();
    println!("{} {} {}: {}", r.split, r.variant, r.selection, cells.join(" "));
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_data(&a.data)?;
    let report = evaluate(&model, &data, a.selection, &a.horizons, a.seed.seed)?;
    create_out(&a.out)?;
    let path = a.out.join(format!("eval-{}-{}-seed{}.json", report.split, report.selection, a.seed.seed));
    write_json(&path, &report)?;
    print_report(&report);
    println!("report -> {}", path.display());
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let decoder = Decoder::<f32>::from_checkpoint(&Checkpoint::load(&a.decoder)?)?;
    let data = load_data(&a.data)?;
    let episode = data
        .episodes
        .get(a.episode)
        .ok_or_else(|| usage(format!("episode {} out of range ({} episodes)", a.episode, data.len())))?;
    rsm_core::eval::check_compatible(&model.config, &data)?;
    let files = export_reconstructions(&model, &decoder, episode, &a.horizons, &a.out, a.seed.seed)?;
    println!("{} images -> {}", files.len(), a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepEntry {
    mechanisms: usize,
    learned: EvalReport,
    random: EvalReport,
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let train_path = a
        .train_data
        .clone()
        .or_else(|| base.train_data.clone())
        .ok_or_else(|| usage("no training data: pass --train-data"))?;
    let eval_path = a
        .eval_data
        .clone()
        .or_else(|| base.eval_data.clone())
        .ok_or_else(|| usage("no evaluation data: pass --eval-data"))?;
    if a.mechanisms.is_empty() || a.mechanisms.contains(&0) {
        return Err(usage("--mechanisms needs positive counts"));
    }
    let train = load_data(&train_path)?;
    let test = load_data(&eval_path)?;
    let mut entries = Vec::new();
    for &m in &a.mechanisms {
        let mut cfg = base.clone();
        cfg.model.transition.mechanisms = m;
        cfg.train_data = Some(train_path.clone());
        cfg.eval_data = Some(eval_path.clone());
        println!("== M = {m}");
        let model = train_one(&cfg, &train, &a.out.join(format!("m{m}")))?;
        let learned = eval_rollout(&model, &test, &a.horizons, cfg.seed)?;
        let random = random_mech_eval(&model, &test, &a.horizons, cfg.seed)?;
        print_report(&learned);
        print_report(&random);
        entries.push(SweepEntry {
            mechanisms: m,
            learned,
            random,
        });
    }
    let path = a.out.join("sweep.json");
    write_json(&path, &entries)?;
    println!("sweep -> {}", path.display());
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for path in &a.reports {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| usage(format!("{} is not an evaluation report: {e}", path.display())))?;
        reports.push(r);
    }
    let summary = aggregate(&reports);
    let mut text = render_table(&summary);
    for r in reports.iter().filter(|r| r.selection == "learned") {
        text.push_str(&format!(
            "\nmechanism usage, target slots ({} {} seed {}):\n",
            r.split, r.variant, r.seed
        ));
        for ((dir, row), best) in r.usage.directions.iter().zip(&r.usage.target).zip(r.usage.target_pluralities()) {
            let best = best.map_or("none".to_string(), |j| format!("m{j}"));
            text.push_str(&format!("  {dir:<6} {row:?} plurality {best}\n"));
        }
    }
    let mut csv = String::from("split,variant,selection,horizon,runs,mean,stderr\n");
    for s in &summary {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.split, s.variant, s.selection, s.horizon, s.runs, s.mean, s.stderr
        ));
    }
    create_out(&a.out)?;
    rsm_core::io::write_atomic(&a.out.join("report.txt"), text.as_bytes())?;
    rsm_core::io::write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    write_json(&a.out.join("summary.json"), &summary)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::TrainDecoder(a) => cmd_train_decoder(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::SweepMechanisms(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 3 })
        }
    }
}
