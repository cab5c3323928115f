//! `freqmrn`: train, evaluate and run motion predictors from the shell.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use freqmrn::data::{
    extract_windows, gen_synthetic, read_sequence, write_sequence, SequenceDataset, SynthSpec, TrainingWindow,
};
use freqmrn::kinematics::Skeleton;
use freqmrn::losses::{loss_total, LossWeights};
use freqmrn::trainer::{batch_tensors, evaluate, predict_autoregressive, EvalTable, LoadedModel, Trainer};
use freqmrn::Tape;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "freqmrn", version, about = "Frequency-space multi-stage motion prediction")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Resolve and print the configuration without doing any work.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Extend a sequence autoregressively with a trained model.
    Predict(PredictArgs),
    /// Report MPJPE at chosen times on a dataset directory.
    Eval(EvalArgs),
    /// Write a synthetic dataset directory.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Overrides `data.train_dir`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// History sequence (`.mseq`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    horizon: usize,
    /// Output sequence path; defaults to `<out>/prediction.mseq`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated times in milliseconds; overrides `eval.frames_ms`.
    #[arg(long, value_delimiter = ',')]
    frames_ms: Option<Vec<f64>>,
    /// Add one column group per refinement stage.
    #[arg(long)]
    stages: bool,
    /// Switch overrides such as `stages=1,use_velocity=false`.
    #[arg(long, value_delimiter = ',')]
    ablation: Vec<String>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Overrides `synth.count`.
    #[arg(long)]
    count: Option<usize>,
    /// Overrides `synth.kind`.
    #[arg(long)]
    kind: Option<String>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<freqmrn::Error>() {
            Some(freqmrn::Error::Config(_)) => 2,
            _ => 1,
        };
        Failure { code, error }
    }
}

impl From<freqmrn::Error> for Failure {
    fn from(error: freqmrn::Error) -> Self {
        anyhow::Error::from(error).into()
    }
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = RunConfig::load(cli.config.as_deref()).map_err(usage)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match cli.command {
        Command::Train(args) => train(config, &out, cli.dry_run, args),
        Command::Predict(args) => predict(&config, &out, cli.dry_run, args),
        Command::Eval(args) => eval(config, &out, cli.dry_run, args),
        Command::GenSynth(args) => gen_synth(config, &out, cli.dry_run, args),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn echo_config(config: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).with_context(|| format!("cannot write {}", path.display()))
}

fn windows(dataset: &SequenceDataset, config: &RunConfig) -> freqmrn::Result<Vec<TrainingWindow>> {
    extract_windows(dataset, config.model.history, config.model.future, config.train.stride)
}

fn train(mut config: RunConfig, out: &Path, dry_run: bool, args: TrainArgs) -> Outcome {
    if let Some(dir) = args.data {
        config.data.train_dir = Some(dir);
    }
    config.validate()?;
    let Some(train_dir) = config.data.train_dir.clone() else {
        return Err(usage(anyhow!(
            "missing required field `data.train_dir` (set it in the config or pass --data)"
        )));
    };
    if dry_run {
        println!("{}", config.to_toml());
        let skeleton = Skeleton::load(train_dir.join(freqmrn::data::SKELETON_FILE))?;
        let trainer = Trainer::new(
            config.model.clone(),
            config.loss.clone(),
            config.train.clone(),
            &skeleton,
            config.seed,
        )?;
        println!("parameters: {}", trainer.model.parameter_count());
        return Ok(());
    }

    let dataset = SequenceDataset::load(&train_dir)?;
    let (train_set, val_set) = match &config.data.val_dir {
        Some(dir) => (dataset, SequenceDataset::load(dir)?),
        None => dataset.split(config.train.val_fraction)?,
    };
    let train_windows = windows(&train_set, &config)?;
    let val_windows = windows(&val_set, &config)?;
    if train_windows.is_empty() {
        return Err(usage(anyhow!(
            "no training sequence holds history {} + future {} frames",
            config.model.history,
            config.model.future
        )));
    }

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::load(path)?;
            if t.model.config != config.model || t.skeleton.name() != train_set.skeleton.name() {
                return Err(usage(anyhow!(
                    "checkpoint {} does not match the configured model or skeleton",
                    path.display()
                )));
            }
            t.train.epochs = config.train.epochs;
            t
        }
        None => Trainer::new(
            config.model.clone(),
            config.loss.clone(),
            config.train.clone(),
            &train_set.skeleton,
            config.seed,
        )?,
    };
    create_dir(out)?;
    echo_config(&config, out)?;
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(
        File::options()
            .create(true)
            .append(args.resume.is_some())
            .write(true)
            .truncate(args.resume.is_none())
            .open(&log_path)
            .with_context(|| format!("cannot open {}", log_path.display()))?,
    );
    let checkpoint = out.join("checkpoint.fmrn");
    eprintln!(
        "training on {} windows ({} validation), {} parameters",
        train_windows.len(),
        val_windows.len(),
        trainer.model.parameter_count()
    );
    let history = trainer.fit(&train_windows, &val_windows, |t, m| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| freqmrn::Error::Format(e.to_string()))?;
        t.save(&checkpoint)
    })?;
    if history.is_empty() {
        trainer.save(&checkpoint)?;
        println!("already at epoch {} of {}", trainer.epoch, trainer.train.epochs);
    }
    if let Some(last) = history.last() {
        println!(
            "epoch {} train_loss {:.6} train_mpjpe {:.4}{}",
            last.epoch,
            last.train_loss,
            last.train_mpjpe,
            last.val_mpjpe.map(|v| format!(" val_mpjpe {v:.4}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn predict(config: &RunConfig, out: &Path, dry_run: bool, args: PredictArgs) -> Outcome {
    let loaded = LoadedModel::load(&args.checkpoint)?;
    let input = read_sequence(&args.input)?;
    if input.skeleton() != loaded.skeleton.name() || input.joints() != loaded.model.joints {
        return Err(anyhow!(
            "skeleton mismatch: checkpoint uses `{}` ({} joints), input uses `{}` ({} joints)",
            loaded.skeleton.name(),
            loaded.model.joints,
            input.skeleton(),
            input.joints()
        )
        .into());
    }
    let output = args.output.unwrap_or_else(|| out.join("prediction.mseq"));
    if dry_run {
        println!(
            "checkpoint {} (epoch {}, config {})",
            args.checkpoint.display(),
            loaded.epoch,
            loaded.config_hash
        );
        println!("would write {} frames to {}", args.horizon, output.display());
        return Ok(());
    }
    let (generated, passes) = predict_autoregressive(&loaded.model, &input, args.horizon)?;
    let dir = output
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    create_dir(dir)?;
    write_sequence(&output, &generated)?;
    echo_config(config, dir)?;
    println!(
        "wrote {} frames to {} ({passes} refinement passes)",
        generated.frames(),
        output.display()
    );
    Ok(())
}

/// Evaluation record written next to the printed table.
#[derive(serde::Serialize, serde::Deserialize)]
struct EvalRecord {
    checkpoint: String,
    config_hash: String,
    stages_used: usize,
    loss: f64,
    table: EvalTable,
}

fn apply_ablation(model: &mut LoadedModel, config: &mut RunConfig, items: &[String]) -> anyhow::Result<usize> {
    let mut stages = model.model.refinement.stages.len();
    for item in items {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| freqmrn::Error::Config(format!("ablation `{item}` is not key=value")))?;
        let flag = || {
            value
                .parse::<bool>()
                .map_err(|_| freqmrn::Error::Config(format!("ablation `{key}` needs true or false")))
        };
        match key {
            "stages" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| freqmrn::Error::Config(format!("ablation `stages` needs a count, got `{value}`")))?;
                if n == 0 || n > stages {
                    return Err(freqmrn::Error::Config(format!("stages={n} outside 1..={stages}")).into());
                }
                stages = n;
            }
            "use_position" => config.loss.use_position = flag()?,
            "use_st_weights" => config.loss.use_st_weights = flag()?,
            "use_velocity" => config.loss.use_velocity = flag()?,
            "reconstruct_query" => config.loss.reconstruct_query = flag()?,
            other => return Err(freqmrn::Error::Config(format!("unknown ablation switch `{other}`")).into()),
        }
    }
    model.model.refinement.stages.truncate(stages);
    model.model.config.stages = stages;
    Ok(stages)
}

fn print_table(table: &EvalTable) {
    let header: Vec<String> = table.frames_ms.iter().map(|m| format!("{m:>9}ms")).collect();
    println!("{:<16}{}", "", header.join(""));
    let row = |name: &str, values: &[f64]| {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:>11.3}")).collect();
        println!("{name:<16}{}", cells.join(""));
    };
    row("average", &table.overall);
    for (label, values) in &table.per_action {
        row(label, values);
    }
    for (i, values) in table.stages.iter().enumerate() {
        row(&format!("stage {}", i + 1), values);
    }
}

fn eval(mut config: RunConfig, out: &Path, dry_run: bool, args: EvalArgs) -> Outcome {
    let mut loaded = LoadedModel::load(&args.checkpoint)?;
    let dataset = SequenceDataset::load(&args.data)?;
    if dataset.skeleton.name() != loaded.skeleton.name() {
        return Err(anyhow!(
            "skeleton mismatch: checkpoint uses `{}`, dataset uses `{}`",
            loaded.skeleton.name(),
            dataset.skeleton.name()
        )
        .into());
    }
    if let Some(ms) = args.frames_ms {
        config.eval.frames_ms = ms;
    }
    config.model = loaded.model.config.clone();
    let stages_used = apply_ablation(&mut loaded, &mut config, &args.ablation)?;
    config.validate()?;
    let history = config.eval.history.unwrap_or(loaded.model.config.history);
    if dry_run {
        println!("{}", config.to_toml());
        return Ok(());
    }
    let table = evaluate(
        &loaded.model,
        &dataset,
        history,
        &config.eval.frames_ms,
        config.eval.stride,
        args.stages,
    )?;

    // loss of the single-pass prediction under the (possibly overridden) loss switches
    let model = &loaded.model;
    let weights = LossWeights::for_skeleton(&dataset.skeleton, model.config.query, model.config.future, &config.loss)?;
    let eval_windows = extract_windows(&dataset, history, model.config.future, config.eval.stride)?;
    let mut loss = 0.0;
    for w in &eval_windows {
        let refs = [w];
        let (hist, target) = batch_tensors(&refs, model.config.query)?;
        let pred = model.predict(&hist)?.prediction;
        let mut tape = Tape::new();
        let (p, t) = (tape.constant(pred), tape.constant(target));
        let value = loss_total(&mut tape, p, t, &weights, &config.loss, model.config.query)?;
        loss += tape.value(value).item();
    }
    let loss = if eval_windows.is_empty() {
        0.0
    } else {
        loss / eval_windows.len() as f64
    };

    print_table(&table);
    println!("windows {}  loss {loss:.6}  stages used {stages_used}", table.windows);
    create_dir(out)?;
    echo_config(&config, out)?;
    let record = EvalRecord {
        checkpoint: args.checkpoint.display().to_string(),
        config_hash: loaded.config_hash,
        stages_used,
        loss,
        table,
    };
    let path = out.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record).expect("record serializes"))
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn gen_synth(mut config: RunConfig, out: &Path, dry_run: bool, args: GenSynthArgs) -> Outcome {
    if let Some(count) = args.count {
        config.synth.count = count;
    }
    if let Some(kind) = args.kind {
        config.synth.kind = kind.parse()?;
    }
    let s = &config.synth;
    let skeleton = match s.skeleton.as_str() {
        "h36m" => Skeleton::h36m_reconstruction(),
        "synthetic" => Skeleton::synthetic(s.chains, s.joints_per_chain, s.bone_length)?,
        other => {
            return Err(usage(anyhow!(
                "unknown synth.skeleton `{other}` (expected synthetic or h36m)"
            )))
        }
    };
    let spec = |i: usize| SynthSpec {
        kind: s.kind,
        amplitude: s.amplitude,
        frequency: s.frequency,
        frames: s.frames,
        frame_rate: s.frame_rate,
        seed: config.seed.wrapping_add(i as u64),
    };
    spec(0).validate()?;
    if dry_run {
        println!("{}", config.to_toml());
        return Ok(());
    }
    let sequences = (0..s.count)
        .map(|i| gen_synthetic(&skeleton, &spec(i)))
        .collect::<freqmrn::Result<Vec<_>>>()?;
    let dataset = SequenceDataset::new(skeleton, sequences)?;
    dataset
        .save(out)
        .map_err(|e| anyhow!("cannot write dataset to {}: {e}", out.display()))?;
    echo_config(&config, out)?;
    println!("wrote {} sequences to {}", dataset.len(), out.display());
    Ok(())
}
