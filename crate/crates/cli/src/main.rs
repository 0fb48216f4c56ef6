use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use gaitscope_core::config::{Preset, RunConfig};
use gaitscope_core::data::{generate_synthetic, open_dataset, write_synthetic, Modifier, Protocol, SynthSpec};
use gaitscope_core::evaluator::{extract_store, gallery_probe, rank_k};
use gaitscope_core::trainer::{load_model, Trainer};
use gaitscope_core::Error;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  other failure (I/O, unreadable data)
  2  configuration or usage error
  3  training diverged (a diagnostic checkpoint is written)
  4  checkpoint or feature artifact is corrupt or does not match the config";

/// Gait recognition on silhouette sequences: synthesis, training,
/// evaluation and feature export.
#[derive(Parser, Debug)]
#[command(name = "gaitscope", version, after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic walker dataset with manifest and descriptor.
    #[command(after_help = EXIT_CODES)]
    Synth(SynthArgs),
    /// Train a model; writes checkpoints, train.jsonl and effective.toml.
    #[command(after_help = EXIT_CODES)]
    Train(TrainArgs),
    /// Rank-k evaluation of a checkpoint on a dataset's test split.
    #[command(after_help = EXIT_CODES)]
    Eval(EvalArgs),
    /// Write test-split descriptors as PREFIX.bin (f32 LE) and PREFIX.json.
    #[command(after_help = EXIT_CODES)]
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (created).
    #[arg(long)]
    out: PathBuf,
    /// Number of subjects.
    #[arg(long, default_value_t = 16)]
    subjects: usize,
    /// View angles in degrees, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,30,60,90")]
    views: Vec<f64>,
    /// Conditions among nm, cl, bg, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "nm,cl")]
    conditions: Vec<String>,
    /// Sequences per (subject, view, condition).
    #[arg(long, default_value_t = 2)]
    seqs: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 40)]
    frames: usize,
    /// Per-pixel flip probability in [0, 0.05].
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Key-value config file with flat dotted keys (e.g. `train.iterations = 2000`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset applied before the config file: casia-b, oumvlp, grew or desk.
    #[arg(long)]
    preset: Option<String>,
    /// Override a setting, `section.key=value`; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root (overrides data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and logs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from this checkpoint; its config hash must match.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Split protocol: synthetic, casia-b-lt or oumvlp.
    #[arg(long, default_value = "synthetic")]
    protocol: String,
    /// Ranks to report, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    ranks: Vec<usize>,
    /// Config the checkpoint must have been trained with (default:
    /// effective.toml beside the checkpoint, if present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep same-view gallery entries instead of excluding them.
    #[arg(long)]
    include_identical_view: bool,
    /// Write the JSON table here instead of stdout.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// Output prefix; writes PREFIX.bin and PREFIX.json.
    #[arg(long)]
    out: PathBuf,
    /// Split protocol: synthetic, casia-b-lt or oumvlp.
    #[arg(long, default_value = "synthetic")]
    protocol: String,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Data(_)) => 2,
        Some(Error::Diverged(_)) => 3,
        Some(Error::Artifact(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let conditions = a
        .conditions
        .iter()
        .map(|c| c.parse::<Modifier>())
        .collect::<Result<Vec<_>, _>>()?;
    let spec = SynthSpec {
        num_subjects: a.subjects,
        views: a.views,
        conditions,
        seqs_per_cell: a.seqs,
        frames_per_seq: a.frames,
        master_seed: a.seed,
        noise: a.noise,
    };
    let set = generate_synthetic(&spec)?;
    write_synthetic(&set, &a.out)?;
    log::info!("wrote {} sequences to {}", set.manifest.entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let preset = a.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut overrides = a.overrides.clone();
    if let Some(d) = &a.data {
        overrides.push(format!("data.root={:?}", d.display().to_string()));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("train.seed={s}"));
    }
    let (cfg, notes) = RunConfig::resolve(preset, a.config.as_deref(), &overrides)?;
    for n in notes {
        log::info!("override: {n}");
    }
    let protocol: Protocol = cfg.data.protocol.parse()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join("effective.toml"), cfg.to_flat())?;
    let hash = cfg.hash();
    let data = open_dataset(&cfg.data.root, protocol)?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.model.clone(), cfg.train.clone(), &data, &hash)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &data, &hash)?,
    };
    log::info!(
        "training {} parameters from iteration {} to {}",
        trainer.model().params().numel(),
        trainer.iteration(),
        cfg.train.iterations
    );
    let log_path = a.out.join("train.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let last = trainer.run(&a.out, &mut BufWriter::new(file))?;
    log::info!("final checkpoint {}", last.display());
    Ok(())
}

/// Verifies that the checkpoint was produced under `config`, or under the
/// `effective.toml` written beside it.
fn check_config(checkpoint: &Path, config: Option<&Path>, stored_hash: &str) -> anyhow::Result<()> {
    let beside = checkpoint.parent().map(|p| p.join("effective.toml"));
    let path = match (config, beside) {
        (Some(c), _) => c.to_path_buf(),
        (None, Some(b)) if b.is_file() => b,
        _ => return Ok(()),
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let hash = RunConfig::from_flat(&text)?.hash();
    if hash != stored_hash {
        return Err(Error::Artifact(format!(
            "checkpoint config hash {stored_hash} does not match {} ({hash})",
            path.display()
        ))
        .into());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    if a.ranks.is_empty() || a.ranks.contains(&0) {
        return Err(Error::Config("--ranks must list positive integers".into()).into());
    }
    let (model, manifest) = load_model(&a.checkpoint)?;
    check_config(&a.checkpoint, a.config.as_deref(), &manifest.config_hash)?;
    let data = open_dataset(&a.data, protocol)?;
    let (gallery, probe) = gallery_probe(&model, &data)?;
    let table = rank_k(&gallery, &probe, &a.ranks, !a.include_identical_view)?;
    print!("{}", table.to_text());
    let json = serde_json::to_string_pretty(&table)?;
    match &a.json {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let protocol: Protocol = a.protocol.parse()?;
    let (model, _) = load_model(&a.checkpoint)?;
    let data = open_dataset(&a.data, protocol)?;
    let test = data.indices(gaitscope_core::data::Split::Test, None);
    let store = extract_store(&model, &data, &test)?;
    store.export(&a.out)?;
    log::info!("exported {} descriptors of dim {}", store.len(), store.dim());
    Ok(())
}
