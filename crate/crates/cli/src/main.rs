use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dtsnl::audit::{read_trace, run_audit};
use dtsnl::config::{parse_override, RunConfig};
use dtsnl::datamodel::DatasetManifest;
use dtsnl::network::Network;
use dtsnl::synth::{generate_synthetic_dataset, SynthSpec};
use dtsnl::trainer::{eval_inputs, evaluate_params, load_data, run_train, RunState};
use dtsnl::{Error, Result};

#[derive(Parser)]
#[command(name = "dtsnl", version, about = "Semi-supervised classification with dynamic thresholds and selective negative learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.lambda1=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed; shorthand for the seed key of the command's config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    SynthGen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, writing a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to evaluate on; defaults to the checkpoint's config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a probability trace through the threshold and negative-label logic.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
        /// Write the per-epoch report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(common: &Common, seed_key: &str) -> Result<Vec<(String, toml::Value)>> {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    for spec in &common.set {
        match parse_override(spec) {
            Ok(kv) => out.push(kv),
            Err(e) => errs.push(e),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if let Some(seed) = common.seed {
        out.push((seed_key.to_string(), toml::Value::Integer(seed as i64)));
    }
    Ok(out)
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let ov = overrides(common, "train.seed")?;
    match &common.config {
        Some(path) => RunConfig::load(path, &ov),
        None => RunConfig::resolve("", &ov),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|source| Error::Io {
            context: format!("writing {}", path.display()),
            source,
        }),
        None => {
            print!("{text}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn synth_gen(common: &Common, out: &Path) -> Result<()> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|source| Error::Io {
            context: format!("reading {}", p.display()),
            source,
        })?),
        None => None,
    };
    let spec = SynthSpec::resolve(text.as_deref(), &overrides(common, "seed")?)?;
    let manifest = generate_synthetic_dataset(&spec, out)?;
    eprintln!(
        "wrote {} images and {}",
        manifest.records.len(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn train(common: &Common, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = run_config(common)?;
    let data = load_data(&cfg)?;
    let summary = run_train(&cfg, data, out, resume)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, manifest: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let state = RunState::load(checkpoint)?;
    let ov = overrides(common, "train.seed")?;
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, &ov)?,
        None => RunConfig::resolve(&state.config, &ov)?,
    };
    if let Some(m) = manifest {
        cfg.data.manifest = Some(m.to_path_buf());
    }
    let path = cfg
        .data
        .manifest
        .clone()
        .ok_or_else(|| Error::Config(vec!["data.manifest: required (or pass --manifest)".into()]))?;
    let manifest = DatasetManifest::load(&path)?;
    if manifest.label_space.names() != state.class_names.as_slice() {
        return Err(Error::Checkpoint(format!(
            "checkpoint classes {:?} differ from manifest classes {:?}",
            state.class_names,
            manifest.label_space.names()
        )));
    }
    let samples = manifest.load_split(dtsnl::datamodel::Split::Eval)?;
    let labels: Vec<usize> = samples.iter().filter_map(|s| s.label).collect();
    if cfg.augment.crop != state.net.input_size {
        return Err(Error::Checkpoint(format!(
            "config crop {} differs from the checkpoint's input size {}",
            cfg.augment.crop, state.net.input_size
        )));
    }
    let net = Network::new(state.net.clone())?;
    let inputs = eval_inputs(&samples, &cfg.augment.weak(), cfg.augment.normalization().as_ref())?;
    let metrics = evaluate_params(&net, state.eval_params(cfg.train.eval_model), &inputs, &labels)?;
    emit(out, &format!("{}\n", serde_json::to_string(&metrics)?))
}

fn audit(common: &Common, trace: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = run_config(common)?;
    let file = fs::File::open(trace).map_err(|source| Error::Io {
        context: format!("reading {}", trace.display()),
        source,
    })?;
    let records = read_trace(BufReader::new(file))?;
    let Some(first) = records.first() else {
        return Err(Error::Trace("trace is empty".into()));
    };
    let summaries = run_audit(&records, first.probs.num_classes(), &cfg.dta, &cfg.snl)?;
    let mut text = String::new();
    for s in &summaries {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    emit(out, &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthGen { common, out } => synth_gen(common, out),
        Command::Train { common, out, resume_from } => train(common, out, resume_from.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            manifest,
            out,
        } => eval(common, checkpoint, manifest.as_deref(), out.as_deref()),
        Command::Audit { common, trace, out } => audit(common, trace, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
