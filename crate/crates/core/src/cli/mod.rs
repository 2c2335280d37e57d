//! The `condiff` command-line tool.
//!
//! Subcommands: `synth`, `train`, `infer`, `eval` and `inspect`. Settings come
//! from built-in defaults, then an optional JSON config file (`--config`),
//! then `--set section.key=value` overrides. The effective configuration is
//! written next to the outputs of every run.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or file error,
//! 4 numeric failure during training or sampling.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{DataConfig, InferSettings, RunConfig, CONFIG_SCHEMA_VERSION};

use crate::consensus::{fraction_map, AnnotationSet, SoftMap};
use crate::data::{self, gen_synthetic, load_dataset, read_gray, resize_bilinear, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, SOFT_DICE_THRESHOLDS};
use crate::inference::{generate, image_key, InferenceConfig};
use crate::maps::Map;
use crate::model::{sha256_hex, Checkpoint};
use crate::training::{train, TrainMode, TrainRun, CHECKPOINT_FILE};

/// Relative output paths are resolved under this directory when it is set.
pub const OUTPUT_ROOT_ENV: &str = "CONDIFF_OUTPUT_ROOT";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Parser, Debug)]
#[command(name = "condiff", version, about = "Consensus-conditioned diffusion for multi-annotator segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-annotator dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Synthetic dataset spec (JSON); replaces the `synth` section of the config.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset manifest or the directory containing `manifest.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sample soft segmentations for a dataset split or a directory of PNG images.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest, dataset directory, or a directory of PNG images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only images of this split when the input is a dataset.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write every level sample and every generation.
        #[arg(long)]
        dump_levels: bool,
    },
    /// Score predictions against the fraction maps of a dataset split.
    Eval {
        /// Directory holding `<id>.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        /// Report directory; defaults to the prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train, test)")),
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn output_dir(out: &Path) -> Result<PathBuf> {
    let p = match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    Ok(p)
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(data::MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn to_u16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn write_soft(path: &Path, m: &Map) -> Result<()> {
    let (h, w) = m.dims();
    let data: Vec<u16> = m.data().iter().map(|&v| to_u16(v)).collect();
    data::write_gray16(path, w, h, &data)
}

fn read_soft(path: &Path) -> Result<SoftMap> {
    let g = read_gray(path)?;
    let scale = g.max_value as f32;
    SoftMap::new(Map::new(g.height, g.width, g.data.iter().map(|&v| v as f32 / scale).collect())?)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn cmd_synth(cfg: ConfigArgs, spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::resolve(cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(p) = spec {
        let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        run.synth = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
    }
    if let Some(s) = seed {
        run.synth.seed = s;
    }
    run.synth.validate()?;
    let out = output_dir(&out)?;
    let m = gen_synthetic(&run.synth, &out)?;
    eprintln!("wrote {} samples with {} annotators to {}", m.samples.len(), m.annotators, out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: ConfigArgs,
    data: PathBuf,
    out: PathBuf,
    mode: Option<TrainMode>,
    seed: Option<u64>,
    steps: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut run = RunConfig::resolve(cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(m) = mode {
        run.train.mode = m;
    }
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(s) = steps {
        run.train.steps = s;
    }
    let mut errs = Vec::new();
    for r in [run.model.validate(), run.train.validate()] {
        if let Err(Error::Config(m)) = r {
            errs.push(m);
        }
    }
    let manifest = manifest_path(&data);
    if !manifest.is_file() {
        errs.push(format!("dataset manifest {} not found", manifest.display()));
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let opts = LoadOptions {
        image_size: Some(run.model.image_size),
        strict: run.data.strict,
        split: Some(Split::Train),
    };
    let dataset = load_dataset(&manifest, &opts)?;
    let needed = run.train.mode.condition_count(dataset.annotators);
    if run.model.consensus_levels < needed {
        return Err(Error::Config(format!(
            "{} mode on {} annotators needs model.consensus_levels >= {needed}",
            run.train.mode.as_str(),
            dataset.annotators
        )));
    }
    let out = output_dir(&out)?;
    let resume_ckpt = if resume {
        let p = out.join(CHECKPOINT_FILE);
        let ck = Checkpoint::load(&p)?;
        if ck.params.config() != &run.model {
            return Err(Error::Config(format!("{}: model config differs from the run config", p.display())));
        }
        Some(ck)
    } else {
        None
    };
    run.write(&out.join(EFFECTIVE_CONFIG_FILE))?;
    let every = run.train.log_every.max(100);
    let mut report = |step: u64, loss: f64| {
        if step % every == 0 {
            eprintln!("step {step} loss {loss:.5}");
        }
    };
    let outcome = train(
        &dataset,
        &run.model,
        &run.train,
        TrainRun {
            out_dir: Some(&out),
            resume: resume_ckpt,
            validation: None,
            progress: Some(&mut report),
        },
    )?;
    if let Some((p, hash)) = outcome.saved {
        eprintln!("checkpoint {} sha256 {hash}", p.display());
    }
    Ok(())
}

/// `(id, image)` pairs from a dataset or a directory of PNGs.
fn infer_inputs(input: &Path, split: Option<Split>, size: usize) -> Result<Vec<(String, Map)>> {
    let manifest = manifest_path(input);
    if manifest.is_file() {
        let opts = LoadOptions {
            image_size: Some(size),
            strict: false,
            split,
        };
        return Ok(load_dataset(&manifest, &opts)?
            .samples
            .into_iter()
            .map(|s| (s.sample_id.clone(), s.image().clone()))
            .collect());
    }
    let rd = std::fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no manifest and no PNG images", input.display())));
    }
    files
        .iter()
        .map(|p| {
            let g = read_gray(p)?;
            let m = Map::new(g.height, g.width, g.data.iter().map(|&v| v as f32 / g.max_value as f32).collect())?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, resize_bilinear(&m, size, size)))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: ConfigArgs,
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
    split: Option<Split>,
    generations: Option<usize>,
    workers: Option<usize>,
    seed: Option<u64>,
    dump_levels: bool,
) -> Result<()> {
    let mut run = RunConfig::resolve(cfg.config.as_deref(), &cfg.overrides)?;
    if let Some(g) = generations {
        run.infer.generations = g;
    }
    if let Some(w) = workers {
        run.infer.workers = w;
    }
    if let Some(s) = seed {
        run.infer.seed = s;
    }
    run.infer.dump_levels |= dump_levels;
    let bytes = std::fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    let ckpt_hash = sha256_hex(&bytes);
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", checkpoint.display())),
        other => other,
    })?;
    let model = ckpt.params.config().clone();
    let levels = ckpt
        .metadata
        .get("inference_levels")
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .unwrap_or(model.consensus_levels);
    if cfg.config.is_some() && run.model != model {
        let a = serde_json::to_value(&run.model)?;
        let b = serde_json::to_value(&model)?;
        let fields: Vec<String> = a
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| b.get(k.as_str()) != Some(v))
            .map(|(k, _)| format!("model.{k}"))
            .collect();
        return Err(Error::Config(format!(
            "checkpoint {} does not match the config: {}",
            checkpoint.display(),
            fields.join(", ")
        )));
    }
    run.model = model.clone();
    let factor = match (
        ckpt.metadata.get("mode").and_then(|m| m.as_str()),
        ckpt.metadata.get("annotators").and_then(|a| a.as_u64()),
    ) {
        (Some(m), Some(a)) => m.parse::<TrainMode>()?.generation_factor(a as usize),
        _ => 1,
    };
    let icfg = InferenceConfig {
        n_generations: run.infer.generations * factor,
        levels,
        seed: run.infer.seed,
        workers: run.infer.workers,
    };
    icfg.validate(&ckpt.params)?;
    let inputs = infer_inputs(&input, split, model.image_size)?;
    let out = output_dir(&out)?;
    run.write(&out.join(EFFECTIVE_CONFIG_FILE))?;
    let refs: Vec<(u64, &Map)> = inputs.iter().map(|(id, m)| (image_key(id), m)).collect();
    let gens = generate(&refs, &ckpt.params, &ckpt.schedule, &icfg)?;
    for ((id, _), g) in inputs.iter().zip(&gens) {
        let soft = g.ensemble(icfg.n_generations)?;
        write_soft(&out.join(format!("{id}.png")), soft.map())?;
        if run.infer.dump_levels {
            let dir = out.join("levels").join(id);
            create_dir(&dir)?;
            for (gi, levels) in g.levels.iter().enumerate() {
                write_soft(&dir.join(format!("g{gi:03}.png")), g.generation(gi)?.map())?;
                for (c, m) in levels.iter().enumerate() {
                    write_soft(&dir.join(format!("g{gi:03}_c{}.png", c + 1)), m)?;
                }
            }
        }
        write_json(
            &out.join(format!("{id}.json")),
            &json!({
                "sample_id": id,
                "seed": icfg.seed,
                "generations": icfg.n_generations,
                "levels": icfg.levels,
                "checkpoint": checkpoint.display().to_string(),
                "checkpoint_sha256": ckpt_hash,
                "model": model,
                "train_mode": ckpt.metadata.get("mode"),
            }),
        )?;
    }
    eprintln!("wrote {} predictions to {}", inputs.len(), out.display());
    Ok(())
}

/// Builds the report for predictions in `pred_dir` against `samples`; missing predictions are all listed.
pub fn evaluate_dir(pred_dir: &Path, samples: &[AnnotationSet]) -> Result<EvalReport> {
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !pred_dir.join(format!("{}.png", s.sample_id)).is_file())
        .map(|s| s.sample_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{}: missing predictions for {}",
            pred_dir.display(),
            missing.join(", ")
        )));
    }
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = read_soft(&pred_dir.join(format!("{}.png", s.sample_id)))?;
        scored.push((s.sample_id.clone(), pred, fraction_map(s)));
    }
    EvalReport::build(&scored, samples, &SOFT_DICE_THRESHOLDS)
}

fn cmd_eval(pred: PathBuf, data: PathBuf, split: Split, out: Option<PathBuf>) -> Result<()> {
    let opts = LoadOptions {
        image_size: None,
        strict: false,
        split: Some(split),
    };
    let ds = load_dataset(&manifest_path(&data), &opts)?;
    let report = evaluate_dir(&pred, &ds.samples)?;
    let out = match out {
        Some(o) => output_dir(&o)?,
        None => pred.clone(),
    };
    write_json(&out.join("eval_report.json"), &serde_json::to_value(&report)?)?;
    let table = report.to_table();
    std::fs::write(out.join("eval_report.txt"), &table).map_err(|e| Error::io(out.join("eval_report.txt"), e))?;
    print!("{table}");
    Ok(())
}

fn cmd_inspect(checkpoint: PathBuf) -> Result<()> {
    let bytes = std::fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    let v = json!({
        "path": checkpoint.display().to_string(),
        "sha256": sha256_hex(&bytes),
        "model": ck.params.config(),
        "parameters": ck.params.parameter_count(),
        "tensors": ck.params.names().len(),
        "timesteps": ck.schedule.steps(),
        "optimizer_step": ck.optimizer.as_ref().map(|o| o.step),
        "metadata": ck.metadata,
    });
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, spec, out, seed } => cmd_synth(cfg, spec, out, seed),
        Command::Train {
            cfg,
            data,
            out,
            mode,
            seed,
            steps,
            resume,
        } => cmd_train(cfg, data, out, mode, seed, steps, resume),
        Command::Infer {
            cfg,
            checkpoint,
            input,
            out,
            split,
            generations,
            workers,
            seed,
            dump_levels,
        } => cmd_infer(cfg, checkpoint, input, out, split, generations, workers, seed, dump_levels),
        Command::Eval { pred, data, split, out } => cmd_eval(pred, data, split, out),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
    }
}

/// Parses the process arguments, runs the command and maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
