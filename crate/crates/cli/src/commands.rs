use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;

use pixrl::agent::{enhance_trajectory, train as train_agent, Policy};
use pixrl::config::RunConfig;
use pixrl::dataset::{list_images, write_synthetic, Dataset};
use pixrl::image::{load_image, save_image, ImageTensor};
use pixrl::nn::Checkpoint;
use pixrl::oracle::expected_score;
use pixrl::reward::step_reward;

use crate::{CliError, CommonArgs, StepsKey};

pub const DEFAULT_TRAIN_OUT: &str = "pixrl-run";
pub const DEFAULT_ENHANCE_OUT: &str = "pixrl-enhanced";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "enhance_summary.csv";

pub const SUMMARY_HEADER: [&str; 11] = [
    "image",
    "step",
    "luminance_before",
    "luminance_after",
    "r_aes",
    "r_fea",
    "r_exp",
    "r_total",
    "score_before",
    "score_after",
    "wall_ms",
];

fn require<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("no {what} given; use --{what} or set `{what}` in the config")))
}

/// Config keys outside the training echo that still shape a run.
fn extra_header(cfg: &RunConfig) -> Vec<(String, String)> {
    cfg.pairs()
        .into_iter()
        .filter(|(k, _)| k == "action_space" || k.starts_with("oracle") || k.starts_with("proxy_"))
        .collect()
}

/// Output file stem for an input file name.
pub fn stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

/// Name of the step-`k` output for an input file name.
pub fn step_file_name(name: &str, k: usize) -> String {
    format!("{}_t{k}.png", stem(name))
}

pub fn train(args: &CommonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.resolve(StepsKey::Train)?;
    let dataset_path = require(&cfg.dataset, "dataset")?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_TRAIN_OUT));
    let checkpoint_path = cfg.checkpoint.clone().unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE));
    let data = Dataset::load(dataset_path)?;
    if data.is_empty() {
        return Err(CliError::Runtime(format!(
            "no images found in {}",
            dataset_path.display()
        )));
    }
    let oracle = cfg.oracle.build()?;

    let mut outcome = train_agent(&cfg.train, &data.low, oracle.as_ref())?;
    let extra = extra_header(&cfg);
    outcome.log.header.extend(extra.iter().cloned());
    outcome.checkpoint.meta.extend(extra);

    fs::create_dir_all(&out_dir)?;
    if let Some(parent) = checkpoint_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    outcome.checkpoint.save(&checkpoint_path)?;
    fs::write(out_dir.join(LOG_FILE), outcome.log.render())?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_config_text())?;

    writeln!(
        out,
        "trained {} episodes on {} images",
        outcome.log.episodes.len(),
        data.len()
    )?;
    if let (Some(first), Some(last)) = (outcome.log.epochs.first(), outcome.log.epochs.last()) {
        writeln!(
            out,
            "exposure penalty {:.4} -> {:.4}, final score {:.4} from {:.4}",
            first.exposure_out, last.exposure_out, last.score_out, last.score_in
        )?;
    }
    writeln!(out, "checkpoint: {}", checkpoint_path.display())?;
    writeln!(out, "log: {}", out_dir.join(LOG_FILE).display())?;
    Ok(())
}

/// Input images for `enhance`: a single file or every image of a dataset.
fn enhance_inputs(path: &Path) -> Result<Vec<(String, ImageTensor)>, CliError> {
    if path.is_file() {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![(name, load_image(path)?)]);
    }
    let low = path.join("low");
    let dir = if low.is_dir() { low } else { path.to_path_buf() };
    let mut inputs = Vec::new();
    for p in list_images(&dir)? {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        inputs.push((name, load_image(&p)?));
    }
    if inputs.is_empty() {
        return Err(CliError::Runtime(format!("no images found in {}", dir.display())));
    }
    Ok(inputs)
}

pub fn enhance(args: &CommonArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.resolve(StepsKey::Enhance)?;
    let checkpoint_path = require(&cfg.checkpoint, "checkpoint")?;
    let dataset_path = require(&cfg.dataset, "dataset")?;
    let steps = cfg.enhance_steps;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_ENHANCE_OUT));
    if !checkpoint_path.is_file() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found",
            checkpoint_path.display()
        )));
    }
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let policy = Policy::from_checkpoint(&checkpoint)?;
    let inputs = enhance_inputs(dataset_path)?;
    let oracle = cfg.oracle.build()?;

    fs::create_dir_all(&out_dir)?;
    let mut summary = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    summary.write_record(SUMMARY_HEADER)?;
    for (name, img) in &inputs {
        let started = Instant::now();
        let (states, maps) = enhance_trajectory(&policy, img, steps)?;
        let per_step_ms = started.elapsed().as_secs_f64() * 1000.0 / steps as f64;
        let mut prev = img;
        for (k, state) in states.iter().enumerate() {
            save_image(state, &out_dir.join(step_file_name(name, k + 1)))?;
            let r = step_reward(oracle.as_ref(), &cfg.train.reward, prev, state, &maps[..=k])?;
            summary.write_record([
                name.clone(),
                (k + 1).to_string(),
                prev.mean_luminance().to_string(),
                state.mean_luminance().to_string(),
                r.r_aes.to_string(),
                r.r_fea.to_string(),
                r.r_exp.to_string(),
                r.r_total.to_string(),
                r.score_before.to_string(),
                r.score_after.to_string(),
                per_step_ms.to_string(),
            ])?;
            prev = state;
        }
        writeln!(
            out,
            "{name}: luminance {:.4} -> {:.4} in {steps} steps ({per_step_ms:.2} ms/step)",
            img.mean_luminance(),
            prev.mean_luminance()
        )?;
    }
    summary.flush()?;
    writeln!(out, "outputs: {}", out_dir.display())?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    pub image: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn score(args: &ScoreArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.common.resolve(StepsKey::Enhance)?;
    let img = load_image(&args.image)?;
    let oracle = cfg.oracle.build()?;
    let dist = oracle.score(&img)?;
    writeln!(out, "image: {}", args.image.display())?;
    writeln!(out, "mean_luminance: {:.6}", img.mean_luminance())?;
    for (k, p) in dist.probs().iter().enumerate() {
        writeln!(out, "p{}: {p:.6}", k + 1)?;
    }
    writeln!(out, "expected_score: {:.6}", expected_score(&dist))?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Dataset root; receives `low/` and `high/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Index of the first pattern.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.count == 0 || args.size == 0 {
        return Err(CliError::Usage("--count and --size must be positive".into()));
    }
    write_synthetic(&args.out, args.first, args.count, args.size)?;
    writeln!(
        out,
        "wrote {} synthetic pairs of {}x{} to {}",
        args.count,
        args.size,
        args.size,
        args.out.display()
    )?;
    Ok(())
}
