use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;

use pixrl::config::RunConfig;
use pixrl::dataset::list_images;
use pixrl::image::load_image;
use pixrl::metrics::{psnr, ssim, MetricError};

use crate::commands::{stem, step_file_name, SUMMARY_FILE};
use crate::{CliError, CommonArgs, StepsKey};

pub const ABSENT: &str = "absent";
pub const MEAN_ROW: &str = "mean";

pub const COLUMNS: [&str; 12] = [
    "psnr",
    "ssim",
    "psnr_input",
    "ssim_input",
    "luminance_in",
    "luminance_out",
    "wall_ms_per_step",
    "r_aes",
    "r_fea",
    "r_exp",
    "r_total",
    "steps",
];

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Folder written by `enhance`.
    #[arg(long)]
    pub enhanced: PathBuf,
    /// Reference folder; defaults to `<dataset>/high` when present.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub image: String,
    /// Aligned with [`COLUMNS`]; `None` marks an absent value.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Default, Clone, Copy)]
struct StepTotals {
    r_aes: f64,
    r_fea: f64,
    r_exp: f64,
    r_total: f64,
    wall_ms: f64,
    steps: usize,
}

/// Per-image totals over steps `1..=steps` of an enhance summary.
fn read_summary(path: &Path, steps: usize) -> Result<HashMap<String, StepTotals>, CliError> {
    let mut totals: HashMap<String, StepTotals> = HashMap::new();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Runtime(format!("{}: missing column {name}", path.display())))
    };
    let idx = [
        col("image")?,
        col("step")?,
        col("r_aes")?,
        col("r_fea")?,
        col("r_exp")?,
        col("r_total")?,
        col("wall_ms")?,
    ];
    for record in reader.records() {
        let record = record?;
        let num = |i: usize| -> Result<f64, CliError> {
            record[idx[i]]
                .parse()
                .map_err(|_| CliError::Runtime(format!("{}: bad number `{}`", path.display(), &record[idx[i]])))
        };
        if num(1)? as usize > steps {
            continue;
        }
        let t = totals.entry(record[idx[0]].to_string()).or_default();
        t.r_aes += num(2)?;
        t.r_fea += num(3)?;
        t.r_exp += num(4)?;
        t.r_total += num(5)?;
        t.wall_ms += num(6)?;
        t.steps += 1;
    }
    Ok(totals)
}

fn metric(enabled: bool, value: Result<f64, MetricError>) -> Result<Option<f64>, CliError> {
    match (enabled, value) {
        (false, _) => Ok(None),
        (true, Ok(v)) => Ok(Some(v)),
        (true, Err(MetricError::TooSmall(..))) => Ok(None),
        (true, Err(e)) => Err(e.into()),
    }
}

fn find_reference(dir: &Path, name: &str) -> Option<PathBuf> {
    let exact = dir.join(name);
    if exact.is_file() {
        return Some(exact);
    }
    let png = dir.join(format!("{}.png", stem(name)));
    png.is_file().then_some(png)
}

/// One row per input image, in file-name order, for the outputs of a
/// `steps`-step enhancement.
pub fn build_report(
    inputs_dir: &Path,
    enhanced_dir: &Path,
    reference_dir: Option<&Path>,
    steps: usize,
    cfg: &RunConfig,
) -> Result<Vec<ReportRow>, CliError> {
    let inputs = list_images(inputs_dir)?;
    if inputs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no images found in {}",
            inputs_dir.display()
        )));
    }
    let names: Vec<String> = inputs
        .iter()
        .map(|p| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let missing: Vec<String> = names
        .iter()
        .map(|n| step_file_name(n, steps))
        .filter(|f| !enhanced_dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Runtime(format!(
            "mismatched file sets: {} lacks {}",
            enhanced_dir.display(),
            missing.join(", ")
        )));
    }
    let summary_path = enhanced_dir.join(SUMMARY_FILE);
    let totals = if summary_path.is_file() {
        read_summary(&summary_path, steps)?
    } else {
        HashMap::new()
    };

    let mut rows = Vec::with_capacity(names.len());
    for (path, name) in inputs.iter().zip(&names) {
        let input = load_image(path)?;
        let output = load_image(&enhanced_dir.join(step_file_name(name, steps)))?;
        if (input.height(), input.width()) != (output.height(), output.width()) {
            return Err(CliError::Runtime(format!(
                "{name}: enhanced output differs in size from input"
            )));
        }
        let reference = match reference_dir.and_then(|d| find_reference(d, name)) {
            Some(p) => Some(load_image(&p)?),
            None => None,
        };
        let mut values = vec![None; COLUMNS.len()];
        if let Some(r) = &reference {
            values[0] = metric(cfg.metrics_psnr, psnr(&output, r))?;
            values[1] = metric(cfg.metrics_ssim, ssim(&output, r))?;
            values[2] = metric(cfg.metrics_psnr, psnr(&input, r))?;
            values[3] = metric(cfg.metrics_ssim, ssim(&input, r))?;
        }
        values[4] = Some(input.mean_luminance());
        values[5] = Some(output.mean_luminance());
        if let Some(t) = totals.get(name).filter(|t| t.steps > 0) {
            values[6] = Some(t.wall_ms / t.steps as f64);
            values[7] = Some(t.r_aes);
            values[8] = Some(t.r_fea);
            values[9] = Some(t.r_exp);
            values[10] = Some(t.r_total);
        }
        values[11] = Some(steps as f64);
        rows.push(ReportRow {
            image: name.clone(),
            values,
        });
    }
    Ok(rows)
}

/// Column means over the rows where a value is present.
pub fn mean_row(rows: &[ReportRow]) -> ReportRow {
    let values = (0..COLUMNS.len())
        .map(|c| {
            let present: Vec<f64> = rows.iter().filter_map(|r| r.values[c]).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect();
    ReportRow {
        image: MEAN_ROW.to_string(),
        values,
    }
}

pub fn format_value(v: Option<f64>) -> String {
    match v {
        None => ABSENT.to_string(),
        Some(v) if v == f64::INFINITY => "inf".to_string(),
        Some(v) => v.to_string(),
    }
}

/// Parses a cell written by [`format_value`].
pub fn parse_value(cell: &str) -> Option<f64> {
    match cell {
        ABSENT => None,
        "inf" => Some(f64::INFINITY),
        v => v.parse().ok(),
    }
}

pub fn write_report(rows: &[ReportRow], out: impl Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image"];
    header.extend(COLUMNS);
    w.write_record(&header)?;
    for row in rows.iter().chain(std::iter::once(&mean_row(rows))) {
        let mut record = vec![row.image.clone()];
        record.extend(row.values.iter().map(|&v| format_value(v)));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &ReportArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = args.common.resolve(StepsKey::Enhance)?;
    let dataset = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::Usage("no dataset given; use --dataset or set `dataset` in the config".into()))?;
    let low = dataset.join("low");
    let inputs_dir = if low.is_dir() { low } else { dataset.clone() };
    let reference = args.reference.clone().or_else(|| {
        let high = dataset.join("high");
        high.is_dir().then_some(high)
    });
    let rows = build_report(
        &inputs_dir,
        &args.enhanced,
        reference.as_deref(),
        cfg.enhance_steps,
        &cfg,
    )?;
    match &cfg.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_report(&rows, std::fs::File::create(path)?)?;
            let wall = mean_row(&rows).values[6];
            writeln!(out, "report: {} ({} images)", path.display(), rows.len())?;
            writeln!(out, "runtime: {} ms per step (mean)", format_value(wall))?;
        }
        None => write_report(&rows, out)?,
    }
    Ok(())
}
