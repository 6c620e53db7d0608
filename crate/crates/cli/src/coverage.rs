use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use pixrl::curve::{coverage_range, pac, ActionSpace, DEFAULT_COVERAGE_GRID};

use crate::CliError;

pub const TABLE_STEPS: [usize; 3] = [1, 3, 6];

#[derive(Debug, Clone, Args)]
pub struct CoverageArgs {
    /// Number of midpoint samples over [0, 1].
    #[arg(long, default_value_t = DEFAULT_COVERAGE_GRID)]
    pub grid: usize,
    /// Write envelope curves to this CSV file.
    #[arg(long)]
    pub envelope: Option<PathBuf>,
    /// Points per envelope curve.
    #[arg(long, default_value_t = 101)]
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageRow {
    pub name: &'static str,
    pub actions: usize,
    /// One entry per step count in [`TABLE_STEPS`].
    pub ranges: Vec<f64>,
}

pub fn spaces() -> [(&'static str, ActionSpace); 2] {
    [("ours", ActionSpace::ours()), ("baseline", ActionSpace::baseline())]
}

pub fn coverage_table(grid: usize) -> Vec<CoverageRow> {
    spaces()
        .into_iter()
        .map(|(name, space)| CoverageRow {
            name,
            actions: space.len(),
            ranges: TABLE_STEPS.iter().map(|&n| coverage_range(&space, n, grid)).collect(),
        })
        .collect()
}

pub fn render_table(rows: &[CoverageRow]) -> String {
    let mut s = format!("{:<12}{:>8}", "space", "actions");
    for n in TABLE_STEPS {
        s.push_str(&format!("{:>10}", format!("N={n}")));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{:<12}{:>8}", r.name, r.actions));
        for v in &r.ranges {
            s.push_str(&format!("{v:>10.4}"));
        }
        s.push('\n');
    }
    s
}

/// Upper and lower envelope of `n` composed curves at `s`.
pub fn envelope(space: &ActionSpace, n: usize, s: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (s, s);
    for _ in 0..n {
        lo = pac(lo, space.lo());
        hi = pac(hi, space.hi());
    }
    (lo, hi)
}

fn write_envelope(path: &PathBuf, samples: usize) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["space", "n", "s", "lower", "upper"])?;
    for (name, space) in spaces() {
        for n in TABLE_STEPS {
            for i in 0..samples {
                let s = i as f64 / (samples - 1) as f64;
                let (lo, hi) = envelope(&space, n, s);
                w.write_record([
                    name.to_string(),
                    n.to_string(),
                    s.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(args: &CoverageArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if args.grid < 1000 {
        return Err(CliError::Usage("--grid must be at least 1000".into()));
    }
    if args.samples < 2 {
        return Err(CliError::Usage("--samples must be at least 2".into()));
    }
    write!(out, "{}", render_table(&coverage_table(args.grid)))?;
    if let Some(path) = &args.envelope {
        write_envelope(path, args.samples)?;
        writeln!(out, "envelope samples written to {}", path.display())?;
    }
    Ok(())
}

/// Parses a table printed by [`render_table`] back into rows.
pub fn parse_table(text: &str) -> Vec<(String, Vec<f64>)> {
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let mut parts = line.split_whitespace();
            let name = parts.next()?.to_string();
            parts.next()?;
            let values: Vec<f64> = parts.filter_map(|v| v.parse().ok()).collect();
            (values.len() == TABLE_STEPS.len()).then_some((name, values))
        })
        .collect()
}
