use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{read_manifest, write_atomic};

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Binned value counts of nisqa_mos and mlm_score as CSV.
    Histograms(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Receives nisqa_mos.csv and mlm_score.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    mos_bin_width: Option<f64>,
    #[arg(long)]
    mlm_bin_width: Option<f64>,
}

pub fn run(cmd: ReportCmd, cfg: &RunConfig) -> CliResult<()> {
    match cmd {
        ReportCmd::Histograms(a) => histograms(a, cfg),
    }
}

/// CSV rows `bin_start,bin_end,count` covering every bin from the lowest to
/// the highest occupied one. Bin `b` holds values in `[b*w, (b+1)*w)`.
pub fn histogram_csv(values: &[f64], width: f64) -> String {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in values {
        *counts.entry((v / width).floor() as i64).or_default() += 1;
    }
    let mut out = String::from("bin_start,bin_end,count\n");
    if let (Some((&lo, _)), Some((&hi, _))) = (counts.first_key_value(), counts.last_key_value()) {
        for b in lo..=hi {
            let c = counts.get(&b).copied().unwrap_or(0);
            writeln!(
                out,
                "{:.4},{:.4},{c}",
                b as f64 * width,
                (b + 1) as f64 * width
            )
            .unwrap();
        }
    }
    out
}

fn histograms(a: HistogramArgs, cfg: &RunConfig) -> CliResult<()> {
    let mos_w = a.mos_bin_width.unwrap_or(cfg.histograms.mos_bin_width);
    let mlm_w = a.mlm_bin_width.unwrap_or(cfg.histograms.mlm_bin_width);
    for w in [mos_w, mlm_w] {
        if !(w.is_finite() && w > 0.0) {
            return Err(CliError::validation(
                "config",
                format!("bin width must be > 0, got {w}"),
            ));
        }
    }
    let records = read_manifest(&a.manifest)?;
    let mos: Vec<f64> = records.iter().filter_map(|r| r.nisqa_mos).collect();
    let mlm: Vec<f64> = records.iter().filter_map(|r| r.mlm_score).collect();
    write_atomic(
        &a.out_dir.join("nisqa_mos.csv"),
        histogram_csv(&mos, mos_w).as_bytes(),
    )?;
    write_atomic(
        &a.out_dir.join("mlm_score.csv"),
        histogram_csv(&mlm, mlm_w).as_bytes(),
    )?;
    eprintln!("{} MOS values, {} MLM values", mos.len(), mlm.len());
    Ok(())
}
