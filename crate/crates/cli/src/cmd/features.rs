use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde_json::json;
use voxret_core::features::{
    compute_speaking_rate, extract_energy_std, extract_f0_mean, extract_features, read_wav,
    time_stretch_wsola, wav_bytes, FeatureError,
};
use voxret_core::manifest::SegmentRecord;

use crate::config::{RunConfig, StretchGroup};
use crate::error::{CliError, CliResult};
use crate::io::{emit_json, read_manifest, resolve_under, write_atomic, write_manifest};

#[derive(Debug, Subcommand)]
pub enum FeaturesCmd {
    /// Compute F0 mean, energy std and speaking rate from each record's WAV.
    Extract(ExtractArgs),
    /// WSOLA time stretch of a speaking-rate group.
    Stretch(StretchArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Base directory for `wav_ref`; defaults to the manifest's directory.
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StretchArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    wav_dir: Option<PathBuf>,
    /// Receives the stretched WAVs and manifest.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Values above 1 speed speech up.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    group: Option<StretchGroup>,
}

pub fn run(cmd: FeaturesCmd, cfg: &RunConfig) -> CliResult<()> {
    match cmd {
        FeaturesCmd::Extract(a) => extract(a),
        FeaturesCmd::Stretch(a) => stretch(a, cfg),
    }
}

fn wav_base(manifest: &Path, wav_dir: Option<PathBuf>) -> PathBuf {
    wav_dir.unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn wav_path(base: &Path, r: &SegmentRecord) -> CliResult<PathBuf> {
    let rel = r.wav_ref.as_deref().ok_or_else(|| {
        CliError::validation("manifest", format!("record {:?} has no wav_ref", r.id))
    })?;
    let p = resolve_under(base, rel);
    if !p.is_file() {
        return Err(CliError::validation(
            "input",
            format!("{} does not exist", p.display()),
        ));
    }
    Ok(p)
}

fn extract(a: ExtractArgs) -> CliResult<()> {
    let records = read_manifest(&a.manifest)?;
    let base = wav_base(&a.manifest, a.wav_dir);
    let mut kept = Vec::new();
    let mut rejected: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        let w = read_wav(wav_path(&base, r)?)?;
        let reason = match extract_features(r, &w) {
            Ok(f) => {
                let mut out = r.clone();
                f.write_to(&mut out);
                kept.push(out);
                continue;
            }
            Err(FeatureError::Unvoiced(_)) => "unvoiced",
            Err(FeatureError::MissingMoraCount(_)) => "missing-mora-count",
            Err(FeatureError::DurationMismatch { .. }) => "duration-mismatch",
            Err(FeatureError::TooShort { .. }) => "too-short",
            Err(e) => return Err(CliError::from(e).context(&r.id)),
        };
        *rejected.entry(reason).or_default() += 1;
    }
    write_manifest(&a.out, &kept)?;
    emit_json(
        a.report.as_deref(),
        &json!({ "input": records.len(), "kept": kept.len(), "rejected": rejected }),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn stretch(a: StretchArgs, cfg: &RunConfig) -> CliResult<()> {
    let rate = a.rate.unwrap_or(cfg.stretch.rate);
    let group = a.group.unwrap_or(cfg.stretch.group);
    let records = read_manifest(&a.manifest)?;
    let base = wav_base(&a.manifest, a.wav_dir);

    let selected: Vec<&SegmentRecord> = if group == StretchGroup::All {
        records.iter().collect()
    } else {
        let rates = records
            .iter()
            .map(|r| {
                r.speaking_rate.ok_or_else(|| {
                    CliError::validation(
                        "manifest",
                        format!("record {:?} has no speaking_rate", r.id),
                    )
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        if rates.is_empty() {
            Vec::new()
        } else {
            let m = median(rates.clone());
            records
                .iter()
                .zip(&rates)
                .filter(|(_, &s)| {
                    if group == StretchGroup::Fast {
                        s > m
                    } else {
                        s < m
                    }
                })
                .map(|(r, _)| r)
                .collect()
        }
    };

    let mut out_records = Vec::with_capacity(selected.len());
    for r in selected {
        let w = read_wav(wav_path(&base, r)?)?;
        let s = time_stretch_wsola(&w, rate).map_err(|e| CliError::from(e).context(&r.id))?;
        let name = format!("{}.wav", file_safe(&r.id));
        write_atomic(&a.out_dir.join(&name), &wav_bytes(&s)?)?;

        let mut out = r.clone();
        out.duration_s = s.duration_s();
        out.wav_ref = Some(name);
        if let Some(m) = r.mora_count {
            out.speaking_rate = Some(compute_speaking_rate(m, out.duration_s)?);
        } else if let Some(sr) = r.speaking_rate {
            out.speaking_rate = Some(sr * w.duration_s() / out.duration_s);
        }
        if r.f0_mean_hz.is_some() {
            out.f0_mean_hz = extract_f0_mean(&s)?;
        }
        if r.energy_std.is_some() {
            out.energy_std = Some(extract_energy_std(&s)?);
        }
        out_records.push(out);
    }
    write_manifest(&a.out_dir.join("manifest.jsonl"), &out_records)?;
    emit_json(
        None,
        &json!({ "rate": rate, "group": group, "input": records.len(), "stretched": out_records.len() }),
    )
}
