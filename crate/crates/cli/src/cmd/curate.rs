use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use serde_json::json;
use voxret_core::curation::{
    apply_quality_filters, keyword_comment_filter, label_gender_with, nsfw_filter,
    select_representatives, split_by_channel, ward_cluster, RejectReason, VideoComments,
};
use voxret_core::manifest::{Gender, RefKind, VectorStore};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{
    emit, emit_json, load_stores, read_manifest, require_file, write_atomic, write_json,
    write_manifest,
};

#[derive(Debug, Subcommand)]
pub enum CurateCmd {
    /// Apply duration, volume, MOS and MLM thresholds (and an optional NSFW word list).
    Filter(FilterArgs),
    /// Ward clustering of x-vectors and one random representative per cluster.
    Cluster(ClusterArgs),
    /// Channel-disjoint train/valid/test split.
    Split(SplitArgs),
    /// Derive gender labels from descriptions.
    LabelGender(LabelArgs),
    /// Keep videos with enough voice-related comments.
    Keywords(KeywordArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Manifest of kept records.
    #[arg(long)]
    out: PathBuf,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Newline-separated word list; records whose transcription contains one are dropped.
    #[arg(long)]
    nsfw_words: Option<PathBuf>,
    #[arg(long)]
    min_duration: Option<f64>,
    #[arg(long)]
    max_duration: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    min_volume: Option<f64>,
    #[arg(long)]
    min_mos: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    max_mlm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Vector file holding the x-vectors; its file stem is the store name.
    #[arg(long, required = true)]
    xvectors: Vec<PathBuf>,
    #[arg(long)]
    k: usize,
    /// CSV of `id,cluster,representative`.
    #[arg(long)]
    out: PathBuf,
    /// Manifest of the selected representatives.
    #[arg(long)]
    representatives: Option<PathBuf>,
    /// Full merge sequence as JSON.
    #[arg(long)]
    tree: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Receives train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KeywordArgs {
    /// JSON Lines of `{"video_id": .., "comments": [..]}`.
    #[arg(long)]
    comments: PathBuf,
    /// Selected video ids, one per line; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    min_matching_comments: Option<usize>,
}

pub fn run(cmd: CurateCmd, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    match cmd {
        CurateCmd::Filter(a) => filter(a, cfg),
        CurateCmd::Cluster(a) => cluster(a, seed),
        CurateCmd::Split(a) => split(a, cfg, seed),
        CurateCmd::LabelGender(a) => label_gender(a, cfg),
        CurateCmd::Keywords(a) => keywords(a, cfg),
    }
}

fn filter(a: FilterArgs, cfg: &RunConfig) -> CliResult<()> {
    let mut t = cfg.thresholds;
    let overrides = [
        (a.min_duration, &mut t.min_duration_s),
        (a.max_duration, &mut t.max_duration_s),
        (a.min_volume, &mut t.min_volume_dbfs),
        (a.min_mos, &mut t.min_nisqa_mos),
        (a.max_mlm, &mut t.max_mlm_score),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    t.validate()?;
    let records = read_manifest(&a.manifest)?;
    let (mut kept, report) = apply_quality_filters(&records, &t);

    let mut rejected: BTreeMap<&str, usize> = RejectReason::ALL
        .iter()
        .map(|r| (r.as_str(), report.rejected.get(r).copied().unwrap_or(0)))
        .collect();
    if let Some(path) = &a.nsfw_words {
        require_file(path)?;
        let words: BTreeSet<String> = std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let (clean, dropped) = nsfw_filter(&kept, &words);
        rejected.insert("nsfw", dropped.len());
        kept = clean;
    }
    write_manifest(&a.out, &kept)?;
    let summary = json!({
        "input": records.len(),
        "kept": kept.len(),
        "rejected": rejected,
        "thresholds": t,
    });
    emit_json(a.report.as_deref(), &summary)
}

fn cluster(a: ClusterArgs, seed: u64) -> CliResult<()> {
    let records = read_manifest(&a.manifest)?;
    let paths: Vec<&std::path::Path> = a.xvectors.iter().map(|p| p.as_path()).collect();
    let stores = load_stores(&paths)?;
    let rows = records
        .iter()
        .map(|r| stores.resolve(r, RefKind::XVector).map(|v| v.to_vec()))
        .collect::<Result<Vec<Vec<f32>>, _>>()?;
    let dim = rows.first().map_or(0, |r| r.len());
    let store = VectorStore::from_rows(dim, rows)?;
    let (tree, assignment) = ward_cluster(&store, a.k)?;
    let pairs: Vec<(String, usize)> = records
        .iter()
        .map(|r| r.id.clone())
        .zip(assignment.iter().copied())
        .collect();
    let reps: BTreeSet<String> = select_representatives(&pairs, seed)?.into_iter().collect();

    let mut csv = String::from("id,cluster,representative\n");
    for (id, c) in &pairs {
        writeln!(csv, "{id},{c},{}", reps.contains(id)).unwrap();
    }
    write_atomic(&a.out, csv.as_bytes())?;
    if let Some(p) = &a.representatives {
        let chosen: Vec<_> = records
            .iter()
            .filter(|r| reps.contains(&r.id))
            .cloned()
            .collect();
        write_manifest(p, &chosen)?;
    }
    if let Some(p) = &a.tree {
        write_json(p, &tree)?;
    }
    eprintln!("clustered {} segments into {} clusters", records.len(), a.k);
    Ok(())
}

fn split(a: SplitArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let fr = (
        a.train_fraction.unwrap_or(cfg.split.train),
        a.valid_fraction.unwrap_or(cfg.split.valid),
        a.test_fraction.unwrap_or(cfg.split.test),
    );
    let records = read_manifest(&a.manifest)?;
    let split = split_by_channel(&records, fr, seed)?;
    let mut summary = serde_json::Map::new();
    for (name, part) in ["train", "valid", "test"].into_iter().zip(split.parts()) {
        let members: Vec<_> = records
            .iter()
            .filter(|r| part.contains(&r.id))
            .cloned()
            .collect();
        let channels: BTreeSet<&str> = members.iter().map(|r| r.channel_id.as_str()).collect();
        write_manifest(&a.out_dir.join(format!("{name}.jsonl")), &members)?;
        summary.insert(
            name.into(),
            json!({ "segments": members.len(), "channels": channels.len() }),
        );
    }
    emit_json(None, &summary)
}

fn label_gender(a: LabelArgs, cfg: &RunConfig) -> CliResult<()> {
    let mut records = read_manifest(&a.manifest)?;
    let mut counts: BTreeMap<&str, usize> = [
        Gender::Male,
        Gender::Female,
        Gender::Nonbinary,
        Gender::NotIndicated,
    ]
    .into_iter()
    .map(|g| (g.as_str(), 0))
    .collect();
    for r in &mut records {
        let g = label_gender_with(r.description.as_deref().unwrap_or(""), &cfg.gender_markers);
        r.gender_label = Some(g);
        *counts.get_mut(g.as_str()).unwrap() += 1;
    }
    write_manifest(&a.out, &records)?;
    emit_json(None, &counts)
}

fn keywords(a: KeywordArgs, cfg: &RunConfig) -> CliResult<()> {
    let mut k = cfg.keywords.clone();
    if let Some(m) = a.min_matching_comments {
        k.min_matching_comments = m;
    }
    if k.keywords.is_empty() {
        return Err(CliError::validation("config", "keyword set is empty"));
    }
    require_file(&a.comments)?;
    let text = std::fs::read_to_string(&a.comments)?;
    let videos = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<VideoComments>(l).map_err(|e| {
                CliError::validation(
                    "input",
                    format!("{} line {}: {e}", a.comments.display(), i + 1),
                )
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = String::new();
    for id in keyword_comment_filter(&videos, &k) {
        out.push_str(&id);
        out.push('\n');
    }
    emit(a.out.as_deref(), &out)
}
