use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use serde_json::json;
use voxret_core::manifest::{Gender, RefKind};
use voxret_core::model::{load_checkpoint, RetrievalModel};
use voxret_core::retrieval::{
    build_index, classification_accuracy, gender_accuracy_at_k, retrieve_topk, zero_shot_classify,
    EmbeddingIndex, TemplateSet,
};

use crate::error::{CliError, CliResult};
use crate::io::{
    emit, emit_json, load_stores, read_manifest, read_store, require_file, write_atomic,
    write_manifest,
};

const INDEX_VECTORS: &str = "index.vec";
const INDEX_MANIFEST: &str = "index.jsonl";

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Audio encoder vector files referenced by the manifest (by file stem).
    #[arg(long, required = true)]
    audio_vecs: Vec<PathBuf>,
    /// Receives index.vec and index.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    /// Text encoder vectors, one query per row.
    #[arg(long)]
    query_vec: PathBuf,
    /// Restrict to these rows of the query file.
    #[arg(long, value_delimiter = ',')]
    rows: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// One `label<TAB>phrase` per line; blank lines and `#` comments skipped.
    #[arg(long)]
    templates: PathBuf,
    /// Text encoder vectors of the phrases, row i for the i-th template line.
    #[arg(long)]
    template_vecs: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Macro gender accuracy of the top-k retrieved segments.
    #[command(name = "gender-at-10")]
    GenderAt10(GenderArgs),
    /// Per-label zero-shot classification accuracy against gender labels.
    ZeroShot(ZeroShotArgs),
}

#[derive(Debug, Args)]
pub struct GenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// Query records; male and female records with a text reference are used.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, required = true)]
    text_vecs: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_model(path: &Path) -> CliResult<RetrievalModel> {
    require_file(path)?;
    load_checkpoint(path).map_err(|e| CliError::from(e).context(path.display()))
}

fn load_index(dir: &Path) -> CliResult<EmbeddingIndex> {
    let records = read_manifest(&dir.join(INDEX_MANIFEST))?;
    let store = read_store(&dir.join(INDEX_VECTORS))?;
    let ids = records.iter().map(|r| r.id.clone()).collect();
    Ok(EmbeddingIndex::from_store(ids, &store, records)?)
}

fn load_templates(model: &RetrievalModel, a: &TemplateArgs) -> CliResult<TemplateSet> {
    require_file(&a.templates)?;
    let text = std::fs::read_to_string(&a.templates)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, phrase) = line.split_once('\t').ok_or_else(|| {
            CliError::validation(
                "templates",
                format!("line {}: expected `label<TAB>phrase`", i + 1),
            )
        })?;
        entries.push((label.to_string(), phrase.to_string()));
    }
    let vecs = read_store(&a.template_vecs)?;
    if vecs.count() != entries.len() {
        return Err(CliError::validation(
            "templates",
            format!(
                "{} templates but {} template vectors",
                entries.len(),
                vecs.count()
            ),
        ));
    }
    let rows = (0..entries.len()).map(|i| vecs.row_f64(i).expect("row count checked"));
    let full = entries.into_iter().zip(rows).map(|((l, p), v)| (l, p, v));
    Ok(TemplateSet::build(model, full)?)
}

pub fn index(a: IndexArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let records = read_manifest(&a.manifest)?;
    let paths: Vec<&Path> = a.audio_vecs.iter().map(PathBuf::as_path).collect();
    let stores = load_stores(&paths)?;
    let index = build_index(&model, &records, &stores)?;
    write_atomic(&a.out_dir.join(INDEX_VECTORS), &index.to_store().to_bytes())?;
    write_manifest(&a.out_dir.join(INDEX_MANIFEST), &records)?;
    eprintln!("indexed {} segments", index.len());
    Ok(())
}

pub fn retrieve(a: RetrieveArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    let queries = read_store(&a.query_vec)?;
    let rows: Vec<usize> = if a.rows.is_empty() {
        (0..queries.count()).collect()
    } else {
        a.rows.clone()
    };
    let mut out = String::from("query\trank\tid\tscore\n");
    for q in rows {
        let v = queries.row_f64(q).ok_or_else(|| {
            CliError::validation(
                "input",
                format!("query row {q} out of range ({} rows)", queries.count()),
            )
        })?;
        let res = retrieve_topk(&index, &model, &v, a.top_k)?;
        for (rank, hit) in res.hits.iter().enumerate() {
            writeln!(out, "{q}\t{}\t{}\t{:.6}", rank + 1, hit.id, hit.score).unwrap();
        }
    }
    emit(a.out.as_deref(), &out)
}

pub fn classify(a: ClassifyArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    let templates = load_templates(&model, &a.templates)?;
    let mut out = String::from("id\tlabel\tscore\n");
    for (i, id) in index.ids().iter().enumerate() {
        let p = zero_shot_classify(index.vectors().row(i), &templates);
        writeln!(out, "{id}\t{}\t{:.6}", p.label, p.score).unwrap();
    }
    emit(a.out.as_deref(), &out)
}

pub fn eval(cmd: EvalCmd) -> CliResult<()> {
    match cmd {
        EvalCmd::GenderAt10(a) => gender_at_k(a),
        EvalCmd::ZeroShot(a) => zero_shot(a),
    }
}

fn gender_at_k(a: GenderArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    let paths: Vec<&Path> = a.text_vecs.iter().map(PathBuf::as_path).collect();
    let stores = load_stores(&paths)?;
    let mut queries = Vec::new();
    for r in read_manifest(&a.manifest)? {
        if let Some(g @ (Gender::Male | Gender::Female)) = r.gender_label {
            if r.text_vec_ref.is_some() {
                let v = stores
                    .resolve(&r, RefKind::Text)?
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                queries.push((v, g));
            }
        }
    }
    let acc = gender_accuracy_at_k(&index, &model, &queries, a.k)?;
    emit_json(
        a.out.as_deref(),
        &json!({
            "k": a.k,
            "macro_accuracy": format!("{:.6}", acc.macro_accuracy),
            "male": format!("{:.6}", acc.male),
            "female": format!("{:.6}", acc.female),
            "male_queries": acc.male_queries,
            "female_queries": acc.female_queries,
        }),
    )
}

fn zero_shot(a: ZeroShotArgs) -> CliResult<()> {
    let model = load_model(&a.model)?;
    let index = load_index(&a.index)?;
    let templates = load_templates(&model, &a.templates)?;
    let labels = templates.labels();
    let (mut predicted, mut truth) = (Vec::new(), Vec::new());
    for i in 0..index.len() {
        let Some(g) = index.record(i).and_then(|r| r.gender_label) else {
            continue;
        };
        if !labels.contains(&g.as_str()) {
            continue;
        }
        predicted.push(zero_shot_classify(index.vectors().row(i), &templates).label);
        truth.push(g.as_str().to_string());
    }
    if truth.is_empty() {
        return Err(CliError::validation(
            "retrieval",
            "no indexed segment carries a gender label matching a template label",
        ));
    }
    let per_label = classification_accuracy(&predicted, &truth)?;
    let mean = per_label.values().sum::<f64>() / per_label.len() as f64;
    let fmt: BTreeMap<&str, String> = per_label
        .iter()
        .map(|(k, v)| (k.as_str(), format!("{v:.6}")))
        .collect();
    emit_json(
        a.out.as_deref(),
        &json!({ "evaluated": truth.len(), "per_label": fmt, "macro_accuracy": format!("{mean:.6}") }),
    )
}
