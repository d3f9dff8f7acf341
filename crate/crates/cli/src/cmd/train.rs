use std::path::PathBuf;

use clap::Args;
use serde_json::json;
use voxret_core::features::FeatureNormalizer;
use voxret_core::model::init_model;
use voxret_core::training::{train_with_callback, PairSet, TrainError};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{emit_json, load_stores, read_manifest, write_atomic};

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Audio encoder vectors; the file stem must match the manifest's audio references.
    #[arg(long)]
    audio_vecs: PathBuf,
    #[arg(long)]
    text_vecs: PathBuf,
    /// Validation manifest for per-epoch gender accuracy@10 and best-epoch selection.
    #[arg(long)]
    valid_manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

pub fn run(a: TrainArgs, cfg: &RunConfig, seed: u64) -> CliResult<()> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.alpha = a.alpha.unwrap_or(tc.alpha);
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.learning_rate = a.learning_rate.unwrap_or(tc.learning_rate);
    tc.checkpoint_every = a.checkpoint_every.unwrap_or(tc.checkpoint_every);
    tc.validate()?;

    let stores = load_stores(&[&a.audio_vecs, &a.text_vecs])?;
    let records = read_manifest(&a.manifest)?;
    let train_set = PairSet::from_manifest(&records, &stores)?;
    let valid_set = match &a.valid_manifest {
        Some(p) => Some(PairSet::from_manifest(&read_manifest(p)?, &stores)?),
        None => None,
    };
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }

    let mut mc = cfg.model.clone();
    mc.seed = seed;
    mc.audio_in_dim = train_set.audio.cols();
    mc.text_in_dim = train_set.text.cols();
    let mut model = init_model(&mc)?;
    model.normalizer = FeatureNormalizer::fit(&train_set.features)?;

    let mut log_text = String::new();
    let out_dir = a.out_dir.clone();
    let outcome = train_with_callback(model, &train_set, valid_set.as_ref(), &tc, |e, m| {
        let line = serde_json::to_string(e).map_err(|err| TrainError::Callback(err.to_string()))?;
        eprintln!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
        let persist = |name: String, bytes: &[u8]| {
            write_atomic(&out_dir.join(name), bytes)
                .map_err(|err| TrainError::Callback(err.to_string()))
        };
        persist("train_log.jsonl".into(), log_text.as_bytes())?;
        if e.checkpoint {
            persist(format!("epoch_{:03}.ckpt", e.epoch), &m.to_bytes())?;
        }
        Ok(())
    })?;

    write_atomic(&a.out_dir.join("final.ckpt"), &outcome.model.to_bytes())?;
    if let Some(b) = &outcome.best {
        write_atomic(&a.out_dir.join("best.ckpt"), &b.model.to_bytes())?;
    }
    let last = outcome
        .log
        .last()
        .ok_or_else(|| CliError::runtime("train", "no epochs were run"))?;
    emit_json(
        None,
        &json!({
            "epochs": tc.epochs,
            "steps_per_epoch": last.steps,
            "final_loss": last.mean,
            "final_tau": last.tau,
            "best_epoch": outcome.best.as_ref().map(|b| b.epoch),
            "best_valid_gender_acc_at_10": outcome.best.as_ref().map(|b| b.accuracy),
        }),
    )
}
