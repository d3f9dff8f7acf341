//! Exact gradients of `L = L_clap + alpha * L_feat`, finite-difference
//! checking, Adam, and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::SpeechFeatures;
use crate::loss::{clap_loss_with_grad, feat_loss, total_loss, BatchLossBreakdown, LossError};
use crate::manifest::{Gender, ManifestError, RefKind, SegmentRecord, StoreSet};
use crate::model::{dot, Matrix, Mlp, MlpTrace, Modality, ModelError, ParamSet, RetrievalModel};
use crate::retrieval::{gender_accuracy_from_embeddings, EmbeddingIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("batch size {batch_size} exceeds the {available} available training pairs")]
    BatchTooLarge { batch_size: usize, available: usize },
    #[error("pair set mismatch: {0}")]
    PairSetMismatch(String),
    #[error("record {0:?} lacks feature columns (f0_mean_hz, energy_std, speaking_rate)")]
    MissingFeatures(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("epoch callback failed: {0}")]
    Callback(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub alpha: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-6,
            batch_size: 48,
            epochs: 90,
            checkpoint_every: 5,
            alpha: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be > 0");
        }
        Ok(())
    }
}

/// Encoder inputs and normalized ground-truth features for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub audio: Matrix,
    pub text: Matrix,
    pub features: Vec<[f64; 3]>,
}

/// Aligned training pairs: records, frozen encoder vectors and raw features.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub records: Vec<SegmentRecord>,
    pub audio: Matrix,
    pub text: Matrix,
    pub features: Vec<SpeechFeatures>,
}

impl PairSet {
    pub fn new(
        records: Vec<SegmentRecord>,
        audio: Matrix,
        text: Matrix,
        features: Vec<SpeechFeatures>,
    ) -> Result<Self, TrainError> {
        let n = records.len();
        if audio.rows() != n || text.rows() != n || features.len() != n {
            return Err(TrainError::PairSetMismatch(format!(
                "{n} records, {} audio rows, {} text rows, {} feature rows",
                audio.rows(),
                text.rows(),
                features.len()
            )));
        }
        Ok(Self {
            records,
            audio,
            text,
            features,
        })
    }

    /// Resolves audio and text references and reads the feature columns.
    pub fn from_manifest(records: &[SegmentRecord], stores: &StoreSet) -> Result<Self, TrainError> {
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut audio = Vec::with_capacity(records.len());
        let mut text = Vec::with_capacity(records.len());
        let mut feats = Vec::with_capacity(records.len());
        for r in records {
            audio.push(widen(stores.resolve(r, RefKind::Audio)?));
            text.push(widen(stores.resolve(r, RefKind::Text)?));
            feats.push(
                SpeechFeatures::from_record(r)
                    .ok_or_else(|| TrainError::MissingFeatures(r.id.clone()))?,
            );
        }
        Self::new(
            records.to_vec(),
            Matrix::from_rows(&audio)?,
            Matrix::from_rows(&text)?,
            feats,
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn batch(&self, model: &RetrievalModel, idx: &[usize]) -> Batch {
        Batch {
            audio: self.audio.select_rows(idx),
            text: self.text.select_rows(idx),
            features: idx
                .iter()
                .map(|&i| model.normalizer.normalize(self.features[i]))
                .collect(),
        }
    }
}

/// Loss breakdown without gradients.
pub fn evaluate_loss(
    model: &RetrievalModel,
    batch: &Batch,
    alpha: f64,
) -> Result<BatchLossBreakdown, TrainError> {
    let out = model.forward_batch(&batch.audio, &batch.text)?;
    let (l_clap, _) = clap_loss_with_grad(&out.sim)?;
    let feat = feat_loss(&batch.features, &out.audio_feat, &out.text_feat)?;
    Ok(total_loss(l_clap, feat, alpha)?)
}

/// Unit vector of `v`, or zero at the origin (subgradient of the norm).
fn unit_or_zero(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 {
        [v[0] / n, v[1] / n, v[2] / n]
    } else {
        [0.0; 3]
    }
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Back through `e = y / |y|` into the projection head.
fn backprop_projection(
    head: &Mlp,
    x: &[f64],
    trace: &MlpTrace,
    embedding: &[f64],
    norm: f64,
    d_embed: &[f64],
    grad: &mut Mlp,
) {
    let radial = dot(embedding, d_embed);
    let d_y: Vec<f64> = d_embed
        .iter()
        .zip(embedding)
        .map(|(g, e)| (g - e * radial) / norm)
        .collect();
    head.backward(x, trace, &d_y, grad);
}

/// Analytic gradients of the total loss for every trainable tensor.
pub fn backward(
    model: &RetrievalModel,
    batch: &Batch,
    alpha: f64,
) -> Result<(BatchLossBreakdown, ParamSet), TrainError> {
    let trace = model.forward_trace(&batch.audio, &batch.text)?;
    let out = &trace.output;
    let (l_clap, d_sim) = clap_loss_with_grad(&out.sim)?;
    let feat = feat_loss(&batch.features, &out.audio_feat, &out.text_feat)?;
    let breakdown = total_loss(l_clap, feat, alpha)?;

    let n = batch.audio.rows();
    let d = model.config.embed_dim;
    let inv_tau = 1.0 / model.tau();
    let mut grads = model.params.zeros_like();

    // sim = Ea Et^T / tau, so d/dlog_tau of sim_ij is -sim_ij.
    let mut d_ea = Matrix::zeros(n, d);
    let mut d_et = Matrix::zeros(n, d);
    let mut d_log_tau = 0.0;
    for i in 0..n {
        for j in 0..n {
            let g = d_sim.get(i, j);
            if g == 0.0 {
                continue;
            }
            d_log_tau -= g * out.sim.get(i, j);
            let s = g * inv_tau;
            let (ea_i, et_j) = (out.audio_embed.row(i), out.text_embed.row(j));
            for k in 0..d {
                d_ea.row_mut(i)[k] += s * et_j[k];
                d_et.row_mut(j)[k] += s * ea_i[k];
            }
        }
    }
    grads.log_tau = d_log_tau;

    if alpha > 0.0 {
        for i in 0..n {
            let (fa, ft, fg) = (&out.audio_feat[i], &out.text_feat[i], &batch.features[i]);
            let ua = unit_or_zero(sub3(fa, fg));
            let ut = unit_or_zero(sub3(ft, fg));
            let uc = unit_or_zero(sub3(fa, ft));
            let d_fa: Vec<f64> = (0..3).map(|k| alpha * (ua[k] + uc[k])).collect();
            let d_ft: Vec<f64> = (0..3).map(|k| alpha * (ut[k] - uc[k])).collect();
            let back_a = model.params.feat_audio.backward(
                out.audio_embed.row(i),
                &trace.audio_feat[i],
                &d_fa,
                &mut grads.feat_audio,
            );
            let back_t = model.params.feat_text.backward(
                out.text_embed.row(i),
                &trace.text_feat[i],
                &d_ft,
                &mut grads.feat_text,
            );
            for k in 0..d {
                d_ea.row_mut(i)[k] += back_a[k];
                d_et.row_mut(i)[k] += back_t[k];
            }
        }
    }

    for i in 0..n {
        backprop_projection(
            &model.params.proj_audio,
            batch.audio.row(i),
            &trace.audio_proj[i],
            out.audio_embed.row(i),
            trace.audio_norm[i],
            d_ea.row(i),
            &mut grads.proj_audio,
        );
        backprop_projection(
            &model.params.proj_text,
            batch.text.row(i),
            &trace.text_proj[i],
            out.text_embed.row(i),
            trace.text_norm[i],
            d_et.row(i),
            &mut grads.proj_text,
        );
    }
    grads.all_finite().map_err(TrainError::NonFiniteGradient)?;
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Denominator floor for relative error, so entries where both estimates
/// are essentially zero do not dominate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences of step `h`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(
    model: &RetrievalModel,
    batch: &Batch,
    alpha: f64,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    let (_, analytic) = backward(model, batch, alpha)?;
    let mut probe = model.clone();
    let mut checks = Vec::new();
    let names: Vec<(&'static str, usize)> = model
        .params
        .tensors()
        .iter()
        .map(|(n, t)| (*n, t.len()))
        .collect();
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let a_tensor = analytic.tensors()[ti].1.to_vec();
        let mut check = TensorCheck {
            name: name.to_string(),
            len,
            max_rel_err: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for k in 0..len {
            let orig = probe.params.tensors()[ti].1[k];
            probe.params.tensors_mut()[ti].1[k] = orig + h;
            let plus = evaluate_loss(&probe, batch, alpha)?.total;
            probe.params.tensors_mut()[ti].1[k] = orig - h;
            let minus = evaluate_loss(&probe, batch, alpha)?.total;
            probe.params.tensors_mut()[ti].1[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = a_tensor[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
        }
        checks.push(check);
    }
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors: checks,
        max_rel_err,
        tolerance,
    })
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub config: AdamConfig,
    step: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64, config: AdamConfig) -> Self {
        Self {
            learning_rate,
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update. `log_tau` is left untouched when frozen.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, train_tau: bool) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let lr = self.learning_rate;
        let grads = grads.tensors();
        for ((((name, p), (_, m)), (_, v)), (_, g)) in params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            if name == "log_tau" && !train_tau {
                continue;
            }
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Epochs (1-based) at which checkpoints are written: every
/// `checkpoint_every` epochs plus the final one.
pub fn checkpoint_epochs(epochs: usize, checkpoint_every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=epochs)
        .filter(|e| checkpoint_every > 0 && e % checkpoint_every == 0)
        .collect();
    if out.last() != Some(&epochs) && epochs > 0 {
        out.push(epochs);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean: BatchLossBreakdown,
    pub tau: f64,
    pub valid_gender_acc_at_10: Option<f64>,
    pub checkpoint: bool,
    #[serde(skip)]
    pub step_losses: Vec<BatchLossBreakdown>,
}

#[derive(Debug, Clone)]
pub struct BestEpoch {
    pub epoch: usize,
    pub accuracy: f64,
    pub model: RetrievalModel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RetrievalModel,
    /// Epoch with the highest validation gender accuracy (earliest on ties).
    pub best: Option<BestEpoch>,
    pub log: Vec<EpochLog>,
}

/// Macro gender accuracy@10 on a validation set, or `None` when it does not
/// contain both male and female labels.
pub fn validation_gender_accuracy(
    model: &RetrievalModel,
    valid: &PairSet,
    k: usize,
) -> Result<Option<f64>, TrainError> {
    let has = |g| valid.records.iter().any(|r| r.gender_label == Some(g));
    if valid.is_empty() || !has(Gender::Male) || !has(Gender::Female) {
        return Ok(None);
    }
    let mut rows = Vec::with_capacity(valid.len());
    let mut queries = Vec::new();
    for i in 0..valid.len() {
        rows.push(model.project(Modality::Audio, valid.audio.row(i))?);
        if let Some(g @ (Gender::Male | Gender::Female)) = valid.records[i].gender_label {
            queries.push((model.project(Modality::Text, valid.text.row(i))?, g));
        }
    }
    let index = EmbeddingIndex::new(
        valid.records.iter().map(|r| r.id.clone()).collect(),
        Matrix::from_rows(&rows)?,
        valid.records.clone(),
    )?;
    Ok(Some(
        gender_accuracy_from_embeddings(&index, &queries, k)?.macro_accuracy,
    ))
}

pub fn train(
    model: RetrievalModel,
    train_set: &PairSet,
    valid_set: Option<&PairSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with_callback(model, train_set, valid_set, cfg, |_, _| Ok(()))
}

/// Runs the epoch loop. `on_epoch` sees each epoch's log and the model after
/// that epoch; it is where callers persist checkpoints.
pub fn train_with_callback<F>(
    mut model: RetrievalModel,
    train_set: &PairSet,
    valid_set: Option<&PairSet>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&EpochLog, &RetrievalModel) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.batch_size > train_set.len() {
        return Err(TrainError::BatchTooLarge {
            batch_size: cfg.batch_size,
            available: train_set.len(),
        });
    }
    let ckpt = checkpoint_epochs(cfg.epochs, cfg.checkpoint_every);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate, cfg.adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<BestEpoch> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        for (step, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let batch = train_set.batch(&model, idx);
            let (loss, grads) = backward(&model, &batch, cfg.alpha)?;
            if !loss.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            opt.step(&mut model.params, &grads, model.config.tau_learnable);
            model.clamp_tau();
            step_losses.push(loss);
        }
        let steps = step_losses.len() as f64;
        let mut mean = BatchLossBreakdown::default();
        for s in &step_losses {
            mean.l_clap += s.l_clap / steps;
            mean.l_feat_audio += s.l_feat_audio / steps;
            mean.l_feat_text += s.l_feat_text / steps;
            mean.l_feat_cross += s.l_feat_cross / steps;
            mean.l_feat += s.l_feat / steps;
            mean.total += s.total / steps;
        }
        let acc = match valid_set {
            Some(v) => validation_gender_accuracy(&model, v, 10)?,
            None => None,
        };
        if let Some(a) = acc {
            if best.as_ref().is_none_or(|b| a > b.accuracy) {
                best = Some(BestEpoch {
                    epoch,
                    accuracy: a,
                    model: model.clone(),
                });
            }
        }
        let entry = EpochLog {
            epoch,
            steps: step_losses.len(),
            mean,
            tau: model.tau(),
            valid_gender_acc_at_10: acc,
            checkpoint: ckpt.contains(&epoch),
            step_losses,
        };
        on_epoch(&entry, &model)?;
        log.push(entry);
    }
    Ok(TrainOutcome { model, best, log })
}
