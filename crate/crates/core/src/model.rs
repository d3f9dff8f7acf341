//! Trainable heads on top of frozen, pre-pooled encoder vectors.
//!
//! Two projection heads map audio and text encoder outputs into a shared,
//! L2-normalized embedding space; two feature heads predict the normalized
//! 3-dimensional speech feature vector from those embeddings. The temperature
//! is stored as `log_tau` so it stays positive under gradient updates.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureNormalizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VXCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 100.0;
pub const FEATURE_DIM: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("batch mismatch: {0}")]
    BatchMismatch(String),
    #[error("projection produced a zero vector; cannot normalize")]
    ZeroVector,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub audio_in_dim: usize,
    pub text_in_dim: usize,
    pub embed_dim: usize,
    pub proj_hidden_dim: usize,
    pub feat_hidden_dim: usize,
    pub feat_out_dim: usize,
    pub tau_init: f64,
    pub tau_learnable: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio_in_dim: 768,
            text_in_dim: 768,
            embed_dim: 512,
            proj_hidden_dim: 512,
            feat_hidden_dim: 512,
            feat_out_dim: FEATURE_DIM,
            tau_init: 1.0 / (1.0f64 / 0.07).ln(),
            tau_learnable: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("audio_in_dim", self.audio_in_dim),
            ("text_in_dim", self.text_in_dim),
            ("embed_dim", self.embed_dim),
            ("proj_hidden_dim", self.proj_hidden_dim),
            ("feat_hidden_dim", self.feat_hidden_dim),
        ];
        for (name, d) in dims {
            if d == 0 || d > u32::MAX as usize {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if self.feat_out_dim != FEATURE_DIM {
            return Err(ModelError::InvalidConfig(format!(
                "feat_out_dim must be {FEATURE_DIM}, got {}",
                self.feat_out_dim
            )));
        }
        if !(self.tau_init.is_finite() && self.tau_init > 0.0) {
            return Err(ModelError::InvalidConfig("tau_init must be > 0".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Audio => self.audio_in_dim,
            Modality::Text => self.text_in_dim,
        }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::BatchMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(ModelError::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix with rows picked by `idx`.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

/// Intermediate values of one `Mlp` evaluation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub pre_activation: Vec<f64>,
    pub activation: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            hidden: Linear::zeros(in_dim, hidden_dim),
            out: Linear::zeros(hidden_dim, out_dim),
        }
    }

    fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::init(in_dim, hidden_dim, rng),
            out: Linear::init(hidden_dim, out_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn trace(&self, x: &[f64]) -> MlpTrace {
        let pre_activation = self.hidden.forward(x);
        let activation: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
        let output = self.out.forward(&activation);
        MlpTrace {
            pre_activation,
            activation,
            output,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).output
    }

    /// Accumulates parameter gradients for upstream gradient `d_out` into
    /// `grad` and returns the gradient with respect to the input.
    pub fn backward(&self, x: &[f64], t: &MlpTrace, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let (h_dim, in_dim) = (self.hidden.out_dim, self.hidden.in_dim);
        let mut d_act = vec![0.0; h_dim];
        for (o, &g) in d_out.iter().enumerate() {
            grad.out.bias[o] += g;
            let w_row = &self.out.weight[o * h_dim..(o + 1) * h_dim];
            let gw_row = &mut grad.out.weight[o * h_dim..(o + 1) * h_dim];
            for j in 0..h_dim {
                gw_row[j] += g * t.activation[j];
                d_act[j] += g * w_row[j];
            }
        }
        let mut d_x = vec![0.0; in_dim];
        for (j, &z) in t.pre_activation.iter().enumerate() {
            if z <= 0.0 {
                continue;
            }
            let dz = d_act[j];
            grad.hidden.bias[j] += dz;
            let w_row = &self.hidden.weight[j * in_dim..(j + 1) * in_dim];
            let gw_row = &mut grad.hidden.weight[j * in_dim..(j + 1) * in_dim];
            for k in 0..in_dim {
                gw_row[k] += dz * x[k];
                d_x[k] += dz * w_row[k];
            }
        }
        d_x
    }
}

/// Every trainable tensor. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub proj_audio: Mlp,
    pub proj_text: Mlp,
    pub feat_audio: Mlp,
    pub feat_text: Mlp,
    pub log_tau: f64,
}

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            proj_audio: Mlp::zeros(cfg.audio_in_dim, cfg.proj_hidden_dim, cfg.embed_dim),
            proj_text: Mlp::zeros(cfg.text_in_dim, cfg.proj_hidden_dim, cfg.embed_dim),
            feat_audio: Mlp::zeros(cfg.embed_dim, cfg.feat_hidden_dim, cfg.feat_out_dim),
            feat_text: Mlp::zeros(cfg.embed_dim, cfg.feat_hidden_dim, cfg.feat_out_dim),
            log_tau: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Mlp| Mlp::zeros(m.hidden.in_dim, m.hidden.out_dim, m.out.out_dim);
        Self {
            proj_audio: z(&self.proj_audio),
            proj_text: z(&self.proj_text),
            feat_audio: z(&self.feat_audio),
            feat_text: z(&self.feat_text),
            log_tau: 0.0,
        }
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out: Vec<(&'static str, &[f64])> = Vec::with_capacity(17);
        for (names, m) in [
            (PROJ_AUDIO_NAMES, &self.proj_audio),
            (PROJ_TEXT_NAMES, &self.proj_text),
            (FEAT_AUDIO_NAMES, &self.feat_audio),
            (FEAT_TEXT_NAMES, &self.feat_text),
        ] {
            out.push((names[0], &m.hidden.weight));
            out.push((names[1], &m.hidden.bias));
            out.push((names[2], &m.out.weight));
            out.push((names[3], &m.out.bias));
        }
        out.push(("log_tau", std::slice::from_ref(&self.log_tau)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::with_capacity(17);
        for (names, m) in [
            (PROJ_AUDIO_NAMES, &mut self.proj_audio),
            (PROJ_TEXT_NAMES, &mut self.proj_text),
            (FEAT_AUDIO_NAMES, &mut self.feat_audio),
            (FEAT_TEXT_NAMES, &mut self.feat_text),
        ] {
            out.push((names[0], &mut m.hidden.weight));
            out.push((names[1], &mut m.hidden.bias));
            out.push((names[2], &mut m.out.weight));
            out.push((names[3], &mut m.out.bias));
        }
        out.push(("log_tau", std::slice::from_mut(&mut self.log_tau)));
        out
    }

    pub fn all_finite(&self) -> Result<(), &'static str> {
        for (name, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(name);
            }
        }
        Ok(())
    }
}

const PROJ_AUDIO_NAMES: [&str; 4] = [
    "proj_audio.w1",
    "proj_audio.b1",
    "proj_audio.w2",
    "proj_audio.b2",
];
const PROJ_TEXT_NAMES: [&str; 4] = [
    "proj_text.w1",
    "proj_text.b1",
    "proj_text.w2",
    "proj_text.b2",
];
const FEAT_AUDIO_NAMES: [&str; 4] = [
    "feat_audio.w1",
    "feat_audio.b1",
    "feat_audio.w2",
    "feat_audio.b2",
];
const FEAT_TEXT_NAMES: [&str; 4] = [
    "feat_text.w1",
    "feat_text.b1",
    "feat_text.w2",
    "feat_text.b2",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalizer: FeatureNormalizer,
}

/// Embeddings, feature predictions and the scaled similarity matrix of a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub audio_embed: Matrix,
    pub text_embed: Matrix,
    pub audio_feat: Vec<[f64; 3]>,
    pub text_feat: Vec<[f64; 3]>,
    /// `sim[i][j] = audio_embed[i] . text_embed[j] / tau`
    pub sim: Matrix,
}

/// Per-row traces needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub output: ForwardOutput,
    pub audio_proj: Vec<MlpTrace>,
    pub text_proj: Vec<MlpTrace>,
    pub audio_feat: Vec<MlpTrace>,
    pub text_feat: Vec<MlpTrace>,
    pub audio_norm: Vec<f64>,
    pub text_norm: Vec<f64>,
}

pub fn init_model(cfg: &ModelConfig) -> Result<RetrievalModel, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ParamSet {
        proj_audio: Mlp::init(
            cfg.audio_in_dim,
            cfg.proj_hidden_dim,
            cfg.embed_dim,
            &mut rng,
        ),
        proj_text: Mlp::init(
            cfg.text_in_dim,
            cfg.proj_hidden_dim,
            cfg.embed_dim,
            &mut rng,
        ),
        feat_audio: Mlp::init(
            cfg.embed_dim,
            cfg.feat_hidden_dim,
            cfg.feat_out_dim,
            &mut rng,
        ),
        feat_text: Mlp::init(
            cfg.embed_dim,
            cfg.feat_hidden_dim,
            cfg.feat_out_dim,
            &mut rng,
        ),
        log_tau: cfg.tau_init.clamp(TAU_MIN, TAU_MAX).ln(),
    };
    Ok(RetrievalModel {
        config: cfg.clone(),
        params,
        normalizer: FeatureNormalizer::identity(),
    })
}

fn normalize_vector(y: &[f64]) -> Result<(Vec<f64>, f64), ModelError> {
    let norm = l2_norm(y);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(ModelError::ZeroVector);
    }
    Ok((y.iter().map(|v| v / norm).collect(), norm))
}

impl RetrievalModel {
    pub fn tau(&self) -> f64 {
        self.params.log_tau.exp()
    }

    /// Keeps the temperature inside `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_tau(&mut self) {
        self.params.log_tau = self.params.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    fn proj(&self, m: Modality) -> &Mlp {
        match m {
            Modality::Audio => &self.params.proj_audio,
            Modality::Text => &self.params.proj_text,
        }
    }

    fn feat(&self, m: Modality) -> &Mlp {
        match m {
            Modality::Audio => &self.params.feat_audio,
            Modality::Text => &self.params.feat_text,
        }
    }

    /// Unit-norm embedding of one encoder vector.
    pub fn project(&self, m: Modality, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let expected = self.config.in_dim(m);
        if x.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                actual: x.len(),
            });
        }
        Ok(normalize_vector(&self.proj(m).forward(x))?.0)
    }

    /// Feature prediction (in normalized feature space) from an embedding.
    pub fn predict_features(&self, m: Modality, e: &[f64]) -> Result<[f64; 3], ModelError> {
        if e.len() != self.config.embed_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.embed_dim,
                actual: e.len(),
            });
        }
        let f = self.feat(m).forward(e);
        Ok([f[0], f[1], f[2]])
    }

    pub fn forward_batch(
        &self,
        audio_in: &Matrix,
        text_in: &Matrix,
    ) -> Result<ForwardOutput, ModelError> {
        Ok(self.forward_trace(audio_in, text_in)?.output)
    }

    pub fn forward_trace(
        &self,
        audio_in: &Matrix,
        text_in: &Matrix,
    ) -> Result<ForwardTrace, ModelError> {
        let n = audio_in.rows();
        if n == 0 {
            return Err(ModelError::BatchMismatch("batch is empty".into()));
        }
        if text_in.rows() != n {
            return Err(ModelError::BatchMismatch(format!(
                "{n} audio rows but {} text rows",
                text_in.rows()
            )));
        }
        for (m, mat) in [(Modality::Audio, audio_in), (Modality::Text, text_in)] {
            if mat.cols() != self.config.in_dim(m) {
                return Err(ModelError::DimensionMismatch {
                    expected: self.config.in_dim(m),
                    actual: mat.cols(),
                });
            }
        }
        let d = self.config.embed_dim;
        let side = |m: Modality, input: &Matrix| -> Result<_, ModelError> {
            let mut embed = Matrix::zeros(n, d);
            let mut proj_traces = Vec::with_capacity(n);
            let mut feat_traces = Vec::with_capacity(n);
            let mut norms = Vec::with_capacity(n);
            let mut feats = Vec::with_capacity(n);
            for i in 0..n {
                let t = self.proj(m).trace(input.row(i));
                let (e, norm) = normalize_vector(&t.output)?;
                let ft = self.feat(m).trace(&e);
                feats.push([ft.output[0], ft.output[1], ft.output[2]]);
                embed.row_mut(i).copy_from_slice(&e);
                proj_traces.push(t);
                feat_traces.push(ft);
                norms.push(norm);
            }
            Ok((embed, proj_traces, feat_traces, norms, feats))
        };
        let (audio_embed, audio_proj, audio_feat_t, audio_norm, audio_feat) =
            side(Modality::Audio, audio_in)?;
        let (text_embed, text_proj, text_feat_t, text_norm, text_feat) =
            side(Modality::Text, text_in)?;

        let inv_tau = 1.0 / self.tau();
        let mut sim = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sim.set(i, j, dot(audio_embed.row(i), text_embed.row(j)) * inv_tau);
            }
        }
        Ok(ForwardTrace {
            output: ForwardOutput {
                audio_embed,
                text_embed,
                audio_feat,
                text_feat,
                sim,
            },
            audio_proj,
            text_proj,
            audio_feat: audio_feat_t,
            text_feat: text_feat_t,
            audio_norm,
            text_norm,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.config;
        for d in [
            c.audio_in_dim,
            c.text_in_dim,
            c.embed_dim,
            c.proj_hidden_dim,
            c.feat_hidden_dim,
            c.feat_out_dim,
        ] {
            w.u32(d as u32);
        }
        w.f64(c.tau_init);
        w.bytes(&[u8::from(c.tau_learnable)]);
        w.bytes(&c.seed.to_le_bytes());
        for v in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            w.f64(*v);
        }
        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        for (_, t) in tensors {
            w.u32(t.len() as u32);
            for v in t {
                w.f64(*v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let tau_init = r.f64()?;
        let tau_learnable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(ModelError::Corrupt(format!("bad flag byte {other}"))),
        };
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config = ModelConfig {
            audio_in_dim: dims[0],
            text_in_dim: dims[1],
            embed_dim: dims[2],
            proj_hidden_dim: dims[3],
            feat_hidden_dim: dims[4],
            feat_out_dim: dims[5],
            tau_init,
            tau_learnable,
            seed,
        };
        config
            .validate()
            .map_err(|e| ModelError::Corrupt(format!("embedded config: {e}")))?;
        let mut normalizer = FeatureNormalizer::identity();
        for v in normalizer.mean.iter_mut().chain(normalizer.std.iter_mut()) {
            *v = r.f64()?;
        }
        if !normalizer.is_valid() {
            return Err(ModelError::Corrupt("invalid normalizer".into()));
        }
        let mut params = ParamSet::zeros(&config);
        let mut tensors = params.tensors_mut();
        let count = r.u32()? as usize;
        if count != tensors.len() {
            return Err(ModelError::Corrupt(format!(
                "expected {} tensors, found {count}",
                tensors.len()
            )));
        }
        for (name, t) in tensors.iter_mut() {
            let len = r.u32()? as usize;
            if len != t.len() {
                return Err(ModelError::Corrupt(format!(
                    "tensor {name}: expected {} values, found {len}",
                    t.len()
                )));
            }
            for v in t.iter_mut() {
                *v = r.f64()?;
            }
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if let Err(name) = params.all_finite() {
            return Err(ModelError::Corrupt(format!("non-finite values in {name}")));
        }
        Ok(Self {
            config,
            params,
            normalizer,
        })
    }
}

pub fn save_checkpoint(model: &RetrievalModel, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&model.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RetrievalModel, ModelError> {
    RetrievalModel::from_bytes(&fs::read(path)?)
}

#[derive(Default)]
struct ByteWriter(Vec<u8>);

impl ByteWriter {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            audio_in_dim: 6,
            text_in_dim: 5,
            embed_dim: 4,
            proj_hidden_dim: 7,
            feat_hidden_dim: 3,
            seed: 11,
            ..Default::default()
        }
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(&tiny()).unwrap();
        let b = init_model(&tiny()).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.params.tensors() {
            if name.ends_with(".w1") || name.ends_with(".w2") {
                let fan_in = match name {
                    "proj_audio.w1" => 6,
                    "proj_text.w1" => 5,
                    "proj_audio.w2" | "proj_text.w2" => 7,
                    "feat_audio.w1" | "feat_text.w1" => 4,
                    _ => 3,
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                assert!(t.iter().all(|w| w.abs() <= bound), "{name}");
            } else if name != "log_tau" {
                assert!(t.iter().all(|&b| b == 0.0), "{name}");
            }
        }
        assert!((a.tau() - 1.0 / (1.0f64 / 0.07).ln()).abs() < 1e-9);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = tiny();
        c.embed_dim = 0;
        assert!(init_model(&c).is_err());
        let mut c = tiny();
        c.tau_init = 0.0;
        assert!(init_model(&c).is_err());
        let mut c = tiny();
        c.feat_out_dim = 4;
        assert!(init_model(&c).is_err());
    }

    #[test]
    fn project_is_unit_norm_and_checks_dims() {
        let m = init_model(&tiny()).unwrap();
        let x = batch(1, 6, 1);
        let e = m.project(Modality::Audio, x.row(0)).unwrap();
        assert!((l2_norm(&e) - 1.0).abs() < 1e-6);
        assert!(matches!(
            m.project(Modality::Audio, &[0.0; 5]),
            Err(ModelError::DimensionMismatch {
                expected: 6,
                actual: 5
            })
        ));
    }

    #[test]
    fn zero_projection_is_an_error() {
        let mut m = init_model(&tiny()).unwrap();
        m.params
            .proj_audio
            .out
            .weight
            .iter_mut()
            .for_each(|w| *w = 0.0);
        assert!(matches!(
            m.project(Modality::Audio, &[1.0; 6]),
            Err(ModelError::ZeroVector)
        ));
    }

    #[test]
    fn positive_homogeneity_with_zero_bias() {
        // Nonnegative weights and inputs keep every pre-activation >= 0, so the
        // head is positively homogeneous and x, 2x share a direction.
        let mut m = init_model(&tiny()).unwrap();
        for w in m.params.proj_audio.hidden.weight.iter_mut() {
            *w = w.abs();
        }
        let x: Vec<f64> = (0..6).map(|i| 0.1 + i as f64 * 0.2).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = m.project(Modality::Audio, &x).unwrap();
        let b = m.project(Modality::Audio, &x2).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_head_examples() {
        let mut m = init_model(&tiny()).unwrap();
        let head = &mut m.params.feat_audio;
        head.hidden.weight.iter_mut().for_each(|w| *w = 0.0);
        head.out.weight.iter_mut().for_each(|w| *w = 0.0);
        head.out.bias = vec![0.5, -1.0, 2.0];
        assert_eq!(
            m.predict_features(Modality::Audio, &[0.3; 4]).unwrap(),
            [0.5, -1.0, 2.0]
        );

        // Scalar path: only e[0] -> hidden[0] -> out[1] is non-zero.
        let head = &mut m.params.feat_audio;
        head.hidden.weight[0] = 2.0;
        head.hidden.bias[0] = -0.1;
        head.out.weight[3] = 3.0; // row 1, column 0
        let e = [0.4, 0.0, 0.0, 0.0];
        let expected_mid = 3.0 * (2.0f64 * 0.4 - 0.1).max(0.0) - 1.0;
        let f = m.predict_features(Modality::Audio, &e).unwrap();
        assert!((f[1] - expected_mid).abs() < 1e-15);
        assert_eq!(f.len(), 3);
        assert!(m.predict_features(Modality::Text, &[0.0; 3]).is_err());
    }

    #[test]
    fn forward_batch_matches_pairwise_dots() {
        let m = init_model(&tiny()).unwrap();
        let (a, t) = (batch(5, 6, 2), batch(5, 5, 3));
        let out = m.forward_batch(&a, &t).unwrap();
        for i in 0..5 {
            let ea = m.project(Modality::Audio, a.row(i)).unwrap();
            assert!((l2_norm(out.audio_embed.row(i)) - 1.0).abs() < 1e-6);
            for j in 0..5 {
                let et = m.project(Modality::Text, t.row(j)).unwrap();
                assert!((out.sim.get(i, j) - dot(&ea, &et) / m.tau()).abs() < 1e-6);
                assert!(out.sim.get(i, j) * m.tau() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn single_row_batch_is_cosine_bounded() {
        let m = init_model(&tiny()).unwrap();
        let out = m.forward_batch(&batch(1, 6, 4), &batch(1, 5, 5)).unwrap();
        assert!(out.sim.get(0, 0).abs() <= 1.0 / m.tau() + 1e-12);
    }

    #[test]
    fn identical_embeddings_put_max_on_diagonal() {
        let mut c = tiny();
        c.text_in_dim = 6;
        let mut m = init_model(&c).unwrap();
        m.params.proj_text = m.params.proj_audio.clone();
        let a = batch(4, 6, 6);
        let out = m.forward_batch(&a, &a).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(out.sim.get(i, i) >= out.sim.get(i, j) - 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let m = init_model(&tiny()).unwrap();
        let (a, t) = (batch(4, 6, 7), batch(4, 5, 8));
        let perm = [2, 0, 3, 1];
        let base = m.forward_batch(&a, &t).unwrap();
        let p = m
            .forward_batch(&a.select_rows(&perm), &t.select_rows(&perm))
            .unwrap();
        for (pi, &i) in perm.iter().enumerate() {
            assert_eq!(p.audio_embed.row(pi), base.audio_embed.row(i));
            assert_eq!(p.text_feat[pi], base.text_feat[i]);
            for (pj, &j) in perm.iter().enumerate() {
                assert_eq!(p.sim.get(pi, pj), base.sim.get(i, j));
            }
        }
    }

    #[test]
    fn forward_rejects_mismatched_batches() {
        let m = init_model(&tiny()).unwrap();
        assert!(m.forward_batch(&batch(3, 6, 1), &batch(2, 5, 1)).is_err());
        assert!(m.forward_batch(&batch(3, 5, 1), &batch(3, 5, 1)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut m = init_model(&tiny()).unwrap();
        m.normalizer = FeatureNormalizer {
            mean: [200.0, 0.05, 7.0],
            std: [40.0, 0.01, 1.5],
        };
        let bytes = m.to_bytes();
        let back = RetrievalModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let (a, t) = (batch(3, 6, 9), batch(3, 5, 10));
        let x = m.forward_batch(&a, &t).unwrap();
        let y = back.forward_batch(&a, &t).unwrap();
        assert_eq!(x.sim, y.sim);

        assert!(matches!(
            RetrievalModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Corrupt(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            RetrievalModel::from_bytes(&wrong_version),
            Err(ModelError::VersionMismatch { found: 2, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(RetrievalModel::from_bytes(&extra).is_err());
    }
}
