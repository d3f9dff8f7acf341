//! Symmetric contrastive loss, feature-prediction losses and their combination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("similarity matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite similarity at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alpha must be a finite non-negative number, got {0}")]
    BadAlpha(f64),
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_sim(sim: &Matrix) -> Result<usize, LossError> {
    let n = sim.rows();
    if n == 0 || sim.cols() != n {
        return Err(LossError::NotSquare {
            rows: n,
            cols: sim.cols(),
        });
    }
    for i in 0..n {
        for j in 0..n {
            if !sim.get(i, j).is_finite() {
                return Err(LossError::NonFinite(i, j));
            }
        }
    }
    Ok(n)
}

/// Symmetric InfoNCE over a similarity matrix whose diagonal holds the
/// matched pairs: the mean over rows and columns of the softmax negative
/// log-likelihood of the diagonal entry.
pub fn clap_loss(sim: &Matrix) -> Result<f64, LossError> {
    Ok(clap_loss_with_grad(sim)?.0)
}

/// Loss and its gradient with respect to every entry of `sim`.
pub fn clap_loss_with_grad(sim: &Matrix) -> Result<(f64, Matrix), LossError> {
    let n = check_sim(sim)?;
    let row_lse: Vec<f64> = (0..n)
        .map(|i| log_sum_exp((0..n).map(|j| sim.get(i, j))))
        .collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| sim.get(i, j))))
        .collect();
    let scale = 1.0 / (2.0 * n as f64);
    let mut loss = 0.0;
    for i in 0..n {
        loss += (row_lse[i] - sim.get(i, i)) + (col_lse[i] - sim.get(i, i));
    }
    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s = sim.get(i, j);
            let mut g = (s - row_lse[i]).exp() + (s - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            grad.set(i, j, g * scale);
        }
    }
    Ok((loss * scale, grad))
}

/// Batch-summed Euclidean distances: (truth vs audio, truth vs text, audio vs text).
pub fn feat_loss(
    truth: &[[f64; 3]],
    audio: &[[f64; 3]],
    text: &[[f64; 3]],
) -> Result<(f64, f64, f64), LossError> {
    if truth.len() != audio.len() || truth.len() != text.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} truth rows, {} audio rows, {} text rows",
            truth.len(),
            audio.len(),
            text.len()
        )));
    }
    let dist = |a: &[f64; 3], b: &[f64; 3]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut out = (0.0, 0.0, 0.0);
    for ((g, a), t) in truth.iter().zip(audio).zip(text) {
        out.0 += dist(g, a);
        out.1 += dist(g, t);
        out.2 += dist(a, t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchLossBreakdown {
    pub l_clap: f64,
    pub l_feat_audio: f64,
    pub l_feat_text: f64,
    pub l_feat_cross: f64,
    pub l_feat: f64,
    pub total: f64,
}

pub fn total_loss(
    l_clap: f64,
    feat: (f64, f64, f64),
    alpha: f64,
) -> Result<BatchLossBreakdown, LossError> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(LossError::BadAlpha(alpha));
    }
    let l_feat = feat.0 + feat.1 + feat.2;
    Ok(BatchLossBreakdown {
        l_clap,
        l_feat_audio: feat.0,
        l_feat_text: feat.1,
        l_feat_cross: feat.2,
        l_feat,
        total: l_clap + alpha * l_feat,
    })
}
