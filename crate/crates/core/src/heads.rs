//! Gaze projection head, 14-label classifier head and the training losses.
//!
//! Every loss comes with a `*_grad` twin returning the gradient with respect
//! to the logits that feed it; the model backward pass takes it from there.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SequenceLayout;
use crate::supervision::GazeSupervision;
use crate::{Labels, NUM_GAZE_TOKENS, NUM_LABELS};

/// Probability clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Linear map from a gaze-token hidden state to logits over patches.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeHead {
    /// `P × d`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl GazeHead {
    pub fn zeros(num_patches: usize, d_model: usize) -> Self {
        Self {
            w: Array2::zeros((num_patches, d_model)),
            b: Array1::zeros(num_patches),
        }
    }

    pub fn num_patches(&self) -> usize {
        self.b.len()
    }
}

/// Linear map from the decision-token hidden state to 14 label logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead {
    /// `14 × d`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClsHead {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            w: Array2::zeros((NUM_LABELS, d_model)),
            b: Array1::zeros(NUM_LABELS),
        }
    }
}

/// Gathers the hidden rows at the four placeholder positions (`4 × d`).
pub fn gaze_hidden(hidden: ArrayView2<f64>, layout: &SequenceLayout) -> Array2<f64> {
    hidden.select(Axis(0), &layout.gaze_positions)
}

/// Row `i` is `W_g · H[p_i] + b_g`.
pub fn gaze_logits(hidden: ArrayView2<f64>, layout: &SequenceLayout, head: &GazeHead) -> Array2<f64> {
    gaze_hidden(hidden, layout).dot(&head.w.t()) + &head.b
}

fn log_softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
    row.mapv(|v| v - lse)
}

fn check_targets(s: &GazeSupervision, num_patches: usize) -> Result<()> {
    for &id in s.token_targets.iter().flatten() {
        if id >= num_patches {
            return Err(Error::PatchIndex { index: id, num_patches });
        }
    }
    Ok(())
}

/// Sum over tokens with targets of the mean patch cross-entropy; tokens with
/// an empty target list are skipped.
pub fn loss_gaze(logits: ArrayView2<f64>, s: &GazeSupervision) -> Result<f64> {
    loss_gaze_grad(logits, s).map(|(l, _)| l)
}

pub fn loss_gaze_grad(logits: ArrayView2<f64>, s: &GazeSupervision) -> Result<(f64, Array2<f64>)> {
    assert_eq!(logits.nrows(), NUM_GAZE_TOKENS);
    check_targets(s, logits.ncols())?;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.raw_dim());
    for (i, targets) in s.token_targets.iter().enumerate() {
        if targets.is_empty() {
            continue;
        }
        let logp = log_softmax_row(logits.row(i));
        let inv_k = 1.0 / targets.len() as f64;
        let term: f64 = targets.iter().map(|&p| -logp[p]).sum();
        loss += inv_k * term;

        let mut g = grad.row_mut(i);
        g.assign(&logp.mapv(f64::exp));
        for &p in targets {
            g[p] -= inv_k;
        }
    }
    Ok((loss, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cls_logits(h_last: ArrayView1<f64>, head: &ClsHead) -> Array1<f64> {
    head.w.dot(&h_last) + &head.b
}

/// `σ(W_c · h + b_c)`.
pub fn classify(h_last: ArrayView1<f64>, head: &ClsHead) -> Array1<f64> {
    cls_logits(h_last, head).mapv(sigmoid)
}

/// Label-averaged binary cross-entropy with probabilities clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn loss_cls(yhat: ArrayView1<f64>, y: &Labels) -> f64 {
    assert_eq!(yhat.len(), y.len());
    let total: f64 = yhat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / y.len() as f64
}

/// Loss and gradient with respect to the classifier logits.
pub fn loss_cls_grad(logits: ArrayView1<f64>, y: &Labels) -> (f64, Array1<f64>) {
    let yhat = logits.mapv(sigmoid);
    let n = y.len() as f64;
    let grad = Array1::from_iter(yhat.iter().zip(y).map(|(&p, &t)| {
        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
            0.0
        } else {
            (p - f64::from(t)) / n
        }
    }));
    (loss_cls(yhat.view(), y), grad)
}

/// Positions whose next-token prediction is an answer token.
pub fn lm_positions(layout: &SequenceLayout) -> std::ops::Range<usize> {
    let (start, end) = layout.answer_span;
    start - 1..end - 1
}

/// Mean next-token cross-entropy over the answer span (placeholders
/// included, visual and prompt tokens excluded).
pub fn loss_lm(lm_logits: ArrayView2<f64>, tokens: &[u32], layout: &SequenceLayout) -> f64 {
    let positions = lm_positions(layout);
    let n = positions.len() as f64;
    positions
        .map(|t| -log_softmax_row(lm_logits.row(t))[tokens[t + 1] as usize])
        .sum::<f64>()
        / n
}

pub fn loss_lm_grad(lm_logits: ArrayView2<f64>, tokens: &[u32], layout: &SequenceLayout) -> (f64, Array2<f64>) {
    let positions = lm_positions(layout);
    let n = positions.len() as f64;
    let mut grad = Array2::zeros(lm_logits.raw_dim());
    let mut loss = 0.0;
    for t in positions {
        let logp = log_softmax_row(lm_logits.row(t));
        let target = tokens[t + 1] as usize;
        loss -= logp[target];
        let mut g = grad.row_mut(t);
        g.assign(&logp.mapv(|v| v.exp() / n));
        g[target] -= 1.0 / n;
    }
    (loss / n, grad)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// `(1 - λ)·L_lm + λ·L_cls`.
pub fn loss_combined(l_lm: f64, l_cls: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok((1.0 - lambda) * l_lm + lambda * l_cls)
}

/// Per-step loss values. Components that were not computed are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_gaze: Option<f64>,
    pub l_cls: Option<f64>,
    pub l_lm: Option<f64>,
    pub l_combined: f64,
    pub lambda: Option<f64>,
}
