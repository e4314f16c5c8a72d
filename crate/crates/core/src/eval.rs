//! Metrics over the 14 findings and gaze-token predictions.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::answer::{self, FINDINGS};
pub use crate::answer::{parse_fixed_answer, render_fixed_answer};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::heads;
use crate::model::{build_sequence, forward_traced, ModelState, Sample};
use crate::supervision::GazeSupervision;
use crate::train::Variant;
use crate::{Labels, NUM_GAZE_TOKENS, NUM_LABELS};

/// Probability that a random positive outranks a random negative, ties
/// counted one half. `None` when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average 1-based ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Element accuracy over all decisions and the macro F1 over labels with
/// any positive in prediction or truth (`None` when no label qualifies).
pub fn acc_f1(scores: &[[f64; NUM_LABELS]], labels: &[Labels], threshold: f64) -> (f64, Option<f64>) {
    assert_eq!(scores.len(), labels.len());
    let mut correct = 0usize;
    let mut f1s = Vec::new();
    for j in 0..NUM_LABELS {
        let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
        for (s, y) in scores.iter().zip(labels) {
            let pred = s[j] >= threshold;
            let truth = y[j] == 1;
            correct += usize::from(pred == truth);
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                _ => {}
            }
        }
        if tp + fp + fne > 0 {
            f1s.push(2.0 * tp as f64 / (2 * tp + fp + fne) as f64);
        }
    }
    let total = scores.len() * NUM_LABELS;
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let f1 = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
    (acc, f1)
}

/// Patch ids of the `k` largest logits, ties broken by lower id.
pub fn topk_logits(row: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..row.len()).collect();
    ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// `(hits, supervised tokens)` for one sample.
pub fn gaze_topk_counts(logits: ArrayView2<f64>, sup: &GazeSupervision, k: usize) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (i, targets) in sup.token_targets.iter().enumerate() {
        if targets.is_empty() {
            continue;
        }
        total += 1;
        let row = logits.row(i).to_vec();
        let top = topk_logits(&row, k);
        hits += usize::from(top.iter().any(|p| targets.contains(p)));
    }
    (hits, total)
}

/// Fraction of supervised tokens whose targets intersect the top-`k`
/// predicted patches; `None` when every target list is empty.
pub fn gaze_topk_accuracy(logits: ArrayView2<f64>, sup: &GazeSupervision, k: usize) -> Option<f64> {
    let (hits, total) = gaze_topk_counts(logits, sup, k);
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Pooled top-`k` gaze accuracy of `state` over the supervised samples.
pub fn dataset_gaze_topk(state: &ModelState, data: &[Sample], k: usize) -> Result<Option<f64>> {
    let mut hits = 0;
    let mut total = 0;
    for s in data {
        let Some(sup) = &s.supervision else { continue };
        let logits = gaze_logits_for(state, s)?;
        let (h, t) = gaze_topk_counts(logits.view(), sup, k);
        hits += h;
        total += t;
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

/// `4 × P` gaze logits of one sample.
pub fn gaze_logits_for(state: &ModelState, s: &Sample) -> Result<ndarray::Array2<f64>> {
    let (mut tokens, layout) = build_sequence(s, &state.config)?;
    tokens.truncate(layout.gaze_positions[NUM_GAZE_TOKENS - 1] + 1);
    let trace = forward_traced(&tokens, &s.image, state, false)?;
    Ok(heads::gaze_logits(trace.hidden.view(), &layout, &state.gaze_head))
}

/// Classifier probabilities read at the decision token.
pub fn classifier_scores(state: &ModelState, s: &Sample) -> Result<[f64; NUM_LABELS]> {
    let (mut tokens, layout) = build_sequence(s, &state.config)?;
    tokens.truncate(layout.decision_index + 1);
    let trace = forward_traced(&tokens, &s.image, state, false)?;
    let p = heads::classify(trace.hidden.row(layout.decision_index), &state.cls_head);
    Ok(std::array::from_fn(|j| p[j]))
}

/// Greedy decoding of the yes/no slots with the template tokens forced,
/// returned as rendered answer text.
pub fn decode_answer(state: &ModelState, s: &Sample) -> Result<String> {
    let (mut tokens, layout) = build_sequence(s, &state.config)?;
    let start = layout.answer_span.0;
    for j in 0..NUM_LABELS {
        let pos = start + answer::decision_offset(j);
        let trace = forward_traced(&tokens[..pos], &s.image, state, true)?;
        let logits = trace.lm_logits.expect("requested");
        let row = logits.row(pos - 1).to_vec();
        tokens[pos] = topk_logits(&row, 1)[0] as u32;
    }
    Ok(answer::detokenize_answer(&tokens[start..]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ClassifierHead,
    ParsedText,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifier_head" => Ok(EvalMode::ClassifierHead),
            "parsed_text" => Ok(EvalMode::ParsedText),
            other => Err(Error::Config(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub per_label_auroc: Vec<Option<f64>>,
    pub macro_auroc: Option<f64>,
    pub accuracy: f64,
    pub macro_f1: Option<f64>,
    pub n_samples: usize,
    /// Findings whose AUROC is undefined because one class is missing.
    pub skipped_labels: Vec<String>,
    /// Decoded answers that failed to parse (scored as all "no").
    pub parse_failures: usize,
    pub gaze_top1: Option<f64>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let mode = match self.mode {
            EvalMode::ClassifierHead => "classifier_head",
            EvalMode::ParsedText => "parsed_text",
        };
        let _ = writeln!(out, "mode: {mode}   samples: {}", self.n_samples);
        if self.mode == EvalMode::ClassifierHead {
            let _ = writeln!(out, "{:<28} {:>8}", "finding", "AUROC");
            for (name, a) in FINDINGS.iter().zip(&self.per_label_auroc) {
                let _ = writeln!(out, "{name:<28} {:>8}", fmt(*a));
            }
            let _ = writeln!(out, "{:<28} {:>8}", "macro AUROC", fmt(self.macro_auroc));
        }
        let _ = writeln!(out, "{:<28} {:>8.4}", "accuracy", self.accuracy);
        let _ = writeln!(out, "{:<28} {:>8}", "macro F1", fmt(self.macro_f1));
        if self.gaze_top1.is_some() {
            let _ = writeln!(out, "{:<28} {:>8}", "gaze top-1", fmt(self.gaze_top1));
        }
        if self.mode == EvalMode::ParsedText {
            let _ = writeln!(out, "{:<28} {:>8}", "parse failures", self.parse_failures);
        }
        if !self.skipped_labels.is_empty() {
            let _ = writeln!(out, "skipped (single class): {}", self.skipped_labels.join(", "));
        }
        out
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Scores `data` with the checkpoint. When `requested` is given it must
/// match the supervision variant recorded in the checkpoint.
pub fn evaluate(
    ckpt: &Checkpoint,
    data: &[Sample],
    mode: EvalMode,
    requested: Option<Variant>,
) -> Result<MetricsReport> {
    if let Some(v) = requested {
        if v != ckpt.manifest.variant {
            return Err(Error::VariantMismatch {
                checkpoint: ckpt.manifest.variant.to_string(),
                requested: v.to_string(),
            });
        }
    }
    evaluate_state(&ckpt.state, data, mode)
}

pub fn evaluate_state(state: &ModelState, data: &[Sample], mode: EvalMode) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Validation("evaluation set is empty".into()));
    }
    let mut scores = Vec::with_capacity(data.len());
    let mut parse_failures = 0;
    for s in data {
        scores.push(match mode {
            EvalMode::ClassifierHead => classifier_scores(state, s)?,
            EvalMode::ParsedText => match parse_fixed_answer(&decode_answer(state, s)?) {
                Ok(y) => y.map(f64::from),
                Err(Error::AnswerParse { .. }) => {
                    parse_failures += 1;
                    [0.0; NUM_LABELS]
                }
                Err(e) => return Err(e),
            },
        });
    }
    let labels: Vec<Labels> = data.iter().map(|s| s.labels).collect();
    let mut per_label_auroc = vec![None; NUM_LABELS];
    let mut skipped_labels = Vec::new();
    for j in 0..NUM_LABELS {
        let y: Vec<u8> = labels.iter().map(|l| l[j]).collect();
        let sc: Vec<f64> = scores.iter().map(|s| s[j]).collect();
        match auroc(&sc, &y) {
            Some(a) => per_label_auroc[j] = Some(a),
            None => skipped_labels.push(FINDINGS[j].to_string()),
        }
    }
    let macro_auroc = if mode == EvalMode::ClassifierHead {
        let defined: Vec<f64> = per_label_auroc.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    } else {
        per_label_auroc = vec![None; NUM_LABELS];
        None
    };
    let (accuracy, macro_f1) = acc_f1(&scores, &labels, 0.5);
    let gaze_top1 = dataset_gaze_topk(state, data, 1)?;
    Ok(MetricsReport {
        mode,
        per_label_auroc,
        macro_auroc,
        accuracy,
        macro_f1,
        n_samples: data.len(),
        skipped_labels,
        parse_failures,
        gaze_top1,
    })
}
