//! Fusion of the per-modality states, emotion classification, training loss,
//! and evaluation metrics.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::tensor::{ParamId, ParamStore, Tape, TensorError, Var};

/// Numerical floor inside the cross-entropy log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot evaluate empty prediction/label lists")]
    Empty,
    #[error("predictions and labels differ in length: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
}

/// Fusion + two-layer classifier parameters.
pub struct ClassifierHead {
    w_fuse: ParamId,
    w_hidden: ParamId,
    b_hidden: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl ClassifierHead {
    /// `num_states` is the number of fused modality states (2 or 3).
    pub fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        model_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        num_states: usize,
    ) -> Self {
        Self {
            w_fuse: store.add_uniform(
                format!("{prefix}.w_fuse"),
                model_dim,
                num_states * model_dim,
                rng,
            ),
            w_hidden: store.add_uniform(format!("{prefix}.w_hidden"), hidden_dim, model_dim, rng),
            b_hidden: store.add_zeros(format!("{prefix}.b_hidden"), 1, hidden_dim),
            w_out: store.add_uniform(format!("{prefix}.w_out"), num_classes, hidden_dim, rng),
            b_out: store.add_zeros(format!("{prefix}.b_out"), 1, num_classes),
        }
    }

    /// Concatenates the final modality states along features and merges them
    /// to one m x D matrix.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &[Var],
    ) -> Result<Var, TensorError> {
        let cat = tape.concat_cols(states)?;
        let w = tape.param(store, self.w_fuse);
        tape.matmul_nt(cat, w)
    }

    /// ReLU hidden layer, softmax output, argmax predictions with
    /// lowest-index tie-break.
    pub fn classify(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: Var,
    ) -> Result<(Var, Vec<usize>), TensorError> {
        let wh = tape.param(store, self.w_hidden);
        let bh = tape.param(store, self.b_hidden);
        let hidden_pre = tape.linear(fused, wh, bh)?;
        let hidden = tape.relu(hidden_pre)?;
        let wo = tape.param(store, self.w_out);
        let bo = tape.param(store, self.b_out);
        let logits = tape.linear(hidden, wo, bo)?;
        let probs = tape.softmax_rows(logits, None)?;
        let preds = argmax_rows(tape.value(probs).data(), tape.value(probs).cols());
        Ok((probs, preds))
    }
}

/// Row-wise argmax; ties resolve to the lowest index.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Summed cross-entropy over the utterances of one conversation:
/// -sum_i log p_i[label_i], still on the tape. The caller divides by the
/// batch-wide utterance count so a batch loss averages per utterance.
pub fn cross_entropy_sum(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
) -> Result<Var, TensorError> {
    let picked = tape.pick(probs, labels)?;
    let logs = tape.log_clamped(picked, LOG_FLOOR);
    let total = tape.sum_all(logs);
    Ok(tape.scale(total, -1.0))
}

/// Cross-entropy averaged over `total_utterances` (the batch-wide count).
pub fn loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    total_utterances: usize,
) -> Result<Var, TensorError> {
    let summed = cross_entropy_sum(tape, probs, labels)?;
    Ok(tape.scale(summed, 1.0 / total_utterances as f64))
}

/// Classification quality report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// Row-major C x C counts; rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Confusion matrix as CSV: header row of predicted classes, one row per
    /// true class.
    pub fn confusion_csv(&self, class_names: &[String]) -> String {
        let c = self.confusion.len();
        let name = |i: usize| {
            class_names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("class-{i}"))
        };
        let mut out = String::from("true\\pred");
        for j in 0..c {
            out.push(',');
            out.push_str(&name(j));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&name(i));
            for &count in row {
                out.push(',');
                out.push_str(&count.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy, per-class F1, support-weighted F1 and the confusion matrix.
pub fn evaluate(
    preds: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<EvalReport, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= num_classes {
            return Err(MetricsError::ClassOutOfRange {
                index: y,
                classes: num_classes,
            });
        }
        if p >= num_classes {
            return Err(MetricsError::ClassOutOfRange {
                index: p,
                classes: num_classes,
            });
        }
        confusion[y][p] += 1;
    }
    let total = preds.len() as f64;
    let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let accuracy = correct as f64 / total;

    let mut per_class_f1 = Vec::with_capacity(num_classes);
    let mut weighted_f1 = 0.0;
    for c in 0..num_classes {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..num_classes).map(|r| confusion[r][c]).sum();
        let fp = predicted as f64 - tp;
        let fn_ = support as f64 - tp;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class_f1.push(f1);
        weighted_f1 += (support as f64 / total) * f1;
    }
    Ok(EvalReport {
        accuracy,
        weighted_f1,
        per_class_f1,
        confusion,
    })
}
