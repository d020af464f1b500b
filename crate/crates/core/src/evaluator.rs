//! Sentence-level detection and correction metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::CorrectionExample;
use crate::error::{Error, Result};
use crate::pinyin::PinyinTable;

/// Characters whose predictions are ignored under the SIGHAN13 rule.
pub const SIGHAN13_IGNORED: [char; 3] = ['的', '得', '地'];

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Rates with the convention that a zero denominator gives 0.
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = div(tp, predicted);
        let recall = div(tp, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub detection: Prf,
    pub correction: Prf,
    /// Positions with `x = y` but `ŷ ≠ y`.
    pub overcorrections: usize,
    /// Positions with `x ≠ y` and `ŷ ≠ y`.
    pub undercorrections: usize,
    pub sentences: usize,
    pub with_errors: usize,
    pub predicted_positive: usize,
    pub detection_tp: usize,
    pub correction_tp: usize,
}

impl EvalReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, String); 13] = [
            ("sentences", self.sentences.to_string()),
            ("sentences_with_errors", self.with_errors.to_string()),
            ("predicted_positive", self.predicted_positive.to_string()),
            ("detection_tp", self.detection_tp.to_string()),
            ("detection_precision", format!("{:.4}", self.detection.precision)),
            ("detection_recall", format!("{:.4}", self.detection.recall)),
            ("detection_f1", format!("{:.4}", self.detection.f1)),
            ("correction_tp", self.correction_tp.to_string()),
            ("correction_precision", format!("{:.4}", self.correction.precision)),
            ("correction_recall", format!("{:.4}", self.correction.recall)),
            ("correction_f1", format!("{:.4}", self.correction.f1)),
            ("overcorrections", self.overcorrections.to_string()),
            ("undercorrections", self.undercorrections.to_string()),
        ];
        for (k, v) in &rows {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }

    /// The report as one line of JSON.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// At every position where the source holds 的, 得 or 地, the prediction is
/// replaced by the source character.
pub fn postprocess_sighan13(source: &[char], prediction: &[char]) -> Vec<char> {
    prediction
        .iter()
        .zip(source)
        .map(|(&p, &x)| if SIGHAN13_IGNORED.contains(&x) { x } else { p })
        .collect()
}

fn check_lengths(index: usize, ex: &CorrectionExample, prediction: &[char]) -> Result<()> {
    if ex.source.len() != ex.target.len() || ex.source.len() != prediction.len() {
        return Err(Error::LengthMismatch {
            index,
            detail: format!(
                "source {}, target {}, prediction {}",
                ex.source.len(),
                ex.target.len(),
                prediction.len()
            ),
        });
    }
    Ok(())
}

/// Scores predictions against gold corrections.
pub fn evaluate(examples: &[CorrectionExample], predictions: &[Vec<char>], postproc13: bool) -> Result<EvalReport> {
    if examples.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            index: examples.len().min(predictions.len()),
            detail: format!("{} examples but {} predictions", examples.len(), predictions.len()),
        });
    }
    let mut r = EvalReport {
        sentences: examples.len(),
        ..Default::default()
    };
    for (i, (ex, pred)) in examples.iter().zip(predictions).enumerate() {
        check_lengths(i, ex, pred)?;
        let processed;
        let pred: &[char] = if postproc13 {
            processed = postprocess_sighan13(&ex.source, pred);
            &processed
        } else {
            pred
        };
        let mut gold_err = false;
        let mut same_positions = true;
        let mut all_correct = true;
        let mut changed = false;
        for ((&x, &y), &p) in ex.source.iter().zip(&ex.target).zip(pred) {
            gold_err |= x != y;
            changed |= p != x;
            same_positions &= (x != y) == (p != x);
            all_correct &= p == y;
            if p != y {
                if x == y {
                    r.overcorrections += 1;
                } else {
                    r.undercorrections += 1;
                }
            }
        }
        r.with_errors += usize::from(gold_err);
        r.predicted_positive += usize::from(changed);
        r.detection_tp += usize::from(gold_err && same_positions);
        r.correction_tp += usize::from(gold_err && all_correct);
    }
    r.detection = Prf::from_counts(r.detection_tp, r.predicted_positive, r.with_errors);
    r.correction = Prf::from_counts(r.correction_tp, r.predicted_positive, r.with_errors);
    Ok(r)
}

/// Fraction of positions where the prediction equals the target.
pub fn token_accuracy(examples: &[CorrectionExample], predictions: &[Vec<char>]) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for (i, (ex, pred)) in examples.iter().zip(predictions).enumerate() {
        check_lengths(i, ex, pred)?;
        right += ex.target.iter().zip(pred).filter(|(y, p)| y == p).count();
        total += pred.len();
    }
    if total == 0 {
        return Err(Error::EmptyInput("evaluation set".into()));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhoneticRecall {
    pub restored: usize,
    pub total: usize,
    pub recall: f64,
}

/// Recall over misspelled positions whose wrong and right characters share
/// (initial, final) in their default readings.
pub fn phonetic_recall(
    examples: &[CorrectionExample],
    predictions: &[Vec<char>],
    table: &PinyinTable,
) -> Result<PhoneticRecall> {
    let (mut restored, mut total) = (0, 0);
    for (i, (ex, pred)) in examples.iter().zip(predictions).enumerate() {
        check_lengths(i, ex, pred)?;
        for ((&x, &y), &p) in ex.source.iter().zip(&ex.target).zip(pred) {
            if x == y {
                continue;
            }
            let (Some(sx), Some(sy)) = (table.char_to_syllable(x), table.char_to_syllable(y)) else {
                continue;
            };
            if sx.key() == sy.key() {
                total += 1;
                restored += usize::from(p == y);
            }
        }
    }
    Ok(PhoneticRecall {
        restored,
        total,
        recall: if total == 0 {
            0.0
        } else {
            restored as f64 / total as f64
        },
    })
}
