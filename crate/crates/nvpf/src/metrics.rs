//! Label spaces and evaluation metrics.
//!
//! Two distinct label sets: an 8-way set for individual faces and a
//! 3-way valence set for groups, frames, and videos. The report carries
//! overall accuracy (mAC), unweighted average recall (UAR), macro-F1,
//! per-class accuracy, and the full confusion matrix.
//!
//! Averaged metrics (UAR, macro-F1) run over classes that actually occur
//! in the ground truth; classes with zero support contribute nothing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Group/frame/video-level emotion class.
///
/// The discriminant order is the fixed tie-breaking order everywhere:
/// positive < negative < neutral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupLabel {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
}

pub const GROUP_LABELS: [GroupLabel; 3] = [
    GroupLabel::Positive,
    GroupLabel::Negative,
    GroupLabel::Neutral,
];

impl GroupLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<GroupLabel> {
        GROUP_LABELS
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid("class", format!("unknown class index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GroupLabel::Positive => "positive",
            GroupLabel::Negative => "negative",
            GroupLabel::Neutral => "neutral",
        }
    }
}

/// Index of the largest score; ties resolve to the lowest index, which is
/// the fixed class order positive < negative < neutral.
pub fn argmax_class(scores: &[f64; 3]) -> GroupLabel {
    let mut best = 0;
    for i in 1..3 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    GROUP_LABELS[best]
}

/// Face-level emotion category (rows of the action-unit table).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceLabel {
    Happy,
    Sad,
    Fearful,
    Angry,
    Surprised,
    Disgusted,
    Awed,
    Neutral,
}

pub const FACE_LABELS: [FaceLabel; 8] = [
    FaceLabel::Happy,
    FaceLabel::Sad,
    FaceLabel::Fearful,
    FaceLabel::Angry,
    FaceLabel::Surprised,
    FaceLabel::Disgusted,
    FaceLabel::Awed,
    FaceLabel::Neutral,
];

impl FaceLabel {
    /// Face-to-valence map used to derive group labels from members.
    pub fn valence(self) -> GroupLabel {
        match self {
            FaceLabel::Happy | FaceLabel::Surprised | FaceLabel::Awed => GroupLabel::Positive,
            FaceLabel::Sad | FaceLabel::Fearful | FaceLabel::Angry | FaceLabel::Disgusted => {
                GroupLabel::Negative
            }
            FaceLabel::Neutral => GroupLabel::Neutral,
        }
    }
}

/// Wall-clock bookkeeping attached to a report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RuntimeStats {
    pub samples: usize,
    pub seconds: f64,
}

/// Evaluation summary for one dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Overall accuracy: correct / total.
    #[serde(rename = "mAC")]
    pub mac: f64,
    /// Mean of per-class recalls over classes with support.
    #[serde(rename = "UAR")]
    pub uar: f64,
    /// Mean of per-class F1 scores over classes with support.
    #[serde(rename = "macro-F1")]
    pub macro_f1: f64,
    /// Recall per class in fixed order (positive, negative, neutral);
    /// `None` where the class has no ground-truth support.
    pub per_class_accuracy: [Option<f64>; 3],
    /// Rows are true classes, columns predicted, fixed class order.
    pub confusion_matrix: [[usize; 3]; 3],
    pub runtime_stats: RuntimeStats,
}

/// Build a report from aligned prediction/truth slices.
pub fn evaluate_predictions(
    predictions: &[GroupLabel],
    truths: &[GroupLabel],
    runtime: RuntimeStats,
) -> Result<EvalReport> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions vs {} labels", predictions.len(), truths.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("evaluate", "empty prediction set"));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, t) in predictions.iter().zip(truths) {
        confusion[t.index()][p.index()] += 1;
    }
    Ok(report_from_confusion(confusion, runtime))
}

/// All metrics derive from the confusion matrix; computing them in one
/// place keeps the arithmetic order fixed (bit-reproducible reports).
pub fn report_from_confusion(confusion: [[usize; 3]; 3], runtime: RuntimeStats) -> EvalReport {
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let mac = correct as f64 / total as f64;

    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut supported = 0usize;
    let mut per_class = [None; 3];
    for c in 0..3 {
        let support: usize = confusion[c].iter().sum();
        if support == 0 {
            continue;
        }
        supported += 1;
        let recall = confusion[c][c] as f64 / support as f64;
        per_class[c] = Some(recall);
        recall_sum += recall;
        let predicted: usize = (0..3).map(|t| confusion[t][c]).sum();
        let f1 = if predicted == 0 {
            0.0 // never predicted: precision undefined, F1 taken as 0
        } else {
            let precision = confusion[c][c] as f64 / predicted as f64;
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        };
        f1_sum += f1;
    }
    EvalReport {
        mac,
        uar: recall_sum / supported as f64,
        macro_f1: f1_sum / supported as f64,
        per_class_accuracy: per_class,
        confusion_matrix: confusion,
        runtime_stats: runtime,
    }
}

impl EvalReport {
    /// Stable plain-text rendering (field order fixed for diffing).
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mAC: {}\n", self.mac));
        s.push_str(&format!("UAR: {}\n", self.uar));
        s.push_str(&format!("macro-F1: {}\n", self.macro_f1));
        for (c, r) in GROUP_LABELS.iter().zip(&self.per_class_accuracy) {
            match r {
                Some(v) => s.push_str(&format!("accuracy[{}]: {}\n", c.name(), v)),
                None => s.push_str(&format!("accuracy[{}]: n/a\n", c.name())),
            }
        }
        s.push_str("confusion (rows = true, cols = predicted):\n");
        for (c, row) in GROUP_LABELS.iter().zip(&self.confusion_matrix) {
            s.push_str(&format!(
                "  {:<8} {:>6} {:>6} {:>6}\n",
                c.name(),
                row[0],
                row[1],
                row[2]
            ));
        }
        s.push_str(&format!(
            "samples: {}\nseconds: {}\n",
            self.runtime_stats.samples, self.runtime_stats.seconds
        ));
        s
    }
}
