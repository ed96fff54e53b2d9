//! Voxel-wise detection metrics.
//!
//! Binarization is always `score ≥ threshold`. Ranking metrics treat equal
//! scores as one group that enters together.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Role, Volume};

/// Anomaly scores of one subject with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub scores: Volume,
    pub mask: Volume,
}

impl Subject {
    pub fn new(id: impl Into<String>, scores: Volume, mask: Volume) -> Result<Self> {
        scores.require_role(Role::Score, "subject scores")?;
        mask.require_role(Role::Mask, "subject mask")?;
        if scores.dims() != mask.dims() {
            return Err(Error::Dimension(format!(
                "scores {} vs mask {}",
                scores.dims(),
                mask.dims()
            )));
        }
        Ok(Subject {
            id: id.into(),
            scores,
            mask,
        })
    }
}

/// `2|P∩G| / (|P| + |G|)`, with two empty sets scoring 1.
pub fn dice_bits(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let (mut both, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        both += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok(dice_from_counts(both, p, g))
}

pub fn dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.require_role(Role::Mask, "dice prediction")?;
    gt.require_role(Role::Mask, "dice ground truth")?;
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("{} vs {}", pred.dims(), gt.dims())));
    }
    dice_bits(&pred.mask_bits(), &gt.mask_bits())
}

fn dice_from_counts(tp: usize, predicted: usize, positives: usize) -> f64 {
    if predicted + positives == 0 {
        1.0
    } else {
        (2 * tp) as f64 / (predicted + positives) as f64
    }
}

/// Pooled scores and labels, sorted by descending score.
struct Ranked {
    scores: Vec<f64>,
    labels: Vec<bool>,
    positives: usize,
    negatives: usize,
}

/// One group of equal scores: the score and the running totals after it.
struct Step {
    score: f64,
    tp: usize,
    fp: usize,
}

impl Ranked {
    fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::InvalidArgument(format!("score {bad}")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let positives = labels.iter().filter(|&&l| l).count();
        Ok(Ranked {
            scores: order.iter().map(|&i| scores[i]).collect(),
            labels: order.iter().map(|&i| labels[i]).collect(),
            positives,
            negatives: labels.len() - positives,
        })
    }

    /// Cumulative counts at each distinct threshold, highest first.
    fn steps(&self) -> Vec<Step> {
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for i in 0..self.scores.len() {
            if self.labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            if i + 1 == self.scores.len() || self.scores[i + 1] != self.scores[i] {
                out.push(Step {
                    score: self.scores[i],
                    tp,
                    fp,
                });
            }
        }
        out
    }
}

fn pool(subjects: &[Subject]) -> Result<(Vec<f64>, Vec<bool>)> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects".into()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in subjects {
        scores.extend(s.scores.data().iter().map(|&x| x as f64));
        labels.extend(s.mask.mask_bits());
    }
    Ok((scores, labels))
}

/// Maximum pooled DICE over every distinct score used as threshold, and
/// the lowest threshold attaining it.
pub fn best_dice_scores(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let ranked = Ranked::new(scores, labels)?;
    if ranked.positives == 0 {
        return Err(Error::UndefinedMetric("best DICE needs a positive voxel".into()));
    }
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for step in ranked.steps() {
        let d = dice_from_counts(step.tp, step.tp + step.fp, ranked.positives);
        // steps run from high to low thresholds, so >= keeps the lowest
        if d >= best.0 {
            best = (d, step.score);
        }
    }
    Ok(best)
}

pub fn best_dice(subjects: &[Subject]) -> Result<(f64, f64)> {
    let (scores, labels) = pool(subjects)?;
    best_dice_scores(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceStats {
    pub per_subject: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn dice_at_threshold(subjects: &[Subject], threshold: f64) -> Result<DiceStats> {
    if !threshold.is_finite() {
        return Err(Error::InvalidArgument(format!("threshold {threshold}")));
    }
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects".into()));
    }
    let per_subject = subjects
        .iter()
        .map(|s| {
            let pred: Vec<bool> = s.scores.data().iter().map(|&x| x as f64 >= threshold).collect();
            dice_bits(&pred, &s.mask.mask_bits())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_subject.len() as f64;
    let mean = per_subject.iter().sum::<f64>() / n;
    let std = (per_subject.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(DiceStats { per_subject, mean, std })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let ranked = Ranked::new(scores, labels)?;
    if ranked.positives == 0 || ranked.negatives == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    // walk groups from the top; each positive beats every negative below
    let mut wins = 0.0f64;
    let (mut tp_prev, mut fp_prev) = (0usize, 0usize);
    for step in ranked.steps() {
        let pos = (step.tp - tp_prev) as f64;
        let neg = (step.fp - fp_prev) as f64;
        let below = (ranked.negatives - step.fp) as f64;
        wins += pos * below + 0.5 * pos * neg;
        tp_prev = step.tp;
        fp_prev = step.fp;
    }
    Ok(wins / (ranked.positives as f64 * ranked.negatives as f64))
}

/// `Σ (R_k − R_{k−1})·P_k` over descending score groups.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let ranked = Ranked::new(scores, labels)?;
    if ranked.positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs a positive".into()));
    }
    let p = ranked.positives as f64;
    let mut ap = 0.0;
    let mut tp_prev = 0;
    for step in ranked.steps() {
        if step.tp > tp_prev {
            let precision = step.tp as f64 / (step.tp + step.fp) as f64;
            ap += (step.tp - tp_prev) as f64 / p * precision;
        }
        tp_prev = step.tp;
    }
    Ok(ap)
}

/// False-positive rate at the highest threshold whose recall reaches
/// `recall`.
pub fn fpr_at_recall(scores: &[f64], labels: &[bool], recall: f64) -> Result<f64> {
    if !(recall > 0.0 && recall <= 1.0) {
        return Err(Error::InvalidArgument(format!("recall {recall} outside (0, 1]")));
    }
    let ranked = Ranked::new(scores, labels)?;
    if ranked.positives == 0 || ranked.negatives == 0 {
        return Err(Error::UndefinedMetric("FPR at recall needs both classes".into()));
    }
    let p = ranked.positives as f64;
    let step = ranked
        .steps()
        .into_iter()
        .find(|s| s.tp as f64 / p >= recall)
        .expect("the lowest threshold has recall 1");
    Ok(step.fp as f64 / ranked.negatives as f64)
}

/// Summary of a scored test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub best_dice: f64,
    pub best_dice_threshold: f64,
    /// Threshold chosen on the validation split.
    pub threshold: f64,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub ap: f64,
    pub auroc: f64,
    pub fpr_at_95_recall: f64,
    pub subjects: usize,
    pub voxels: usize,
    pub positive_voxels: usize,
    pub per_subject_dice: Vec<SubjectDice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    pub id: String,
    pub dice: f64,
}

impl MetricsReport {
    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("metrics report", e.to_string()))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("metrics report", e.to_string()))
    }
}

/// Validation threshold: the pooled best-DICE threshold on `validation`.
pub fn validation_threshold(validation: &[Subject]) -> Result<f64> {
    best_dice(validation).map(|(_, t)| t)
}

pub fn evaluate(test: &[Subject], threshold: f64) -> Result<MetricsReport> {
    let (scores, labels) = pool(test)?;
    let (best, best_threshold) = best_dice_scores(&scores, &labels)?;
    let stats = dice_at_threshold(test, threshold)?;
    Ok(MetricsReport {
        best_dice: best,
        best_dice_threshold: best_threshold,
        threshold,
        dice_mean: stats.mean,
        dice_std: stats.std,
        ap: average_precision(&scores, &labels)?,
        auroc: auroc(&scores, &labels)?,
        fpr_at_95_recall: fpr_at_recall(&scores, &labels, 0.95)?,
        subjects: test.len(),
        voxels: scores.len(),
        positive_voxels: labels.iter().filter(|&&l| l).count(),
        per_subject_dice: test
            .iter()
            .zip(stats.per_subject)
            .map(|(s, dice)| SubjectDice { id: s.id.clone(), dice })
            .collect(),
    })
}
