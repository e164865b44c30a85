//! Evaluation metrics: confusion matrices, pooled (micro) and class-averaged
//! (macro) F1, top-k accuracy, coarse metrics induced from fine predictions,
//! and the emotion-recognition family (weighted F1, UF1, UAR, multi-label mAP).
//!
//! Conventions: confusion rows are ground truth, columns predictions. A
//! precision or recall whose denominator is zero counts as 0. Ranking ties
//! go to the lower class id (top-k) or the lower instance index (mAP).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::LabelTaxonomy;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    /// Row-major `[gt][pred]`.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Metric("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: n,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.get(class, class)
    }

    /// Row sum: samples whose ground truth is `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(class, p)).sum()
    }

    /// Column sum: samples predicted as `class`.
    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, class)).sum()
    }

    pub fn false_positives(&self, class: usize) -> u64 {
        self.predicted(class) - self.true_positives(class)
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.support(class) - self.true_positives(class)
    }

    fn require_samples(&self) -> Result<()> {
        if self.total() == 0 {
            Err(Error::Metric("no samples".into()))
        } else {
            Ok(())
        }
    }
}

pub fn confusion_matrix(preds: &[usize], gts: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "{} predictions vs {} ground-truth labels",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&p, &g) in preds.iter().zip(gts) {
        if p >= num_classes || g >= num_classes {
            return Err(Error::Metric(format!(
                "label out of range 0..{num_classes}: pred {p}, gt {g}"
            )));
        }
        cm.counts[g * num_classes + p] += 1;
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean; exact when both inputs are equal.
fn harmonic(p: f64, r: f64) -> f64 {
    if p == r {
        p
    } else if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 from pooled TP / FP / FN over all classes.
pub fn f1_micro(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let n = cm.num_classes();
    let tp: u64 = (0..n).map(|i| cm.true_positives(i)).sum();
    let fp: u64 = (0..n).map(|i| cm.false_positives(i)).sum();
    let fn_: u64 = (0..n).map(|i| cm.false_negatives(i)).sum();
    Ok(harmonic(ratio(tp, tp + fp), ratio(tp, tp + fn_)))
}

/// F1 of the class-averaged precision and class-averaged recall.
pub fn f1_macro(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let n = cm.num_classes();
    let stats = per_class(cm);
    let p = stats.iter().map(|s| s.precision).sum::<f64>() / n as f64;
    let r = stats.iter().map(|s| s.recall).sum::<f64>() / n as f64;
    Ok(harmonic(p, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Unit,
    Percent,
}

impl Scale {
    pub fn factor(self) -> f64 {
        match self {
            Scale::Unit => 1.0,
            Scale::Percent => 100.0,
        }
    }
}

/// Mean of coarse macro, coarse micro, fine macro and fine micro F1.
pub fn f1_mean(
    macro_coarse: f64,
    micro_coarse: f64,
    macro_fine: f64,
    micro_fine: f64,
    scale: Scale,
) -> Result<f64> {
    let vals = [macro_coarse, micro_coarse, macro_fine, micro_fine];
    let max = scale.factor();
    if vals.iter().any(|v| !(0.0..=max).contains(v)) {
        return Err(Error::Metric(format!(
            "F1 values {vals:?} are not all on the {scale:?} scale"
        )));
    }
    Ok((macro_coarse + micro_coarse + macro_fine + micro_fine) / 4.0)
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The `k` highest-scoring classes, ties broken towards lower ids.
pub fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn topk_accuracy(probs: &[Vec<f64>], gts: &[usize], k: usize) -> Result<f64> {
    if probs.len() != gts.len() {
        return Err(Error::Metric("probability rows and labels differ in length".into()));
    }
    if probs.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    let n_classes = probs[0].len();
    if k == 0 || k > n_classes {
        return Err(Error::Metric(format!("k={k} outside 1..={n_classes}")));
    }
    let mut hits = 0u64;
    for (row, &g) in probs.iter().zip(gts) {
        if row.len() != n_classes || g >= n_classes {
            return Err(Error::Metric("ragged probability rows or label out of range".into()));
        }
        if top_k(row, k).contains(&g) {
            hits += 1;
        }
    }
    Ok(ratio(hits, probs.len() as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassStats> {
    (0..cm.num_classes())
        .map(|i| {
            let tp = cm.true_positives(i);
            let precision = ratio(tp, cm.predicted(i));
            let recall = ratio(tp, cm.support(i));
            ClassStats {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: cm.support(i),
            }
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let total = cm.total() as f64;
    Ok(per_class(cm)
        .iter()
        .map(|s| s.f1 * s.support as f64)
        .sum::<f64>()
        / total)
}

/// Unweighted mean of per-class F1 over classes with support.
pub fn uf1(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let stats: Vec<_> = per_class(cm).into_iter().filter(|s| s.support > 0).collect();
    Ok(stats.iter().map(|s| s.f1).sum::<f64>() / stats.len() as f64)
}

/// Unweighted mean of per-class recall over classes with support.
pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_samples()?;
    let stats: Vec<_> = per_class(cm).into_iter().filter(|s| s.support > 0).collect();
    Ok(stats.iter().map(|s| s.recall).sum::<f64>() / stats.len() as f64)
}

/// Average precision of one class over an instance ranking; `None` when the
/// class has no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let npos = positive.iter().filter(|&&p| p).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / npos as f64)
}

/// Class-wise average precision, macro-averaged over classes that have at
/// least one positive instance.
pub fn multilabel_map(scores: &[Vec<f64>], targets: &[BTreeSet<usize>]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Metric("score rows and target sets differ in length".into()));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    let n_classes = scores[0].len();
    if scores.iter().any(|r| r.len() != n_classes) {
        return Err(Error::Metric("ragged score rows".into()));
    }
    if targets.iter().flatten().any(|&t| t >= n_classes) {
        return Err(Error::Metric("target id out of range".into()));
    }
    let mut aps = Vec::new();
    for k in 0..n_classes {
        let col: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let pos: Vec<bool> = targets.iter().map(|t| t.contains(&k)).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::Metric("no positive labels anywhere".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionMetrics {
    pub f1_micro_fine: f64,
    pub f1_macro_fine: f64,
    pub f1_micro_coarse: f64,
    pub f1_macro_coarse: f64,
    pub f1_mean: f64,
    pub acc_top1_fine: f64,
    pub acc_top5_fine: f64,
    pub acc_top1_coarse: f64,
    pub per_class_fine: Vec<ClassStats>,
    pub per_class_coarse: Vec<ClassStats>,
    pub confusion_fine: Vec<Vec<u64>>,
    pub confusion_coarse: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionMetrics {
    pub acc: f64,
    pub f1_weight: f64,
    pub uf1: f64,
    pub uar: f64,
    /// Multi-label action mAP.
    pub map: f64,
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scale: Scale,
    pub num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recognition: Option<RecognitionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<EmotionMetrics>,
}

/// Coarse confusion matrix and metrics induced by mapping fine predictions
/// and labels through the taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseMetrics {
    pub confusion: ConfusionMatrix,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub acc_top1: f64,
}

pub fn coarse_metrics_from_fine(
    probs: &[Vec<f64>],
    gts: &[usize],
    taxonomy: &LabelTaxonomy,
) -> Result<CoarseMetrics> {
    if probs.len() != gts.len() {
        return Err(Error::Metric("probability rows and labels differ in length".into()));
    }
    let mut preds = Vec::with_capacity(probs.len());
    let mut truth = Vec::with_capacity(gts.len());
    for (row, &g) in probs.iter().zip(gts) {
        if row.len() != taxonomy.num_fine() {
            return Err(Error::Metric(format!(
                "probability row has {} classes, taxonomy has {}",
                row.len(),
                taxonomy.num_fine()
            )));
        }
        preds.push(taxonomy.coarse_of(argmax(row))?);
        truth.push(taxonomy.coarse_of(g)?);
    }
    let confusion = confusion_matrix(&preds, &truth, taxonomy.num_coarse())?;
    let correct = preds.iter().zip(&truth).filter(|(p, g)| p == g).count();
    Ok(CoarseMetrics {
        f1_micro: f1_micro(&confusion)?,
        f1_macro: f1_macro(&confusion)?,
        acc_top1: ratio(correct as u64, preds.len() as u64),
        confusion,
    })
}

/// Full fine/coarse report for single-label predictions.
pub fn recognition_metrics(
    probs: &[Vec<f64>],
    gts: &[usize],
    taxonomy: &LabelTaxonomy,
) -> Result<RecognitionMetrics> {
    let preds: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let fine = confusion_matrix(&preds, gts, taxonomy.num_fine())?;
    let coarse = coarse_metrics_from_fine(probs, gts, taxonomy)?;
    let f1_micro_fine = f1_micro(&fine)?;
    let f1_macro_fine = f1_macro(&fine)?;
    Ok(RecognitionMetrics {
        f1_micro_fine,
        f1_macro_fine,
        f1_micro_coarse: coarse.f1_micro,
        f1_macro_coarse: coarse.f1_macro,
        f1_mean: f1_mean(coarse.f1_macro, coarse.f1_micro, f1_macro_fine, f1_micro_fine, Scale::Unit)?,
        acc_top1_fine: topk_accuracy(probs, gts, 1)?,
        acc_top5_fine: topk_accuracy(probs, gts, 5.min(taxonomy.num_fine()))?,
        acc_top1_coarse: coarse.acc_top1,
        per_class_fine: per_class(&fine),
        per_class_coarse: per_class(&coarse.confusion),
        confusion_fine: fine.rows(),
        confusion_coarse: coarse.confusion.rows(),
    })
}

pub fn emotion_metrics(
    emotion_probs: &[Vec<f64>],
    emotion_gts: &[usize],
    num_emotions: usize,
    action_scores: &[Vec<f64>],
    action_targets: &[BTreeSet<usize>],
) -> Result<EmotionMetrics> {
    let preds: Vec<usize> = emotion_probs.iter().map(|r| argmax(r)).collect();
    let cm = confusion_matrix(&preds, emotion_gts, num_emotions)?;
    Ok(EmotionMetrics {
        acc: topk_accuracy(emotion_probs, emotion_gts, 1)?,
        f1_weight: weighted_f1(&cm)?,
        uf1: uf1(&cm)?,
        uar: uar(&cm)?,
        map: multilabel_map(action_scores, action_targets)?,
        confusion: cm.rows(),
    })
}

impl RecognitionMetrics {
    fn scaled(&self, s: f64) -> Result<Self> {
        let mut out = self.clone();
        out.f1_micro_fine *= s;
        out.f1_macro_fine *= s;
        out.f1_micro_coarse *= s;
        out.f1_macro_coarse *= s;
        out.acc_top1_fine *= s;
        out.acc_top5_fine *= s;
        out.acc_top1_coarse *= s;
        for c in out.per_class_fine.iter_mut().chain(out.per_class_coarse.iter_mut()) {
            c.precision *= s;
            c.recall *= s;
            c.f1 *= s;
        }
        let scale = if s == 1.0 { Scale::Unit } else { Scale::Percent };
        out.f1_mean = f1_mean(
            out.f1_macro_coarse,
            out.f1_micro_coarse,
            out.f1_macro_fine,
            out.f1_micro_fine,
            scale,
        )?;
        Ok(out)
    }
}

impl EmotionMetrics {
    fn scaled(&self, s: f64) -> Self {
        EmotionMetrics {
            acc: self.acc * s,
            f1_weight: self.f1_weight * s,
            uf1: self.uf1 * s,
            uar: self.uar * s,
            map: self.map * s,
            confusion: self.confusion.clone(),
        }
    }
}

impl MetricsReport {
    /// Rescales every metric of a unit-scale report; `f1_mean` is recomputed
    /// from the rescaled fields.
    pub fn with_scale(&self, scale: Scale) -> Result<Self> {
        if self.scale != Scale::Unit {
            return Err(Error::Metric("only unit-scale reports can be rescaled".into()));
        }
        let s = scale.factor();
        Ok(MetricsReport {
            scale,
            num_samples: self.num_samples,
            recognition: self.recognition.as_ref().map(|r| r.scaled(s)).transpose()?,
            emotion: self.emotion.as_ref().map(|e| e.scaled(s)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confusion_basics() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let m = confusion_matrix(&[], &[], 3).unwrap();
        assert_eq!(m.total(), 0);
        assert!(f1_micro(&m).is_err());
        assert!(confusion_matrix(&[0], &[], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn two_class_worked_example() {
        let m = cm(&[&[5, 1], &[2, 4]]);
        assert_eq!(f1_micro(&m).unwrap(), 0.75);
        let p = (5.0 / 7.0 + 4.0 / 5.0) / 2.0;
        let r = (5.0 / 6.0 + 4.0 / 6.0) / 2.0;
        let want: f64 = 2.0 * p * r / (p + r);
        assert!((f1_macro(&m).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = cm(&[&[3, 0, 0], &[0, 5, 0], &[0, 0, 1]]);
        for f in [f1_micro, f1_macro, weighted_f1, uf1, uar] {
            assert_eq!(f(&m).unwrap(), 1.0);
        }
    }

    #[test]
    fn uar_of_two_recalls() {
        let m = cm(&[&[4, 0], &[2, 2]]);
        assert_eq!(uar(&m).unwrap(), 0.75);
    }

    #[test]
    fn zero_support_classes_are_excluded_from_unweighted_means() {
        let m = cm(&[&[2, 0, 0], &[0, 0, 0], &[0, 1, 1]]);
        assert_eq!(uar(&m).unwrap(), 0.75);
    }

    #[test]
    fn f1_mean_cases() {
        let v = f1_mean(72.87, 78.95, 49.22, 61.33, Scale::Percent).unwrap();
        assert!((v - 65.59).abs() <= 0.005);
        assert_eq!(f1_mean(0.3, 0.3, 0.3, 0.3, Scale::Unit).unwrap(), 0.3);
        assert!((f1_mean(0.6, 0.8, 0.4, 0.2, Scale::Unit).unwrap() - 0.5).abs() < 1e-15);
        assert!(f1_mean(72.87, 0.8, 0.4, 0.2, Scale::Unit).is_err());
    }

    #[test]
    fn topk_cases() {
        let probs = vec![vec![0.1, 0.6, 0.3], vec![0.5, 0.25, 0.25]];
        assert_eq!(topk_accuracy(&probs, &[2, 2], 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&probs, &[1, 0], 1).unwrap(), 1.0);
        // tie between classes 1 and 2 on row 2 goes to class 1
        assert_eq!(topk_accuracy(&probs, &[0, 1], 2).unwrap(), 0.5);
        assert!(topk_accuracy(&probs, &[0, 1], 4).is_err());
        assert_eq!(top_k(&[0.2, 0.4, 0.4], 1), vec![1]);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn average_precision_hand_example() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let pos = [true, false, true, false];
        assert!((average_precision(&scores, &pos).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&scores, &[false; 4]), None);
    }

    #[test]
    fn map_perfect_and_errors() {
        let targets: Vec<BTreeSet<usize>> = vec![[0, 2].into(), [1].into(), [2].into()];
        let scores: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| (0..3).map(|k| if t.contains(&k) { 1.0 } else { 0.0 }).collect())
            .collect();
        assert_eq!(multilabel_map(&scores, &targets).unwrap(), 1.0);
        let empty: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); 3];
        assert!(multilabel_map(&scores, &empty).is_err());
    }

    #[test]
    fn coarse_from_perfect_fine() {
        let tax = LabelTaxonomy::synthetic(6, 2).unwrap();
        let gts = [0, 1, 2, 3, 4, 5, 5];
        let probs: Vec<Vec<f64>> = gts
            .iter()
            .map(|&g| (0..6).map(|k| if k == g { 0.9 } else { 0.02 }).collect())
            .collect();
        let c = coarse_metrics_from_fine(&probs, &gts, &tax).unwrap();
        assert_eq!(c.f1_micro, 1.0);
        assert_eq!(c.acc_top1, 1.0);
    }

    #[test]
    fn report_scaling_keeps_mean_consistent() {
        let tax = LabelTaxonomy::synthetic(6, 2).unwrap();
        let gts = [0, 1, 2, 3, 4, 5, 0, 3];
        let probs: Vec<Vec<f64>> = gts
            .iter()
            .enumerate()
            .map(|(i, _)| (0..6).map(|k| ((i * 7 + k * 3) % 11) as f64).collect())
            .collect();
        let rec = recognition_metrics(&probs, &gts, &tax).unwrap();
        assert_eq!(rec.f1_micro_fine, rec.acc_top1_fine);
        let report = MetricsReport {
            scale: Scale::Unit,
            num_samples: gts.len(),
            recognition: Some(rec),
            emotion: None,
        };
        let pct = report.with_scale(Scale::Percent).unwrap();
        let r = pct.recognition.unwrap();
        assert_eq!(
            r.f1_mean,
            (r.f1_macro_coarse + r.f1_micro_coarse + r.f1_macro_fine + r.f1_micro_fine) / 4.0
        );
        assert_eq!(r.f1_micro_fine, r.acc_top1_fine);
    }

    fn relabel(m: &ConfusionMatrix, perm: &[usize]) -> ConfusionMatrix {
        let n = m.num_classes();
        let mut rows = vec![vec![0; n]; n];
        for g in 0..n {
            for p in 0..n {
                rows[perm[g]][perm[p]] = m.get(g, p);
            }
        }
        ConfusionMatrix::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_relabeling(
            counts in prop::collection::vec(0u64..20, 16),
            perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(|c| c.to_vec()).collect();
            let m = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(m.total() > 0);
            let q = relabel(&m, &perm);
            for f in [f1_micro, weighted_f1, uf1, uar, f1_macro] {
                let (a, b) = (f(&m).unwrap(), f(&q).unwrap());
                prop_assert!((a - b).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&a));
            }
        }

        #[test]
        fn map_is_rank_invariant(n in 2usize..12, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<Vec<f64>> = (0..n).map(|i| (0..3).map(|k| (i * 3 + k) as f64 + rng.random::<f64>() * 0.5).collect()).collect();
            let targets: Vec<BTreeSet<usize>> = (0..n).map(|i| [i % 3].into()).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let s2: Vec<_> = order.iter().map(|&i| scores[i].clone()).collect();
            let t2: Vec<_> = order.iter().map(|&i| targets[i].clone()).collect();
            let a = multilabel_map(&scores, &targets).unwrap();
            let b = multilabel_map(&s2, &t2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
