//! Tagging and classification metrics.
//!
//! AP is the normalized form, `(1/n_pos) * sum_k P@k * rel(k)`, with ties
//! kept in input order. AUC is the Mann-Whitney statistic with half credit
//! for ties, computed in exact integer arithmetic. d' is derived from AUC
//! under the equal-variance Gaussian model.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest |d'| reported; AUC of exactly 0 or 1 maps here.
pub const D_PRIME_LIMIT: f64 = 10.0;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} scores for {b} labels")));
    }
    Ok(())
}

/// Average precision of one class. Errors when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::Undefined("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps input order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Area under the ROC curve: `P(s_pos > s_neg) + P(tie) / 2`.
///
/// Uses mid-ranks doubled to stay in integers, so the result is the exact
/// ratio `(2 * wins + ties) / (2 * n_pos * n_neg)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        // 1-based mid-rank of the tie group, doubled.
        let doubled = (start + end + 2) as u128;
        let pos_in_group = order[start..=end].iter().filter(|&&i| labels[i]).count() as u128;
        doubled_rank_sum += doubled * pos_in_group;
        start = end + 1;
    }
    let doubled_u = doubled_rank_sum - n_pos * (n_pos + 1);
    Ok(doubled_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// `sqrt(2) * Phi^-1(auc)`, clamped to `±D_PRIME_LIMIT`.
pub fn d_prime(auc: f64) -> f64 {
    if !(auc > 0.0 && auc < 1.0) {
        if auc.is_nan() {
            return f64::NAN;
        }
        log::warn!("d' of AUC {auc} is infinite; clamped to ±{D_PRIME_LIMIT}");
        return if auc >= 1.0 { D_PRIME_LIMIT } else { -D_PRIME_LIMIT };
    }
    let z = Normal::standard().inverse_cdf(auc);
    (std::f64::consts::SQRT_2 * z).clamp(-D_PRIME_LIMIT, D_PRIME_LIMIT)
}

/// `(mu1 - mu2) / sqrt((s1^2 + s2^2) / 2)`.
pub fn d_prime_gaussian(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    let var = (sigma1 * sigma1 + sigma2 * sigma2) / 2.0;
    if !(var > 0.0) {
        return Err(Error::Value(format!("d' needs positive pooled variance, got {var}")));
    }
    Ok((mu1 - mu2) / var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationScores {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
    /// Classes with no true examples; each counts as F1 = 0 in the macro mean.
    pub unsupported: Vec<usize>,
}

/// Micro/macro F1 and accuracy for single-label predictions.
pub fn f1_and_accuracy(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassificationScores> {
    check_lengths(pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(Error::Shape("no predictions".into()));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::Value(format!("class {bad} outside 0..{n_classes}")));
    }
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n_classes], vec![0usize; n_classes], vec![0usize; n_classes]);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let d = 2 * tp + fp + fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * tp as f64 / d as f64
        }
    };
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let f1_macro = (0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / n_classes as f64;
    let unsupported = (0..n_classes).filter(|&c| tp[c] + fn_[c] == 0).collect();
    Ok(ClassificationScores {
        f1_micro: f1(stp, sfp, sfn),
        f1_macro,
        accuracy: stp as f64 / pred.len() as f64,
        unsupported,
    })
}

/// Per-class and aggregate evaluation results.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_examples: usize,
    pub n_classes: usize,
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    /// `None` for classes lacking positives or negatives.
    pub per_class_auc: Vec<Option<f64>>,
    pub map: f64,
    pub mauc: f64,
    pub d_prime: f64,
    pub classification: Option<ClassificationScores>,
}

fn mean_defined(v: &[Option<f64>]) -> f64 {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl EvalReport {
    /// Multi-label report from `scores[i][c]` and `labels[i][c]`.
    pub fn multilabel(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Self> {
        check_lengths(scores.len(), labels.len())?;
        let n_classes = scores.first().map_or(0, Vec::len);
        for (s, l) in scores.iter().zip(labels) {
            if s.len() != n_classes || l.len() != n_classes {
                return Err(Error::Shape(format!("rows must all have {n_classes} classes")));
            }
        }
        let mut per_class_ap = Vec::with_capacity(n_classes);
        let mut per_class_auc = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
            per_class_ap.push(average_precision(&s, &l).ok());
            per_class_auc.push(roc_auc(&s, &l).ok());
        }
        let mauc = mean_defined(&per_class_auc);
        Ok(Self {
            n_examples: scores.len(),
            n_classes,
            map: mean_defined(&per_class_ap),
            mauc,
            d_prime: d_prime(mauc),
            per_class_ap,
            per_class_auc,
            classification: None,
        })
    }

    /// Single-label report: ranking metrics on one-hot targets plus
    /// argmax F1 and accuracy.
    pub fn singlelabel(scores: &[Vec<f64>], truth: &[usize]) -> Result<Self> {
        check_lengths(scores.len(), truth.len())?;
        let n_classes = scores.first().map_or(0, Vec::len);
        let labels: Vec<Vec<bool>> = truth.iter().map(|&t| (0..n_classes).map(|c| c == t).collect()).collect();
        let mut report = Self::multilabel(scores, &labels)?;
        let pred: Vec<usize> = scores
            .iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0)
            .collect();
        report.classification = Some(f1_and_accuracy(&pred, truth, n_classes)?);
        Ok(report)
    }

    pub fn classes_evaluated(&self) -> usize {
        self.per_class_ap.iter().filter(|a| a.is_some()).count()
    }

    /// One metric per line, fixed 6-decimal formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map_or_else(|| "excluded".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "n_examples {}", self.n_examples);
        let _ = writeln!(s, "n_classes {}", self.n_classes);
        let _ = writeln!(s, "classes_evaluated {}", self.classes_evaluated());
        let _ = writeln!(s, "classes_excluded {}", self.n_classes - self.classes_evaluated());
        let _ = writeln!(s, "mAP {:.6}", self.map);
        let _ = writeln!(s, "mAUC {:.6}", self.mauc);
        let _ = writeln!(s, "d_prime {:.6}", self.d_prime);
        if let Some(c) = &self.classification {
            let _ = writeln!(s, "f1_micro {:.6}", c.f1_micro);
            let _ = writeln!(s, "f1_macro {:.6}", c.f1_macro);
            let _ = writeln!(s, "accuracy {:.6}", c.accuracy);
            let _ = writeln!(s, "classes_without_support {}", c.unsupported.len());
        }
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            let _ = writeln!(s, "ap[{c}] {}", fmt(*ap));
        }
        for (c, auc) in self.per_class_auc.iter().enumerate() {
            let _ = writeln!(s, "auc[{c}] {}", fmt(*auc));
        }
        s
    }
}
