//! Accuracy, calibration and OOD-detection metrics.
//!
//! All functions are pure over probability matrices. OOD detection treats
//! OOD as the positive class and higher uncertainty as "more OOD".

use std::fs;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::PredictiveDistribution;

/// Default number of equal-width confidence bins for ECE.
pub const DEFAULT_BINS: usize = 15;

/// Probabilities are clamped to at least this before taking logs in NLL.
pub const P_FLOOR: f64 = 1e-12;

/// Tolerance on row sums for a matrix to count as a probability matrix.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Validated predictions and labels.
#[derive(Debug, Clone, Copy)]
pub struct EvalInput<'a> {
    pub pooled: &'a PredictiveDistribution,
    pub members: Option<&'a [PredictiveDistribution]>,
    pub labels: &'a [usize],
}

fn check_probs(p: &PredictiveDistribution, what: &str) -> Result<()> {
    for (i, row) in p.probs().rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::Argument(format!("{what} row {i} is not a probability vector (sum {sum})")));
        }
    }
    Ok(())
}

impl<'a> EvalInput<'a> {
    pub fn new(
        pooled: &'a PredictiveDistribution,
        members: Option<&'a [PredictiveDistribution]>,
        labels: &'a [usize],
    ) -> Result<Self> {
        if pooled.n_rows() != labels.len() {
            return Err(Error::shape("labels", pooled.n_rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Argument("no rows to evaluate".into()));
        }
        check_probs(pooled, "pooled")?;
        let c = pooled.n_classes();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
        }
        if let Some(ms) = members {
            for m in ms {
                if m.probs().dim() != pooled.probs().dim() {
                    return Err(Error::shape("member predictions", pooled.probs().len(), m.probs().len()));
                }
                check_probs(m, "member")?;
            }
        }
        Ok(Self {
            pooled,
            members,
            labels,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(input: &EvalInput) -> f64 {
    let correct = input
        .pooled
        .probs()
        .rows()
        .into_iter()
        .zip(input.labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    correct as f64 / input.labels.len() as f64
}

/// Mean `-ln p(label)` with probabilities clamped to [`P_FLOOR`].
pub fn nll(input: &EvalInput) -> f64 {
    let total: f64 = input
        .pooled
        .probs()
        .rows()
        .into_iter()
        .zip(input.labels)
        .map(|(row, &y)| -row[y].max(P_FLOOR).ln())
        .sum();
    total / input.labels.len() as f64
}

/// Multiclass Brier score, `mean Σ_c (p_c - 1[c = y])²`.
pub fn brier(input: &EvalInput) -> f64 {
    let total: f64 = input
        .pooled
        .probs()
        .rows()
        .into_iter()
        .zip(input.labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .map(|(c, &p)| {
                    let t = if c == y { 1.0 } else { 0.0 };
                    (p - t) * (p - t)
                })
                .sum::<f64>()
        })
        .sum();
    total / input.labels.len() as f64
}

/// Equal-width bin for a confidence in `[0, 1]`. Bins are closed on the
/// left: a confidence on an interior boundary belongs to the higher bin,
/// `0` to the first bin, `1` to the last.
pub fn bin_index(confidence: f64, n_bins: usize) -> usize {
    let nb = n_bins as f64;
    let mut b = ((confidence * nb).floor().max(0.0) as usize).min(n_bins - 1);
    // correct for rounding in confidence * n_bins near a boundary
    if b + 1 < n_bins && confidence >= (b + 1) as f64 / nb {
        b += 1;
    } else if b > 0 && confidence < b as f64 / nb {
        b -= 1;
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lower: f64,
    pub upper: f64,
    /// Mean confidence of rows in the bin (0 when empty).
    pub confidence: f64,
    /// Fraction of rows in the bin predicted correctly (0 when empty).
    pub accuracy: f64,
    pub count: usize,
}

/// Expected calibration error with its per-bin table.
pub fn ece(input: &EvalInput, n_bins: usize) -> Result<(f64, Vec<BinStat>)> {
    if n_bins == 0 {
        return Err(Error::Argument("n_bins must be at least 1".into()));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (row, &y) in input.pooled.probs().rows().into_iter().zip(input.labels) {
        let pred = argmax(row.view());
        let conf = row[pred];
        let b = bin_index(conf, n_bins);
        conf_sum[b] += conf;
        count[b] += 1;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = input.labels.len() as f64;
    let mut total = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (conf, acc) = if count[b] > 0 {
            let c = count[b] as f64;
            (conf_sum[b] / c, correct[b] as f64 / c)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            total += (count[b] as f64 / n) * (acc - conf).abs();
        }
        bins.push(BinStat {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            confidence: conf,
            accuracy: acc,
            count: count[b],
        });
    }
    Ok((total, bins))
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy(row: ArrayView1<f64>) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy of every row.
pub fn entropies(p: &PredictiveDistribution) -> Vec<f64> {
    p.probs().rows().into_iter().map(entropy).collect()
}

/// Per-row mean of the member entropies.
pub fn average_entropy(members: Option<&[PredictiveDistribution]>) -> Result<Vec<f64>> {
    let members = match members {
        Some(m) if !m.is_empty() => m,
        _ => return Err(Error::Argument("average entropy needs a member stack".into())),
    };
    let n = members[0].n_rows();
    let mut out = vec![0.0; n];
    for m in members {
        if m.n_rows() != n {
            return Err(Error::shape("member rows", n, m.n_rows()));
        }
        for (o, h) in out.iter_mut().zip(entropies(m)) {
            *o += h;
        }
    }
    let k = members.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Area under the ROC curve for separating OOD (positive) from ID scores,
/// via the Mann-Whitney U statistic with mid-ranks for ties.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Argument("AUROC needs non-empty ID and OOD score lists".into()));
    }
    if id_scores.iter().chain(ood_scores).any(|s| !s.is_finite()) {
        return Err(Error::Numeric("AUROC scores must be finite".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        let positives = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum += mid * positives as f64;
        i = j + 1;
    }
    let n_pos = ood_scores.len() as f64;
    let n_neg = id_scores.len() as f64;
    let u = rank_sum - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Accuracy, NLL, ECE and Brier for one set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub accuracy: f64,
    pub nll: f64,
    /// Stored as a fraction in `[0, 1]`.
    pub ece: f64,
    pub brier: f64,
    pub n_bins: usize,
    pub bins: Vec<BinStat>,
}

impl CalibrationReport {
    pub fn compute(input: &EvalInput, n_bins: usize) -> Result<Self> {
        let (ece, bins) = ece(input, n_bins)?;
        Ok(Self {
            accuracy: accuracy(input),
            nll: nll(input),
            ece,
            brier: brier(input),
            n_bins,
            bins,
        })
    }

    /// Reliability-diagram table as CSV.
    pub fn write_bins_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("lower,upper,confidence,accuracy,count\n");
        for b in &self.bins {
            out.push_str(&format!("{},{},{},{},{}\n", b.lower, b.upper, b.confidence, b.accuracy, b.count));
        }
        fs::write(path, out)?;
        Ok(())
    }
}
