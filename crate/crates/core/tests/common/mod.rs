//! Test oracles written from the textbook definitions, plus fixtures
//! shared by several test targets.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use swag_lora::nnet::{Batch, Model, ModelConfig, ParamVector};

pub const FLOOR: f64 = 1e-12;

/// Batch SWA mean, floored biased variance, and the dense posterior
/// covariance `½(diag + D Dᵀ/(k-1))`, where column `t` of `D` is
/// `x_t` minus the plain average of `x_0..=x_t`, keeping the last `k`.
pub struct BatchMoments {
    pub mean: DVector<f64>,
    pub diag: DVector<f64>,
    pub dense: DMatrix<f64>,
}

pub fn batch_moments(iterates: &[Vec<f64>], max_rank: usize) -> BatchMoments {
    let t = iterates.len();
    let d = iterates[0].len();
    let cols: Vec<DVector<f64>> = iterates.iter().map(|x| DVector::from_column_slice(x)).collect();
    let mean = cols.iter().fold(DVector::zeros(d), |a, x| a + x) / t as f64;
    let sq = cols.iter().fold(DVector::zeros(d), |a, x| a + x.component_mul(x)) / t as f64;
    let diag = (sq - mean.component_mul(&mean)).map(|v| v.max(FLOOR));
    let devs: Vec<DVector<f64>> = (0..t)
        .map(|i| {
            let m = cols[..=i].iter().fold(DVector::zeros(d), |a, x| a + x) / (i + 1) as f64;
            &cols[i] - m
        })
        .collect();
    let k = max_rank.min(t);
    let dmat = DMatrix::from_columns(&devs[t - k..]);
    let dense = (DMatrix::from_diagonal(&diag) + &dmat * dmat.transpose() / (k as f64 - 1.0)) * 0.5;
    BatchMoments { mean, diag, dense }
}

pub fn random_iterates(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    let drift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..t)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    drift[j] * (i as f64).sqrt() + 0.3 * z
                })
                .collect()
        })
        .collect()
}

/// ECE by scanning every bin and every row; bin `b` covers
/// `[b/n, (b+1)/n)` with confidence 1 in the last bin.
pub fn ece_brute(probs: &[Vec<f64>], labels: &[usize], n_bins: usize) -> f64 {
    let n = probs.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        let lo = b as f64 / n_bins as f64;
        let hi = (b + 1) as f64 / n_bins as f64;
        let mut count = 0usize;
        let mut conf = 0.0;
        let mut hits = 0.0;
        for (row, &y) in probs.iter().zip(labels) {
            let (arg, c) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
            let inside = (c >= lo && c < hi) || (b == n_bins - 1 && c >= 1.0);
            if inside {
                count += 1;
                conf += c;
                hits += if arg == y { 1.0 } else { 0.0 };
            }
        }
        if count > 0 {
            total += (count as f64 / n) * (hits / count as f64 - conf / count as f64).abs();
        }
    }
    total
}

/// AUROC as the fraction of (OOD, ID) pairs ranked correctly, ties counting ½.
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood {
        for &i in id {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    wins / (id.len() * ood.len()) as f64
}

pub fn nll_def(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[y].max(FLOOR).ln())
        .sum::<f64>()
        / probs.len() as f64
}

pub fn brier_def(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.iter()
                .enumerate()
                .map(|(c, &v)| (v - if c == y { 1.0 } else { 0.0 }).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64
}

pub fn random_simplex(rng: &mut ChaCha8Rng, c: usize, sharpness: f64) -> Vec<f64> {
    let e: Vec<f64> = (0..c)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (sharpness * z).exp()
        })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random model with non-zero adapters and a random batch.
pub fn random_case(rng: &mut ChaCha8Rng) -> (Model, Array2<f64>, Vec<usize>) {
    let input_dim = rng.random_range(2..6);
    let n_hidden = rng.random_range(1..3);
    let hidden_dims: Vec<usize> = (0..n_hidden).map(|_| rng.random_range(2..7)).collect();
    let num_classes = rng.random_range(2..5);
    let lora_rank = rng.random_range(1..3);
    let config = ModelConfig {
        input_dim,
        hidden_dims,
        num_classes,
        lora_rank,
        lora_alpha: rng.random_range(0.5..4.0),
        lora_dropout: 0.0,
        base_seed: rng.random(),
        adapt_output: rng.random_bool(0.5) && lora_rank <= num_classes,
    };
    let model = Model::init(config, rng.random()).unwrap();
    let params = ParamVector(
        (0..model.param_len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z
            })
            .collect(),
    );
    let model = model.with_params(&params).unwrap();
    let n = rng.random_range(1..9);
    let x = Array2::from_shape_fn((n, input_dim), |_| StandardNormal.sample(rng));
    let y = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    (model, x, y)
}

/// Largest relative error between analytic and central-difference gradients.
pub fn max_relative_error(model: &Model, x: &Array2<f64>, y: &[usize], h: f64) -> f64 {
    let batch = Batch::new(x.view(), y).unwrap();
    let (_, grad) = model.loss_and_grads(&batch).unwrap();
    let base = model.get_params();
    let loss_at = |p: &ParamVector| model.with_params(p).unwrap().loss_and_grads(&batch).unwrap().0;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus.0[i] += h;
        let mut minus = base.clone();
        minus.0[i] -= h;
        let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let a = grad.0[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
