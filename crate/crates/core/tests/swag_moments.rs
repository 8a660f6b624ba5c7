mod common;

use common::{batch_moments, random_iterates};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swag_lora::swag::{draw_samples, MomentAccumulator, SampleSpec, SwagPosterior};

fn accumulate(iterates: &[Vec<f64>], k: usize) -> MomentAccumulator {
    let mut acc = MomentAccumulator::new(iterates[0].len(), k).unwrap();
    for w in iterates {
        acc.collect(w).unwrap();
    }
    acc
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn running_moments_match_batch_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(2..=32);
        let k = rng.random_range(2..=t);
        let its = random_iterates(&mut rng, t, d);
        let acc = accumulate(&its, k);
        let oracle = batch_moments(&its, k);
        let post = acc.build_posterior().unwrap();
        assert!(max_abs_diff(acc.swa_mean().unwrap().0, oracle.mean.iter().copied()) < 1e-10);
        assert!(max_abs_diff(acc.diag_cov().unwrap().0, oracle.diag.iter().copied()) < 1e-10);
        let dense = post.dense_covariance();
        assert!(max_abs_diff(dense.iter().copied(), oracle.dense.transpose().iter().copied()) < 1e-10);
    }
}

#[test]
fn ring_buffer_keeps_the_newest_columns() {
    let its: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let acc = accumulate(&its, 3);
    assert_eq!(acc.occupancy(), 3);
    let d = acc.low_rank_factor().unwrap();
    // the last deviation is x_9 minus the mean of x_0..=x_9
    assert!((d[[0, 2]] - (9.0 - 4.5)).abs() < 1e-12);
    assert!((d[[1, 2]] - (81.0 - 28.5)).abs() < 1e-12);
}

#[test]
fn sampler_moments_match_the_posterior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let its = random_iterates(&mut rng, 6, 3);
    let post = accumulate(&its, 4).build_posterior().unwrap();
    assert_eq!(post.rank(), 4);
    let n = 50_000;
    let samples = draw_samples(
        &post,
        &SampleSpec {
            n_samples: n,
            scale: 1.0,
            seed: 17,
        },
    )
    .unwrap();
    let cov = post.dense_covariance();
    let mean = post.mean().as_slice();
    let nf = n as f64;
    let emp_mean: Vec<f64> = (0..3).map(|i| samples.iter().map(|s| s.0[i]).sum::<f64>() / nf).collect();
    for i in 0..3 {
        let se = (cov[[i, i]] / nf).sqrt();
        assert!((emp_mean[i] - mean[i]).abs() < 5.0 * se, "mean coordinate {i}");
    }
    for i in 0..3 {
        for j in 0..3 {
            let prods: Vec<f64> = samples.iter().map(|s| (s.0[i] - mean[i]) * (s.0[j] - mean[j])).collect();
            let m = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            assert!((m - cov[[i, j]]).abs() < 5.0 * se, "covariance entry ({i}, {j})");
        }
    }
}

#[test]
fn zero_scale_returns_the_mean_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let its = random_iterates(&mut rng, 6, 3);
    let post = accumulate(&its, 4).build_posterior().unwrap();
    let samples = draw_samples(
        &post,
        &SampleSpec {
            n_samples: 100,
            scale: 0.0,
            seed: 1,
        },
    )
    .unwrap();
    assert!(samples.iter().all(|s| s == post.mean()));
}

#[test]
fn posterior_file_round_trip_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let its = random_iterates(&mut rng, 9, 5);
    let post = accumulate(&its, 4).build_posterior().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.swag");
    post.save(&path).unwrap();
    assert_eq!(SwagPosterior::load(&path).unwrap(), post);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn running_equals_batch(seed in any::<u64>(), d in 1usize..6, t in 2usize..20, k in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let its = random_iterates(&mut rng, t, d);
        let acc = accumulate(&its, k);
        let oracle = batch_moments(&its, k);
        prop_assert!(max_abs_diff(acc.swa_mean().unwrap().0, oracle.mean.iter().copied()) < 1e-10);
        let sq: Vec<f64> = (0..d).map(|j| its.iter().map(|x| x[j] * x[j]).sum::<f64>() / t as f64).collect();
        prop_assert!(max_abs_diff(acc.second_moment().unwrap().0, sq) < 1e-10);
    }

    #[test]
    fn covariance_is_positive_definite(seed in any::<u64>(), d in 1usize..7, t in 2usize..16, k in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let its = random_iterates(&mut rng, t, d);
        let post = accumulate(&its, k).build_posterior().unwrap();
        let dense = post.dense_covariance();
        let m = DMatrix::from_row_slice(d, d, dense.as_slice().unwrap());
        prop_assert!((&m - m.transpose()).abs().max() < 1e-12);
        prop_assert!(m.cholesky().is_some());
    }

    #[test]
    fn sampling_is_seed_deterministic(seed in any::<u64>(), s in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let its = random_iterates(&mut rng, 5, 3);
        let post = accumulate(&its, 3).build_posterior().unwrap();
        let spec = SampleSpec { n_samples: 4, scale: s, seed };
        prop_assert_eq!(draw_samples(&post, &spec).unwrap(), draw_samples(&post, &spec).unwrap());
    }
}
