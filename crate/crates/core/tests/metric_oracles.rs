mod common;

use common::{auroc_pairs, brier_def, ece_brute, nll_def, random_simplex};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swag_lora::metrics::{auroc, average_entropy, brier, ece, entropies, nll, EvalInput};
use swag_lora::nnet::PredictiveDistribution;

fn to_dist(rows: &[Vec<f64>]) -> PredictiveDistribution {
    let c = rows[0].len();
    PredictiveDistribution(Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j]))
}

fn random_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = rng.random_range(1..120);
    let c = rng.random_range(2..6);
    let sharp = rng.random_range(0.1..4.0);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(rng, c, sharp)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (rows, labels)
}

#[test]
fn ece_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (rows, labels) = random_case(&mut rng);
        let n_bins = rng.random_range(1..25);
        let p = to_dist(&rows);
        let input = EvalInput::new(&p, None, &labels).unwrap();
        assert_eq!(ece(&input, n_bins).unwrap().0, ece_brute(&rows, &labels, n_bins));
    }
}

#[test]
fn ece_on_bin_boundaries_equals_brute_force() {
    // confidences that sit exactly on bin edges
    let rows: Vec<Vec<f64>> = [0.5, 0.6, 0.75, 1.0, 0.8, 0.9]
        .iter()
        .map(|&c| vec![c, 1.0 - c])
        .collect();
    let labels = vec![0, 1, 0, 0, 1, 0];
    let p = to_dist(&rows);
    let input = EvalInput::new(&p, None, &labels).unwrap();
    for n_bins in [1, 2, 4, 5, 10, 15, 20] {
        assert_eq!(ece(&input, n_bins).unwrap().0, ece_brute(&rows, &labels, n_bins), "{n_bins} bins");
    }
}

#[test]
fn auroc_equals_pair_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let m = rng.random_range(1..40);
        // a coarse grid forces many ties
        let levels = rng.random_range(2..8) as f64;
        let id: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * levels).floor()).collect();
        let ood: Vec<f64> = (0..m).map(|_| (rng.random::<f64>() * levels + 0.5).floor()).collect();
        assert_eq!(auroc(&id, &ood).unwrap(), auroc_pairs(&id, &ood));
    }
}

#[test]
fn auroc_crafted_tie_case() {
    let id = [0.1, 0.4, 0.4];
    let ood = [0.4, 0.9, 0.2];
    assert_eq!(auroc(&id, &ood).unwrap(), auroc_pairs(&id, &ood));
    assert_eq!(auroc(&id, &ood).unwrap(), 6.0 / 9.0);
}

#[test]
fn nll_and_brier_match_definitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (rows, labels) = random_case(&mut rng);
        let p = to_dist(&rows);
        let input = EvalInput::new(&p, None, &labels).unwrap();
        assert!((nll(&input) - nll_def(&rows, &labels)).abs() < 1e-12);
        assert!((brier(&input) - brier_def(&rows, &labels)).abs() < 1e-12);
    }
}

#[test]
fn average_entropy_never_exceeds_pooled_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let c = rng.random_range(2..6);
        let k = rng.random_range(1..8);
        let members: Vec<PredictiveDistribution> = (0..k)
            .map(|_| {
                let sharp = rng.random_range(0.1..5.0);
                to_dist(&(0..n).map(|_| random_simplex(&mut rng, c, sharp)).collect::<Vec<_>>())
            })
            .collect();
        let pooled = PredictiveDistribution::mean_of(&members).unwrap();
        let h = entropies(&pooled);
        let avg = average_entropy(Some(&members)).unwrap();
        for (a, p) in avg.iter().zip(&h) {
            assert!(*a <= p + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_invariant_under_monotone_maps(
        id in prop::collection::vec(-5.0f64..5.0, 1..30),
        ood in prop::collection::vec(-5.0f64..5.0, 1..30),
        a in 0.1f64..10.0,
        b in -3.0f64..3.0,
    ) {
        let base = auroc(&id, &ood).unwrap();
        let exp_id: Vec<f64> = id.iter().map(|v| v.exp()).collect();
        let exp_ood: Vec<f64> = ood.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(auroc(&exp_id, &exp_ood).unwrap(), base);
        // affine maps can merge nearby scores through rounding; use well-separated grid values
        let gid: Vec<f64> = id.iter().map(|v| v.round()).collect();
        let good: Vec<f64> = ood.iter().map(|v| v.round()).collect();
        let aff = |xs: &[f64]| xs.iter().map(|v| a * v + b).collect::<Vec<_>>();
        prop_assert_eq!(auroc(&aff(&gid), &aff(&good)).unwrap(), auroc(&gid, &good).unwrap());
    }

    #[test]
    fn ece_matches_brute_force(seed in any::<u64>(), n_bins in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, labels) = random_case(&mut rng);
        let p = to_dist(&rows);
        let input = EvalInput::new(&p, None, &labels).unwrap();
        prop_assert_eq!(ece(&input, n_bins).unwrap().0, ece_brute(&rows, &labels, n_bins));
    }

    #[test]
    fn one_hot_minimizes_nll_and_brier(seed in any::<u64>(), c in 2usize..6, eps in 0.001f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = rng.random_range(0..c);
        let mut onehot = vec![0.0; c];
        onehot[y] = 1.0;
        let noise = random_simplex(&mut rng, c, 1.0);
        let mixed: Vec<f64> = onehot.iter().zip(&noise).map(|(o, z)| (1.0 - eps) * o + eps * z).collect();
        let labels = [y];
        let best = to_dist(&[onehot]);
        let worse = to_dist(&[mixed]);
        let ib = EvalInput::new(&best, None, &labels).unwrap();
        let iw = EvalInput::new(&worse, None, &labels).unwrap();
        prop_assert!(nll(&ib) < nll(&iw));
        prop_assert!(brier(&ib) < brier(&iw));
    }

    #[test]
    fn jensen_gap_is_non_negative(seed in any::<u64>(), k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<PredictiveDistribution> = (0..k)
            .map(|_| to_dist(&(0..5).map(|_| random_simplex(&mut rng, 3, 2.0)).collect::<Vec<_>>()))
            .collect();
        let pooled = PredictiveDistribution::mean_of(&members).unwrap();
        for (a, p) in average_entropy(Some(&members)).unwrap().iter().zip(entropies(&pooled)) {
            prop_assert!(*a <= p + 1e-12);
        }
    }
}
