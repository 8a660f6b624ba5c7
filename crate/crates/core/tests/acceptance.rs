//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{auroc_pairs, batch_moments, brier_def, ece_brute, max_relative_error, nll_def, random_case, random_iterates, random_simplex};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swag_lora::data::{ShiftKind, ShiftSpec, SyntheticSpec};
use swag_lora::harness::run::{train_trajectory, Predictor, Trajectory};
use swag_lora::harness::{run_experiment, CellStatus, ExperimentConfig, MethodConfig, MethodKind, NamedShift, Report};
use swag_lora::metrics::{auroc, average_entropy, brier, ece, entropies, nll, EvalInput};
use swag_lora::nnet::{ModelConfig, PredictiveDistribution};
use swag_lora::optim::{Schedule, TrainPlan};
use swag_lora::swag::{draw_samples, MomentAccumulator, SampleSpec};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn moment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = rng.random_range(1..=8);
        let t = rng.random_range(2..=32);
        let k = rng.random_range(2..=t);
        let its = random_iterates(&mut rng, t, d);
        let mut acc = MomentAccumulator::new(d, k).unwrap();
        for w in &its {
            acc.collect(w).unwrap();
        }
        let oracle = batch_moments(&its, k);
        let dense = acc.build_posterior().unwrap().dense_covariance();
        worst = worst
            .max(max_abs(acc.swa_mean().unwrap().0, oracle.mean.iter().copied()))
            .max(max_abs(acc.diag_cov().unwrap().0, oracle.diag.iter().copied()))
            .max(max_abs(dense.iter().copied(), oracle.dense.transpose().iter().copied()));
    }
    outcome(worst < 1e-10, format!("200 sequences, max elementwise error {worst:.2e} (tol 1e-10)"))
}

fn sampler_moments() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let its = random_iterates(&mut rng, 8, 3);
    let mut acc = MomentAccumulator::new(3, 4).unwrap();
    for w in &its {
        acc.collect(w).unwrap();
    }
    let post = acc.build_posterior().unwrap();
    let n = 50_000;
    let samples = draw_samples(
        &post,
        &SampleSpec {
            n_samples: n,
            scale: 1.0,
            seed: 3,
        },
    )
    .unwrap();
    let cov = post.dense_covariance();
    let mu = post.mean().as_slice();
    let nf = n as f64;
    let mut worst_z: f64 = 0.0;
    for i in 0..3 {
        let m = samples.iter().map(|s| s.0[i]).sum::<f64>() / nf;
        worst_z = worst_z.max((m - mu[i]).abs() / (cov[[i, i]] / nf).sqrt());
        for j in 0..3 {
            let prods: Vec<f64> = samples.iter().map(|s| (s.0[i] - mu[i]) * (s.0[j] - mu[j])).collect();
            let c = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (nf - 1.0);
            worst_z = worst_z.max((c - cov[[i, j]]).abs() / (var / nf).sqrt());
        }
    }
    let zero = draw_samples(
        &post,
        &SampleSpec {
            n_samples: 1000,
            scale: 0.0,
            seed: 4,
        },
    )
    .unwrap();
    let exact = zero.iter().all(|s| s == post.mean());
    outcome(
        post.rank() == 4 && worst_z < 5.0 && exact,
        format!("K={}, worst deviation {worst_z:.2} SE (limit 5), s=0 exact: {exact}", post.rank()),
    )
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let worst = (0..50)
        .map(|_| {
            let (model, x, y) = random_case(&mut rng);
            max_relative_error(&model, &x, &y, 1e-5)
        })
        .fold(0.0, f64::max);
    outcome(worst < 1e-4, format!("50 cases, max relative error {worst:.2e} (tol 1e-4)"))
}

fn to_dist(rows: &[Vec<f64>]) -> PredictiveDistribution {
    let c = rows[0].len();
    PredictiveDistribution(Array2::from_shape_fn((rows.len(), c), |(i, j)| rows[i][j]))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ece_ok = 0;
    let mut defs_worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..150);
        let c = rng.random_range(2..6);
        let sharp = rng.random_range(0.1..4.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_simplex(&mut rng, c, sharp)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let p = to_dist(&rows);
        let input = EvalInput::new(&p, None, &labels).unwrap();
        let bins = rng.random_range(1..25);
        if ece(&input, bins).unwrap().0 == ece_brute(&rows, &labels, bins) {
            ece_ok += 1;
        }
        defs_worst = defs_worst
            .max((nll(&input) - nll_def(&rows, &labels)).abs())
            .max((brier(&input) - brier_def(&rows, &labels)).abs());
    }
    let mut auroc_ok = 0;
    for _ in 0..100 {
        let levels = rng.random_range(2..10) as f64;
        let id: Vec<f64> = (0..rng.random_range(1..50)).map(|_| (rng.random::<f64>() * levels).floor()).collect();
        let ood: Vec<f64> = (0..rng.random_range(1..50)).map(|_| (rng.random::<f64>() * levels + 0.7).floor()).collect();
        if auroc(&id, &ood).unwrap() == auroc_pairs(&id, &ood) {
            auroc_ok += 1;
        }
    }
    let crafted = [0.1, 0.4, 0.4, 0.7, 0.2, 0.4];
    let crafted_ok = auroc(&crafted[..3], &crafted[3..]).unwrap() == auroc_pairs(&crafted[..3], &crafted[3..]);
    let mut jensen_worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = rng.random_range(1..30);
        let c = rng.random_range(2..6);
        let members: Vec<PredictiveDistribution> = (0..rng.random_range(1..8))
            .map(|_| {
                let sharp = rng.random_range(0.1..5.0);
                to_dist(&(0..n).map(|_| random_simplex(&mut rng, c, sharp)).collect::<Vec<_>>())
            })
            .collect();
        let pooled = PredictiveDistribution::mean_of(&members).unwrap();
        for (a, h) in average_entropy(Some(&members)).unwrap().iter().zip(entropies(&pooled)) {
            jensen_worst = jensen_worst.max(a - h);
        }
    }
    let pass = ece_ok == 100 && auroc_ok == 100 && crafted_ok && defs_worst < 1e-12 && jensen_worst <= 1e-12;
    outcome(
        pass,
        format!(
            "ECE exact {ece_ok}/100, AUROC exact {auroc_ok}/100 (+crafted tie case: {crafted_ok}), \
             NLL/Brier max error {defs_worst:.1e}, max(avgH - H) {jensen_worst:.1e}"
        ),
    )
}

fn degenerate_equivalences() -> Outcome {
    let data = swag_lora::data::gen_synthetic(
        &SyntheticSpec::GaussianBlobs {
            n_classes: 4,
            per_class: 50,
            dim: 8,
            radius: 2.0,
            sigma: 1.0,
            label_flip: 0.1,
        },
        5,
    )
    .unwrap();
    let config = ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        num_classes: 4,
        ..ModelConfig::default()
    };
    let plan = TrainPlan {
        finetune_epochs: 5,
        swag_epochs: 8,
        ..TrainPlan::default()
    };
    let runs: Vec<Trajectory> = (0..3)
        .map(|i| train_trajectory(&config, &data, &plan, &Schedule::default(), 50 + i, true, 5))
        .collect();
    let x = data.features();
    let pooled = |kind: MethodKind, members: Option<usize>, samples: Option<usize>, scale: Option<f64>| {
        let m = MethodConfig {
            members,
            samples,
            scale,
            ..MethodConfig::new(kind)
        };
        Predictor::build(&m, &runs, 9).unwrap().predict(x.view()).unwrap().pooled
    };
    let diff = |a: &PredictiveDistribution, b: &PredictiveDistribution| max_abs(a.0.iter().copied(), b.0.iter().copied());
    let d1 = diff(
        &pooled(MethodKind::MultiSwag, Some(1), None, None),
        &pooled(MethodKind::Swag, None, None, None),
    );
    let d2 = diff(
        &pooled(MethodKind::Swag, None, Some(1), Some(0.0)),
        &pooled(MethodKind::Swa, None, None, None),
    );
    let d3 = diff(
        &pooled(MethodKind::MultiSwag, Some(3), Some(1), Some(0.0)),
        &pooled(MethodKind::MultiSwa, Some(3), None, None),
    );
    let worst = d1.max(d2).max(d3);
    outcome(
        worst <= 1e-12,
        format!("MultiSWAG(M=1)~SWAG {d1:.1e}, SWAG(s=0,n=1)~SWA {d2:.1e}, MultiSWAG(s=0,n=1)~MultiSWA {d3:.1e} (tol 1e-12)"),
    )
}

fn ten_seeds() -> ExperimentConfig {
    ExperimentConfig {
        seeds: (0..10).collect(),
        ..ExperimentConfig::default()
    }
}

fn seed_values(report: &Report, method: &str, dataset: &str, metric: &str) -> Vec<f64> {
    report
        .cells
        .iter()
        .filter(|c| c.method == method && c.dataset == dataset && c.status == CellStatus::Ok)
        .map(|c| c.metrics.get(metric).expect("metric present"))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn directional_calibration() -> Outcome {
    let cfg = ten_seeds();
    let report = run_experiment(&cfg).unwrap();
    if report.failed_cells() > 0 {
        return outcome(false, format!("{} cells failed", report.failed_cells()));
    }
    let d = "id_test";
    let get = |m: &str, k: &str| seed_values(&report, m, d, k);
    let (swa_nll, swag_nll) = (get("SWA", "nll"), get("SWAG", "nll"));
    let (swa_brier, swag_brier) = (get("SWA", "brier"), get("SWAG", "brier"));
    let a_means = mean(&swag_nll) <= mean(&swa_nll) && mean(&swag_brier) <= mean(&swa_brier);
    let a_fails = (0..cfg.seeds.len())
        .filter(|&i| swag_nll[i] > swa_nll[i] || swag_brier[i] > swa_brier[i])
        .count();
    let a = a_means && a_fails <= 2;
    let map_acc = mean(&get("MAP", "accuracy"));
    let b = mean(&get("MultiSWA", "accuracy")) >= map_acc && mean(&get("MultiSWAG", "accuracy")) >= map_acc;
    let ms_brier = mean(&get("MultiSWAG", "brier"));
    let (runner_up, runner_brier) = ["MAP", "MC Dropout", "Ensemble", "SWA", "SWAG", "MultiSWA"]
        .iter()
        .map(|m| (*m, mean(&get(m, "brier"))))
        .fold(("", f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
    let c = ms_brier <= runner_brier;
    outcome(
        a && b && c,
        format!(
            "(a) SWAG vs SWA NLL {:.4}/{:.4}, Brier {:.4}/{:.4}, seed failures {a_fails}/10: {a}; \
             (b) acc MultiSWA {:.4}, MultiSWAG {:.4} vs MAP {map_acc:.4}: {b}; \
             (c) MultiSWAG Brier {ms_brier:.4} vs best other {runner_up} {runner_brier:.4}: {c}",
            mean(&swag_nll),
            mean(&swa_nll),
            mean(&swag_brier),
            mean(&swa_brier),
            mean(&get("MultiSWA", "accuracy")),
            mean(&get("MultiSWAG", "accuracy")),
        ),
    )
}

fn ood_detection() -> Outcome {
    let mut cfg = ten_seeds();
    cfg.methods = vec![MethodConfig::new(MethodKind::Map), MethodConfig::new(MethodKind::Ensemble)];
    cfg.data.shifts = vec![NamedShift {
        name: "held_out_class".into(),
        shift: ShiftSpec {
            kind: ShiftKind::Semantic { held_out: vec![3] },
            seed: 0,
        },
    }];
    let report = run_experiment(&cfg).unwrap();
    let ens = seed_values(&report, "Ensemble", "held_out_class", "auroc_entropy");
    let map = seed_values(&report, "MAP", "held_out_class", "auroc_entropy");
    if ens.len() != 10 || map.len() != 10 {
        return outcome(false, "missing AUROC cells".into());
    }
    let m = mean(&ens);
    let se = (ens.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 9.0).sqrt() / 10f64.sqrt();
    let above_chance = m >= 0.5 + 3.0 * se;
    let beats_map = m >= mean(&map);
    outcome(
        above_chance && beats_map,
        format!(
            "Ensemble AUROC {m:.4} ± {se:.4} (needs ≥ {:.4}), MAP {:.4}",
            0.5 + 3.0 * se,
            mean(&map)
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig::default();
    let a = run_experiment(&cfg).unwrap().body_json().unwrap();
    let b = run_experiment(&cfg).unwrap().body_json().unwrap();
    outcome(a == b, format!("two runs of the default config, {} bytes each, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("moment/covariance oracle", moment_oracle),
        ("sampler moments", sampler_moments),
        ("gradient check", gradient_check),
        ("metric oracles", metric_oracles),
        ("degenerate-method equivalences", degenerate_equivalences),
        ("directional calibration (10 seeds)", directional_calibration),
        ("OOD detection (semantic hold-out, 10 seeds)", ood_detection),
        ("end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {} [{:.1}s] {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
