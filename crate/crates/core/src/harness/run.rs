//! Runs every configured method over every seed and evaluation set.

use ndarray::ArrayView2;
use rayon::prelude::*;

use super::config::{DataSource, ExperimentConfig, MethodConfig, MethodKind, ID_DATASET};
use super::report::{aggregate, Cell, CellMetrics, CellStatus, DatasetInfo, DatasetRole, Report, SCHEMA_VERSION};
use crate::data::{apply_shift, gen_synthetic, load_csv, semantic_partition, split, Dataset, ShiftKind};
use crate::ensemble::{ensemble_predict, mc_dropout_predict, multiswag_samples};
use crate::error::{Error, Result};
use crate::metrics::{auroc, average_entropy, entropies, CalibrationReport, EvalInput};
use crate::nnet::{DropoutMode, Model, ModelConfig, PredictiveDistribution};
use crate::optim::{SgdRun, TrainPlan};
use crate::rng::derive_seed;
use crate::swag::{MomentAccumulator, SwagPosterior};

/// Offsets into the per-seed derivation space, far above any member index.
const SAMPLE_STREAM: u64 = 1 << 32;
const DROPOUT_STREAM: u64 = (1 << 32) + 1;

/// An evaluation set: the ID test split or one shifted variant.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub name: String,
    pub role: DatasetRole,
    pub data: Dataset,
}

/// All data an experiment touches, built once and shared by every seed.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    /// `eval[0]` is the ID test split; shifts follow in config order.
    pub eval: Vec<EvalSet>,
}

impl PreparedData {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        let full = match &config.data.source {
            DataSource::Synthetic { spec, seed } => gen_synthetic(spec, *seed)?,
            DataSource::Csv { path, label_column } => load_csv(path, label_column)?,
        };
        for s in &config.data.shifts {
            s.shift
                .validate(full.dim(), full.num_classes())
                .map_err(|e| Error::Config(format!("shift {}: {e}", s.name)))?;
        }
        let mut held_out: Vec<usize> = config
            .data
            .shifts
            .iter()
            .filter_map(|s| match &s.shift.kind {
                ShiftKind::Semantic { held_out } => Some(held_out.clone()),
                ShiftKind::Covariate { .. } => None,
            })
            .flatten()
            .collect();
        held_out.sort_unstable();
        held_out.dedup();
        let id = if held_out.is_empty() {
            full.clone()
        } else {
            if held_out.len() + 1 >= full.num_classes() {
                return Err(Error::Config("semantic shifts must leave at least two ID classes".into()));
            }
            semantic_partition(&full, &held_out)?.0
        };
        let (train, val, test) = split(&id, config.data.split, config.data.split_seed)?;
        let mut eval = vec![EvalSet {
            name: ID_DATASET.to_string(),
            role: DatasetRole::Test,
            data: test.clone(),
        }];
        for s in &config.data.shifts {
            let (role, data) = match &s.shift.kind {
                ShiftKind::Covariate { .. } => (DatasetRole::Covariate, apply_shift(&test, &s.shift)?),
                ShiftKind::Semantic { .. } => (DatasetRole::Semantic, apply_shift(&full, &s.shift)?),
            };
            eval.push(EvalSet {
                name: s.name.clone(),
                role,
                data,
            });
        }
        Ok(Self { train, val, eval })
    }

    pub fn model_config(&self, config: &ExperimentConfig) -> ModelConfig {
        config.model.model_config(self.train.dim(), self.train.num_classes())
    }

    fn infos(&self) -> Vec<DatasetInfo> {
        let mut out = vec![
            DatasetInfo::of("train", DatasetRole::Train, &self.train),
            DatasetInfo::of("val", DatasetRole::Validation, &self.val),
        ];
        out.extend(self.eval.iter().map(|e| DatasetInfo::of(&e.name, e.role, &e.data)));
        out
    }
}

/// Seed for ensemble member `index` of the run seeded by `run_seed`.
pub fn member_seed(run_seed: u64, index: usize) -> u64 {
    derive_seed(run_seed, index as u64)
}

/// Base seed for posterior sampling within one run.
pub fn sample_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, SAMPLE_STREAM)
}

/// Base seed for MC dropout masks within one run.
pub fn dropout_seed(run_seed: u64) -> u64 {
    derive_seed(run_seed, DROPOUT_STREAM)
}

/// Output of one member trajectory. Errors are kept as diagnostics so that
/// a failure only affects the cells that need this member.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub map: std::result::Result<Model, String>,
    pub posterior: Option<std::result::Result<SwagPosterior, String>>,
}

/// Fine-tunes one member and, when `collect` is set, runs the SWAG phase.
pub fn train_trajectory(
    config: &ModelConfig,
    data: &Dataset,
    plan: &TrainPlan,
    schedule: &crate::optim::Schedule,
    seed: u64,
    collect: bool,
    max_rank: usize,
) -> Trajectory {
    let plan = TrainPlan {
        seed,
        ..plan.clone()
    };
    let mut run = match Model::init(config.clone(), seed).and_then(|m| SgdRun::new(m, data, plan, schedule.clone())) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            return Trajectory {
                map: Err(msg.clone()),
                posterior: collect.then(|| Err(msg)),
            };
        }
    };
    if let Err(e) = run.run_finetune() {
        let msg = format!("fine-tuning: {e}");
        return Trajectory {
            map: Err(msg.clone()),
            posterior: collect.then(|| Err(msg)),
        };
    }
    let map = run.model().clone();
    let posterior = collect.then(|| {
        let mut acc = MomentAccumulator::new(map.param_len(), max_rank).map_err(|e| e.to_string())?;
        run.run_swag(&mut acc).map_err(|e| format!("SWAG phase: {e}"))?;
        acc.build_posterior().map_err(|e| e.to_string())
    });
    Trajectory { map: Ok(map), posterior }
}

/// Trains the members one seed needs, in parallel.
pub fn train_seed(config: &ExperimentConfig, data: &PreparedData, run_seed: u64) -> Vec<Trajectory> {
    let n_members = config.methods.iter().map(MethodConfig::n_members).max().unwrap_or(1);
    let collect = config.methods.iter().any(|m| m.kind.needs_collection());
    let model_config = data.model_config(config);
    (0..n_members)
        .into_par_iter()
        .map(|i| {
            train_trajectory(
                &model_config,
                &data.train,
                &config.plan,
                &config.schedule,
                member_seed(run_seed, i),
                collect,
                config.max_rank,
            )
        })
        .collect()
}

/// Predictive output of one method: the pooled distribution and, when the
/// method averages several models, each model's distribution.
#[derive(Debug, Clone)]
pub struct MethodPrediction {
    pub pooled: PredictiveDistribution,
    pub members: Option<Vec<PredictiveDistribution>>,
}

/// Trained state of one method for one seed, ready to predict.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(Model),
    Dropout { model: Model, passes: usize, seed: u64 },
    Ensemble(Vec<Model>),
    /// `groups[i]` holds member `i`'s posterior draws.
    Samples { template: Model, groups: Vec<Vec<crate::nnet::ParamVector>> },
}

fn member_error(i: usize, msg: &str) -> String {
    format!("member {i}: {msg}")
}

fn maps(trajectories: &[Trajectory], n: usize) -> std::result::Result<Vec<Model>, String> {
    trajectories[..n]
        .iter()
        .enumerate()
        .map(|(i, t)| t.map.clone().map_err(|e| member_error(i, &e)))
        .collect()
}

fn posteriors(trajectories: &[Trajectory], n: usize) -> std::result::Result<Vec<(Model, SwagPosterior)>, String> {
    trajectories[..n]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let map = t.map.as_ref().map_err(|e| member_error(i, e))?;
            let post = t
                .posterior
                .as_ref()
                .ok_or_else(|| member_error(i, "no SWAG collection"))?
                .as_ref()
                .map_err(|e| member_error(i, e))?;
            Ok((map.clone(), post.clone()))
        })
        .collect()
}

impl Predictor {
    pub fn build(method: &MethodConfig, trajectories: &[Trajectory], run_seed: u64) -> std::result::Result<Self, String> {
        let m = method.n_members();
        let swa = |(map, post): (Model, SwagPosterior)| map.with_params(post.mean()).map_err(|e| e.to_string());
        match method.kind {
            MethodKind::Map => Ok(Predictor::Single(maps(trajectories, 1)?.remove(0))),
            MethodKind::McDropout => Ok(Predictor::Dropout {
                model: maps(trajectories, 1)?.remove(0),
                passes: method.sample_spec(0).n_samples,
                seed: dropout_seed(run_seed),
            }),
            MethodKind::Ensemble => Ok(Predictor::Ensemble(maps(trajectories, m)?)),
            MethodKind::Swa => Ok(Predictor::Single(swa(posteriors(trajectories, 1)?.remove(0))?)),
            MethodKind::MultiSwa => Ok(Predictor::Ensemble(
                posteriors(trajectories, m)?
                    .into_iter()
                    .map(swa)
                    .collect::<std::result::Result<_, _>>()?,
            )),
            MethodKind::Swag | MethodKind::MultiSwag => {
                let pairs = posteriors(trajectories, m)?;
                let refs: Vec<&SwagPosterior> = pairs.iter().map(|(_, p)| p).collect();
                let groups =
                    multiswag_samples(&refs, &method.sample_spec(sample_seed(run_seed))).map_err(|e| e.to_string())?;
                Ok(Predictor::Samples {
                    template: pairs[0].0.clone(),
                    groups,
                })
            }
        }
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<MethodPrediction> {
        match self {
            Predictor::Single(model) => Ok(MethodPrediction {
                pooled: model.forward(features, DropoutMode::Off)?,
                members: None,
            }),
            Predictor::Dropout { model, passes, seed } => {
                let stack = mc_dropout_predict(model, *passes, *seed, features)?;
                Ok(MethodPrediction {
                    pooled: stack.pooled,
                    members: Some(stack.members),
                })
            }
            Predictor::Ensemble(models) => {
                let stack = ensemble_predict(models, features)?;
                Ok(MethodPrediction {
                    pooled: stack.pooled,
                    members: Some(stack.members),
                })
            }
            Predictor::Samples { template, groups } => {
                // pool within each member first, then across members
                let mut all = Vec::new();
                let mut member_means = Vec::with_capacity(groups.len());
                for g in groups {
                    let dists = g
                        .iter()
                        .map(|p| template.with_params(p)?.forward(features, DropoutMode::Off))
                        .collect::<Result<Vec<_>>>()?;
                    member_means.push(PredictiveDistribution::mean_of(&dists)?);
                    all.extend(dists);
                }
                Ok(MethodPrediction {
                    pooled: PredictiveDistribution::mean_of(&member_means)?,
                    members: Some(all),
                })
            }
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Metrics for one method on every evaluation set.
pub fn evaluate(predictor: &Predictor, data: &PreparedData, n_bins: usize) -> Vec<Result<CellMetrics>> {
    let id = predictor.predict(data.eval[0].data.features().view()).and_then(|pred| {
        let h = entropies(&pred.pooled);
        let avg = match &pred.members {
            Some(m) => Some(average_entropy(Some(m))?),
            None => None,
        };
        Ok((pred, h, avg))
    });
    let id = match id {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            return data.eval.iter().map(|_| Err(Error::Numeric(msg.clone()))).collect();
        }
    };
    let (id_pred, id_h, id_avg) = &id;
    data.eval
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let owned;
            let (pred, h, avg) = if k == 0 {
                (id_pred, id_h, id_avg)
            } else {
                let pred = predictor.predict(set.data.features().view())?;
                let h = entropies(&pred.pooled);
                let avg = match &pred.members {
                    Some(m) => Some(average_entropy(Some(m))?),
                    None => None,
                };
                owned = (pred, h, avg);
                (&owned.0, &owned.1, &owned.2)
            };
            let calibration = if set.role == DatasetRole::Semantic {
                None
            } else {
                let input = EvalInput::new(&pred.pooled, pred.members.as_deref(), set.data.labels())?;
                Some(CalibrationReport::compute(&input, n_bins)?)
            };
            let (auroc_entropy, auroc_avg_entropy) = if k == 0 {
                (None, None)
            } else {
                let a = auroc(id_h, h)?;
                let b = match (id_avg, avg) {
                    (Some(i), Some(o)) => Some(auroc(i, o)?),
                    _ => None,
                };
                (Some(a), b)
            };
            Ok(CellMetrics {
                calibration,
                entropy: Some(mean(h)),
                avg_entropy: avg.as_deref().map(mean),
                auroc_entropy,
                auroc_avg_entropy,
            })
        })
        .collect()
}

/// Cells for one seed, ordered by method then evaluation set.
pub fn run_seed(config: &ExperimentConfig, data: &PreparedData, run_seed: u64) -> Vec<Vec<Cell>> {
    let trajectories = train_seed(config, data, run_seed);
    config
        .methods
        .par_iter()
        .map(|method| {
            let name = method.name();
            let results = match Predictor::build(method, &trajectories, run_seed) {
                Ok(p) => evaluate(&p, data, config.metrics.n_bins),
                Err(msg) => data.eval.iter().map(|_| Err(Error::Numeric(msg.clone()))).collect(),
            };
            data.eval
                .iter()
                .zip(results)
                .map(|(set, r)| match r {
                    Ok(metrics) => Cell {
                        method: name.clone(),
                        dataset: set.name.clone(),
                        seed: run_seed,
                        status: CellStatus::Ok,
                        diagnostic: None,
                        metrics,
                    },
                    Err(e) => Cell {
                        method: name.clone(),
                        dataset: set.name.clone(),
                        seed: run_seed,
                        status: CellStatus::Failed,
                        diagnostic: Some(e.to_string()),
                        metrics: CellMetrics::default(),
                    },
                })
                .collect()
        })
        .collect()
}

/// Runs the whole grid. Results do not depend on `config.workers`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    let data = PreparedData::build(config)?;
    data.model_config(config).validate()?;
    let work = || -> Vec<Vec<Vec<Cell>>> {
        config
            .seeds
            .par_iter()
            .map(|&s| run_seed(config, &data, s))
            .collect()
    };
    let per_seed = match config.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work),
        None => work(),
    };
    // order cells by method, then dataset, then seed
    let mut cells = Vec::new();
    for m in 0..config.methods.len() {
        for d in 0..data.eval.len() {
            for seed_cells in &per_seed {
                cells.push(seed_cells[m][d].clone());
            }
        }
    }
    let aggregates = aggregate(&cells);
    Ok(Report {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: Some(chrono::Utc::now().to_rfc3339()),
        config: config.clone(),
        datasets: data.infos(),
        cells,
        aggregates,
    })
}
