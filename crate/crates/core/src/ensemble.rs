//! Multi-model predictors: deep ensembles, MultiSWA, MultiSWAG and MC dropout.
//!
//! Every predictor yields a [`PredictiveStack`]: one distribution per member
//! plus their uniform mean. For MultiSWAG each member's distribution is
//! already the average over its own posterior samples.

use std::fs;
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nnet::{DropoutMode, Model, ModelConfig, ParamVector, PredictiveDistribution};
use crate::optim::{Schedule, SgdRun, TrainPlan};
use crate::rng::derive_seed;
use crate::swag::{draw_samples, MomentAccumulator, SampleSpec, SwagPosterior, DEFAULT_MAX_RANK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberMethod {
    Map,
    Swa,
    Swag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub member_seeds: Vec<u64>,
    pub method: MemberMethod,
    /// Maximum number of deviation columns kept per SWAG member.
    #[serde(default = "default_rank")]
    pub max_rank: usize,
}

fn default_rank() -> usize {
    DEFAULT_MAX_RANK
}

impl EnsembleSpec {
    /// `n_members` seeds derived from `base_seed`.
    pub fn derived(n_members: usize, base_seed: u64, method: MemberMethod) -> Self {
        Self {
            member_seeds: (0..n_members as u64).map(|i| derive_seed(base_seed, i)).collect(),
            method,
            max_rank: DEFAULT_MAX_RANK,
        }
    }

    pub fn n_members(&self) -> usize {
        self.member_seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.member_seeds.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        let mut s = self.member_seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.member_seeds.len() {
            return Err(Error::Config("ensemble member seeds must be distinct".into()));
        }
        if self.max_rank < 2 {
            return Err(Error::Config("max_rank must be at least 2".into()));
        }
        Ok(())
    }
}

/// Member distributions and their uniform average.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveStack {
    pub members: Vec<PredictiveDistribution>,
    pub pooled: PredictiveDistribution,
}

impl PredictiveStack {
    pub fn from_members(members: Vec<PredictiveDistribution>) -> Result<Self> {
        let pooled = PredictiveDistribution::mean_of(&members)?;
        Ok(Self { members, pooled })
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }
}

/// Everything one seeded trajectory produces: the fine-tuned (MAP) model
/// and, when collection ran, the SWAG posterior over the adapters.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub seed: u64,
    pub map: Model,
    pub posterior: Option<SwagPosterior>,
}

impl MemberRun {
    pub fn swa_model(&self) -> Option<Model> {
        self.posterior
            .as_ref()
            .map(|p| self.map.with_params(p.mean()).expect("posterior matches model"))
    }
}

/// Trains one member: fine-tuning, then (if `collect`) the SWAG phase.
pub fn train_member(
    config: &ModelConfig,
    data: &Dataset,
    plan: &TrainPlan,
    schedule: &Schedule,
    seed: u64,
    collect: bool,
    max_rank: usize,
) -> Result<MemberRun> {
    let model = Model::init(config.clone(), seed)?;
    let plan = TrainPlan {
        seed,
        ..plan.clone()
    };
    let mut run = SgdRun::new(model, data, plan, schedule.clone())?;
    run.run_finetune()?;
    let map = run.model().clone();
    let posterior = if collect {
        let mut acc = MomentAccumulator::new(map.param_len(), max_rank)?;
        run.run_swag(&mut acc)?;
        Some(acc.build_posterior()?)
    } else {
        None
    };
    Ok(MemberRun { seed, map, posterior })
}

/// Trained ensemble member, as required by the ensemble method.
#[derive(Debug, Clone, PartialEq)]
pub enum MemberArtifact {
    Map(Model),
    Swa(Model),
    Swag { template: Model, posterior: SwagPosterior },
}

impl MemberArtifact {
    fn from_run(run: MemberRun, method: MemberMethod) -> Self {
        match method {
            MemberMethod::Map => MemberArtifact::Map(run.map),
            MemberMethod::Swa => MemberArtifact::Swa(run.swa_model().expect("collected")),
            MemberMethod::Swag => {
                let posterior = run.posterior.expect("collected");
                let template = run.map.with_params(posterior.mean()).expect("posterior matches model");
                MemberArtifact::Swag { template, posterior }
            }
        }
    }
}

/// Trains `spec.member_seeds.len()` independent members in parallel.
pub fn train_members(
    config: &ModelConfig,
    data: &Dataset,
    plan: &TrainPlan,
    schedule: &Schedule,
    spec: &EnsembleSpec,
) -> Result<Vec<MemberArtifact>> {
    spec.validate()?;
    let collect = spec.method != MemberMethod::Map;
    spec.member_seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            train_member(config, data, plan, schedule, seed, collect, spec.max_rank)
                .map(|run| MemberArtifact::from_run(run, spec.method))
                .map_err(|e| Error::Member {
                    member: i,
                    source: Box::new(e),
                })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Deterministic forward of each model; used for deep ensembles and MultiSWA.
pub fn ensemble_predict(models: &[Model], features: ArrayView2<f64>) -> Result<PredictiveStack> {
    if models.is_empty() {
        return Err(Error::Argument("no ensemble members".into()));
    }
    let members = models
        .iter()
        .map(|m| m.forward(features, DropoutMode::Off))
        .collect::<Result<Vec<_>>>()?;
    PredictiveStack::from_members(members)
}

/// Sampling seed for member `index` of a MultiSWAG ensemble.
pub fn member_sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Posterior draws for every member, member `i` seeded by [`member_sample_seed`].
pub fn multiswag_samples(posteriors: &[&SwagPosterior], spec: &SampleSpec) -> Result<Vec<Vec<ParamVector>>> {
    posteriors
        .iter()
        .enumerate()
        .map(|(i, post)| {
            draw_samples(
                post,
                &SampleSpec {
                    seed: member_sample_seed(spec.seed, i),
                    ..spec.clone()
                },
            )
        })
        .collect()
}

/// Pools each member's sampled models first, then stacks the members.
pub fn predict_sample_groups(
    template: &Model,
    groups: &[Vec<ParamVector>],
    features: ArrayView2<f64>,
) -> Result<PredictiveStack> {
    if groups.is_empty() {
        return Err(Error::Argument("no ensemble members".into()));
    }
    let members = groups
        .iter()
        .map(|g| {
            let dists = g
                .iter()
                .map(|p| template.with_params(p)?.forward(features, DropoutMode::Off))
                .collect::<Result<Vec<_>>>()?;
            PredictiveDistribution::mean_of(&dists)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictiveStack::from_members(members)
}

/// MultiSWAG prediction: `spec.n_samples` draws per member, pooled within
/// the member, then uniformly across members.
pub fn multiswag_predict(
    template: &Model,
    posteriors: &[&SwagPosterior],
    spec: &SampleSpec,
    features: ArrayView2<f64>,
) -> Result<PredictiveStack> {
    if posteriors.is_empty() {
        return Err(Error::Argument("no ensemble members".into()));
    }
    if let Some(p) = posteriors.iter().find(|p| p.dim() != template.param_len()) {
        return Err(Error::shape("posterior dimension", template.param_len(), p.dim()));
    }
    let groups = multiswag_samples(posteriors, spec)?;
    predict_sample_groups(template, &groups, features)
}

/// `n_forward` stochastic passes with independent adapter dropout masks.
pub fn mc_dropout_predict(model: &Model, n_forward: usize, seed: u64, features: ArrayView2<f64>) -> Result<PredictiveStack> {
    if model.config().lora_dropout <= 0.0 {
        return Err(Error::Config("MC dropout needs lora_dropout > 0".into()));
    }
    if n_forward == 0 {
        return Err(Error::Config("n_forward must be at least 1".into()));
    }
    let members = (0..n_forward as u64)
        .map(|i| model.forward(features, DropoutMode::Stochastic(derive_seed(seed, i))))
        .collect::<Result<Vec<_>>>()?;
    PredictiveStack::from_members(members)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    method: MemberMethod,
    member_seeds: Vec<u64>,
    members: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    posterior: Option<String>,
}

const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "swag-lora-ensemble/1";

/// Writes `manifest.json` plus one checkpoint (and posterior) per member.
pub fn save_ensemble(dir: &Path, spec: &EnsembleSpec, members: &[MemberArtifact]) -> Result<()> {
    if members.len() != spec.n_members() {
        return Err(Error::shape("ensemble members", spec.n_members(), members.len()));
    }
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(members.len());
    for (i, m) in members.iter().enumerate() {
        let checkpoint = format!("member_{i:02}.json");
        let (model, post) = match m {
            MemberArtifact::Map(model) | MemberArtifact::Swa(model) => (model, None),
            MemberArtifact::Swag { template, posterior } => (template, Some(posterior)),
        };
        model.save(&dir.join(&checkpoint))?;
        let posterior = match post {
            Some(p) => {
                let name = format!("member_{i:02}.swag");
                p.save(&dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry { checkpoint, posterior });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        method: spec.method,
        member_seeds: spec.member_seeds.clone(),
        members: entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<(EnsembleSpec, Vec<MemberArtifact>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            path: dir.join(MANIFEST),
            message: format!("unsupported ensemble format {}", manifest.format),
        });
    }
    let members = manifest
        .members
        .iter()
        .map(|e| {
            let model = Model::load(&dir.join(&e.checkpoint))?;
            Ok(match (manifest.method, &e.posterior) {
                (MemberMethod::Map, _) => MemberArtifact::Map(model),
                (MemberMethod::Swa, _) => MemberArtifact::Swa(model),
                (MemberMethod::Swag, Some(p)) => MemberArtifact::Swag {
                    template: model,
                    posterior: SwagPosterior::load(&dir.join(p))?,
                },
                (MemberMethod::Swag, None) => {
                    return Err(Error::Format {
                        path: dir.join(MANIFEST),
                        message: "swag member without posterior".into(),
                    })
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = EnsembleSpec {
        member_seeds: manifest.member_seeds,
        method: manifest.method,
        max_rank: members
            .iter()
            .filter_map(|m| match m {
                MemberArtifact::Swag { posterior, .. } => Some(posterior.rank()),
                _ => None,
            })
            .max()
            .unwrap_or(DEFAULT_MAX_RANK)
            .max(2),
    };
    Ok((spec, members))
}
