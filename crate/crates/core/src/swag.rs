//! SWA and SWAG over the adapter parameter vector.
//!
//! [`MomentAccumulator`] keeps running first and second moments of the SGD
//! iterates plus a ring buffer of the last `K` deviations, each taken
//! against the running mean at the time it was collected. From these,
//! [`SwagPosterior`] is the Gaussian
//!
//! ```text
//! N(w_swa, ½ (Σ_diag + D̂ D̂ᵀ / (K - 1)))
//! ```
//!
//! with `Σ_diag = diag(mean(w²) - w_swa²)`. Samples are drawn in factored
//! form; the dense covariance is only ever built for inspection.
//!
//! # Posterior file layout
//!
//! All integers and floats little-endian:
//!
//! | bytes            | content                         |
//! |------------------|---------------------------------|
//! | 8                | magic `SWAGPOST`                |
//! | 4 (u32)          | format version (1)              |
//! | 8 (u64)          | `dim`                           |
//! | 8 (u64)          | `K`                             |
//! | 8 (f64)          | `var_floor`                     |
//! | 8·dim (f64)      | mean                            |
//! | 8·dim (f64)      | diagonal variance               |
//! | 8·dim·K (f64)    | `D̂`, column-major (oldest first) |

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{DropoutMode, Model, ParamVector, PredictiveDistribution};
use crate::optim::IterateSink;
use crate::rng::{stream_rng, Stream};

/// Default maximum number of deviation columns.
pub const DEFAULT_MAX_RANK: usize = 20;

/// Lower clamp on the diagonal variance.
pub const VAR_FLOOR: f64 = 1e-12;

const MAGIC: &[u8; 8] = b"SWAGPOST";
const FORMAT_VERSION: u32 = 1;

/// Running moments of SGD iterates, 64-bit throughout.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentAccumulator {
    dim: usize,
    max_rank: usize,
    n_seen: usize,
    mean: Vec<f64>,
    sq_mean: Vec<f64>,
    deviations: VecDeque<Vec<f64>>,
}

impl MomentAccumulator {
    pub fn new(dim: usize, max_rank: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("accumulator dimension must be positive".into()));
        }
        if max_rank < 2 {
            return Err(Error::Config(format!("max_rank must be at least 2, got {max_rank}")));
        }
        Ok(Self {
            dim,
            max_rank,
            n_seen: 0,
            mean: vec![0.0; dim],
            sq_mean: vec![0.0; dim],
            deviations: VecDeque::with_capacity(max_rank),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    /// Number of iterates collected so far.
    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    /// Number of buffered deviation columns, `min(n_seen, max_rank)`.
    pub fn occupancy(&self) -> usize {
        self.deviations.len()
    }

    pub fn collect(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(Error::shape("collect", self.dim, w.len()));
        }
        let n = self.n_seen as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.sq_mean).zip(w) {
            *m += (x - *m) / (n + 1.0);
            *s += (x * x - *s) / (n + 1.0);
        }
        self.n_seen += 1;
        if self.deviations.len() == self.max_rank {
            self.deviations.pop_front();
        }
        self.deviations
            .push_back(w.iter().zip(&self.mean).map(|(x, m)| x - m).collect());
        Ok(())
    }

    /// `(1/T) Σ w_i`.
    pub fn swa_mean(&self) -> Result<ParamVector> {
        if self.n_seen == 0 {
            return Err(Error::EmptyAccumulator);
        }
        Ok(ParamVector(self.mean.clone()))
    }

    /// `(1/T) Σ w_i²`, elementwise.
    pub fn second_moment(&self) -> Result<ParamVector> {
        if self.n_seen == 0 {
            return Err(Error::EmptyAccumulator);
        }
        Ok(ParamVector(self.sq_mean.clone()))
    }

    /// Biased per-coordinate variance, clamped below at [`VAR_FLOOR`].
    pub fn diag_cov(&self) -> Result<ParamVector> {
        if self.n_seen < 2 {
            return Err(Error::InsufficientIterates {
                needed: 2,
                have: self.n_seen,
            });
        }
        Ok(ParamVector(
            self.sq_mean
                .iter()
                .zip(&self.mean)
                .map(|(s, m)| (s - m * m).max(VAR_FLOOR))
                .collect(),
        ))
    }

    /// `dim × occupancy` matrix of buffered deviations in collection order.
    pub fn low_rank_factor(&self) -> Result<Array2<f64>> {
        let k = self.occupancy();
        if k < 2 {
            return Err(Error::InsufficientIterates { needed: 2, have: k });
        }
        let mut d = Array2::zeros((self.dim, k));
        for (j, col) in self.deviations.iter().enumerate() {
            d.column_mut(j).assign(&Array1::from(col.clone()));
        }
        Ok(d)
    }

    pub fn build_posterior(&self) -> Result<SwagPosterior> {
        let mean = self.swa_mean()?;
        let diag_var = self.diag_cov()?;
        let dhat = self.low_rank_factor()?;
        SwagPosterior::new(mean, diag_var, dhat, VAR_FLOOR)
    }
}

impl IterateSink for MomentAccumulator {
    fn push(&mut self, _epoch: usize, params: &ParamVector) -> Result<()> {
        self.collect(params.as_slice())
    }
}

/// Gaussian posterior with diagonal plus low-rank covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SwagPosterior {
    mean: ParamVector,
    diag_var: ParamVector,
    dhat: Array2<f64>,
    var_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PosteriorJson {
    dim: usize,
    rank: usize,
    var_floor: f64,
    mean: Vec<f64>,
    diag_var: Vec<f64>,
    /// Deviation columns, oldest first.
    dhat_columns: Vec<Vec<f64>>,
}

impl SwagPosterior {
    pub fn new(mean: ParamVector, diag_var: ParamVector, dhat: Array2<f64>, var_floor: f64) -> Result<Self> {
        let dim = mean.len();
        if diag_var.len() != dim {
            return Err(Error::shape("posterior diagonal", dim, diag_var.len()));
        }
        if dhat.nrows() != dim {
            return Err(Error::shape("posterior deviation rows", dim, dhat.nrows()));
        }
        if dhat.ncols() < 2 {
            return Err(Error::InsufficientIterates {
                needed: 2,
                have: dhat.ncols(),
            });
        }
        if var_floor.is_nan() || var_floor <= 0.0 {
            return Err(Error::Config("var_floor must be positive".into()));
        }
        if diag_var.as_slice().iter().any(|&v| !(v >= var_floor && v.is_finite())) {
            return Err(Error::Numeric("diagonal variance below floor or non-finite".into()));
        }
        if mean.as_slice().iter().chain(dhat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("posterior contains non-finite values".into()));
        }
        Ok(Self {
            mean,
            diag_var,
            dhat,
            var_floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of deviation columns `K`.
    pub fn rank(&self) -> usize {
        self.dhat.ncols()
    }

    pub fn mean(&self) -> &ParamVector {
        &self.mean
    }

    pub fn diag_var(&self) -> &ParamVector {
        &self.diag_var
    }

    pub fn dhat(&self) -> &Array2<f64> {
        &self.dhat
    }

    pub fn var_floor(&self) -> f64 {
        self.var_floor
    }

    /// `½ (Σ_diag + D̂ D̂ᵀ / (K - 1))` as a dense matrix. Only sensible for small dims.
    pub fn dense_covariance(&self) -> Array2<f64> {
        let k = self.rank() as f64;
        let mut cov = self.dhat.dot(&self.dhat.t()) / (k - 1.0);
        for (i, v) in self.diag_var.as_slice().iter().enumerate() {
            cov[[i, i]] += v;
        }
        cov * 0.5
    }

    /// `w_swa + s/√2 · √Σ_diag ⊙ z₁ + s/√(2(K-1)) · D̂ z₂`.
    pub fn sample<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> ParamVector {
        if scale == 0.0 {
            return self.mean.clone();
        }
        let dim = self.dim();
        let k = self.rank();
        let z1: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let z2 = Array1::from_shape_simple_fn(k, || StandardNormal.sample(rng));
        let low = self.dhat.dot(&z2);
        let c_diag = scale / 2f64.sqrt();
        let c_low = scale / (2.0 * (k as f64 - 1.0)).sqrt();
        ParamVector(
            (0..dim)
                .map(|i| self.mean.0[i] + c_diag * self.diag_var.0[i].sqrt() * z1[i] + c_low * low[i])
                .collect(),
        )
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        w.write_all(&self.var_floor.to_le_bytes())?;
        for v in self.mean.as_slice().iter().chain(self.diag_var.as_slice()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for col in self.dhat.columns() {
            for v in col {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Format {
            path: "<stream>".into(),
            message: m.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut b8 = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let dim = read_u64(&mut r)? as usize;
        let k = read_u64(&mut r)? as usize;
        let var_floor = f64::from_bits(read_u64(&mut r)?);
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mean = read_vec(dim)?;
        let diag = read_vec(dim)?;
        let cols = read_vec(dim * k)?;
        let dhat = Array2::from_shape_vec((k, dim), cols)
            .map_err(|e| bad(&e.to_string()))?
            .reversed_axes()
            .as_standard_layout()
            .to_owned();
        Self::new(ParamVector(mean), ParamVector(diag), dhat, var_floor)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(bytes.as_slice()).map_err(|e| match e {
            Error::Format { message, .. } => Error::Format {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// Human-readable export for small posteriors.
    pub fn to_json_debug(&self) -> Result<String> {
        let doc = PosteriorJson {
            dim: self.dim(),
            rank: self.rank(),
            var_floor: self.var_floor,
            mean: self.mean.0.clone(),
            diag_var: self.diag_var.0.clone(),
            dhat_columns: self.dhat.columns().into_iter().map(|c| c.to_vec()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_debug(text: &str) -> Result<Self> {
        let doc: PosteriorJson = serde_json::from_str(text)?;
        let mut dhat = Array2::zeros((doc.dim, doc.dhat_columns.len()));
        for (j, col) in doc.dhat_columns.iter().enumerate() {
            if col.len() != doc.dim {
                return Err(Error::shape("posterior column", doc.dim, col.len()));
            }
            dhat.column_mut(j).assign(&Array1::from(col.clone()));
        }
        Self::new(ParamVector(doc.mean), ParamVector(doc.diag_var), dhat, doc.var_floor)
    }
}

/// How many models to draw from a posterior and at what scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub n_samples: usize,
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            n_samples: 15,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("sample scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `spec.n_samples` parameter vectors drawn in sequence from one seeded stream.
pub fn draw_samples(post: &SwagPosterior, spec: &SampleSpec) -> Result<Vec<ParamVector>> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Posterior);
    Ok((0..spec.n_samples).map(|_| post.sample(spec.scale, &mut rng)).collect())
}

/// Deterministic forwards of `template` with each parameter vector, plus their mean.
pub fn predict_with_params(
    template: &Model,
    params: &[ParamVector],
    features: ndarray::ArrayView2<f64>,
) -> Result<(PredictiveDistribution, Vec<PredictiveDistribution>)> {
    let per_sample = params
        .iter()
        .map(|p| template.with_params(p)?.forward(features, DropoutMode::Off))
        .collect::<Result<Vec<_>>>()?;
    let pooled = PredictiveDistribution::mean_of(&per_sample)?;
    Ok((pooled, per_sample))
}

/// Bayesian model average over `spec.n_samples` posterior draws.
pub fn bma_predict(
    template: &Model,
    post: &SwagPosterior,
    spec: &SampleSpec,
    features: ndarray::ArrayView2<f64>,
) -> Result<(PredictiveDistribution, Vec<PredictiveDistribution>)> {
    if post.dim() != template.param_len() {
        return Err(Error::shape("posterior dimension", template.param_len(), post.dim()));
    }
    let samples = draw_samples(post, spec)?;
    predict_with_params(template, &samples, features)
}
