//! Feed-forward tanh classifier with frozen base weights and LoRA adapters.
//!
//! Each dense layer computes `W0·x + b0 + (α/r)·B·A·x`. `W0` and `b0` are
//! regenerated from `base_seed` and never change; only `A` (r×n) and `B`
//! (m×r) are trainable. Hidden layers use `tanh`, the output layer feeds a
//! softmax. Gradients are computed by hand over the adapter parameters only.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Architecture and adapter hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub base_seed: u64,
    /// Attach an adapter to the classification head as well. Requires
    /// `lora_rank <= min(last hidden dim, num_classes)`.
    #[serde(default)]
    pub adapt_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden_dims: vec![32, 32],
            num_classes: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            base_seed: 0,
            adapt_output: false,
        }
    }
}

impl ModelConfig {
    /// `(fan_in, fan_out)` for every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }

    pub fn is_adapted(&self, layer: usize) -> bool {
        layer < self.hidden_dims.len() || self.adapt_output
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Length of the flattened adapter parameter vector.
    pub fn param_len(&self) -> usize {
        self.layer_dims()
            .iter()
            .enumerate()
            .filter(|(l, _)| self.is_adapted(*l))
            .map(|(_, &(n, m))| self.lora_rank * (m + n))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!(
                "lora_dropout must lie in [0, 1), got {}",
                self.lora_dropout
            )));
        }
        if !self.lora_alpha.is_finite() {
            return Err(Error::Config("lora_alpha must be finite".into()));
        }
        for (l, (n, m)) in self.layer_dims().into_iter().enumerate() {
            if self.is_adapted(l) && self.lora_rank > n.min(m) {
                return Err(Error::Config(format!(
                    "lora_rank {} exceeds min({n}, {m}) for layer {l}",
                    self.lora_rank
                )));
            }
        }
        if self.param_len() == 0 {
            return Err(Error::Config("model has no adapted layers".into()));
        }
        Ok(())
    }
}

/// Flat view of every trainable adapter entry.
///
/// Layout: for each adapted layer in order, `A` row-major then `B`
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Labelled inputs for one forward/backward pass.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Argument("batch must contain at least one row".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::shape("batch labels", features.nrows(), labels.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("batch features contain non-finite values".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class-probability rows, one per input example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution(pub Array2<f64>);

impl PredictiveDistribution {
    pub fn probs(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n_rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.0.ncols()
    }

    /// Arithmetic mean of equally shaped distributions, accumulated in order.
    pub fn mean_of(dists: &[PredictiveDistribution]) -> Result<Self> {
        let first = dists
            .first()
            .ok_or_else(|| Error::Argument("cannot pool zero distributions".into()))?;
        let mut acc = first.0.clone();
        for d in &dists[1..] {
            if d.0.dim() != acc.dim() {
                return Err(Error::shape("pooled rows", acc.len(), d.0.len()));
            }
            acc += &d.0;
        }
        acc /= dists.len() as f64;
        Ok(Self(acc))
    }
}

/// Whether the adapter branch is subject to dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    Off,
    /// Inverted dropout on the adapter-branch output, masks drawn from the seed.
    Stochastic(u64),
}

#[derive(Debug, Clone, PartialEq)]
struct Adapter {
    a: Array2<f64>,
    b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    w0: Array2<f64>,
    b0: Array1<f64>,
    adapter: Option<Adapter>,
}

/// Classifier with frozen base weights and trainable adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
}

struct LayerCache {
    input: Array2<f64>,
    low: Option<Array2<f64>>,
    mask: Option<Array2<f64>>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    logits: Array2<f64>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

impl Model {
    /// Builds the frozen base from `config.base_seed` and draws the adapter
    /// `A` matrices from `rng_seed`; every `B` starts at zero.
    pub fn init(config: ModelConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut base_rng = stream_rng(config.base_seed, Stream::BaseInit);
        let mut adapter_rng = stream_rng(rng_seed, Stream::AdapterInit);
        let r = config.lora_rank;
        let layers = config
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (n, m))| {
                let std = 1.0 / (n as f64).sqrt();
                let w0 = gaussian_matrix(&mut base_rng, m, n, std);
                let b0 = gaussian_matrix(&mut base_rng, 1, m, 0.5).into_shape_with_order(m).unwrap();
                let adapter = config.is_adapted(l).then(|| Adapter {
                    a: gaussian_matrix(&mut adapter_rng, r, n, std),
                    b: Array2::zeros((m, r)),
                });
                Layer { w0, b0, adapter }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_len(&self) -> usize {
        self.config.param_len()
    }

    /// `W0 + (α/r)·B·A` for layer `l`, or `W0` when the layer is not adapted.
    pub fn effective_weight(&self, l: usize) -> Array2<f64> {
        let layer = &self.layers[l];
        match &layer.adapter {
            Some(ad) => &layer.w0 + &(ad.b.dot(&ad.a) * self.config.scaling()),
            None => layer.w0.clone(),
        }
    }

    pub fn base_weight(&self, l: usize) -> &Array2<f64> {
        &self.layers[l].w0
    }

    pub fn base_bias(&self, l: usize) -> &Array1<f64> {
        &self.layers[l].b0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get_params(&self) -> ParamVector {
        let mut out = Vec::with_capacity(self.param_len());
        for ad in self.layers.iter().filter_map(|l| l.adapter.as_ref()) {
            out.extend(ad.a.iter().copied());
            out.extend(ad.b.iter().copied());
        }
        ParamVector(out)
    }

    pub fn set_params(&mut self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::shape("set_params", self.param_len(), params.len()));
        }
        let mut offset = 0;
        for ad in self.layers.iter_mut().filter_map(|l| l.adapter.as_mut()) {
            for m in [&mut ad.a, &mut ad.b] {
                let len = m.len();
                for (dst, src) in m.iter_mut().zip(&params.0[offset..offset + len]) {
                    *dst = *src;
                }
                offset += len;
            }
        }
        Ok(())
    }

    /// Copy of `self` with the given adapter parameters.
    pub fn with_params(&self, params: &ParamVector) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    fn check_input(&self, features: &ArrayView2<f64>) -> Result<()> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::shape("input features", self.config.input_dim, features.ncols()));
        }
        Ok(())
    }

    fn forward_cached(&self, x: ArrayView2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> Result<ForwardCache> {
        let p = self.config.lora_dropout;
        let scale = self.config.scaling();
        let last = self.layers.len() - 1;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w0.t()) + &layer.b0;
            let mut low = None;
            let mut mask = None;
            if let Some(ad) = &layer.adapter {
                let u = h.dot(&ad.a.t());
                let mut branch = u.dot(&ad.b.t()) * scale;
                if let Some(rng) = rng.as_deref_mut() {
                    if p > 0.0 {
                        let keep = 1.0 / (1.0 - p);
                        let m = Array2::from_shape_simple_fn(branch.dim(), || {
                            if rng.random::<f64>() < p {
                                0.0
                            } else {
                                keep
                            }
                        });
                        branch *= &m;
                        mask = Some(m);
                    }
                }
                z += &branch;
                low = Some(u);
            }
            let next = if l < last { z.mapv(f64::tanh) } else { z };
            caches.push(LayerCache {
                input: h,
                low,
                mask,
            });
            h = next;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(ForwardCache { layers: caches, logits: h })
    }

    /// Class probabilities for each row of `features`.
    pub fn forward(&self, features: ArrayView2<f64>, mode: DropoutMode) -> Result<PredictiveDistribution> {
        self.check_input(&features)?;
        let cache = match mode {
            DropoutMode::Off => self.forward_cached(features, None)?,
            DropoutMode::Stochastic(seed) => {
                let mut rng = stream_rng(seed, Stream::Dropout);
                self.forward_cached(features, Some(&mut rng))?
            }
        };
        Ok(PredictiveDistribution(softmax_rows(&cache.logits)))
    }

    /// Forward pass through the frozen base network only, ignoring adapters.
    pub fn forward_base(&self, features: ArrayView2<f64>) -> Result<PredictiveDistribution> {
        self.check_input(&features)?;
        let last = self.layers.len() - 1;
        let mut h = features.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.w0.t()) + &layer.b0;
            h = if l < last { z.mapv(f64::tanh) } else { z };
        }
        Ok(PredictiveDistribution(softmax_rows(&h)))
    }

    /// Mean cross-entropy and its gradient with respect to the adapters.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.loss_and_grads_inner(batch, None)
    }

    /// Same as [`Model::loss_and_grads`] with adapter dropout masks drawn from `rng`.
    pub fn loss_and_grads_dropout(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(f64, ParamVector)> {
        self.loss_and_grads_inner(batch, Some(rng))
    }

    fn loss_and_grads_inner(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        self.check_input(&batch.features)?;
        let c = self.config.num_classes;
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= c) {
            return Err(Error::Argument(format!("label {bad} out of range for {c} classes")));
        }
        let cache = self.forward_cached(batch.features, rng)?;
        let n = batch.len() as f64;

        // d loss / d logits = (softmax - onehot) / N
        let mut loss = 0.0;
        let mut grad = softmax_rows(&cache.logits);
        for (i, (&y, row)) in batch.labels.iter().zip(cache.logits.rows()).enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            grad[[i, y]] -= 1.0;
        }
        loss /= n;
        grad /= n;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }

        let scale = self.config.scaling();
        let mut per_layer: Vec<Option<(Array2<f64>, Array2<f64>)>> = vec![None; self.layers.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lc = &cache.layers[l];
            let mut d_low = None;
            if let (Some(ad), Some(u)) = (&layer.adapter, &lc.low) {
                let mut gv = &grad * scale;
                if let Some(m) = &lc.mask {
                    gv *= m;
                }
                let db = gv.t().dot(u);
                let du = gv.dot(&ad.b);
                let da = du.t().dot(&lc.input);
                per_layer[l] = Some((da, db));
                d_low = Some(du);
            }
            if l == 0 {
                break;
            }
            let mut dx = grad.dot(&layer.w0);
            if let (Some(du), Some(ad)) = (d_low, &layer.adapter) {
                dx += &du.dot(&ad.a);
            }
            // input of layer l is tanh output of layer l-1
            Zip::from(&mut dx).and(&lc.input).for_each(|g, &h| *g *= 1.0 - h * h);
            grad = dx;
        }

        let mut out = Vec::with_capacity(self.param_len());
        for (da, db) in per_layer.into_iter().flatten() {
            out.extend(da.iter().copied());
            out.extend(db.iter().copied());
        }
        Ok((loss, ParamVector(out)))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.get_params(),
        }
    }

    /// Rebuilds a model from a checkpoint; base weights come from `config.base_seed`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Self::init(ckpt.config.clone(), 0)?;
        model.set_params(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

const CHECKPOINT_FORMAT: &str = "swag-lora-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: configuration plus adapter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamVector,
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}
