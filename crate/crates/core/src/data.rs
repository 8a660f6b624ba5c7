//! Datasets: seeded synthetic generators, CSV ingestion, splitting and
//! distribution shifts for OOD evaluation.
//!
//! Near-OOD is modelled by a small covariate shift (rotation/translation),
//! far-OOD by a large transform or by holding out whole classes.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nnet::Batch;
use crate::rng::{stream_rng, Stream};

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic {
        spec: SyntheticSpec,
        seed: u64,
    },
    File {
        path: PathBuf,
        sha256: String,
        label_column: String,
        /// Original label string for each dense class index.
        label_names: Vec<String>,
    },
    Derived {
        parent: Box<Provenance>,
        operation: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    /// Requires at least one row, labels below `num_classes` and finite features.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize, provenance: Provenance) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape("dataset labels", features.nrows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::Argument("dataset must contain at least one row".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config("a dataset needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!("label {bad} out of range for {num_classes} classes")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dataset features must be finite".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: self.features.view(),
            labels: &self.labels,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn derived(&self, operation: String) -> Provenance {
        Provenance::Derived {
            parent: Box::new(self.provenance.clone()),
            operation,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], operation: &str) -> Result<Self> {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_classes, self.derived(operation.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SyntheticSpec {
    /// Isotropic Gaussian clusters centred on the vertices of a randomly
    /// oriented regular simplex of the given radius.
    GaussianBlobs {
        n_classes: usize,
        per_class: usize,
        dim: usize,
        radius: f64,
        sigma: f64,
        #[serde(default)]
        label_flip: f64,
    },
    /// Class `k` lies on a noisy ring of radius `k + 1` in the plane.
    ConcentricRings {
        n_classes: usize,
        per_class: usize,
        noise: f64,
        #[serde(default)]
        label_flip: f64,
    },
    /// Unit cells on a `grid × grid` board; cell `(i, j)` carries class
    /// `(i + j) mod n_classes`.
    XorGrid {
        n_classes: usize,
        per_class: usize,
        grid: usize,
        noise: f64,
        #[serde(default)]
        label_flip: f64,
    },
}

impl SyntheticSpec {
    fn common(&self) -> (usize, usize, f64) {
        match *self {
            SyntheticSpec::GaussianBlobs {
                n_classes,
                per_class,
                label_flip,
                ..
            }
            | SyntheticSpec::ConcentricRings {
                n_classes,
                per_class,
                label_flip,
                ..
            }
            | SyntheticSpec::XorGrid {
                n_classes,
                per_class,
                label_flip,
                ..
            } => (n_classes, per_class, label_flip),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n_classes, per_class, flip) = self.common();
        if n_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if per_class == 0 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&flip) {
            return Err(Error::Config("label_flip must lie in [0, 1]".into()));
        }
        match *self {
            SyntheticSpec::GaussianBlobs { dim, radius, sigma, .. } => {
                if dim < n_classes {
                    return Err(Error::Config(format!("blobs need dim >= n_classes ({dim} < {n_classes})")));
                }
                if !(radius.is_finite() && sigma.is_finite() && sigma >= 0.0) {
                    return Err(Error::Config("radius and sigma must be finite, sigma >= 0".into()));
                }
            }
            SyntheticSpec::ConcentricRings { noise, .. } => {
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(Error::Config("noise must be finite and non-negative".into()));
                }
            }
            SyntheticSpec::XorGrid { grid, noise, .. } => {
                if grid == 0 || 2 * (grid - 1) + 1 < n_classes {
                    return Err(Error::Config(format!("a {grid}x{grid} grid cannot host {n_classes} classes")));
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return Err(Error::Config("noise must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `cols` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussian draws).
fn random_orthonormal(rng: &mut ChaCha8Rng, dim: usize, cols: usize) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = Array1::from_shape_simple_fn(dim, || normal(rng));
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    basis
}

/// Deterministic dataset from `(spec, seed)`. Rows are emitted class by class,
/// `per_class` rows each, so row `i` was generated by class `i / per_class`
/// before any label flip.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let (n_classes, per_class, flip) = spec.common();
    let mut rng = stream_rng(seed, Stream::Data);
    let n = n_classes * per_class;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    match *spec {
        SyntheticSpec::GaussianBlobs {
            dim, radius, sigma, ..
        } => {
            let basis = random_orthonormal(&mut rng, dim, n_classes);
            let c = n_classes as f64;
            let vertex_norm = ((c - 1.0) / c).sqrt();
            let means: Vec<Array1<f64>> = (0..n_classes)
                .map(|k| {
                    let mut m = Array1::zeros(dim);
                    for (j, b) in basis.iter().enumerate() {
                        let coef = if j == k { 1.0 - 1.0 / c } else { -1.0 / c };
                        m.scaled_add(coef * radius / vertex_norm, b);
                    }
                    m
                })
                .collect();
            for mean in &means {
                for _ in 0..per_class {
                    rows.push(mean.iter().map(|&m| m + sigma * normal(&mut rng)).collect());
                }
            }
        }
        SyntheticSpec::ConcentricRings { noise, .. } => {
            for k in 0..n_classes {
                let r = (k + 1) as f64;
                for _ in 0..per_class {
                    let theta = rng.random::<f64>() * 2.0 * PI;
                    let rr = r + noise * normal(&mut rng);
                    rows.push(vec![rr * theta.cos(), rr * theta.sin()]);
                }
            }
        }
        SyntheticSpec::XorGrid { grid, noise, .. } => {
            for k in 0..n_classes {
                let cells: Vec<(usize, usize)> = (0..grid)
                    .flat_map(|i| (0..grid).map(move |j| (i, j)))
                    .filter(|(i, j)| (i + j) % n_classes == k)
                    .collect();
                for _ in 0..per_class {
                    let (i, j) = cells[rng.random_range(0..cells.len())];
                    let x = i as f64 + rng.random::<f64>() + noise * normal(&mut rng);
                    let y = j as f64 + rng.random::<f64>() + noise * normal(&mut rng);
                    rows.push(vec![x, y]);
                }
            }
        }
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i / per_class).collect();
    if flip > 0.0 {
        for y in &mut labels {
            if rng.random::<f64>() < flip {
                let other = rng.random_range(0..n_classes - 1);
                *y = if other >= *y { other + 1 } else { other };
            }
        }
    }
    let dim = rows[0].len();
    let features = Array2::from_shape_vec((n, dim), rows.into_iter().flatten().collect())
        .expect("rows have uniform width");
    Dataset::new(
        features,
        labels,
        n_classes,
        Provenance::Synthetic {
            spec: spec.clone(),
            seed,
        },
    )
}

fn parse_err(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

/// Reads a headed CSV. Every column except `label_column` must be numeric.
/// Labels are mapped to dense indices in order of first appearance. Row
/// numbers in errors count data rows from 1, excluding the header.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(0, "", "empty file"));
    }
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_err(0, label_column, "label column not found in header"))?;
    let feature_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != label_idx).collect();
    if feature_cols.is_empty() {
        return Err(parse_err(0, "", "no feature columns"));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_err(row, "", e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_err(
                row,
                "",
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for &c in &feature_cols {
            let cell = record[c].trim();
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, &headers[c], format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, &headers[c], "non-finite value"));
            }
            values.push(v);
        }
        let name = record[label_idx].trim().to_string();
        let next = names.len();
        let y = *index.entry(name.clone()).or_insert_with(|| {
            names.push(name);
            next
        });
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(0, "", "no data rows"));
    }
    let features = Array2::from_shape_vec((labels.len(), feature_cols.len()), values).expect("rectangular");
    let num_classes = names.len().max(2);
    Dataset::new(
        features,
        labels,
        num_classes,
        Provenance::File {
            path: path.to_path_buf(),
            sha256,
            label_column: label_column.to_string(),
            label_names: names,
        },
    )
}

/// Writes `f0..f{d-1}` feature columns plus the label column. Labels are
/// written by name when the dataset came from a file, otherwise by index.
pub fn save_csv(dataset: &Dataset, path: &Path, label_column: &str) -> Result<()> {
    let names = label_names(dataset.provenance());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header)?;
    for (row, &y) in dataset.features.rows().into_iter().zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(match &names {
            Some(n) => n[y].clone(),
            None => y.to_string(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Label names recorded for file-backed datasets (following derivations).
pub fn label_names(p: &Provenance) -> Option<Vec<String>> {
    match p {
        Provenance::File { label_names, .. } => Some(label_names.clone()),
        Provenance::Derived { parent, .. } => label_names(parent),
        Provenance::Synthetic { .. } => None,
    }
}

/// Seeded shuffle then partition into train/validation/test.
pub fn split(dataset: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to 1, got ({ft}, {fv}, {fs})"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * ft).round() as usize;
    let n_val = (n as f64 * fv).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Stratification(format!(
            "{n} rows cannot be split into non-empty parts with fractions ({ft}, {fv}, {fs})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split));
    let (train_idx, rest) = order.split_at(n_train);
    let (val_idx, test_idx) = rest.split_at(n_val);
    let train = dataset.subset(train_idx, &format!("split(train, seed={seed})"))?;
    if let Some(missing) = train.class_counts().iter().position(|&c| c == 0) {
        return Err(Error::Stratification(format!(
            "class {missing} absent from the training split"
        )));
    }
    let val = dataset.subset(val_idx, &format!("split(val, seed={seed})"))?;
    let test = dataset.subset(test_idx, &format!("split(test, seed={seed})"))?;
    Ok((train, val, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftKind {
    /// `x -> scale * R x + translation`, where `R` rotates by `rotation`
    /// radians within a plane drawn from the shift seed.
    Covariate {
        #[serde(default)]
        rotation: f64,
        #[serde(default)]
        translation: Vec<f64>,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Whole classes removed from training and presented as OOD.
    Semantic { held_out: Vec<usize> },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    #[serde(flatten)]
    pub kind: ShiftKind,
    #[serde(default)]
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self, dim: usize, num_classes: usize) -> Result<()> {
        match &self.kind {
            ShiftKind::Covariate {
                rotation,
                translation,
                scale,
            } => {
                if !rotation.is_finite() || !scale.is_finite() || *scale == 0.0 {
                    return Err(Error::Config("covariate shift needs finite rotation and non-zero scale".into()));
                }
                if !translation.is_empty() && translation.len() != dim {
                    return Err(Error::shape("shift translation", dim, translation.len()));
                }
                if translation.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Config("translation must be finite".into()));
                }
                if *rotation != 0.0 && dim < 2 {
                    return Err(Error::Config("rotation needs at least 2 dimensions".into()));
                }
            }
            ShiftKind::Semantic { held_out } => {
                if held_out.is_empty() {
                    return Err(Error::Config("semantic shift needs at least one held-out class".into()));
                }
                if held_out.iter().any(|&c| c >= num_classes) {
                    return Err(Error::Config("held-out class out of range".into()));
                }
                let mut distinct = held_out.clone();
                distinct.sort_unstable();
                distinct.dedup();
                if distinct.len() >= num_classes {
                    return Err(Error::Config("held-out classes must be a strict subset of all classes".into()));
                }
            }
        }
        Ok(())
    }
}

fn transform_features(x: &Array2<f64>, rotation: f64, translation: &[f64], scale: f64, seed: u64) -> Array2<f64> {
    let mut out = x.clone();
    if rotation != 0.0 {
        let mut rng = stream_rng(seed, Stream::Shift);
        let plane = random_orthonormal(&mut rng, x.ncols(), 2);
        let (u, v) = (&plane[0], &plane[1]);
        let (c, s) = (rotation.cos(), rotation.sin());
        for mut row in out.rows_mut() {
            let a = row.dot(u);
            let b = row.dot(v);
            // replace the in-plane component (a, b) by its rotation
            row.scaled_add(c * a - s * b - a, u);
            row.scaled_add(s * a + c * b - b, v);
        }
    }
    if scale != 1.0 {
        out *= scale;
    }
    if !translation.is_empty() {
        out += &Array1::from(translation.to_vec());
    }
    out
}

/// Applies a covariate transform, or extracts the held-out rows of a
/// semantic shift (labels keep their original indices).
pub fn apply_shift(dataset: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    spec.validate(dataset.dim(), dataset.num_classes())?;
    match &spec.kind {
        ShiftKind::Covariate {
            rotation,
            translation,
            scale,
        } => {
            let features = transform_features(&dataset.features, *rotation, translation, *scale, spec.seed);
            Dataset::new(
                features,
                dataset.labels.clone(),
                dataset.num_classes,
                dataset.derived(format!(
                    "covariate(rotation={rotation}, scale={scale}, translation={translation:?}, seed={})",
                    spec.seed
                )),
            )
        }
        ShiftKind::Semantic { held_out } => {
            let idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| held_out.contains(&dataset.labels[i]))
                .collect();
            if idx.is_empty() {
                return Err(Error::Argument("no rows belong to the held-out classes".into()));
            }
            dataset.subset(&idx, &format!("semantic(held_out={held_out:?})"))
        }
    }
}

/// Splits off held-out classes. The in-distribution part has its labels
/// remapped densely to `0..num_classes - held_out.len()`; the OOD part keeps
/// the original labels.
pub fn semantic_partition(dataset: &Dataset, held_out: &[usize]) -> Result<(Dataset, Dataset)> {
    let spec = ShiftSpec {
        kind: ShiftKind::Semantic {
            held_out: held_out.to_vec(),
        },
        seed: 0,
    };
    let ood = apply_shift(dataset, &spec)?;
    let keep: Vec<usize> = (0..dataset.num_classes).filter(|c| !held_out.contains(c)).collect();
    let remap: HashMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| remap.contains_key(&dataset.labels[i]))
        .collect();
    let features = dataset.features.select(Axis(0), &idx);
    let labels = idx.iter().map(|&i| remap[&dataset.labels[i]]).collect();
    let id = Dataset::new(
        features,
        labels,
        keep.len(),
        dataset.derived(format!("in_distribution(held_out={held_out:?})")),
    )?;
    Ok((id, ood))
}
