//! Inference head: stage-4 embeddings, a one-vs-rest linear SVM, softmax
//! scores and study-level aggregation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelParams;
use crate::contrastive::NUM_STAGES;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Images per inference batch. Eval-mode outputs do not depend on it.
const EMBED_CHUNK: usize = 64;

/// Which twin branch an embedding is computed through.
///
/// Both branches read the same parameters; the second one places the image in
/// the partner half of a pair batch, exactly as during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    First,
    Second,
}

/// Final-stage embeddings `[N][D]` of a list of `[C, S, S]` images.
pub fn embed<T: Element>(params: &ModelParams<T>, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let batch: Tensor<T> = Tensor::stack(chunk)?.cast();
        let e = params.embed_batch(&batch, NUM_STAGES)?;
        for i in 0..chunk.len() {
            out.push(e.row(i).iter().map(|v| v.as_f64()).collect());
        }
    }
    Ok(out)
}

pub fn embed_samples<T: Element>(params: &ModelParams<T>, samples: &[Sample<'_>]) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| s.image).collect();
    embed(params, &images)
}

/// Embeds one image through the chosen branch.
pub fn embed_via<T: Element>(params: &ModelParams<T>, image: &Tensor<f32>, branch: Branch) -> Result<Vec<f64>> {
    let batch: Tensor<T> = match branch {
        Branch::First => Tensor::stack(&[image])?.cast(),
        Branch::Second => {
            let anchor = Tensor::zeros(image.shape());
            Tensor::stack(&[&anchor, image])?.cast()
        }
    };
    let e = params.embed_batch(&batch, NUM_STAGES)?;
    let row = match branch {
        Branch::First => 0,
        Branch::Second => 1,
    };
    Ok(e.row(row).iter().map(|v| v.as_f64()).collect())
}

/// Writes `slice_id,study_id,true_class,e_1..e_D` rows.
pub fn write_embeddings_csv<W: Write>(
    rows: &[(String, String, usize)],
    embeddings: &[Vec<f64>],
    out: W,
) -> Result<()> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["slice_id".to_string(), "study_id".into(), "true_class".into()];
    header.extend((1..=dim).map(|i| format!("e_{i}")));
    w.write_record(&header)?;
    for ((slice, study, class), e) in rows.iter().zip(embeddings) {
        let mut record = vec![slice.clone(), study.clone(), class.to_string()];
        record.extend(e.iter().map(|v| v.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Hinge-loss weight C.
    pub c: f64,
    /// Sweeps over the training set per binary problem.
    pub max_epochs: usize,
    /// Stop once the projected-gradient spread falls below this.
    pub tolerance: f64,
    /// Z-score features with training statistics before fitting.
    pub standardize: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            max_epochs: 1000,
            tolerance: 1e-6,
            standardize: true,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("SVM C must be positive, got {}", self.c)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("SVM max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// Class ids in training data, ascending; one hyperplane each.
    pub classes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub c: f64,
    /// Per-feature `(mean, scale)` applied before the hyperplanes.
    pub standardization: Option<Vec<(f64, f64)>>,
}

/// Primal objective `½‖w‖² + b² / 2 + C Σ max(0, 1 − y (w·x + b))`, the bias
/// being treated as the weight of a constant feature.
pub fn binary_objective(x: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| (1.0 - yi * (dot(w, xi) + b)).max(0.0))
        .sum();
    reg + c * hinge
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual coordinate descent for one binary problem with labels ±1.
pub fn fit_binary(x: &[Vec<f64>], y: &[f64], config: &SvmConfig) -> (Vec<f64>, f64) {
    let dim = x.first().map_or(0, Vec::len);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut alpha = vec![0.0; x.len()];
    let diag: Vec<f64> = x.iter().map(|xi| dot(xi, xi) + 1.0).collect();
    for _ in 0..config.max_epochs {
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for i in 0..x.len() {
            let g = y[i] * (dot(&w, &x[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == config.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / diag[i]).clamp(0.0, config.c);
                let step = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += step * xj;
                }
                b += step;
            }
        }
        if pg_max - pg_min < config.tolerance {
            break;
        }
    }
    (w, b)
}

/// Fits one hyperplane per class present in `labels` against the rest.
pub fn svm_train(features: &[Vec<f64>], labels: &[usize], config: &SvmConfig) -> Result<SvmModel> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("feature rows differ in length".into()));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Contract(format!(
            "SVM training needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let standardization = config.standardize.then(|| {
        let n = features.len() as f64;
        (0..dim)
            .map(|j| {
                let mean = features.iter().map(|f| f[j]).sum::<f64>() / n;
                let var = features.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                (mean, if sd > 1e-12 { sd } else { 1.0 })
            })
            .collect::<Vec<_>>()
    });
    let x: Vec<Vec<f64>> = match &standardization {
        Some(s) => features.iter().map(|f| apply_scaling(f, s)).collect(),
        None => features.to_vec(),
    };
    let mut weights = Vec::with_capacity(classes.len());
    let mut biases = Vec::with_capacity(classes.len());
    for &class in &classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let (w, b) = fit_binary(&x, &y, config);
        weights.push(w);
        biases.push(b);
    }
    Ok(SvmModel {
        classes,
        weights,
        biases,
        c: config.c,
        standardization,
    })
}

fn apply_scaling(f: &[f64], s: &[(f64, f64)]) -> Vec<f64> {
    f.iter().zip(s).map(|(v, (m, sd))| (v - m) / sd).collect()
}

impl SvmModel {
    /// One-vs-rest decision values, in `classes` order.
    pub fn decision_values(&self, feature: &[f64]) -> Vec<f64> {
        let scaled;
        let x = match &self.standardization {
            Some(s) => {
                scaled = apply_scaling(feature, s);
                &scaled[..]
            }
            None => feature,
        };
        self.weights.iter().zip(&self.biases).map(|(w, b)| dot(w, x) + b).collect()
    }

    /// Softmax over the decision values, in `classes` order.
    pub fn predict_proba(&self, feature: &[f64]) -> Vec<f64> {
        softmax(&self.decision_values(feature))
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Arithmetic mean of per-slice probability vectors and its argmax.
pub fn average_probabilities(slices: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let Some(first) = slices.first() else {
        return Err(Error::Contract("cannot classify a study without slices".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for p in slices {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = slices.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok((argmax(&mean), mean))
}

/// Study prediction from its slice embeddings: the class id with the highest
/// mean probability, and that mean vector (in `model.classes` order).
pub fn classify_study(model: &SvmModel, slice_embeddings: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    let probs: Vec<Vec<f64>> = slice_embeddings.iter().map(|e| model.predict_proba(e)).collect();
    let (best, mean) = average_probabilities(&probs)?;
    Ok((model.classes[best], mean))
}
