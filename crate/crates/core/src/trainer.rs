//! SGD training of the shared parameters over sampled pairs.
//!
//! Each mini-batch stacks the anchors and then the partners of its pairs into
//! one `[2B, C, S, S]` batch, so both branches run through the same bound
//! parameters and their gradients accumulate into the same tensors. The
//! optimised objective is the multi-scale loss summed over stages and averaged
//! over the pairs of the batch.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Bound, Forward, Mode, ModelParams, ParamKind};
use crate::contrastive::{self, LossConfig, StageEmbeddings, NUM_STAGES};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::pairing::{self, SamplerConfig, TrainingPair};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Multiply the learning rate by `gamma` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub every: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per mini-batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 bound on the batch gradient; larger gradients are rescaled.
    pub max_grad_norm: Option<f64>,
    pub lr_step: Option<LrStep>,
    /// Parameter initialisation seed.
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub model: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            max_grad_norm: Some(10.0),
            lr_step: None,
            seed: 0,
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            model: BackboneConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced compute budget sized for the `table1-small` fixture:
    /// 32 × 32 inputs, narrower stages, one block per stage, 20 epochs.
    pub fn small() -> Self {
        TrainConfig {
            epochs: 20,
            model: BackboneConfig {
                input_size: 32,
                in_channels: 1,
                stage_channels: [8, 16, 32, 64],
                blocks_per_stage: 1,
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("invalid weight decay {}", self.weight_decay)));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("invalid max_grad_norm {c}")));
            }
        }
        if let Some(step) = self.lr_step {
            if step.every == 0 || !(step.gamma > 0.0) {
                return Err(Error::Config("lr_step needs every >= 1 and gamma > 0".into()));
            }
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            Some(LrStep { every, gamma }) => self.learning_rate * gamma.powi((epoch / every) as i32),
            None => self.learning_rate,
        }
    }
}

/// Loss decomposition of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f64,
    /// Unnormalised sum over used stages and all pairs of the epoch.
    pub raw_loss: f64,
    pub mean_pair_loss: f64,
    /// Unweighted per-stage sums; `None` for stages outside the loss.
    pub stage_loss: [Option<f64>; NUM_STAGES],
    pub same_loss: f64,
    pub different_loss: f64,
    pub same_pairs: usize,
    pub different_pairs: usize,
    /// Steps whose gradient was rescaled by `max_grad_norm`.
    pub clipped_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "learning_rate",
            "raw_loss",
            "mean_pair_loss",
            "stage1_loss",
            "stage2_loss",
            "stage3_loss",
            "stage4_loss",
            "same_loss",
            "different_loss",
            "same_pairs",
            "different_pairs",
            "clipped_steps",
        ])?;
        for r in &self.epochs {
            let mut row = vec![
                r.epoch.to_string(),
                r.learning_rate.to_string(),
                r.raw_loss.to_string(),
                r.mean_pair_loss.to_string(),
            ];
            row.extend(r.stage_loss.iter().map(|s| s.map(|v| v.to_string()).unwrap_or_default()));
            row.extend([
                r.same_loss.to_string(),
                r.different_loss.to_string(),
                r.same_pairs.to_string(),
                r.different_pairs.to_string(),
                r.clipped_steps.to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<training log>", e))?;
        Ok(())
    }
}

/// Loss values of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub stage: [Option<f64>; NUM_STAGES],
    pub same: f64,
    pub different: f64,
    /// Per used stage, the pair distances.
    pub distances: Vec<(usize, Vec<f64>)>,
    /// L2 norm of the loss gradient over trainable entries, before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Mutable optimiser state: one momentum buffer per trainable entry.
pub struct Sgd<T: Element> {
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Sgd {
            velocity: params
                .entries()
                .iter()
                .map(|e| (e.kind == ParamKind::Weight).then(|| vec![T::zero(); e.tensor.numel()]))
                .collect(),
        }
    }
}

/// Stacks images `[C, S, S]` into a batch `[N, C, S, S]` of element type `T`.
pub fn stack_images<T: Element>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    Ok(Tensor::stack(images)?.cast())
}

/// The training objective of one pair batch, recorded on `tape`.
pub struct PairObjective<T> {
    /// Loss summed over stages and pairs, divided by the number of pairs.
    pub objective: Var,
    pub terms: contrastive::LossTerms,
    pub forward: Forward<T>,
}

/// Runs both branches over `batch` (`B` anchors followed by their `B`
/// partners) in training mode and builds the multi-scale loss.
pub fn pair_objective<T: Element>(
    params: &ModelParams<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    batch: Tensor<T>,
    different: &[bool],
    loss: &LossConfig,
) -> Result<PairObjective<T>> {
    let b = different.len();
    let x = tape.leaf(batch);
    let forward = params.forward(tape, bound, x, Mode::Train, &loss.stages)?;
    let mut first: StageEmbeddings = [None; NUM_STAGES];
    let mut second: StageEmbeddings = [None; NUM_STAGES];
    for t in 0..NUM_STAGES {
        if let Some(e) = forward.embeddings[t] {
            first[t] = Some(tape.rows(e, 0, b)?);
            second[t] = Some(tape.rows(e, b, b)?);
        }
    }
    let terms = contrastive::total_loss(tape, &first, &second, different, loss)?;
    let objective = tape.scale(terms.total, T::one() / T::of(b as f64));
    Ok(PairObjective {
        objective,
        terms,
        forward,
    })
}

/// One forward/backward/update step on a batch of pairs.
pub fn train_step<T: Element>(
    params: &mut ModelParams<T>,
    sgd: &mut Sgd<T>,
    samples: &[Sample<'_>],
    pairs: &[TrainingPair],
    config: &TrainConfig,
    learning_rate: f64,
) -> Result<StepLoss> {
    let images: Vec<&Tensor<f32>> = pairs
        .iter()
        .map(|p| samples[p.anchor].image)
        .chain(pairs.iter().map(|p| samples[p.partner].image))
        .collect();
    let different: Vec<bool> = pairs.iter().map(|p| p.different).collect();

    let mut tape = Tape::<T>::new();
    let bound = params.bind(&mut tape);
    let PairObjective {
        objective,
        terms,
        forward,
    } = pair_objective(params, &mut tape, &bound, stack_images(&images)?, &different, &config.loss)?;

    let mut loss = StepLoss {
        total: tape.value(terms.total).data()[0].as_f64(),
        stage: [None; NUM_STAGES],
        same: 0.0,
        different: 0.0,
        distances: Vec::new(),
        grad_norm: 0.0,
        clipped: false,
    };
    for st in &terms.stages {
        let values = tape.value(st.terms).data();
        loss.stage[st.stage - 1] = Some(values.iter().map(|v| v.as_f64()).sum());
        for (&v, &diff) in values.iter().zip(&different) {
            let w = config.loss.stage_weights[st.stage - 1] * v.as_f64();
            if diff {
                loss.different += w;
            } else {
                loss.same += w;
            }
        }
        loss.distances.push((
            st.stage,
            tape.value(st.distance).data().iter().map(|v| v.as_f64()).collect(),
        ));
    }
    if !loss.total.is_finite() {
        return Ok(loss);
    }

    tape.backward(objective)?;
    params.update_running_stats(&forward.bn_stats);

    let grads: Vec<Option<Tensor<T>>> = sgd
        .velocity
        .iter()
        .enumerate()
        .map(|(i, v)| v.as_ref().map(|_| tape.grad_or_zeros(bound.var(i).expect("trainable entries are bound"))))
        .collect();
    loss.grad_norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    let mut scale = T::one();
    if let Some(c) = config.max_grad_norm {
        if loss.grad_norm > c {
            scale = T::of(c / loss.grad_norm);
            loss.clipped = true;
        }
    }
    let lr = T::of(learning_rate);
    let momentum = T::of(config.momentum);
    let decay = T::of(config.weight_decay);
    for (i, (velocity, grad)) in sgd.velocity.iter_mut().zip(&grads).enumerate() {
        let (Some(velocity), Some(grad)) = (velocity, grad) else { continue };
        let weights = params.entries_mut()[i].tensor.data_mut();
        for ((w, v), &g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad.data()) {
            *v = momentum * *v + scale * g + decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(loss)
}

/// Trains fresh parameters on `samples`.
pub fn train<T: Element>(
    samples: &[Sample<'_>],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainingLog)> {
    config.validate()?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if samples.len() < 2 || distinct.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least 2 slices from at least 2 classes, got {} slices from {} classes",
            samples.len(),
            distinct.len()
        )));
    }
    let mut params = ModelParams::<T>::init(&config.model, config.seed)?;
    let mut sgd = Sgd::new(&params);
    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let sample = pairing::sample_pairs(&labels, num_classes, &config.sampler, epoch as u64)?;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: lr,
            raw_loss: 0.0,
            mean_pair_loss: 0.0,
            stage_loss: [None; NUM_STAGES],
            same_loss: 0.0,
            different_loss: 0.0,
            same_pairs: sample.pairs.iter().filter(|p| !p.different).count(),
            different_pairs: sample.pairs.iter().filter(|p| p.different).count(),
            clipped_steps: 0,
        };
        for (batch, pairs) in sample.pairs.chunks(config.batch_size).enumerate() {
            let step = train_step(&mut params, &mut sgd, samples, pairs, config, lr)?;
            if !step.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch,
                    distances: step.distances,
                });
            }
            record.raw_loss += step.total;
            record.clipped_steps += step.clipped as usize;
            record.same_loss += step.same;
            record.different_loss += step.different;
            for (acc, v) in record.stage_loss.iter_mut().zip(step.stage) {
                if let Some(v) = v {
                    *acc = Some(acc.unwrap_or(0.0) + v);
                }
            }
        }
        record.mean_pair_loss = record.raw_loss / sample.pairs.len() as f64;
        log::debug!("epoch {} loss {:.6}", record.epoch, record.mean_pair_loss);
        log.epochs.push(record);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_model() -> BackboneConfig {
        BackboneConfig {
            input_size: 32,
            in_channels: 1,
            stage_channels: [4, 4, 8, 8],
            blocks_per_stage: 1,
        }
    }

    fn images(n: usize) -> Vec<Tensor<f32>> {
        (0..n)
            .map(|i| Tensor::from_fn(&[1, 32, 32], |j| ((i * 7 + j) % 13) as f32 / 13.0))
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::small().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
            TrainConfig { max_grad_norm: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn step_schedule() {
        let c = TrainConfig {
            lr_step: Some(LrStep { every: 10, gamma: 0.5 }),
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(9), 0.01);
        assert_eq!(c.learning_rate_at(10), 0.005);
        assert_eq!(c.learning_rate_at(25), 0.0025);
    }

    #[test]
    fn clipping_rescales_the_update() {
        let imgs = images(4);
        let samples: Vec<Sample> = imgs
            .iter()
            .enumerate()
            .map(|(i, image)| Sample { image, class: i % 2, study: i })
            .collect();
        let pairs = [
            TrainingPair { anchor: 0, partner: 1, different: true },
            TrainingPair { anchor: 0, partner: 2, different: false },
        ];
        let step = |max_grad_norm| {
            let cfg = TrainConfig { model: tiny_model(), weight_decay: 0.0, max_grad_norm, ..TrainConfig::default() };
            let mut params = ModelParams::<f64>::init(&cfg.model, 3).unwrap();
            let before: Vec<Vec<f64>> = params.entries().iter().map(|e| e.tensor.data().to_vec()).collect();
            let mut sgd = Sgd::new(&params);
            let loss = train_step(&mut params, &mut sgd, &samples, &pairs, &cfg, 0.1).unwrap();
            let delta: Vec<f64> = params
                .entries()
                .iter()
                .zip(&before)
                .filter(|(e, _)| e.kind == ParamKind::Weight)
                .flat_map(|(e, b)| e.tensor.data().iter().zip(b).map(|(a, b)| a - b).collect::<Vec<_>>())
                .collect();
            (loss, delta)
        };
        let (free, full) = step(None);
        assert!(!free.clipped && free.grad_norm > 0.0);
        let bound = free.grad_norm / 4.0;
        let (clipped, part) = step(Some(bound));
        assert!(clipped.clipped);
        assert_eq!(clipped.grad_norm, free.grad_norm);
        let ratio = bound / free.grad_norm;
        for (a, b) in part.iter().zip(&full) {
            assert!((a - ratio * b).abs() <= 1e-9 * b.abs() + 1e-14);
        }
        let norm = part.iter().map(|d| d * d).sum::<f64>().sqrt();
        assert!((norm - 0.1 * bound).abs() < 1e-9 * bound);
        let (loose, same) = step(Some(free.grad_norm * 2.0));
        assert!(!loose.clipped);
        assert_eq!(same, full);
    }

    #[test]
    fn single_class_training_is_rejected() {
        let imgs = images(3);
        let samples: Vec<Sample> = imgs.iter().map(|image| Sample { image, class: 1, study: 0 }).collect();
        let cfg = TrainConfig { model: tiny_model(), epochs: 1, ..TrainConfig::default() };
        assert!(matches!(train::<f32>(&samples, 2, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn log_csv_has_one_row_per_epoch() {
        let imgs = images(4);
        let samples: Vec<Sample> = imgs
            .iter()
            .enumerate()
            .map(|(i, image)| Sample { image, class: i % 2, study: i })
            .collect();
        let cfg = TrainConfig { model: tiny_model(), epochs: 3, ..TrainConfig::default() };
        let (_, log) = train::<f32>(&samples, 2, &cfg).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epoch,learning_rate,raw_loss,mean_pair_loss,stage1_loss"));
        for r in &log.epochs {
            assert_eq!(r.same_pairs + r.different_pairs, 4);
            let stages: f64 = r.stage_loss.iter().flatten().sum();
            assert!((stages - r.raw_loss).abs() < 1e-5 * r.raw_loss.max(1.0));
            assert!((r.same_loss + r.different_loss - r.raw_loss).abs() < 1e-5 * r.raw_loss.max(1.0));
        }
    }
}
