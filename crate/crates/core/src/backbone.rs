//! Miniature residual backbone and the shared parameter set.
//!
//! A 3×3 stem and a stride-2 downsample feed four stages of residual blocks.
//! The first block of every stage halves the resolution, so stage outputs sit
//! at `S/4, S/8, S/16, S/32` for an `S × S` input. Each stage output feeds its
//! own residual pooling unit.
//!
//! One [`ModelParams`] serves both branches of the twin network: the branches
//! are rows of the same batch pushed through the same bound parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::NUM_STAGES;
use crate::error::{Error, Result};
use crate::rpu::{self, RpuParams, RpuVars};
use crate::tape::{BatchStats, BnMode, Tape, Var, BN_MOMENTUM};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub blocks_per_stage: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            in_channels: 1,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "input channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channel widths must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        Ok(())
    }

    pub fn stage_sizes(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|t| self.input_size >> (t + 2))
    }

    pub fn embedding_dims(&self) -> [usize; NUM_STAGES] {
        self.stage_channels.map(rpu::embedding_dim)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Trainable tensor.
    Weight,
    /// Tracked statistic, updated outside the optimiser.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Gaussian with variance `gain / fan_in`.
    Gaussian { fan_in: usize, gain: f64 },
    Ones,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBnIdx {
    pub weight: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockIdx {
    pub conv1: ConvBnIdx,
    pub conv2: ConvBnIdx,
    pub projection: Option<ConvBnIdx>,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RpuIdx {
    pub conv_a: usize,
    pub conv_b: usize,
    pub fc_weight: usize,
    pub fc_bias: usize,
}

/// Where each layer's tensors live in the entry list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub stem: ConvBnIdx,
    pub downsample: ConvBnIdx,
    pub stages: Vec<Vec<BlockIdx>>,
    pub rpus: Vec<RpuIdx>,
}

struct EntrySpec {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<EntrySpec>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(EntrySpec {
            name,
            kind,
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn conv_bn(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) -> ConvBnIdx {
        let fan_in = c_in * k * k;
        ConvBnIdx {
            weight: self.add(
                format!("{prefix}.conv.weight"),
                ParamKind::Weight,
                vec![c_out, c_in, k, k],
                Init::Gaussian { fan_in, gain: 2.0 },
            ),
            gamma: self.add(format!("{prefix}.bn.gamma"), ParamKind::Weight, vec![c_out], Init::Ones),
            beta: self.add(format!("{prefix}.bn.beta"), ParamKind::Weight, vec![c_out], Init::Zeros),
            running_mean: self.add(
                format!("{prefix}.bn.running_mean"),
                ParamKind::Buffer,
                vec![c_out],
                Init::Zeros,
            ),
            running_var: self.add(
                format!("{prefix}.bn.running_var"),
                ParamKind::Buffer,
                vec![c_out],
                Init::Ones,
            ),
        }
    }

    fn build(config: &BackboneConfig) -> (Layout, Vec<EntrySpec>) {
        let mut b = LayoutBuilder::default();
        let c0 = config.stage_channels[0];
        let stem = b.conv_bn("stem", config.in_channels, c0, 3);
        let downsample = b.conv_bn("downsample", c0, c0, 3);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_in = c0;
        for (t, &c) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for j in 0..config.blocks_per_stage {
                let prefix = format!("stage{}.block{j}", t + 1);
                let stride = if j == 0 { 2 } else { 1 };
                let block_in = if j == 0 { c_in } else { c };
                let conv1 = b.conv_bn(&format!("{prefix}.1"), block_in, c, 3);
                let conv2 = b.conv_bn(&format!("{prefix}.2"), c, c, 3);
                let projection =
                    (stride != 1 || block_in != c).then(|| b.conv_bn(&format!("{prefix}.proj"), block_in, c, 1));
                blocks.push(BlockIdx {
                    conv1,
                    conv2,
                    projection,
                    stride,
                });
            }
            stages.push(blocks);
            c_in = c;
        }
        let rpus = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                let [a, cb, w, bias] = RpuParams::<f64>::shapes(c);
                let prefix = format!("rpu{}", t + 1);
                let conv = Init::Gaussian { fan_in: c * 9, gain: 2.0 };
                RpuIdx {
                    conv_a: b.add(format!("{prefix}.conv_a"), ParamKind::Weight, a, conv),
                    conv_b: b.add(format!("{prefix}.conv_b"), ParamKind::Weight, cb, conv),
                    fc_weight: b.add(
                        format!("{prefix}.fc.weight"),
                        ParamKind::Weight,
                        w,
                        Init::Gaussian { fan_in: c, gain: 1.0 },
                    ),
                    fc_bias: b.add(format!("{prefix}.fc.bias"), ParamKind::Weight, bias, Init::Zeros),
                }
            })
            .collect();
        (
            Layout {
                stem,
                downsample,
                stages,
                rpus,
            },
            b.specs,
        )
    }
}

/// Forward-pass normalisation mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles of the trainable entries; `None` for buffers.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, entry: usize) -> Option<Var> {
        self.vars[entry]
    }

    fn get(&self, entry: usize) -> Var {
        self.vars[entry].expect("trainable entry is bound")
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// Final block output of each stage.
    pub maps: [Var; NUM_STAGES],
    /// Unit outputs `[N, D_t]` for the requested stages.
    pub embeddings: [Option<Var>; NUM_STAGES],
    /// Training-mode batch statistics, keyed by the normalisation layer.
    pub bn_stats: Vec<(ConvBnIdx, BatchStats<T>)>,
}

/// The single parameter set shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Element = f32> {
    config: BackboneConfig,
    entries: Vec<ParamEntry<T>>,
    layout: Layout,
}

impl<T: Element> ModelParams<T> {
    /// He-initialised parameters; deterministic in `seed`.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = specs
            .into_iter()
            .map(|spec| {
                let tensor = match spec.init {
                    Init::Ones => Tensor::full(&spec.shape, T::one()),
                    Init::Zeros => Tensor::zeros(&spec.shape),
                    Init::Gaussian { fan_in, gain } => {
                        let std = (gain / fan_in as f64).sqrt();
                        Tensor::from_fn(&spec.shape, |_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::of(std * z)
                        })
                    }
                };
                ParamEntry {
                    name: spec.name,
                    kind: spec.kind,
                    tensor,
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            entries,
            layout,
        })
    }

    /// Reassembles parameters from explicit entries, checking names, kinds and shapes.
    pub fn from_entries(config: &BackboneConfig, entries: Vec<ParamEntry<T>>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = LayoutBuilder::build(config);
        if entries.len() != specs.len() {
            return Err(Error::Checkpoint {
                record: entries
                    .get(specs.len())
                    .map(|e| e.name.clone())
                    .unwrap_or_else(|| specs[entries.len()].name.clone()),
                reason: format!("expected {} records, found {}", specs.len(), entries.len()),
            });
        }
        for (spec, entry) in specs.iter().zip(&entries) {
            if spec.name != entry.name || spec.kind != entry.kind || spec.shape != entry.tensor.shape() {
                return Err(Error::Checkpoint {
                    record: entry.name.clone(),
                    reason: format!(
                        "expected {} ({:?}, shape {:?}), found {:?} shape {:?}",
                        spec.name,
                        spec.kind,
                        spec.shape,
                        entry.kind,
                        entry.tensor.shape()
                    ),
                });
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            entries,
            layout,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    tensor: e.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Registers every trainable tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|e| (e.kind == ParamKind::Weight).then(|| tape.leaf(e.tensor.clone())))
                .collect(),
        }
    }

    pub fn rpu_vars(&self, bound: &Bound, stage: usize) -> RpuVars {
        let idx = &self.layout.rpus[stage - 1];
        RpuVars {
            conv_a: bound.get(idx.conv_a),
            conv_b: bound.get(idx.conv_b),
            fc_weight: bound.get(idx.fc_weight),
            fc_bias: bound.get(idx.fc_bias),
        }
    }

    /// Copies out the residual pooling unit of `stage` (1-based).
    pub fn rpu_params(&self, stage: usize) -> RpuParams<T> {
        let idx = &self.layout.rpus[stage - 1];
        let t = |i: usize| self.entries[i].tensor.clone();
        RpuParams {
            conv_a: t(idx.conv_a),
            conv_b: t(idx.conv_b),
            fc_weight: t(idx.fc_weight),
            fc_bias: t(idx.fc_bias),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        idx: &ConvBnIdx,
        x: Var,
        stride: usize,
        padding: usize,
        mode: Mode,
        stats: &mut Vec<(ConvBnIdx, BatchStats<T>)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound.get(idx.weight), stride, padding)?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                running_mean: self.entries[idx.running_mean].tensor.data(),
                running_var: self.entries[idx.running_var].tensor.data(),
            },
        };
        let (out, batch) = tape.batch_norm(y, bound.get(idx.gamma), bound.get(idx.beta), bn_mode)?;
        if let Some(batch) = batch {
            stats.push((*idx, batch));
        }
        Ok(out)
    }

    /// `relu(F(x) + skip(x))` for block `block` (0-based) of `stage` (1-based).
    #[allow(clippy::too_many_arguments)]
    pub fn residual_block(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        stage: usize,
        block: usize,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(ConvBnIdx, BatchStats<T>)>,
    ) -> Result<Var> {
        let b = self.layout.stages[stage - 1][block];
        let y = self.conv_bn(tape, bound, &b.conv1, x, b.stride, 1, mode, stats)?;
        let y = tape.relu(y);
        let y = self.conv_bn(tape, bound, &b.conv2, y, 1, 1, mode, stats)?;
        let skip = match &b.projection {
            Some(p) => self.conv_bn(tape, bound, p, x, b.stride, 0, mode, stats)?,
            None => x,
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }

    /// Runs the backbone and returns the four stage outputs.
    pub fn forward_stages(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: Var,
        mode: Mode,
        stats: &mut Vec<(ConvBnIdx, BatchStats<T>)>,
    ) -> Result<[Var; NUM_STAGES]> {
        let [_, c, h, w] = tape.value(input).dims4("forward_stages")?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape(
                "forward_stages",
                format!(
                    "input [_, {c}, {h}, {w}] does not match configured [_, {}, {s}, {s}]",
                    self.config.in_channels
                ),
            ));
        }
        let x = self.conv_bn(tape, bound, &self.layout.stem, input, 1, 1, mode, stats)?;
        let x = tape.relu(x);
        let x = self.conv_bn(tape, bound, &self.layout.downsample, x, 2, 1, mode, stats)?;
        let mut x = tape.relu(x);
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for (t, blocks) in self.layout.stages.iter().enumerate() {
            for j in 0..blocks.len() {
                x = self.residual_block(tape, bound, t + 1, j, x, mode, stats)?;
            }
            maps.push(x);
        }
        Ok(maps.try_into().expect("four stages"))
    }

    /// Backbone plus the residual pooling units of `embed_stages` (1-based).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        input: Var,
        mode: Mode,
        embed_stages: &[usize],
    ) -> Result<Forward<T>> {
        let mut bn_stats = Vec::new();
        let maps = self.forward_stages(tape, bound, input, mode, &mut bn_stats)?;
        let mut embeddings = [None; NUM_STAGES];
        for &s in embed_stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(Error::Config(format!("stage {s} outside 1..={NUM_STAGES}")));
            }
            if embeddings[s - 1].is_none() {
                let vars = self.rpu_vars(bound, s);
                embeddings[s - 1] = Some(rpu::rpu_forward(tape, maps[s - 1], &vars)?);
            }
        }
        Ok(Forward {
            maps,
            embeddings,
            bn_stats,
        })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(ConvBnIdx, BatchStats<T>)]) {
        let momentum = T::of(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for (idx, batch) in stats {
            for (slot, fresh) in [(idx.running_mean, &batch.mean), (idx.running_var, &batch.var)] {
                for (r, &b) in self.entries[slot].tensor.data_mut().iter_mut().zip(fresh) {
                    *r = keep * *r + momentum * b;
                }
            }
        }
    }

    /// Inference-mode embeddings `[N, D_stage]` for a batch `[N, C, S, S]`.
    pub fn embed_batch(&self, images: &Tensor<T>, stage: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let out = self.forward(&mut tape, &bound, x, Mode::Eval, &[stage])?;
        let e = out.embeddings[stage - 1].expect("requested stage");
        Ok(tape.value(e).clone())
    }

    /// Inference-mode stage outputs for a batch.
    pub fn stage_maps(&self, images: &Tensor<T>) -> Result<[Tensor<T>; NUM_STAGES]> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let maps = self.forward_stages(&mut tape, &bound, x, Mode::Eval, &mut Vec::new())?;
        Ok(maps.map(|m| tape.value(m).clone()))
    }
}
