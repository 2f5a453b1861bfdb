//! Multi-scale contrastive loss.
//!
//! For each used stage `t` and pair `i` the loss adds
//! `½D²` (same class) or `½max(0, m − D)²` (different class), where `D` is
//! the Euclidean distance between the two branch embeddings at that stage.
//! The total is an unnormalised sum over stages and pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Element;

pub const NUM_STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    /// 1-based stage indices contributing to the loss.
    pub stages: Vec<usize>,
    pub stage_weights: [f64; NUM_STAGES],
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            stages: vec![1, 2, 3, 4],
            stage_weights: [1.0; NUM_STAGES],
        }
    }
}

impl LossConfig {
    /// Last-stage-only variant used for the multi-scale ablation.
    pub fn final_stage_only() -> Self {
        LossConfig {
            stages: vec![NUM_STAGES],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be positive, got {}", self.margin)));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one loss stage is required".into()));
        }
        let mut seen = [false; NUM_STAGES];
        for &s in &self.stages {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(Error::Config(format!("stage {s} outside 1..={NUM_STAGES}")));
            }
            if std::mem::replace(&mut seen[s - 1], true) {
                return Err(Error::Config(format!("stage {s} listed twice")));
            }
        }
        if self.stage_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("stage weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Euclidean distance between two embeddings of one stage.
pub fn stage_distance<T: Element>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "stage_distance",
            format!("embedding dimensions {} and {}", a.len(), b.len()),
        ));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt())
}

/// Contrastive term for one pair at one stage.
pub fn pair_loss<T: Element>(distance: T, different: bool, margin: T) -> T {
    let half = T::of(0.5);
    if different {
        let gap = (margin - distance).max(T::zero());
        half * gap * gap
    } else {
        half * distance * distance
    }
}

/// Derivative of [`pair_loss`] with respect to the distance.
///
/// At `D = m` for different-class pairs the one-sided zero derivative is used.
pub fn pair_loss_slope<T: Element>(distance: T, different: bool, margin: T) -> T {
    if !different {
        distance
    } else if distance < margin {
        distance - margin
    } else {
        T::zero()
    }
}

/// Distances of one pair at each stage, for evaluating the loss outside a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistances {
    pub stages: [Option<f64>; NUM_STAGES],
    pub different: bool,
}

/// Weighted sum of pair terms over used stages and all pairs.
pub fn total_loss_from_distances(pairs: &[PairDistances], config: &LossConfig) -> Result<f64> {
    config.validate()?;
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        for &s in &config.stages {
            let d = pair.stages[s - 1]
                .ok_or_else(|| Error::Contract(format!("pair {i} has no distance for stage {s}")))?;
            total += config.stage_weights[s - 1] * pair_loss(d, pair.different, config.margin);
        }
    }
    Ok(total)
}

/// Per-stage embeddings of one branch, indexed by stage − 1.
pub type StageEmbeddings = [Option<Var>; NUM_STAGES];

/// Loss nodes built on a tape for one batch.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Weighted sum over used stages and pairs (rank-0).
    pub total: Var,
    /// For each used stage, its distances `[P]` and per-pair terms `[P]` (unweighted).
    pub stages: Vec<StageTerms>,
    pub pairs: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct StageTerms {
    pub stage: usize,
    pub distance: Var,
    pub terms: Var,
}

impl LossTerms {
    /// Number of additive `(stage, pair)` terms in the total.
    pub fn term_count(&self) -> usize {
        self.stages.len() * self.pairs
    }
}

/// Builds the multi-scale loss for a batch of pairs.
///
/// `first` and `second` hold `[P, D_t]` embeddings for each stage; every stage
/// listed in the config must be present in both.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    first: &StageEmbeddings,
    second: &StageEmbeddings,
    different: &[bool],
    config: &LossConfig,
) -> Result<LossTerms> {
    config.validate()?;
    let margin = T::of(config.margin);
    let mut stages = Vec::with_capacity(config.stages.len());
    let mut total: Option<Var> = None;
    for &s in &config.stages {
        let (Some(a), Some(b)) = (first[s - 1], second[s - 1]) else {
            return Err(Error::Contract(format!("missing embedding for stage {s}")));
        };
        let distance = tape.l2_distance(a, b)?;
        let terms = tape.contrastive(distance, different, margin)?;
        let stage_sum = tape.sum(terms);
        let weighted = tape.scale(stage_sum, T::of(config.stage_weights[s - 1]));
        total = Some(match total {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
        stages.push(StageTerms {
            stage: s,
            distance,
            terms,
        });
    }
    Ok(LossTerms {
        total: total.expect("validated non-empty stage list"),
        stages,
        pairs: different.len(),
    })
}
