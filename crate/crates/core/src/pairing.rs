//! Training-pair sampling.
//!
//! Every training slice serves once per epoch as an anchor and receives one
//! partner, so an epoch holds `P = f` pairs rather than the `f(f − 1)/2` of
//! exhaustive pairing. Two partner distributions are available:
//!
//! - [`PairMode::Uniform`]: the partner is any other slice, uniformly.
//! - [`PairMode::ClassBalanced`]: the partner's class is drawn uniformly over
//!   the classes present, then the partner uniformly within that class, so
//!   small classes appear as partners as often as large ones.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Uniform,
    ClassBalanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: PairMode,
    pub seed: u64,
    /// Pairs per epoch; `None` means one per training slice.
    pub pairs_per_epoch: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: PairMode::ClassBalanced,
            seed: 0,
            pairs_per_epoch: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    /// Index of the anchor slice in the training set.
    pub anchor: usize,
    pub partner: usize,
    /// `false` (Y = 0) when both slices share a class.
    pub different: bool,
}

impl TrainingPair {
    /// The binary label Y: 0 for a same-class pair, 1 otherwise.
    pub fn label(&self) -> u8 {
        u8::from(self.different)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub pairs: Vec<TrainingPair>,
    /// Classes with no training slice, skipped by the class-balanced sampler.
    pub excluded_classes: Vec<usize>,
}

/// Number of distinct unordered pairs among `f` samples.
pub fn exhaustive_count(f: u64) -> u64 {
    if f < 2 {
        0
    } else {
        f * (f - 1) / 2
    }
}

/// Draws one epoch of pairs over slices with classes `labels`.
///
/// `epoch` selects an independent random stream so pairs are resampled each
/// epoch while staying reproducible.
pub fn sample_pairs(
    labels: &[usize],
    num_classes: usize,
    config: &SamplerConfig,
    epoch: u64,
) -> Result<PairSample> {
    let f = labels.len();
    if f < 2 {
        return Err(Error::Contract(format!("pair sampling needs at least 2 slices, got {f}")));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!("label {bad} outside {num_classes} classes")));
    }
    let count = config.pairs_per_epoch.unwrap_or(f);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(epoch);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let excluded_classes: Vec<usize> = (0..num_classes).filter(|&c| by_class[c].is_empty()).collect();
    if config.mode == PairMode::ClassBalanced && !excluded_classes.is_empty() {
        log::warn!("class-balanced sampler: classes {excluded_classes:?} have no slices and are excluded");
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| !by_class[c].is_empty()).collect();

    let mut anchors: Vec<usize> = (0..f).collect();
    anchors.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        let anchor = anchors[k % f];
        let partner = match config.mode {
            PairMode::Uniform => {
                let r = rng.random_range(0..f - 1);
                if r >= anchor {
                    r + 1
                } else {
                    r
                }
            }
            PairMode::ClassBalanced => {
                let own = labels[anchor];
                // A class holding only the anchor itself cannot supply a partner.
                let eligible: Vec<usize> = present
                    .iter()
                    .copied()
                    .filter(|&c| c != own || by_class[c].len() > 1)
                    .collect();
                let class = eligible[rng.random_range(0..eligible.len())];
                let members = &by_class[class];
                if class == own {
                    let pos = members.binary_search(&anchor).expect("anchor in own class");
                    let r = rng.random_range(0..members.len() - 1);
                    members[if r >= pos { r + 1 } else { r }]
                } else {
                    members[rng.random_range(0..members.len())]
                }
            }
        };
        pairs.push(TrainingPair {
            anchor,
            partner,
            different: labels[anchor] != labels[partner],
        });
    }
    Ok(PairSample {
        pairs,
        excluded_classes,
    })
}

/// Writes `anchor_id,partner_id,Y` rows with a header.
pub fn write_pairs_csv<W: Write>(pairs: &[TrainingPair], ids: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["anchor_id", "partner_id", "Y"])?;
    for p in pairs {
        w.write_record([
            ids[p.anchor].as_str(),
            ids[p.partner].as_str(),
            &p.label().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<pairs csv>", e))?;
    Ok(())
}
