//! Residual pooling unit: turns one stage's feature map into an embedding.
//!
//! `conv_a → relu → conv_b`, plus the unit's input, is averaged over space and
//! reduced by a fully connected layer to a quarter of the channel count. There
//! is no batch normalisation and no activation after the final layer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Embedding width for a `channels`-wide feature map: `floor(C / 4)`, at least 1.
pub fn embedding_dim(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Tape handles of one unit's parameters.
#[derive(Clone, Copy, Debug)]
pub struct RpuVars {
    pub conv_a: Var,
    pub conv_b: Var,
    pub fc_weight: Var,
    pub fc_bias: Var,
}

pub fn rpu_forward<T: Element>(tape: &mut Tape<T>, feature_map: Var, params: &RpuVars) -> Result<Var> {
    let [n, c, _, _] = tape.value(feature_map).dims4("rpu_forward")?;
    let expected = tape.value(params.conv_a).shape().get(1).copied();
    if expected != Some(c) {
        return Err(Error::shape(
            "rpu_forward",
            format!("feature map has {c} channels, unit expects {expected:?}"),
        ));
    }
    let a = tape.conv2d(feature_map, params.conv_a, 1, 1)?;
    let a = tape.relu(a);
    let b = tape.conv2d(a, params.conv_b, 1, 1)?;
    let summed = tape.add(b, feature_map)?;
    let pooled = tape.adaptive_avg_pool(summed)?;
    let flat = tape.reshape(pooled, &[n, c])?;
    tape.linear(flat, params.fc_weight, params.fc_bias)
}

/// Stand-alone parameters of one unit.
#[derive(Clone, Debug, PartialEq)]
pub struct RpuParams<T: Element = f32> {
    pub conv_a: Tensor<T>,
    pub conv_b: Tensor<T>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

impl<T: Element> RpuParams<T> {
    pub fn shapes(channels: usize) -> [Vec<usize>; 4] {
        let d = embedding_dim(channels);
        [
            vec![channels, channels, 3, 3],
            vec![channels, channels, 3, 3],
            vec![d, channels],
            vec![d],
        ]
    }

    pub fn zeros(channels: usize) -> Self {
        let [a, b, w, bias] = Self::shapes(channels);
        RpuParams {
            conv_a: Tensor::zeros(&a),
            conv_b: Tensor::zeros(&b),
            fc_weight: Tensor::zeros(&w),
            fc_bias: Tensor::zeros(&bias),
        }
    }

    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let [a, b, w, bias] = Self::shapes(channels);
        let conv_std = (2.0 / (channels * 9) as f64).sqrt();
        let fc_std = (1.0 / channels as f64).sqrt();
        let mut gauss = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
        };
        RpuParams {
            conv_a: gauss(&a, conv_std),
            conv_b: gauss(&b, conv_std),
            fc_weight: gauss(&w, fc_std),
            fc_bias: Tensor::zeros(&bias),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv_a.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> RpuVars {
        RpuVars {
            conv_a: tape.leaf(self.conv_a.clone()),
            conv_b: tape.leaf(self.conv_b.clone()),
            fc_weight: tape.leaf(self.fc_weight.clone()),
            fc_bias: tape.leaf(self.fc_bias.clone()),
        }
    }

    /// Embeds a feature map without recording gradients for later use.
    pub fn embed(&self, feature_map: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(feature_map.clone());
        let out = rpu_forward(&mut tape, x, &vars)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quarter_width_with_floor_and_minimum() {
        assert_eq!(embedding_dim(128), 32);
        assert_eq!(embedding_dim(16), 4);
        assert_eq!(embedding_dim(10), 2);
        assert_eq!(embedding_dim(3), 1);
    }

    #[test]
    fn zero_map_and_zero_bias_give_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RpuParams::<f64>::random(8, &mut rng);
        let out = p.embed(&Tensor::zeros(&[2, 8, 4, 4])).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_convs_reduce_to_pooled_channel_means() {
        let c = 8;
        let mut p = RpuParams::<f64>::zeros(c);
        let d = embedding_dim(c);
        p.fc_weight = Tensor::from_fn(&[d, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let map = Tensor::from_fn(&[1, c, 3, 3], |i| (i as f64 * 0.37).sin());
        let out = p.embed(&map).unwrap();
        for ch in 0..d {
            let plane = &map.data()[ch * 9..(ch + 1) * 9];
            let mean = plane.iter().sum::<f64>() / 9.0;
            assert!((out.data()[ch] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = RpuParams::<f64>::zeros(8);
        assert!(matches!(p.embed(&Tensor::zeros(&[1, 4, 2, 2])), Err(Error::Shape { .. })));
    }

    #[test]
    fn embedding_dim_ignores_spatial_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RpuParams::<f32>::random(16, &mut rng);
        for hw in [1, 2, 3, 7, 10] {
            let out = p.embed(&Tensor::full(&[3, 16, hw, hw], 0.5)).unwrap();
            assert_eq!(out.shape(), &[3, 4]);
        }
    }
}
