//! Finite-difference check of the whole network on a 2-pair micro-batch.

use dmrn::backbone::{BackboneConfig, ModelParams, ParamKind};
use dmrn::contrastive::LossConfig;
use dmrn::tape::Tape;
use dmrn::trainer::pair_objective;
use dmrn::Tensor;

use super::gradcheck::{random, Report};

pub fn micro_config() -> BackboneConfig {
    BackboneConfig {
        input_size: 32,
        in_channels: 1,
        // Every stage embeds into at least two dimensions; a 1-D embedding makes
        // the distance |a - b|, whose kink at 0 defeats finite differences.
        stage_channels: [8, 8, 8, 8],
        blocks_per_stage: 1,
    }
}

/// Anchors 0 and 1, partners 2 and 3; the first pair shares a class.
pub fn micro_batch() -> (Tensor<f64>, Vec<bool>) {
    (random(&[4, 1, 32, 32], 21), vec![false, true])
}

fn objective(params: &ModelParams<f64>, batch: &Tensor<f64>, different: &[bool], loss: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let o = pair_objective(params, &mut tape, &bound, batch.clone(), different, loss).unwrap();
    tape.value(o.objective).item().unwrap()
}

/// Checks every trainable parameter entry.
pub fn check_dmrn(seed: u64, tol: f64) -> Report {
    let mut params = ModelParams::<f64>::init(&micro_config(), seed).unwrap();
    let (batch, different) = micro_batch();
    let loss = LossConfig::default();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let o = pair_objective(&params, &mut tape, &bound, batch.clone(), &different, &loss).unwrap();
    tape.backward(o.objective).unwrap();
    let analytic: Vec<Option<Tensor<f64>>> = (0..params.entries().len())
        .map(|i| bound.var(i).map(|v| tape.grad_or_zeros(v)))
        .collect();

    let mut report = Report::default();
    for (i, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        assert_eq!(params.entries()[i].kind, ParamKind::Weight);
        for j in 0..grad.numel() {
            let x = params.entries()[i].tensor.data()[j];
            report.record((i, j), grad.data()[j], tol, |h| {
                params.entries_mut()[i].tensor.data_mut()[j] = x + h;
                let up = objective(&params, &batch, &different, &loss);
                params.entries_mut()[i].tensor.data_mut()[j] = x - h;
                let down = objective(&params, &batch, &different, &loss);
                params.entries_mut()[i].tensor.data_mut()[j] = x;
                (up - down) / (2.0 * h)
            });
        }
    }
    report
}
