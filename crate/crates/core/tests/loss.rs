use dmrn::backbone::{BackboneConfig, ModelParams};
use dmrn::contrastive::{pair_loss, pair_loss_slope, total_loss_from_distances, LossConfig, PairDistances};
use dmrn::tape::Tape;
use dmrn::trainer::pair_objective;
use dmrn::Tensor;
use proptest::prelude::*;

#[test]
fn closed_form_values() {
    // ½·max(0, 1 − 0.4)² and ½·0.5²
    assert!((pair_loss(0.4f64, true, 1.0) - 0.18).abs() < 1e-12);
    assert!((pair_loss(0.5f64, false, 1.0) - 0.125).abs() < 1e-12);
    assert_eq!(pair_loss(1.3f64, true, 1.0), 0.0);
    assert_eq!(pair_loss(0.0f64, false, 1.0), 0.0);
}

fn config() -> BackboneConfig {
    BackboneConfig {
        input_size: 32,
        in_channels: 1,
        stage_channels: [8, 16, 16, 32],
        blocks_per_stage: 1,
    }
}

#[test]
fn identical_same_class_inputs_give_zero_loss() {
    let params = ModelParams::<f32>::init(&config(), 5).unwrap();
    let image = Tensor::<f32>::from_fn(&[1, 32, 32], |i| ((i * 37) % 11) as f32 / 11.0);
    let batch = Tensor::stack(&[&image, &image, &image, &image]).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let o = pair_objective(&params, &mut tape, &bound, batch, &[false, false], &LossConfig::default()).unwrap();
    assert_eq!(o.terms.term_count(), 8);
    assert_eq!(tape.value(o.terms.total).data(), &[0.0]);
    assert_eq!(tape.value(o.objective).data(), &[0.0]);
}

#[test]
fn final_stage_only_keeps_one_term_per_pair() {
    let params = ModelParams::<f32>::init(&config(), 6).unwrap();
    let batch = Tensor::<f32>::from_fn(&[6, 1, 32, 32], |i| ((i * 13) % 17) as f32 / 17.0);
    let different = [true, false, true];
    for (loss, expected) in [(LossConfig::default(), 12), (LossConfig::final_stage_only(), 3)] {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let o = pair_objective(&params, &mut tape, &bound, batch.clone(), &different, &loss).unwrap();
        assert_eq!(o.terms.term_count(), expected);
    }
}

proptest! {
    #[test]
    fn loss_is_non_negative_and_zero_only_when_satisfied(
        pairs in prop::collection::vec((prop::array::uniform4(0.0f64..3.0), any::<bool>()), 1..8),
    ) {
        let cfg = LossConfig::default();
        let ds: Vec<PairDistances> = pairs
            .iter()
            .map(|(d, diff)| PairDistances { stages: d.map(Some), different: *diff })
            .collect();
        let total = total_loss_from_distances(&ds, &cfg).unwrap();
        prop_assert!(total >= 0.0);
        let satisfied = ds.iter().all(|p| {
            p.stages.iter().flatten().all(|&d| if p.different { d >= cfg.margin } else { d == 0.0 })
        });
        prop_assert_eq!(total == 0.0, satisfied);
    }

    #[test]
    fn monotone_in_distance(a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi > lo);
        prop_assert!(pair_loss(lo, false, 1.0) < pair_loss(hi, false, 1.0));
        prop_assert!(pair_loss(lo, true, 1.0) >= pair_loss(hi, true, 1.0));
        if lo >= 1.0 {
            prop_assert_eq!(pair_loss(lo, true, 1.0), 0.0);
        }
    }

    #[test]
    fn slope_matches_finite_differences(d in 0.01f64..3.0, different: bool) {
        prop_assume!((d - 1.0).abs() > 1e-3);
        let h = 1e-6;
        let fd = (pair_loss(d + h, different, 1.0) - pair_loss(d - h, different, 1.0)) / (2.0 * h);
        let expected = if !different { d } else if d < 1.0 { -(1.0 - d) } else { 0.0 };
        prop_assert!((pair_loss_slope(d, different, 1.0) - expected).abs() < 1e-15);
        prop_assert!((fd - expected).abs() < 1e-6);
    }
}
