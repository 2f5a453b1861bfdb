//! Central finite-difference gradient checking in double precision.

use dmrn::tape::{Tape, Var};
use dmrn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Fallback step for entries whose `STEP` probe straddles a ReLU kink.
pub const FINE_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const FLOOR: f64 = 1e-3;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `v` to a scalar with fixed pseudo-random weights, so every output
/// element receives a different upstream gradient.
pub fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = tape.leaf(random(&shape, seed ^ 0x5eed));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[derive(Debug, Default)]
pub struct Report {
    pub max_rel_error: f64,
    /// Input index and flat position of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
    /// Entries that failed at `STEP` and were re-probed at `FINE_STEP`.
    pub reprobed: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

impl Report {
    /// Compares analytic gradient `a` of entry `at` with central differences
    /// `central(h)`. A failure at `STEP` can come from an activation crossing
    /// zero inside `[x - h, x + h]`; such entries get one retry at `FINE_STEP`.
    pub fn record(&mut self, at: (usize, usize), a: f64, tol: f64, mut central: impl FnMut(f64) -> f64) {
        let mut err = rel_error(a, central(STEP));
        if err >= tol {
            self.reprobed += 1;
            err = rel_error(a, central(FINE_STEP));
        }
        if err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = at;
        }
        self.entries += 1;
    }
}

/// Compares the tape gradient of `f` at `inputs` with central differences
/// over every entry of every input. `f` must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], tol: f64, f: F) -> Report
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().expect("scalar loss")
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            report.record((i, j), analytic[i].data()[j], tol, |h| {
                probe[i].data_mut()[j] = x + h;
                let up = eval(&probe);
                probe[i].data_mut()[j] = x - h;
                let down = eval(&probe);
                probe[i].data_mut()[j] = x;
                (up - down) / (2.0 * h)
            });
        }
    }
    report
}
