//! Test-only oracles shared by the integration test targets.

#![allow(dead_code)]

pub mod grad_cases;
pub mod naive;

use budgetformer::{Result, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-2, 2].
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut rng(seed))
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights, so that
/// gradients of normalized outputs (e.g. softmax rows) are not trivially zero.
pub fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let weights = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng(seed ^ 0x5eed));
    let w = out.tape().constant(weights);
    Ok(out.mul(&w)?.sum())
}

/// Largest relative error `|g_analytic - g_fd| / max(1, |g_fd|)` over all
/// elements of all inputs, using central differences with step `FD_STEP`.
pub fn max_grad_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item().expect("scalar")
    };

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic[i].data()[j] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}
