//! Shared test oracles: central finite differences against the recorded
//! backward pass, plus small helpers for seeded random tensors.
//!
//! The finite-difference path uses only graph *forward* evaluation, so it
//! stays independent of the backward implementation it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use srnn_core::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a unit floor, so gradients near zero are compared
/// absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Check analytic gradients of `build` against central finite differences.
///
/// `build` must construct the same scalar loss from the given leaf
/// variables each time it is called (leaves are created in `shapes` order).
/// Returns the worst relative error seen; panics if it exceeds `tol`.
pub fn gradcheck(
    shapes: &[&[usize]],
    inputs: &[Tensor],
    tol: f64,
    build: impl Fn(&Graph, &[Var]) -> Var,
) -> f64 {
    assert_eq!(shapes.len(), inputs.len());

    // Analytic pass.
    let g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&g, &leaves);
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            g.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    // Forward-only evaluation at perturbed inputs.
    let eval = |perturbed: &[Tensor]| -> f64 {
        let g = Graph::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&g, &leaves);
        g.value_scalar(loss)
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[which].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[which].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let an = analytic[which].data()[i];
            let err = rel_err(an, fd);
            assert!(
                err <= tol,
                "gradient mismatch: input {which} element {i}: analytic {an}, fd {fd}, rel err {err:.3e} > {tol:.1e}"
            );
            worst = worst.max(err);
        }
    }
    worst
}
