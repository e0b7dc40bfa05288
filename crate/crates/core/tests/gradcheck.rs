//! Finite-difference verification of every graph op and of representative
//! compositions, over random shapes with axes in 1..=5.

mod common;

use common::{gradcheck, rand_tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srnn_core::nn::{self, Bound, GruCell, GruCellSpec, Mlp, MlpSpec};
use srnn_core::tensor::{Graph, ParamStore, Tensor, Var};

const OP_TOL: f64 = 1e-5;
const COMPOSITE_TOL: f64 = 1e-4;

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=5)).collect()
}

/// Run a two-input elementwise op over several random shapes and seeds.
fn check_binary(op: impl Fn(&Graph, Var, Var) -> Var + Copy) {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = rand_shape(&mut rng, 1 + (seed as usize % 2));
        let a = rand_tensor(&mut rng, &shape, 1.5);
        let b = rand_tensor(&mut rng, &shape, 1.5);
        gradcheck(&[&shape, &shape], &[a, b], OP_TOL, |g, vars| {
            g.sum(op(g, vars[0], vars[1])).unwrap()
        });
    }
}

fn check_unary(op: impl Fn(&Graph, Var) -> Var + Copy, scale: f64) {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = rand_shape(&mut rng, 1 + (seed as usize % 2));
        let x = rand_tensor(&mut rng, &shape, scale);
        gradcheck(&[&shape], &[x], OP_TOL, |g, vars| {
            g.sum(op(g, vars[0])).unwrap()
        });
    }
}

#[test]
fn add_sub_mul_match_finite_differences() {
    check_binary(|g, a, b| g.add(a, b).unwrap());
    check_binary(|g, a, b| g.sub(a, b).unwrap());
    check_binary(|g, a, b| g.mul(a, b).unwrap());
}

#[test]
fn matmul_matches_finite_differences() {
    for seed in 0..4u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (m, k, n) = (
            rng.random_range(1..=5),
            rng.random_range(1..=5),
            rng.random_range(1..=5),
        );
        let a = rand_tensor(&mut rng, &[m, k], 1.0);
        let b = rand_tensor(&mut rng, &[k, n], 1.0);
        gradcheck(&[&[m, k], &[k, n]], &[a, b], OP_TOL, |g, vars| {
            // Square keeps the loss sensitive to each output entry's sign.
            g.sum(g.square(g.matmul(vars[0], vars[1]).unwrap()).unwrap())
                .unwrap()
        });
    }
}

#[test]
fn concat_and_slice_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let rows = rng.random_range(1..=5);
    let (wa, wb) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let a = rand_tensor(&mut rng, &[rows, wa], 1.0);
    let b = rand_tensor(&mut rng, &[rows, wb], 1.0);
    gradcheck(&[&[rows, wa], &[rows, wb]], &[a, b], OP_TOL, |g, vars| {
        let cat = g.concat_last(vars[0], vars[1]).unwrap();
        let piece = g.slice_last(cat, wa.saturating_sub(1), wb + 1).unwrap();
        g.sum(g.square(piece).unwrap()).unwrap()
    });
}

#[test]
fn add_bias_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let (rows, width) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let x = rand_tensor(&mut rng, &[rows, width], 1.0);
    let b = rand_tensor(&mut rng, &[width], 1.0);
    gradcheck(&[&[rows, width], &[width]], &[x, b], OP_TOL, |g, vars| {
        g.sum(g.square(g.add_bias(vars[0], vars[1]).unwrap()).unwrap())
            .unwrap()
    });
}

#[test]
fn unary_ops_match_finite_differences() {
    check_unary(|g, x| g.sigmoid(x).unwrap(), 2.0);
    check_unary(|g, x| g.tanh(x).unwrap(), 2.0);
    check_unary(|g, x| g.exp(x).unwrap(), 1.5);
    check_unary(|g, x| g.square(x).unwrap(), 2.0);
    check_unary(|g, x| g.softplus(x).unwrap(), 2.0);
    check_unary(|g, x| g.scale(x, -1.7).unwrap(), 2.0);
    check_unary(|g, x| g.add_scalar(x, 0.4).unwrap(), 2.0);
    check_unary(|g, x| g.mean(x).unwrap(), 2.0);
    check_unary(|g, x| g.sum_last(x).unwrap(), 2.0);
}

#[test]
fn log_matches_finite_differences_on_positive_inputs() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let shape = rand_shape(&mut rng, 2);
        let mut x = rand_tensor(&mut rng, &shape, 1.0);
        for v in x.data_mut() {
            *v = v.abs() + 0.5;
        }
        gradcheck(&[&shape], &[x], OP_TOL, |g, vars| {
            g.sum(g.log(vars[0]).unwrap()).unwrap()
        });
    }
}

#[test]
fn clamp_and_leaky_clip_gradients_away_from_kinks() {
    // FD straddles the kink when an input sits within FD_STEP of a
    // boundary, so sample well clear of them.
    let x = Tensor::vector(&[-11.0, -5.0, -2.0, -0.5, 0.5, 2.0, 3.4, 7.0]);
    gradcheck(&[&[8]], &[x.clone()], OP_TOL, |g, vars| {
        g.sum(g.leaky_clip(vars[0]).unwrap()).unwrap()
    });
    gradcheck(&[&[8]], &[x], OP_TOL, |g, vars| {
        g.sum(g.clamp(vars[0], -4.0, 4.0).unwrap()).unwrap()
    });
}

#[test]
fn composite_through_saturating_nonlinearities() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (m, k) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let a = rand_tensor(&mut rng, &[m, k], 2.0);
        let w = rand_tensor(&mut rng, &[k, k], 2.0);
        gradcheck(&[&[m, k], &[k, k]], &[a, w], COMPOSITE_TOL, |g, vars| {
            let h = g.tanh(g.matmul(vars[0], vars[1]).unwrap()).unwrap();
            let s = g.sigmoid(h).unwrap();
            let e = g.exp(g.scale(s, 0.5).unwrap()).unwrap();
            g.mean(g.mul(e, s).unwrap()).unwrap()
        });
    }
}

#[test]
fn sum_rule_split_paths_add_exactly() {
    // f(x) = sum(square(x)), g(x) = sum(3 x): both gradients are exact in
    // floating point, so the combined pass must equal their sum bit-wise.
    let x = Tensor::vector(&[0.75, -1.5, 2.25]);

    let g1 = Graph::new();
    let v1 = g1.leaf(&x);
    g1.backward(g1.sum(g1.square(v1).unwrap()).unwrap()).unwrap();
    let grad_f = g1.grad(v1).unwrap();

    let g2 = Graph::new();
    let v2 = g2.leaf(&x);
    g2.backward(g2.sum(g2.scale(v2, 3.0).unwrap()).unwrap()).unwrap();
    let grad_g = g2.grad(v2).unwrap();

    let g3 = Graph::new();
    let v3 = g3.leaf(&x);
    let combined = g3
        .add(g3.sum(g3.square(v3).unwrap()).unwrap(), g3.sum(g3.scale(v3, 3.0).unwrap()).unwrap())
        .unwrap();
    g3.backward(combined).unwrap();
    let grad_sum = g3.grad(v3).unwrap();

    for i in 0..3 {
        assert_eq!(
            grad_sum.data()[i].to_bits(),
            (grad_f.data()[i] + grad_g.data()[i]).to_bits()
        );
    }
}

#[test]
fn determinism_same_seed_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = rand_tensor(&mut rng, &[3, 4], 1.0);
        let w = rand_tensor(&mut rng, &[4, 2], 1.0);
        let g = Graph::new();
        let (va, vw) = (g.leaf(&a), g.leaf(&w));
        let loss = g
            .sum(g.sigmoid(g.matmul(va, vw).unwrap()).unwrap())
            .unwrap();
        g.backward(loss).unwrap();
        (
            g.value_scalar(loss).to_bits(),
            g.grad(va).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

// ---- network blocks ----

fn store_tensors(store: &ParamStore) -> (Vec<String>, Vec<Tensor>) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let tensors = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
    (names, tensors)
}

/// Gradcheck a loss defined over every parameter of a store.
fn gradcheck_store(
    store: &ParamStore,
    tol: f64,
    build: impl Fn(&Graph, &Bound) -> Var,
) {
    let (names, tensors) = store_tensors(store);
    let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
    gradcheck(&shapes, &tensors, tol, |g, vars| {
        // The gradcheck leaves themselves act as the named parameters.
        let bound = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        build(g, &bound)
    });
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    let mlp = Mlp::new("net", MlpSpec { input_dim: 3, hidden_dims: vec![4, 3], output_dim: 2 });
    let mut store = ParamStore::new();
    mlp.init(&mut store, &mut rng).unwrap();
    let input = rand_tensor(&mut rng, &[2, 3], 1.0);
    gradcheck_store(&store, COMPOSITE_TOL, |g, bound| {
        let x = g.constant(&input);
        let out = mlp.apply(g, bound, x).unwrap();
        g.sum(g.square(out).unwrap()).unwrap()
    });
}

#[test]
fn gru_step_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let cell = GruCell::new("gru", GruCellSpec { input_dim: 3, state_dim: 4 });
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng).unwrap();
    let d_prev = rand_tensor(&mut rng, &[2, 4], 1.0);
    let u = rand_tensor(&mut rng, &[2, 3], 1.0);
    gradcheck_store(&store, COMPOSITE_TOL, |g, bound| {
        let d = g.constant(&d_prev);
        let inp = g.constant(&u);
        let out = cell.step(g, bound, d, inp).unwrap();
        g.sum(g.square(out).unwrap()).unwrap()
    });
}

#[test]
fn distribution_heads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let (batch, k) = (2, 3);
    let mean = rand_tensor(&mut rng, &[batch, k], 1.0);
    let logvar = rand_tensor(&mut rng, &[batch, k], 1.0);
    let x = rand_tensor(&mut rng, &[batch, k], 1.0);
    gradcheck(
        &[&[batch, k], &[batch, k]],
        &[mean, logvar],
        COMPOSITE_TOL,
        |g, vars| {
            let dist = nn::gaussian_head(g, vars[0], vars[1]).unwrap();
            let xc = g.constant(&x);
            g.sum(nn::gaussian_logprob(g, &dist, xc).unwrap()).unwrap()
        },
    );

    let logits = rand_tensor(&mut rng, &[batch, k], 2.0);
    let xbin = Tensor::new(
        vec![batch, k],
        (0..batch * k).map(|i| f64::from(i % 2 == 0)).collect(),
    )
    .unwrap();
    gradcheck(&[&[batch, k]], &[logits], COMPOSITE_TOL, |g, vars| {
        let xc = g.constant(&xbin);
        g.sum(nn::bernoulli_logprob(g, vars[0], xc).unwrap()).unwrap()
    });
}

#[test]
fn reparameterized_sample_gradients_flow_to_both_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (batch, k) = (2, 2);
    let mean = rand_tensor(&mut rng, &[batch, k], 1.0);
    let logvar = rand_tensor(&mut rng, &[batch, k], 0.5);
    let noise = common::rand_normal(&mut rng, &[batch, k]);
    gradcheck(
        &[&[batch, k], &[batch, k]],
        &[mean, logvar],
        COMPOSITE_TOL,
        |g, vars| {
            let dist = nn::gaussian_head(g, vars[0], vars[1]).unwrap();
            let eps = g.constant(&noise);
            let z = dist.sample(g, eps).unwrap();
            g.sum(g.square(z).unwrap()).unwrap()
        },
    );
}
