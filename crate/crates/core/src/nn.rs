//! Network building blocks shared by the generative and inference sides:
//! feed-forward stacks, the GRU cell, and distribution heads.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Log-variance clamp applied by every Gaussian head. Keeps KL and
/// likelihood terms finite; also acts as the output variance floor e^-8.
pub const LOGVAR_CLAMP: f64 = 8.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Parameters of a store bound into one graph, looked up by name.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Bind every entry of `store` into `g`. With `trainable = false` the
    /// parameters enter as constants (frozen).
    pub fn bind(g: &Graph, store: &ParamStore, trainable: bool) -> Result<Bound, TensorError> {
        let mut vars = BTreeMap::new();
        for name in store.names() {
            vars.insert(name.to_string(), g.param(store, name, trainable)?);
        }
        Ok(Bound { vars })
    }

    /// Assemble from existing (name, var) pairs; used by gradient-check
    /// harnesses that want leaves as parameters.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Bound {
        Bound { vars: pairs.into_iter().collect() }
    }

    pub fn var(&self, name: &str) -> Result<Var, TensorError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam { name: name.to_string() })
    }
}

/// Draw from the uniform Xavier/Glorot range for a `fan_in x fan_out` map.
fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, numel: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..numel).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
}

/// Feed-forward stack: affine + leaky-clipped rectifier per hidden layer,
/// final affine with no nonlinearity. An empty `hidden_dims` gives a plain
/// affine map, which is what lets hand-set weights realize exact linear
/// Gaussian systems.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    prefix: String,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, spec: MlpSpec) -> Self {
        Mlp { spec, prefix: prefix.into() }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut cur = self.spec.input_dim;
        for &h in &self.spec.hidden_dims {
            dims.push((cur, h));
            cur = h;
        }
        dims.push((cur, self.spec.output_dim));
        dims
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.prefix)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.prefix)
    }

    /// Insert freshly initialized parameters: Xavier-uniform weights, zero
    /// biases.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        for (layer, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            let w = Tensor::new(vec![fan_in, fan_out], xavier(rng, fan_in, fan_out, fan_in * fan_out))?;
            store.insert(&self.weight_name(layer), w)?;
            store.insert(&self.bias_name(layer), Tensor::zeros(vec![fan_out]))?;
        }
        Ok(())
    }

    /// Forward pass on `[batch, input_dim]`.
    pub fn apply(&self, g: &Graph, p: &Bound, input: Var) -> Result<Var, TensorError> {
        let shape = g.shape(input);
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_apply",
                lhs: shape,
                rhs: vec![0, self.spec.input_dim],
            });
        }
        let n_layers = self.layer_dims().len();
        let mut h = input;
        for layer in 0..n_layers {
            let w = p.var(&self.weight_name(layer))?;
            let b = p.var(&self.bias_name(layer))?;
            h = g.affine(h, w, b)?;
            if layer + 1 < n_layers {
                h = g.leaky_clip(h)?;
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit: update gate z, reset gate r inside the candidate,
/// new state `(1 - z) * d_prev + z * tanh(W u + U (r * d_prev) + b)`.
#[derive(Debug, Clone)]
pub struct GruCellSpec {
    pub input_dim: usize,
    pub state_dim: usize,
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub spec: GruCellSpec,
    prefix: String,
}

const GRU_GATES: [&str; 3] = ["update", "reset", "cand"];

impl GruCell {
    pub fn new(prefix: impl Into<String>, spec: GruCellSpec) -> Self {
        GruCell { spec, prefix: prefix.into() }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<(), TensorError> {
        let (i, s) = (self.spec.input_dim, self.spec.state_dim);
        for gate in GRU_GATES {
            store.insert(
                &format!("{}.w_{gate}", self.prefix),
                Tensor::new(vec![i, s], xavier(rng, i, s, i * s))?,
            )?;
            store.insert(
                &format!("{}.u_{gate}", self.prefix),
                Tensor::new(vec![s, s], xavier(rng, s, s, s * s))?,
            )?;
            store.insert(&format!("{}.b_{gate}", self.prefix), Tensor::zeros(vec![s]))?;
        }
        Ok(())
    }

    fn gate_pre(
        &self,
        g: &Graph,
        p: &Bound,
        gate: &str,
        state: Var,
        input: Var,
    ) -> Result<Var, TensorError> {
        let w = p.var(&format!("{}.w_{gate}", self.prefix))?;
        let u = p.var(&format!("{}.u_{gate}", self.prefix))?;
        let b = p.var(&format!("{}.b_{gate}", self.prefix))?;
        g.add_bias(g.add(g.matmul(input, w)?, g.matmul(state, u)?)?, b)
    }

    /// One step: `[batch, state] x [batch, input] -> [batch, state]`.
    pub fn step(&self, g: &Graph, p: &Bound, d_prev: Var, u_t: Var) -> Result<Var, TensorError> {
        let update = g.sigmoid(self.gate_pre(g, p, "update", d_prev, u_t)?)?;
        let reset = g.sigmoid(self.gate_pre(g, p, "reset", d_prev, u_t)?)?;
        let gated_state = g.mul(reset, d_prev)?;
        let cand = g.tanh(self.gate_pre(g, p, "cand", gated_state, u_t)?)?;
        g.add(g.mul(g.one_minus(update)?, d_prev)?, g.mul(update, cand)?)
    }
}

/// Diagonal Gaussian over graph variables, stored as mean and log-variance.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub mean: Var,
    pub logvar: Var,
}

/// Build a Gaussian from raw network outputs, clamping the log-variance to
/// `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub fn gaussian_head(g: &Graph, mean_out: Var, logvar_out: Var) -> Result<Gaussian, TensorError> {
    let (sm, sl) = (g.shape(mean_out), g.shape(logvar_out));
    if sm != sl {
        return Err(TensorError::ShapeMismatch { op: "gaussian_head", lhs: sm, rhs: sl });
    }
    Ok(Gaussian {
        mean: mean_out,
        logvar: g.clamp(logvar_out, -LOGVAR_CLAMP, LOGVAR_CLAMP)?,
    })
}

impl Gaussian {
    /// Reparameterized draw `mean + sqrt(var) * noise`; differentiable in
    /// both distribution parameters.
    pub fn sample(&self, g: &Graph, noise: Var) -> Result<Var, TensorError> {
        let std = g.exp(g.scale(self.logvar, 0.5)?)?;
        g.add(self.mean, g.mul(std, noise)?)
    }
}

/// Row-sum of per-dimension Gaussian log densities: `[batch, k] -> [batch]`.
pub fn gaussian_logprob(g: &Graph, dist: &Gaussian, x: Var) -> Result<Var, TensorError> {
    let sx = g.shape(x);
    let sm = g.shape(dist.mean);
    if sx != sm {
        return Err(TensorError::ShapeMismatch { op: "gaussian_logprob", lhs: sx, rhs: sm });
    }
    let diff_sq = g.square(g.sub(x, dist.mean)?)?;
    let inv_var = g.exp(g.neg(dist.logvar)?)?;
    let quad = g.mul(diff_sq, inv_var)?;
    let per_dim = g.scale(g.add_scalar(g.add(dist.logvar, quad)?, LN_2PI)?, -0.5)?;
    g.sum_last(per_dim)
}

/// Row-sum of per-dimension Bernoulli log masses under logits, using the
/// stable softplus form. `x` must be exactly 0/1.
pub fn bernoulli_logprob(g: &Graph, logits: Var, x: Var) -> Result<Var, TensorError> {
    let sl = g.shape(logits);
    let sx = g.shape(x);
    if sl != sx {
        return Err(TensorError::ShapeMismatch { op: "bernoulli_logprob", lhs: sl, rhs: sx });
    }
    let xv = g.value(x);
    if let Some(bad) = xv.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(TensorError::NonBinary { op: "bernoulli_logprob", value: *bad });
    }
    // log p = -(softplus(-l) + (1 - x) * l), per dimension.
    let sp = g.softplus(g.neg(logits)?)?;
    let miss = g.mul(g.one_minus(x)?, logits)?;
    g.sum_last(g.neg(g.add(sp, miss)?)?)
}
