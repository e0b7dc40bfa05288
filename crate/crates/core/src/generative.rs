//! The generative side: deterministic GRU path, Gaussian transition prior
//! over the stochastic layer, and the emission with a skip-connection from
//! the deterministic state.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::nn::{gaussian_head, Bound, Gaussian, GruCell, GruCellSpec, Mlp, MlpSpec};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionKind {
    Bernoulli,
    Gaussian,
}

/// Dimensions and head choice for the generative model.
#[derive(Debug, Clone)]
pub struct GenerativeSpec {
    pub dim_z: usize,
    pub dim_d: usize,
    pub dim_u: usize,
    pub dim_x: usize,
    /// Hidden widths of the prior nets and the emission trunk. Empty means
    /// plain affine maps.
    pub hidden: Vec<usize>,
    pub emission: EmissionKind,
}

/// Emission distribution parameters for one step.
pub enum EmissionDist {
    Bernoulli { logits: Var },
    Gaussian(Gaussian),
}

impl EmissionDist {
    /// Masked log-likelihood building block: `[batch, dim_x] -> [batch]`.
    pub fn log_prob(&self, g: &Graph, x: Var) -> Result<Var, TensorError> {
        match self {
            EmissionDist::Bernoulli { logits } => crate::nn::bernoulli_logprob(g, *logits, x),
            EmissionDist::Gaussian(dist) => crate::nn::gaussian_logprob(g, dist, x),
        }
    }
}

/// The generative model: GRU recursion `d_t = f(d_{t-1}, u_t)`, prior
/// `z_t ~ N(mean_net([z_{t-1}; d_t]), exp logvar_net([z_{t-1}; d_t]))`,
/// emission over `[z_t; d_t]`.
pub struct GenerativeModel {
    pub spec: GenerativeSpec,
    pub gru: GruCell,
    pub prior_mean: Mlp,
    pub prior_logvar: Mlp,
    /// Shared feature stack for the emission heads; `None` when `hidden`
    /// is empty and the heads read `[z; d]` directly.
    emission_trunk: Option<Mlp>,
    emission_mean: Mlp,
    emission_logvar: Option<Mlp>,
}

impl GenerativeModel {
    pub fn new(spec: GenerativeSpec) -> Self {
        let zd = spec.dim_z + spec.dim_d;
        let gru = GruCell::new(
            "gru",
            GruCellSpec { input_dim: spec.dim_u, state_dim: spec.dim_d },
        );
        let prior_mean = Mlp::new(
            "prior_mean",
            MlpSpec { input_dim: zd, hidden_dims: spec.hidden.clone(), output_dim: spec.dim_z },
        );
        let prior_logvar = Mlp::new(
            "prior_logvar",
            MlpSpec { input_dim: zd, hidden_dims: spec.hidden.clone(), output_dim: spec.dim_z },
        );
        let (emission_trunk, feature_dim) = if spec.hidden.is_empty() {
            (None, zd)
        } else {
            let last = *spec.hidden.last().unwrap();
            let trunk = Mlp::new(
                "emission.trunk",
                MlpSpec {
                    input_dim: zd,
                    hidden_dims: spec.hidden[..spec.hidden.len() - 1].to_vec(),
                    output_dim: last,
                },
            );
            (Some(trunk), last)
        };
        let emission_mean = Mlp::new(
            "emission.mean",
            MlpSpec { input_dim: feature_dim, hidden_dims: vec![], output_dim: spec.dim_x },
        );
        let emission_logvar = match spec.emission {
            EmissionKind::Gaussian => Some(Mlp::new(
                "emission.logvar",
                MlpSpec { input_dim: feature_dim, hidden_dims: vec![], output_dim: spec.dim_x },
            )),
            EmissionKind::Bernoulli => None,
        };
        GenerativeModel {
            spec,
            gru,
            prior_mean,
            prior_logvar,
            emission_trunk,
            emission_mean,
            emission_logvar,
        }
    }

    /// Fresh parameter store for this model.
    pub fn init(&self, rng: &mut ChaCha8Rng) -> Result<ParamStore, TensorError> {
        let mut store = ParamStore::new();
        self.gru.init(&mut store, rng)?;
        self.prior_mean.init(&mut store, rng)?;
        self.prior_logvar.init(&mut store, rng)?;
        if let Some(trunk) = &self.emission_trunk {
            trunk.init(&mut store, rng)?;
        }
        self.emission_mean.init(&mut store, rng)?;
        if let Some(lv) = &self.emission_logvar {
            lv.init(&mut store, rng)?;
        }
        Ok(store)
    }

    /// Iterate the GRU over `u_1..u_T`. The result depends only on inputs
    /// and `d0`, never on observations or latent samples.
    pub fn run_deterministic(
        &self,
        g: &Graph,
        p: &Bound,
        u_steps: &[Var],
        d0: Var,
    ) -> Result<Vec<Var>, TensorError> {
        let mut d = d0;
        let mut path = Vec::with_capacity(u_steps.len());
        for &u_t in u_steps {
            d = self.gru.step(g, p, d, u_t)?;
            path.push(d);
        }
        Ok(path)
    }

    /// Transition prior `p(z_t | z_{t-1}, d_t)`.
    pub fn prior_transition(
        &self,
        g: &Graph,
        p: &Bound,
        z_prev: Var,
        d_t: Var,
    ) -> Result<Gaussian, TensorError> {
        let joint = g.concat_last(z_prev, d_t)?;
        let mean = self.prior_mean.apply(g, p, joint)?;
        let logvar = self.prior_logvar.apply(g, p, joint)?;
        gaussian_head(g, mean, logvar)
    }

    /// Just the prior mean net, used for the predictive-prior residual.
    pub fn prior_mean_only(
        &self,
        g: &Graph,
        p: &Bound,
        z_prev: Var,
        d_t: Var,
    ) -> Result<Var, TensorError> {
        let joint = g.concat_last(z_prev, d_t)?;
        self.prior_mean.apply(g, p, joint)
    }

    /// Emission distribution `p(x_t | z_t, d_t)`.
    pub fn emission(
        &self,
        g: &Graph,
        p: &Bound,
        z_t: Var,
        d_t: Var,
    ) -> Result<EmissionDist, TensorError> {
        let joint = g.concat_last(z_t, d_t)?;
        let features = match &self.emission_trunk {
            Some(trunk) => g.leaky_clip(trunk.apply(g, p, joint)?)?,
            None => joint,
        };
        let mean = self.emission_mean.apply(g, p, features)?;
        match (&self.spec.emission, &self.emission_logvar) {
            (EmissionKind::Bernoulli, _) => Ok(EmissionDist::Bernoulli { logits: mean }),
            (EmissionKind::Gaussian, Some(lv_net)) => {
                let logvar = lv_net.apply(g, p, features)?;
                Ok(EmissionDist::Gaussian(gaussian_head(g, mean, logvar)?))
            }
            (EmissionKind::Gaussian, None) => unreachable!("gaussian model built without logvar head"),
        }
    }
}

/// Input feed for ancestral sampling.
pub enum GenInputs<'a> {
    /// `u_t = x_{t-1}` with `u_1 = 0` (sequence generation).
    FreeRunning,
    /// Provided inputs `[n, T, dim_u]`.
    Driven(&'a Tensor),
}

/// Ancestral samples plus the latent paths that produced them.
pub struct GeneratedPaths {
    /// `[n, T, dim_x]`
    pub x: Tensor,
    /// `[n, T, dim_z]`
    pub z: Tensor,
    /// `[n, T, dim_d]`
    pub d: Tensor,
}

impl GenerativeModel {
    /// Draw `n` sequences of length `t_len` by ancestral sampling.
    pub fn generate(
        &self,
        store: &ParamStore,
        n: usize,
        t_len: usize,
        seed: u64,
        inputs: GenInputs,
    ) -> Result<GeneratedPaths, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let p = Bound::bind(&g, store, false)?;

        let mut d = g.constant(&Tensor::zeros(vec![n, self.spec.dim_d]));
        let mut z = g.constant(&Tensor::zeros(vec![n, self.spec.dim_z]));
        let mut x_prev = Tensor::zeros(vec![n, self.spec.dim_u]);

        let mut xs = Vec::with_capacity(t_len);
        let mut zs = Vec::with_capacity(t_len);
        let mut ds = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let u_t = match &inputs {
                GenInputs::FreeRunning => g.constant(&x_prev),
                GenInputs::Driven(u) => {
                    let mut step = Vec::with_capacity(n * self.spec.dim_u);
                    for i in 0..n {
                        let base = (i * u.shape()[1] + t) * self.spec.dim_u;
                        step.extend_from_slice(&u.data()[base..base + self.spec.dim_u]);
                    }
                    g.constant(&Tensor::new(vec![n, self.spec.dim_u], step)?)
                }
            };
            d = self.gru.step(&g, &p, d, u_t)?;
            let prior = self.prior_transition(&g, &p, z, d)?;
            let noise = normal_tensor(&mut rng, n, self.spec.dim_z);
            z = prior.sample(&g, g.constant(&noise))?;

            let emission = self.emission(&g, &p, z, d)?;
            let x_t = match emission {
                EmissionDist::Bernoulli { logits } => {
                    let probs = g.value(g.sigmoid(logits)?);
                    let data = probs
                        .data()
                        .iter()
                        .map(|p| f64::from(rng.random::<f64>() < *p))
                        .collect();
                    Tensor::new(vec![n, self.spec.dim_x], data)?
                }
                EmissionDist::Gaussian(dist) => {
                    let noise = normal_tensor(&mut rng, n, self.spec.dim_x);
                    g.value(dist.sample(&g, g.constant(&noise))?)
                }
            };
            xs.push(x_t.clone());
            zs.push(g.value(z));
            ds.push(g.value(d));
            x_prev = x_t;
        }
        Ok(GeneratedPaths {
            x: stack_steps(&xs, n, t_len, self.spec.dim_x),
            z: stack_steps(&zs, n, t_len, self.spec.dim_z),
            d: stack_steps(&ds, n, t_len, self.spec.dim_d),
        })
    }
}

use rand::SeedableRng;

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape consistent")
}

/// Stack per-step `[n, w]` tensors into `[n, T, w]`.
fn stack_steps(steps: &[Tensor], n: usize, t_len: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; n * t_len * w];
    for (t, step) in steps.iter().enumerate() {
        for i in 0..n {
            let src = &step.data()[i * w..(i + 1) * w];
            let dst = (i * t_len + t) * w;
            data[dst..dst + w].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, t_len, w], data).expect("shape consistent")
}
