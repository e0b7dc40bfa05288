//! Ground-truth machinery: exact marginal log-likelihood of linear
//! Gaussian state space models via the Kalman filter, and a guarded
//! importance-sampling log-likelihood estimator for tiny models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generative::GenerativeModel;
use crate::inference::{InferenceModel, NoiseBundle};
use crate::nn::Bound;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("{which} must be positive, found {value}")]
    NonPositiveVariance { which: &'static str, value: f64 },
    #[error("innovation covariance is not positive definite at step {step}")]
    NotPositiveDefinite { step: usize },
    #[error("dimension mismatch: {0}")]
    Dims(String),
    #[error(
        "importance sampling is restricted to dim_z <= {max_z} and T <= {max_t} \
         (got dim_z = {dim_z}, T = {t_len}); sequential importance weights \
         degenerate beyond toy sizes"
    )]
    TooLarge { max_z: usize, max_t: usize, dim_z: usize, t_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Linear Gaussian state space model with diagonal noise covariances:
/// `z_1 ~ N(init_mean, diag(init_cov))`,
/// `z_t = A z_{t-1} + w`, `x_t = C z_t + v`.
#[derive(Debug, Clone)]
pub struct Lgssm {
    /// State transition `A`, `[k, k]`.
    pub trans: Tensor,
    /// Process noise diagonal `Q`, length `k`.
    pub trans_noise: Vec<f64>,
    /// Emission matrix `C`, `[m, k]`.
    pub emit: Tensor,
    /// Observation noise diagonal `R`, length `m`.
    pub emit_noise: Vec<f64>,
    pub init_mean: Vec<f64>,
    /// Initial covariance diagonal, length `k`.
    pub init_cov: Vec<f64>,
}

impl Lgssm {
    pub fn state_dim(&self) -> usize {
        self.trans.shape()[0]
    }

    pub fn obs_dim(&self) -> usize {
        self.emit.shape()[0]
    }

    fn validate(&self) -> Result<(), OracleError> {
        let k = self.state_dim();
        let m = self.obs_dim();
        if self.trans.shape() != [k, k]
            || self.emit.shape() != [m, k]
            || self.trans_noise.len() != k
            || self.emit_noise.len() != m
            || self.init_mean.len() != k
            || self.init_cov.len() != k
        {
            return Err(OracleError::Dims(format!(
                "A {:?}, C {:?}, |Q| {}, |R| {}, |mu0| {}, |S0| {}",
                self.trans.shape(),
                self.emit.shape(),
                self.trans_noise.len(),
                self.emit_noise.len(),
                self.init_mean.len(),
                self.init_cov.len()
            )));
        }
        for (which, diag) in [
            ("process noise Q", &self.trans_noise),
            ("observation noise R", &self.emit_noise),
            ("initial covariance", &self.init_cov),
        ] {
            if let Some(v) = diag.iter().find(|v| **v <= 0.0) {
                return Err(OracleError::NonPositiveVariance { which, value: *v });
            }
        }
        Ok(())
    }
}

/// Exact `log p(x_{1:T})` by the predict/update recursion, accumulating
/// the log density of each step's innovation Gaussian.
pub fn kalman_loglik(model: &Lgssm, x: &Tensor) -> Result<f64, OracleError> {
    model.validate()?;
    let k = model.state_dim();
    let m = model.obs_dim();
    if x.numel() == 0 {
        return Ok(0.0);
    }
    if x.shape().len() != 2 || x.shape()[1] != m {
        return Err(OracleError::Dims(format!(
            "observations {:?} incompatible with obs_dim {m}",
            x.shape()
        )));
    }
    let t_len = x.shape()[0];
    let a = model.trans.data();
    let c = model.emit.data();

    // Predicted moments for z_1.
    let mut mean = model.init_mean.clone();
    let mut cov = vec![0.0; k * k];
    for i in 0..k {
        cov[i * k + i] = model.init_cov[i];
    }

    let mut loglik = 0.0;
    for t in 0..t_len {
        let obs = x.row(t);

        // Innovation: r = obs - C mean, S = C P C^T + R.
        let mut resid = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += c[i * k + j] * mean[j];
            }
            resid[i] = obs[i] - acc;
        }
        let pct = mat_mul_nt(&cov, c, k, k, m); // P C^T, [k, m]
        let mut s = mat_mul(c, &pct, m, k, m); // C P C^T, [m, m]
        for i in 0..m {
            s[i * m + i] += model.emit_noise[i];
        }

        // Innovation log density via Cholesky of S.
        let chol = cholesky(&s, m).ok_or(OracleError::NotPositiveDefinite { step: t })?;
        let solved = chol_solve(&chol, &resid, m);
        let quad: f64 = resid.iter().zip(&solved).map(|(r, y)| r * y).sum();
        let logdet: f64 = (0..m).map(|i| chol[i * m + i].ln()).sum::<f64>() * 2.0;
        loglik += -0.5 * (m as f64 * LN_2PI + logdet + quad);

        // Update: K = P C^T S^{-1}; mean += K resid; P -= K C P.
        let mut gain = vec![0.0; k * m]; // K
        for i in 0..k {
            let row = chol_solve(&chol, &pct[i * m..(i + 1) * m], m);
            gain[i * m..(i + 1) * m].copy_from_slice(&row);
        }
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..m {
                acc += gain[i * m + j] * resid[j];
            }
            mean[i] += acc;
        }
        // P = P - K (P C^T)^T  (K [k,m], (PC^T)^T [m,k])
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += gain[i * m + l] * pct[j * m + l];
                }
                cov[i * k + j] -= acc;
            }
        }
        symmetrize(&mut cov, k);

        // Predict for the next step: mean = A mean, P = A P A^T + Q.
        if t + 1 < t_len {
            let mut new_mean = vec![0.0; k];
            for i in 0..k {
                for j in 0..k {
                    new_mean[i] += a[i * k + j] * mean[j];
                }
            }
            mean = new_mean;
            let ap = mat_mul(a, &cov, k, k, k);
            let mut new_cov = mat_mul_nt(&ap, a, k, k, k);
            for i in 0..k {
                new_cov[i * k + i] += model.trans_noise[i];
            }
            symmetrize(&mut new_cov, k);
            cov = new_cov;
        }
    }
    Ok(loglik)
}

const LN_2PI: f64 = 1.8378770664093453;

const IS_MAX_DIM_Z: usize = 4;
const IS_MAX_T: usize = 10;
const IS_CHUNK: usize = 2000;

/// Importance-sampling estimate of `log p(x_{1:T})` with its standard
/// error, using the inference network as the proposal. Restricted to tiny
/// models where the estimate is meaningful.
pub fn importance_loglik(
    gen: &GenerativeModel,
    inf: &InferenceModel,
    gen_store: &ParamStore,
    inf_store: &ParamStore,
    x: &Tensor,
    u: &Tensor,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64), OracleError> {
    let t_len = x.shape()[0];
    let dim_z = gen.spec.dim_z;
    if dim_z > IS_MAX_DIM_Z || t_len > IS_MAX_T {
        return Err(OracleError::TooLarge {
            max_z: IS_MAX_DIM_Z,
            max_t: IS_MAX_T,
            dim_z,
            t_len,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_weights = Vec::with_capacity(n_samples);
    let mut remaining = n_samples;
    while remaining > 0 {
        let batch = remaining.min(IS_CHUNK);
        remaining -= batch;
        log_weights.extend(log_weight_batch(gen, inf, gen_store, inf_store, x, u, batch, &mut rng)?);
    }

    // Log-sum-exp stabilized around the max weight.
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_weights.iter().map(|w| (w - max).exp()).collect();
    let mean: f64 = scaled.iter().sum::<f64>() / n_samples as f64;
    let estimate = max + mean.ln();
    let var: f64 = scaled.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>()
        / (n_samples.saturating_sub(1).max(1)) as f64;
    // Delta method: sd(log mean(w)) ~ sd(w) / (mean(w) sqrt(n)).
    let se = (var / n_samples as f64).sqrt() / mean;
    Ok((estimate, se))
}

/// One batch of `log [p(x, z) / q(z | x)]` draws.
fn log_weight_batch(
    gen: &GenerativeModel,
    inf: &InferenceModel,
    gen_store: &ParamStore,
    inf_store: &ParamStore,
    x: &Tensor,
    u: &Tensor,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, OracleError> {
    let t_len = x.shape()[0];
    let g = Graph::new();
    let pg = Bound::bind(&g, gen_store, false)?;
    let pi = Bound::bind(&g, inf_store, false)?;
    let x_steps: Vec<_> = (0..t_len)
        .map(|t| g.constant(&replicate_row(x.row(t), batch)))
        .collect();
    let u_steps: Vec<_> = (0..t_len)
        .map(|t| g.constant(&replicate_row(u.row(t), batch)))
        .collect();
    let z0 = g.constant(&Tensor::zeros(vec![batch, gen.spec.dim_z]));
    let d0 = g.constant(&Tensor::zeros(vec![batch, gen.spec.dim_d]));
    let noise = NoiseBundle::draw(rng, batch, gen.spec.dim_z, t_len, inf.spec.prior_mean_samples);
    let path = inf.infer_path(&g, gen, &pg, &pi, &x_steps, &u_steps, z0, d0, None, &noise)?;

    let mut logw = vec![0.0; batch];
    for t in 0..t_len {
        let emission = gen.emission(&g, &pg, path.z[t], path.d[t])?;
        let recon = g.value(emission.log_prob(&g, x_steps[t])?);
        let p_term = g.value(crate::nn::gaussian_logprob(&g, &path.dists[t].p, path.z[t])?);
        let q_term = g.value(crate::nn::gaussian_logprob(&g, &path.dists[t].q, path.z[t])?);
        for i in 0..batch {
            logw[i] += recon.data()[i] + p_term.data()[i] - q_term.data()[i];
        }
    }
    Ok(logw)
}

fn replicate_row(row: &[f64], batch: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * row.len());
    for _ in 0..batch {
        data.extend_from_slice(row);
    }
    Tensor::new(vec![batch, row.len()], data).expect("shape consistent")
}

// ---- small dense helpers (state dims stay tiny) ----

fn mat_mul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// `a [m,k] @ b^T` with `b` stored `[n,k]`.
fn mat_mul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn symmetrize(mat: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (mat[i * n + j] + mat[j * n + i]);
            mat[i * n + j] = avg;
            mat[j * n + i] = avg;
        }
    }
}

/// Lower-triangular Cholesky factor, or `None` if not positive definite.
fn cholesky(mat: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = mat[i * n + j];
            for p in 0..j {
                acc -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if acc <= 0.0 {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T y = b` by forward/back substitution.
fn chol_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[i * n + j] * y[j];
        }
        y[i] = acc / l[i * n + i];
    }
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for j in (i + 1)..n {
            acc -= l[j * n + i] * z[j];
        }
        z[i] = acc / l[i * n + i];
    }
    z
}
