//! The evidence lower bound and its pieces.

use crate::corpus::SparseCorpus;
use crate::decoder::poisson_loglik;
use crate::encoder::{input_columns, WeibullPosterior};
use crate::model::{InputTransform, ModelError};
use crate::tape::special::{ln_gamma, EULER_MASCHERONI};
use crate::tape::{SparseColumns, Tape, Tensor, Var};

/// Floor on the gamma prior shape inside the KL.
pub const PRIOR_SHAPE_FLOOR: f64 = 1e-10;

/// `KL(Weibull(k, λ) ‖ Gamma(α, β))` summed over all entries. All four inputs
/// share one shape and must be positive.
pub fn kl_weibull_gamma(tape: &mut Tape, k: Var, lambda: Var, alpha: Var, beta: Var) -> Result<Var, ModelError> {
    let g = EULER_MASCHERONI;
    let a_over_k = tape.div(alpha, k)?;
    let t1 = tape.scale(a_over_k, g);
    let ln_l = tape.log(lambda)?;
    let t2 = tape.mul(alpha, ln_l)?;
    let t3 = tape.log(k)?;
    let inv_k = tape.pow(k, -1.0)?;
    let arg = tape.add_scalar(inv_k, 1.0);
    let lg = tape.lgamma(arg)?;
    let gamma_term = tape.exp(lg);
    let bl = tape.mul(beta, lambda)?;
    let t4 = tape.mul(bl, gamma_term)?;
    let ln_b = tape.log(beta)?;
    let t5 = tape.mul(alpha, ln_b)?;
    let t6 = tape.lgamma(alpha)?;

    let acc = tape.sub(t1, t2)?;
    let acc = tape.add(acc, t3)?;
    let acc = tape.add(acc, t4)?;
    let acc = tape.sub(acc, t5)?;
    let acc = tape.add(acc, t6)?;
    let acc = tape.add_scalar(acc, -g - 1.0);
    Ok(tape.sum(acc))
}

/// Scalar form of [`kl_weibull_gamma`].
pub fn kl_weibull_gamma_value(k: f64, lambda: f64, alpha: f64, beta: f64) -> Result<f64, ModelError> {
    for (name, v) in [("k", k), ("lambda", lambda), ("alpha", alpha), ("beta", beta)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ModelError::Config(format!("kl_weibull_gamma: {name} = {v} is not positive")));
        }
    }
    let g = EULER_MASCHERONI;
    Ok(g * alpha / k - alpha * lambda.ln() + k.ln() + beta * lambda * ln_gamma(1.0 + 1.0 / k).exp()
        - g
        - 1.0
        - alpha * beta.ln()
        + ln_gamma(alpha))
}

/// A minibatch in both encoder (sparse, transformed) and likelihood (dense
/// counts) form.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: SparseColumns,
    /// `V x B` raw counts.
    pub counts: Tensor,
}

impl Batch {
    pub fn new(corpus: &SparseCorpus, ids: &[usize], transform: InputTransform) -> Self {
        let docs: Vec<_> = ids.iter().map(|&d| &corpus.docs[d]).collect();
        let input = input_columns(&docs, corpus.vocab_size, transform);
        let mut counts = Tensor::zeros(corpus.vocab_size, ids.len());
        for (j, doc) in docs.iter().enumerate() {
            for &(w, c) in doc.iter() {
                counts.set(w, j, counts.get(w, j) + c as f64);
            }
        }
        Batch { input, counts }
    }

    pub fn len(&self) -> usize {
        self.counts.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Elbo {
    /// `−(recon − β Σ KL)`.
    pub loss: Var,
    /// Poisson log-likelihood of the batch.
    pub recon: Var,
    /// One KL node per layer, bottom first.
    pub kl: Vec<Var>,
}

/// Negative warm-up-weighted ELBO of a batch.
pub fn elbo(
    tape: &mut Tape,
    counts: &Tensor,
    posterior: &WeibullPosterior,
    phis: &[Var],
    prior_rate: f64,
    beta_warm: f64,
) -> Result<Elbo, ModelError> {
    if !(0.0..=1.0).contains(&beta_warm) {
        return Err(ModelError::Config(format!("warm-up weight {beta_warm} outside [0, 1]")));
    }
    let rate = tape.matmul(phis[0], posterior.theta[0])?;
    let recon = poisson_loglik(tape, counts, rate)?;
    let mut kl = Vec::with_capacity(posterior.theta.len());
    for l in 0..posterior.theta.len() {
        let alpha = tape.clamp_min(posterior.prior_shape[l], PRIOR_SHAPE_FLOOR);
        let (r, c) = tape.value(alpha).shape();
        let beta = tape.constant(Tensor::full(r, c, prior_rate));
        kl.push(kl_weibull_gamma(tape, posterior.shape[l], posterior.scale[l], alpha, beta)?);
    }
    let mut total = kl[0];
    for &term in &kl[1..] {
        total = tape.add(total, term)?;
    }
    let weighted = tape.scale(total, beta_warm);
    let loss = tape.sub(weighted, recon)?;
    Ok(Elbo { loss, recon, kl })
}

/// Linear warm-up `min(1, epoch / n)`; `n = 0` disables it.
pub fn warmup_beta(epoch: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        (epoch as f64 / n as f64).min(1.0)
    }
}
