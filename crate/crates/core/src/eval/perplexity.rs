use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{HeldoutSplit, SparseCorpus};
use crate::decoder::phi_stack;
use crate::encoder::{draw_noise, infer, Noise};
use crate::model::{Model, ModelError};
use crate::tape::{Tape, Tensor};
use crate::trainer::{derive_seed, Batch};

/// Running sum of heldout log-probabilities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PerplexityAccumulator {
    pub log_prob: f64,
    pub tokens: u64,
}

impl PerplexityAccumulator {
    /// Adds one document given its unnormalized predicted rates over the
    /// vocabulary. Documents without heldout tokens contribute nothing.
    pub fn add_document(&mut self, rates: &[f64], heldout: &[(usize, u32)]) {
        let n: u64 = heldout.iter().map(|&(_, c)| c as u64).sum();
        if n == 0 {
            return;
        }
        let total: f64 = rates.iter().sum();
        for &(w, c) in heldout {
            self.log_prob += c as f64 * (rates[w] / total).ln();
        }
        self.tokens += n;
    }

    pub fn merge(&mut self, other: &Self) {
        self.log_prob += other.log_prob;
        self.tokens += other.tokens;
    }

    /// `exp(−log_prob / tokens)`; NaN when no token was seen.
    pub fn perplexity(&self) -> f64 {
        if self.tokens == 0 {
            f64::NAN
        } else {
            (-self.log_prob / self.tokens as f64).exp()
        }
    }
}

/// Perplexity of `heldout` under per-document rates, one column per document.
pub fn perplexity_from_rates(rates: &Tensor, heldout: &SparseCorpus) -> f64 {
    let mut acc = PerplexityAccumulator::default();
    for (d, doc) in heldout.docs.iter().enumerate() {
        acc.add_document(&rates.column(d), doc);
    }
    acc.perplexity()
}

/// Σ over posterior draws of `Φ⁽¹⁾θ⁽¹⁾` for each document of `train`
/// (`V x N`). Draw `s` of batch `b` uses noise seeded from `(seed, s, b)`.
pub fn posterior_rates(
    model: &Model,
    train: &SparseCorpus,
    samples: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Tensor, ModelError> {
    let phi1 = model.phi_values()?.swap_remove(0);
    let n = train.len();
    let v = train.vocab_size;
    let mut out = Tensor::zeros(v, n);
    let ids: Vec<usize> = (0..n).collect();
    for (b, chunk) in ids.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::new(train, chunk, model.config.input_transform);
        let mut theta_sum = Tensor::zeros(phi1.cols(), chunk.len());
        for s in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, s as u64), b as u64));
            let noise = Noise::Sample(draw_noise(&mut rng, &model.config.layer_widths, chunk.len()));
            theta_sum.add_assign(&theta_one(model, &batch, &noise)?);
        }
        let rates = phi1.matmul(&theta_sum)?;
        for (j, &d) in chunk.iter().enumerate() {
            for w in 0..v {
                out.set(w, d, rates.get(w, j));
            }
        }
    }
    Ok(out)
}

/// Layer-1 θ of a batch under the given noise.
pub(crate) fn theta_one(model: &Model, batch: &Batch, noise: &Noise) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let phis = phi_stack(&mut tape, &model.layout.decoder, &vars)?;
    let post = infer(&mut tape, &model.layout, &vars, &phis, &batch.input, noise)?;
    Ok(tape.value(post.theta[0]).clone())
}

/// Per-heldout-word perplexity: θ is inferred from the training half of
/// each document with `samples` posterior draws, and the summed rates are
/// normalized per document before scoring the heldout half.
pub fn heldout_perplexity(
    model: &Model,
    split: &HeldoutSplit,
    samples: usize,
    seed: u64,
    batch_size: usize,
) -> Result<f64, ModelError> {
    if samples == 0 {
        return Err(ModelError::Config("at least one posterior sample is required".into()));
    }
    let rates = posterior_rates(model, &split.train, samples, seed, batch_size)?;
    Ok(perplexity_from_rates(&rates, &split.heldout))
}
