//! Generative side: topic matrices from embeddings, the Poisson likelihood,
//! and projection of upper-layer topics onto the vocabulary.

use crate::corpus::Vocabulary;
use crate::model::{DecoderLayout, ModelError};
use crate::tape::special::ln_gamma;
use crate::tape::{Tape, Tensor, Var};

/// Floor applied to Poisson rates before taking logs.
pub const RATE_FLOOR: f64 = 1e-10;

/// Number of layers described by a decoder layout.
pub fn depth(layout: &DecoderLayout) -> usize {
    match layout {
        DecoderLayout::Sawtooth { alpha } => alpha.len() - 1,
        DecoderLayout::Unshared { alpha, .. } => alpha.len(),
        DecoderLayout::Direct { w } => w.len(),
    }
}

/// `Φ⁽ˡ⁾` (`K_{l-1} x K_l`, column-stochastic) for `l` in `1..=L`.
pub fn compute_phi(tape: &mut Tape, layout: &DecoderLayout, vars: &[Var], l: usize) -> Result<Var, ModelError> {
    let depth = depth(layout);
    if l == 0 || l > depth {
        return Err(ModelError::LayerOutOfRange { layer: l, depth });
    }
    let logits = match layout {
        DecoderLayout::Sawtooth { alpha } => {
            let lower = tape.transpose(vars[alpha[l - 1]]);
            tape.matmul(lower, vars[alpha[l]])?
        }
        DecoderLayout::Unshared { alpha, beta } => {
            let lower = tape.transpose(vars[alpha[l - 1]]);
            tape.matmul(lower, vars[beta[l - 1]])?
        }
        DecoderLayout::Direct { w } => vars[w[l - 1]],
    };
    Ok(tape.softmax_cols(logits))
}

/// `[Φ⁽¹⁾, .., Φ⁽ᴸ⁾]`.
pub fn phi_stack(tape: &mut Tape, layout: &DecoderLayout, vars: &[Var]) -> Result<Vec<Var>, ModelError> {
    (1..=depth(layout)).map(|l| compute_phi(tape, layout, vars, l)).collect()
}

/// Σ ln Γ(x + 1) over a count matrix.
pub fn log_factorial_sum(x: &Tensor) -> f64 {
    x.data().iter().filter(|&&c| c > 0.0).map(|&c| ln_gamma(c + 1.0)).sum()
}

/// Poisson log-pmf `Σ x ln(rate) - rate - ln Γ(x + 1)` summed over all
/// entries; `rate` is floored at [`RATE_FLOOR`].
pub fn poisson_loglik(tape: &mut Tape, x: &Tensor, rate: Var) -> Result<Var, ModelError> {
    if let Some(index) = x.data().iter().position(|&c| c < 0.0) {
        return Err(ModelError::NegativeCount {
            index,
            value: x.data()[index],
        });
    }
    let constant = log_factorial_sum(x);
    let floored = tape.clamp_min(rate, RATE_FLOOR);
    let log_rate = tape.log(floored)?;
    let xv = tape.constant(x.clone());
    let weighted = tape.mul(xv, log_rate)?;
    let diff = tape.sub(weighted, floored)?;
    let total = tape.sum(diff);
    Ok(tape.add_scalar(total, -constant))
}

/// `Φ⁽¹⁾ Φ⁽²⁾ ⋯ Φ⁽ˡ⁾`: layer-`l` topics as distributions over the vocabulary.
pub fn project_topics(phis: &[Tensor], l: usize) -> Result<Tensor, ModelError> {
    if l == 0 || l > phis.len() {
        return Err(ModelError::LayerOutOfRange {
            layer: l,
            depth: phis.len(),
        });
    }
    let mut acc = phis[0].clone();
    for phi in &phis[1..l] {
        acc = acc.matmul(phi)?;
    }
    Ok(acc)
}

/// Indices of the `n` largest entries of each column, ties broken by the
/// smaller row index.
pub fn top_word_ids(topics: &Tensor, n: usize) -> Vec<Vec<usize>> {
    (0..topics.cols())
        .map(|k| {
            let col = topics.column(k);
            let mut ids: Vec<usize> = (0..col.len()).collect();
            let n = n.min(ids.len());
            let cmp = |a: &usize, b: &usize| col[*b].total_cmp(&col[*a]).then(a.cmp(b));
            if n < ids.len() {
                ids.select_nth_unstable_by(n, cmp);
                ids.truncate(n);
            }
            ids.sort_by(cmp);
            ids
        })
        .collect()
}

pub fn top_words(topics: &Tensor, n: usize, vocab: &Vocabulary) -> Vec<Vec<String>> {
    top_word_ids(topics, n)
        .into_iter()
        .map(|ids| ids.into_iter().map(|i| vocab.term(i).to_string()).collect())
        .collect()
}
