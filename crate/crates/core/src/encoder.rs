//! Weibull upward-downward inference network.
//!
//! The upward path is a stack of residual blocks over a width-`H` feature,
//! preceded by one affine + relu projection from the vocabulary. Each layer
//! emits relu shape and scale heads. The downward path runs from the top
//! layer, combining each head with the prior term `Φ⁽ˡ⁺¹⁾θ⁽ˡ⁺¹⁾` (or the
//! broadcast top shape `r`) into Weibull parameters and sampling θ.

use rand::Rng;

use crate::corpus::SparseDoc;
use crate::model::{top_prior, EncoderLayer, EncoderLayout, InputTransform, Layout, ModelError};
use crate::tape::{SparseColumns, Tape, Tensor, Var};

/// Lower bound on the Weibull shape.
pub const MIN_SHAPE: f64 = 0.1;
/// Added to the Weibull scale after the softplus.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Uniform noise is drawn inside `[NOISE_EPS, 1 - NOISE_EPS]`.
pub const NOISE_EPS: f64 = 1e-6;

/// Documents as sparse encoder input columns, with the input transform applied.
pub fn input_columns(docs: &[&SparseDoc], vocab_size: usize, transform: InputTransform) -> SparseColumns {
    SparseColumns {
        rows: vocab_size,
        cols: docs
            .iter()
            .map(|d| d.iter().map(|&(w, c)| (w, transform.apply(c as f64))).collect())
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct UpwardFeatures {
    /// Projected input, `H x B`.
    pub h0: Var,
    /// `h⁽ˡ⁾` for `l = 1..=L`.
    pub hidden: Vec<Var>,
    pub shape_heads: Vec<Var>,
    pub scale_heads: Vec<Var>,
}

fn mlp(tape: &mut Tape, layer: &EncoderLayer, vars: &[Var], h: Var) -> Result<Var, ModelError> {
    let a = tape.affine(vars[layer.mlp_w1], vars[layer.mlp_b1], h)?;
    let a = tape.relu(a);
    Ok(tape.affine(vars[layer.mlp_w2], vars[layer.mlp_b2], a)?)
}

pub fn upward_pass(
    tape: &mut Tape,
    layout: &EncoderLayout,
    vars: &[Var],
    x: &SparseColumns,
) -> Result<UpwardFeatures, ModelError> {
    let projected = tape.sparse_matmul(vars[layout.input_w], x.clone())?;
    let bias = tape.broadcast_col(vars[layout.input_b], x.cols.len())?;
    let pre = tape.add(projected, bias)?;
    let h0 = tape.relu(pre);

    let mut hidden = Vec::with_capacity(layout.layers.len());
    let mut shape_heads = Vec::with_capacity(layout.layers.len());
    let mut scale_heads = Vec::with_capacity(layout.layers.len());
    let mut h = h0;
    for layer in &layout.layers {
        let delta = mlp(tape, layer, vars, h)?;
        h = tape.add(h, delta)?;
        let ks = tape.affine(vars[layer.shape_w], vars[layer.shape_b], h)?;
        let ls = tape.affine(vars[layer.scale_w], vars[layer.scale_b], h)?;
        hidden.push(h);
        shape_heads.push(tape.relu(ks));
        scale_heads.push(tape.relu(ls));
    }
    Ok(UpwardFeatures {
        h0,
        hidden,
        shape_heads,
        scale_heads,
    })
}

/// Combines the prior term (`K x B`) with the upward heads into `(k, λ)`.
pub fn downward_step(
    tape: &mut Tape,
    layer: &EncoderLayer,
    vars: &[Var],
    prior: Var,
    shape_head: Var,
    scale_head: Var,
) -> Result<(Var, Var), ModelError> {
    let ks = tape.concat_rows(prior, shape_head)?;
    let ks = tape.affine(vars[layer.combine_shape_w], vars[layer.combine_shape_b], ks)?;
    let ks = tape.softplus(ks);
    let k = tape.clamp_min(ks, MIN_SHAPE);

    let ls = tape.concat_rows(prior, scale_head)?;
    let ls = tape.affine(vars[layer.combine_scale_w], vars[layer.combine_scale_b], ls)?;
    let ls = tape.softplus(ls);
    let lambda = tape.add_scalar(ls, SCALE_FLOOR);
    Ok((k, lambda))
}

/// `θ = λ (−ln(1−ε))^{1/k}`; `ε` is a constant.
pub fn sample_weibull(tape: &mut Tape, k: Var, lambda: Var, eps: &Tensor, layer: usize) -> Result<Var, ModelError> {
    if let Some(index) = eps.data().iter().position(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(ModelError::NoiseOutOfRange {
            layer,
            index,
            value: eps.data()[index],
        });
    }
    let log_u = tape.constant(eps.map(|e| (-(-e).ln_1p()).ln()));
    let exponent = tape.div(log_u, k)?;
    let power = tape.exp(exponent);
    Ok(tape.mul(lambda, power)?)
}

/// Weibull mean `λ Γ(1 + 1/k)`.
pub fn weibull_mean(tape: &mut Tape, k: Var, lambda: Var) -> Result<Var, ModelError> {
    let inv = tape.pow(k, -1.0)?;
    let arg = tape.add_scalar(inv, 1.0);
    let lg = tape.lgamma(arg)?;
    let g = tape.exp(lg);
    Ok(tape.mul(lambda, g)?)
}

/// Uniform noise for every layer, `K_l x batch`, kept inside the open interval.
pub fn draw_noise(rng: &mut impl Rng, widths: &[usize], batch: usize) -> Vec<Tensor> {
    widths
        .iter()
        .map(|&k| Tensor::from_fn(k, batch, |_, _| rng.random::<f64>().clamp(NOISE_EPS, 1.0 - NOISE_EPS)))
        .collect()
}

/// How θ is produced from the Weibull parameters.
#[derive(Debug, Clone)]
pub enum Noise {
    /// Reparameterized sample; one `K_l x B` tensor per layer, bottom first.
    Sample(Vec<Tensor>),
    /// Posterior mean at each layer, used for deterministic representations.
    Mean,
}

#[derive(Debug, Clone)]
pub struct WeibullPosterior {
    /// Per layer, bottom first.
    pub shape: Vec<Var>,
    pub scale: Vec<Var>,
    pub theta: Vec<Var>,
    /// Prior gamma shape used for each layer's KL: `Φ⁽ˡ⁺¹⁾θ⁽ˡ⁺¹⁾`, or `r` broadcast.
    pub prior_shape: Vec<Var>,
    pub noise: Option<Vec<Tensor>>,
}

/// Upward pass followed by top-down sampling `θ⁽ᴸ⁾, .., θ⁽¹⁾`.
pub fn infer(
    tape: &mut Tape,
    layout: &Layout,
    vars: &[Var],
    phis: &[Var],
    x: &SparseColumns,
    noise: &Noise,
) -> Result<WeibullPosterior, ModelError> {
    let depth = layout.encoder.layers.len();
    let batch = x.cols.len();
    if phis.len() != depth {
        return Err(ModelError::Config(format!("{} topic matrices for {depth} layers", phis.len())));
    }
    if let Noise::Sample(eps) = noise {
        if eps.len() != depth {
            return Err(ModelError::Config(format!("noise for {} layers, model has {depth}", eps.len())));
        }
    }
    let up = upward_pass(tape, &layout.encoder, vars, x)?;

    let mut shape = vec![None; depth];
    let mut scale = vec![None; depth];
    let mut theta: Vec<Option<Var>> = vec![None; depth];
    let mut prior_shape = vec![None; depth];
    let r = top_prior(tape, layout, vars);
    for i in (0..depth).rev() {
        let prior = match theta.get(i + 1) {
            Some(Some(above)) => tape.matmul(phis[i + 1], *above)?,
            _ => tape.broadcast_col(r, batch)?,
        };
        let (k, lambda) = downward_step(
            tape,
            &layout.encoder.layers[i],
            vars,
            prior,
            up.shape_heads[i],
            up.scale_heads[i],
        )?;
        let t = match noise {
            Noise::Sample(eps) => {
                let want = tape.value(k).shape();
                if eps[i].shape() != want {
                    return Err(ModelError::Config(format!(
                        "noise for layer {} has shape {:?}, expected {want:?}",
                        i + 1,
                        eps[i].shape()
                    )));
                }
                sample_weibull(tape, k, lambda, &eps[i], i + 1)?
            }
            Noise::Mean => weibull_mean(tape, k, lambda)?,
        };
        if let Some((index, &value)) = tape
            .value(t)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(ModelError::BadTheta {
                layer: i + 1,
                index,
                value,
            });
        }
        shape[i] = Some(k);
        scale[i] = Some(lambda);
        theta[i] = Some(t);
        prior_shape[i] = Some(prior);
    }
    let unwrap = |v: Vec<Option<Var>>| v.into_iter().map(|x| x.expect("every layer visited")).collect();
    Ok(WeibullPosterior {
        shape: unwrap(shape),
        scale: unwrap(scale),
        theta: unwrap(theta),
        prior_shape: unwrap(prior_shape),
        noise: match noise {
            Noise::Sample(eps) => Some(eps.clone()),
            Noise::Mean => None,
        },
    })
}
