//! Model configuration and the named parameter set shared by the decoder,
//! encoder and trainer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, TapeError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("layer {layer} out of range 1..={depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("negative count {value} at index {index}")]
    NegativeCount { index: usize, value: f64 },
    #[error("uniform noise at index {index} of layer {layer} is {value}, outside (0, 1)")]
    NoiseOutOfRange { layer: usize, index: usize, value: f64 },
    #[error("non-finite or non-positive theta at layer {layer}, index {index}: {value}")]
    BadTheta { layer: usize, index: usize, value: f64 },
    #[error("parameter mismatch: {0}")]
    Parameters(String),
}

/// Which factorization produces the topic matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Adjacent layers share an embedding matrix: `softmax(α⁽ˡ⁻¹⁾ᵀ α⁽ˡ⁾)`.
    Sawetm,
    /// Per-layer unshared embedding pairs: `softmax(α⁽ˡ⁾ᵀ β⁽ˡ⁾)`.
    Detm,
    /// Free logits: `softmax(W⁽ˡ⁾)`.
    Dntm,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sawetm => "sawetm",
            Self::Detm => "detm",
            Self::Dntm => "dntm",
        }
    }
}

impl std::str::FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sawetm" | "sawtooth" => Ok(Self::Sawetm),
            "detm" => Ok(Self::Detm),
            "dntm" => Ok(Self::Dntm),
            other => Err(format!("unknown variant {other:?} (expected sawetm, detm or dntm)")),
        }
    }
}

/// Transformation applied to counts before the encoder's input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputTransform {
    #[default]
    Raw,
    Log1p,
}

impl InputTransform {
    pub fn apply(self, count: f64) -> f64 {
        match self {
            Self::Raw => count,
            Self::Log1p => count.ln_1p(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Topic counts per layer, bottom (layer 1) first.
    pub layer_widths: Vec<usize>,
    pub embed_dim: usize,
    pub hidden: usize,
    pub variant: DecoderKind,
    pub input_transform: InputTransform,
    /// Gamma rate `c` shared by every layer's prior.
    pub prior_rate: f64,
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.layer_widths.len()
    }

    /// `K_l` with `K_0 = V`.
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            self.vocab_size
        } else {
            self.layer_widths[l - 1]
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.vocab_size == 0 {
            problems.push("vocab_size must be positive".to_string());
        }
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            problems.push("layer_widths must be a nonempty list of positive integers".to_string());
        }
        if self.embed_dim == 0 {
            problems.push("embed_dim must be positive".to_string());
        }
        if self.hidden == 0 {
            problems.push("hidden must be positive".to_string());
        }
        if !(self.prior_rate > 0.0 && self.prior_rate.is_finite()) {
            problems.push("prior_rate must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderLayout {
    /// `alpha[l]` is `D x K_l`, `l = 0..=L`.
    Sawtooth { alpha: Vec<usize> },
    /// Per layer `l = 1..=L`: `alpha[l-1]` is `D x K_{l-1}`, `beta[l-1]` is `D x K_l`.
    Unshared { alpha: Vec<usize>, beta: Vec<usize> },
    /// `w[l-1]` is `K_{l-1} x K_l`.
    Direct { w: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub mlp_w1: usize,
    pub mlp_b1: usize,
    pub mlp_w2: usize,
    pub mlp_b2: usize,
    pub shape_w: usize,
    pub shape_b: usize,
    pub scale_w: usize,
    pub scale_b: usize,
    pub combine_shape_w: usize,
    pub combine_shape_b: usize,
    pub combine_scale_w: usize,
    pub combine_scale_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    pub input_w: usize,
    pub input_b: usize,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub decoder: DecoderLayout,
    pub encoder: EncoderLayout,
    /// Unconstrained top-layer shape; `r = softplus(raw)`.
    pub prior_r: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Uniform(f64),
    Const(f64),
}

pub const EMBEDDING_INIT_STD: f64 = 0.02;
/// Fraction of the usual ±1/√fan_in bound used for the combine weights.
pub const COMBINE_INIT_SCALE: f64 = 0.01;

struct Spec {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    /// Affine map `out x inp` plus bias, uniform in ±1/√inp.
    fn affine(&mut self, prefix: &str, out: usize, inp: usize) -> (usize, usize) {
        let bound = 1.0 / (inp as f64).sqrt();
        let w = self.add(format!("{prefix}.weight"), out, inp, Init::Uniform(bound));
        let b = self.add(format!("{prefix}.bias"), out, 1, Init::Uniform(bound));
        (w, b)
    }

    /// Affine map over `prior ⊕ head` with weights shrunk by
    /// [`COMBINE_INIT_SCALE`], so initial shapes and scales sit near
    /// `softplus(bias)` rather than at the shape clamp.
    fn combine(&mut self, prefix: &str, k: usize) -> (usize, usize) {
        let bound = 1.0 / ((2 * k) as f64).sqrt();
        let w = self.add(format!("{prefix}.weight"), k, 2 * k, Init::Uniform(COMBINE_INIT_SCALE * bound));
        let b = self.add(format!("{prefix}.bias"), k, 1, Init::Uniform(bound));
        (w, b)
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Spec) {
    let mut spec = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let depth = cfg.depth();
    let d = cfg.embed_dim;
    let emb = Init::Normal(EMBEDDING_INIT_STD);

    let decoder = match cfg.variant {
        DecoderKind::Sawetm => DecoderLayout::Sawtooth {
            alpha: (0..=depth)
                .map(|l| spec.add(format!("decoder.alpha.{l}"), d, cfg.width(l), emb))
                .collect(),
        },
        DecoderKind::Detm => {
            let mut alpha = Vec::new();
            let mut beta = Vec::new();
            for l in 1..=depth {
                alpha.push(spec.add(format!("decoder.alpha.{l}"), d, cfg.width(l - 1), emb));
                beta.push(spec.add(format!("decoder.beta.{l}"), d, cfg.width(l), emb));
            }
            DecoderLayout::Unshared { alpha, beta }
        }
        DecoderKind::Dntm => DecoderLayout::Direct {
            w: (1..=depth)
                .map(|l| spec.add(format!("decoder.w.{l}"), cfg.width(l - 1), cfg.width(l), emb))
                .collect(),
        },
    };

    let h = cfg.hidden;
    let (input_w, input_b) = spec.affine("encoder.input", h, cfg.vocab_size);
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let k = cfg.width(l);
        let (mlp_w1, mlp_b1) = spec.affine(&format!("encoder.{l}.mlp1"), h, h);
        let (mlp_w2, mlp_b2) = spec.affine(&format!("encoder.{l}.mlp2"), h, h);
        let (shape_w, shape_b) = spec.affine(&format!("encoder.{l}.shape_head"), k, h);
        let (scale_w, scale_b) = spec.affine(&format!("encoder.{l}.scale_head"), k, h);
        let (combine_shape_w, combine_shape_b) = spec.combine(&format!("encoder.{l}.combine_shape"), k);
        let (combine_scale_w, combine_scale_b) = spec.combine(&format!("encoder.{l}.combine_scale"), k);
        layers.push(EncoderLayer {
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            shape_w,
            shape_b,
            scale_w,
            scale_b,
            combine_shape_w,
            combine_shape_b,
            combine_scale_w,
            combine_scale_b,
        });
    }
    // softplus(ln(e - 1)) = 1
    let r_init = (std::f64::consts::E - 1.0).ln();
    let prior_r = spec.add("prior.r_raw".into(), cfg.width(depth), 1, Init::Const(r_init));

    (
        Layout {
            decoder,
            encoder: EncoderLayout {
                input_w,
                input_b,
                layers,
            },
            prior_r,
        },
        spec,
    )
}

/// Parameters plus the layout that gives each tensor its role.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl Model {
    /// Fresh parameters: embeddings `N(0, 0.02²)`, affine maps uniform in
    /// ±1/√fan_in (combine weights scaled down), top prior shape 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(&(r, c), &init)| match init {
                Init::Normal(std) => Tensor::from_fn(r, c, |_, _| std * standard_normal(&mut rng)),
                Init::Uniform(b) => Tensor::from_fn(r, c, |_, _| rng.random_range(-b..b)),
                Init::Const(v) => Tensor::full(r, c, v),
            })
            .collect();
        Ok(Self {
            config,
            layout,
            names: spec.names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, spec) = build_layout(&config);
        if named.len() != spec.names.len() {
            return Err(ModelError::Parameters(format!(
                "expected {} tensors, found {}",
                spec.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(spec.names.iter().zip(&spec.shapes)) {
            if &name != want || t.shape() != *shape {
                return Err(ModelError::Parameters(format!(
                    "expected {want} {shape:?}, found {name} {:?}",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            layout,
            names: spec.names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Topic matrices `Φ⁽¹⁾..Φ⁽ᴸ⁾` as plain tensors.
    pub fn phi_values(&self) -> Result<Vec<Tensor>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape);
        let phis = crate::decoder::phi_stack(&mut tape, &self.layout.decoder, &vars)?;
        Ok(phis.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Top-layer gamma shape `r`.
    pub fn top_prior_values(&self) -> Vec<f64> {
        self.params[self.layout.prior_r]
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() })
            .collect()
    }
}

/// Box–Muller standard normal draw.
pub(crate) fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `r = softplus(raw)` as a `K_L x 1` tape node.
pub fn top_prior(tape: &mut Tape, layout: &Layout, vars: &[Var]) -> Var {
    tape.softplus(vars[layout.prior_r])
}
