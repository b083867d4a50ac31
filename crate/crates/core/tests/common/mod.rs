//! Synthetic corpora and numerical oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use sawtopics::corpus::{SparseCorpus, SparseDoc};

fn gamma_simplex(rng: &mut ChaCha8Rng, concentration: f64, n: usize) -> Vec<f64> {
    let g = Gamma::new(concentration, 1.0).unwrap();
    let mut v: Vec<f64> = (0..n).map(|_| g.sample(rng).max(1e-300)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn sparse_from_rates(rng: &mut ChaCha8Rng, rates: &[f64]) -> SparseDoc {
    rates
        .iter()
        .enumerate()
        .filter_map(|(w, &r)| {
            if r <= 0.0 {
                return None;
            }
            let c = Poisson::new(r).unwrap().sample(rng) as u32;
            (c > 0).then_some((w, c))
        })
        .collect()
}

/// Draws `n` words from a categorical distribution into a sparse document.
fn multinomial(rng: &mut ChaCha8Rng, probs: &[f64], n: usize) -> SparseDoc {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p;
        cdf.push(acc);
    }
    let mut counts = vec![0u32; probs.len()];
    for _ in 0..n {
        let u = rng.random::<f64>() * acc;
        let w = cdf.partition_point(|&c| c < u).min(probs.len() - 1);
        counts[w] += 1;
    }
    counts.into_iter().enumerate().filter(|&(_, c)| c > 0).collect()
}

/// A corpus drawn from a known single-layer Poisson factor model.
pub struct OneLayer {
    pub corpus: SparseCorpus,
    /// `phi[k][w]`.
    pub phi: Vec<Vec<f64>>,
    /// `theta[d][k]`.
    pub theta: Vec<Vec<f64>>,
}

impl OneLayer {
    /// True per-document rates `Φθ_d`.
    pub fn rates(&self, d: usize) -> Vec<f64> {
        let v = self.corpus.vocab_size;
        (0..v)
            .map(|w| self.phi.iter().zip(&self.theta[d]).map(|(p, t)| p[w] * t).sum())
            .collect()
    }
}

/// `docs` documents over `v` words from `k` sparse topics, with gamma
/// distributed topic weights.
pub fn one_layer(v: usize, k: usize, docs: usize, seed: u64) -> OneLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi: Vec<Vec<f64>> = (0..k).map(|_| gamma_simplex(&mut rng, 0.3, v)).collect();
    let weights = Gamma::new(0.6, 40.0).unwrap();
    let mut out_docs = Vec::with_capacity(docs);
    let mut theta = Vec::with_capacity(docs);
    while out_docs.len() < docs {
        let t: Vec<f64> = (0..k).map(|_| weights.sample(&mut rng)).collect();
        let rates: Vec<f64> = (0..v).map(|w| (0..k).map(|j| phi[j][w] * t[j]).sum()).collect();
        let doc = sparse_from_rates(&mut rng, &rates);
        if doc.iter().map(|&(_, c)| c).sum::<u32>() >= 2 {
            out_docs.push(doc);
            theta.push(t);
        }
    }
    OneLayer {
        corpus: SparseCorpus::new(out_docs, None, v).unwrap(),
        phi,
        theta,
    }
}

/// Three classes over disjoint blocks of `block` words each.
pub fn disjoint_classes(per_class: usize, block: usize, doc_len: usize, seed: u64) -> SparseCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = 3 * block;
    let mut docs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..3 * per_class {
        let class = i % 3;
        let local = gamma_simplex(&mut rng, 1.0, block);
        let mut probs = vec![0.0; v];
        probs[class * block..(class + 1) * block].copy_from_slice(&local);
        docs.push(multinomial(&mut rng, &probs, doc_len));
        labels.push(class);
    }
    SparseCorpus::new(docs, Some(labels), v).unwrap()
}

/// A 20-class corpus with a three-level topic hierarchy: 4 groups of 5
/// classes, each class built from 3 subtopics, plus group-level and
/// corpus-wide background topics. 2000 words, Zipf-like within topics.
pub fn hierarchical_twenty(docs: usize, seed: u64) -> SparseCorpus {
    const V: usize = 2000;
    const GROUPS: usize = 4;
    const CLASSES: usize = 20;
    const SUB: usize = 3;
    const SUB_WORDS: usize = 20;
    const GROUP_WORDS: usize = 150;
    let class_words = CLASSES * SUB * SUB_WORDS;
    let general_start = class_words + GROUPS * GROUP_WORDS;
    let general_words = V - general_start;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let zipf = |start: usize, len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut p = vec![0.0; V];
        let mut order: Vec<usize> = (0..len).collect();
        for i in (1..len).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let norm: f64 = (1..=len).map(|r| 1.0 / r as f64).sum();
        for (rank, &j) in order.iter().enumerate() {
            p[start + j] = 1.0 / ((rank + 1) as f64 * norm);
        }
        p
    };
    // subtopics may borrow a few words from sibling classes of the group
    let mut subtopics = Vec::new();
    for c in 0..CLASSES {
        for s in 0..SUB {
            let mut p = zipf((c * SUB + s) * SUB_WORDS, SUB_WORDS, &mut rng);
            let sibling = (c / 5) * 5 + (c + 1 + s) % 5;
            let q = zipf(sibling * SUB * SUB_WORDS, SUB * SUB_WORDS, &mut rng);
            for w in 0..V {
                p[w] = 0.85 * p[w] + 0.15 * q[w];
            }
            subtopics.push(p);
        }
    }
    let groups: Vec<Vec<f64>> = (0..GROUPS)
        .map(|g| zipf(class_words + g * GROUP_WORDS, GROUP_WORDS, &mut rng))
        .collect();
    let general = zipf(general_start, general_words, &mut rng);

    let length = Gamma::new(4.0, 30.0).unwrap();
    let mut out = Vec::with_capacity(docs);
    let mut labels = Vec::with_capacity(docs);
    for i in 0..docs {
        let c = i % CLASSES;
        let g = c / 5;
        let mix = gamma_simplex(&mut rng, 0.5, SUB);
        let parts = gamma_simplex(&mut rng, 4.0, 3);
        let mut probs = vec![0.0; V];
        for w in 0..V {
            let class_part: f64 = (0..SUB).map(|s| mix[s] * subtopics[c * SUB + s][w]).sum();
            probs[w] = (0.3 + 0.4 * parts[0]) * class_part + 0.3 * parts[1] * groups[g][w] + 0.3 * parts[2] * general[w];
        }
        let n = (length.sample(&mut rng) as usize).max(10);
        out.push(multinomial(&mut rng, &probs, n));
        labels.push(c);
    }
    SparseCorpus::new(out, Some(labels), V).unwrap()
}

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// Gauss–Kronrod 7/15 estimate and error bound on `[a, b]`.
fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * GK_WEIGHTS[7];
    let mut gauss = fc * GAUSS_WEIGHTS[3];
    for i in 0..7 {
        let x = h * GK_NODES[i];
        let s = f(c - x) + f(c + x);
        kronrod += GK_WEIGHTS[i] * s;
        if i % 2 == 1 {
            gauss += GAUSS_WEIGHTS[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss–Kronrod quadrature with Neumaier-compensated summation
/// of the accepted panels.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let mut stack = vec![(a, b, tol, 0u32)];
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    while let Some((lo, hi, t, depth)) = stack.pop() {
        let (est, err) = gk15(&f, lo, hi);
        if err <= t || depth >= 50 || hi - lo < 1e-15 {
            let s = sum + est;
            comp += if sum.abs() >= est.abs() { (sum - s) + est } else { (est - s) + sum };
            sum = s;
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, 0.5 * t, depth + 1));
            stack.push((mid, hi, 0.5 * t, depth + 1));
        }
    }
    sum + comp
}

/// `KL(Weibull(k, λ) ‖ Gamma(α, β))` by quadrature of `∫ q ln(q/p)`, in the
/// variable `u = (x/λ)^k` which is standard exponential under `q`.
pub fn kl_by_quadrature(k: f64, lambda: f64, alpha: f64, beta: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let log_p_const = alpha * beta.ln() - ln_gamma(alpha);
    let integrand = |u: f64| {
        if u <= 0.0 {
            return 0.0;
        }
        let ln_u = u.ln();
        let ln_x = lambda.ln() + ln_u / k;
        let x = ln_x.exp();
        let ln_q = k.ln() - lambda.ln() + (k - 1.0) / k * ln_u - u;
        let ln_p = log_p_const + (alpha - 1.0) * ln_x - beta * x;
        (-u).exp() * (ln_q - ln_p)
    };
    let mut total = 0.0;
    // split where the log singularity and the bulk of the mass sit
    let cuts = [0.0, 1e-8, 1e-4, 0.01, 0.1, 1.0, 5.0, 20.0, 60.0, 200.0];
    for w in cuts.windows(2) {
        total += integrate(integrand, w[0], w[1], 1e-13);
    }
    total
}
