//! Perplexity, topic quality and clustering metrics for a trained model.

mod cluster;
mod coherence;
mod perplexity;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{HeldoutSplit, SparseCorpus, Vocabulary};
use crate::decoder::{project_topics, top_word_ids};
use crate::encoder::Noise;
use crate::model::{Model, ModelError};
use crate::tape::Tensor;
use crate::trainer::Batch;

pub use cluster::{clustering_accuracy, kmeans, max_weight_assignment, nmi, KMeans};
pub use coherence::{npmi_coherence, topic_diversity, CoherenceReport, CooccurrenceIndex};
pub use perplexity::{heldout_perplexity, perplexity_from_rates, posterior_rates, PerplexityAccumulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior draws per document for perplexity.
    pub samples: usize,
    pub top_n: usize,
    /// Probability used in place of a zero joint document frequency;
    /// `None` means one over the number of reference documents.
    pub coherence_epsilon: Option<f64>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Scale each document representation to sum to one before k-means.
    pub normalize_representation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: 8,
            top_n: 20,
            coherence_epsilon: None,
            kmeans_restarts: 10,
            kmeans_max_iter: 300,
            seed: 0,
            batch_size: 200,
            normalize_representation: true,
        }
    }
}

impl EvalConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, v) in [
            ("samples", self.samples),
            ("top_n", self.top_n),
            ("kmeans_restarts", self.kmeans_restarts),
            ("kmeans_max_iter", self.kmeans_max_iter),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                p.push(format!("{name} must be positive"));
            }
        }
        if let Some(e) = self.coherence_epsilon {
            if !(e > 0.0 && e < 1.0) {
                p.push(format!("coherence_epsilon must lie in (0, 1), got {e}"));
            }
        }
        p
    }
}

/// Which metric groups to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ppl,
    Quality,
    Cluster,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "ppl" | "perplexity" => Ok(Metric::Ppl),
            "quality" => Ok(Metric::Quality),
            "cluster" | "clustering" => Ok(Metric::Cluster),
            other => Err(format!("unknown metric {other:?} (expected ppl, quality or cluster)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuality {
    pub layer: usize,
    pub coherence: f64,
    pub diversity: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCoherence {
    pub layer: usize,
    pub topic_id: usize,
    pub npmi: Option<f64>,
    pub top_words: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quality: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_layer: Option<Vec<LayerQuality>>,
}

/// Top-`n` word ids of every topic at every layer.
pub fn layer_topic_words(model: &Model, top_n: usize) -> Result<Vec<Vec<Vec<usize>>>, ModelError> {
    let phis = model.phi_values()?;
    (1..=phis.len())
        .map(|l| Ok(top_word_ids(&project_topics(&phis, l)?, top_n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityResult {
    pub coherence: f64,
    pub diversity: f64,
    pub quality: f64,
    pub per_layer: Vec<LayerQuality>,
    pub per_topic: Vec<TopicCoherence>,
}

/// NPMI coherence and diversity of the projected topics of every layer.
/// Headline coherence and diversity are means over layers; quality is
/// their product.
pub fn topic_quality(model: &Model, reference: &SparseCorpus, config: &EvalConfig) -> Result<QualityResult, ModelError> {
    let mut index = CooccurrenceIndex::new(reference);
    if let Some(e) = config.coherence_epsilon {
        index = index.with_epsilon(e);
    }
    let words = layer_topic_words(model, config.top_n)?;
    let mut per_layer = Vec::with_capacity(words.len());
    let mut per_topic = Vec::new();
    for (i, topics) in words.iter().enumerate() {
        let c = npmi_coherence(topics, &index);
        let d = topic_diversity(topics);
        per_layer.push(LayerQuality {
            layer: i + 1,
            coherence: c.mean,
            diversity: d,
            quality: c.mean * d,
        });
        for (k, (npmi, top)) in c.per_topic.iter().zip(topics).enumerate() {
            per_topic.push(TopicCoherence {
                layer: i + 1,
                topic_id: k,
                npmi: *npmi,
                top_words: top.clone(),
            });
        }
    }
    let n = per_layer.len() as f64;
    let coherence = per_layer.iter().map(|l| l.coherence).sum::<f64>() / n;
    let diversity = per_layer.iter().map(|l| l.diversity).sum::<f64>() / n;
    Ok(QualityResult {
        coherence,
        diversity,
        quality: coherence * diversity,
        per_layer,
        per_topic,
    })
}

/// Layer-1 posterior mean `λΓ(1 + 1/k)` of every document, `K_1 x N`.
pub fn document_representation(model: &Model, corpus: &SparseCorpus, batch_size: usize) -> Result<Tensor, ModelError> {
    let k = model.config.layer_widths[0];
    let mut out = Tensor::zeros(k, corpus.len());
    let ids: Vec<usize> = (0..corpus.len()).collect();
    for chunk in ids.chunks(batch_size.max(1)) {
        let batch = Batch::new(corpus, chunk, model.config.input_transform);
        let theta = perplexity::theta_one(model, &batch, &Noise::Mean)?;
        for (j, &d) in chunk.iter().enumerate() {
            for r in 0..k {
                out.set(r, d, theta.get(r, j));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub ac: f64,
    pub nmi: f64,
}

/// k-means on layer-1 representations with as many clusters as classes.
pub fn cluster_documents(
    model: &Model,
    corpus: &SparseCorpus,
    labels: &[usize],
    config: &EvalConfig,
) -> Result<ClusterResult, ModelError> {
    let theta = document_representation(model, corpus, config.batch_size)?;
    let points: Vec<Vec<f64>> = (0..theta.cols())
        .map(|d| {
            let col = theta.column(d);
            if config.normalize_representation {
                let s: f64 = col.iter().sum();
                col.iter().map(|x| x / s).collect()
            } else {
                col
            }
        })
        .collect();
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len().min(points.len()).max(1);
    let km = kmeans(&points, k, config.kmeans_restarts, config.kmeans_max_iter, config.seed);
    Ok(ClusterResult {
        ac: clustering_accuracy(&km.labels, labels),
        nmi: nmi(&km.labels, labels),
        labels: km.labels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_topic: Vec<TopicCoherence>,
}

/// Computes the requested metric groups. Topic quality uses the training
/// half of the split as its reference corpus; clustering needs labels and
/// is skipped with a warning otherwise.
pub fn evaluate(model: &Model, split: &HeldoutSplit, metrics: &[Metric], config: &EvalConfig) -> Result<Evaluation, ModelError> {
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(ModelError::Config(problems.join("; ")));
    }
    let mut report = MetricsReport::default();
    let mut per_topic = Vec::new();
    if metrics.contains(&Metric::Ppl) {
        report.perplexity = Some(heldout_perplexity(model, split, config.samples, config.seed, config.batch_size)?);
    }
    if metrics.contains(&Metric::Quality) {
        let q = topic_quality(model, &split.train, config)?;
        report.coherence = Some(q.coherence);
        report.diversity = Some(q.diversity);
        report.quality = Some(q.quality);
        report.per_layer = Some(q.per_layer);
        per_topic = q.per_topic;
    }
    if metrics.contains(&Metric::Cluster) {
        match &split.train.labels {
            Some(labels) => {
                let c = cluster_documents(model, &split.train, labels, config)?;
                report.ac = Some(c.ac);
                report.nmi = Some(c.nmi);
            }
            None => log::warn!("corpus has no labels; skipping clustering"),
        }
    }
    Ok(Evaluation { report, per_topic })
}

/// Per-topic NPMI as CSV with columns topic_id, layer, npmi, top_words.
pub fn write_topic_csv(path: &Path, rows: &[TopicCoherence], vocab: &Vocabulary) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["topic_id", "layer", "npmi", "top_words"])?;
    for r in rows {
        let words: Vec<&str> = r.top_words.iter().map(|&i| vocab.term(i)).collect();
        w.write_record([
            r.topic_id.to_string(),
            r.layer.to_string(),
            r.npmi.map_or(String::new(), |v| v.to_string()),
            words.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(())
}
