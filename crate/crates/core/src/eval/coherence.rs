//! NPMI coherence and topic diversity over top-word lists.

use std::collections::HashSet;

use crate::corpus::SparseCorpus;

/// Per-word sorted document lists of a reference corpus.
#[derive(Debug, Clone)]
pub struct CooccurrenceIndex {
    docs_with: Vec<Vec<u32>>,
    num_docs: usize,
    zero_joint: f64,
}

impl CooccurrenceIndex {
    pub fn new(reference: &SparseCorpus) -> Self {
        let mut docs_with = vec![Vec::new(); reference.vocab_size];
        for (d, doc) in reference.docs.iter().enumerate() {
            for &(w, c) in doc {
                if c > 0 {
                    docs_with[w].push(d as u32);
                }
            }
        }
        for list in &mut docs_with {
            list.dedup();
        }
        CooccurrenceIndex {
            docs_with,
            num_docs: reference.len(),
            zero_joint: 1.0 / reference.len().max(1) as f64,
        }
    }

    /// Replaces the default `1/N` used for pairs that never co-occur.
    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.zero_joint = eps;
        self
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn doc_count(&self, w: usize) -> usize {
        self.docs_with.get(w).map_or(0, Vec::len)
    }

    pub fn joint_count(&self, a: usize, b: usize) -> usize {
        let (x, y) = (&self.docs_with[a], &self.docs_with[b]);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    /// NPMI of two words present in the reference. A zero joint probability
    /// is replaced by the epsilon (`1/N` by default); a pair present in every
    /// document scores 1.
    pub fn npmi(&self, a: usize, b: usize) -> f64 {
        let n = self.num_docs as f64;
        let pa = self.doc_count(a) as f64 / n;
        let pb = self.doc_count(b) as f64 / n;
        let joint = self.joint_count(a, b);
        let pab = if joint == 0 { self.zero_joint } else { joint as f64 / n };
        if pab >= 1.0 {
            return 1.0;
        }
        ((pab / (pa * pb)).ln() / -pab.ln()).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceReport {
    /// Mean over topics that had at least one scorable pair.
    pub mean: f64,
    /// Per-topic mean NPMI; `None` when every pair involved an absent word.
    pub per_topic: Vec<Option<f64>>,
    pub skipped_pairs: usize,
    pub absent_words: usize,
}

/// Average NPMI over unordered pairs of each topic's words, then over topics.
/// Pairs with a word absent from the reference are skipped and counted.
pub fn npmi_coherence(topics: &[Vec<usize>], index: &CooccurrenceIndex) -> CoherenceReport {
    let mut per_topic = Vec::with_capacity(topics.len());
    let mut skipped = 0;
    let mut absent: HashSet<usize> = HashSet::new();
    for words in topics {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, &a) in words.iter().enumerate() {
            for &b in &words[i + 1..] {
                let missing: Vec<usize> = [a, b].into_iter().filter(|&w| index.doc_count(w) == 0).collect();
                if missing.is_empty() {
                    sum += index.npmi(a, b);
                    count += 1;
                } else {
                    skipped += 1;
                    absent.extend(missing);
                }
            }
        }
        per_topic.push((count > 0).then(|| sum / count as f64));
    }
    let scored: Vec<f64> = per_topic.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    if skipped > 0 {
        log::warn!(
            "{} word pairs skipped: {} top words never occur in the reference corpus",
            skipped,
            absent.len()
        );
    }
    CoherenceReport {
        mean,
        per_topic,
        skipped_pairs: skipped,
        absent_words: absent.len(),
    }
}

/// Distinct words across all lists divided by the total list length.
pub fn topic_diversity(topics: &[Vec<usize>]) -> f64 {
    let total: usize = topics.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let unique: HashSet<usize> = topics.iter().flatten().copied().collect();
    unique.len() as f64 / total as f64
}
