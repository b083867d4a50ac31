//! Text ingestion: tokenization, vocabulary construction, sparse bag-of-words
//! corpora, the per-token heldout split, and the on-disk corpus format.
//!
//! On disk a prepared corpus is a directory holding `vocab.txt` (one term per
//! line, line number = word id), `corpus.triplets` (`doc_id word_id count`
//! per line), an optional `labels.txt` (one integer per line) and
//! `manifest.json` with keys `num_docs`, `vocab_size`, `has_labels`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

static STOPWORDS: &str = include_str!("stopwords.txt");

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRIPLETS_FILE: &str = "corpus.triplets";
pub const LABELS_FILE: &str = "labels.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no documents")]
    NoDocuments,
    #[error("vocabulary empty")]
    EmptyVocabulary,
    #[error("no nonempty documents")]
    NoNonemptyDocuments,
    #[error("heldout fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("min_count must be at least 1")]
    InvalidMinCount,
    #[error("{0} labels for {1} documents")]
    LabelCount(usize, usize),
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn stopwords() -> HashSet<&'static str> {
    STOPWORDS.lines().map(str::trim).filter(|w| !w.is_empty()).collect()
}

/// Lowercases, splits on runs of non-alphanumeric characters, and drops
/// pure-digit tokens and stopwords.
pub fn tokenize(text: &str, stop: &HashSet<&str>) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !t.chars().all(|c| c.is_ascii_digit()))
        .filter(|t| !stop.contains(t.as_str()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    /// Corpus frequency of each term in the documents it was built from.
    counts: Vec<u64>,
    /// Number of documents containing each term.
    doc_freq: Vec<u64>,
    total_docs: usize,
}

impl Vocabulary {
    /// Vocabulary from an ordered term list, without frequency statistics.
    pub fn from_terms(terms: Vec<String>) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let n = terms.len();
        Self {
            terms,
            index,
            counts: vec![0; n],
            doc_freq: vec![0; n],
            total_docs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn term(&self, id: usize) -> &str {
        &self.terms[id]
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn doc_freq(&self) -> &[u64] {
        &self.doc_freq
    }

    pub fn total_docs(&self) -> usize {
        self.total_docs
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let terms: Vec<String> = text.lines().map(str::to_owned).collect();
        let mut seen = HashSet::new();
        for (i, t) in terms.iter().enumerate() {
            if t.is_empty() || !seen.insert(t.as_str()) {
                return Err(CorpusError::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: format!("empty or duplicate term {t:?}"),
                });
            }
        }
        Ok(Self::from_terms(terms))
    }
}

/// Keeps words with corpus frequency `>= min_count`; if more than
/// `max_vocab` survive, keeps the most frequent. Ids are assigned by
/// descending frequency with ties broken lexicographically.
pub fn build_vocabulary<S: AsRef<str>>(
    raw_docs: &[Vec<S>],
    min_count: u64,
    max_vocab: usize,
) -> Result<Vocabulary, CorpusError> {
    if raw_docs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    if min_count == 0 {
        return Err(CorpusError::InvalidMinCount);
    }
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for doc in raw_docs {
        let mut seen = HashSet::new();
        for tok in doc {
            let tok = tok.as_ref();
            let entry = counts.entry(tok).or_default();
            entry.0 += 1;
            if seen.insert(tok) {
                entry.1 += 1;
            }
        }
    }
    let mut kept: Vec<(&str, u64, u64)> = counts
        .into_iter()
        .filter(|(_, (c, _))| *c >= min_count)
        .map(|(t, (c, d))| (t, c, d))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    kept.truncate(max_vocab);
    if kept.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut vocab = Vocabulary::from_terms(kept.iter().map(|(t, _, _)| t.to_string()).collect());
    vocab.counts = kept.iter().map(|k| k.1).collect();
    vocab.doc_freq = kept.iter().map(|k| k.2).collect();
    vocab.total_docs = raw_docs.len();
    Ok(vocab)
}

/// Sparse `(word_id, count)` list sorted by word id; counts are positive.
pub type SparseDoc = Vec<(usize, u32)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseCorpus {
    pub docs: Vec<SparseDoc>,
    pub labels: Option<Vec<usize>>,
    pub vocab_size: usize,
}

impl SparseCorpus {
    pub fn new(docs: Vec<SparseDoc>, labels: Option<Vec<usize>>, vocab_size: usize) -> Result<Self, CorpusError> {
        if let Some(l) = &labels {
            if l.len() != docs.len() {
                return Err(CorpusError::LabelCount(l.len(), docs.len()));
            }
        }
        for (d, doc) in docs.iter().enumerate() {
            for &(w, c) in doc {
                if w >= vocab_size || c == 0 {
                    return Err(CorpusError::Parse {
                        file: "<memory>".into(),
                        line: d,
                        message: format!("entry ({w}, {c}) invalid for vocabulary of {vocab_size}"),
                    });
                }
            }
        }
        Ok(Self {
            docs,
            labels,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_tokens(&self, d: usize) -> u64 {
        self.docs[d].iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        (0..self.len()).map(|d| self.doc_tokens(d)).sum()
    }

    /// Dense `vocab_size` count vector of document `d`.
    pub fn dense_doc(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab_size];
        for &(w, c) in &self.docs[d] {
            out[w] = c as f64;
        }
        out
    }

    /// Subset of documents, labels carried along.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            docs: indices.iter().map(|&i| self.docs[i].clone()).collect(),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            vocab_size: self.vocab_size,
        }
    }

    pub fn write(&self, dir: &Path, vocab: &Vocabulary) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        vocab.write(&dir.join(VOCAB_FILE))?;

        let path = dir.join(TRIPLETS_FILE);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        for (d, doc) in self.docs.iter().enumerate() {
            for &(word, count) in doc {
                writeln!(w, "{d} {word} {count}").map_err(io_err(&path))?;
            }
        }
        w.flush().map_err(io_err(&path))?;

        if let Some(labels) = &self.labels {
            let path = dir.join(LABELS_FILE);
            let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
            fs::write(&path, text).map_err(io_err(&path))?;
        }

        let manifest = CorpusManifest {
            num_docs: self.len(),
            vocab_size: self.vocab_size,
            has_labels: self.labels.is_some(),
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(io_err(&path))
    }

    /// Reads a prepared corpus directory.
    pub fn read(dir: &Path) -> Result<(Self, Vocabulary), CorpusError> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            file: mpath.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let vocab = Vocabulary::read(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.vocab_size {
            return Err(CorpusError::Parse {
                file: mpath.display().to_string(),
                line: 0,
                message: format!("vocab_size {} but vocab.txt has {} terms", manifest.vocab_size, vocab.len()),
            });
        }

        let tpath = dir.join(TRIPLETS_FILE);
        let text = fs::read_to_string(&tpath).map_err(io_err(&tpath))?;
        let mut docs: Vec<BTreeMap<usize, u32>> = vec![BTreeMap::new(); manifest.num_docs];
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| CorpusError::Parse {
                file: tpath.display().to_string(),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 fields, got {}", fields.len())));
            }
            let nums: Vec<u64> = fields
                .iter()
                .map(|f| f.parse::<u64>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(e.to_string()))?;
            let (d, w, c) = (nums[0] as usize, nums[1] as usize, nums[2] as u32);
            if d >= manifest.num_docs || w >= manifest.vocab_size || c == 0 {
                return Err(parse_err(format!("triplet ({d}, {w}, {c}) out of range")));
            }
            *docs[d].entry(w).or_default() += c;
        }
        let docs: Vec<SparseDoc> = docs.into_iter().map(|m| m.into_iter().collect()).collect();

        let labels = if manifest.has_labels {
            let lpath = dir.join(LABELS_FILE);
            let text = fs::read_to_string(&lpath).map_err(io_err(&lpath))?;
            let labels = text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    l.trim().parse::<usize>().map_err(|e| CorpusError::Parse {
                        file: lpath.display().to_string(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Some(labels)
        } else {
            None
        };
        Ok((Self::new(docs, labels, manifest.vocab_size)?, vocab))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub has_labels: bool,
}

/// Maps token lists onto `vocab`, dropping out-of-vocabulary tokens and
/// documents left empty. Labels, when given, follow the retained documents.
pub fn vectorize<S: AsRef<str>>(
    raw_docs: &[Vec<S>],
    labels: Option<&[usize]>,
    vocab: &Vocabulary,
) -> Result<SparseCorpus, CorpusError> {
    if let Some(l) = labels {
        if l.len() != raw_docs.len() {
            return Err(CorpusError::LabelCount(l.len(), raw_docs.len()));
        }
    }
    let mut docs = Vec::new();
    let mut kept_labels = Vec::new();
    let mut dropped = 0usize;
    for (i, doc) in raw_docs.iter().enumerate() {
        let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
        for tok in doc {
            if let Some(id) = vocab.id(tok.as_ref()) {
                *counts.entry(id).or_default() += 1;
            }
        }
        if counts.is_empty() {
            dropped += 1;
            continue;
        }
        docs.push(counts.into_iter().collect());
        if let Some(l) = labels {
            kept_labels.push(l[i]);
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} documents with no in-vocabulary tokens");
    }
    if docs.is_empty() {
        return Err(CorpusError::NoNonemptyDocuments);
    }
    SparseCorpus::new(docs, labels.map(|_| kept_labels), vocab.len())
}

/// Train/heldout token matrices sharing the document order of the source.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldoutSplit {
    pub train: SparseCorpus,
    pub heldout: SparseCorpus,
    pub seed: u64,
    pub fraction: f64,
}

/// Moves `floor(fraction * n)` uniformly chosen token instances of each
/// document into the heldout matrix. Documents with fewer than two tokens
/// stay entirely in the training matrix.
pub fn split_heldout(corpus: &SparseCorpus, fraction: f64, seed: u64) -> Result<HeldoutSplit, CorpusError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(corpus.len());
    let mut heldout = Vec::with_capacity(corpus.len());
    for doc in &corpus.docs {
        let n: usize = doc.iter().map(|&(_, c)| c as usize).sum();
        let take = if n < 2 { 0 } else { (fraction * n as f64).floor() as usize };
        // token instance i belongs to the word whose cumulative range holds i
        let mut held_counts = vec![0u32; doc.len()];
        if take > 0 {
            let mut picked: Vec<usize> = sample(&mut rng, n, take).into_vec();
            picked.sort_unstable();
            let mut entry = 0;
            let mut upper = doc[0].1 as usize;
            for i in picked {
                while i >= upper {
                    entry += 1;
                    upper += doc[entry].1 as usize;
                }
                held_counts[entry] += 1;
            }
        }
        let mut t = Vec::new();
        let mut y = Vec::new();
        for (&(w, c), &h) in doc.iter().zip(&held_counts) {
            if c > h {
                t.push((w, c - h));
            }
            if h > 0 {
                y.push((w, h));
            }
        }
        train.push(t);
        heldout.push(y);
    }
    Ok(HeldoutSplit {
        train: SparseCorpus {
            docs: train,
            labels: corpus.labels.clone(),
            vocab_size: corpus.vocab_size,
        },
        heldout: SparseCorpus {
            docs: heldout,
            labels: corpus.labels.clone(),
            vocab_size: corpus.vocab_size,
        },
        seed,
        fraction,
    })
}
