use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{resolve, Override, RunConfig};
use super::schema::{validate_metrics, validate_topics};
use super::{EvalArgs, ExportArgs, PrepArgs, TopicsArgs, TrainArgs};
use crate::corpus::{build_vocabulary, split_heldout, stopwords, tokenize, vectorize, SparseCorpus, Vocabulary, VOCAB_FILE};
use crate::decoder::{project_topics, top_word_ids};
use crate::eval::{evaluate, write_topic_csv, MetricsReport};
use crate::model::{DecoderLayout, Model};
use crate::tape::Tensor;
use crate::trainer::{checkpoint, run_training, Trained};

pub const RUN_CONFIG_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TOPIC_NPMI_FILE: &str = "topic_npmi.csv";
pub const TOPICS_FILE: &str = "topics.json";
pub const LABEL_NAMES_FILE: &str = "label_names.txt";

fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .with_context(|| format!("cannot read directory {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("cannot list {}", dir.display()))?;
    entries.sort();
    Ok(entries)
}

/// Raw documents and optional class names per document.
fn read_raw_documents(input: &Path, labels: Option<&Path>) -> Result<(Vec<String>, Option<Vec<String>>)> {
    if input.is_dir() {
        if labels.is_some() {
            bail!("--labels applies to a line-per-document file; class subdirectories label a directory input");
        }
        let entries = sorted_entries(input)?;
        let classes: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
        if classes.is_empty() {
            let docs = entries.iter().filter(|p| p.is_file()).map(|p| read_text(p)).collect::<Result<_>>()?;
            return Ok((docs, None));
        }
        let mut docs = Vec::new();
        let mut names = Vec::new();
        for class in classes {
            let name = class.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for file in sorted_entries(class)?.into_iter().filter(|p| p.is_file()) {
                docs.push(read_text(&file)?);
                names.push(name.clone());
            }
        }
        Ok((docs, Some(names)))
    } else {
        let docs: Vec<String> = read_text(input)?.lines().map(str::to_string).collect();
        let names = match labels {
            Some(path) => {
                let names: Vec<String> = read_text(path)?.lines().map(|l| l.trim().to_string()).collect();
                if names.len() != docs.len() {
                    bail!("{} has {} labels for {} documents", path.display(), names.len(), docs.len());
                }
                Some(names)
            }
            None => None,
        };
        Ok((docs, names))
    }
}

pub fn run_prep(args: &PrepArgs) -> Result<()> {
    let (raw, names) = read_raw_documents(&args.input, args.labels.as_deref())?;
    let stop = stopwords();
    let tokens: Vec<Vec<String>> = raw.iter().map(|d| tokenize(d, &stop)).collect();
    let vocab = build_vocabulary(&tokens, args.min_count, args.max_vocab)?;
    let (ids, classes) = match &names {
        Some(names) => {
            let classes: Vec<String> = names.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let ids: Vec<usize> = names.iter().map(|n| classes.binary_search(n).expect("class listed")).collect();
            (Some(ids), Some(classes))
        }
        None => (None, None),
    };
    let corpus = vectorize(&tokens, ids.as_deref(), &vocab)?;
    corpus.write(&args.out, &vocab)?;
    if let Some(classes) = classes {
        let path = args.out.join(LABEL_NAMES_FILE);
        let text: String = classes.iter().map(|c| format!("{c}\n")).collect();
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!(
        "prepared {} documents, {} terms, {} tokens in {}",
        corpus.len(),
        vocab.len(),
        corpus.total_tokens(),
        args.out.display()
    );
    Ok(())
}

fn push<T: Serialize>(out: &mut Vec<Override>, key: &'static str, value: &Option<T>) {
    if let Some(v) = value {
        out.push((key, serde_json::to_value(v).expect("flag values serialize")));
    }
}

fn train_overrides(a: &TrainArgs) -> Vec<Override> {
    let mut o = Vec::new();
    push(&mut o, "corpus", &a.corpus);
    push(&mut o, "output", &a.out);
    push(&mut o, "split_seed", &a.split_seed);
    push(&mut o, "heldout_fraction", &a.heldout_fraction);
    push(&mut o, "train.layer_widths", &a.layer_widths);
    push(&mut o, "train.variant", &a.variant);
    push(&mut o, "train.embed_dim", &a.embed_dim);
    push(&mut o, "train.hidden", &a.hidden);
    push(&mut o, "train.lr", &a.lr);
    push(&mut o, "train.batch_size", &a.batch_size);
    push(&mut o, "train.epochs", &a.epochs);
    push(&mut o, "train.warmup_epochs", &a.warmup_epochs);
    push(&mut o, "train.clip_norm", &a.clip_norm);
    push(&mut o, "train.seed", &a.seed);
    push(&mut o, "train.input_transform", &a.input_transform);
    push(&mut o, "train.prior_rate", &a.prior_rate);
    push(&mut o, "train.checkpoint_every", &a.checkpoint_every);
    push(&mut o, "train.workers", &a.workers);
    o
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Trains on the training half of the heldout split so that `eval` with the
/// same split never scores tokens the model has seen.
pub fn run_train(args: &TrainArgs) -> Result<Trained> {
    let cfg = resolve(args.config.as_deref(), train_overrides(args))?;
    let (corpus, _) = SparseCorpus::read(&cfg.corpus)
        .with_context(|| format!("cannot load prepared corpus {}", cfg.corpus.display()))?;
    let split = split_heldout(&corpus, cfg.heldout_fraction, cfg.split_seed)?;
    fs::create_dir_all(&cfg.output).with_context(|| format!("cannot create {}", cfg.output.display()))?;
    write_json(&cfg.output.join(RUN_CONFIG_FILE), &cfg)?;
    let trained = run_training(&split.train, &cfg.train, &cfg.output, None, |r| {
        let kl: Vec<String> = r.kl.iter().map(|k| format!("{k:.4}")).collect();
        println!(
            "epoch {} loss {:.4} recon {:.4} kl [{}] beta {:.3} grad_norm {:.3}",
            r.epoch,
            r.loss,
            r.recon,
            kl.join(", "),
            r.beta_warm,
            r.grad_norm
        );
    })?;
    println!("wrote {}", cfg.output.display());
    Ok(trained)
}

fn checkpoint_dir(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn eval_config(args: &EvalArgs, out: &Path) -> Result<RunConfig> {
    let config = match &args.config {
        Some(p) => Some(p.clone()),
        None => Some(checkpoint_dir(&args.checkpoint).join(RUN_CONFIG_FILE)).filter(|p| p.is_file()),
    };
    let mut o = vec![("output", json!(out))];
    push(&mut o, "corpus", &args.corpus);
    push(&mut o, "split_seed", &args.split_seed);
    push(&mut o, "heldout_fraction", &args.heldout_fraction);
    push(&mut o, "eval.samples", &args.samples);
    push(&mut o, "eval.top_n", &args.top_n);
    push(&mut o, "eval.seed", &args.seed);
    push(&mut o, "eval.coherence_epsilon", &args.coherence_epsilon);
    Ok(resolve(config.as_deref(), o)?)
}

pub fn run_eval(args: &EvalArgs) -> Result<MetricsReport> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let out = args.out.clone().unwrap_or_else(|| checkpoint_dir(&args.checkpoint));
    let cfg = eval_config(args, &out)?;
    let (corpus, vocab) = SparseCorpus::read(&cfg.corpus)
        .with_context(|| format!("cannot load prepared corpus {}", cfg.corpus.display()))?;
    if corpus.vocab_size != ckpt.model.config.vocab_size {
        bail!(
            "checkpoint vocabulary size {} differs from corpus vocabulary size {}",
            ckpt.model.config.vocab_size,
            corpus.vocab_size
        );
    }
    let split = split_heldout(&corpus, cfg.heldout_fraction, cfg.split_seed)?;
    let result = evaluate(&ckpt.model, &split, &args.metrics, &cfg.eval)?;
    let value = serde_json::to_value(&result.report)?;
    validate_metrics(&value).map_err(|e| anyhow!("metrics fail schema validation:\n  {}", e.join("\n  ")))?;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write_json(&out.join(METRICS_FILE), &value)?;
    if !result.per_topic.is_empty() {
        let path = out.join(TOPIC_NPMI_FILE);
        write_topic_csv(&path, &result.per_topic, &vocab).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{}", serde_json::to_string(&value)?);
    Ok(result.report)
}

/// The vocabulary of `--corpus`, or of the corpus named in the run
/// configuration stored next to the checkpoint.
fn vocabulary_for(corpus: Option<&Path>, checkpoint: &Path) -> Result<Vocabulary> {
    let dir = match corpus {
        Some(d) => d.to_path_buf(),
        None => {
            let run = checkpoint_dir(checkpoint).join(RUN_CONFIG_FILE);
            let text = fs::read_to_string(&run)
                .with_context(|| format!("no --corpus given and cannot read {}", run.display()))?;
            let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("bad {}", run.display()))?;
            cfg.corpus
        }
    };
    Ok(Vocabulary::read(&dir.join(VOCAB_FILE))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicChild {
    pub topic_id: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEntry {
    pub layer: usize,
    pub topic_id: usize,
    pub top_words: Vec<String>,
    /// Projected word probabilities of `top_words`.
    pub weights: Vec<f64>,
    /// Every topic one layer down, by descending `Φ⁽ˡ⁾` weight.
    pub children: Vec<TopicChild>,
}

/// Topics of the requested layers (all when `layer` is `None`).
pub fn topic_hierarchy(model: &Model, vocab: &Vocabulary, layer: Option<usize>, top_n: usize) -> Result<Vec<Vec<TopicEntry>>> {
    let phis = model.phi_values()?;
    let depth = phis.len();
    let layers: Vec<usize> = match layer {
        Some(l) if l == 0 || l > depth => bail!("layer {l} out of range 1..={depth}"),
        Some(l) => vec![l],
        None => (1..=depth).collect(),
    };
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        let topics = project_topics(&phis, l)?;
        let ids = top_word_ids(&topics, top_n);
        let entries = ids
            .iter()
            .enumerate()
            .map(|(k, words)| {
                let children = if l > 1 {
                    let phi = &phis[l - 1];
                    let mut c: Vec<TopicChild> = (0..phi.rows())
                        .map(|j| TopicChild { topic_id: j, weight: phi.get(j, k) })
                        .collect();
                    c.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.topic_id.cmp(&b.topic_id)));
                    c
                } else {
                    Vec::new()
                };
                TopicEntry {
                    layer: l,
                    topic_id: k,
                    top_words: words.iter().map(|&w| vocab.term(w).to_string()).collect(),
                    weights: words.iter().map(|&w| topics.get(w, k)).collect(),
                    children,
                }
            })
            .collect();
        out.push(entries);
    }
    Ok(out)
}

pub fn run_topics(args: &TopicsArgs) -> Result<Vec<Vec<TopicEntry>>> {
    let layer = match args.layer.trim() {
        "all" => None,
        s => Some(s.parse::<usize>().map_err(|_| anyhow!("--layer must be a layer number or `all`, got {s:?}"))?),
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = vocabulary_for(args.corpus.as_deref(), &args.checkpoint)?;
    if vocab.len() != ckpt.model.config.vocab_size {
        bail!("vocabulary has {} terms, checkpoint expects {}", vocab.len(), ckpt.model.config.vocab_size);
    }
    let topics = topic_hierarchy(&ckpt.model, &vocab, layer, args.top_n)?;
    let value = serde_json::to_value(&topics)?;
    validate_topics(&value).map_err(|e| anyhow!("topics fail schema validation:\n  {}", e.join("\n  ")))?;
    let path = args.out.clone().unwrap_or_else(|| checkpoint_dir(&args.checkpoint).join(TOPICS_FILE));
    write_json(&path, &value)?;
    println!("wrote {}", path.display());
    Ok(topics)
}

/// Word embeddings and per-layer topic embeddings, each `D x n`.
fn embedding_tables(model: &Model) -> Result<(&Tensor, Vec<&Tensor>)> {
    match &model.layout.decoder {
        DecoderLayout::Sawtooth { alpha } => {
            Ok((&model.params[alpha[0]], alpha[1..].iter().map(|&i| &model.params[i]).collect()))
        }
        DecoderLayout::Unshared { alpha, beta } => {
            Ok((&model.params[alpha[0]], beta.iter().map(|&i| &model.params[i]).collect()))
        }
        DecoderLayout::Direct { .. } => bail!("the dntm decoder has no embeddings to export"),
    }
}

pub fn export_embeddings(args: &ExportArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let vocab = vocabulary_for(args.corpus.as_deref(), &args.checkpoint)?;
    let (words, topics) = embedding_tables(&ckpt.model)?;
    if vocab.len() != words.cols() {
        bail!("vocabulary has {} terms, checkpoint expects {}", vocab.len(), words.cols());
    }
    let d = words.rows();
    let mut text = String::from("name");
    for i in 0..d {
        text.push_str(&format!("\tdim{i}"));
    }
    text.push('\n');
    let mut row = |name: &str, table: &Tensor, c: usize| {
        text.push_str(name);
        for r in 0..d {
            text.push('\t');
            text.push_str(&table.get(r, c).to_string());
        }
        text.push('\n');
    };
    for w in 0..words.cols() {
        row(vocab.term(w), words, w);
    }
    for (l, table) in topics.iter().enumerate() {
        for k in 0..table.cols() {
            row(&format!("t{}_{k}", l + 1), table, k);
        }
    }
    let mut f = fs::File::create(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    f.write_all(text.as_bytes())
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
