//! Autoencoding topic models with two latent groups: a synthetic corpus with
//! known cross-group structure, topic inspection and coherence.

use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FactorDataset, Observations};
use crate::distributions::LatentLayout;
use crate::error::{config, contract, ingestion, Result};
use crate::models::{Architecture, LikelihoodKind, Model, ModelConfig};

/// Probability mass a topic puts on its own word block.
pub const BLOCK_MASS: f64 = 0.9;
/// Smoothing constant for NPMI.
pub const NPMI_EPS: f64 = 1e-12;

/// Bag-of-words counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// `[Docs, V]`, non-negative integers stored as `f64`.
    pub counts: Array2<f64>,
    pub vocabulary: Vec<String>,
    /// `[Docs, groups]` generating topic per group, for synthetic corpora.
    pub topics: Option<Array2<usize>>,
}

impl Corpus {
    pub fn new(counts: Array2<f64>, vocabulary: Vec<String>) -> Result<Self> {
        if counts.ncols() < 2 || vocabulary.len() != counts.ncols() {
            return Err(contract(format!(
                "need V >= 2 and one vocabulary entry per column (V = {}, vocabulary = {})",
                counts.ncols(),
                vocabulary.len()
            )));
        }
        if counts.iter().any(|&c| c < 0.0 || c.fract() != 0.0) {
            return Err(contract("counts must be non-negative integers"));
        }
        if counts.sum_axis(Axis(1)).iter().any(|&s| s < 1.0) {
            return Err(contract("every document needs at least one word"));
        }
        Ok(Self { counts, vocabulary, topics: None })
    }

    pub fn n_docs(&self) -> usize {
        self.counts.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.counts.ncols()
    }

    /// Documents as training rows; factors are the generating topics when known.
    pub fn to_dataset(&self) -> Result<FactorDataset> {
        let mut ds = FactorDataset::new(Observations::Real(self.counts.clone()), vec![self.vocab_size()])?;
        if let Some(t) = &self.topics {
            ds.labels = Some(t.column(0).to_vec());
            ds.factor_names = (0..t.ncols()).map(|g| format!("topic_group{g}")).collect();
            ds.factor_value_names = vec![Vec::new(); t.ncols()];
            ds.factors = Some(t.clone());
        }
        Ok(ds)
    }

    /// Writes `counts` (and `topics` when present) as an archive plus a
    /// vocabulary file `<path>.vocab`, one token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let werr = |e: ndarray_npy::WriteNpzError| ingestion(path, e.to_string());
        let mut npz = NpzWriter::new_compressed(File::create(path)?);
        npz.add_array("counts", &self.counts).map_err(werr)?;
        if let Some(t) = &self.topics {
            npz.add_array("topics", &t.mapv(|v| v as i64)).map_err(werr)?;
        }
        npz.finish().map_err(werr)?;
        std::fs::write(vocab_path(path), self.vocabulary.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| ingestion(path, format!("cannot open: {e}")))?;
        let mut npz = NpzReader::new(file).map_err(|e| ingestion(path, e.to_string()))?;
        let names = npz.names().map_err(|e| ingestion(path, e.to_string()))?;
        let counts: Array2<f64> =
            npz.by_name("counts").map_err(|e| ingestion(path, format!("key `counts`: {e}")))?;
        let topics = if names.iter().any(|n| n == "topics") {
            let t: Array2<i64> = npz.by_name("topics").map_err(|e| ingestion(path, format!("key `topics`: {e}")))?;
            Some(t.mapv(|v| v as usize))
        } else {
            None
        };
        let vp = vocab_path(path);
        let text = std::fs::read_to_string(&vp).map_err(|e| ingestion(&vp, format!("cannot read vocabulary: {e}")))?;
        let vocabulary: Vec<String> = text.lines().map(str::to_string).collect();
        let mut c = Self::new(counts, vocabulary).map_err(|e| ingestion(path, e.to_string()))?;
        c.topics = topics;
        Ok(c)
    }
}

fn vocab_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    s.into()
}

/// Parameters of [`synth_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    pub topics_per_group: usize,
    pub vocab_size: usize,
    pub docs: usize,
    /// Words per document.
    pub doc_length: usize,
    /// Probability that a later group's topic is the paired image of group 0's topic.
    pub correlation: f64,
    pub seed: u64,
}

fn default_groups() -> usize {
    2
}

impl CorpusSpec {
    /// Two groups of five topics over 100 words, 1000 documents of 60 words.
    pub fn desk(correlation: f64, seed: u64) -> Self {
        Self { n_groups: 2, topics_per_group: 5, vocab_size: 100, docs: 1000, doc_length: 60, correlation, seed }
    }

    pub fn n_topics(&self) -> usize {
        self.n_groups * self.topics_per_group
    }

    /// Word distribution of global topic `t` (`group * topics_per_group + k`).
    pub fn topic_distribution(&self, t: usize) -> Vec<f64> {
        let v = self.vocab_size;
        let block = v / self.n_topics();
        let mut p = vec![(1.0 - BLOCK_MASS) / v as f64; v];
        for w in t * block..(t + 1) * block {
            p[w] += BLOCK_MASS / block as f64;
        }
        p
    }

    /// Word indices of topic `t`'s peaked block.
    pub fn topic_block(&self, t: usize) -> std::ops::Range<usize> {
        let block = self.vocab_size / self.n_topics();
        t * block..(t + 1) * block
    }
}

/// Documents mixing one topic per group; each word picks a group uniformly.
/// Group 0's topic is uniform; each later group copies a fixed permutation of
/// it with probability `correlation`, and is uniform otherwise.
pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.n_groups == 0 || spec.topics_per_group == 0 || spec.docs == 0 || spec.doc_length == 0 {
        return Err(config("corpus parameters must be positive"));
    }
    if !(0.0..=1.0).contains(&spec.correlation) {
        return Err(config(format!("correlation must be in [0, 1], got {}", spec.correlation)));
    }
    if spec.vocab_size < spec.n_topics() {
        return Err(config(format!("vocabulary of {} words cannot hold {} disjoint topic blocks", spec.vocab_size, spec.n_topics())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.topics_per_group;
    let pairings: Vec<Vec<usize>> = (0..spec.n_groups)
        .map(|g| {
            let mut perm: Vec<usize> = (0..k).collect();
            if g > 0 {
                perm.shuffle(&mut rng);
            }
            perm
        })
        .collect();
    let cumulative: Vec<Vec<f64>> = (0..spec.n_topics())
        .map(|t| {
            spec.topic_distribution(t)
                .iter()
                .scan(0.0, |acc, p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();

    let v = spec.vocab_size;
    let mut counts = Array2::<f64>::zeros((spec.docs, v));
    let mut topics = Array2::<usize>::zeros((spec.docs, spec.n_groups));
    for doc in 0..spec.docs {
        let first = rng.random_range(0..k);
        topics[[doc, 0]] = first;
        for g in 1..spec.n_groups {
            topics[[doc, g]] = if rng.random::<f64>() < spec.correlation {
                pairings[g][first]
            } else {
                rng.random_range(0..k)
            };
        }
        for _ in 0..spec.doc_length {
            let g = rng.random_range(0..spec.n_groups);
            let cdf = &cumulative[g * k + topics[[doc, g]]];
            let u = rng.random::<f64>() * cdf[v - 1];
            let w = cdf.partition_point(|&c| c <= u).min(v - 1);
            counts[[doc, w]] += 1.0;
        }
    }
    let block = v / spec.n_topics();
    let vocabulary = (0..v)
        .map(|w| {
            let t = w / block.max(1);
            if t < spec.n_topics() {
                format!("g{}t{}_{}", t / k, t % k, w % block)
            } else {
                format!("extra_{w}")
            }
        })
        .collect();
    let mut corpus = Corpus::new(counts, vocabulary)?;
    corpus.topics = Some(topics);
    Ok(corpus)
}

/// ProdLDA-style model for `vocab_size` words; the layout must be Normal-only.
pub fn build_prodlda(layout: LatentLayout, vocab_size: usize, seed: u64) -> Result<Model> {
    let cfg = ModelConfig::new(Architecture::Prodlda, vec![vocab_size], layout, LikelihoodKind::CategoricalBow);
    Model::new(cfg, seed)
}

/// Decoder weight row of each topic, `[topics, V]`.
pub fn topic_weights(model: &Model) -> Result<Array2<f64>> {
    let w = model
        .params
        .get("decoder.topics.weight")
        .ok_or_else(|| contract("model has no topic decoder"))?;
    w.clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| contract(e.to_string()))
}

/// Vocabulary indices of the `top_k` largest decoder weights of `topic`.
pub fn top_word_indices(model: &Model, topic: usize, top_k: usize) -> Result<Vec<usize>> {
    let w = topic_weights(model)?;
    if topic >= w.nrows() {
        return Err(contract(format!("topic {topic} out of range ({} topics)", w.nrows())));
    }
    let row = w.row(topic);
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    Ok(idx)
}

/// The `top_k` words of `topic`.
pub fn topic_words(model: &Model, vocabulary: &[String], topic: usize, top_k: usize) -> Result<Vec<String>> {
    Ok(top_word_indices(model, topic, top_k)?.into_iter().map(|i| vocabulary[i].clone()).collect())
}

/// Pearson correlation between columns of `[Docs, D]`. Zero-variance columns
/// get zero off-diagonal correlations (logged).
pub fn topic_correlations(codes: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = codes.dim();
    if n < 3 {
        return Err(contract(format!("need at least 3 documents, got {n}")));
    }
    let mean = codes.mean_axis(Axis(0)).unwrap();
    let centred = codes - &mean;
    let cov = centred.t().dot(&centred);
    let sd: Array1<f64> = cov.diag().mapv(f64::sqrt);
    let mut corr = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        if sd[i] <= 1e-12 * (1.0 + mean[i].abs()) {
            log::warn!("topic dimension {i} has zero variance; its correlations are set to 0");
        }
        for j in 0..d {
            corr[[i, j]] = if i == j {
                1.0
            } else if sd[i] <= 1e-12 * (1.0 + mean[i].abs()) || sd[j] <= 1e-12 * (1.0 + mean[j].abs()) {
                0.0
            } else {
                (cov[[i, j]] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(corr)
}

/// Largest absolute off-diagonal correlation between dims of different groups
/// and within the same group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrelationSummary {
    pub max_cross: f64,
    pub max_within: f64,
}

pub fn correlation_summary(corr: &Array2<f64>, layout: &LatentLayout) -> CorrelationSummary {
    let group_of = layout.slot_groups();
    let mut s = CorrelationSummary { max_cross: 0.0, max_within: 0.0 };
    for i in 0..corr.nrows() {
        for j in i + 1..corr.ncols() {
            let c = corr[[i, j]].abs();
            if group_of[i] == group_of[j] {
                s.max_within = s.max_within.max(c);
            } else {
                s.max_cross = s.max_cross.max(c);
            }
        }
    }
    s
}

/// Mean NPMI over all pairs of `words`, using document co-occurrence.
pub fn topic_coherence(words: &[usize], corpus: &Corpus) -> Result<f64> {
    if words.len() < 2 {
        return Err(contract("coherence needs at least two words"));
    }
    if let Some(&w) = words.iter().find(|&&w| w >= corpus.vocab_size()) {
        return Err(contract(format!("word index {w} out of range")));
    }
    let docs = corpus.n_docs() as f64;
    let present: Vec<Vec<bool>> =
        words.iter().map(|&w| corpus.counts.column(w).iter().map(|&c| c > 0.0).collect()).collect();
    let df: Vec<f64> = present.iter().map(|p| p.iter().filter(|&&b| b).count() as f64).collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            let co = present[i].iter().zip(&present[j]).filter(|(a, b)| **a && **b).count() as f64;
            total += npmi(df[i] / docs, df[j] / docs, co / docs);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Normalized PMI of one word pair from marginal and joint document frequencies.
pub fn npmi(p_i: f64, p_j: f64, p_ij: f64) -> f64 {
    if p_i <= 0.0 || p_j <= 0.0 {
        return -1.0;
    }
    let joint = p_ij + NPMI_EPS;
    let denom = -joint.ln();
    if denom <= 1e-12 {
        return 1.0;
    }
    ((joint / (p_i * p_j)).ln() / denom).clamp(-1.0, 1.0)
}

/// Per-topic summary line for reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicRecord {
    pub topic: usize,
    pub mutual_information: f64,
    pub coherence: f64,
    pub top_words: Vec<String>,
}

/// Top words and coherence per topic, with the caller's per-dimension MI.
pub fn topic_report(model: &Model, corpus: &Corpus, per_dim_mi: &[f64], top_k: usize) -> Result<Vec<TopicRecord>> {
    let n_topics = topic_weights(model)?.nrows();
    (0..n_topics)
        .map(|t| {
            let idx = top_word_indices(model, t, top_k)?;
            Ok(TopicRecord {
                topic: t,
                mutual_information: per_dim_mi.get(t).copied().unwrap_or(f64::NAN),
                coherence: topic_coherence(&idx, corpus)?,
                top_words: idx.iter().map(|&i| corpus.vocabulary[i].clone()).collect(),
            })
        })
        .collect()
}
