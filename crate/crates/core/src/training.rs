//! Minibatch training, checkpoints, per-step term logs and latent traversals.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use hfvae_autograd::{Adam, AdamConfig, ParamStore, Tape, Tensor};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchSampler, DatasetSpec, FactorDataset};
use crate::distributions::{GroupKind, GroupPosterior, LatentNoise};
use crate::error::{config, contract, Error, Result};
use crate::models::{ForwardState, Model, ModelConfig};
use crate::objective::{compute_terms, BatchTerms, PresetArgs, Preset, TermWeights};

/// Independent random streams derived from the run seed.
const STREAM_BATCHES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// Either a named preset with its hyperparameters or explicit weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Overrides the preset when present.
    #[serde(default)]
    pub weights: Option<TermWeights>,
}

fn default_preset() -> String {
    "hfvae".into()
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { preset: default_preset(), alpha: None, beta: None, gamma: None, weights: None }
    }
}

impl ObjectiveConfig {
    pub fn preset(name: &str, alpha: Option<f64>, beta: Option<f64>, gamma: Option<f64>) -> Self {
        Self { preset: name.into(), alpha, beta, gamma, weights: None }
    }

    pub fn hfvae(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self::preset("hfvae", Some(alpha), Some(beta), Some(gamma))
    }

    pub fn resolve(&self) -> Result<TermWeights> {
        let w = match self.weights {
            Some(w) => w,
            None => Preset::from_name(
                &self.preset,
                PresetArgs { alpha: self.alpha, beta: self.beta, gamma: self.gamma },
            )?
            .weights(),
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: default_lr(), beta1: default_beta1(), beta2: default_beta2(), eps: default_eps(), clip_norm: None }
    }
}

impl OptimizerConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

fn default_batch_size() -> usize {
    512
}
fn default_epochs() -> usize {
    10
}
fn default_checkpoint_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Where the training data comes from; recorded so checkpoints are self-describing.
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    pub model: ModelConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Epochs between `last.ckpt` writes.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, objective: ObjectiveConfig) -> Self {
        Self {
            dataset: None,
            model,
            objective,
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.resolve()?;
        if self.batch_size < 2 {
            return Err(config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(config(format!("step size must be positive, got {}", self.optimizer.lr)));
        }
        if let Some(c) = self.optimizer.clip_norm {
            if !(c > 0.0) {
                return Err(config("clip_norm must be positive"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(config("checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One optimizer step's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub terms: BatchTerms,
    pub loss: f64,
}

/// A batch drawn by the trainer together with the noise it will use.
#[derive(Debug, Clone)]
pub struct Draw {
    pub rows: Vec<usize>,
    pub x: Tensor,
    pub noise: LatentNoise,
}

/// Owns the model and optimizer state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub weights: TermWeights,
    pub adam: Adam,
    sampler: BatchSampler,
    noise_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    dataset_size: usize,
    queue: VecDeque<Vec<usize>>,
    epoch: usize,
    batch_epoch: usize,
    step: u64,
}

impl Trainer {
    /// A fresh run over a dataset of `dataset_size` rows.
    pub fn new(config: TrainConfig, dataset_size: usize) -> Result<Self> {
        config.validate()?;
        let weights = config.objective.resolve()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let sampler = BatchSampler::new(dataset_size, config.batch_size, stream(config.seed, STREAM_BATCHES))?;
        Ok(Self {
            adam: Adam::new(config.optimizer.adam()),
            noise_rng: stream(config.seed, STREAM_NOISE),
            dropout_rng: stream(config.seed, STREAM_DROPOUT),
            weights,
            model,
            sampler,
            dataset_size,
            queue: VecDeque::new(),
            epoch: 0,
            batch_epoch: 0,
            step: 0,
            config,
        })
    }

    /// Continues a run from an epoch-boundary checkpoint.
    pub fn resume(ckpt: Checkpoint, dataset_size: usize) -> Result<Self> {
        let mut t = Self::new(ckpt.config.clone(), dataset_size)?;
        t.model = ckpt.model()?;
        t.adam = ckpt.adam;
        t.epoch = ckpt.epoch;
        t.batch_epoch = ckpt.epoch;
        t.step = ckpt.step;
        for state in &ckpt.rngs {
            let rng = state.restore()?;
            match state.name.as_str() {
                "batches" => t.sampler = BatchSampler::new(dataset_size, t.config.batch_size, rng)?,
                "noise" => t.noise_rng = rng,
                "dropout" => t.dropout_rng = rng,
                other => return Err(contract(format!("unknown rng stream `{other}` in checkpoint"))),
            }
        }
        Ok(t)
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.batches_per_epoch()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Next batch of the seeded sequence and its reparameterization noise.
    pub fn draw(&mut self, ds: &FactorDataset) -> Draw {
        if self.queue.is_empty() {
            self.queue.extend(self.sampler.next_epoch());
        }
        let rows = self.queue.pop_front().expect("an epoch has at least one batch");
        self.batch_epoch = self.epoch;
        let x = ds.batch(&rows);
        let noise = LatentNoise::sample(self.model.layout(), rows.len(), &mut self.noise_rng);
        Draw { rows, x, noise }
    }

    /// One gradient step on `x` with the given noise.
    pub fn step_on(&mut self, x: &Tensor, noise: &LatentNoise) -> Result<StepRecord> {
        let tape = Tape::new();
        let params = self.model.params.bind(&tape);
        let mut state = ForwardState::train(&mut self.dropout_rng);
        let dec = compute_terms(&tape, &self.model, &params, x, self.dataset_size, noise, &mut state)?;
        let loss = dec.loss(&self.weights);
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { term: "loss".into() });
        }
        let terms = dec.terms();
        let grads = tape.backward(loss);
        let mut grads = params.gradients(&grads);
        for (name, g) in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { term: format!("gradient of {name}") });
            }
        }
        if let Some(max_norm) = self.config.optimizer.clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        let updates = std::mem::take(&mut state.buffer_updates);
        drop(state);
        self.adam.update(&mut self.model.params, &grads);
        self.model.apply_buffer_updates(updates);
        self.step += 1;
        if self.queue.is_empty() {
            self.epoch = self.batch_epoch + 1;
        }
        Ok(StepRecord { step: self.step, epoch: self.batch_epoch, terms, loss: loss_value })
    }

    /// Draws the next batch and steps on it.
    pub fn step(&mut self, ds: &FactorDataset) -> Result<StepRecord> {
        let d = self.draw(ds);
        self.step_on(&d.x, &d.noise)
    }

    pub fn checkpoint(&self, best_elbo: f64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.model.params.clone(),
            buffers: self.model.buffers.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            best_elbo,
            rngs: vec![
                RngState::capture("batches", self.sampler.rng()),
                RngState::capture("noise", &self.noise_rng),
                RngState::capture("dropout", &self.dropout_rng),
            ],
        }
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// CSV header of the per-step log.
pub fn log_header(n_groups: usize, n_slots: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "epoch", "rec", "t2", "ta"].iter().map(|s| s.to_string()).collect();
    h.extend((0..n_groups).map(|d| format!("ti_{d}")));
    h.extend((0..n_slots).map(|e| format!("tii_{e}")));
    h.extend(["t4", "loss", "clamp_count"].iter().map(|s| s.to_string()));
    h
}

pub fn log_row(r: &StepRecord) -> Vec<String> {
    let t = &r.terms;
    let mut row = vec![r.step.to_string(), r.epoch.to_string(), t.rec.to_string(), t.t2.to_string(), t.ta.to_string()];
    row.extend(t.ti.iter().map(f64::to_string));
    row.extend(t.tii.iter().map(f64::to_string));
    row.extend([t.t4.to_string(), r.loss.to_string(), t.clamp_count.to_string()]);
    row
}

/// Everything a finished (or aborted) run produced.
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    /// Mean training ELBO estimate per epoch.
    pub epoch_elbo: Vec<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub config_path: Option<PathBuf>,
}

pub const LOG_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Runs `config.epochs` epochs over `ds`. With `out_dir`, writes the config
/// echo, the per-step CSV log, `last.ckpt` at the configured cadence and
/// `best.ckpt` by epoch ELBO. A non-finite term aborts the run, leaving the
/// previous `last.ckpt` in place.
pub fn train(config: TrainConfig, ds: &FactorDataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    if config.model.input_dim() != ds.dim() {
        return Err(config_err_dim(&config, ds));
    }
    let mut trainer = Trainer::new(config, ds.len())?;
    let layout = trainer.model.layout().clone();

    let mut writer = None;
    let mut outcome = TrainOutcome {
        model: trainer.model.clone(),
        log: Vec::new(),
        epoch_elbo: Vec::new(),
        last_checkpoint: None,
        best_checkpoint: None,
        log_path: None,
        config_path: None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let config_path = dir.join(CONFIG_FILE);
        std::fs::write(&config_path, serde_json::to_string_pretty(&trainer.config)?)?;
        let log_path = dir.join(LOG_FILE);
        let mut w = csv::Writer::from_path(&log_path).map_err(csv_err)?;
        w.write_record(log_header(layout.n_groups(), layout.n_slots())).map_err(csv_err)?;
        writer = Some(w);
        let last = dir.join(LAST_CHECKPOINT);
        trainer.checkpoint(f64::NEG_INFINITY).save(&last)?;
        outcome.last_checkpoint = Some(last);
        outcome.log_path = Some(log_path);
        outcome.config_path = Some(config_path);
    }

    let mut best = f64::NEG_INFINITY;
    for epoch in 0..trainer.config.epochs {
        let mut elbo_sum = 0.0;
        let steps = trainer.steps_per_epoch();
        for _ in 0..steps {
            let record = match trainer.step(ds) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    return Err(e);
                }
            };
            elbo_sum += record.terms.elbo();
            if let Some(w) = writer.as_mut() {
                w.write_record(log_row(&record)).map_err(csv_err)?;
            }
            outcome.log.push(record);
        }
        let elbo = elbo_sum / steps as f64;
        outcome.epoch_elbo.push(elbo);
        log::info!("epoch {epoch}: elbo {elbo:.4}");
        if let Some(dir) = out_dir {
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            if elbo > best {
                best = elbo;
                let path = dir.join(BEST_CHECKPOINT);
                trainer.checkpoint(best).save(&path)?;
                outcome.best_checkpoint = Some(path);
            }
            let last_epoch = epoch + 1 == trainer.config.epochs;
            if (epoch + 1) % trainer.config.checkpoint_every == 0 || last_epoch {
                trainer.checkpoint(best).save(&dir.join(LAST_CHECKPOINT))?;
            }
        } else {
            best = best.max(elbo);
        }
    }
    outcome.model = trainer.model;
    Ok(outcome)
}

fn config_err_dim(cfg: &TrainConfig, ds: &FactorDataset) -> Error {
    config(format!(
        "model input shape {:?} does not match dataset item shape {:?}",
        cfg.model.input_shape, ds.item_shape
    ))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Averages term records elementwise.
pub fn mean_terms(records: &[BatchTerms]) -> Result<BatchTerms> {
    let first = records.first().ok_or_else(|| contract("no batches to average"))?;
    let n = records.len() as f64;
    let avg = |f: &dyn Fn(&BatchTerms) -> f64| records.iter().map(f).sum::<f64>() / n;
    let avg_vec = |f: &dyn Fn(&BatchTerms) -> &Vec<f64>| {
        (0..f(first).len()).map(|i| records.iter().map(|r| f(r)[i]).sum::<f64>() / n).collect::<Vec<_>>()
    };
    Ok(BatchTerms {
        rec: avg(&|r| r.rec),
        t2: avg(&|r| r.t2),
        t4: avg(&|r| r.t4),
        ta: avg(&|r| r.ta),
        ti: avg_vec(&|r| &r.ti),
        tii: avg_vec(&|r| &r.tii),
        per_dim_mi: avg_vec(&|r| &r.per_dim_mi),
        prior_minus_posterior: avg(&|r| r.prior_minus_posterior),
        batch_size: first.batch_size,
        dataset_size: first.dataset_size,
        clamp_count: records.iter().map(|r| r.clamp_count).sum(),
    })
}

/// Mean terms over consecutive batches of `ds` in evaluation mode, with
/// noise drawn from `seed`. The batch size is capped at the dataset size.
pub fn evaluate(model: &Model, ds: &FactorDataset, batch_size: usize, seed: u64) -> Result<BatchTerms> {
    let b = batch_size.min(ds.len());
    if b < 2 {
        return Err(contract("evaluation needs at least two rows"));
    }
    let mut rng = stream(seed, STREAM_EVAL);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut records = Vec::new();
    for chunk in rows.chunks_exact(b) {
        let x = ds.batch(chunk);
        let noise = LatentNoise::sample(model.layout(), b, &mut rng);
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let mut state = ForwardState::eval();
        let dec = compute_terms(&tape, model, &params, &x, ds.len(), &noise, &mut state)?;
        records.push(dec.terms());
    }
    mean_terms(&records)
}

/// Serialized state of one random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(name: &str, rng: &ChaCha8Rng) -> Self {
        Self {
            name: name.into(),
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| contract(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| contract("rng seed must be 32 bytes"))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| contract(format!("bad rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HFVAECKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Model, optimizer and random-stream state at an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub buffers: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
    pub step: u64,
    pub best_elbo: f64,
    pub rngs: Vec<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
    step: u64,
    best_elbo: Option<f64>,
    adam_step: u64,
    rngs: Vec<RngState>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Layout: magic, `u32` version, `u64` header length, JSON header, then
    /// every tensor as little-endian `f64` in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let sections: [(&str, Vec<(&String, &Tensor)>); 4] = [
            ("params", self.params.iter().collect()),
            ("buffers", self.buffers.iter().collect()),
            ("adam_m", self.adam.first_moment.iter().collect()),
            ("adam_v", self.adam.second_moment.iter().collect()),
        ];
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (section, items) in &sections {
            for (name, t) in items {
                tensors.push(TensorEntry {
                    section: section.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len() as u64;
            }
        }
        let header = CheckpointHeader {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_elbo: self.best_elbo.is_finite().then_some(self.best_elbo),
            adam_step: self.adam.step,
            rngs: self.rngs.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for (_, items) in &sections {
                for (_, t) in items {
                    for v in t.iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: &str| crate::error::ingestion(path, m.to_string());
        let mut r = BufReader::new(File::open(path).map_err(|e| bad(&format!("cannot open: {e}")))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash mismatch"));
        }
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        let total: u64 = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() as u64).sum();
        if data.len() as u64 != total * 8 {
            return Err(bad("tensor payload length does not match header"));
        }
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut adam = Adam::new(header.config.optimizer.adam());
        adam.step = header.adam_step;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 8;
            let values: Vec<f64> = data[start..start + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::from_shape_vec(IxDyn(&entry.shape), values).map_err(|e| bad(&e.to_string()))?;
            match entry.section.as_str() {
                "params" => params.insert(entry.name.clone(), t),
                "buffers" => buffers.insert(entry.name.clone(), t),
                "adam_m" => {
                    adam.first_moment.insert(entry.name.clone(), t);
                }
                "adam_v" => {
                    adam.second_moment.insert(entry.name.clone(), t);
                }
                other => return Err(bad(&format!("unknown tensor section `{other}`"))),
            }
        }
        Ok(Self {
            config: header.config,
            params,
            buffers,
            adam,
            epoch: header.epoch,
            step: header.step,
            best_elbo: header.best_elbo.unwrap_or(f64::NEG_INFINITY),
            rngs: header.rngs,
        })
    }

    /// Rebuilds the model and installs the stored parameters and buffers.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        for (store, saved, what) in [
            (&mut model.params, &self.params, "parameter"),
            (&mut model.buffers, &self.buffers, "buffer"),
        ] {
            if store.len() != saved.len() {
                return Err(contract(format!("checkpoint has {} {what}s, model expects {}", saved.len(), store.len())));
            }
            for (name, t) in saved.iter() {
                let slot = store
                    .get_mut(name)
                    .ok_or_else(|| contract(format!("checkpoint {what} `{name}` not in model")))?;
                if slot.shape() != t.shape() {
                    return Err(contract(format!("{what} `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(model)
    }
}

/// Deterministic code of a single input: posterior means for Normal groups
/// and `softmax(logits / τ)` for Concrete groups. Returned flat, `[total_dim]`.
pub fn anchor_code(model: &Model, x: &[f64]) -> Result<Vec<f64>> {
    let layout = model.layout();
    let t = Tensor::from_shape_vec(IxDyn(&[1, x.len()]), x.to_vec()).map_err(|e| contract(e.to_string()))?;
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let posts = model.encode(&params, tape.constant(t), &mut ForwardState::eval())?;
    let mut code = Vec::with_capacity(layout.total_dim());
    for (d, post) in posts.iter().enumerate() {
        match post {
            GroupPosterior::Normal { mean, .. } => code.extend(mean.value().iter()),
            GroupPosterior::Concrete { logits } => {
                let tau = layout.group(d).temperature().expect("Concrete group has a temperature");
                let scaled: Vec<f64> = logits.value().iter().map(|l| l / tau).collect();
                code.extend(crate::distributions::log_softmax(&scaled).into_iter().map(f64::exp));
            }
        }
    }
    Ok(code)
}

/// Decoder outputs for a batch of flat codes `[B, total_dim]`.
pub fn decode_codes(model: &Model, codes: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = model.layout().total_dim();
    let flat: Vec<f64> = codes.iter().flatten().copied().collect();
    let t = Tensor::from_shape_vec(IxDyn(&[codes.len(), dim]), flat).map_err(|e| contract(e.to_string()))?;
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let out = model.decode(&params, tape.constant(t), &mut ForwardState::eval())?;
    let v = out.value();
    let width = v.shape()[1];
    Ok(v.as_slice().expect("contiguous").chunks(width).map(<[f64]>::to_vec).collect())
}

/// Frames of a sweep along one latent slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub slot: usize,
    pub group: usize,
    /// Value of the swept coordinate per frame (vertex index for Concrete groups).
    pub values: Vec<f64>,
    pub codes: Vec<Vec<f64>>,
    pub frames: Vec<Vec<f64>>,
}

/// Anchors on the deterministic code of `x` and sweeps latent slot `slot`:
/// a Normal dimension over `linspace(lo, hi, steps)` (the anchor value itself
/// when `steps == 1`), a Concrete group over its one-hot vertices.
pub fn traverse(model: &Model, x: &[f64], slot: usize, lo: f64, hi: f64, steps: usize) -> Result<Traversal> {
    let layout = model.layout();
    if slot >= layout.n_slots() {
        return Err(config(format!("latent slot {slot} out of range (layout has {} slots)", layout.n_slots())));
    }
    if steps == 0 {
        return Err(config("steps must be at least 1"));
    }
    let group = layout.slot_groups()[slot];
    let anchor = anchor_code(model, x)?;
    let vr = layout.value_range(group);
    let (values, codes): (Vec<f64>, Vec<Vec<f64>>) = match layout.group(group).kind {
        GroupKind::Normal => {
            let idx = vr.start + (slot - layout.slot_range(group).start);
            let values: Vec<f64> = if steps == 1 {
                vec![anchor[idx]]
            } else {
                (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect()
            };
            let codes = values
                .iter()
                .map(|&v| {
                    let mut c = anchor.clone();
                    c[idx] = v;
                    c
                })
                .collect();
            (values, codes)
        }
        GroupKind::Concrete => {
            let k = vr.len();
            let codes = (0..k)
                .map(|j| {
                    let mut c = anchor.clone();
                    for (i, slot) in c[vr.clone()].iter_mut().enumerate() {
                        *slot = if i == j { 1.0 } else { 0.0 };
                    }
                    c
                })
                .collect();
            ((0..k).map(|j| j as f64).collect(), codes)
        }
    };
    let frames = decode_codes(model, &codes)?;
    Ok(Traversal { slot, group, values, codes, frames })
}

/// Writes rows of frames as one PNG. `item_shape` is `[H, W]`, `[1, H, W]` or `[3, H, W]`;
/// values are clamped to `[0, 1]`.
pub fn write_image_grid(rows: &[Vec<Vec<f64>>], item_shape: &[usize], path: &Path) -> Result<()> {
    let (c, h, w) = match item_shape {
        [h, w] => (1, *h, *w),
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        _ => return Err(config(format!("cannot render items of shape {item_shape:?} as images"))),
    };
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || n_cols == 0 {
        return Err(contract("no frames to render"));
    }
    let pad = 2;
    let width = (n_cols * (w + pad) + pad) as u32;
    let height = (rows.len() * (h + pad) + pad) as u32;
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([128, 128, 128]));
    let to_byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.iter().enumerate() {
            if frame.len() != c * h * w {
                return Err(contract(format!("frame has {} values, expected {}", frame.len(), c * h * w)));
            }
            let (ox, oy) = (pad + ci * (w + pad), pad + ri * (h + pad));
            for y in 0..h {
                for x in 0..w {
                    let px = |ch: usize| to_byte(frame[ch * h * w + y * w + x]);
                    let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                    img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(rgb));
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}
