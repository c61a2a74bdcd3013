//! Datasets: MNIST IDX files, the dSprites archive, procedurally rendered
//! shapes with exactly known factors, factor-combination pruning and batching.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use hfvae_autograd::Tensor;
use ndarray::{Array1, Array2, Array3, Axis, IxDyn};
use ndarray_npy::{NpzReader, NpzWriter};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::error::{config, contract, ingestion, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Observation storage. Byte storage keeps large binary image sets compact.
#[derive(Debug, Clone, PartialEq)]
pub enum Observations {
    /// `value = byte * scale`.
    Bytes { data: Array2<u8>, scale: f64 },
    Real(Array2<f64>),
}

impl Observations {
    pub fn len(&self) -> usize {
        match self {
            Observations::Bytes { data, .. } => data.nrows(),
            Observations::Real(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened width of one observation.
    pub fn dim(&self) -> usize {
        match self {
            Observations::Bytes { data, .. } => data.ncols(),
            Observations::Real(a) => a.ncols(),
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        match self {
            Observations::Bytes { data, scale } => data.row(i).iter().map(|&b| b as f64 * scale).collect(),
            Observations::Real(a) => a.row(i).to_vec(),
        }
    }

    /// `[B, D]` tensor of the given rows.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            match self {
                Observations::Bytes { data, scale } => out.extend(data.row(r).iter().map(|&b| b as f64 * scale)),
                Observations::Real(a) => out.extend(a.row(r).iter()),
            }
        }
        Tensor::from_shape_vec(IxDyn(&[rows.len(), d]), out).unwrap()
    }

    fn select(&self, rows: &[usize]) -> Self {
        match self {
            Observations::Bytes { data, scale } => {
                Observations::Bytes { data: data.select(Axis(0), rows), scale: *scale }
            }
            Observations::Real(a) => Observations::Real(a.select(Axis(0), rows)),
        }
    }
}

/// Observations with optional class labels and ground-truth factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    pub observations: Observations,
    /// Shape of a single observation, e.g. `[28, 28]`.
    pub item_shape: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    /// `[N, F]` factor class indices.
    pub factors: Option<Array2<usize>>,
    pub factor_names: Vec<String>,
    /// Optional display names for each factor's values (empty when numeric).
    pub factor_value_names: Vec<Vec<String>>,
}

impl FactorDataset {
    pub fn new(observations: Observations, item_shape: Vec<usize>) -> Result<Self> {
        if observations.is_empty() {
            return Err(contract("dataset must contain at least one observation"));
        }
        if item_shape.iter().product::<usize>() != observations.dim() {
            return Err(contract(format!(
                "item shape {item_shape:?} does not match observation width {}",
                observations.dim()
            )));
        }
        Ok(Self {
            observations,
            item_shape,
            labels: None,
            factors: None,
            factor_names: Vec::new(),
            factor_value_names: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.observations.dim()
    }

    pub fn batch(&self, rows: &[usize]) -> Tensor {
        self.observations.gather(rows)
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factor_names.iter().position(|n| n == name)
    }

    /// Rows `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            observations: self.observations.select(rows),
            item_shape: self.item_shape.clone(),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            factors: self.factors.as_ref().map(|f| f.select(Axis(0), rows)),
            factor_names: self.factor_names.clone(),
            factor_value_names: self.factor_value_names.clone(),
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| ingestion(path, format!("cannot open: {e}")))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        flate2::read::GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut bytes)
            .map_err(|e| ingestion(path, format!("gzip decode failed: {e}")))?;
    } else {
        BufReader::new(file).read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| ingestion(path, "truncated header"))
}

/// Parses an IDX file with the given magic; returns the dims and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(ingestion(
            path,
            format!("bad magic number: expected {expected_magic:#010x}, found {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + count)
        .ok_or_else(|| ingestion(path, format!("truncated payload: need {count} bytes after header")))?;
    if bytes.len() > start + count {
        return Err(ingestion(path, "trailing bytes after payload"));
    }
    Ok((dims, payload.to_vec()))
}

/// MNIST-format images and labels; intensities are `byte / 255`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<FactorDataset> {
    let (dims, pixels) = parse_idx(&read_all(images_path)?, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(&read_all(labels_path)?, IDX_LABELS_MAGIC, labels_path)?;
    let n = dims[0];
    if ldims[0] != n {
        return Err(ingestion(labels_path, format!("{} labels for {n} images", ldims[0])));
    }
    let item_shape = dims[1..].to_vec();
    let width = item_shape.iter().product();
    let data = Array2::from_shape_vec((n, width), pixels).unwrap();
    let mut ds = FactorDataset::new(Observations::Bytes { data, scale: 1.0 / 255.0 }, item_shape)?;
    ds.labels = Some(labels.into_iter().map(usize::from).collect());
    Ok(ds)
}

/// Serializes `dims` and `payload` in IDX layout.
pub fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut bytes = magic.to_be_bytes().to_vec();
    for &d in dims {
        bytes.extend((d as u32).to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn npz_err(path: &Path, key: &str, e: impl std::fmt::Display) -> crate::Error {
    ingestion(path, format!("key `{key}`: {e}"))
}

pub const DSPRITES_FACTORS: [&str; 6] = ["color", "shape", "scale", "orientation", "pos_x", "pos_y"];

/// The dSprites archive: `imgs` `[N, 64, 64]` bytes, `latents_values` and
/// `latents_classes` `[N, 6]`. The label is the shape factor.
pub fn load_dsprites(path: &Path) -> Result<FactorDataset> {
    let file = File::open(path).map_err(|e| ingestion(path, format!("cannot open: {e}")))?;
    let mut npz = NpzReader::new(file).map_err(|e| ingestion(path, format!("not an npz archive: {e}")))?;
    let names = npz.names().map_err(|e| ingestion(path, e.to_string()))?;
    for key in ["imgs", "latents_values", "latents_classes"] {
        if !names.iter().any(|n| n == key) {
            return Err(ingestion(path, format!("missing key `{key}`")));
        }
    }
    if !names.iter().any(|n| n == "metadata") {
        log::warn!("{}: no `metadata` entry; continuing", path.display());
    }
    let imgs: Array3<u8> = npz.by_name("imgs").map_err(|e| npz_err(path, "imgs", e))?;
    let values: Array2<f64> = npz.by_name("latents_values").map_err(|e| npz_err(path, "latents_values", e))?;
    let classes: Array2<i64> = npz.by_name("latents_classes").map_err(|e| npz_err(path, "latents_classes", e))?;
    let n = imgs.len_of(Axis(0));
    if values.dim() != (n, 6) {
        return Err(ingestion(path, format!("key `latents_values` has shape {:?}, expected [{n}, 6]", values.shape())));
    }
    if classes.dim() != (n, 6) {
        return Err(ingestion(path, format!("key `latents_classes` has shape {:?}, expected [{n}, 6]", classes.shape())));
    }
    if imgs.iter().any(|&b| b > 1) {
        return Err(ingestion(path, "key `imgs` is not binary"));
    }
    if classes.iter().any(|&c| c < 0) {
        return Err(ingestion(path, "key `latents_classes` has negative entries"));
    }
    let (h, w) = (imgs.len_of(Axis(1)), imgs.len_of(Axis(2)));
    let data = imgs.into_shape_with_order((n, h * w)).map_err(|e| npz_err(path, "imgs", e))?;
    let factors = classes.mapv(|c| c as usize);
    let mut ds = FactorDataset::new(Observations::Bytes { data, scale: 1.0 }, vec![h, w])?;
    ds.labels = Some(factors.column(1).to_vec());
    ds.factors = Some(factors);
    ds.factor_names = DSPRITES_FACTORS.iter().map(|s| s.to_string()).collect();
    ds.factor_value_names = vec![Vec::new(); 6];
    ds.factor_value_names[1] = vec!["square".into(), "ellipse".into(), "heart".into()];
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Ellipse,
    Cross,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Cross => "cross",
        }
    }

    /// Whether offset `(dx, dy)` from the centre is inside a shape of half-size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Ellipse => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }
}

/// Factors of a procedurally rendered shape dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub shapes: Vec<Shape>,
    /// Half-sizes in pixels, one per scale value.
    pub scales: Vec<f64>,
    pub x_positions: usize,
    pub y_positions: usize,
    pub image_size: usize,
}

impl SynthSpec {
    /// 3 shapes × 2 scales × 16 × 16 positions = 1536 images of 32×32.
    pub fn desk() -> Self {
        Self {
            shapes: vec![Shape::Square, Shape::Ellipse, Shape::Cross],
            scales: vec![4.0, 7.0],
            x_positions: 16,
            y_positions: 16,
            image_size: 32,
        }
    }

    /// 3 shapes × 2 scales × 4 × 4 positions = 96 images.
    pub fn small() -> Self {
        Self { x_positions: 4, y_positions: 4, ..Self::desk() }
    }

    pub fn len(&self) -> usize {
        self.shapes.len() * self.scales.len() * self.x_positions * self.y_positions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cardinalities(&self) -> [usize; 4] {
        [self.shapes.len(), self.scales.len(), self.x_positions, self.y_positions]
    }
}

pub const SYNTH_FACTORS: [&str; 4] = ["shape", "scale", "x", "y"];

fn positions(count: usize, size: usize, margin: f64) -> Vec<f64> {
    let (lo, hi) = (margin, size as f64 - margin);
    if count == 1 {
        return vec![(lo + hi) / 2.0];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

/// Renders every factor combination as a binary image; `seed` shuffles row order.
pub fn synth_factors(spec: &SynthSpec, seed: u64) -> Result<FactorDataset> {
    if spec.is_empty() {
        return Err(config("synthetic spec has an empty factor list"));
    }
    if spec.scales.iter().any(|&r| r <= 0.0 || 2.0 * r + 2.0 > spec.image_size as f64) {
        return Err(config("every scale must fit inside the image"));
    }
    let size = spec.image_size;
    let margin = spec.scales.iter().cloned().fold(0.0, f64::max) + 1.0;
    let xs = positions(spec.x_positions, size, margin);
    let ys = positions(spec.y_positions, size, margin);
    let mut rows = Vec::with_capacity(spec.len());
    for (si, &shape) in spec.shapes.iter().enumerate() {
        for (ri, &r) in spec.scales.iter().enumerate() {
            for (xi, &cx) in xs.iter().enumerate() {
                for (yi, &cy) in ys.iter().enumerate() {
                    rows.push(([si, ri, xi, yi], shape, r, cx, cy));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);

    let n = rows.len();
    let mut data = Array2::<u8>::zeros((n, size * size));
    let mut factors = Array2::<usize>::zeros((n, 4));
    for (i, (f, shape, r, cx, cy)) in rows.iter().enumerate() {
        for py in 0..size {
            for px in 0..size {
                let dx = px as f64 + 0.5 - cx;
                let dy = py as f64 + 0.5 - cy;
                if shape.contains(dx, dy, *r) {
                    data[[i, py * size + px]] = 1;
                }
            }
        }
        for (j, &v) in f.iter().enumerate() {
            factors[[i, j]] = v;
        }
    }
    let mut ds = FactorDataset::new(Observations::Bytes { data, scale: 1.0 }, vec![size, size])?;
    ds.labels = Some(factors.column(0).to_vec());
    ds.factors = Some(factors);
    ds.factor_names = SYNTH_FACTORS.iter().map(|s| s.to_string()).collect();
    ds.factor_value_names = vec![
        spec.shapes.iter().map(|s| s.name().to_string()).collect(),
        if spec.scales.len() == 2 { vec!["small".into(), "large".into()] } else { Vec::new() },
        Vec::new(),
        Vec::new(),
    ];
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct SynthSidecar {
    spec: SynthSpec,
    seed: u64,
    n: usize,
}

/// Writes the dataset as an archive with keys `imgs`, `factors`, `labels`
/// plus a JSON sidecar `<path>.json` describing how it was generated.
pub fn save_synth_cache(ds: &FactorDataset, spec: &SynthSpec, seed: u64, path: &Path) -> Result<()> {
    let Observations::Bytes { data, .. } = &ds.observations else {
        return Err(contract("synthetic cache expects byte observations"));
    };
    let (n, size) = (ds.len(), spec.image_size);
    let imgs = data.clone().into_shape_with_order((n, size, size)).unwrap();
    let factors = ds.factors.as_ref().ok_or_else(|| contract("dataset has no factors"))?.mapv(|v| v as i64);
    let labels: Array1<i64> = ds.labels.as_ref().ok_or_else(|| contract("dataset has no labels"))?.iter().map(|&v| v as i64).collect();
    let mut npz = NpzWriter::new_compressed(File::create(path)?);
    let werr = |e: ndarray_npy::WriteNpzError| ingestion(path, e.to_string());
    npz.add_array("imgs", &imgs).map_err(werr)?;
    npz.add_array("factors", &factors).map_err(werr)?;
    npz.add_array("labels", &labels).map_err(werr)?;
    npz.finish().map_err(werr)?;
    let sidecar = SynthSidecar { spec: spec.clone(), seed, n };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Loads a cache written by [`save_synth_cache`] when its sidecar matches
/// `spec` and `seed`; otherwise renders and (re)writes it.
pub fn load_or_generate_synth(spec: &SynthSpec, seed: u64, path: &Path) -> Result<FactorDataset> {
    if let Ok(text) = std::fs::read_to_string(sidecar_path(path)) {
        if let Ok(side) = serde_json::from_str::<SynthSidecar>(&text) {
            if &side.spec == spec && side.seed == seed {
                if let Ok(ds) = load_synth_cache(spec, path) {
                    return Ok(ds);
                }
            }
        }
    }
    let ds = synth_factors(spec, seed)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_synth_cache(&ds, spec, seed, path)?;
    Ok(ds)
}

fn load_synth_cache(spec: &SynthSpec, path: &Path) -> Result<FactorDataset> {
    let mut npz = NpzReader::new(File::open(path)?).map_err(|e| ingestion(path, e.to_string()))?;
    let imgs: Array3<u8> = npz.by_name("imgs").map_err(|e| npz_err(path, "imgs", e))?;
    let factors: Array2<i64> = npz.by_name("factors").map_err(|e| npz_err(path, "factors", e))?;
    let labels: Array1<i64> = npz.by_name("labels").map_err(|e| npz_err(path, "labels", e))?;
    let (n, h, w) = imgs.dim();
    let data = imgs.into_shape_with_order((n, h * w)).unwrap();
    let mut ds = FactorDataset::new(Observations::Bytes { data, scale: 1.0 }, vec![h, w])?;
    ds.labels = Some(labels.iter().map(|&v| v as usize).collect());
    ds.factors = Some(factors.mapv(|v| v as usize));
    ds.factor_names = SYNTH_FACTORS.iter().map(|s| s.to_string()).collect();
    ds.factor_value_names = vec![
        spec.shapes.iter().map(|s| s.name().to_string()).collect(),
        if spec.scales.len() == 2 { vec!["small".into(), "large".into()] } else { Vec::new() },
        Vec::new(),
        Vec::new(),
    ];
    Ok(ds)
}

/// What a pruning predicate sees for one row.
#[derive(Debug, Clone, Copy)]
pub struct RowRef<'a> {
    pub index: usize,
    pub label: Option<usize>,
    pub factors: Option<ndarray::ArrayView1<'a, usize>>,
}

/// Fraction of removed rows above which [`prune_by_combination`] warns.
pub const PRUNE_WARN_FRACTION: f64 = 0.5;

/// Splits `ds` into rows failing (`train`) and satisfying (`heldout`) the predicate.
pub fn prune_by_combination<F>(ds: &FactorDataset, predicate: F) -> (FactorDataset, FactorDataset)
where
    F: Fn(RowRef<'_>) -> bool,
{
    let mut keep = Vec::new();
    let mut held = Vec::new();
    for i in 0..ds.len() {
        let row = RowRef {
            index: i,
            label: ds.labels.as_ref().map(|l| l[i]),
            factors: ds.factors.as_ref().map(|f| f.row(i)),
        };
        if predicate(row) {
            held.push(i);
        } else {
            keep.push(i);
        }
    }
    if held.len() as f64 > PRUNE_WARN_FRACTION * ds.len() as f64 {
        log::warn!("pruning removes {} of {} rows (more than half)", held.len(), ds.len());
    }
    (ds.subset(&keep), ds.subset(&held))
}

/// Conjunction of `factor = value` clauses, e.g. `shape=cross & scale=large`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorPredicate {
    pub clauses: Vec<(usize, usize)>,
}

impl FactorPredicate {
    /// Values may be given by index or by display name.
    pub fn parse(expr: &str, ds: &FactorDataset) -> Result<Self> {
        let mut clauses = Vec::new();
        for clause in expr.split(['&', ',']).map(str::trim).filter(|c| !c.is_empty()) {
            let (name, value) = clause
                .split_once('=')
                .ok_or_else(|| config(format!("predicate clause `{clause}` should look like factor=value")))?;
            let (name, value) = (name.trim(), value.trim());
            let f = ds
                .factor_index(name)
                .ok_or_else(|| config(format!("unknown factor `{name}`; known: {}", ds.factor_names.join(", "))))?;
            let v = match value.parse::<usize>() {
                Ok(v) => v,
                Err(_) => ds
                    .factor_value_names
                    .get(f)
                    .and_then(|names| names.iter().position(|n| n == value))
                    .ok_or_else(|| config(format!("unknown value `{value}` for factor `{name}`")))?,
            };
            clauses.push((f, v));
        }
        if clauses.is_empty() {
            return Err(config("empty factor predicate"));
        }
        Ok(Self { clauses })
    }

    pub fn matches(&self, row: RowRef<'_>) -> bool {
        match row.factors {
            Some(f) => self.clauses.iter().all(|&(i, v)| f[i] == v),
            None => false,
        }
    }
}

/// Seeded without-replacement minibatches; the partial last batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(contract(format!("batch size {batch} must be in 1..={n}")));
        }
        Ok(Self { n, batch, rng })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    /// Index batches of the next epoch.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut self.rng);
        perm.chunks_exact(self.batch).map(<[usize]>::to_vec).collect()
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

/// A sampler over `n` rows seeded by `seed`.
pub fn batch_iter(n: usize, batch: usize, seed: u64) -> Result<BatchSampler> {
    BatchSampler::new(n, batch, ChaCha8Rng::seed_from_u64(seed))
}

/// Distinct values per factor column.
pub fn factor_cardinalities(factors: &Array2<usize>) -> Vec<usize> {
    factors
        .columns()
        .into_iter()
        .map(|c| c.iter().collect::<BTreeSet<_>>().len())
        .collect()
}

/// Where a run's data comes from, as recorded in configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Rendered shapes; cached under the data root when one is given.
    Synth {
        #[serde(default = "SynthSpec::desk")]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    Mnist { images: PathBuf, labels: PathBuf },
    Dsprites { path: PathBuf },
    SynthCorpus { spec: crate::topics::CorpusSpec },
    Corpus { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    /// Factor predicate whose matching rows are removed, e.g. `shape=cross&scale=large`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude: Option<String>,
}

impl DatasetSpec {
    pub fn new(source: DataSource) -> Self {
        Self { source, exclude: None }
    }

    /// Loads the full dataset; relative paths resolve against `root`.
    pub fn load_full(&self, root: Option<&Path>) -> Result<FactorDataset> {
        let resolve = |p: &Path| match root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        };
        match &self.source {
            DataSource::Synth { spec, seed } => match root {
                Some(r) => {
                    let key = hex::encode(sha2::Sha256::digest(serde_json::to_vec(&(spec, seed))?));
                    load_or_generate_synth(spec, *seed, &r.join(format!("synth-{}.npz", &key[..16])))
                }
                None => synth_factors(spec, *seed),
            },
            DataSource::Mnist { images, labels } => load_mnist_idx(&resolve(images), &resolve(labels)),
            DataSource::Dsprites { path } => load_dsprites(&resolve(path)),
            DataSource::SynthCorpus { spec } => crate::topics::synth_corpus(spec)?.to_dataset(),
            DataSource::Corpus { path } => crate::topics::Corpus::load(&resolve(path))?.to_dataset(),
        }
    }

    /// The training rows: the full dataset minus rows matching `exclude`.
    pub fn load(&self, root: Option<&Path>) -> Result<FactorDataset> {
        let ds = self.load_full(root)?;
        match &self.exclude {
            None => Ok(ds),
            Some(expr) => {
                let pred = FactorPredicate::parse(expr, &ds)?;
                Ok(prune_by_combination(&ds, |r| pred.matches(r)).0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_round_trip_and_magic_checks() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        write_idx(&img, IDX_IMAGES_MAGIC, &[2, 2, 2], &[0, 255, 128, 1, 2, 3, 4, 5]).unwrap();
        write_idx(&lab, IDX_LABELS_MAGIC, &[2], &[7, 3]).unwrap();
        let ds = load_mnist_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.item_shape, vec![2, 2]);
        assert_eq!(ds.labels, Some(vec![7, 3]));
        assert_eq!(ds.observations.row(0)[1], 1.0);

        let err = load_mnist_idx(&img, &img).unwrap_err().to_string();
        assert!(err.contains("0x00000801") && err.contains("0x00000803"), "{err}");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_mnist_idx(&img, &lab).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn synth_counts_and_determinism() {
        let ds = synth_factors(&SynthSpec::small(), 3).unwrap();
        assert_eq!(ds.len(), 96);
        let again = synth_factors(&SynthSpec::small(), 3).unwrap();
        assert_eq!(ds, again);
        assert_eq!(factor_cardinalities(ds.factors.as_ref().unwrap()), vec![3, 2, 4, 4]);
        assert_eq!(synth_factors(&SynthSpec::desk(), 0).unwrap().len(), 1536);
        let empty = SynthSpec { shapes: vec![], ..SynthSpec::small() };
        assert!(synth_factors(&empty, 0).is_err());
    }

    #[test]
    fn batches_are_permutation_chunks() {
        let mut s = batch_iter(10, 3, 1).unwrap();
        let epoch = s.next_epoch();
        assert_eq!(epoch.len(), 3);
        let all: BTreeSet<usize> = epoch.iter().flatten().copied().collect();
        assert_eq!(all.len(), 9);
        assert!(batch_iter(3, 4, 0).is_err());
        assert_eq!(batch_iter(10, 3, 1).unwrap().next_epoch(), epoch);
    }
}
