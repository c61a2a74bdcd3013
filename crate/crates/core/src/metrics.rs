//! Disentanglement measurements over trained encoders: binned and Concrete
//! mutual information, per-dimension data MI, MIG, and the Kim and Eastwood scores.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use hfvae_autograd::{Tape, Tensor};
use ndarray::{s, Array1, Array2, Axis, IxDyn};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FactorDataset;
use crate::distributions::{log_softmax, GroupKind, GroupPosterior, LatentNoise};
use crate::error::{config, contract, Result};
use crate::models::{ForwardState, Model};
use crate::objective::{compute_terms, total_correlation_estimate, Decomposition, TcScope};

pub const DEFAULT_BINS: usize = 10;

/// Equal-count bins from ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileBins {
    /// Lower value of each bin after the first (`n_bins - 1` entries).
    pub edges: Vec<f64>,
    pub assignment: Vec<usize>,
    /// All values equal: everything sits in bin 0.
    pub degenerate: bool,
}

/// Bins by rank so that each bin holds `⌊N/n_bins⌋` or one more point; equal
/// values are ordered by index.
pub fn quantile_bins(values: &[f64], n_bins: usize) -> Result<QuantileBins> {
    let n = values.len();
    if n_bins == 0 || n < n_bins {
        return Err(contract(format!("need at least {n_bins} values for {n_bins} bins, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(contract("values must be finite"));
    }
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return Ok(QuantileBins { edges: vec![first; n_bins - 1], assignment: vec![0; n], degenerate: true });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut assignment = vec![0; n];
    let mut edges = Vec::with_capacity(n_bins - 1);
    for (rank, &i) in order.iter().enumerate() {
        let bin = rank * n_bins / n;
        if rank > 0 && (rank - 1) * n_bins / n != bin {
            edges.push(values[i]);
        }
        assignment[i] = bin;
    }
    Ok(QuantileBins { edges, assignment, degenerate: false })
}

fn plugin_mi(joint: &BTreeMap<(usize, usize), f64>) -> f64 {
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(a, b), &p) in joint {
        *pa.entry(a).or_default() += p;
        *pb.entry(b).or_default() += p;
    }
    let mi: f64 = joint
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(&(a, b), &p)| p * (p / (pa[&a] * pb[&b])).ln())
        .sum();
    mi.max(0.0)
}

/// Plug-in MI (nats) between quantile bins of `values` and integer `labels`.
pub fn binned_mi(values: &[f64], labels: &[usize], n_bins: usize) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(contract("values and labels differ in length"));
    }
    let bins = quantile_bins(values, n_bins)?;
    if bins.degenerate {
        return Ok(0.0);
    }
    let n = values.len() as f64;
    let mut joint = BTreeMap::new();
    for (&b, &y) in bins.assignment.iter().zip(labels) {
        *joint.entry((b, y)).or_insert(0.0) += 1.0 / n;
    }
    Ok(plugin_mi(&joint))
}

/// MI (nats) between a Concrete variable and labels from soft assignments
/// `q(z = l | x)`, averaged within each class.
pub fn concrete_mi(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let (n, k) = probs.dim();
    if n != labels.len() {
        return Err(contract("probabilities and labels differ in length"));
    }
    for row in probs.rows() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(contract("probability rows must lie on the simplex"));
        }
    }
    let mut per_class: BTreeMap<usize, (f64, Array1<f64>)> = BTreeMap::new();
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        let e = per_class.entry(y).or_insert_with(|| (0.0, Array1::zeros(k)));
        e.0 += 1.0;
        e.1 += &row;
    }
    let mut joint = BTreeMap::new();
    for (&y, (count, sum)) in &per_class {
        let p_y = count / n as f64;
        for l in 0..k {
            joint.insert((l, y), sum[l] / count * p_y);
        }
    }
    Ok(plugin_mi(&joint))
}

/// Posterior summaries over a dataset: Normal means and Concrete probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeTable {
    /// `[N, normal dims]`.
    pub normal_means: Array2<f64>,
    /// Latent slot index of each Normal column.
    pub normal_slots: Vec<usize>,
    /// `[N, K]` per Concrete group, `softmax(logits)`.
    pub concrete_probs: Vec<Array2<f64>>,
    pub concrete_slots: Vec<usize>,
    pub labels: Option<Vec<usize>>,
    pub factors: Option<Array2<usize>>,
}

impl CodeTable {
    /// Encodes every row of `ds` in evaluation mode, `batch_size` rows at a time.
    pub fn from_model(model: &Model, ds: &FactorDataset, batch_size: usize) -> Result<Self> {
        let layout = model.layout();
        let n = ds.len();
        let mut normal_means = Array2::zeros((n, layout.normal_dims()));
        let mut concrete_probs: Vec<Array2<f64>> =
            layout.concrete_groups().iter().map(|&d| Array2::zeros((n, layout.group(d).dim))).collect();
        let rows: Vec<usize> = (0..n).collect();
        for chunk in rows.chunks(batch_size.max(1)) {
            let tape = Tape::new();
            let params = model.params.bind(&tape);
            let posts = model.encode(&params, tape.constant(ds.batch(chunk)), &mut ForwardState::eval())?;
            let (mut col, mut cg) = (0, 0);
            for post in &posts {
                match post {
                    GroupPosterior::Normal { mean, .. } => {
                        let v = mean.value();
                        let d = v.shape()[1];
                        for (i, &r) in chunk.iter().enumerate() {
                            for j in 0..d {
                                normal_means[[r, col + j]] = v[[i, j]];
                            }
                        }
                        col += d;
                    }
                    GroupPosterior::Concrete { logits } => {
                        let v = logits.value();
                        let k = v.shape()[1];
                        for (i, &r) in chunk.iter().enumerate() {
                            let row: Vec<f64> = (0..k).map(|j| v[[i, j]]).collect();
                            for (j, lp) in log_softmax(&row).into_iter().enumerate() {
                                concrete_probs[cg][[r, j]] = lp.exp();
                            }
                        }
                        cg += 1;
                    }
                }
            }
        }
        let mut normal_slots = Vec::new();
        let mut concrete_slots = Vec::new();
        for d in 0..layout.n_groups() {
            match layout.group(d).kind {
                GroupKind::Normal => normal_slots.extend(layout.slot_range(d)),
                GroupKind::Concrete => concrete_slots.push(layout.slot_range(d).start),
            }
        }
        Ok(Self {
            normal_means,
            normal_slots,
            concrete_probs,
            concrete_slots,
            labels: ds.labels.clone(),
            factors: ds.factors.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.normal_means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normal means followed by every Concrete group's probabilities, `[N, P]`.
    pub fn features(&self) -> Array2<f64> {
        let mut parts = vec![self.normal_means.view()];
        parts.extend(self.concrete_probs.iter().map(|p| p.view()));
        ndarray::concatenate(Axis(1), &parts).expect("row counts agree")
    }
}

/// Concrete-group MI minus the largest binned MI of any Normal dimension.
pub fn mig(code: &CodeTable, labels: &[usize]) -> Result<f64> {
    let c = code.concrete_probs.first().ok_or_else(|| config("MIG needs a Concrete group in the layout"))?;
    let best_normal = normal_mis(code, labels)?.into_iter().fold(0.0, f64::max);
    Ok(concrete_mi(c, labels)? - best_normal)
}

/// Binned MI of every Normal dimension with `labels`.
pub fn normal_mis(code: &CodeTable, labels: &[usize]) -> Result<Vec<f64>> {
    code.normal_means
        .columns()
        .into_iter()
        .map(|col| binned_mi(&col.to_vec(), labels, DEFAULT_BINS))
        .collect()
}

/// Runs the decomposition over consecutive batches of `ds` in evaluation mode.
pub fn for_each_eval_batch<F>(model: &Model, ds: &FactorDataset, batch_size: usize, seed: u64, mut f: F) -> Result<usize>
where
    F: FnMut(&Decomposition<'_>) -> Result<()>,
{
    let b = batch_size.min(ds.len());
    if b < 2 {
        return Err(contract("evaluation needs batches of at least two rows"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..ds.len()).collect();
    let mut count = 0;
    for chunk in rows.chunks_exact(b) {
        let x = ds.batch(chunk);
        let noise = LatentNoise::sample(model.layout(), b, &mut rng);
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let dec = compute_terms(&tape, model, &params, &x, ds.len(), &noise, &mut ForwardState::eval())?;
        f(&dec)?;
        count += 1;
    }
    Ok(count)
}

/// Mean and standard error of `I(x; z_{d,e})` per latent slot.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataMi {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub batches: usize,
    pub dataset_size: usize,
}

/// Per-slot data MI averaged over evaluation batches of size `batch_size`.
pub fn data_mi_per_dim(model: &Model, ds: &FactorDataset, batch_size: usize, seed: u64) -> Result<DataMi> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let batches = for_each_eval_batch(model, ds, batch_size, seed, |dec| {
        rows.push(dec.per_dim_mi.value().iter().copied().collect());
        Ok(())
    })?;
    let s = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..s).map(|e| rows.iter().map(|r| r[e]).sum::<f64>() / n).collect();
    let stderr = (0..s)
        .map(|e| {
            if rows.len() < 2 {
                return f64::NAN;
            }
            let var = rows.iter().map(|r| (r[e] - mean[e]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(DataMi { mean, stderr, batches, dataset_size: ds.len() })
}

/// Mean stratified total-correlation estimate over evaluation batches.
pub fn tc_estimate(model: &Model, ds: &FactorDataset, batch_size: usize, seed: u64, scope: TcScope) -> Result<f64> {
    let mut total = 0.0;
    let batches = for_each_eval_batch(model, ds, batch_size, seed, |dec| {
        total += total_correlation_estimate(&dec.matrix, dec.dataset_size, scope)?;
        Ok(())
    })?;
    Ok(total / batches as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KimConfig {
    pub votes: usize,
    pub batch_per_vote: usize,
    pub seed: u64,
}

impl Default for KimConfig {
    fn default() -> Self {
        Self { votes: 800, batch_per_vote: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KimResult {
    pub accuracy: f64,
    /// Representation columns with zero variance, left out of the votes.
    pub excluded_dims: Vec<usize>,
    /// Factors with more than one value, the only ones voted on.
    pub factors_used: Vec<usize>,
    /// Majority factor per representation column.
    pub classifier: Vec<usize>,
}

/// Fixed-factor majority-vote accuracy of `repr` (`[N, P]`) against `factors` (`[N, F]`).
pub fn kim_metric(repr: &Array2<f64>, factors: &Array2<usize>, cfg: &KimConfig) -> Result<KimResult> {
    let (n, p) = repr.dim();
    if factors.nrows() != n {
        return Err(contract("representation and factors differ in row count"));
    }
    if cfg.votes < 2 || cfg.batch_per_vote < 2 {
        return Err(config("kim metric needs at least 2 votes and 2 rows per vote"));
    }
    let std: Vec<f64> = repr.columns().into_iter().map(|c| c.std(0.0)).collect();
    let active: Vec<usize> = (0..p).filter(|&j| std[j] > 1e-12).collect();
    let excluded_dims: Vec<usize> = (0..p).filter(|&j| std[j] <= 1e-12).collect();
    if active.is_empty() {
        return Err(contract("every representation dimension is constant"));
    }
    let mut by_value: Vec<BTreeMap<usize, Vec<usize>>> = vec![BTreeMap::new(); factors.ncols()];
    for (i, row) in factors.rows().into_iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            by_value[f].entry(v).or_default().push(i);
        }
    }
    let factors_used: Vec<usize> = (0..factors.ncols()).filter(|&f| by_value[f].len() > 1).collect();
    if factors_used.is_empty() {
        return Err(contract("no factor takes more than one value"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut votes = Vec::with_capacity(cfg.votes);
    for _ in 0..cfg.votes {
        let f = *factors_used.choose(&mut rng).unwrap();
        let values: Vec<&Vec<usize>> = by_value[f].values().collect();
        let pool = values[rng.random_range(0..values.len())];
        let batch: Vec<usize> = (0..cfg.batch_per_vote).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let mut best = (f64::INFINITY, active[0]);
        for &j in &active {
            let xs: Vec<f64> = batch.iter().map(|&i| repr[[i, j]] / std[j]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            if var < best.0 {
                best = (var, j);
            }
        }
        votes.push((best.1, f));
    }
    let (train, test) = votes.split_at(votes.len() / 2);
    let mut counts = vec![BTreeMap::<usize, usize>::new(); p];
    let mut overall = BTreeMap::<usize, usize>::new();
    for &(j, f) in train {
        *counts[j].entry(f).or_default() += 1;
        *overall.entry(f).or_default() += 1;
    }
    let argmax = |m: &BTreeMap<usize, usize>| m.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&k, _)| k);
    let fallback = argmax(&overall).unwrap_or(factors_used[0]);
    let classifier: Vec<usize> = counts.iter().map(|m| argmax(m).unwrap_or(fallback)).collect();
    let correct = test.iter().filter(|&&(j, f)| classifier[j] == f).count();
    Ok(KimResult { accuracy: correct as f64 / test.len() as f64, excluded_dims, factors_used, classifier })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    /// `None` grows trees until leaves are pure or hold one sample.
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 100, max_depth: None, seed: 0 }
    }
}

/// Bagged regression trees with all features considered at every split.
/// Returns per-feature MSE-reduction importances, normalized per tree and averaged.
pub fn forest_importances(x: &Array2<f64>, y: &[f64], cfg: &ForestConfig) -> Result<Vec<f64>> {
    let (n, p) = x.dim();
    if n != y.len() || n < 2 {
        return Err(contract("regression needs at least two aligned rows"));
    }
    if cfg.trees == 0 {
        return Err(config("forest needs at least one tree"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total = vec![0.0; p];
    for _ in 0..cfg.trees {
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut imp = vec![0.0; p];
        grow(x, y, sample, 0, cfg.max_depth, &mut imp);
        let s: f64 = imp.iter().sum();
        if s > 0.0 {
            for (t, v) in total.iter_mut().zip(&imp) {
                *t += v / s;
            }
        }
    }
    Ok(total.into_iter().map(|v| v / cfg.trees as f64).collect())
}

/// Splits `idx` recursively, accumulating each split's reduction in summed squared error.
fn grow(x: &Array2<f64>, y: &[f64], idx: Vec<usize>, depth: usize, max_depth: Option<usize>, imp: &mut [f64]) {
    let n = idx.len();
    if n < 2 || max_depth.is_some_and(|m| depth >= m) {
        return;
    }
    let sum: f64 = idx.iter().map(|&i| y[i]).sum();
    let sq: f64 = idx.iter().map(|&i| y[i] * y[i]).sum();
    let sse = sq - sum * sum / n as f64;
    if sse <= 1e-12 * (1.0 + sq) {
        return;
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.clone();
    for f in 0..x.ncols() {
        order.sort_by(|&a, &b| x[[a, f]].total_cmp(&x[[b, f]]));
        let (mut ls, mut lq) = (0.0, 0.0);
        for k in 0..n - 1 {
            let v = y[order[k]];
            ls += v;
            lq += v * v;
            let (xa, xb) = (x[[order[k], f]], x[[order[k + 1], f]]);
            if xa == xb {
                continue;
            }
            let (nl, nr) = ((k + 1) as f64, (n - k - 1) as f64);
            let (rs, rq) = (sum - ls, sq - lq);
            let child = (lq - ls * ls / nl) + (rq - rs * rs / nr);
            let gain = sse - child;
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, f, 0.5 * (xa + xb)));
            }
        }
    }
    let Some((gain, f, threshold)) = best else { return };
    if gain <= 0.0 {
        return;
    }
    imp[f] += gain;
    let (left, right): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x[[i, f]] <= threshold);
    grow(x, y, left, depth + 1, max_depth, imp);
    grow(x, y, right, depth + 1, max_depth, imp);
}

#[derive(Debug, Clone, PartialEq)]
pub struct EastwoodResult {
    /// Importance-weighted disentanglement.
    pub score: f64,
    /// `[code dims, factors]`; each factor's column sums to 1.
    pub importance: Array2<f64>,
    /// Disentanglement of each code dimension.
    pub per_dim: Vec<f64>,
    /// Constant code dimensions, given zero importance.
    pub dropped_dims: Vec<usize>,
    /// Only one factor: the score is 1 by construction and carries no information.
    pub single_factor: bool,
}

/// Regresses every factor on the code with a random forest and scores how
/// concentrated each code dimension's importance is on a single factor.
pub fn eastwood_disentanglement(code: &Array2<f64>, factors: &Array2<usize>, cfg: &ForestConfig) -> Result<EastwoodResult> {
    let (n, p) = code.dim();
    let nf = factors.ncols();
    if factors.nrows() != n {
        return Err(contract("code and factors differ in row count"));
    }
    if nf == 0 {
        return Err(contract("no factors"));
    }
    let dropped_dims: Vec<usize> = (0..p).filter(|&j| code.column(j).std(0.0) <= 1e-12).collect();
    let kept: Vec<usize> = (0..p).filter(|j| !dropped_dims.contains(j)).collect();
    if !dropped_dims.is_empty() {
        log::info!("eastwood: dropping constant code dimensions {dropped_dims:?}");
    }
    if kept.is_empty() {
        return Err(contract("every code dimension is constant"));
    }
    let x = code.select(Axis(1), &kept);
    let mut importance = Array2::<f64>::zeros((p, nf));
    for f in 0..nf {
        let y: Vec<f64> = factors.column(f).iter().map(|&v| v as f64).collect();
        let tree_cfg = ForestConfig { seed: cfg.seed.wrapping_add(f as u64), ..*cfg };
        let imp = forest_importances(&x, &y, &tree_cfg)?;
        for (k, &j) in kept.iter().enumerate() {
            importance[[j, f]] = imp[k];
        }
    }
    let total: f64 = importance.sum();
    let mut per_dim = vec![0.0; p];
    let mut score = 0.0;
    for j in 0..p {
        let row = importance.slice(s![j, ..]);
        let rs = row.sum();
        if rs <= 0.0 {
            continue;
        }
        let entropy = if nf == 1 {
            0.0
        } else {
            -row.iter().filter(|&&v| v > 0.0).map(|&v| (v / rs) * (v / rs).ln()).sum::<f64>() / (nf as f64).ln()
        };
        per_dim[j] = 1.0 - entropy;
        if total > 0.0 {
            score += rs / total * per_dim[j];
        }
    }
    Ok(EastwoodResult { score, importance, per_dim, dropped_dims, single_factor: nf == 1 })
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: serde_json::Value,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Number of datapoints the estimate used.
    pub n: usize,
}

/// Writes an importance matrix as CSV with one row per code dimension.
pub fn write_importance_csv(importance: &Array2<f64>, factor_names: &[String], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..importance.ncols())
        .map(|f| factor_names.get(f).cloned().unwrap_or_else(|| format!("factor_{f}")))
        .collect();
    writeln!(out, "dim,{}", header.join(","))?;
    for (j, row) in importance.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{j},{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Flat `[N, D]` tensor of `rows` of a matrix, for encoders fed by hand.
pub fn rows_tensor(m: &Array2<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(&[m.nrows(), m.ncols()]), m.iter().copied().collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bins_hold_equal_counts() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let b = quantile_bins(&v, 10).unwrap();
        for k in 0..10 {
            assert_eq!(b.assignment.iter().filter(|&&a| a == k).count(), 10);
        }
        assert_eq!(b.edges.len(), 9);
        assert_eq!(b.edges[0], 11.0);
        let b = quantile_bins(&[2.0; 20], 10).unwrap();
        assert!(b.degenerate);
        let b = quantile_bins(&(0..10).map(f64::from).collect::<Vec<_>>(), 10).unwrap();
        assert_eq!(b.assignment, (0..10).collect::<Vec<_>>());
        assert!(quantile_bins(&[1.0; 5], 10).is_err());
    }

    #[test]
    fn concrete_mi_cell_sum() {
        let probs = array![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mi = concrete_mi(&probs, &[0, 1, 2]).unwrap();
        let expected = (2.0 / 3.0) * 1.5f64.ln() + 3.0f64.ln() / 3.0;
        assert!((mi - expected).abs() < 1e-12);
        let uniform = Array2::from_elem((6, 3), 1.0 / 3.0);
        assert!(concrete_mi(&uniform, &[0, 1, 2, 0, 1, 2]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sign_split_binned_mi() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 - 499.5).collect();
        let y: Vec<usize> = v.iter().map(|&x| usize::from(x > 0.0)).collect();
        assert!((binned_mi(&v, &y, 10).unwrap() - 2f64.ln()).abs() < 0.01);
    }

    #[test]
    fn forest_finds_the_relevant_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((200, 3), |_| rng.random::<f64>());
        let y: Vec<f64> = x.column(1).iter().map(|v| (v * 4.0).floor()).collect();
        let imp = forest_importances(&x, &y, &ForestConfig { trees: 10, ..Default::default() }).unwrap();
        assert!(imp[1] > 0.9, "{imp:?}");
    }
}
