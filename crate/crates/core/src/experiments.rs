//! Desk-scale experiments: a trained-model summary, hyperparameter sweeps and
//! the prune-and-retrain generalization check.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{prune_by_combination, DataSource, DatasetSpec, FactorDataset, FactorPredicate, SynthSpec};
use crate::distributions::{LatentLayout, DEFAULT_TEMPERATURE};
use crate::error::{config, contract, Error, Result};
use crate::metrics::{binned_mi, concrete_mi, data_mi_per_dim, mig, normal_mis, tc_estimate, CodeTable, DEFAULT_BINS};
use crate::models::{Architecture, LikelihoodKind, Model, ModelConfig};
use crate::objective::TcScope;
use crate::topics::{correlation_summary, topic_correlations, CorpusSpec, CorrelationSummary};
use crate::training::{evaluate, train, ObjectiveConfig, TrainConfig, TrainOutcome};

/// Data-MI below which a dimension counts as pruned.
pub const PRUNED_MI: f64 = 0.1;

/// Six Normal dimensions followed by a three-way Concrete variable.
pub fn desk_layout() -> LatentLayout {
    LatentLayout::parse("normal:6,concrete:3", DEFAULT_TEMPERATURE).expect("valid layout")
}

/// desk-mlp on the 1536-image synthetic shapes, batches of 256.
pub fn desk_config(objective: ObjectiveConfig, epochs: usize, seed: u64) -> TrainConfig {
    let spec = SynthSpec::desk();
    let model = ModelConfig::new(
        Architecture::DeskMlp,
        vec![spec.image_size, spec.image_size],
        desk_layout(),
        LikelihoodKind::Bernoulli,
    );
    let mut cfg = TrainConfig::new(model, objective);
    cfg.dataset = Some(DatasetSpec::new(DataSource::Synth { spec, seed: 0 }));
    cfg.batch_size = 256;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg
}

/// What a trained model encodes about the data and the label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    /// `I(x; z_{d,e})` per latent slot.
    pub data_mi: Vec<f64>,
    /// Normal slots whose data MI is below [`PRUNED_MI`].
    pub pruned_normal: Vec<usize>,
    /// Summed data MI over all slots.
    pub total_mi: f64,
    /// Concrete MI with the label, when the layout has a Concrete group and the data has labels.
    pub concrete_label_mi: Option<f64>,
    /// Largest binned MI of a Normal dimension with the label.
    pub max_normal_label_mi: Option<f64>,
    pub mig: Option<f64>,
    /// Total correlation between all latent slots.
    pub tc: f64,
    pub elbo: f64,
    pub dataset_size: usize,
}

/// Evaluates a trained model on `ds` with evaluation batches of `batch_size`.
pub fn summarize(model: &Model, ds: &FactorDataset, batch_size: usize, seed: u64) -> Result<RunSummary> {
    let mi = data_mi_per_dim(model, ds, batch_size, seed)?;
    let code = CodeTable::from_model(model, ds, batch_size)?;
    let pruned_normal = code.normal_slots.iter().copied().filter(|&e| mi.mean[e] < PRUNED_MI).collect();
    let (mut concrete_label_mi, mut max_normal_label_mi, mut gap) = (None, None, None);
    if let Some(labels) = &ds.labels {
        if ds.len() >= DEFAULT_BINS {
            let normals = normal_mis(&code, labels)?;
            max_normal_label_mi = normals.iter().copied().reduce(f64::max);
            if let Some(c) = code.concrete_probs.first() {
                concrete_label_mi = Some(concrete_mi(c, labels)?);
                gap = Some(mig(&code, labels)?);
            }
        }
    }
    let terms = evaluate(model, ds, batch_size, seed)?;
    Ok(RunSummary {
        total_mi: mi.mean.iter().sum(),
        data_mi: mi.mean,
        pruned_normal,
        concrete_label_mi,
        max_normal_label_mi,
        mig: gap,
        tc: tc_estimate(model, ds, batch_size, seed, TcScope::Slots)?,
        elbo: terms.elbo(),
        dataset_size: ds.len(),
    })
}

/// Trains `cfg` on `ds` and summarizes the result.
pub fn train_and_summarize(cfg: &TrainConfig, ds: &FactorDataset, out_dir: Option<&Path>) -> Result<(TrainOutcome, RunSummary)> {
    let outcome = train(cfg.clone(), ds, out_dir)?;
    let summary = summarize(&outcome.model, ds, cfg.batch_size, cfg.seed)?;
    Ok((outcome, summary))
}

/// Objective hyperparameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    Alpha,
    Beta,
    Gamma,
    /// β and γ set to the same value.
    BetaGamma,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "beta" => Ok(Self::Beta),
            "gamma" => Ok(Self::Gamma),
            "beta-gamma" | "gamma-beta" | "gamma=beta" | "beta=gamma" => Ok(Self::BetaGamma),
            other => Err(config(format!("unknown sweep parameter `{other}`; valid: alpha, beta, gamma, beta-gamma"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Alpha => "alpha",
            Self::Beta => "beta",
            Self::Gamma => "gamma",
            Self::BetaGamma => "beta-gamma",
        })
    }
}

impl SweepParam {
    /// `base` with this parameter set to `value`; missing hyperparameters default to 1.
    pub fn apply(&self, base: &ObjectiveConfig, value: f64) -> ObjectiveConfig {
        let mut o = base.clone();
        o.weights = None;
        o.alpha = Some(o.alpha.unwrap_or(1.0));
        o.beta = Some(o.beta.unwrap_or(1.0));
        o.gamma = Some(o.gamma.unwrap_or(1.0));
        match self {
            Self::Alpha => o.alpha = Some(value),
            Self::Beta => o.beta = Some(value),
            Self::Gamma => o.gamma = Some(value),
            Self::BetaGamma => {
                o.beta = Some(value);
                o.gamma = Some(value);
            }
        }
        o
    }
}

/// One trained cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub tc: f64,
    pub mi: f64,
    pub mig: f64,
    /// `ok`, or the error that stopped this cell.
    pub status: String,
}

/// Trains every (value, seed) cell; failures become rows with a status and NaN metrics.
pub fn sweep(
    base: &TrainConfig,
    ds: &FactorDataset,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds.is_empty() {
        return Err(config("sweep needs at least one value and one seed"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(config(format!("sweep values must be finite, got {v}")));
    }
    let mut rows = Vec::new();
    for &value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.objective = param.apply(&base.objective, value);
            cfg.seed = seed;
            let row = match train_and_summarize(&cfg, ds, None) {
                Ok((_, s)) => SweepRow {
                    param: param.to_string(),
                    value,
                    seed,
                    tc: s.tc,
                    mi: s.total_mi,
                    mig: s.mig.unwrap_or(f64::NAN),
                    status: "ok".into(),
                },
                Err(e) => SweepRow {
                    param: param.to_string(),
                    value,
                    seed,
                    tc: f64::NAN,
                    mi: f64::NAN,
                    mig: f64::NAN,
                    status: e.to_string(),
                },
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean of `metric` over successful rows with `value`.
pub fn sweep_mean(rows: &[SweepRow], value: f64, metric: impl Fn(&SweepRow) -> f64) -> f64 {
    let xs: Vec<f64> = rows.iter().filter(|r| r.value == value && r.status == "ok").map(metric).collect();
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Which rows to hold out before retraining.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneTarget {
    /// Rows matching a factor predicate. `feature_factor` names the factor
    /// whose inferred feature is examined on the held-out rows.
    Predicate { expr: String, feature_factor: String },
    /// Rows of class `class` whose value on latent slot `feature_slot` of a
    /// reference model lies above its `quantile` within that class.
    ClassFeature { reference: Box<Model>, class: usize, feature_slot: usize, quantile: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneReport {
    pub train_size: usize,
    pub heldout_size: usize,
    /// Mean reconstruction log-likelihood.
    pub train_rec: f64,
    pub heldout_rec: f64,
    /// `|heldout - train| / |train|`.
    pub relative_gap: f64,
    /// Normal column (of the retrained code) used as the pruned feature.
    pub feature_column: usize,
    pub threshold: f64,
    /// +1 if the held-out side lies above the threshold, -1 if below.
    pub direction: f64,
    pub heldout_beyond_fraction: f64,
    pub train_feature: Vec<f64>,
    pub heldout_feature: Vec<f64>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn quantile(xs: &mut [f64], q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (xs.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Splits off the target rows, retrains `cfg` from scratch on the rest and
/// compares reconstruction and the inferred pruned feature on both parts.
pub fn prune_retrain(cfg: &TrainConfig, ds: &FactorDataset, target: &PruneTarget, out_dir: Option<&Path>) -> Result<PruneReport> {
    let (train_ds, held_ds, feature_of_train, held_flag): (FactorDataset, FactorDataset, Vec<Option<bool>>, _);
    match target {
        PruneTarget::Predicate { expr, feature_factor } => {
            let pred = FactorPredicate::parse(expr, ds)?;
            let f = ds
                .factor_index(feature_factor)
                .ok_or_else(|| config(format!("unknown factor `{feature_factor}`")))?;
            let held_value = pred
                .clauses
                .iter()
                .find(|(i, _)| *i == f)
                .map(|&(_, v)| v)
                .ok_or_else(|| config(format!("predicate does not constrain factor `{feature_factor}`")))?;
            let (t, h) = prune_by_combination(ds, |r| pred.matches(r));
            let flags = t.factors.as_ref().unwrap().column(f).iter().map(|&v| Some(v == held_value)).collect();
            train_ds = t;
            held_ds = h;
            feature_of_train = flags;
            held_flag = None;
        }
        PruneTarget::ClassFeature { reference, class, feature_slot, quantile: q } => {
            let labels = ds.labels.as_ref().ok_or_else(|| config("class pruning needs labels"))?;
            let code = CodeTable::from_model(reference, ds, cfg.batch_size)?;
            let col = code
                .normal_slots
                .iter()
                .position(|&e| e == *feature_slot)
                .ok_or_else(|| config(format!("latent slot {feature_slot} is not a Normal dimension")))?;
            let feat = code.normal_means.column(col).to_vec();
            let mut class_vals: Vec<f64> = (0..ds.len()).filter(|&i| labels[i] == *class).map(|i| feat[i]).collect();
            if class_vals.is_empty() {
                return Err(config(format!("no rows of class {class}")));
            }
            let cut = quantile(&mut class_vals, *q);
            let (t, h) = prune_by_combination(ds, |r| r.label == Some(*class) && feat[r.index] > cut);
            let keep: Vec<usize> = (0..ds.len()).filter(|&i| !(labels[i] == *class && feat[i] > cut)).collect();
            feature_of_train = keep.iter().map(|&i| (labels[i] == *class).then_some(false)).collect();
            held_flag = Some((keep, feat));
            train_ds = t;
            held_ds = h;
        }
    }
    if held_ds.is_empty() {
        return Err(config("pruning target matches no rows"));
    }
    if train_ds.len() < cfg.batch_size {
        return Err(config("too few rows remain after pruning for one batch"));
    }

    let outcome = train(cfg.clone(), &train_ds, out_dir)?;
    let model = outcome.model;
    let train_rec = evaluate(&model, &train_ds, cfg.batch_size, cfg.seed)?.rec;
    let heldout_rec = if held_ds.len() >= 2 {
        evaluate(&model, &held_ds, cfg.batch_size, cfg.seed)?.rec
    } else {
        let doubled = held_ds.subset(&[0, 0]);
        evaluate(&model, &doubled, 2, cfg.seed)?.rec
    };
    let train_code = CodeTable::from_model(&model, &train_ds, cfg.batch_size)?;
    let held_code = CodeTable::from_model(&model, &held_ds, cfg.batch_size)?;
    if train_code.normal_means.ncols() == 0 {
        return Err(contract("prune report needs at least one Normal dimension"));
    }

    let (feature_column, threshold, direction) = match held_flag {
        None => {
            let flags: Vec<usize> = feature_of_train.iter().map(|f| usize::from(f.unwrap())).collect();
            let col = best_column(&train_code.normal_means, &flags)?;
            let v = train_code.normal_means.column(col);
            let mut held_side: Vec<f64> = (0..v.len()).filter(|&i| flags[i] == 1).map(|i| v[i]).collect();
            let mut rest: Vec<f64> = (0..v.len()).filter(|&i| flags[i] == 0).map(|i| v[i]).collect();
            if held_side.is_empty() || rest.is_empty() {
                return Err(config("the feature factor needs both held-out and other values in the training rows"));
            }
            let (mh, mr) = (median(&mut held_side), median(&mut rest));
            (col, 0.5 * (mh + mr), if mh >= mr { 1.0 } else { -1.0 })
        }
        Some((keep, old_feat)) => {
            let old_train: Vec<f64> = keep.iter().map(|&i| old_feat[i]).collect();
            let corrs: Vec<f64> = train_code
                .normal_means
                .columns()
                .into_iter()
                .map(|c| pearson(&c.to_vec(), &old_train))
                .collect();
            let col = (0..corrs.len()).max_by(|&a, &b| corrs[a].abs().total_cmp(&corrs[b].abs())).unwrap();
            let sign = if corrs[col] >= 0.0 { 1.0 } else { -1.0 };
            let PruneTarget::ClassFeature { class, quantile: q, .. } = target else { unreachable!() };
            let labels = train_ds.labels.as_ref().unwrap();
            let mut class_vals: Vec<f64> = (0..train_ds.len())
                .filter(|&i| labels[i] == *class)
                .map(|i| sign * train_code.normal_means[[i, col]])
                .chain(held_code.normal_means.column(col).iter().map(|v| sign * v))
                .collect();
            let cut = quantile(&mut class_vals, *q);
            (col, sign * cut, sign)
        }
    };
    let heldout_feature = held_code.normal_means.column(feature_column).to_vec();
    let beyond = heldout_feature.iter().filter(|&&v| direction * (v - threshold) > 0.0).count();
    Ok(PruneReport {
        train_size: train_ds.len(),
        heldout_size: held_ds.len(),
        train_rec,
        heldout_rec,
        relative_gap: ((heldout_rec - train_rec) / train_rec).abs(),
        feature_column,
        threshold,
        direction,
        heldout_beyond_fraction: beyond as f64 / held_ds.len() as f64,
        train_feature: train_code.normal_means.column(feature_column).to_vec(),
        heldout_feature,
    })
}

/// Normal column with the largest binned MI with `labels`.
fn best_column(means: &Array2<f64>, labels: &[usize]) -> Result<usize> {
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, c) in means.columns().into_iter().enumerate() {
        let mi = binned_mi(&c.to_vec(), labels, DEFAULT_BINS)?;
        if mi > best.0 {
            best = (mi, j);
        }
    }
    Ok(best.1)
}

/// ProdLDA on a synthetic corpus with one Normal group per topic group.
pub fn topic_config(spec: &CorpusSpec, objective: ObjectiveConfig, epochs: usize, seed: u64) -> TrainConfig {
    let groups = vec![format!("normal:{}", spec.topics_per_group); spec.n_groups].join(",");
    let layout = LatentLayout::parse(&groups, DEFAULT_TEMPERATURE).expect("valid layout");
    let model = ModelConfig::new(Architecture::Prodlda, vec![spec.vocab_size], layout, LikelihoodKind::CategoricalBow);
    let mut cfg = TrainConfig::new(model, objective);
    cfg.dataset = Some(DatasetSpec::new(DataSource::SynthCorpus { spec: spec.clone() }));
    cfg.batch_size = 100;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg
}

/// Trains `cfg` and summarizes correlations between posterior-mean topic dimensions.
pub fn topic_correlation_run(cfg: &TrainConfig, ds: &FactorDataset) -> Result<(CorrelationSummary, Array2<f64>)> {
    let outcome = train(cfg.clone(), ds, None)?;
    let code = CodeTable::from_model(&outcome.model, ds, cfg.batch_size)?;
    let corr = topic_correlations(&code.normal_means)?;
    Ok((correlation_summary(&corr, outcome.model.layout()), corr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_param_sets_weights() {
        let o = SweepParam::BetaGamma.apply(&ObjectiveConfig::hfvae(1.0, 4.0, 3.0), 2.0);
        assert_eq!(o.resolve().unwrap().as_array(), [1.0, 2.0, 2.0, 1.0]);
        let o = SweepParam::Beta.apply(&ObjectiveConfig::hfvae(1.0, 4.0, 3.0), 12.0);
        assert_eq!(o.resolve().unwrap().as_array(), [1.0, 12.0, 3.0, 1.0]);
        assert!("delta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn quantile_and_median() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(quantile(&mut [0.0, 10.0], 0.25), 2.5);
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
    }
}
