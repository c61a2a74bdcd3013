//! ELBO decomposition terms, the stratified marginal estimator and the
//! weighted objective family.
//!
//! Every stored term is its signed contribution to the maximized objective:
//!
//! * `rec`  = E[log p(x|z)]
//! * `t2`   = -Î(x; z)
//! * `t4`   = -KL(q(z) || p(z)), split into `ta` (between-group TC),
//!   `ti` (within-group TC, one per group) and `tii` (one marginal KL per slot).
//!
//! All marginal estimates in a batch come from one [`LogProbMatrix`], so
//! `t4 = ta + Σti + Σtii` and `t2 + t4 = mean[log p(z) - log q(z|x)]` hold up
//! to floating-point rounding.

use std::fmt;
use std::str::FromStr;

use hfvae_autograd::{Tape, Tensor, Var};
use ndarray::{Array2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::distributions::{
    concat_samples, concrete_log_prob_var, log_softmax, normal_log_prob_var, rsample_groups,
    GroupKind, GroupPosterior, GroupSample, LatentLayout, LatentNoise, Prior,
};
use crate::error::{config, contract, Error, Result};
use crate::models::{ForwardState, Model};

/// Coefficients on the mutual-information, between-group TC, within-group TC
/// and per-dimension KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub w_mi: f64,
    pub w_group_tc: f64,
    pub w_within_tc: f64,
    pub w_dim_kl: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self::new(1.0, 1.0, 1.0, 1.0)
    }
}

impl TermWeights {
    pub const fn new(w_mi: f64, w_group_tc: f64, w_within_tc: f64, w_dim_kl: f64) -> Self {
        Self { w_mi, w_group_tc, w_within_tc, w_dim_kl }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mi, self.w_group_tc, self.w_within_tc, self.w_dim_kl];
        if all.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(config(format!("term weights must be finite, got {all:?}")))
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w_mi, self.w_group_tc, self.w_within_tc, self.w_dim_kl]
    }
}

/// Named members of the objective family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Preset {
    Vae,
    BetaVae { beta: f64 },
    InfoVae { lambda: f64 },
    DipVae { lambda: f64 },
    BetaTcvae { beta: f64 },
    Achille { beta: f64, gamma: f64 },
    Hfvae { alpha: f64, beta: f64, gamma: f64 },
}

pub const PRESET_NAMES: [&str; 7] =
    ["vae", "beta-vae", "info-vae", "dip-vae", "beta-tcvae", "achille", "hfvae"];

/// Optional numeric arguments for [`Preset::from_name`]; unset values default to 1.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PresetArgs {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

impl Preset {
    /// Builds a preset from its name. `info-vae` and `dip-vae` read λ from `beta`.
    pub fn from_name(name: &str, args: PresetArgs) -> Result<Self> {
        let a = args.alpha.unwrap_or(1.0);
        let b = args.beta.unwrap_or(1.0);
        let g = args.gamma.unwrap_or(1.0);
        Ok(match name {
            "vae" => Preset::Vae,
            "beta-vae" => Preset::BetaVae { beta: b },
            "info-vae" => Preset::InfoVae { lambda: b },
            "dip-vae" => Preset::DipVae { lambda: b },
            "beta-tcvae" => Preset::BetaTcvae { beta: b },
            "achille" => Preset::Achille { beta: b, gamma: g },
            "hfvae" => Preset::Hfvae { alpha: a, beta: b, gamma: g },
            other => {
                return Err(config(format!(
                    "unknown preset `{other}`; valid presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn weights(&self) -> TermWeights {
        match *self {
            Preset::Vae => TermWeights::new(1.0, 1.0, 1.0, 1.0),
            Preset::BetaVae { beta } => TermWeights::new(beta, beta, beta, beta),
            Preset::InfoVae { lambda } => TermWeights::new(0.0, lambda, lambda, lambda),
            Preset::DipVae { lambda } => TermWeights::new(1.0, lambda, lambda, lambda),
            Preset::BetaTcvae { beta } => TermWeights::new(1.0, beta, 1.0, 1.0),
            Preset::Achille { beta, gamma } => TermWeights::new(beta, gamma, 0.0, 0.0),
            Preset::Hfvae { alpha, beta, gamma } => TermWeights::new(alpha, beta, gamma, 1.0),
        }
    }
}

/// Parses `vae`, `beta-vae(4)`, `achille(2,3)` or `hfvae(1,5,3)`.
impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.split_once('(') {
            Some((name, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| config(format!("unbalanced parentheses in preset `{s}`")))?;
                let values = inner
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| config(format!("bad numeric argument in preset `{s}`")))?;
                (name.trim(), values)
            }
            None => (s, Vec::new()),
        };
        let expected = match name {
            "vae" => 0,
            "beta-vae" | "info-vae" | "dip-vae" | "beta-tcvae" => 1,
            "achille" => 2,
            "hfvae" => 3,
            _ => usize::MAX,
        };
        if expected != usize::MAX && args.len() != expected {
            return Err(config(format!("preset `{name}` takes {expected} argument(s), got {}", args.len())));
        }
        let args = match (name, args.as_slice()) {
            ("hfvae", [a, b, g]) => PresetArgs { alpha: Some(*a), beta: Some(*b), gamma: Some(*g) },
            ("achille", [b, g]) => PresetArgs { beta: Some(*b), gamma: Some(*g), ..Default::default() },
            (_, [b]) => PresetArgs { beta: Some(*b), ..Default::default() },
            _ => PresetArgs::default(),
        };
        Preset::from_name(name, args)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Preset::Vae => write!(f, "vae"),
            Preset::BetaVae { beta } => write!(f, "beta-vae({beta})"),
            Preset::InfoVae { lambda } => write!(f, "info-vae({lambda})"),
            Preset::DipVae { lambda } => write!(f, "dip-vae({lambda})"),
            Preset::BetaTcvae { beta } => write!(f, "beta-tcvae({beta})"),
            Preset::Achille { beta, gamma } => write!(f, "achille({beta},{gamma})"),
            Preset::Hfvae { alpha, beta, gamma } => write!(f, "hfvae({alpha},{beta},{gamma})"),
        }
    }
}

/// Weights of the objective family selected by name and arguments.
pub fn preset(name: &str, args: PresetArgs) -> Result<TermWeights> {
    Preset::from_name(name, args).map(|p| p.weights())
}

/// `log q(z^b_e | x^b')` for every pair of batch members and every slot.
///
/// Entries are `[B, B, S]` where `S` is the number of atomic slots of the
/// layout (one per Normal dimension, one per Concrete group).
#[derive(Debug, Clone)]
pub struct LogProbMatrix<'t> {
    pub entries: Var<'t>,
    layout: LatentLayout,
}

impl<'t> LogProbMatrix<'t> {
    pub fn batch_size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    /// `[B, B]` table for one slot.
    pub fn slot(&self, e: usize) -> Var<'t> {
        self.entries.slice_axis(2, e, e + 1).sum_axis(2)
    }

    /// `[B, B]` table of `log q(z_d^b | x^b')`.
    pub fn group(&self, d: usize) -> Var<'t> {
        let r = self.layout.slot_range(d);
        self.entries.slice_axis(2, r.start, r.end).sum_axis(2)
    }

    /// `[B, B]` table of `log q(z^b | x^b')`.
    pub fn joint(&self) -> Var<'t> {
        self.entries.sum_axis(2)
    }

    /// `[B, S]` matched-pair entries `log q(z^b_e | x^b)`.
    pub fn diagonal(&self) -> Var<'t> {
        let b = self.batch_size();
        let eye = Tensor::from_shape_fn(IxDyn(&[b, b, 1]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        (self.entries * self.entries.tape().constant(eye)).sum_axis(1)
    }
}

/// Builds the pairwise log-density table for samples drawn from `posteriors`.
pub fn pairwise_log_prob<'t>(
    samples: &[GroupSample<'t>],
    posteriors: &[GroupPosterior<'t>],
    layout: &LatentLayout,
) -> Result<LogProbMatrix<'t>> {
    if samples.len() != layout.n_groups() || posteriors.len() != layout.n_groups() {
        return Err(contract("sample/posterior group count differs from layout"));
    }
    let mut blocks = Vec::with_capacity(samples.len());
    for (d, (sample, post)) in samples.iter().zip(posteriors).enumerate() {
        let block = match (*sample, *post) {
            (GroupSample::Normal(z), GroupPosterior::Normal { mean, log_std }) => {
                normal_log_prob_var(z.unsqueeze(1), mean.unsqueeze(0), log_std.unsqueeze(0))
            }
            (GroupSample::Concrete { log_value }, GroupPosterior::Concrete { logits }) => {
                let tau = layout.group(d).temperature().expect("Concrete group has a temperature");
                let log_pi = logits.log_softmax(1);
                concrete_log_prob_var(log_value.unsqueeze(1), log_pi.unsqueeze(0), tau).unsqueeze(2)
            }
            _ => return Err(contract(format!("group {d}: sample kind differs from posterior kind"))),
        };
        blocks.push(block);
    }
    let b = blocks[0].shape()[0];
    if b < 2 {
        return Err(contract(format!("pairwise log-probs need a batch of at least 2, got {b}")));
    }
    let entries = if blocks.len() == 1 { blocks[0] } else { blocks[0].tape().concat(&blocks, 2) };
    Ok(LogProbMatrix { entries, layout: layout.clone() })
}

/// `[B, B]` log-weights: `log(1/N)` on the diagonal and
/// `log((N-1) / (N(B-1)))` elsewhere.
pub fn stratified_log_weights(batch: usize, dataset_size: usize) -> Result<Array2<f64>> {
    if batch < 2 {
        return Err(contract(format!("stratified estimator needs B >= 2, got {batch}")));
    }
    if dataset_size < batch {
        return Err(contract(format!("dataset size N = {dataset_size} is smaller than B = {batch}")));
    }
    let n = dataset_size as f64;
    let diag = -n.ln();
    let off = ((n - 1.0) / (n * (batch as f64 - 1.0))).ln();
    Ok(Array2::from_shape_fn((batch, batch), |(i, j)| if i == j { diag } else { off }))
}

/// `log q̂(z^b)` from a `[B, B, ...]` table, reducing over axis 1.
///
/// Trailing axes are carried through, so a full `[B, B, S]` matrix yields
/// `[B, S]` per-slot estimates in one call.
pub fn stratified_log_marginal<'t>(table: Var<'t>, dataset_size: usize) -> Result<Var<'t>> {
    let shape = table.shape();
    if shape.len() < 2 || shape[0] != shape[1] {
        return Err(contract(format!("expected a [B, B, ...] table, got {shape:?}")));
    }
    let w = stratified_log_weights(shape[0], dataset_size)?;
    let mut wshape = vec![shape[0], shape[0]];
    wshape.extend(std::iter::repeat(1).take(shape.len() - 2));
    let w = w.into_shape_with_order(IxDyn(&wshape)).unwrap();
    Ok((table + table.tape().constant(w)).logsumexp(1))
}

/// `log q̂` for a plain `[B, B]` array of log-probabilities.
pub fn stratified_log_marginal_values(table: &Array2<f64>, dataset_size: usize) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let t = tape.constant(table.clone().into_dyn());
    Ok(stratified_log_marginal(t, dataset_size)?.value().iter().copied().collect())
}

/// Minibatch entropy estimate `-mean_b log q̂(z^b)`; an upper bound in expectation.
pub fn entropy_estimate(table: &Array2<f64>, dataset_size: usize) -> Result<f64> {
    let lq = stratified_log_marginal_values(table, dataset_size)?;
    Ok(-lq.iter().sum::<f64>() / lq.len() as f64)
}

/// What a total-correlation estimate measures dependence between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TcScope {
    /// Between groups: `q(z)` against `Π_d q(z_d)`.
    Groups,
    /// Between all atomic slots: `q(z)` against `Π_{d,e} q(z_{d,e})`.
    Slots,
    /// Within one group: `q(z_d)` against `Π_e q(z_{d,e})`.
    Group(usize),
}

/// Stratified estimate of the total correlation for `scope`.
pub fn total_correlation_estimate(
    matrix: &LogProbMatrix<'_>,
    dataset_size: usize,
    scope: TcScope,
) -> Result<f64> {
    let layout = matrix.layout();
    let (joint, parts): (Var<'_>, Vec<Var<'_>>) = match scope {
        TcScope::Groups => {
            (matrix.joint(), (0..layout.n_groups()).map(|d| matrix.group(d)).collect())
        }
        TcScope::Slots => (matrix.joint(), (0..layout.n_slots()).map(|e| matrix.slot(e)).collect()),
        TcScope::Group(d) => {
            if d >= layout.n_groups() {
                return Err(contract(format!("group {d} out of range")));
            }
            (matrix.group(d), layout.slot_range(d).map(|e| matrix.slot(e)).collect())
        }
    };
    let mut tc = stratified_log_marginal(joint, dataset_size)?;
    for p in parts {
        tc = tc - stratified_log_marginal(p, dataset_size)?;
    }
    Ok(tc.mean().item())
}

/// `[B, S]` prior log-densities: per dimension for Normal groups, per group for Concrete.
pub fn prior_log_prob<'t>(samples: &[GroupSample<'t>], layout: &LatentLayout) -> Result<Var<'t>> {
    let mut blocks = Vec::with_capacity(samples.len());
    for (d, sample) in samples.iter().enumerate() {
        let spec = layout.group(d);
        let block = match (*sample, &spec.prior) {
            (GroupSample::Normal(z), Prior::Normal(p)) => {
                let tape = z.tape();
                let mean = tape.constant(Tensor::from_shape_vec(IxDyn(&[1, p.dim()]), p.mean.clone()).unwrap());
                let log_std =
                    tape.constant(Tensor::from_shape_vec(IxDyn(&[1, p.dim()]), p.log_std.clone()).unwrap());
                normal_log_prob_var(z, mean, log_std)
            }
            (GroupSample::Concrete { log_value }, Prior::Concrete(p)) => {
                let log_pi = Tensor::from_shape_vec(IxDyn(&[1, p.k()]), log_softmax(&p.logits)).unwrap();
                let log_pi = log_value.tape().constant(log_pi);
                concrete_log_prob_var(log_value, log_pi, p.temperature).unsqueeze(1)
            }
            _ => return Err(contract(format!("group {d}: sample kind differs from prior kind"))),
        };
        blocks.push(block);
    }
    Ok(if blocks.len() == 1 { blocks[0] } else { blocks[0].tape().concat(&blocks, 1) })
}

/// Plain-number view of one batch's decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchTerms {
    pub rec: f64,
    pub t2: f64,
    pub t4: f64,
    pub ta: f64,
    /// One entry per group; zero for Concrete groups.
    pub ti: Vec<f64>,
    /// One entry per slot.
    pub tii: Vec<f64>,
    /// `Î(x; z_{d,e})` per slot.
    pub per_dim_mi: Vec<f64>,
    /// `mean_b[log p(z^b) - log q(z^b|x^b)]`, computed without any marginal estimate.
    pub prior_minus_posterior: f64,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub clamp_count: usize,
}

impl BatchTerms {
    pub fn elbo(&self) -> f64 {
        self.rec + self.prior_minus_posterior
    }

    /// Named scalar terms, for reporting which one went non-finite.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("rec".to_string(), self.rec),
            ("t2".to_string(), self.t2),
            ("ta".to_string(), self.ta),
        ];
        out.extend(self.ti.iter().enumerate().map(|(d, v)| (format!("ti_{d}"), *v)));
        out.extend(self.tii.iter().enumerate().map(|(e, v)| (format!("tii_{e}"), *v)));
        out.push(("t4".to_string(), self.t4));
        out
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named_values() {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name });
            }
        }
        Ok(())
    }
}

/// Weighted objective, negated for minimization.
pub fn hfvae_objective(terms: &BatchTerms, weights: &TermWeights) -> f64 {
    let ti: f64 = terms.ti.iter().sum();
    let tii: f64 = terms.tii.iter().sum();
    -(terms.rec
        + weights.w_mi * terms.t2
        + weights.w_group_tc * terms.ta
        + weights.w_within_tc * ti
        + weights.w_dim_kl * tii)
}

/// Differentiable terms of one batch.
#[derive(Debug, Clone)]
pub struct Decomposition<'t> {
    pub rec: Var<'t>,
    pub t2: Var<'t>,
    pub t4: Var<'t>,
    pub ta: Var<'t>,
    pub ti: Vec<Var<'t>>,
    /// `[S]`.
    pub tii: Var<'t>,
    /// `[S]`.
    pub per_dim_mi: Var<'t>,
    pub prior_minus_posterior: Var<'t>,
    pub matrix: LogProbMatrix<'t>,
    pub dataset_size: usize,
    pub clamp_count: usize,
}

impl<'t> Decomposition<'t> {
    /// Differentiable counterpart of [`hfvae_objective`].
    pub fn loss(&self, weights: &TermWeights) -> Var<'t> {
        let mut within = self.ti[0];
        for t in &self.ti[1..] {
            within = within + *t;
        }
        let objective = self.rec
            + self.t2 * weights.w_mi
            + self.ta * weights.w_group_tc
            + within * weights.w_within_tc
            + self.tii.sum() * weights.w_dim_kl;
        -objective
    }

    pub fn terms(&self) -> BatchTerms {
        BatchTerms {
            rec: self.rec.item(),
            t2: self.t2.item(),
            t4: self.t4.item(),
            ta: self.ta.item(),
            ti: self.ti.iter().map(|v| v.item()).collect(),
            tii: self.tii.value().iter().copied().collect(),
            per_dim_mi: self.per_dim_mi.value().iter().copied().collect(),
            prior_minus_posterior: self.prior_minus_posterior.item(),
            batch_size: self.matrix.batch_size(),
            dataset_size: self.dataset_size,
            clamp_count: self.clamp_count,
        }
    }
}

/// Sum of `[B]` columns `range` of a `[B, S]` table.
fn column_sum<'t>(table: Var<'t>, start: usize, end: usize) -> Var<'t> {
    table.slice_axis(1, start, end).sum_axis(1)
}

/// Decomposes the objective given per-datapoint reconstruction log-likelihoods
/// `[B]` and the latent samples they were computed from.
pub fn decompose<'t>(
    rec_per_point: Var<'t>,
    samples: &[GroupSample<'t>],
    posteriors: &[GroupPosterior<'t>],
    layout: &LatentLayout,
    dataset_size: usize,
    clamp_count: usize,
) -> Result<Decomposition<'t>> {
    let tape = rec_per_point.tape();
    let matrix = pairwise_log_prob(samples, posteriors, layout)?;
    let n_groups = layout.n_groups();

    let lq_slot = matrix.diagonal();
    let lq_joint = lq_slot.sum_axis(1);
    let lqhat_slot = stratified_log_marginal(matrix.entries, dataset_size)?;
    let lqhat_joint = stratified_log_marginal(matrix.joint(), dataset_size)?;

    let lp_slot = prior_log_prob(samples, layout)?;
    let mut lp_groups = Vec::with_capacity(n_groups);
    let mut lqhat_groups = Vec::with_capacity(n_groups);
    for d in 0..n_groups {
        let r = layout.slot_range(d);
        lp_groups.push(column_sum(lp_slot, r.start, r.end).unsqueeze(1));
        lqhat_groups.push(stratified_log_marginal(matrix.group(d), dataset_size)?.unsqueeze(1));
    }
    let (lp_groups, lqhat_groups) = if n_groups == 1 {
        (lp_groups[0], lqhat_groups[0])
    } else {
        (tape.concat(&lp_groups, 1), tape.concat(&lqhat_groups, 1))
    };
    let lp_joint = lp_groups.sum_axis(1);

    let t2 = (lqhat_joint - lq_joint).mean();
    let t4 = (lp_joint - lqhat_joint).mean();
    let ta = ((lp_joint - lp_groups.sum_axis(1)) - (lqhat_joint - lqhat_groups.sum_axis(1))).mean();
    let mut ti = Vec::with_capacity(n_groups);
    for d in 0..n_groups {
        if layout.group(d).kind == GroupKind::Concrete {
            ti.push(tape.scalar(0.0));
            continue;
        }
        let r = layout.slot_range(d);
        let lp_g = lp_groups.slice_axis(1, d, d + 1).sum_axis(1);
        let lqhat_g = lqhat_groups.slice_axis(1, d, d + 1).sum_axis(1);
        let prior_part = lp_g - column_sum(lp_slot, r.start, r.end);
        let marginal_part = lqhat_g - column_sum(lqhat_slot, r.start, r.end);
        ti.push((prior_part - marginal_part).mean());
    }
    let tii = (lp_slot - lqhat_slot).mean_axis(0);
    let per_dim_mi = (lq_slot - lqhat_slot).mean_axis(0);
    let prior_minus_posterior = (lp_joint - lq_joint).mean();

    Ok(Decomposition {
        rec: rec_per_point.mean(),
        t2,
        t4,
        ta,
        ti,
        tii,
        per_dim_mi,
        prior_minus_posterior,
        matrix,
        dataset_size,
        clamp_count,
    })
}

/// Encodes `x`, samples with `noise`, decodes and decomposes the objective.
pub fn compute_terms<'t>(
    tape: &'t Tape,
    model: &Model,
    params: &hfvae_autograd::BoundParams<'t>,
    x: &Tensor,
    dataset_size: usize,
    noise: &LatentNoise,
    state: &mut ForwardState<'_>,
) -> Result<Decomposition<'t>> {
    let layout = &model.config.layout;
    let xv = tape.constant(x.clone());
    let posteriors = model.encode(params, xv, state)?;
    let sampled = rsample_groups(&posteriors, noise, layout)?;
    let z = concat_samples(&sampled.value);
    let out = model.decode(params, z, state)?;
    let rec = model.log_likelihood_var(xv, out);
    let decomposition = decompose(rec, &sampled.value, &posteriors, layout, dataset_size, sampled.clamped)?;
    decomposition.terms().check_finite()?;
    Ok(decomposition)
}
