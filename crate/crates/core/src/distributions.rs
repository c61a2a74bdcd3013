//! Reparameterized latent distributions: diagonal Normal and Concrete.
//!
//! Two flavours of every density live here. The slice-based functions take a
//! single datapoint and are used by oracles and metrics; the `*_var` functions
//! operate on batched tape variables with numpy broadcasting so the objective
//! can evaluate every `q(z^b | x^b')` pair in one pass.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use hfvae_autograd::{Tensor, Var};
use ndarray::IxDyn;
use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};

pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Lower clamp for simplex components before taking logs.
pub const SIMPLEX_EPS: f64 = 1e-6;

/// Concrete temperature used for both posterior and prior unless configured.
pub const DEFAULT_TEMPERATURE: f64 = 0.66;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: Vec<f64>,
    /// Natural log of the standard deviation.
    pub log_std: Vec<f64>,
}

impl NormalParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(contract(format!(
                "mean has {} entries but log_std has {}",
                mean.len(),
                log_std.len()
            )));
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(contract("Normal parameters must be finite"));
        }
        Ok(Self { mean, log_std })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], log_std: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcreteParams {
    pub logits: Vec<f64>,
    pub temperature: f64,
}

impl ConcreteParams {
    pub fn new(logits: Vec<f64>, temperature: f64) -> Result<Self> {
        if logits.len() < 2 {
            return Err(contract(format!("Concrete needs K >= 2 categories, got {}", logits.len())));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(contract(format!("Concrete temperature must be positive, got {temperature}")));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(contract("Concrete logits must be finite"));
        }
        Ok(Self { logits, temperature })
    }

    pub fn uniform(k: usize, temperature: f64) -> Self {
        Self { logits: vec![0.0; k], temperature }
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }
}

/// `log Σ exp(x)`, safe for large and `-inf` entries.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

/// `log((K-1)!)`.
pub(crate) fn log_factorial_km1(k: usize) -> f64 {
    (1..k).map(|i| (i as f64).ln()).sum()
}

/// Per-dimension Normal log-density.
pub fn normal_log_prob(value: &[f64], params: &NormalParams) -> Result<Vec<f64>> {
    if value.len() != params.dim() {
        return Err(contract(format!(
            "value has {} dims, Normal has {}",
            value.len(),
            params.dim()
        )));
    }
    Ok(value
        .iter()
        .zip(params.mean.iter().zip(&params.log_std))
        .map(|(&v, (&m, &ls))| {
            let u = (v - m) * (-ls).exp();
            -ls - HALF_LOG_2PI - 0.5 * u * u
        })
        .collect())
}

pub fn normal_rsample(params: &NormalParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != params.dim() {
        return Err(contract("noise length differs from Normal dimension"));
    }
    Ok(params
        .mean
        .iter()
        .zip(&params.log_std)
        .zip(noise)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

/// `softmax((logits + g) / τ)`.
pub fn concrete_rsample(params: &ConcreteParams, gumbel_noise: &[f64]) -> Result<Vec<f64>> {
    if gumbel_noise.len() != params.k() {
        return Err(contract("gumbel noise length differs from K"));
    }
    if !(params.temperature > 0.0) {
        return Err(contract("Concrete temperature must be positive"));
    }
    let scaled: Vec<f64> = params
        .logits
        .iter()
        .zip(gumbel_noise)
        .map(|(l, g)| (l + g) / params.temperature)
        .collect();
    Ok(log_softmax(&scaled).into_iter().map(f64::exp).collect())
}

/// A value together with the number of simplex components that had to be clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamped<T> {
    pub value: T,
    pub clamped: usize,
}

/// Concrete log-density of an interior simplex point.
///
/// Components below [`SIMPLEX_EPS`] are raised to it and counted.
pub fn concrete_log_prob(value: &[f64], params: &ConcreteParams) -> Result<Clamped<f64>> {
    let k = params.k();
    if value.len() != k {
        return Err(contract(format!("value has {} components, Concrete has K = {k}", value.len())));
    }
    let mut clamped = 0;
    let log_v: Vec<f64> = value
        .iter()
        .map(|&v| {
            if v < SIMPLEX_EPS || v.is_nan() {
                clamped += 1;
                SIMPLEX_EPS.ln()
            } else {
                v.ln()
            }
        })
        .collect();
    Ok(Clamped { value: concrete_log_prob_from_logs(&log_v, params), clamped })
}

fn concrete_log_prob_from_logs(log_v: &[f64], params: &ConcreteParams) -> f64 {
    let k = log_v.len();
    let tau = params.temperature;
    let log_pi = log_softmax(&params.logits);
    let body: f64 = log_pi.iter().zip(log_v).map(|(lp, lv)| lp - (tau + 1.0) * lv).sum();
    let mix: Vec<f64> = log_pi.iter().zip(log_v).map(|(lp, lv)| lp - tau * lv).collect();
    log_factorial_km1(k) + (k as f64 - 1.0) * tau.ln() + body - k as f64 * logsumexp(&mix)
}

/// `KL(q || p)` between diagonal Normals.
pub fn analytic_kl_normal(q: &NormalParams, p: &NormalParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(contract("KL between Normals of different dimension"));
    }
    let mut kl = 0.0;
    for e in 0..q.dim() {
        let var_ratio = (2.0 * (q.log_std[e] - p.log_std[e])).exp();
        let diff = (q.mean[e] - p.mean[e]) * (-p.log_std[e]).exp();
        kl += 0.5 * (var_ratio + diff * diff - 1.0) - (q.log_std[e] - p.log_std[e]);
    }
    Ok(kl)
}

pub fn standard_normal_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// `-log(-log u)` with `u` uniform on the open unit interval.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Batched Normal log-density; arguments broadcast against each other.
pub fn normal_log_prob_var<'t>(value: Var<'t>, mean: Var<'t>, log_std: Var<'t>) -> Var<'t> {
    let u = (value - mean) * (-log_std).exp();
    -log_std - HALF_LOG_2PI - u.square() * 0.5
}

pub fn normal_rsample_var<'t>(mean: Var<'t>, log_std: Var<'t>, noise: Var<'t>) -> Var<'t> {
    mean + log_std.exp() * noise
}

/// Log of a Concrete sample, `log_softmax((logits + g) / τ)` over the last axis.
///
/// The logs are exact and finite, so densities are evaluated on them directly.
/// Components below `log ε` are only counted: moving the sample to the floor
/// would score `q` and `p` at a point the sampler never produced, and training
/// then inflates the bound through that gap.
pub fn concrete_rsample_log_var<'t>(
    logits: Var<'t>,
    gumbel: Var<'t>,
    temperature: f64,
) -> Clamped<Var<'t>> {
    let last = logits.shape().len() - 1;
    let raw = ((logits + gumbel) * (1.0 / temperature)).log_softmax(last);
    let floor = SIMPLEX_EPS.ln();
    let clamped = raw.value().iter().filter(|&&v| v < floor).count();
    Clamped { value: raw, clamped }
}

/// Batched Concrete log-density from log-values and log-probabilities.
///
/// Both arguments carry categories on their last axis and broadcast against
/// each other (e.g. `[B,1,K]` with `[1,B,K]` gives the `[B,B]` pairwise table).
pub fn concrete_log_prob_var<'t>(log_value: Var<'t>, log_pi: Var<'t>, temperature: f64) -> Var<'t> {
    let v_shape = log_value.shape();
    let p_shape = log_pi.shape();
    assert_eq!(v_shape.len(), p_shape.len(), "rank mismatch in Concrete density");
    let last = v_shape.len() - 1;
    let k = v_shape[last];
    assert_eq!(k, p_shape[last], "category count mismatch in Concrete density");
    let constant = log_factorial_km1(k) + (k as f64 - 1.0) * temperature.ln();
    let sum_log_pi = log_pi.sum_axis(last);
    let sum_log_v = log_value.sum_axis(last);
    let mix = (log_pi - log_value * temperature).logsumexp(last);
    sum_log_pi - sum_log_v * (temperature + 1.0) - mix * k as f64 + constant
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Normal,
    Concrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prior {
    Normal(NormalParams),
    Concrete(ConcreteParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub dim: usize,
    pub prior: Prior,
}

impl GroupSpec {
    /// Normal group with a standard Normal prior.
    pub fn normal(dim: usize) -> Self {
        Self { kind: GroupKind::Normal, dim, prior: Prior::Normal(NormalParams::standard(dim)) }
    }

    /// Concrete group with uniform prior logits at the posterior temperature.
    pub fn concrete(k: usize, temperature: f64) -> Self {
        Self {
            kind: GroupKind::Concrete,
            dim: k,
            prior: Prior::Concrete(ConcreteParams::uniform(k, temperature)),
        }
    }

    /// Number of atomic slots: one per Normal dimension, one for a Concrete group.
    pub fn slots(&self) -> usize {
        match self.kind {
            GroupKind::Normal => self.dim,
            GroupKind::Concrete => 1,
        }
    }

    pub fn temperature(&self) -> Option<f64> {
        match &self.prior {
            Prior::Concrete(c) => Some(c.temperature),
            Prior::Normal(_) => None,
        }
    }
}

/// Ordered latent groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GroupSpec>", into = "Vec<GroupSpec>")]
pub struct LatentLayout {
    groups: Vec<GroupSpec>,
}

impl TryFrom<Vec<GroupSpec>> for LatentLayout {
    type Error = crate::Error;
    fn try_from(groups: Vec<GroupSpec>) -> Result<Self> {
        Self::new(groups)
    }
}

impl From<LatentLayout> for Vec<GroupSpec> {
    fn from(layout: LatentLayout) -> Self {
        layout.groups
    }
}

impl LatentLayout {
    pub fn new(groups: Vec<GroupSpec>) -> Result<Self> {
        if groups.is_empty() {
            return Err(config("latent layout needs at least one group"));
        }
        for (i, g) in groups.iter().enumerate() {
            if g.dim == 0 {
                return Err(config(format!("group {i} has zero dimension")));
            }
            match (&g.kind, &g.prior) {
                (GroupKind::Normal, Prior::Normal(p)) if p.dim() == g.dim => {
                    NormalParams::new(p.mean.clone(), p.log_std.clone())?;
                }
                (GroupKind::Concrete, Prior::Concrete(p)) if p.k() == g.dim => {
                    ConcreteParams::new(p.logits.clone(), p.temperature)?;
                }
                _ => {
                    return Err(config(format!(
                        "group {i}: prior does not match kind {:?} with dim {}",
                        g.kind, g.dim
                    )))
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn group(&self, d: usize) -> &GroupSpec {
        &self.groups[d]
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Width of the concatenated latent vector fed to the decoder.
    pub fn total_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dim).sum()
    }

    /// Number of atomic slots (the last axis of the pairwise log-prob tensor).
    pub fn n_slots(&self) -> usize {
        self.groups.iter().map(GroupSpec::slots).sum()
    }

    /// Columns of group `d` inside the concatenated latent vector.
    pub fn value_range(&self, d: usize) -> Range<usize> {
        let start: usize = self.groups[..d].iter().map(|g| g.dim).sum();
        start..start + self.groups[d].dim
    }

    /// Slots of group `d` inside the pairwise log-prob tensor.
    pub fn slot_range(&self, d: usize) -> Range<usize> {
        let start: usize = self.groups[..d].iter().map(GroupSpec::slots).sum();
        start..start + self.groups[d].slots()
    }

    /// Group index owning each slot.
    pub fn slot_groups(&self) -> Vec<usize> {
        (0..self.n_groups()).flat_map(|d| self.slot_range(d).map(move |_| d)).collect()
    }

    pub fn normal_dims(&self) -> usize {
        self.groups.iter().filter(|g| g.kind == GroupKind::Normal).map(|g| g.dim).sum()
    }

    pub fn concrete_groups(&self) -> Vec<usize> {
        (0..self.n_groups()).filter(|&d| self.groups[d].kind == GroupKind::Concrete).collect()
    }

    /// Human-readable slot labels such as `g0_d2` or `g1_concrete`.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (d, g) in self.groups.iter().enumerate() {
            match g.kind {
                GroupKind::Normal => names.extend((0..g.dim).map(|e| format!("g{d}_d{e}"))),
                GroupKind::Concrete => names.push(format!("g{d}_concrete")),
            }
        }
        names
    }

    /// Parses `normal:6,concrete:3` (Concrete groups use `temperature`).
    pub fn parse(spec: &str, temperature: f64) -> Result<Self> {
        let mut groups = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (kind, dim) = part
                .split_once(':')
                .ok_or_else(|| config(format!("layout entry `{part}` should look like normal:6")))?;
            let dim: usize = dim
                .trim()
                .parse()
                .map_err(|_| config(format!("bad dimension in layout entry `{part}`")))?;
            groups.push(match kind.trim() {
                "normal" => GroupSpec::normal(dim),
                "concrete" => GroupSpec::concrete(dim, temperature),
                other => return Err(config(format!("unknown group kind `{other}`"))),
            });
        }
        Self::new(groups)
    }
}

impl fmt::Display for LatentLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .groups
            .iter()
            .map(|g| match g.kind {
                GroupKind::Normal => format!("normal:{}", g.dim),
                GroupKind::Concrete => format!("concrete:{}", g.dim),
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

impl FromStr for LatentLayout {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, DEFAULT_TEMPERATURE)
    }
}

/// Encoder output for one latent group over a batch.
#[derive(Debug, Clone, Copy)]
pub enum GroupPosterior<'t> {
    /// `[B, d]` means and log standard deviations.
    Normal { mean: Var<'t>, log_std: Var<'t> },
    /// `[B, K]` unnormalized log-probabilities.
    Concrete { logits: Var<'t> },
}

/// One reparameterized draw per datapoint for one latent group.
#[derive(Debug, Clone, Copy)]
pub enum GroupSample<'t> {
    /// `[B, d]`.
    Normal(Var<'t>),
    /// `[B, K]` logs of the simplex point.
    Concrete { log_value: Var<'t> },
}

impl<'t> GroupSample<'t> {
    /// The value the decoder sees: `z` itself, or the simplex point.
    pub fn value(&self) -> Var<'t> {
        match *self {
            GroupSample::Normal(z) => z,
            GroupSample::Concrete { log_value } => log_value.exp(),
        }
    }
}

/// Externally drawn noise for every group: standard Normal `[B, d]` or Gumbel `[B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub groups: Vec<Tensor>,
}

impl LatentNoise {
    pub fn sample<R: Rng + ?Sized>(layout: &LatentLayout, batch: usize, rng: &mut R) -> Self {
        let groups = layout
            .groups()
            .iter()
            .map(|g| match g.kind {
                GroupKind::Normal => standard_normal_noise(rng, &[batch, g.dim]),
                GroupKind::Concrete => gumbel_noise(rng, &[batch, g.dim]),
            })
            .collect();
        Self { groups }
    }

    /// All-zero noise: Normal groups return their means, Concrete groups
    /// return `softmax(logits / τ)`.
    pub fn zeros(layout: &LatentLayout, batch: usize) -> Self {
        let groups = layout.groups().iter().map(|g| Tensor::zeros(IxDyn(&[batch, g.dim]))).collect();
        Self { groups }
    }
}

/// Reparameterized samples for every group.
pub fn rsample_groups<'t>(
    posteriors: &[GroupPosterior<'t>],
    noise: &LatentNoise,
    layout: &LatentLayout,
) -> Result<Clamped<Vec<GroupSample<'t>>>> {
    if posteriors.len() != layout.n_groups() || noise.groups.len() != layout.n_groups() {
        return Err(contract("posterior/noise group count differs from layout"));
    }
    let mut clamped = 0;
    let mut samples = Vec::with_capacity(posteriors.len());
    for (d, (post, eps)) in posteriors.iter().zip(&noise.groups).enumerate() {
        let spec = layout.group(d);
        match (*post, spec.kind) {
            (GroupPosterior::Normal { mean, log_std }, GroupKind::Normal) => {
                if mean.shape() != eps.shape() {
                    return Err(contract(format!("group {d}: noise shape {:?} vs {:?}", eps.shape(), mean.shape())));
                }
                let e = mean.tape().constant(eps.clone());
                samples.push(GroupSample::Normal(normal_rsample_var(mean, log_std, e)));
            }
            (GroupPosterior::Concrete { logits }, GroupKind::Concrete) => {
                if logits.shape() != eps.shape() {
                    return Err(contract(format!("group {d}: noise shape {:?} vs {:?}", eps.shape(), logits.shape())));
                }
                let g = logits.tape().constant(eps.clone());
                let tau = spec.temperature().expect("Concrete group has a temperature");
                let out = concrete_rsample_log_var(logits, g, tau);
                clamped += out.clamped;
                samples.push(GroupSample::Concrete { log_value: out.value });
            }
            _ => return Err(contract(format!("group {d}: posterior kind differs from layout"))),
        }
    }
    Ok(Clamped { value: samples, clamped })
}

/// Concatenates group samples into the `[B, total_dim]` decoder input.
pub fn concat_samples<'t>(samples: &[GroupSample<'t>]) -> Var<'t> {
    let parts: Vec<Var<'t>> = samples.iter().map(GroupSample::value).collect();
    if parts.len() == 1 {
        return parts[0];
    }
    parts[0].tape().concat(&parts, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use hfvae_autograd::Tape;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_log_prob_examples() {
        let std = NormalParams::standard(1);
        assert_abs_diff_eq!(normal_log_prob(&[0.0], &std).unwrap()[0], -0.918_938_5, epsilon = 1e-6);
        assert_abs_diff_eq!(normal_log_prob(&[1.0], &std).unwrap()[0], -1.418_938_5, epsilon = 1e-6);
        let wide = NormalParams::new(vec![0.0], vec![2f64.ln()]).unwrap();
        // -ln 2 - ½ ln 2π
        assert_abs_diff_eq!(normal_log_prob(&[0.0], &wide).unwrap()[0], -1.612_085_7, epsilon = 1e-6);
        assert!(normal_log_prob(&[0.0, 1.0], &std).is_err());
    }

    #[test]
    fn normal_density_integrates_to_one() {
        let p = NormalParams::new(vec![0.7], vec![-0.3]).unwrap();
        let (lo, hi, n) = (-12.0, 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * normal_log_prob(&[x], &p).unwrap()[0].exp();
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn normal_rsample_examples() {
        let p = NormalParams::new(vec![0.3, -1.0], vec![0.5, -0.2]).unwrap();
        assert_eq!(normal_rsample(&p, &[0.0, 0.0]).unwrap(), p.mean);
        let tight = NormalParams::new(vec![0.3], vec![-20.0]).unwrap();
        assert_abs_diff_eq!(normal_rsample(&tight, &[2.5]).unwrap()[0], 0.3, epsilon = 1e-8);
        let std = NormalParams::standard(1);
        assert_eq!(normal_rsample(&std, &[1.5]).unwrap(), vec![1.5]);
    }

    #[test]
    fn concrete_rsample_examples() {
        let p = ConcreteParams::uniform(4, 0.66);
        for v in concrete_rsample(&p, &[0.0; 4]).unwrap() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let sharp = ConcreteParams::new(vec![10.0, 0.0, 0.0], 0.01).unwrap();
        let v = concrete_rsample(&sharp, &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-6);
        assert!(ConcreteParams::new(vec![0.0, 0.0], 0.0).is_err());
        assert!(ConcreteParams::new(vec![0.0], 1.0).is_err());
    }

    #[test]
    fn concrete_density_integrates_to_one_for_k2() {
        // Substitute v = sigmoid(s) so the endpoint singularities become smooth tails.
        let p = ConcreteParams::new(vec![0.4, -0.9], 0.66).unwrap();
        let logit = |v: f64| (v / (1.0 - v)).ln();
        let (lo, hi) = (logit(SIMPLEX_EPS), logit(1.0 - SIMPLEX_EPS));
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let s = lo + i as f64 * h;
            let v = 1.0 / (1.0 + (-s).exp());
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let lp = concrete_log_prob(&[v, 1.0 - v], &p).unwrap().value;
            total += w * lp.exp() * v * (1.0 - v);
        }
        assert_abs_diff_eq!(total * h, 1.0, epsilon = 1e-3);
    }

    #[test]
    fn concrete_density_matches_sampling_histogram() {
        let p = ConcreteParams::uniform(3, 1.0);
        let centre = [1.0 / 3.0; 3];
        let closed = concrete_log_prob(&centre, &p).unwrap().value.exp();
        assert_abs_diff_eq!(closed, 2.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, r) = (400_000, 0.05);
        let mut hits = 0usize;
        for _ in 0..n {
            let g = gumbel_noise(&mut rng, &[3]);
            let v = concrete_rsample(&p, g.as_slice().unwrap()).unwrap();
            let (a, b) = (v[0] - centre[0], v[1] - centre[1]);
            if a * a + b * b < r * r {
                hits += 1;
            }
        }
        let area = std::f64::consts::PI * r * r;
        let estimate = hits as f64 / n as f64 / area;
        let se = (hits as f64).sqrt() / n as f64 / area;
        assert!((estimate - closed).abs() < 4.0 * se, "histogram {estimate} vs closed form {closed}");
    }

    #[test]
    fn concrete_log_prob_clamps_boundary_values() {
        let p = ConcreteParams::uniform(3, 0.66);
        let out = concrete_log_prob(&[1.0, 0.0, 0.0], &p).unwrap();
        assert_eq!(out.clamped, 2);
        assert!(out.value.is_finite());
    }

    #[test]
    fn analytic_kl_examples() {
        let std = NormalParams::standard(1);
        assert_eq!(analytic_kl_normal(&std, &std).unwrap(), 0.0);
        let shifted = NormalParams::new(vec![1.0], vec![0.0]).unwrap();
        assert_abs_diff_eq!(analytic_kl_normal(&shifted, &std).unwrap(), 0.5, epsilon = 1e-15);
        let wide = NormalParams::new(vec![0.0], vec![2f64.ln()]).unwrap();
        assert_abs_diff_eq!(analytic_kl_normal(&wide, &std).unwrap(), 0.806_852_8, epsilon = 1e-6);
    }

    #[test]
    fn batched_densities_match_slice_versions() {
        let tape = Tape::new();
        let z = tape.constant(arr2(&[[0.2, -1.0]]).into_dyn());
        let m = tape.constant(arr2(&[[0.5, 0.1]]).into_dyn());
        let s = tape.constant(arr2(&[[-0.3, 0.4]]).into_dyn());
        let batched = normal_log_prob_var(z, m, s).value();
        let params = NormalParams::new(vec![0.5, 0.1], vec![-0.3, 0.4]).unwrap();
        let single = normal_log_prob(&[0.2, -1.0], &params).unwrap();
        for e in 0..2 {
            assert_abs_diff_eq!(batched[[0, e]], single[e], epsilon = 1e-14);
        }

        let logits = [0.3, -0.2, 1.1];
        let value = [0.2, 0.5, 0.3];
        let cp = ConcreteParams::new(logits.to_vec(), 0.66).unwrap();
        let lv = tape.constant(arr2(&[[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]]).into_dyn());
        let lp = tape.constant(arr2(&[[logits[0], logits[1], logits[2]]]).into_dyn()).log_softmax(1);
        let batched = concrete_log_prob_var(lv, lp, 0.66).value();
        assert_abs_diff_eq!(
            batched[[0]],
            concrete_log_prob(&value, &cp).unwrap().value,
            epsilon = 1e-12
        );
    }

    #[test]
    fn layout_ranges_and_parsing() {
        let layout = LatentLayout::parse("normal:6, concrete:3", 0.66).unwrap();
        assert_eq!(layout.total_dim(), 9);
        assert_eq!(layout.n_slots(), 7);
        assert_eq!(layout.value_range(1), 6..9);
        assert_eq!(layout.slot_range(1), 6..7);
        assert_eq!(layout.slot_groups(), vec![0, 0, 0, 0, 0, 0, 1]);
        assert_eq!(layout.to_string(), "normal:6,concrete:3");
        assert!(LatentLayout::parse("", 0.66).is_err());
        assert!(LatentLayout::parse("concrete:1", 0.66).is_err());
        assert!(LatentLayout::parse("gamma:2", 0.66).is_err());
        let json = serde_json::to_string(&layout).unwrap();
        assert_eq!(serde_json::from_str::<LatentLayout>(&json).unwrap(), layout);
    }
}
