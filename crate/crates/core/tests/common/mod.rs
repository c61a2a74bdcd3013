//! Reference computations shared by the integration tests and the acceptance
//! suite. Densities, the ELBO and the mixture entropy are written out here
//! rather than taken from the library.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hfvae::distributions::{GroupKind, GroupPosterior, LatentLayout, LatentNoise};
use hfvae::models::{Architecture, ForwardState, LikelihoodKind, Model, ModelConfig};
use hfvae_autograd::{Tape, Tensor};
use ndarray::{Array2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn tiny_model(layout: &str, input_dim: usize, seed: u64) -> Model {
    let layout = LatentLayout::parse(layout, 0.66).unwrap();
    let cfg = ModelConfig::new(Architecture::TinyMlp, vec![input_dim], layout, LikelihoodKind::Bernoulli);
    Model::new(cfg, seed).unwrap()
}

pub fn uniform_batch(b: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn(IxDyn(&[b, d]), |_| rng.random::<f64>())
}

pub fn normal_logpdf(z: f64, mean: f64, log_std: f64) -> f64 {
    let u = (z - mean) / log_std.exp();
    -0.5 * LN_2PI - log_std - 0.5 * u * u
}

pub fn own_log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

/// Concrete density at a point given by its logs, written out term by term.
pub fn concrete_logpdf(log_v: &[f64], logits: &[f64], tau: f64) -> f64 {
    let k = log_v.len();
    let log_pi = own_log_softmax(logits);
    let log_gamma_k: f64 = (1..k).map(|i| (i as f64).ln()).sum();
    let a: Vec<f64> = log_pi.iter().zip(log_v).map(|(lp, lv)| lp - tau * lv).collect();
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + a.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    let mut out = log_gamma_k + (k as f64 - 1.0) * tau.ln();
    for i in 0..k {
        out += log_pi[i] - (tau + 1.0) * log_v[i];
    }
    out - k as f64 * lse
}

/// Per-datapoint sample, prior and posterior log-densities from the encoder
/// outputs and the given noise.
pub struct PointSample {
    pub z: Vec<f64>,
    pub log_prior: f64,
    pub log_posterior: f64,
}

pub fn sample_points(model: &Model, x: &Tensor, noise: &LatentNoise) -> Vec<PointSample> {
    let layout = model.layout();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let posts = model.encode(&p, tape.constant(x.clone()), &mut ForwardState::eval()).unwrap();
    let b = x.shape()[0];
    (0..b)
        .map(|i| {
            let mut s = PointSample { z: Vec::new(), log_prior: 0.0, log_posterior: 0.0 };
            for (d, post) in posts.iter().enumerate() {
                let eps = &noise.groups[d];
                match post {
                    GroupPosterior::Normal { mean, log_std } => {
                        let (m, ls) = (mean.value(), log_std.value());
                        for j in 0..layout.group(d).dim {
                            let z = m[[i, j]] + ls[[i, j]].exp() * eps[[i, j]];
                            s.log_posterior += normal_logpdf(z, m[[i, j]], ls[[i, j]]);
                            s.log_prior += normal_logpdf(z, 0.0, 0.0);
                            s.z.push(z);
                        }
                    }
                    GroupPosterior::Concrete { logits } => {
                        let l = logits.value();
                        let k = layout.group(d).dim;
                        let tau = layout.group(d).temperature().unwrap();
                        let logits: Vec<f64> = (0..k).map(|j| l[[i, j]]).collect();
                        let scaled: Vec<f64> = (0..k).map(|j| (logits[j] + eps[[i, j]]) / tau).collect();
                        let log_v = own_log_softmax(&scaled);
                        s.log_posterior += concrete_logpdf(&log_v, &logits, tau);
                        s.log_prior += concrete_logpdf(&log_v, &vec![0.0; k], tau);
                        s.z.extend(log_v.iter().map(|v| v.exp()));
                    }
                }
            }
            s
        })
        .collect()
}

/// Single-sample ELBO `mean_b[log p(x|z) + log p(z) - log q(z|x)]` for a Bernoulli model.
pub fn independent_elbo(model: &Model, x: &Tensor, noise: &LatentNoise) -> f64 {
    let points = sample_points(model, x, noise);
    let b = points.len();
    let dim = model.layout().total_dim();
    let z = Tensor::from_shape_vec(IxDyn(&[b, dim]), points.iter().flat_map(|p| p.z.clone()).collect()).unwrap();
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.decode(&p, tape.constant(z), &mut ForwardState::eval()).unwrap().value();
    let mut total = 0.0;
    for (i, pt) in points.iter().enumerate() {
        let mut rec = 0.0;
        for j in 0..x.shape()[1] {
            let prob = out[[i, j]].clamp(1e-6, 1.0 - 1e-6);
            rec += x[[i, j]] * prob.ln() + (1.0 - x[[i, j]]) * (1.0 - prob).ln();
        }
        total += rec + pt.log_prior - pt.log_posterior;
    }
    total / b as f64
}

/// `log q̂` written as an explicit weighted sum over one row of densities,
/// where entry `diag` belongs to the sample's own datapoint.
pub fn stratified_log_marginal_row(row: &[f64], diag: usize, dataset_size: usize) -> f64 {
    let n = dataset_size as f64;
    let b = row.len() as f64;
    let w_other = (n - 1.0) / (n * (b - 1.0));
    let s: f64 = row
        .iter()
        .enumerate()
        .map(|(j, lq)| lq.exp() * if j == diag { 1.0 / n } else { w_other })
        .sum();
    s.ln()
}

/// `(max relative error, configurations per query)` of the mean stratified
/// estimate against the exact mixture density, over all datapoint choices.
pub fn unbiasedness_enumeration(queries: usize, seed: u64) -> (f64, usize) {
    use hfvae::objective::stratified_log_marginal_values;
    let (n, b) = (5usize, 3usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect();
    let log_stds: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-0.7..0.3), rng.random_range(-0.7..0.3)]).collect();
    let log_q = |z: &[f64; 2], k: usize| -> f64 {
        (0..2).map(|j| normal_logpdf(z[j], means[k][j], log_stds[k][j])).sum()
    };
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for _ in 0..queries {
        let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let exact = (0..n).map(|k| log_q(&z, k).exp()).sum::<f64>() / n as f64;
        let mut sum = 0.0;
        configs = 0;
        for own in 0..n {
            let others: Vec<usize> = (0..n).filter(|&k| k != own).collect();
            for a in 0..others.len() {
                for c in a + 1..others.len() {
                    let members = [own, others[a], others[c]];
                    let table = Array2::from_shape_fn((b, b), |(_, j)| log_q(&z, members[j]));
                    let lq = stratified_log_marginal_values(&table, n).unwrap();
                    sum += lq[0].exp();
                    configs += 1;
                }
            }
        }
        worst = worst.max(((sum / configs as f64) - exact).abs() / exact);
    }
    (worst, configs)
}

/// Entropy of an equal-weight 1-D Gaussian mixture by Simpson quadrature.
pub fn mixture_entropy(means: &[f64], sd: f64) -> f64 {
    let (lo, hi) = (means.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sd, means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd);
    let steps = 40_000;
    let h = (hi - lo) / steps as f64;
    let f = |z: f64| {
        let q = means.iter().map(|m| normal_logpdf(z, *m, sd.ln()).exp()).sum::<f64>() / means.len() as f64;
        if q > 0.0 {
            -q * q.ln()
        } else {
            0.0
        }
    };
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `(mean Ĥ, standard error, quadrature entropy)` over minibatches drawn
/// without replacement from `n` datapoints whose posteriors are `N(±1.5, 1)`.
pub fn jensen_simulation(batches: usize, b: usize, n: usize, seed: u64) -> (f64, f64, f64) {
    use hfvae::objective::entropy_estimate;
    use rand::seq::index::sample;
    let centres: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { -1.5 } else { 1.5 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut estimates = Vec::with_capacity(batches);
    for _ in 0..batches {
        let idx = sample(&mut rng, n, b).into_vec();
        let z: Vec<f64> = idx
            .iter()
            .map(|&i| centres[i] + rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
            .collect();
        let table = Array2::from_shape_fn((b, b), |(r, c)| normal_logpdf(z[r], centres[idx[c]], 0.0));
        estimates.push(entropy_estimate(&table, n).unwrap());
    }
    let m = estimates.iter().sum::<f64>() / batches as f64;
    let var = estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    let exact = mixture_entropy(&[-1.5, 1.5], 1.0);
    (m, (var / batches as f64).sqrt(), exact)
}

/// Finite-difference check of the full weighted loss of a tiny model with
/// respect to every parameter, on fixed data and noise.
pub fn full_loss_gradcheck(seed: u64) -> hfvae_autograd::gradcheck::GradCheckReport {
    use hfvae::objective::{compute_terms, TermWeights};
    use hfvae_autograd::BoundParams;
    let model = tiny_model("normal:2,concrete:2", 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = uniform_batch(4, 2, &mut rng);
    let noise = LatentNoise::sample(model.layout(), 4, &mut rng);
    let weights = TermWeights::new(1.3, 4.0, 3.0, 0.7);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    hfvae_autograd::gradcheck::check_gradients(
        |tape, vars| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>());
            let dec = compute_terms(tape, &model, &bound, &x, 16, &noise, &mut ForwardState::eval()).unwrap();
            dec.loss(&weights)
        },
        &inputs,
        1e-5,
        1e-6,
    )
}

/// Layout strings mixing Normal and Concrete groups, for randomized checks.
pub const TINY_LAYOUTS: [&str; 5] = ["normal:3", "normal:2,concrete:3", "concrete:2,normal:1,normal:2", "normal:1,concrete:4,concrete:2", "concrete:3"];

pub fn has_concrete(layout: &LatentLayout) -> bool {
    layout.groups().iter().any(|g| g.kind == GroupKind::Concrete)
}

/// A small archive with the dSprites key schema: every shape, two of each
/// other factor, binary images.
pub fn write_dsprites_fixture(path: &std::path::Path) -> usize {
    use ndarray::{Array2, Array3};
    use ndarray_npy::NpzWriter;
    let cards = [1usize, 3, 2, 2, 2, 2];
    let n: usize = cards.iter().product();
    let mut classes = Array2::<i64>::zeros((n, 6));
    for i in 0..n {
        let mut rest = i;
        for f in (0..6).rev() {
            classes[[i, f]] = (rest % cards[f]) as i64;
            rest /= cards[f];
        }
    }
    let values = classes.mapv(|c| c as f64 * 0.5);
    let imgs = Array3::<u8>::from_shape_fn((n, 64, 64), |(i, r, c)| u8::from((r + c + i) % 7 == 0));
    let mut npz = NpzWriter::new(std::fs::File::create(path).unwrap());
    npz.add_array("imgs", &imgs).unwrap();
    npz.add_array("latents_values", &values).unwrap();
    npz.add_array("latents_classes", &classes).unwrap();
    npz.add_array("metadata", &ndarray::arr1(&[0u8])).unwrap();
    npz.finish().unwrap();
    n
}
