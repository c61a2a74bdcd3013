mod common;

use approx::assert_abs_diff_eq;
use hfvae::distributions::{
    analytic_kl_normal, GroupPosterior, GroupSample, LatentLayout, LatentNoise, NormalParams,
};
use hfvae::models::ForwardState;
use hfvae::objective::{
    compute_terms, entropy_estimate, hfvae_objective, pairwise_log_prob, stratified_log_marginal_values,
    stratified_log_weights, total_correlation_estimate, LogProbMatrix, TcScope, TermWeights,
};
use hfvae_autograd::{Tape, Tensor};
use ndarray::{Array2, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Log-prob matrix of Normal samples `z` under per-row posteriors.
fn normal_matrix<'t>(tape: &'t Tape, layout: &LatentLayout, mean: &Array2<f64>, log_std: &Array2<f64>, z: &Array2<f64>) -> LogProbMatrix<'t> {
    let mut posts = Vec::new();
    let mut samples = Vec::new();
    for d in 0..layout.n_groups() {
        let r = layout.value_range(d);
        let cut = |a: &Array2<f64>| tape.constant(a.slice(ndarray::s![.., r.clone()]).to_owned().into_dyn());
        posts.push(GroupPosterior::Normal { mean: cut(mean), log_std: cut(log_std) });
        samples.push(GroupSample::Normal(cut(z)));
    }
    pairwise_log_prob(&samples, &posts, layout).unwrap()
}

fn terms_for(layout: &str, dim: usize, b: usize, n: usize, seed: u64) -> (hfvae::objective::BatchTerms, Vec<common::PointSample>) {
    let model = common::tiny_model(layout, dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let x = common::uniform_batch(b, dim, &mut rng);
    let noise = LatentNoise::sample(model.layout(), b, &mut rng);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let t = compute_terms(&tape, &model, &p, &x, n, &noise, &mut ForwardState::eval()).unwrap().terms();
    (t, common::sample_points(&model, &x, &noise))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_telescopes(layout in 0..common::TINY_LAYOUTS.len(), dim in 2usize..6, b in 2usize..9, extra in 0usize..500, seed in any::<u64>()) {
        let (t, _) = terms_for(common::TINY_LAYOUTS[layout], dim, b, b + extra, seed);
        let split = t.ta + t.ti.iter().sum::<f64>() + t.tii.iter().sum::<f64>();
        prop_assert!(rel(split, t.t4) < 1e-9, "t4 {} vs split {}", t.t4, split);
    }

    #[test]
    fn marginal_estimates_cancel(layout in 0..common::TINY_LAYOUTS.len(), dim in 2usize..6, b in 2usize..9, extra in 0usize..500, seed in any::<u64>()) {
        let (t, pts) = terms_for(common::TINY_LAYOUTS[layout], dim, b, b + extra, seed);
        let direct = pts.iter().map(|p| p.log_prior - p.log_posterior).sum::<f64>() / b as f64;
        prop_assert!(rel(t.t2 + t.t4, direct) < 1e-9);
        prop_assert!(rel(t.prior_minus_posterior, direct) < 1e-9);
    }

    #[test]
    fn stratified_weights_sum_to_one(b in 2usize..40, extra in 0usize..10_000) {
        let w = stratified_log_weights(b, b + extra).unwrap();
        for row in w.rows() {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_marginal_matches_direct_sum(b in 2usize..8, extra in 0usize..50, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Array2::from_shape_fn((b, b), |_| rng.random_range(-30.0..5.0));
        let got = stratified_log_marginal_values(&table, b + extra).unwrap();
        for (i, g) in got.iter().enumerate() {
            let row: Vec<f64> = table.row(i).to_vec();
            let want = common::stratified_log_marginal_row(&row, i, b + extra);
            prop_assert!((g - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }
}

#[test]
fn terms_match_brute_force_from_log_prob_table() {
    // Normal-only layout with two groups; every term is rebuilt from the table.
    let layout = LatentLayout::parse("normal:2,normal:1", 0.66).unwrap();
    let (b, n) = (5, 40);
    let model = {
        let cfg = hfvae::models::ModelConfig::new(
            hfvae::models::Architecture::TinyMlp,
            vec![3],
            layout.clone(),
            hfvae::models::LikelihoodKind::Bernoulli,
        );
        hfvae::models::Model::new(cfg, 9).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = common::uniform_batch(b, 3, &mut rng);
    let noise = LatentNoise::sample(&layout, b, &mut rng);
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let dec = compute_terms(&tape, &model, &p, &x, n, &noise, &mut ForwardState::eval()).unwrap();
    let t = dec.terms();

    let posts = model.encode(&p, tape.constant(x.clone()), &mut ForwardState::eval()).unwrap();
    let (mut mean, mut log_std) = (Array2::zeros((b, 3)), Array2::zeros((b, 3)));
    let mut col = 0;
    for post in &posts {
        let GroupPosterior::Normal { mean: m, log_std: s } = post else { unreachable!() };
        let (m, s) = (m.value(), s.value());
        for j in 0..m.shape()[1] {
            for i in 0..b {
                mean[[i, col]] = m[[i, j]];
                log_std[[i, col]] = s[[i, j]];
            }
            col += 1;
        }
    }
    let z = Array2::from_shape_fn((b, 3), |(i, j)| mean[[i, j]] + log_std[[i, j]].exp() * noise.groups[if j < 2 { 0 } else { 1 }][[i, if j < 2 { j } else { 0 }]]);
    let lq = |i: usize, k: usize, dims: &[usize]| -> f64 {
        dims.iter().map(|&e| common::normal_logpdf(z[[i, e]], mean[[k, e]], log_std[[k, e]])).sum()
    };
    let lqhat = |i: usize, dims: &[usize]| -> f64 {
        let row: Vec<f64> = (0..b).map(|k| lq(i, k, dims)).collect();
        common::stratified_log_marginal_row(&row, i, n)
    };
    let lp = |i: usize, dims: &[usize]| -> f64 { dims.iter().map(|&e| common::normal_logpdf(z[[i, e]], 0.0, 0.0)).sum() };
    let all = [0, 1, 2];
    let groups: [&[usize]; 2] = [&[0, 1], &[2]];
    let mean_over = |f: &dyn Fn(usize) -> f64| (0..b).map(f).sum::<f64>() / b as f64;

    let t2 = mean_over(&|i| lqhat(i, &all) - lq(i, i, &all));
    let ta = mean_over(&|i| -(lqhat(i, &all) - groups.iter().map(|g| lqhat(i, g)).sum::<f64>()));
    let ti0 = mean_over(&|i| -(lqhat(i, groups[0]) - lqhat(i, &[0]) - lqhat(i, &[1])));
    let tii: Vec<f64> = (0..3).map(|e| mean_over(&|i| lp(i, &[e]) - lqhat(i, &[e]))).collect();
    let mi: Vec<f64> = (0..3).map(|e| mean_over(&|i| lq(i, i, &[e]) - lqhat(i, &[e]))).collect();

    assert_abs_diff_eq!(t.t2, t2, epsilon = 1e-10);
    assert_abs_diff_eq!(t.ta, ta, epsilon = 1e-10);
    assert_abs_diff_eq!(t.ti[0], ti0, epsilon = 1e-10);
    assert_abs_diff_eq!(t.ti[1], 0.0, epsilon = 1e-12);
    for e in 0..3 {
        assert_abs_diff_eq!(t.tii[e], tii[e], epsilon = 1e-10);
        assert_abs_diff_eq!(t.per_dim_mi[e], mi[e], epsilon = 1e-10);
    }
}

#[test]
fn concrete_groups_have_no_within_group_term() {
    let (t, _) = terms_for("normal:2,concrete:3", 4, 6, 30, 1);
    assert_eq!(t.ti.len(), 2);
    assert_eq!(t.ti[1], 0.0);
    assert_eq!(t.tii.len(), 3);
}

#[test]
fn single_sample_kl_agrees_with_analytic_kl() {
    let layout = LatentLayout::parse("normal:2", 0.66).unwrap();
    let b = 4;
    let mean = Array2::from_shape_vec((b, 2), vec![0.3, -1.0, 1.2, 0.5, -0.4, 0.0, 2.0, -0.7]).unwrap();
    let log_std = Array2::from_shape_vec((b, 2), vec![-0.5, 0.2, 0.1, -1.0, 0.0, 0.3, -0.2, -0.4]).unwrap();
    let kl: f64 = (0..b)
        .map(|i| {
            let q = NormalParams::new(mean.row(i).to_vec(), log_std.row(i).to_vec()).unwrap();
            analytic_kl_normal(&q, &NormalParams::standard(2)).unwrap()
        })
        .sum::<f64>()
        / b as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let samples = 10_000;
    let mut draws = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = Array2::from_shape_fn((b, 2), |_| -> f64 { StandardNormal.sample(&mut rng) });
        let z = &mean + &(log_std.mapv(f64::exp) * eps);
        let tape = Tape::new();
        let m = normal_matrix(&tape, &layout, &mean, &log_std, &z);
        let lp: f64 = z.iter().map(|&v| common::normal_logpdf(v, 0.0, 0.0)).sum::<f64>() / b as f64;
        let lq = m.diagonal().value().sum() / b as f64;
        draws.push(lp - lq);
    }
    let avg = draws.iter().sum::<f64>() / samples as f64;
    let sd = (draws.iter().map(|d| (d - avg).powi(2)).sum::<f64>() / (samples - 1) as f64).sqrt();
    let se = sd / (samples as f64).sqrt();
    assert!((avg + kl).abs() < 3.0 * se, "MC {avg} vs -KL {} (se {se})", -kl);
}

#[test]
fn loss_weightings() {
    let (t, _) = terms_for("normal:2,concrete:3", 3, 6, 50, 2);
    assert_abs_diff_eq!(hfvae_objective(&t, &TermWeights::new(0.0, 0.0, 0.0, 0.0)), -t.rec, epsilon = 1e-12);
    let beta = 4.0;
    let got = hfvae_objective(&t, &TermWeights::new(beta, beta, beta, beta));
    assert!(rel(got, -(t.rec + beta * (t.t2 + t.t4))) < 1e-9);
    let vae = hfvae_objective(&t, &TermWeights::default());
    assert!(rel(vae, -t.elbo()) < 1e-9);
}

#[test]
fn pairwise_table_structure() {
    let layout = LatentLayout::parse("normal:1", 0.66).unwrap();
    let tape = Tape::new();
    let one = Array2::from_elem((1, 1), 0.0);
    let posts = vec![GroupPosterior::Normal { mean: tape.constant(one.clone().into_dyn()), log_std: tape.constant(one.clone().into_dyn()) }];
    let samples = vec![GroupSample::Normal(tape.constant(one.into_dyn()))];
    assert!(pairwise_log_prob(&samples, &posts, &layout).is_err());

    let mean = Array2::from_shape_vec((2, 1), vec![0.0, 10.0]).unwrap();
    let log_std = Array2::zeros((2, 1));
    let z = Array2::from_shape_vec((2, 1), vec![0.2, 9.7]).unwrap();
    let m = normal_matrix(&tape, &layout, &mean, &log_std, &z).joint().value();
    assert!(m[[0, 0]] > m[[0, 1]] && m[[1, 1]] > m[[1, 0]]);

    let same = Array2::from_elem((3, 1), 0.5);
    let z = Array2::from_shape_vec((3, 1), vec![0.1, 0.7, -0.3]).unwrap();
    let m = normal_matrix(&tape, &layout, &same, &Array2::zeros((3, 1)), &z).joint().value();
    for i in 0..3 {
        assert_eq!(m[[i, 0]], m[[i, 1]]);
        assert_eq!(m[[i, 1]], m[[i, 2]]);
    }
}

#[test]
fn stratified_estimator_rejects_small_dataset() {
    assert!(stratified_log_weights(1, 10).is_err());
    assert!(stratified_log_weights(8, 7).is_err());
    assert!(stratified_log_marginal_values(&Array2::zeros((4, 4)), 3).is_err());
}

#[test]
fn estimator_is_unbiased_over_all_strata() {
    let (worst, configs) = common::unbiasedness_enumeration(20, 1);
    assert_eq!(configs, 30);
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn entropy_of_narrow_mixture() {
    let n = 16;
    let sigma: f64 = 1e-3;
    let means: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z: Vec<f64> = means.iter().map(|m| m + sigma * { let v: f64 = StandardNormal.sample(&mut rng); v }).collect();
    let table = Array2::from_shape_fn((n, n), |(i, k)| common::normal_logpdf(z[i], means[k], sigma.ln()));
    let h = entropy_estimate(&table, n).unwrap();
    let per_point = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
    let own: f64 = (0..n).map(|i| -table[[i, i]]).sum::<f64>() / n as f64;
    assert!((h - ((n as f64).ln() + own)).abs() < 1e-9);
    assert!((h - ((n as f64).ln() + per_point)).abs() < 1.0);

    let flat = Array2::from_shape_fn((n, n), |(i, _)| common::normal_logpdf(z[i], 0.0, 0.0));
    let h = entropy_estimate(&flat, n).unwrap();
    let single: f64 = (0..n).map(|i| -flat[[i, 0]]).sum::<f64>() / n as f64;
    assert_abs_diff_eq!(h, single, epsilon = 1e-12);
}

#[test]
fn entropy_estimate_upper_bounds_quadrature() {
    let (mean, se, exact) = common::jensen_simulation(1000, 8, 64, 2);
    assert!(mean >= exact - 3.0 * se, "{mean} (se {se}) vs {exact}");
}

#[test]
fn total_correlation_cases() {
    let tape = Tape::new();
    let one = LatentLayout::parse("normal:1", 0.66).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = 16;
    let mean = Array2::from_shape_fn((b, 1), |_| rng.random_range(-2.0..2.0));
    let z = mean.mapv(|m| m + 0.3);
    let m = normal_matrix(&tape, &one, &mean, &Array2::zeros((b, 1)), &z);
    assert_eq!(total_correlation_estimate(&m, 40, TcScope::Slots).unwrap(), 0.0);

    let two = LatentLayout::parse("normal:2", 0.66).unwrap();
    let n = 64;
    let line: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
    let mean = Array2::from_shape_fn((n, 2), |(i, _)| line[i]);
    let log_std = Array2::from_elem((n, 2), (0.01f64).ln());
    let z = Array2::from_shape_fn((n, 2), |(i, j)| mean[[i, j]] + 0.01 * if j == 0 { 0.5 } else { -0.5 });
    let m = normal_matrix(&tape, &two, &mean, &log_std, &z);
    let tc = total_correlation_estimate(&m, n, TcScope::Group(0)).unwrap();
    assert!(tc > 1.0, "{tc}");

    // Independent coordinates on a product grid: q(z) factorizes.
    let side = 8;
    let grid: Vec<f64> = (0..side).map(|i| i as f64 - 3.5).collect();
    let mut estimates = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = Array2::from_shape_fn((side * side, 2), |(i, j)| if j == 0 { grid[i / side] } else { grid[i % side] });
        let ls = Array2::zeros((side * side, 2));
        let z = Array2::from_shape_fn((side * side, 2), |(i, j)| mean[[i, j]] + { let v: f64 = StandardNormal.sample(&mut rng); v });
        let tape = Tape::new();
        let m = normal_matrix(&tape, &two, &mean, &ls, &z);
        estimates.push(total_correlation_estimate(&m, side * side, TcScope::Slots).unwrap());
    }
    let avg = estimates.iter().sum::<f64>() / 20.0;
    let se = (estimates.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / 19.0).sqrt() / 20f64.sqrt();
    assert!(avg.abs() < 3.0 * se + 1e-3, "{avg} (se {se})");
}

#[test]
fn per_dim_mi_rarely_exceeds_log_n() {
    let trials = 300;
    let mut over = 0;
    for seed in 0..trials {
        let (t, _) = terms_for("normal:2,concrete:3", 3, 8, 64, seed);
        let bound = (64f64).ln() + 0.1;
        over += usize::from(t.per_dim_mi.iter().any(|&v| v > bound));
    }
    assert!((over as f64) < 0.01 * trials as f64);
}

#[test]
fn full_loss_gradients_match_finite_differences() {
    let r = common::full_loss_gradcheck(5);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn non_finite_inputs_are_named() {
    let model = common::tiny_model("normal:2", 3, 0);
    let x = Tensor::from_elem(IxDyn(&[4, 3]), 0.5);
    let mut noise = LatentNoise::zeros(model.layout(), 4);
    noise.groups[0][[0, 0]] = f64::NAN;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let err = compute_terms(&tape, &model, &p, &x, 10, &noise, &mut ForwardState::eval()).unwrap_err();
    assert!(matches!(err, hfvae::Error::NonFinite { .. }), "{err}");
}
