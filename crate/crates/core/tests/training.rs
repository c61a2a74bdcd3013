mod common;

use hfvae::data::{synth_factors, SynthSpec};
use hfvae::distributions::LatentLayout;
use hfvae::error::Error;
use hfvae::models::{Architecture, LikelihoodKind, ModelConfig};
use hfvae::training::{
    evaluate, train, Checkpoint, ObjectiveConfig, TrainConfig, Trainer, LAST_CHECKPOINT, LOG_FILE,
};

fn tiny_config(layout: &str, seed: u64) -> TrainConfig {
    let layout = LatentLayout::parse(layout, 0.66).unwrap();
    let model = ModelConfig::new(Architecture::TinyMlp, vec![32, 32], layout, LikelihoodKind::Bernoulli);
    let mut cfg = TrainConfig::new(model, ObjectiveConfig::hfvae(1.0, 4.0, 3.0));
    cfg.batch_size = 16;
    cfg.epochs = 3;
    cfg.seed = seed;
    cfg
}

#[test]
fn identical_seeds_give_identical_logs() {
    let ds = synth_factors(&SynthSpec::small(), 0).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_config("normal:2,concrete:3", 9);
    let ra = train(cfg.clone(), &ds, Some(a.path())).unwrap();
    let rb = train(cfg.clone(), &ds, Some(b.path())).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(ra.model.params, rb.model.params);
    let log_a = std::fs::read(a.path().join(LOG_FILE)).unwrap();
    assert_eq!(log_a, std::fs::read(b.path().join(LOG_FILE)).unwrap());
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), 1 + 3 * 6);

    let other = train(tiny_config("normal:2,concrete:3", 10), &ds, None).unwrap();
    assert_ne!(other.log, ra.log);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let ds = synth_factors(&SynthSpec::small(), 1).unwrap();
    let mut full_cfg = tiny_config("normal:3,concrete:2", 4);
    full_cfg.epochs = 4;
    let full = train(full_cfg.clone(), &ds, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut half_cfg = full_cfg.clone();
    half_cfg.epochs = 2;
    train(half_cfg, &ds, Some(dir.path())).unwrap();
    let mut ckpt = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.epoch, 2);
    ckpt.config.epochs = 4;
    let mut trainer = Trainer::resume(ckpt, ds.len()).unwrap();
    let mut tail = Vec::new();
    while trainer.epoch() < 4 {
        tail.push(trainer.step(&ds).unwrap());
    }
    assert_eq!(trainer.model.params, full.model.params);
    assert_eq!(tail.as_slice(), &full.log[full.log.len() - tail.len()..]);
}

#[test]
fn training_improves_the_elbo() {
    let ds = synth_factors(&SynthSpec::small(), 2).unwrap();
    for seed in 0..3 {
        let mut cfg = tiny_config("normal:4", seed);
        cfg.objective = ObjectiveConfig::preset("vae", None, None, None);
        cfg.batch_size = 32;
        cfg.epochs = 200;
        cfg.optimizer.lr = 3e-3;
        let before = evaluate(&hfvae::models::Model::new(cfg.model.clone(), seed).unwrap(), &ds, 32, 0).unwrap();
        let out = train(cfg, &ds, None).unwrap();
        let after = evaluate(&out.model, &ds, 32, 0).unwrap();
        assert!(
            after.elbo() > before.elbo() + 50.0,
            "seed {seed}: elbo {:.2} -> {:.2}",
            before.elbo(),
            after.elbo()
        );
    }
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let ds = synth_factors(&SynthSpec::small(), 0).unwrap();
    let mut cfg = tiny_config("normal:2", 1);
    cfg.optimizer.lr = 1e300;
    cfg.epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    let err = train(cfg, &ds, Some(dir.path())).err().expect("run should diverge");
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let ckpt = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert!(ckpt.params.iter().all(|(_, t)| t.iter().all(|v| v.is_finite())));
}

#[test]
fn vae_loss_is_the_negative_elbo() {
    let ds = synth_factors(&SynthSpec::small(), 0).unwrap();
    let mut cfg = tiny_config("normal:3,concrete:3", 2);
    cfg.objective = ObjectiveConfig::preset("vae", None, None, None);
    let mut trainer = Trainer::new(cfg, ds.len()).unwrap();
    for _ in 0..10 {
        let d = trainer.draw(&ds);
        let reference = common::independent_elbo(&trainer.model, &d.x, &d.noise);
        let record = trainer.step_on(&d.x, &d.noise).unwrap();
        assert!((-record.loss - reference).abs() <= 1e-9 * reference.abs(), "{} vs {reference}", -record.loss);
    }
}

#[test]
fn mismatched_input_shape_is_a_config_error() {
    let ds = synth_factors(&SynthSpec::small(), 0).unwrap();
    let mut cfg = tiny_config("normal:2", 0);
    cfg.model.input_shape = vec![16, 16];
    assert!(matches!(train(cfg, &ds, None), Err(Error::Config(_))));
}
