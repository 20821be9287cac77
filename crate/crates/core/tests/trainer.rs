mod common;

use std::collections::BTreeMap;

use common::{tiny_dataset, tiny_model};
use oceanprompt::checkpoint::Checkpoint;
use oceanprompt::datastore::{AvailabilityMask, Split, VariableUniverse};
use oceanprompt::model::{Model, Variant};
use oceanprompt::trainer::{PolicyMode, SubsetPolicy, TrainConfig, Trainer};
use oceanprompt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 6, 2, 2);
    let stats = ds.read_stats().unwrap();
    let train = ds.load_split(Split::Train, &stats).unwrap();
    let val = ds.load_split(Split::Val, &stats).unwrap();
    let model = Model::new(&tiny_model(Variant::Full), 4).unwrap();
    let policy = SubsetPolicy::default();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.0,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&model, ds.universe(), &policy, &cfg, &train, Some(&val)).unwrap();
    let mut state = trainer.fresh_state();
    let before = state.params.clone();
    trainer.fit(&mut state, |_, _, _| Ok(())).unwrap();
    assert_eq!(state.params, before);
    let vals: Vec<f64> = state.history.iter().map(|r| r.val_loss.unwrap()).collect();
    assert!(vals.iter().all(|&v| v == vals[0]), "{vals:?}");
}

#[test]
fn overfits_a_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 1, 0, 1);
    let stats = ds.read_stats().unwrap();
    let train = ds.load_split(Split::Train, &stats).unwrap();
    let model = Model::new(&tiny_model(Variant::Full), 4).unwrap();
    let policy = SubsetPolicy {
        mode: PolicyMode::FullOnly,
        ..SubsetPolicy::default()
    };
    let cfg = TrainConfig {
        epochs: 500,
        lr: 1e-3,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&model, ds.universe(), &policy, &cfg, &train, None).unwrap();
    let mut state = trainer.fresh_state();
    trainer.fit(&mut state, |_, _, _| Ok(())).unwrap();
    let first = state.step_losses[0];
    let last = *state.step_losses.last().unwrap();
    assert_eq!(state.step_losses.len(), 500);
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn ssh_anchored_subsets_are_uniform() {
    let universe = VariableUniverse::default();
    let policy = SubsetPolicy {
        p_full: 0.0,
        ..SubsetPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 80_000;
    let mut counts: BTreeMap<AvailabilityMask, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(policy.sample_mask(&universe, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 8);
    for (mask, n) in counts {
        assert!(mask.contains(0));
        let freq = n as f64 / draws as f64;
        assert!((freq - 0.125).abs() <= 0.01, "{} drawn with frequency {freq}", mask.label(&universe));
    }
}

#[test]
fn unanchored_policy_never_draws_the_empty_set() {
    let universe = VariableUniverse::default();
    let policy = SubsetPolicy {
        p_full: 0.0,
        always_include: Vec::new(),
        ..SubsetPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..5_000 {
        let m = policy.sample_mask(&universe, &mut rng).unwrap();
        assert!(!m.is_empty());
        seen.insert(m);
    }
    assert_eq!(seen.len(), 15);
}

#[test]
fn full_only_policy_always_observes_everything() {
    let universe = VariableUniverse::default();
    let policy = SubsetPolicy {
        mode: PolicyMode::FullOnly,
        ..SubsetPolicy::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..100).all(|_| policy.sample_mask(&universe, &mut rng).unwrap().is_full()));
}

#[test]
fn curriculum_draws_only_listed_subsets() {
    let universe = VariableUniverse::default();
    let policy = SubsetPolicy {
        mode: PolicyMode::CurriculumList,
        curriculum: vec!["SSH".into(), "SSH+B".into()],
        p_full: 0.0,
        ..SubsetPolicy::default()
    };
    let allowed = [
        AvailabilityMask::parse(&universe, "SSH").unwrap(),
        AvailabilityMask::parse(&universe, "SSH+B").unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!((0..200).all(|_| allowed.contains(&policy.sample_mask(&universe, &mut rng).unwrap())));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 8, 2, 2);
    let stats = ds.read_stats().unwrap();
    let train = ds.load_split(Split::Train, &stats).unwrap();
    let val = ds.load_split(Split::Val, &stats).unwrap();
    let model = Model::new(&tiny_model(Variant::Full), 4).unwrap();
    let policy = SubsetPolicy::default();
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        batch_size: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&model, ds.universe(), &policy, &cfg, &train, Some(&val)).unwrap();

    let mut straight = trainer.fresh_state();
    trainer.fit(&mut straight, |_, _, _| Ok(())).unwrap();

    let mut first = trainer.fresh_state();
    trainer.run_epoch(&mut first).unwrap();
    let path = dir.path().join("mid.ckpt");
    trainer.checkpoint(&first).save(&path).unwrap();
    let mut resumed = trainer.state_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let first_steps = first.step_losses.clone();
    trainer.fit(&mut resumed, |_, _, _| Ok(())).unwrap();

    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.adam.m, straight.adam.m);
    assert_eq!(resumed.adam.step, straight.adam.step);
    let mut stitched = first_steps;
    stitched.extend(&resumed.step_losses);
    assert_eq!(stitched, straight.step_losses);
    let losses = |s: &oceanprompt::trainer::TrainState| {
        s.history.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>()
    };
    assert_eq!(losses(&resumed), losses(&straight));
}

#[test]
fn every_parameter_receives_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2, 0, 1);
    let stats = ds.read_stats().unwrap();
    let train = ds.load_split(Split::Train, &stats).unwrap();
    for variant in [Variant::Full, Variant::NoScp, Variant::NoGsao] {
        let model = Model::new(&tiny_model(variant), 4).unwrap();
        let ps = model.init_params::<f64>(3);
        let mask = AvailabilityMask::parse(ds.universe(), "SSH+U+B").unwrap();
        let x = train.inputs(0, &mask).cast::<f64>();
        let (_, grads) = model
            .loss_and_grad(&ps, &x, &mask, &train.target[0].cast(), 1.0)
            .unwrap();
        for (name, g) in grads.iter() {
            if name == "embedder.uoa.W" {
                // rows of the absent variable stay untouched by design
                continue;
            }
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient in {}", name, variant.name());
        }
    }
}

#[test]
fn non_finite_target_is_reported_as_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 2, 0, 1);
    let stats = ds.read_stats().unwrap();
    let mut train = ds.load_split(Split::Train, &stats).unwrap();
    train.target[1].data_mut()[5] = f32::NAN;
    let model = Model::new(&tiny_model(Variant::Full), 4).unwrap();
    let policy = SubsetPolicy::default();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(&model, ds.universe(), &policy, &cfg, &train, None).unwrap();
    let err = trainer.run_epoch(&mut trainer.fresh_state()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn invalid_configurations_are_rejected() {
    assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    let universe = VariableUniverse::default();
    assert!(SubsetPolicy { p_full: 1.5, ..SubsetPolicy::default() }.validate(&universe).is_err());
    assert!(SubsetPolicy {
        always_include: vec!["SST".into()],
        ..SubsetPolicy::default()
    }
    .validate(&universe)
    .is_err());
}
