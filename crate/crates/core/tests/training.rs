use proptest::prelude::*;
use rand::Rng;
use robustlab_core::attack::{robust_accuracy, Attack, AttackSpec};
use robustlab_core::data::{synth_freq_dataset, LabeledImageSet, SyntheticFreqSpec};
use robustlab_core::nn::{LinearClassifier, MlpClassifier, Network, ParamKind, ParamStore};
use robustlab_core::rng::{normal, seeded};
use robustlab_core::structure::*;
use robustlab_core::train::*;
use robustlab_core::{Error, Tensor};

fn synthetic(count: usize, seed: u64) -> LabeledImageSet {
    synth_freq_dataset(&SyntheticFreqSpec {
        count,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn param_bits(net: &dyn Network) -> Vec<u64> {
    net.params().iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn sgd_on_a_squared_scalar() {
    let mut store = ParamStore::new();
    store.add("w", ParamKind::Weight, Tensor::new([1], vec![1.0]).unwrap()).unwrap();
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, &store).unwrap();
    let w = store.get(0).value.data()[0];
    opt.step(&mut store, &[Tensor::new([1], vec![2.0 * w]).unwrap()]).unwrap();
    assert!((store.get(0).value.data()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let data = synthetic(64, 3);
    let run = || {
        let mut net = MlpClassifier::new(64, 16, 2, 4, 0.1).unwrap();
        let mut cfg = TrainConfig::new(2, 16, 9);
        cfg.adversarial = Some(AttackSpec::training_default());
        let losses = Trainer::new(cfg, &net).unwrap().fit(&mut net, &data).unwrap();
        (losses, param_bits(&net))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a.len(), 8);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(pa, pb);
}

#[test]
fn empty_perturbation_ball_matches_standard_training() {
    let data = synthetic(32, 5);
    let (x, y) = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let base = MlpClassifier::new(64, 8, 2, 1, 0.2).unwrap();

    let mut plain = base.clone();
    let mut t = Trainer::new(TrainConfig::new(1, 16, 0), &plain).unwrap();
    let l1 = t.train_step(&mut plain, &x, &y).unwrap();

    let mut adv = base.clone();
    let mut cfg = TrainConfig::new(1, 16, 0);
    cfg.adversarial = Some(AttackSpec {
        epsilon: 0.0,
        ..AttackSpec::training_default()
    });
    let mut t = Trainer::new(cfg, &adv).unwrap();
    let l2 = t.train_step(&mut adv, &x, &y).unwrap();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(param_bits(&plain), param_bits(&adv));
}

/// Two Gaussian blobs on either side of a random hyperplane with a margin.
fn separable(n: usize, seed: u64) -> (LabeledImageSet, Vec<f64>) {
    let mut rng = seeded(seed);
    let normal_dir: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    while ys.len() < n {
        let p: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let side: f64 = p.iter().zip(&normal_dir).map(|(a, b)| (a - 0.5) * b).sum();
        if side.abs() < 0.15 {
            continue;
        }
        xs.extend(p);
        ys.push((side > 0.0) as usize);
    }
    let set = LabeledImageSet::new("separable", 2, Tensor::new([n, 1, 2, 2], xs).unwrap(), ys).unwrap();
    (set, normal_dir)
}

/// Plain full-batch logistic regression, written out by hand.
fn logistic_oracle_accuracy(set: &LabeledImageSet) -> f64 {
    let x = set.images().data();
    let y = set.labels();
    let mut w = [0.0; 4];
    let mut b = 0.0;
    for _ in 0..5000 {
        let mut gw = [0.0; 4];
        let mut gb = 0.0;
        for (i, &t) in y.iter().enumerate() {
            let row = &x[i * 4..i * 4 + 4];
            let z: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - t as f64;
            for k in 0..4 {
                gw[k] += err * row[k];
            }
            gb += err;
        }
        for k in 0..4 {
            w[k] -= 2.0 * gw[k] / y.len() as f64;
        }
        b -= 2.0 * gb / y.len() as f64;
    }
    let correct = y
        .iter()
        .enumerate()
        .filter(|(i, &t)| {
            let z: f64 = x[i * 4..i * 4 + 4].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) as usize == t
        })
        .count();
    correct as f64 / y.len() as f64
}

#[test]
fn separable_toy_is_fit_within_two_hundred_steps() {
    let (data, _) = separable(64, 11);
    assert_eq!(logistic_oracle_accuracy(&data), 1.0);

    let mut net = LinearClassifier::new(4, 2, 0, 0.01).unwrap();
    let mut cfg = TrainConfig::new(1, 8, 0);
    cfg.lr = 0.1;
    let mut trainer = Trainer::new(cfg, &net).unwrap();
    let mut reached = None;
    'outer: for epoch in 0..25 {
        trainer.config.epochs = epoch + 1;
        trainer.fit(&mut net, &data).unwrap();
        if accuracy(&net, &data, 64).unwrap() == 1.0 {
            reached = Some(trainer.step);
            break 'outer;
        }
    }
    let steps = reached.expect("never separated the toy set");
    assert!(steps <= 200, "needed {steps} steps");
}

fn micro(id: &str) -> StructureSpec {
    let scale = Scale {
        image: Some(ImageDims {
            height: 8,
            width: 8,
            channels: 1,
        }),
        patch: Some(2),
        embed_dim: Some(16),
        heads: Some(2),
        classes: Some(2),
        depth: Some(2),
        ..Default::default()
    };
    structure_from_preset(id, Family::Vit).unwrap().rescaled(&scale)
}

#[test]
fn one_epoch_smoke_on_micro_presets() {
    let data = synthetic(8, 0);
    for id in ["(b)", "(n)"] {
        let spec = micro(id);
        spec.validate().unwrap();
        let mut model = Model::new(&spec, 0).unwrap();
        let mut cfg = TrainConfig::new(1, 3, 0);
        cfg.adversarial = Some(AttackSpec::training_default());
        let mut trainer = Trainer::new(cfg, &model).unwrap();
        let losses = trainer.fit(&mut model, &data).unwrap();
        assert_eq!(losses.len(), 3);
        assert_eq!(trainer.step, losses.len());
        assert!(losses.iter().all(|l| l.is_finite()));
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn adversarial_training_is_at_least_as_robust() {
    // Noise as strong as the signal gives a clean-trained model plenty of
    // brittle directions; the budget is scaled to about half the signal
    // amplitude, the same ratio 8/255 has to natural-image contrast.
    let spec = SyntheticFreqSpec {
        amplitude: 0.15,
        noise_std: 0.15,
        count: 256,
        ..Default::default()
    };
    let train = synth_freq_dataset(&spec).unwrap();
    let test = synth_freq_dataset(&SyntheticFreqSpec { seed: 1, count: 128, ..spec }).unwrap();
    let attack = AttackSpec {
        epsilon: 0.08,
        step_size: 0.02,
        ..AttackSpec::training_default()
    };
    let eval = [Attack::Pgd(attack.clone())];
    let mut robust = [Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        for (arm, adversarial) in [None, Some(attack.clone())].into_iter().enumerate() {
            let mut net = MlpClassifier::new(64, 32, 2, seed, 0.1).unwrap();
            let mut cfg = TrainConfig::new(15, 32, seed);
            cfg.lr = 0.01;
            cfg.adversarial = adversarial;
            Trainer::new(cfg, &net).unwrap().fit(&mut net, &train).unwrap();
            robust[arm].push(robust_accuracy(&net, &test, &eval, 64, seed).unwrap().worst);
        }
    }
    let (clean_trained, adv_trained) = (median(robust[0].clone()), median(robust[1].clone()));
    println!("robust accuracy: clean-trained {clean_trained}, adversarially trained {adv_trained}");
    assert!(adv_trained > clean_trained, "{robust:?}");
}

#[test]
fn non_finite_loss_aborts_without_touching_weights() {
    let mut net = LinearClassifier::new(4, 2, 0, 0.1).unwrap();
    net.params_mut().value_mut(0).data_mut()[0] = f64::NAN;
    let before = param_bits(&net);
    let mut trainer = Trainer::new(TrainConfig::new(1, 2, 0), &net).unwrap();
    let x = Tensor::full([2, 1, 2, 2], 0.5);
    let err = trainer.train_step(&mut net, &x, &[0, 1]).unwrap_err();
    assert_eq!(err, Error::NonFiniteLoss { step: 0 });
    assert_eq!(param_bits(&net), before);
    assert_eq!(trainer.step, 0);
}

#[test]
fn config_invariants_are_enforced() {
    let net = LinearClassifier::new(4, 2, 0, 0.1).unwrap();
    let mut cfg = TrainConfig::new(1, 0, 0);
    assert!(Trainer::new(cfg.clone(), &net).is_err());
    cfg.batch = 1;
    cfg.lr = 0.0;
    assert!(Trainer::new(cfg, &net).is_err());
    let mut trainer = Trainer::new(TrainConfig::new(1, 1, 0), &net).unwrap();
    let mut net = net;
    assert!(trainer.train_step(&mut net, &Tensor::zeros([0, 1, 2, 2]), &[]).is_err());
}

fn resume_case(optimizer: OptimizerKind) {
    let data = synthetic(40, 7);
    let mut cfg = TrainConfig::new(3, 16, 21);
    cfg.optimizer = optimizer;
    cfg.adversarial = Some(AttackSpec::training_default());
    let base = MlpClassifier::new(64, 12, 2, 2, 0.1).unwrap();

    let mut straight = base.clone();
    let full = Trainer::new(cfg.clone(), &straight).unwrap().fit(&mut straight, &data).unwrap();

    let mut first = base.clone();
    let mut head_cfg = cfg.clone();
    head_cfg.epochs = 1;
    let mut trainer = Trainer::new(head_cfg, &first).unwrap();
    let head = trainer.fit(&mut first, &data).unwrap();
    let bytes = trainer.checkpoint(&first, "{\"toy\":true}", "abc123").encode();
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(ckpt.encode(), bytes);
    assert_eq!((ckpt.epoch, ckpt.step), (1, 3));

    // Resume into a freshly initialised network with a different seed.
    let mut resumed = MlpClassifier::new(64, 12, 2, 99, 0.1).unwrap();
    let mut trainer = Trainer::resume(cfg, &mut resumed, &ckpt).unwrap();
    let tail = trainer.fit(&mut resumed, &data).unwrap();

    let joined: Vec<u64> = head.iter().chain(&tail).map(|v| v.to_bits()).collect();
    assert_eq!(joined, full.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(param_bits(&resumed), param_bits(&straight));
}

#[test]
fn checkpoint_resume_is_bit_exact_for_adam() {
    resume_case(OptimizerKind::default());
}

#[test]
fn checkpoint_resume_is_bit_exact_for_momentum_sgd() {
    resume_case(OptimizerKind::Sgd { momentum: 0.9 });
}

fn sample_checkpoint() -> Vec<u8> {
    let data = synthetic(8, 1);
    let mut net = MlpClassifier::new(64, 4, 2, 0, 0.1).unwrap();
    let mut trainer = Trainer::new(TrainConfig::new(1, 4, 0), &net).unwrap();
    trainer.fit(&mut net, &data).unwrap();
    trainer.checkpoint(&net, "{}", "").encode()
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = sample_checkpoint();
    assert_eq!(&bytes[..8], &CHECKPOINT_MAGIC);
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad_magic), Err(Error::Checkpoint(_))));
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    assert!(Checkpoint::decode(&bad_version).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::decode(&trailing).is_err());
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().encode(), bytes);

    // Restoring into a network of another shape fails cleanly.
    let ckpt = Checkpoint::decode(&bytes).unwrap();
    let mut other = MlpClassifier::new(64, 5, 2, 0, 0.1).unwrap();
    assert!(ckpt.restore_params(&mut other).is_err());
}

#[test]
fn rng_state_round_trips_mid_stream() {
    let mut rng = seeded(17);
    for _ in 0..13 {
        normal(&mut rng, 1.0);
    }
    let mut restored = RngState::capture(&rng).restore();
    for _ in 0..10 {
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn truncated_or_flipped_checkpoints_never_panic(cut in 0usize..4000, flip in 0usize..4000, bit in 0u8..8) {
        let bytes = sample_checkpoint();
        let cut = cut.min(bytes.len());
        let _ = Checkpoint::decode(&bytes[..cut]);
        let mut flipped = bytes.clone();
        let at = flip % flipped.len();
        flipped[at] ^= 1 << bit;
        let _ = Checkpoint::decode(&flipped);
    }
}
