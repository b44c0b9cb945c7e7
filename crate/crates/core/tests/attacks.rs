use proptest::prelude::*;
use rand::Rng;
use robustlab_core::attack::*;
use robustlab_core::data::LabeledImageSet;
use robustlab_core::nn::{per_sample_loss, ConstantClassifier, LinearClassifier, MlpClassifier, Network};
use robustlab_core::rng::seeded;
use robustlab_core::Tensor;

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Two-class linear model whose logit gap is `w·x`.
fn logistic(w: &[f64]) -> LinearClassifier {
    let d = w.len();
    let weight = Tensor::from_fn([d, 2], |i| if i % 2 == 1 { w[i / 2] } else { 0.0 });
    LinearClassifier::from_weights(weight, Tensor::zeros([2])).unwrap()
}

fn within_ball(adv: &Tensor, x: &Tensor, eps: f64) -> bool {
    adv.data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| (a - b).abs() <= eps + 1e-12 && (0.0..=1.0).contains(a))
}

fn mean_loss(net: &dyn Network, x: &Tensor, y: &[usize]) -> Vec<f64> {
    per_sample_loss(net, x, y).unwrap()
}

#[test]
fn fgsm_on_logistic_model_matches_closed_form() {
    let mut rng = seeded(1);
    let w: Vec<f64> = (0..12).map(|i| if i == 5 { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
    let net = logistic(&w);
    let x = uniform(&[3, 1, 3, 4], 2, 0.0, 1.0);
    let eps = 0.05;
    let adv = fgsm(&net, &x, &[1, 1, 1], eps).unwrap();
    for (k, (&a, &x0)) in adv.data().iter().zip(x.data()).enumerate() {
        let wk = w[k % 12];
        let s = if wk > 0.0 { 1.0 } else if wk < 0.0 { -1.0 } else { 0.0 };
        let expected = (x0 - eps * s).clamp(0.0, 1.0);
        assert!((a - expected).abs() <= 1e-12, "coordinate {k}");
    }
    // The zero-weight coordinate has a zero gradient and is left alone.
    assert_eq!(adv.data()[5], x.data()[5]);
    assert_eq!(fgsm(&net, &x, &[1, 1, 1], 0.0).unwrap(), x);
}

#[test]
fn pgd_never_loses_to_the_clean_point() {
    let spec = AttackSpec {
        epsilon: 8.0 / 255.0,
        steps: 5,
        step_size: 0.01,
        restarts: 1,
        init: AttackInit::Clean,
    };
    for pair in 0..100u64 {
        let net = MlpClassifier::new(16, 8, 3, pair, 0.5).unwrap();
        let x = uniform(&[1, 1, 4, 4], 1000 + pair, 0.0, 1.0);
        let y = [(pair % 3) as usize];
        let adv = pgd(&net, &x, &y, &spec, pair).unwrap();
        assert!(mean_loss(&net, &adv, &y)[0] >= mean_loss(&net, &x, &y)[0], "pair {pair}");
    }
}

#[test]
fn one_step_pgd_is_fgsm_at_the_step_size() {
    let mut rng = seeded(3);
    let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let net = logistic(&w);
    let x = uniform(&[4, 1, 4, 4], 4, 0.0, 1.0);
    let y = [1, 0, 1, 0];
    let spec = AttackSpec {
        epsilon: 0.03,
        steps: 1,
        step_size: 0.01,
        restarts: 1,
        init: AttackInit::Clean,
    };
    let a = pgd(&net, &x, &y, &spec, 0).unwrap();
    let f = fgsm(&net, &x, &y, 0.01).unwrap();
    let projected = Tensor::from_fn(x.shape().to_vec(), |i| f.data()[i].clamp(x.data()[i] - 0.03, x.data()[i] + 0.03));
    assert_eq!(a, projected);
}

#[test]
fn default_training_attack_settings() {
    let s = AttackSpec::training_default();
    assert_eq!((s.epsilon, s.steps, s.step_size), (8.0 / 255.0, 10, 0.01));
}

#[test]
fn more_restarts_never_lower_the_loss() {
    let net = MlpClassifier::new(16, 8, 3, 5, 0.5).unwrap();
    let x = uniform(&[6, 1, 4, 4], 6, 0.0, 1.0);
    let y = [0, 1, 2, 0, 1, 2];
    let mut spec = AttackSpec::evaluation_default(0.05);
    spec.steps = 3;
    let mut prev = vec![f64::NEG_INFINITY; 6];
    for restarts in 1..=4 {
        spec.restarts = restarts;
        let l = mean_loss(&net, &pgd(&net, &x, &y, &spec, 9).unwrap(), &y);
        for (a, b) in l.iter().zip(&prev) {
            assert!(a >= b);
        }
        prev = l;
    }
}

#[test]
fn square_search_on_a_constant_model_keeps_the_start() {
    let net = ConstantClassifier::new(vec![0.3, -0.1]).unwrap();
    let x = uniform(&[2, 3, 4, 4], 7, 0.0, 1.0);
    let spec = AttackSpec::evaluation_default(0.1);
    let adv = square_lite(&net, &x, &[0, 1], &spec, 1, &mut seeded(1)).unwrap();
    assert_eq!(adv, x);
    let adv = square_lite(&net, &x, &[0, 1], &spec, 50, &mut seeded(1)).unwrap();
    assert_eq!(mean_loss(&net, &adv, &[0, 1]), mean_loss(&net, &x, &[0, 1]));
}

#[test]
fn square_search_recovers_half_the_white_box_gain() {
    let mut gains = Vec::new();
    for seed in 0..5u64 {
        let mut rng = seeded(100 + seed);
        let w: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let net = logistic(&w);
        let x = uniform(&[1, 3, 4, 4], 200 + seed, 0.2, 0.8);
        let y = [1];
        let spec = AttackSpec::evaluation_default(0.1);
        let clean = mean_loss(&net, &x, &y)[0];
        let white = mean_loss(&net, &fgsm(&net, &x, &y, 0.1).unwrap(), &y)[0] - clean;
        let adv = square_lite(&net, &x, &y, &spec, 500, &mut seeded(seed)).unwrap();
        assert!(within_ball(&adv, &x, 0.1));
        gains.push((mean_loss(&net, &adv, &y)[0] - clean) / white);
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[2] >= 0.5, "median ratio {}", gains[2]);
}

fn labelled(n: usize, seed: u64) -> LabeledImageSet {
    let x = uniform(&[n, 1, 4, 4], seed, 0.0, 1.0);
    let labels = (0..n).map(|i| [0, 0, 1, 0, 1][i % 5]).collect();
    LabeledImageSet::new("toy", 2, x, labels).unwrap()
}

#[test]
fn robust_accuracy_contracts() {
    let data = labelled(20, 8);
    let mut rng = seeded(9);
    let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let net = logistic(&w);
    let zero = Attack::Pgd(AttackSpec::evaluation_default(0.0));
    let pgd_a = Attack::Pgd(AttackSpec::evaluation_default(0.1));
    let sq = Attack::SquareLite {
        spec: AttackSpec::evaluation_default(0.1),
        queries: 50,
    };
    let r = robust_accuracy(&net, &data, &[zero, pgd_a, sq], 7, 1).unwrap();
    assert_eq!(r.per_attack[0], r.clean);
    assert!(r.worst <= r.per_attack[1].min(r.per_attack[2]));

    let constant = ConstantClassifier::new(vec![1.0, 0.0]).unwrap();
    let r = robust_accuracy(&constant, &data, &[Attack::Pgd(AttackSpec::evaluation_default(0.3))], 8, 1).unwrap();
    assert_eq!(r.per_attack[0], 0.6);
    assert_eq!(r.clean, 0.6);
}

#[test]
fn robust_accuracy_falls_with_budget_on_linear_models() {
    let data = labelled(40, 10);
    let mut rng = seeded(11);
    let w: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let net = logistic(&w);
    let mut prev = 1.0;
    for k in 0..6 {
        let eps = 0.02 * k as f64;
        let r = robust_accuracy(&net, &data, &[Attack::Fgsm { epsilon: eps }], 16, 0).unwrap();
        assert!(r.worst <= prev);
        prev = r.worst;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_adversary_respects_the_ball(seed in 0u64..1000, eps in 0.0f64..0.3, steps in 0usize..4, uniform_init in any::<bool>()) {
        let net = MlpClassifier::new(12, 6, 3, seed, 0.8).unwrap();
        let x = uniform(&[3, 3, 2, 2], seed + 1, 0.0, 1.0);
        let y = [0, 1, 2];
        let spec = AttackSpec {
            epsilon: eps,
            steps,
            step_size: 0.05,
            restarts: 2,
            init: if uniform_init { AttackInit::UniformInBall } else { AttackInit::Clean },
        };
        prop_assert!(within_ball(&fgsm(&net, &x, &y, eps).unwrap(), &x, eps));
        prop_assert!(within_ball(&pgd(&net, &x, &y, &spec, seed).unwrap(), &x, eps));
        prop_assert!(within_ball(&square_lite(&net, &x, &y, &spec, 10, &mut seeded(seed)).unwrap(), &x, eps));
    }
}
