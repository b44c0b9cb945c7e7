//! Finite-difference checks for every differentiable operator.

use rand::Rng;
use robustlab_core::rng::seeded;
use robustlab_core::{grad_check, Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Contracts a tensor with fixed random weights so every output coordinate
/// contributes a distinct sensitivity.
fn probe<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = y.tape().constant(random(&y.shape(), seed));
    Ok(y.mul(w)?.sum())
}

fn check<F>(name: &str, x: Tensor, f: F)
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let err = grad_check(f, &x, H).unwrap();
    assert!(err <= TOL, "{name}: max relative error {err:e}");
}

#[test]
fn sum_of_linear_function_is_exact() {
    let err = grad_check(|_, x| Ok(x.sum()), &random(&[7], 1), H).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn sum_of_squares_within_1e6() {
    let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &random(&[4], 2), H).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn gelu_slope_at_zero_is_one_half() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros([1]), true);
    tape.backward(x.gelu().sum()).unwrap();
    let g = x.grad().unwrap().data()[0];
    // Central difference oracle.
    let f = |v: f64| robustlab_core::autograd::gelu(v);
    let numeric = (f(1e-5) - f(-1e-5)) / 2e-5;
    assert!((g - 0.5).abs() < 1e-12);
    assert!((g - numeric).abs() < 1e-9);
}

#[test]
fn elementwise_and_broadcast_ops() {
    let b = random(&[3], 11);
    check("add-broadcast", random(&[2, 3], 3), move |t, x| {
        let bias = t.constant(b.clone());
        probe(x.add(bias)?, 4)
    });
    let a = random(&[2, 3], 12);
    check("add-into-bias", random(&[3], 5), move |t, x| {
        let big = t.constant(a.clone());
        probe(big.add(x)?, 6)
    });
    check("mul-self", random(&[2, 3], 7), |_, x| probe(x.mul(x)?, 8));
    check("scale", random(&[5], 9), |_, x| probe(x.scale(-2.5), 10));
}

#[test]
fn matmul_both_operands() {
    let w = random(&[4, 3], 21);
    check("matmul-lhs", random(&[2, 2, 4], 22), move |t, x| probe(x.matmul(t.constant(w.clone()))?, 23));
    let a = random(&[2, 2, 4], 24);
    check("matmul-rhs", random(&[4, 3], 25), move |t, x| probe(t.constant(a.clone()).matmul(x)?, 26));
    let bb = random(&[2, 4, 3], 27);
    check("matmul-batched", random(&[2, 2, 4], 28), move |t, x| probe(x.matmul(t.constant(bb.clone()))?, 29));
}

#[test]
fn conv2d_input_weight_bias() {
    let w = random(&[4, 2, 3, 3], 31);
    check("conv2d-x", random(&[2, 2, 4, 4], 32), move |t, x| {
        let b = t.constant(Tensor::zeros([4]));
        probe(x.conv2d(t.constant(w.clone()), Some(b), 1, 1)?, 33)
    });
    let x0 = random(&[1, 2, 5, 5], 34);
    check("conv2d-w-strided", random(&[3, 2, 3, 3], 35), move |t, w| {
        probe(t.constant(x0.clone()).conv2d(w, None, 2, 1)?, 36)
    });
    let x1 = random(&[2, 2, 3, 3], 37);
    let w1 = random(&[3, 2, 3, 3], 38);
    check("conv2d-bias", random(&[3], 39), move |t, b| {
        probe(t.constant(x1.clone()).conv2d(t.constant(w1.clone()), Some(b), 1, 1)?, 40)
    });
}

#[test]
fn grouped_conv_and_conv1d() {
    let w = random(&[4, 1, 3, 3], 41);
    check("depthwise-x", random(&[1, 4, 3, 3], 42), move |t, x| {
        let geo = robustlab_core::autograd::Conv2dGeometry {
            stride: (1, 1),
            padding: (1, 1),
            groups: 4,
        };
        probe(x.conv2d_general(t.constant(w.clone()), None, geo)?, 43)
    });
    let w1 = random(&[3, 2, 3], 44);
    check("conv1d-x", random(&[2, 2, 6], 45), move |t, x| probe(x.conv1d(t.constant(w1.clone()), None, 1, 1, 1)?, 46));
    let x1 = random(&[2, 2, 6], 47);
    check("conv1d-w", random(&[3, 2, 3], 48), move |t, w| probe(t.constant(x1.clone()).conv1d(w, None, 1, 1, 1)?, 49));
}

#[test]
fn layer_norm_all_inputs() {
    let g = random(&[5], 51);
    let b = random(&[5], 52);
    let (g1, b1) = (g.clone(), b.clone());
    check("ln-x", random(&[3, 5], 53), move |t, x| {
        probe(x.layer_norm(t.constant(g1.clone()), t.constant(b1.clone()), 1e-5)?, 54)
    });
    let x0 = random(&[3, 5], 55);
    let (x1, b2) = (x0.clone(), b.clone());
    check("ln-gamma", g.clone(), move |t, g| probe(t.constant(x1.clone()).layer_norm(g, t.constant(b2.clone()), 1e-5)?, 56));
    check("ln-beta", b, move |t, b| probe(t.constant(x0.clone()).layer_norm(t.constant(g.clone()), b, 1e-5)?, 57));
}

#[test]
fn nonlinearities_and_reductions() {
    check("gelu", random(&[3, 4], 61), |_, x| probe(x.gelu(), 62));
    check("softmax", random(&[3, 4], 63), |_, x| probe(x.softmax(), 64));
    check("mean-axis", random(&[2, 3, 4], 65), |_, x| probe(x.mean_axis(1)?, 66));
    check("avg-pool", random(&[1, 2, 4, 4], 67), |_, x| probe(x.avg_pool2d(2, 2)?, 68));
    check("max-pool", random(&[1, 2, 4, 4], 69), |_, x| probe(x.max_pool2d(2, 2)?, 70));
}

#[test]
fn shape_ops() {
    check("reshape", random(&[2, 6], 71), |_, x| probe(x.reshape(&[3, 4])?, 72));
    check("permute", random(&[2, 3, 4], 73), |_, x| probe(x.permute(&[2, 0, 1])?, 74));
    check("transpose", random(&[3, 4], 75), |_, x| probe(x.transpose()?, 76));
}

#[test]
fn softmax_cross_entropy_of_affine_logits() {
    let w = random(&[6, 4], 81);
    check("xent", random(&[3, 6], 82), move |t, x| x.matmul(t.constant(w.clone()))?.softmax_cross_entropy(&[0, 3, 1]));
}

#[test]
fn composite_conv_ln_gelu_on_image() {
    let w = random(&[3, 3, 3, 3], 91);
    let g = Tensor::full([8], 1.0);
    let b = Tensor::zeros([8]);
    check("conv-ln-gelu", random(&[1, 3, 8, 8], 92), move |t, x| {
        let y = x.conv2d(t.constant(w.clone()), None, 1, 1)?;
        let y = y.layer_norm(t.constant(g.clone()), t.constant(b.clone()), 1e-5)?;
        Ok(y.gelu().sum())
    });
}

#[test]
fn gather_scatters_repeated_indices() {
    let index = std::rc::Rc::new(vec![4, 0, 4, 2, 1, 4]);
    check("gather", random(&[5], 101), move |_, x| probe(x.gather(index.clone(), &[2, 3])?, 102));
}
