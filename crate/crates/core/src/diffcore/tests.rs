use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn params_of(items: &[(&str, Tensor<f64>)]) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    for (k, t) in items {
        p.insert(*k, ParamGroup::Backbone, t.clone()).unwrap();
    }
    p
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(y.tape().constant(w))?.sum().pipe(Ok)
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}
impl<T> Pipe for T {}

fn check_unary(name: &str, lo: f64, hi: f64, op: for<'t> fn(Var<'t, f64>) -> Result<Var<'t, f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = params_of(&[("x", rand_tensor(&mut rng, &[2, 3, 4], lo, hi))]);
    let r = finite_diff_check(|_, b| probe(op(b.var("x")?)?, 11), &p, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
}

#[test]
fn square_derivative_at_three() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0f64));
    let y = x.mul(x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(x.grad().item(), 6.0);
}

#[test]
fn max_routes_to_larger_and_ties_to_first() {
    let tape = Tape::new();
    let a = tape.param(Tensor::scalar(2.0f64));
    let b = tape.param(Tensor::scalar(5.0f64));
    tape.backward(a.maximum(b).unwrap()).unwrap();
    assert_eq!((a.grad().item(), b.grad().item()), (0.0, 1.0));

    let tape = Tape::new();
    let a = tape.param(Tensor::scalar(4.0f64));
    let b = tape.param(Tensor::scalar(4.0f64));
    tape.backward(a.maximum(b).unwrap()).unwrap();
    assert_eq!((a.grad().item(), b.grad().item()), (1.0, 0.0));
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.param(Tensor::new(&[3], vec![-2.0f64, 0.0, 2.0]).unwrap());
    tape.backward(x.abs().sum()).unwrap();
    assert_eq!(x.grad().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn sum_and_mean_gradients() {
    let tape = Tape::new();
    let p = tape.param(Tensor::new(&[4], vec![1.0f64, -2.0, 3.0, 0.5]).unwrap());
    tape.backward(p.sum()).unwrap();
    assert_eq!(p.grad().data(), &[1.0; 4]);

    let tape = Tape::new();
    let p = tape.param(Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap());
    tape.backward(p.mean()).unwrap();
    assert_eq!(p.grad().data(), &[0.25; 4]);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let p = tape.param(Tensor::<f64>::ones(&[3]));
    assert!(matches!(tape.backward(p), Err(Error::NotScalar(_))));

    let tape = Tape::new();
    let p = tape.param(Tensor::<f64>::ones(&[3]));
    let l = p.sum();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
}

#[test]
fn unreachable_grads_are_zero() {
    let tape = Tape::new();
    let a = tape.param(Tensor::<f64>::ones(&[2]));
    let b = tape.param(Tensor::<f64>::ones(&[3]));
    tape.backward(a.sum()).unwrap();
    assert_eq!(b.grad().data(), &[0.0; 3]);
}

#[test]
fn shape_errors_name_op_and_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::ones(&[2, 3]));
    let b = tape.constant(Tensor::<f64>::ones(&[4]));
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    let w = tape.constant(Tensor::<f64>::ones(&[1, 5, 3, 3]));
    let x = tape.constant(Tensor::<f64>::ones(&[1, 2, 6, 6]));
    assert!(x.conv2d(w, None, 1, 1).unwrap_err().to_string().contains("conv2d"));
}

#[test]
fn conv3x3_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params_of(&[
        ("x", rand_tensor(&mut rng, &[1, 1, 5, 5], -1.0, 1.0)),
        ("w", rand_tensor(&mut rng, &[1, 1, 3, 3], -1.0, 1.0)),
        ("b", rand_tensor(&mut rng, &[1], -1.0, 1.0)),
    ]);
    let r = finite_diff_check(|_, b| probe(b.var("x")?.conv2d(b.var("w")?, Some(b.var("b")?), 1, 1)?, 5), &p, 1e-5)
        .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn strided_multichannel_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, s, pad) in [(3, 2, 1), (1, 1, 0), (2, 1, 0), (3, 1, 2)] {
        let p = params_of(&[
            ("x", rand_tensor(&mut rng, &[2, 3, 6, 7], -1.0, 1.0)),
            ("w", rand_tensor(&mut rng, &[4, 3, k, k], -1.0, 1.0)),
            ("b", rand_tensor(&mut rng, &[4], -1.0, 1.0)),
        ]);
        let r =
            finite_diff_check(|_, b| probe(b.var("x")?.conv2d(b.var("w")?, Some(b.var("b")?), s, pad)?, 9), &p, 1e-6)
                .unwrap();
        assert!(r.max_rel_error < 1e-6, "k={k} s={s} pad={pad}: {r:?}");
    }
}

#[test]
fn single_channel_conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (kh, kw, s, pad) in [(1, 5, 1, 0), (4, 1, 1, 0), (3, 3, 2, 1), (2, 3, 1, 2)] {
        let p = params_of(&[
            ("x", rand_tensor(&mut rng, &[3, 1, 6, 7], -1.0, 1.0)),
            ("w", rand_tensor(&mut rng, &[1, 1, kh, kw], -1.0, 1.0)),
            ("b", rand_tensor(&mut rng, &[1], -1.0, 1.0)),
        ]);
        let r =
            finite_diff_check(|_, b| probe(b.var("x")?.conv2d(b.var("w")?, Some(b.var("b")?), s, pad)?, 9), &p, 1e-6)
                .unwrap();
        assert!(r.max_rel_error < 1e-6, "{kh}x{kw} s={s} pad={pad}: {r:?}");
    }
}

#[test]
fn unary_primitives_match_finite_differences() {
    check_unary("exp", -1.0, 1.0, |x| Ok(x.exp()));
    check_unary("log", 0.5, 2.0, |x| Ok(x.log()));
    check_unary("tanh", -2.0, 2.0, |x| Ok(x.tanh()));
    check_unary("sigmoid", -3.0, 3.0, |x| Ok(x.sigmoid()));
    check_unary("gelu", -3.0, 3.0, |x| Ok(x.gelu()));
    check_unary("gelu tail", -12.0, -6.0, |x| Ok(x.gelu()));
    check_unary("gelu near zero", -2e-3, 2e-3, |x| Ok(x.gelu()));
    check_unary("relu", 0.1, 1.0, |x| Ok(x.relu()));
    check_unary("abs", 0.1, 1.0, |x| Ok(x.neg().abs()));
    check_unary("sqrt", 0.5, 2.0, |x| Ok(x.sqrt()));
    check_unary("square", -2.0, 2.0, |x| Ok(x.square()));
    check_unary("powf", 0.5, 2.0, |x| Ok(x.powf(1.7)));
    check_unary("scalar", -1.0, 1.0, |x| Ok(x.mul_scalar(-2.5).add_scalar(0.3)));
    check_unary("softmax", -2.0, 2.0, |x| x.softmax(1));
    check_unary("log_softmax", -2.0, 2.0, |x| x.log_softmax(2));
    check_unary("sum_axis", -1.0, 1.0, |x| x.sum_axis(1, false));
    check_unary("mean_axis", -1.0, 1.0, |x| x.mean_axis(2, true));
    check_unary("permute", -1.0, 1.0, |x| x.permute(&[2, 0, 1]));
    check_unary("narrow", -1.0, 1.0, |x| x.narrow(1, 1, 2));
    check_unary("reshape", -1.0, 1.0, |x| x.reshape(&[6, 4]));
    check_unary("pad_replicate", -1.0, 1.0, |x| x.pad_replicate(2));
    check_unary("avg_pool", -1.0, 1.0, |x| x.avg_pool2d(2));
    check_unary("upsample", -1.0, 1.0, |x| x.upsample_nearest(3));
    check_unary("concat", -1.0, 1.0, |x| Var::concat(&[x, x.square(), x], 1));
}

#[test]
fn binary_primitives_with_broadcasting() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = params_of(&[
        ("a", rand_tensor(&mut rng, &[2, 3, 4], 0.5, 2.0)),
        ("b", rand_tensor(&mut rng, &[3, 1], 0.5, 2.0)),
        ("c", rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)),
    ]);
    let r = finite_diff_check(
        |_, v| {
            let (a, b, c) = (v.var("a")?, v.var("b")?, v.var("c")?);
            let y = a.add(b)?.mul(c)?.sub(b)?.div(a.add(b)?)?.maximum(c)?;
            probe(y, 2)
        },
        &p,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn batched_and_shared_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = params_of(&[
        ("a", rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0)),
        ("b", rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0)),
        ("w", rand_tensor(&mut rng, &[5, 2], -1.0, 1.0)),
    ]);
    let r =
        finite_diff_check(|_, v| probe(v.var("a")?.matmul(v.var("b")?)?.matmul(v.var("w")?)?, 3), &p, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x0 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let f = x.tanh().sum();
        let g = x.square().mul_scalar(0.5).sum().add(x.exp().mean()).unwrap();
        let l = match which {
            0 => f,
            1 => g,
            _ => f.mul_scalar(2.0).add(g.mul_scalar(-3.0)).unwrap(),
        };
        tape.backward(l).unwrap();
        x.grad()
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gf.numel() {
        let expect = 2.0 * gf.data()[i] - 3.0 * gg.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[1, 2, 9, 9], 0.0, 1.0).cast::<f32>());
        let w = tape.constant(rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0).cast::<f32>());
        x.conv2d(w, None, 1, 1).unwrap().gelu().softmax(1).unwrap().value()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn finite_diff_check_of_square() {
    let p = params_of(&[("x", Tensor::scalar(1.0))]);
    let r = finite_diff_check(|_, b| b.var("x")?.square().pipe(Ok), &p, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");
}

#[test]
fn finite_diff_check_of_softmax_cross_entropy() {
    let p = params_of(&[("z", Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap())]);
    let r = finite_diff_check(
        |t, b| {
            let target = t.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
            Ok(b.var("z")?.log_softmax(1)?.mul(target)?.sum().neg())
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn finite_diff_check_of_untied_max() {
    let p = params_of(&[
        ("a", Tensor::new(&[4], vec![0.1, 0.9, -0.4, 2.0]).unwrap()),
        ("b", Tensor::new(&[4], vec![0.5, 0.2, -0.9, 1.5]).unwrap()),
    ]);
    let r = finite_diff_check(|_, v| Ok(v.var("a")?.maximum(v.var("b")?)?.square().sum()), &p, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn finite_diff_check_rejects_non_finite() {
    let p = params_of(&[("x", Tensor::scalar(-1.0))]);
    assert!(finite_diff_check(|_, b| Ok(b.var("x")?.log()), &p, 1e-5).is_err());
}

#[test]
fn one_hot_encodes_and_ignores() {
    let t: Tensor<f64> = one_hot(&[0, 2, 255, 1], 1, 2, 2, 3, 255).unwrap();
    assert_eq!(t.shape(), &[1, 3, 2, 2]);
    assert_eq!(t.data(), &[1., 0., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0.]);
    assert!(one_hot::<f64>(&[3], 1, 1, 1, 3, 255).is_err());
}

#[test]
fn param_groups_partition() {
    let mut p = ModelParams::<f32>::new();
    p.insert("a", ParamGroup::Backbone, Tensor::zeros(&[2])).unwrap();
    p.insert("b", ParamGroup::SegHead, Tensor::zeros(&[3])).unwrap();
    assert!(p.insert("a", ParamGroup::FusionHead, Tensor::zeros(&[1])).is_err());
    let sum: usize = ParamGroup::ALL.iter().map(|&g| p.count(Some(g))).sum();
    assert_eq!(sum, p.count(None));
}

#[test]
fn conv_forward_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [(3, 1, 1, 7), (3, 2, 1, 7), (2, 1, 0, 6), (3, 1, 2, 5), (1, 1, 0, 4), (3, 3, 2, 8)];
    for ((k, s, pad, w_in), (cin, cout)) in cases.into_iter().flat_map(|c| [(c, (3, 2)), (c, (1, 1))]) {
        let (n, h) = (2, 6);
        let x = rand_tensor(&mut rng, &[n, cin, h, w_in], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), None, s, pad).unwrap().value();
        let (oh, ow) = ((h + 2 * pad - k) / s + 1, (w_in + 2 * pad - k) / s + 1);
        assert_eq!(y.shape(), &[n, cout, oh, ow]);
        for b in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - pad as isize;
                                    let ix = (ox * s + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w_in {
                                        acc += x.at(&[b, c, iy as usize, ix as usize]) * w.at(&[o, c, ky, kx]);
                                    }
                                }
                            }
                        }
                        assert!((y.at(&[b, o, oy, ox]) - acc).abs() < 1e-12, "k={k} s={s} pad={pad}");
                    }
                }
            }
        }
    }
}
