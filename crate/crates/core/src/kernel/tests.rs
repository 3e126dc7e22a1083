use rand::Rng;

use super::*;
use crate::error::Error;
use crate::testutil::{max_grad_error, random_tensor, rng};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (r, k) = a.dims2().unwrap();
    let c = b.dims2().unwrap().1;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            for p in 0..k {
                out[i * c + j] += a.data()[i * k + p] * b.data()[p * c + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_scalar() {
    let mut t = Tape::<f64>::new();
    let i = t.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let x = t.constant(m(2, 1, &[3.0, 4.0])).unwrap();
    let y = t.matmul(i, x).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 4.0]);
    let a = t.constant(m(1, 1, &[2.0])).unwrap();
    let b = t.constant(m(1, 1, &[5.0])).unwrap();
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[10.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    for _ in 0..20 {
        // integer-valued entries make every summation order exact
        let a = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-9..=9) as f64).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|_| r.gen_range(-9..=9) as f64).collect()).unwrap();
        let mut t = Tape::<f64>::new();
        let (va, vb) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.value(c).data(), triple_loop(&a, &b).as_slice());
    }
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[4, 2], 1.0);
    let mut t = Tape::<f64>::new();
    let (va, vb) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
    let c = t.matmul(va, vb).unwrap();
    for (x, y) in t.value(c).data().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() < 1e-14);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::<f64>::zeros(&[2, 3])).unwrap();
    let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn elementwise_max_definition() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::vector(vec![1.0, 5.0])).unwrap();
    let b = t.constant(Tensor::vector(vec![3.0, 2.0])).unwrap();
    let c = t.elementwise_max(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 5.0]);
    let d = t.elementwise_max(a, a).unwrap();
    assert_eq!(t.value(d).data(), t.value(a).data());
    let bad = t.constant(Tensor::vector(vec![1.0])).unwrap();
    assert!(t.elementwise_max(a, bad).is_err());
}

#[test]
fn elementwise_max_tie_routes_to_first() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::vector(vec![2.0, 1.0]), true).unwrap();
    let b = t.leaf(Tensor::vector(vec![2.0, 3.0]), true).unwrap();
    let c = t.elementwise_max(a, b).unwrap();
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 0.0]);
    assert_eq!(g.wrt(b).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn elementwise_max_gradient() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[3, 4], 1.0);
    let b = random_tensor(&mut r, &[3, 4], 1.0);
    let err = max_grad_error(&[a, b], H, |t, v| {
        let c = t.elementwise_max(v[0], v[1])?;
        t.sum(c)
    });
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn cosine_anchors() {
    let mut t = Tape::<f64>::new();
    let r = t.constant(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let c = t.cosine(r, r).unwrap();
    assert!((t.value(c).data()[0] - 1.0).abs() < 1e-15);
    let x = t.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
    let y = t.constant(Tensor::vector(vec![0.0, 1.0])).unwrap();
    let c = t.cosine(x, y).unwrap();
    assert_eq!(t.value(c).data(), &[0.0]);
    let z = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    assert!(matches!(t.cosine(x, z), Err(Error::Degenerate { .. })));
}

#[test]
fn cosine_gradient() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, &[6], 1.0);
    let b = random_tensor(&mut r, &[6], 1.0);
    let err = max_grad_error(&[a, b], H, |t, v| t.cosine(v[0], v[1]));
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn softmax_scaled_anchors() {
    let mut t = Tape::<f64>::new();
    let one = t.constant(Tensor::vector(vec![0.7])).unwrap();
    let p = t.softmax_scaled(one, 0.5).unwrap();
    assert_eq!(t.value(p).data(), &[1.0]);

    let four = t.constant(Tensor::vector(vec![3.0, -1.0, 10.0, 0.5])).unwrap();
    let p = t.softmax_scaled(four, 1e-8).unwrap();
    for &v in t.value(p).data() {
        assert!((v - 0.25).abs() < 1e-6);
    }

    let s = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    let p = t.softmax_scaled(s, 0.5).unwrap();
    let e: Vec<f64> = [0.5f64, 1.0, 1.5].iter().map(|x| x.exp()).collect();
    let total: f64 = e.iter().sum();
    for (v, ei) in t.value(p).data().iter().zip(&e) {
        assert!((v - ei / total).abs() < 1e-15);
    }
    assert!((t.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    let mut r = rng(3);
    let check = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>| {
        let err = max_grad_error(&inputs, H, f);
        assert!(err < TOL, "{name}: relative error {err}");
    };
    let w = |r: &mut rand_chacha::ChaCha8Rng, s: &[usize]| random_tensor(r, s, 1.0);

    let (a, b) = (w(&mut r, &[3, 4]), w(&mut r, &[4, 2]));
    check("matmul", vec![a, b], &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        let c = t.tanh(c)?;
        t.sum(c)
    });
    let (a, b) = (w(&mut r, &[2, 5]), w(&mut r, &[2, 5]));
    check("add/sub/mul", vec![a, b], &|t, v| {
        let x = t.add(v[0], v[1])?;
        let y = t.sub(x, v[1])?;
        let z = t.mul(y, v[1])?;
        let z = t.mul(z, x)?;
        t.sum(z)
    });
    let (a, b) = (w(&mut r, &[3, 4]), w(&mut r, &[4]));
    check("add_row/scale/sigmoid", vec![a, b], &|t, v| {
        let x = t.add_row(v[0], v[1])?;
        let x = t.scale(x, -1.7)?;
        let x = t.sigmoid(x)?;
        let x = t.mul(x, x)?;
        t.sum(x)
    });
    let a = w(&mut r, &[5, 3]);
    check("embedding/gather/reshape", vec![a], &|t, v| {
        let e = t.embedding(v[0], &[1, 4, 1])?;
        let g = t.gather_rows(e, &[2, 0, 0, 1])?;
        let g = t.reshape(g, &[2, 6])?;
        let g = t.tanh(g)?;
        let g = t.mul(g, g)?;
        t.sum(g)
    });
    let (x, y) = (w(&mut r, &[3, 4]), w(&mut r, &[3, 4]));
    check("cosine_rows/weighted_sum", vec![x, y], &|t, v| {
        let c = t.cosine_rows(v[0], v[1])?;
        t.weighted_sum(c, &[0.3, -1.0, 2.0])
    });
    let x = w(&mut r, &[3, 4]);
    check("log_softmax", vec![x], &|t, v| {
        let l = t.log_softmax_rows(v[0], 0.5)?;
        t.weighted_sum(l, &[1.0, 0.0, -0.5, 0.2, 0.0, 0.3, 0.1, 1.0, -1.0, 0.0, 0.0, 2.0])
    });
    let x = w(&mut r, &[2, 4]);
    check("softmax_scaled", vec![x], &|t, v| {
        let p = t.softmax_scaled(v[0], 0.5)?;
        t.weighted_sum(p, &[1.0, 2.0, -3.0, 0.5, 0.1, -0.2, 0.7, 1.1])
    });
    let x = w(&mut r, &[3, 6]);
    check("cross_entropy", vec![x], &|t, v| t.cross_entropy(v[0], &[2, 0, 5], &[0.5, 1.0, 0.25]));
    let steps: Vec<Tensor<f64>> = (0..3).map(|_| w(&mut r, &[2, 4])).collect();
    let q = w(&mut r, &[2, 4]);
    let mut inputs = steps.clone();
    inputs.push(q);
    check("stack/attention/max_over_time", inputs, &|t, v| {
        let mem = t.stack(&v[..3])?;
        let ctx = t.attention(v[3], mem, &[3, 2])?;
        let pooled = t.max_over_time(mem, &[2, 3])?;
        let y = t.mul(ctx, pooled)?;
        t.sum(y)
    });
    let (gx, gh, h) = (w(&mut r, &[3, 12]), w(&mut r, &[3, 12]), w(&mut r, &[3, 4]));
    check("gru", vec![gx, gh, h], &|t, v| {
        let out = t.gru(v[0], v[1], v[2], &[true, false, true])?;
        let out = t.mul(out, out)?;
        t.sum(out)
    });
}

#[test]
fn softmax_and_cosine_ranges_hold_on_random_inputs() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.gen_range(1..8);
        let x = random_tensor(&mut r, &[n], 20.0);
        let lambda = r.gen_range(1e-3..5.0);
        let mut t = Tape::<f64>::new();
        let v = t.constant(x).unwrap();
        let p = t.softmax_scaled(v, lambda).unwrap();
        let ps = t.value(p).data();
        assert!(ps.iter().all(|&p| p >= 0.0));
        assert!((ps.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let a = random_tensor(&mut r, &[n], 3.0);
        let b = random_tensor(&mut r, &[n], 3.0);
        let (a, b) = (t.constant(a).unwrap(), t.constant(b).unwrap());
        let c = t.cosine(a, b).unwrap();
        let c = t.value(c).data()[0];
        assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::vector(vec![1e300])).unwrap();
    assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
    assert!(t.leaf(Tensor::vector(vec![f64::NAN]), false).is_err());
}

#[test]
fn backward_visits_each_node_once() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::vector(vec![0.5, -0.25]), true).unwrap();
    let mut y = x;
    let k = 7;
    for _ in 0..k {
        y = t.tanh(y).unwrap();
    }
    let s = t.sum(y).unwrap();
    let g = t.backward(s).unwrap();
    assert_eq!(g.visited(), k + 2);
    assert_eq!(t.len(), k + 2);
    t.clear();
    assert!(t.is_empty());
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
    let b = store.add("b", Tensor::vector(vec![3.0, 4.0]));
    let mut t = Tape::with_trainable(&[a]);
    let va = t.param(&store, a).unwrap();
    let vb = t.param(&store, b).unwrap();
    assert_eq!(t.param(&store, a).unwrap(), va);
    let p = t.mul(va, vb).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    let grads = g.params(&t);
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].0, a);
    assert_eq!(grads[0].1.data(), &[3.0, 4.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(5);
    let a = random_tensor(&mut r, &[4, 8], 1.0);
    let b = random_tensor(&mut r, &[8, 8], 1.0);
    let run = || {
        let mut t = Tape::<f64>::new();
        let (x, y) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
        let z = t.matmul(x, y).unwrap();
        let z = t.tanh(z).unwrap();
        t.value(z).clone()
    };
    assert_eq!(run(), run());
}
