//! Finite-difference gradient oracle shared by unit tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernel::{ParamId, ParamStore, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Largest relative error between tape gradients and central differences of
/// the scalar built by `f` with respect to every element of every input.
pub fn max_grad_error(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .map(|x| t.leaf(x.clone(), false).unwrap())
            .collect();
        let out = f(&mut t, &vs).unwrap();
        t.value(out).data()[0]
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads.wrt(vars[i]).map_or(0.0, |g| g.data()[j]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}

/// Largest relative error between tape gradients of `f` with respect to the
/// parameters `ids` and central differences over every element.
pub fn param_grad_error(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    h: f64,
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::with_trainable(ids);
    let loss = f(&mut tape, store).unwrap();
    let grads = tape.backward(loss).unwrap().params(&tape);
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let out = f(&mut t, s).unwrap();
        t.value(out).data()[0]
    };
    let mut worst = 0.0f64;
    for (id, g) in grads {
        let mut work = store.clone();
        for j in 0..g.len() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.data()[j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
