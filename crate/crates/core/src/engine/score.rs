use crate::error::{Error, Result};
use crate::kernel::{Tape, Tensor, Var};
use crate::model::Model;
use crate::scalar::Scalar;

fn check_lambda<S: Scalar>(lambda: S) -> Result<()> {
    if lambda <= S::zero() || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `exp(λ·αᵢ) / Σⱼ exp(λ·αⱼ)` over one candidate set.
pub fn rank_distribution<S: Scalar>(alpha: &[S], lambda: S) -> Result<Vec<S>> {
    check_lambda(lambda)?;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![1, alpha.len()], alpha.to_vec())?)?;
    let p = tape.softmax_scaled(a, lambda)?;
    Ok(tape.value(p).data().to_vec())
}

/// Cosine similarity in the evaluation network's space between each of the
/// `b` sources and its `n` candidates. `e_s` is `b x h`, `cands` is
/// `(b·n) x h` with candidates of source `i` in rows `i·n .. (i+1)·n`.
pub fn ranking_scores<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>, e_s: Var, cands: Var, n: usize) -> Result<Var> {
    let (b, _) = tape.value(e_s).dims2()?;
    let (bn, _) = tape.value(cands).dims2()?;
    if n == 0 || bn != b * n {
        return Err(Error::dim("score_candidates", format!("{bn} candidate rows for {b} sources x {n}")));
    }
    let r_s = model.evaluate(tape, e_s)?;
    let r_c = model.evaluate(tape, cands)?;
    let owner: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
    let r_s = tape.gather_rows(r_s, &owner)?;
    let alpha = tape.cosine_rows(r_c, r_s)?;
    tape.reshape(alpha, &[b, n])
}

/// Log of the ranking distribution, `b x n`.
pub fn ranking_log_probs<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    e_s: Var,
    cands: Var,
    n: usize,
    lambda: S,
) -> Result<Var> {
    check_lambda(lambda)?;
    let alpha = ranking_scores(tape, model, e_s, cands, n)?;
    tape.log_softmax_rows(alpha, lambda)
}

/// Ranking distribution of one source embedding over candidate embeddings (`n x h`).
pub fn score_candidates<S: Scalar>(model: &Model<S>, e_s: &[S], candidates: &Tensor<S>, lambda: S) -> Result<Vec<S>> {
    check_lambda(lambda)?;
    let (n, h) = candidates.dims2()?;
    if n == 0 {
        return Err(Error::degenerate("score_candidates", "no candidates"));
    }
    let mut tape = Tape::new();
    let es = tape.constant(Tensor::new(vec![1, h], e_s.to_vec())?)?;
    let c = tape.constant(candidates.clone())?;
    let alpha = ranking_scores(&mut tape, model, es, c, n)?;
    let p = tape.softmax_scaled(alpha, lambda)?;
    Ok(tape.value(p).data().to_vec())
}
