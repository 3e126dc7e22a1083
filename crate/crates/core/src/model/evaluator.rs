use crate::error::Result;
use crate::kernel::{Tape, Tensor, Var};
use crate::model::Model;
use crate::scalar::Scalar;

impl<S: Scalar> Model<S> {
    /// Evaluation network: tanh hidden layers, linear output. Maps `n x h`
    /// sentence embeddings to `n x r_out` ranking-space vectors.
    pub fn evaluate(&self, tape: &mut Tape<S>, e: Var) -> Result<Var> {
        let mut x = e;
        let last = self.r.len() - 1;
        for (i, layer) in self.r.iter().enumerate() {
            let w = tape.param(&self.store, layer.w)?;
            let b = tape.param(&self.store, layer.b)?;
            x = tape.matmul(x, w)?;
            x = tape.add_row(x, b)?;
            if i < last {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }

    /// Forward-only `R(e)` for plain values.
    pub fn evaluate_values(&self, e: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let x = tape.constant(e.clone())?;
        let r = self.evaluate(&mut tape, x)?;
        Ok(tape.value(r).clone())
    }
}
