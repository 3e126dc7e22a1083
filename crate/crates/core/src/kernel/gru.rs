use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::params::{ParamId, ParamStore};
use crate::kernel::tape::{Tape, Var};
use crate::kernel::tensor::Tensor;
use crate::scalar::Scalar;

/// Gated recurrent cell with reset and update gates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

pub(crate) fn uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl GruCell {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        GruCell {
            input,
            hidden,
            w_ih: store.add(format!("{prefix}.w_ih"), uniform(rng, &[input, 3 * hidden], bound)),
            w_hh: store.add(format!("{prefix}.w_hh"), uniform(rng, &[hidden, 3 * hidden], bound)),
            b_ih: store.add(format!("{prefix}.b_ih"), uniform(rng, &[3 * hidden], bound)),
            b_hh: store.add(format!("{prefix}.b_hh"), uniform(rng, &[3 * hidden], bound)),
        }
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }

    /// One recurrence step for a batch: `x` is `b x input`, `h` is `b x hidden`.
    /// Rows flagged inactive keep their previous state.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
        active: &[bool],
    ) -> Result<Var> {
        let (xb, xd) = tape.value(x).dims2()?;
        let (hb, hd) = tape.value(h).dims2()?;
        if xd != self.input || hd != self.hidden || xb != hb {
            return Err(Error::dim(
                "recurrent_cell_step",
                format!(
                    "x {:?}, h {:?} for cell {}->{}",
                    tape.value(x).shape(),
                    tape.value(h).shape(),
                    self.input,
                    self.hidden
                ),
            ));
        }
        let w_ih = tape.param(store, self.w_ih)?;
        let w_hh = tape.param(store, self.w_hh)?;
        let b_ih = tape.param(store, self.b_ih)?;
        let b_hh = tape.param(store, self.b_hh)?;
        let gx = tape.matmul(x, w_ih)?;
        let gx = tape.add_row(gx, b_ih)?;
        let gh = tape.matmul(h, w_hh)?;
        let gh = tape.add_row(gh, b_hh)?;
        tape.gru(gx, gh, h, active)
    }
}
