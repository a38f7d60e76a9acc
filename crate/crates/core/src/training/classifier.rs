use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, Var};

/// Softmax act classifier over `[q; m_T]`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub w4: ParamId,
    pub b4: ParamId,
    pub classes: usize,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, classes: usize, range: f64, rng: &mut R) -> Self {
        Classifier {
            w4: store.add_uniform("classifier.W4", &[classes, 2 * dim], range, rng),
            b4: store.add_uniform("classifier.b4", &[classes], range, rng),
            classes,
        }
    }

    /// `W4·x + b4` for `x: [B × 2d]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, joined: Var) -> Result<Var> {
        tape.linear(joined, p[self.w4], p[self.b4])
    }
}

/// Row-wise class probabilities.
pub fn predict(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax(logits, 1, None)
}

/// `−Σᵢ log p(yᵢ)`, summed over the batch.
pub fn nll_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let classes = tape.shape(logits)[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(TensorError::Invalid {
            op: "nll_loss",
            msg: format!("label {bad} out of range for {classes} classes"),
        });
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, labels)?;
    let total = tape.sum(picked);
    Ok(tape.affine(total, -1.0, 0.0))
}
