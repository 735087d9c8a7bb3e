//! Discrete mechanism selection via the Gumbel-max trick.

use ndarray::Array2;
use rand::Rng;

use super::graph::{one_hot_argmax, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectMode {
    /// Stochastic straight-through Gumbel-max sampling.
    Train,
    /// Deterministic argmax of the logits.
    Infer,
    /// Soft Gumbel-softmax weights in the forward pass. Not used for
    /// training; it makes the selector's path differentiable for checks.
    Relaxed,
}

/// Standard Gumbel(0, 1) samples.
pub fn gumbel_noise<F: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        // open interval keeps both logarithms finite
        let u: f64 = loop {
            let u = rng.gen::<f64>();
            if u > 0.0 {
                break u;
            }
        };
        F::of(-(-u.ln()).ln())
    })
}

/// One-hot selection per row of `logits`.
///
/// In [`SelectMode::Infer`] this is the argmax with ties going to the lowest
/// index and no gradient; in [`SelectMode::Train`] it is the hard one-hot of
/// `argmax(logits + g)` with `g ~ Gumbel(0, 1)` and soft gradients at `temperature`.
pub fn gumbel_select<F: Scalar, R: Rng>(
    g: &mut Graph<F>,
    logits: Var,
    temperature: F,
    mode: SelectMode,
    rng: &mut R,
) -> Result<Var> {
    if !(temperature > F::zero()) {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    match mode {
        SelectMode::Infer => {
            let hot = one_hot_argmax(g.value(logits));
            g.constant(hot)
        }
        SelectMode::Train => {
            let (rows, cols) = g.shape(logits);
            let noise = gumbel_noise(rows, cols, rng);
            g.gumbel_straight_through(logits, &noise, temperature)
        }
        SelectMode::Relaxed => {
            let (rows, cols) = g.shape(logits);
            let noise = gumbel_noise(rows, cols, rng);
            g.gumbel_softmax(logits, &noise, temperature)
        }
    }
}

/// Uniformly random one-hot rows, used by the random-mechanism baseline.
pub fn uniform_one_hot<F: Scalar, R: Rng>(rows: usize, m: usize, rng: &mut R) -> Array2<F> {
    let mut out = Array2::zeros((rows, m));
    for r in 0..rows {
        out[[r, rng.gen_range(0..m)]] = F::one();
    }
    out
}
