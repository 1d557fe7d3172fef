//! ADAGRAD with global-norm gradient clipping.

use num_traits::Float;

use crate::tensor::{cast, Tensors};

/// Initial value of every squared-gradient accumulator.
pub const ADAGRAD_INIT: f64 = 0.1;

/// Rescales `grad` in place so its global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Float, T: Tensors<F>>(grad: &mut T, max_norm: F) -> F {
    let norm = grad.global_norm();
    if norm > max_norm && norm > F::zero() {
        grad.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Adagrad<F, T> {
    pub lr: F,
    accum: T,
}

impl<F: Float, T: Tensors<F>> Adagrad<F, T> {
    pub fn new(params: &T, lr: F) -> Self {
        let mut accum = params.zeros_like();
        for t in accum.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = cast(ADAGRAD_INIT));
        }
        Adagrad { lr, accum }
    }

    pub fn accumulators(&self) -> &T {
        &self.accum
    }

    /// `G += g²; θ -= lr · g / √G`.
    pub fn step(&mut self, params: &mut T, grad: &T) {
        let lr = self.lr;
        for ((p, g), a) in params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.accum.tensors_mut())
        {
            for ((pv, &gv), av) in p.data.iter_mut().zip(&g.data).zip(a.data.iter_mut()) {
                *av = *av + gv * gv;
                *pv = *pv - lr * gv / av.sqrt();
            }
        }
    }
}
