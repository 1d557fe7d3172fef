//! Gated recurrent unit with gates stacked as `[update; reset; candidate]`.
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! n  = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use num_traits::Float;
use rand::Rng;

use crate::tensor::{add_into, sigmoid, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<F> {
    /// `3H × I`
    pub w: Mat<F>,
    /// `3H × H`
    pub u: Mat<F>,
    /// `3H × 1`
    pub b: Mat<F>,
}

/// Values saved by [`GruCell::step`] for the backward pass.
#[derive(Debug, Clone)]
pub struct GruCache<F> {
    pub x: Vec<F>,
    pub h: Vec<F>,
    pub z: Vec<F>,
    pub r: Vec<F>,
    pub n: Vec<F>,
    pub rh: Vec<F>,
}

impl<F: Float> GruCell<F> {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            w: Mat::glorot(3 * hidden, input, rng),
            u: Mat::glorot(3 * hidden, hidden, rng),
            b: Mat::zeros(3 * hidden, 1),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCell {
            w: Mat::zeros(3 * hidden, input),
            u: Mat::zeros(3 * hidden, hidden),
            b: Mat::zeros(3 * hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols
    }

    pub fn input(&self) -> usize {
        self.w.cols
    }

    pub fn step(&self, h: &[F], x: &[F]) -> (Vec<F>, GruCache<F>) {
        let hd = self.hidden();
        let mut gx = self.w.matvec(x);
        add_into(&mut gx, &self.b.data);
        let uh = self.u.matvec_rows(0, 2 * hd, h);
        let z: Vec<F> = (0..hd).map(|k| sigmoid(gx[k] + uh[k])).collect();
        let r: Vec<F> = (0..hd).map(|k| sigmoid(gx[hd + k] + uh[hd + k])).collect();
        let rh: Vec<F> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
        let un = self.u.matvec_rows(2 * hd, 3 * hd, &rh);
        let n: Vec<F> = (0..hd).map(|k| (gx[2 * hd + k] + un[k]).tanh()).collect();
        let out = (0..hd)
            .map(|k| (F::one() - z[k]) * h[k] + z[k] * n[k])
            .collect();
        (
            out,
            GruCache {
                x: x.to_vec(),
                h: h.to_vec(),
                z,
                r,
                n,
                rh,
            },
        )
    }

    /// Given `dL/dh'`, accumulates parameter gradients into `grad` and
    /// returns `(dL/dh, dL/dx)`.
    pub fn backward(
        &self,
        cache: &GruCache<F>,
        dout: &[F],
        grad: &mut GruCell<F>,
    ) -> (Vec<F>, Vec<F>) {
        let hd = self.hidden();
        let one = F::one();
        let mut dh: Vec<F> = (0..hd).map(|k| dout[k] * (one - cache.z[k])).collect();
        let mut dgates = vec![F::zero(); 3 * hd];
        for k in 0..hd {
            let (z, n) = (cache.z[k], cache.n[k]);
            dgates[k] = dout[k] * (n - cache.h[k]) * z * (one - z);
            dgates[2 * hd + k] = dout[k] * z * (one - n * n);
        }
        let dn_pre = &dgates[2 * hd..].to_vec();
        let mut drh = vec![F::zero(); hd];
        self.u.t_matvec_rows_acc(2 * hd, dn_pre, &mut drh);
        grad.u.add_outer_rows(2 * hd, dn_pre, &cache.rh);
        for k in 0..hd {
            let r = cache.r[k];
            dgates[hd + k] = drh[k] * cache.h[k] * r * (one - r);
            dh[k] = dh[k] + drh[k] * r;
        }
        grad.w.add_outer_rows(0, &dgates, &cache.x);
        add_into(&mut grad.b.data, &dgates);
        grad.u.add_outer_rows(0, &dgates[..2 * hd], &cache.h);
        self.u.t_matvec_rows_acc(0, &dgates[..2 * hd], &mut dh);
        let mut dx = vec![F::zero(); self.input()];
        self.w.t_matvec_rows_acc(0, &dgates, &mut dx);
        (dh, dx)
    }
}
