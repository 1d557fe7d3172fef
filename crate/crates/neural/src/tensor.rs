//! Row-major matrices and the handful of dense ops the models need.

use num_traits::Float;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

#[inline]
pub fn cast<F: Float>(x: f64) -> F {
    F::from(x).expect("representable")
}

impl<F: Float> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| cast(rng.random_range(-scale..=scale)))
                .collect(),
        }
    }

    /// Glorot-uniform init for a `rows × cols` weight (out × in).
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Self::uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `W x` restricted to rows `lo..hi`.
    pub fn matvec_rows(&self, lo: usize, hi: usize, x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.cols);
        (lo..hi).map(|r| dot(self.row(r), x)).collect()
    }

    pub fn matvec(&self, x: &[F]) -> Vec<F> {
        self.matvec_rows(0, self.rows, x)
    }

    /// `out += W[lo..hi]ᵀ dy`.
    pub fn t_matvec_rows_acc(&self, lo: usize, dy: &[F], out: &mut [F]) {
        for (k, &g) in dy.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(lo + k)) {
                *o = *o + g * w;
            }
        }
    }

    /// `self[lo..] += dy xᵀ`.
    pub fn add_outer_rows(&mut self, lo: usize, dy: &[F], x: &[F]) {
        for (k, &g) in dy.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            for (w, &xi) in self.row_mut(lo + k).iter_mut().zip(x) {
                *w = *w + g * xi;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat<F>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in &mut self.data {
            *a = *a * s;
        }
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_into<G: Float>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| cast(v.to_f64().expect("finite")))
                .collect(),
        }
    }
}

#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn add_into<F: Float>(acc: &mut [F], x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn relu<F: Float>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v.max(F::zero())).collect()
}

/// Numerically stable softmax.
pub fn softmax<F: Float>(z: &[F]) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum = e.iter().fold(F::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / sum).collect()
}

/// `-log softmax(z)[target]`, computed through log-sum-exp.
pub fn cross_entropy<F: Float>(z: &[F], target: usize) -> F {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = z.iter().fold(F::zero(), |a, &v| a + (v - max).exp()).ln() + max;
    lse - z[target]
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<F: Float>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub w: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Float> Dense<F> {
    pub fn new<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        Dense {
            w: Mat::glorot(out, inp, rng),
            b: Mat::zeros(out, 1),
        }
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            w: Mat::zeros(out, inp),
            b: Mat::zeros(out, 1),
        }
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        let mut y = self.w.matvec(x);
        add_into(&mut y, &self.b.data);
        y
    }

    /// Accumulates parameter gradients into `grad` and adds `Wᵀ dy` to `dx`.
    pub fn backward(&self, x: &[F], dy: &[F], grad: &mut Dense<F>, dx: Option<&mut [F]>) {
        grad.w.add_outer_rows(0, dy, x);
        add_into(&mut grad.b.data, dy);
        if let Some(dx) = dx {
            self.w.t_matvec_rows_acc(0, dy, dx);
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }
}

/// Shared parameter-container plumbing: every model exposes its tensors in a
/// fixed order so optimizers, checkpoints and gradient checks can walk them.
pub trait Tensors<F: Float>: Clone {
    fn tensors(&self) -> Vec<&Mat<F>>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat<F>>;
    fn names(&self) -> Vec<String>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    fn global_norm(&self) -> F {
        self.tensors()
            .iter()
            .fold(F::zero(), |acc, t| acc + t.sum_sq())
            .sqrt()
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    fn scale(&mut self, s: F) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}
