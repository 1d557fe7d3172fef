//! Two-hidden-layer comprehension classifier over (image, caption) pairs.

use dmc_core::{Error, Result};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{cross_entropy, relu, softmax, Dense, Mat, Tensors};

/// Per-pair loss terms; `generation` is 0 for models without a decoder
/// and for decoy pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts<F> {
    pub classification: F,
    pub generation: F,
    pub yes_probability: F,
}

/// A model that scores ⟨image, caption⟩ pairs and can differentiate its
/// per-pair loss `classification + λ_gen · generation`.
pub trait PairModel<F: Float>: Tensors<F> + Send + Sync {
    fn yes_probability(&self, image: &[F], tokens: &[u32]) -> Result<F>;

    /// Loss of one pair. When `grad` is given, the gradient of
    /// `classification + lambda_gen · generation` is added into it.
    fn pair_loss(
        &self,
        image: &[F],
        tokens: &[u32],
        label: bool,
        lambda_gen: F,
        grad: Option<&mut Self>,
    ) -> Result<LossParts<F>>;
}

/// ReLU → ReLU → 2-way softmax (`[no, yes]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Head<F> {
    pub l1: Dense<F>,
    pub l2: Dense<F>,
    pub out: Dense<F>,
}

pub struct HeadCache<F> {
    x: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
    pub logits: Vec<F>,
}

fn relu_mask<F: Float>(d: &mut [F], activ: &[F]) {
    for (g, &a) in d.iter_mut().zip(activ) {
        if a <= F::zero() {
            *g = F::zero();
        }
    }
}

impl<F: Float> Head<F> {
    pub fn new<R: rand::Rng>(input: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        Head {
            l1: Dense::new(h1, input, rng),
            l2: Dense::new(h2, h1, rng),
            out: Dense::new(2, h2, rng),
        }
    }

    pub fn forward(&self, x: Vec<F>) -> HeadCache<F> {
        let h1 = relu(&self.l1.forward(&x));
        let h2 = relu(&self.l2.forward(&h1));
        let logits = self.out.forward(&h2);
        HeadCache { x, h1, h2, logits }
    }

    /// Returns `dL/dx`.
    pub fn backward(&self, cache: &HeadCache<F>, dlogits: &[F], grad: &mut Head<F>) -> Vec<F> {
        let mut dh2 = vec![F::zero(); cache.h2.len()];
        self.out
            .backward(&cache.h2, dlogits, &mut grad.out, Some(&mut dh2));
        relu_mask(&mut dh2, &cache.h2);
        let mut dh1 = vec![F::zero(); cache.h1.len()];
        self.l2
            .backward(&cache.h1, &dh2, &mut grad.l2, Some(&mut dh1));
        relu_mask(&mut dh1, &cache.h1);
        let mut dx = vec![F::zero(); cache.x.len()];
        self.l1
            .backward(&cache.x, &dh1, &mut grad.l1, Some(&mut dx));
        dx
    }

    fn tensors(&self) -> [&Mat<F>; 6] {
        [
            &self.l1.w,
            &self.l1.b,
            &self.l2.w,
            &self.l2.b,
            &self.out.w,
            &self.out.b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Mat<F>; 6] {
        [
            &mut self.l1.w,
            &mut self.l1.b,
            &mut self.l2.w,
            &mut self.l2.b,
            &mut self.out.w,
            &mut self.out.b,
        ]
    }

    const NAMES: [&'static str; 6] = ["l1.w", "l1.b", "l2.w", "l2.b", "out.w", "out.b"];
}

/// Gradient of the 2-class cross entropy with respect to the logits.
pub(crate) fn class_grad<F: Float>(logits: &[F], label: bool) -> (F, Vec<F>, F) {
    let target = usize::from(label);
    let loss = cross_entropy(logits, target);
    let mut p = softmax(logits);
    let yes = p[1];
    p[target] = p[target] - F::one();
    (loss, p, yes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnnConfig {
    pub vocab: usize,
    pub d_img: usize,
    /// Word embedding size; the image is projected to the same size.
    pub d_w: usize,
    pub h1: usize,
    pub h2: usize,
}

impl FfnnConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.d_img, self.d_w, self.h1, self.h2].contains(&0) {
            return Err(Error::invalid(format!(
                "all FFNN sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Caption = mean of its word embeddings; input = `[caption; W_img·image + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnnParams<F> {
    /// `V × d_w`
    pub emb: Mat<F>,
    pub img: Dense<F>,
    pub head: Head<F>,
}

impl<F: Float> FfnnParams<F> {
    pub fn init(cfg: &FfnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FfnnParams {
            emb: Mat::uniform(cfg.vocab, cfg.d_w, 1.0, &mut rng),
            img: Dense::new(cfg.d_w, cfg.d_img, &mut rng),
            head: Head::new(2 * cfg.d_w, cfg.h1, cfg.h2, &mut rng),
        })
    }

    pub fn zeros(cfg: &FfnnConfig) -> Self {
        FfnnParams {
            emb: Mat::zeros(cfg.vocab, cfg.d_w),
            img: Dense::zeros(cfg.d_w, cfg.d_img),
            head: Head {
                l1: Dense::zeros(cfg.h1, 2 * cfg.d_w),
                l2: Dense::zeros(cfg.h2, cfg.h1),
                out: Dense::zeros(2, cfg.h2),
            },
        }
    }

    pub fn config(&self) -> FfnnConfig {
        FfnnConfig {
            vocab: self.emb.rows,
            d_img: self.img.in_dim(),
            d_w: self.emb.cols,
            h1: self.head.l1.out_dim(),
            h2: self.head.l2.out_dim(),
        }
    }

    /// Rebuilds parameters from tensors in [`Tensors::tensors`] order,
    /// checking that the shapes chain.
    pub fn from_tensors(t: Vec<Mat<F>>) -> Result<Self> {
        if t.len() != 9 {
            return Err(Error::BadFormat {
                format: "ffnn checkpoint",
                reason: format!("expected 9 tensors, found {}", t.len()),
            });
        }
        let cfg = FfnnConfig {
            vocab: t[0].rows,
            d_w: t[0].cols,
            d_img: t[1].cols,
            h1: t[3].rows,
            h2: t[5].rows,
        };
        cfg.validate()?;
        let mut p = Self::zeros(&cfg);
        for (dst, src) in p.tensors_mut().into_iter().zip(t) {
            if (dst.rows, dst.cols) != (src.rows, src.cols) {
                return Err(Error::BadFormat {
                    format: "ffnn checkpoint",
                    reason: format!(
                        "tensor shape {}×{} does not chain (expected {}×{})",
                        src.rows, src.cols, dst.rows, dst.cols
                    ),
                });
            }
            *dst = src;
        }
        Ok(p)
    }

    fn input(&self, image: &[F], tokens: &[u32]) -> Result<Vec<F>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty caption"));
        }
        if image.len() != self.img.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.img.in_dim(),
                found: image.len(),
            });
        }
        let d = self.emb.cols;
        let mut x = vec![F::zero(); 2 * d];
        for &t in tokens {
            let row = self.emb.row(self.token_row(t)?);
            for k in 0..d {
                x[k] = x[k] + row[k];
            }
        }
        let inv = F::one() / F::from(tokens.len()).expect("small");
        for v in &mut x[..d] {
            *v = *v * inv;
        }
        x[d..].copy_from_slice(&self.img.forward(image));
        Ok(x)
    }

    fn token_row(&self, t: u32) -> Result<usize> {
        let t = t as usize;
        if t >= self.emb.rows {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.emb.rows
            )));
        }
        Ok(t)
    }

    /// `[P(no), P(yes)]`.
    pub fn forward(&self, image: &[F], tokens: &[u32]) -> Result<[F; 2]> {
        let cache = self.head.forward(self.input(image, tokens)?);
        let p = softmax(&cache.logits);
        Ok([p[0], p[1]])
    }
}

impl<F: Float> Tensors<F> for FfnnParams<F> {
    fn tensors(&self) -> Vec<&Mat<F>> {
        let mut v = vec![&self.emb, &self.img.w, &self.img.b];
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat<F>> {
        let mut v = vec![&mut self.emb, &mut self.img.w, &mut self.img.b];
        v.extend(self.head.tensors_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        ["emb", "img.w", "img.b"]
            .into_iter()
            .chain(Head::<F>::NAMES)
            .map(str::to_owned)
            .collect()
    }
}

impl<F: Float + Send + Sync> PairModel<F> for FfnnParams<F> {
    fn yes_probability(&self, image: &[F], tokens: &[u32]) -> Result<F> {
        Ok(self.forward(image, tokens)?[1])
    }

    fn pair_loss(
        &self,
        image: &[F],
        tokens: &[u32],
        label: bool,
        _lambda_gen: F,
        grad: Option<&mut Self>,
    ) -> Result<LossParts<F>> {
        let cache = self.head.forward(self.input(image, tokens)?);
        let (loss, dlogits, yes) = class_grad(&cache.logits, label);
        if let Some(g) = grad {
            let dx = self.head.backward(&cache, &dlogits, &mut g.head);
            let d = self.emb.cols;
            let inv = F::one() / F::from(tokens.len()).expect("small");
            for &t in tokens {
                let row = g.emb.row_mut(t as usize);
                for k in 0..d {
                    row[k] = row[k] + dx[k] * inv;
                }
            }
            self.img.backward(image, &dx[d..], &mut g.img, None);
        }
        Ok(LossParts {
            classification: loss,
            generation: F::zero(),
            yes_probability: yes,
        })
    }
}
