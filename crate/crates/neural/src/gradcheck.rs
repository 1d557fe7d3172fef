//! Central finite-difference gradient checks in f64.

use dmc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ffnn::{FfnnConfig, FfnnParams, PairModel};
use crate::tensor::Tensors;
use crate::vec2seq::{Vec2seqConfig, Vec2seqParams};

/// Denominator floor so that two near-zero gradients do not report noise
/// as a large relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    /// Analytic and numeric values at the worst entry.
    pub worst_values: (f64, f64),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One labeled example for a gradient check.
#[derive(Debug, Clone)]
pub struct CheckPair {
    pub image: Vec<f64>,
    pub tokens: Vec<u32>,
    pub label: bool,
}

fn summed_loss<M: PairModel<f64>>(m: &M, pairs: &[CheckPair], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let parts = m.pair_loss(&p.image, &p.tokens, p.label, lambda, None)?;
        total += parts.classification + lambda * parts.generation;
    }
    Ok(total)
}

/// Compares the analytic gradient of the summed pair loss with central
/// differences at step `eps`, over every parameter.
pub fn check_model<M: PairModel<f64>>(
    model: &M,
    pairs: &[CheckPair],
    lambda: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut grad = model.zeros_like();
    for p in pairs {
        model.pair_loss(&p.image, &p.tokens, p.label, lambda, Some(&mut grad))?;
    }
    let names = model.names();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    let shapes: Vec<usize> = model.tensors().iter().map(|t| t.data.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors()[ti].data[k];
            let mut at = |delta: f64| -> Result<f64> {
                probe.tensors_mut()[ti].data[k] = orig + delta;
                summed_loss(&probe, pairs, lambda)
            };
            // Five-point stencil: truncation error O(eps⁴).
            let numeric =
                (8.0 * (at(eps)? - at(-eps)?) - (at(2.0 * eps)? - at(-2.0 * eps)?)) / (12.0 * eps);
            probe.tensors_mut()[ti].data[k] = orig;
            let analytic = grad.tensors()[ti].data[k];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (names[ti].clone(), k);
                report.worst_values = (analytic, numeric);
            }
        }
    }
    Ok(report)
}

/// Random biases keep ReLU pre-activations off their kink at 0.
fn jitter<T: Tensors<f64>>(model: &mut T, rng: &mut ChaCha8Rng) {
    for t in model.tensors_mut() {
        t.data
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
}

fn random_image(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Small FFNN (`d_w = 4`, hidden 4 and 2) on a positive and a negative pair.
pub fn grad_check_ffnn(seed: u64) -> Result<GradCheckReport> {
    let cfg = FfnnConfig {
        vocab: 6,
        d_img: 5,
        d_w: 4,
        h1: 4,
        h2: 2,
    };
    let mut model = FfnnParams::<f64>::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Random biases keep ReLU pre-activations off their kink at 0.
    for t in model.tensors_mut() {
        t.data
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let pairs = vec![
        CheckPair {
            image: random_image(&mut rng, 5),
            tokens: vec![0, 3, 3, 5],
            label: true,
        },
        CheckPair {
            image: random_image(&mut rng, 5),
            tokens: vec![1, 2],
            label: false,
        },
    ];
    check_model(&model, &pairs, 0.0, 1e-4)
}

/// Small Vec2seq (dim 4) on a 2-token true caption and a decoy.
pub fn grad_check_vec2seq(seed: u64, lambda: f64) -> Result<GradCheckReport> {
    let cfg = Vec2seqConfig {
        vocab: 5,
        d_img: 3,
        dim: 4,
        h1: 4,
        h2: 3,
    };
    let mut model = Vec2seqParams::<f64>::init(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter(&mut model, &mut rng);
    let image = random_image(&mut rng, 3);
    let pairs = vec![
        CheckPair {
            image: image.clone(),
            tokens: vec![2, 4],
            label: true,
        },
        CheckPair {
            image,
            tokens: vec![1, 0],
            label: false,
        },
    ];
    check_model(&model, &pairs, lambda, 1e-4)
}
