//! Mini-batch ADAGRAD training over ⟨image, caption⟩ pairs, dev-set model
//! selection and instance-level prediction.

use std::fmt::Write as _;
use std::path::Path;

use dmc_core::corpus::Vocabulary;
use dmc_core::metrics::{cider, corpus_rouge_l, ReferenceSet};
use dmc_core::{Error, Result};
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{ItemSet, Pair};
use crate::ffnn::{LossParts, PairModel};
use crate::optim::{clip_global_norm, Adagrad};
use crate::tensor::{argmax, cast};
use crate::vec2seq::{Vec2seqParams, DEFAULT_MAX_LEN};

/// Pairs handled by one worker before partial gradients are summed. Fixed so
/// that the reduction order, and hence the result, does not depend on the
/// thread count.
const CHUNK: usize = 4;

/// λ_gen values of the multi-task sweep.
pub const LAMBDA_GRID: [f64; 7] = [0.0, 0.1, 1.0, 2.0, 4.0, 8.0, 16.0];

/// `(dim, h1, h2)` of the model-size sweep.
pub const SIZE_GRID: [(usize, usize, usize); 5] = [
    (64, 64, 16),
    (256, 256, 64),
    (512, 512, 128),
    (1024, 1024, 256),
    (2048, 2048, 512),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    /// Pairs per update.
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub lambda_gen: f64,
    /// Dev evaluation period in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            clip_norm: 4.0,
            batch_size: 20,
            max_steps: 50_000,
            seed: 0,
            lambda_gen: 0.0,
            eval_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.lambda_gen >= 0.0 && self.lambda_gen.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda_gen must be >= 0, got {}",
                self.lambda_gen
            )));
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::invalid(
                "batch size, step count and eval period must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::from("step,split,loss,accuracy,rouge_l,cider\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.step,
                r.split,
                r.loss,
                opt(r.accuracy),
                opt(r.rouge_l),
                opt(r.cider)
            );
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters at the best dev evaluation.
    pub best: M,
    pub best_step: usize,
    pub best_dev_accuracy: f64,
    pub log: TrainLog,
}

/// Mean of the per-pair losses over `pairs`.
pub fn multitask_loss<F: Float + Send + Sync, M: PairModel<F>>(
    model: &M,
    pairs: &[Pair<'_, F>],
    lambda_gen: F,
) -> Result<LossParts<F>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs"));
    }
    let parts = pairs
        .par_iter()
        .map(|p| model.pair_loss(p.image, p.tokens, p.label, lambda_gen, None))
        .collect::<Result<Vec<_>>>()?;
    let inv = F::one() / cast(pairs.len() as f64);
    let mut sum = LossParts {
        classification: F::zero(),
        generation: F::zero(),
        yes_probability: F::zero(),
    };
    for p in parts {
        sum.classification = sum.classification + p.classification;
        sum.generation = sum.generation + p.generation;
        sum.yes_probability = sum.yes_probability + p.yes_probability;
    }
    Ok(LossParts {
        classification: sum.classification * inv,
        generation: sum.generation * inv,
        yes_probability: sum.yes_probability * inv,
    })
}

/// Total loss `classification + λ_gen · generation`, batch-mean.
pub fn total_loss<F: Float>(parts: &LossParts<F>, lambda_gen: F) -> F {
    parts.classification + lambda_gen * parts.generation
}

/// Batch-mean loss and its gradient.
pub fn batch_loss_and_grad<F: Float + Send + Sync, M: PairModel<F>>(
    model: &M,
    pairs: &[Pair<'_, F>],
    lambda_gen: F,
) -> Result<(F, M)> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let partials = pairs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.zeros_like();
            let mut loss = F::zero();
            for p in chunk {
                let parts =
                    model.pair_loss(p.image, p.tokens, p.label, lambda_gen, Some(&mut g))?;
                loss = loss + total_loss(&parts, lambda_gen);
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("non-empty");
    for (l, g) in iter {
        loss = loss + l;
        grad.add_assign(&g);
    }
    let inv = F::one() / cast(pairs.len() as f64);
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// Candidate with the highest P(yes); ties go to the lowest index.
pub fn predict_instance<F: Float, M: PairModel<F>>(
    model: &M,
    set: &ItemSet<F>,
    item: usize,
) -> Result<usize> {
    let it = &set.items[item];
    let scores = it
        .candidates
        .iter()
        .map(|c| model.yes_probability(&set.images[it.image], c))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&scores))
}

pub fn predict_all<F: Float + Send + Sync, M: PairModel<F>>(
    model: &M,
    set: &ItemSet<F>,
) -> Result<Vec<usize>> {
    (0..set.len())
        .into_par_iter()
        .map(|i| predict_instance(model, set, i))
        .collect()
}

pub fn accuracy<F: Float + Send + Sync, M: PairModel<F>>(
    model: &M,
    set: &ItemSet<F>,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let preds = predict_all(model, set)?;
    let correct = preds
        .iter()
        .zip(&set.items)
        .filter(|(p, it)| **p == it.target)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Greedy captions for every distinct image of `set`, as vocabulary words.
pub fn generate_captions<F: Float + Send + Sync>(
    model: &Vec2seqParams<F>,
    set: &ItemSet<F>,
    vocab: &Vocabulary,
) -> Result<Vec<(String, Vec<String>)>> {
    set.images
        .par_iter()
        .zip(&set.image_ids)
        .map(|(img, id)| {
            Ok((
                id.clone(),
                vocab.decode(&model.generate(img, DEFAULT_MAX_LEN)?),
            ))
        })
        .collect()
}

/// Corpus ROUGE-L and CIDEr-D of greedy captions against `refs`.
pub fn caption_metrics<F: Float + Send + Sync>(
    model: &Vec2seqParams<F>,
    set: &ItemSet<F>,
    vocab: &Vocabulary,
    refs: &ReferenceSet,
) -> Result<(f64, f64)> {
    let hyps = generate_captions(model, set, vocab)?;
    Ok((corpus_rouge_l(&hyps, refs)?, cider(&hyps, refs)?))
}

type CaptionEval<'a, M> = &'a (dyn Fn(&M) -> Result<(f64, f64)> + Sync);

/// Trains `init` on the pairs of `train`, evaluating on `dev` every
/// `eval_every` steps and after the last step. Returns the parameters with
/// the best dev accuracy (earliest on ties).
pub fn train<M: PairModel<f32>>(
    init: M,
    train: &ItemSet<f32>,
    dev: &ItemSet<f32>,
    cfg: &TrainConfig,
    caption_eval: Option<CaptionEval<'_, M>>,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::invalid("train and dev sets must be non-empty"));
    }
    let lambda: f32 = cast(cfg.lambda_gen);
    let clip: f32 = cast(cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train.pair_indices();
    let dev_pairs = dev.pairs();
    let mut model = init;
    let mut opt = Adagrad::new(&model, cast(cfg.lr));
    let mut log = TrainLog::default();
    let mut best: Option<(M, usize, f64)> = None;
    let mut cursor = order.len();
    let mut running = 0.0f64;
    let mut running_n = 0usize;

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let (i, c) = order[cursor];
            batch.push(train.pair(i, c));
            cursor += 1;
        }
        let (loss, mut grad) = batch_loss_and_grad(&model, &batch, lambda)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite loss or gradient at step {step}"
            )));
        }
        clip_global_norm(&mut grad, clip);
        opt.step(&mut model, &grad);
        running += f64::from(loss);
        running_n += 1;

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            log.rows.push(LogRow {
                step,
                split: "train",
                loss: running / running_n as f64,
                accuracy: None,
                rouge_l: None,
                cider: None,
            });
            running = 0.0;
            running_n = 0;
            let dev_loss = f64::from(total_loss(
                &multitask_loss(&model, &dev_pairs, lambda)?,
                lambda,
            ));
            let acc = accuracy(&model, dev)?;
            let (rouge_l, cider) = match caption_eval {
                Some(f) => {
                    let (r, c) = f(&model)?;
                    (Some(r), Some(c))
                }
                None => (None, None),
            };
            log.rows.push(LogRow {
                step,
                split: "dev",
                loss: dev_loss,
                accuracy: Some(acc),
                rouge_l,
                cider,
            });
            if best.as_ref().is_none_or(|b| acc > b.2) {
                best = Some((model.clone(), step, acc));
            }
        }
    }
    let (best, best_step, best_dev_accuracy) = best.expect("at least one evaluation");
    Ok(TrainOutcome {
        best,
        best_step,
        best_dev_accuracy,
        log,
    })
}
