//! PV-DBOW caption embeddings trained with a softmax loss, the mgs-rank
//! objective and the (dim, epochs) grid search over it.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::PairedCorpus;
use crate::error::{Error, Result};
use crate::simsearch::SearchIndex;
use crate::table::GridTable;

const CHECKPOINT_MAGIC: &[u8; 4] = b"PVDB";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PVHyperParams {
    pub dim: usize,
    pub epochs: usize,
    pub initial_lr: f64,
    pub seed: u64,
    /// `Some(k)` trains with `k` negative samples instead of the full softmax.
    pub negative: Option<usize>,
}

impl Default for PVHyperParams {
    fn default() -> Self {
        PVHyperParams {
            dim: 1024,
            epochs: 5,
            initial_lr: 0.025,
            seed: 0,
            negative: None,
        }
    }
}

impl PVHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::invalid("initial_lr must be > 0"));
        }
        if self.negative == Some(0) {
            return Err(Error::invalid("negative sample count must be >= 1"));
        }
        Ok(())
    }
}

/// Trained caption embeddings: one document vector per caption plus the
/// softmax output weights over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PVModel {
    pub hyper: PVHyperParams,
    caption_ids: Vec<String>,
    index: HashMap<String, usize>,
    doc_vectors: Vec<f32>,
    word_weights: Vec<f32>,
    vocab_size: usize,
}

impl PVModel {
    fn new(
        hyper: PVHyperParams,
        caption_ids: Vec<String>,
        doc_vectors: Vec<f32>,
        word_weights: Vec<f32>,
        vocab_size: usize,
    ) -> Result<Self> {
        let dim = hyper.dim;
        if dim == 0 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if doc_vectors.len() != caption_ids.len() * dim || word_weights.len() != vocab_size * dim {
            return Err(Error::invalid(
                "matrix sizes do not match dim and row counts",
            ));
        }
        if doc_vectors
            .iter()
            .chain(&word_weights)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("non-finite value in PV model"));
        }
        let mut index = HashMap::with_capacity(caption_ids.len());
        for (i, id) in caption_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId {
                    kind: "caption",
                    id: id.clone(),
                });
            }
        }
        Ok(PVModel {
            hyper,
            caption_ids,
            index,
            doc_vectors,
            word_weights,
            vocab_size,
        })
    }

    /// A model carrying only document vectors (no softmax weights); used to
    /// plug externally computed embeddings into the search and scoring code.
    pub fn from_doc_vectors(
        caption_ids: Vec<String>,
        dim: usize,
        doc_vectors: Vec<f32>,
    ) -> Result<Self> {
        let hyper = PVHyperParams {
            dim,
            epochs: 1,
            ..PVHyperParams::default()
        };
        Self::new(hyper, caption_ids, doc_vectors, Vec::new(), 0)
    }

    pub fn dim(&self) -> usize {
        self.hyper.dim
    }

    pub fn len(&self) -> usize {
        self.caption_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caption_ids.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn caption_ids(&self) -> &[String] {
        &self.caption_ids
    }

    pub fn row_of(&self, caption_id: &str) -> Option<usize> {
        self.index.get(caption_id).copied()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let d = self.hyper.dim;
        &self.doc_vectors[row * d..(row + 1) * d]
    }

    pub fn vector(&self, caption_id: &str) -> Option<&[f32]> {
        self.row_of(caption_id).map(|r| self.row(r))
    }

    pub fn doc_vectors(&self) -> &[f32] {
        &self.doc_vectors
    }

    pub fn word_weights(&self) -> &[f32] {
        &self.word_weights
    }

    /// Replaces every document vector, e.g. with a rotated copy.
    pub fn with_doc_vectors(&self, doc_vectors: Vec<f32>) -> Result<Self> {
        Self::new(
            self.hyper.clone(),
            self.caption_ids.clone(),
            doc_vectors,
            self.word_weights.clone(),
            self.vocab_size,
        )
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u32::<LittleEndian>(self.hyper.dim as u32)?;
        out.write_u64::<LittleEndian>(self.caption_ids.len() as u64)?;
        out.write_u64::<LittleEndian>(self.vocab_size as u64)?;
        for id in &self.caption_ids {
            let len = u16::try_from(id.len())
                .map_err(|_| Error::invalid(format!("caption id too long: {id}")))?;
            out.write_u16::<LittleEndian>(len)?;
            out.write_all(id.as_bytes())?;
        }
        for &v in self.doc_vectors.iter().chain(&self.word_weights) {
            out.write_f32::<LittleEndian>(v)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a checkpoint. Only `dim` of the hyper-parameters is stored; the
    /// rest take their defaults.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bad = |reason: String| Error::BadFormat {
            format: "PV checkpoint",
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u64::<LittleEndian>()? as usize;
        let v = r.read_u64::<LittleEndian>()? as usize;
        let mut caption_ids = Vec::with_capacity(m.min(1 << 24));
        for _ in 0..m {
            let len = r.read_u16::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            caption_ids.push(String::from_utf8(buf).map_err(|e| bad(e.to_string()))?);
        }
        let mut doc_vectors = vec![0f32; m * dim];
        r.read_f32_into::<LittleEndian>(&mut doc_vectors)?;
        let mut word_weights = vec![0f32; v * dim];
        r.read_f32_into::<LittleEndian>(&mut word_weights)?;
        let hyper = PVHyperParams {
            dim,
            ..PVHyperParams::default()
        };
        Self::new(hyper, caption_ids, doc_vectors, word_weights, v)
    }
}

/// `-log softmax(doc · Wᵀ)[target]` for one (document, token) pair.
pub fn softmax_loss<F: Float>(doc: &[F], weights: &[F], target: usize) -> F {
    let logits = logits(doc, weights);
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum = logits
        .iter()
        .fold(F::zero(), |acc, &z| acc + (z - max).exp());
    -(logits[target] - max - sum.ln())
}

fn logits<F: Float>(doc: &[F], weights: &[F]) -> Vec<F> {
    let dim = doc.len();
    weights
        .chunks_exact(dim)
        .map(|w| {
            w.iter()
                .zip(doc)
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
        })
        .collect()
}

fn softmax_in_place<F: Float>(z: &mut [F]) {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in z.iter_mut() {
        *v = *v / sum;
    }
}

/// Gradients of [`softmax_loss`] with respect to the document vector and
/// the full weight matrix.
pub fn softmax_grad<F: Float>(doc: &[F], weights: &[F], target: usize) -> (Vec<F>, Vec<F>) {
    let dim = doc.len();
    let mut p = logits(doc, weights);
    softmax_in_place(&mut p);
    p[target] = p[target] - F::one();
    let mut g_doc = vec![F::zero(); dim];
    let mut g_w = vec![F::zero(); weights.len()];
    for (v, &err) in p.iter().enumerate() {
        let w = &weights[v * dim..(v + 1) * dim];
        for k in 0..dim {
            g_doc[k] = g_doc[k] + err * w[k];
            g_w[v * dim + k] = err * doc[k];
        }
    }
    (g_doc, g_w)
}

/// One SGD step on the full-softmax loss, updating both the document vector
/// and the output weights from gradients taken at the current point.
/// Returns the loss before the step.
pub fn softmax_sgd_step<F: Float>(
    doc: &mut [F],
    weights: &mut [F],
    target: usize,
    lr: F,
    scratch: &mut Vec<F>,
    grad_doc: &mut Vec<F>,
) -> F {
    let dim = doc.len();
    scratch.clear();
    scratch.extend(weights.chunks_exact(dim).map(|w| {
        w.iter()
            .zip(doc.iter())
            .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
    }));
    let max = scratch.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for z in scratch.iter_mut() {
        *z = (*z - max).exp();
        sum = sum + *z;
    }
    let loss = -((scratch[target] / sum).ln());

    grad_doc.clear();
    grad_doc.resize(dim, F::zero());
    for (v, w) in weights.chunks_exact_mut(dim).enumerate() {
        let mut err = scratch[v] / sum;
        if v == target {
            err = err - F::one();
        }
        let step = lr * err;
        for k in 0..dim {
            grad_doc[k] = grad_doc[k] + err * w[k];
            w[k] = w[k] - step * doc[k];
        }
    }
    for k in 0..dim {
        doc[k] = doc[k] - lr * grad_doc[k];
    }
    loss
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn negative_sampling_step(
    doc: &mut [f32],
    weights: &mut [f32],
    target: usize,
    negatives: &[usize],
    lr: f32,
    grad_doc: &mut Vec<f32>,
) -> f32 {
    let dim = doc.len();
    grad_doc.clear();
    grad_doc.resize(dim, 0.0);
    let mut loss = 0.0;
    let mut update = |word: usize, label: f32, loss: &mut f32| {
        let w = &mut weights[word * dim..(word + 1) * dim];
        let z: f32 = w.iter().zip(doc.iter()).map(|(a, b)| a * b).sum();
        let p = sigmoid(z);
        *loss -= if label > 0.5 {
            p.max(1e-12).ln()
        } else {
            (1.0 - p).max(1e-12).ln()
        };
        let err = p - label;
        for k in 0..dim {
            grad_doc[k] += err * w[k];
            w[k] -= lr * err * doc[k];
        }
    };
    update(target, 1.0, &mut loss);
    for &n in negatives {
        if n != target {
            update(n, 0.0, &mut loss);
        }
    }
    for k in 0..dim {
        doc[k] -= lr * grad_doc[k];
    }
    loss
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PvTrainLog {
    pub epoch_losses: Vec<f64>,
}

pub fn train_pv(corpus: &PairedCorpus, hp: &PVHyperParams) -> Result<PVModel> {
    train_pv_logged(corpus, hp).map(|(model, _)| model)
}

/// Trains PV-DBOW: every token of a caption is predicted from the caption's
/// document vector alone. Captions and tokens are visited in corpus order;
/// the learning rate decays linearly from `initial_lr` to `initial_lr / 100`
/// over all steps.
pub fn train_pv_logged(corpus: &PairedCorpus, hp: &PVHyperParams) -> Result<(PVModel, PvTrainLog)> {
    hp.validate()?;
    if corpus.captions().is_empty() {
        return Err(Error::invalid("cannot train PV on an empty corpus"));
    }
    let dim = hp.dim;
    let vocab_size = corpus.vocab().len();
    let m = corpus.captions().len();
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);

    let half = 0.5 / dim as f32;
    let mut docs: Vec<f32> = (0..m * dim)
        .map(|_| rng.random_range(-half..half))
        .collect();
    let mut weights = vec![0f32; vocab_size * dim];

    let noise = match hp.negative {
        Some(_) => {
            let mut counts = vec![0f64; vocab_size];
            for c in corpus.captions() {
                for &t in &c.tokens {
                    counts[t as usize] += 1.0;
                }
            }
            let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
            Some(WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?)
        }
        None => None,
    };

    let tokens_per_epoch: usize = corpus.captions().iter().map(|c| c.tokens.len()).sum();
    let total_steps = (tokens_per_epoch * hp.epochs).max(1) as f64;
    let lr0 = hp.initial_lr;
    let lr_min = lr0 / 100.0;

    let mut scratch = Vec::with_capacity(vocab_size);
    let mut grad_doc = Vec::with_capacity(dim);
    let mut negatives = Vec::new();
    let mut epoch_losses = Vec::with_capacity(hp.epochs);
    let mut step = 0usize;
    for _ in 0..hp.epochs {
        let mut loss_sum = 0f64;
        for (c, cap) in corpus.captions().iter().enumerate() {
            let doc = &mut docs[c * dim..(c + 1) * dim];
            for &tok in &cap.tokens {
                let lr = (lr0 - (lr0 - lr_min) * step as f64 / total_steps) as f32;
                let loss = match (&noise, hp.negative) {
                    (Some(dist), Some(k)) => {
                        negatives.clear();
                        negatives.extend((0..k).map(|_| dist.sample(&mut rng)));
                        negative_sampling_step(
                            doc,
                            &mut weights,
                            tok as usize,
                            &negatives,
                            lr,
                            &mut grad_doc,
                        )
                    }
                    _ => softmax_sgd_step(
                        doc,
                        &mut weights,
                        tok as usize,
                        lr,
                        &mut scratch,
                        &mut grad_doc,
                    ),
                };
                loss_sum += loss as f64;
                step += 1;
            }
        }
        epoch_losses.push(loss_sum / tokens_per_epoch.max(1) as f64);
    }

    let ids = corpus
        .captions()
        .iter()
        .map(|c| c.caption_id.clone())
        .collect();
    let model = PVModel::new(hp.clone(), ids, docs, weights, vocab_size)?;
    Ok((model, PvTrainLog { epoch_losses }))
}

fn check_siblings(corpus: &PairedCorpus) -> Result<()> {
    for (i, im) in corpus.images().iter().enumerate() {
        let count = corpus.captions_of(i).len();
        if count < 2 {
            return Err(Error::TooFewSiblings {
                image_id: im.image_id.clone(),
                count,
            });
        }
    }
    Ok(())
}

/// Rank (1-based) of `target` among all captions other than `query`, by
/// descending cosine similarity to `query` with ties by ascending caption id.
fn full_rank(index: &SearchIndex<'_>, query: usize, target: usize) -> usize {
    let captions = index.corpus().captions();
    let target_sim = index.similarity(query, target);
    let target_id = &captions[target].caption_id;
    let mut ahead = 0;
    for pos in 0..index.len() {
        if pos == query || pos == target {
            continue;
        }
        let sim = index.similarity(query, pos);
        if sim > target_sim || (sim == target_sim && captions[pos].caption_id < *target_id) {
            ahead += 1;
        }
    }
    ahead + 1
}

fn sibling_ranks(model: &PVModel, corpus: &PairedCorpus, cap: Option<usize>) -> Result<f64> {
    check_siblings(corpus)?;
    let index = SearchIndex::new(model, corpus)?;
    let (sum, pairs) = (0..corpus.captions().len())
        .into_par_iter()
        .map(|c| {
            let mut sum = 0u64;
            let mut pairs = 0u64;
            for &s in corpus.captions_of(corpus.image_of(c)) {
                if s == c {
                    continue;
                }
                let mut rank = full_rank(&index, c, s);
                if let Some(n) = cap {
                    rank = rank.min(n + 1);
                }
                sum += rank as u64;
                pairs += 1;
            }
            (sum, pairs)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(sum as f64 / pairs as f64)
}

/// Mean rank of each caption's same-image siblings among all other corpus
/// captions, ordered by cosine distance. Averaged over (caption, sibling)
/// pairs.
pub fn mgs_rank(model: &PVModel, corpus: &PairedCorpus) -> Result<f64> {
    sibling_ranks(model, corpus, None)
}

/// [`mgs_rank`] restricted to each caption's top-`n` neighborhood; siblings
/// outside it count as rank `n + 1`.
pub fn mgs_rank_within(model: &PVModel, corpus: &PairedCorpus, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    sibling_ranks(model, corpus, Some(n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PVGrid {
    pub dims: Vec<usize>,
    pub epochs_list: Vec<usize>,
}

impl PVGrid {
    pub fn points(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims
            .iter()
            .flat_map(move |&d| self.epochs_list.iter().map(move |&e| (d, e)))
    }
}

#[derive(Debug, Clone)]
pub struct PvGridRow {
    pub dim: usize,
    pub epochs: usize,
    pub mgs_rank: f64,
}

#[derive(Debug, Clone)]
pub struct PvGridResult {
    pub best: PVHyperParams,
    pub model: PVModel,
    pub table: Vec<PvGridRow>,
}

impl PvGridResult {
    pub fn grid_table(&self) -> GridTable {
        GridTable {
            param: "dim/epochs".into(),
            rows: self
                .table
                .iter()
                .map(|r| (format!("{}/{}", r.dim, r.epochs), r.mgs_rank))
                .collect(),
        }
    }
}

pub fn optimize_pv(
    corpus: &PairedCorpus,
    grid: &PVGrid,
    base: &PVHyperParams,
) -> Result<PvGridResult> {
    optimize_pv_with(corpus, grid, base, train_pv)
}

/// Grid search with a pluggable trainer. The lowest mgs-rank wins; ties go to
/// the smaller dim, then fewer epochs.
pub fn optimize_pv_with<T>(
    corpus: &PairedCorpus,
    grid: &PVGrid,
    base: &PVHyperParams,
    mut train: T,
) -> Result<PvGridResult>
where
    T: FnMut(&PairedCorpus, &PVHyperParams) -> Result<PVModel>,
{
    if grid.dims.is_empty() || grid.epochs_list.is_empty() {
        return Err(Error::invalid("PV grid must be non-empty"));
    }
    let mut table = Vec::new();
    let mut best: Option<(f64, PVHyperParams, PVModel)> = None;
    for (dim, epochs) in grid.points() {
        let hp = PVHyperParams {
            dim,
            epochs,
            ..base.clone()
        };
        let model = train(corpus, &hp)?;
        let rank = mgs_rank(&model, corpus)?;
        table.push(PvGridRow {
            dim,
            epochs,
            mgs_rank: rank,
        });
        let better = match &best {
            None => true,
            Some((r, b, _)) => rank < *r || (rank == *r && (dim, epochs) < (b.dim, b.epochs)),
        };
        if better {
            best = Some((rank, hp, model));
        }
    }
    let (_, best, model) = best.expect("grid is non-empty");
    Ok(PvGridResult { best, model, table })
}
