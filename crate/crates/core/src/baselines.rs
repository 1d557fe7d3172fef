//! Linear baselines over randomly projected embeddings: ridge regression in
//! both directions (image→caption, caption→image) and a bilinear
//! compatibility model trained with a max-margin hinge loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::corpus::PairedCorpus;
use crate::dataset::Instance;
use crate::error::{Error, Result};
use crate::pvembed::PVModel;

pub const PROJECTION_DIM: usize = 256;
pub const DEFAULT_RIDGE: f64 = 1e-3;

const LMAP_MAGIC: &[u8; 4] = b"LMAP";
const BLIN_MAGIC: &[u8; 4] = b"BLIN";
const MODEL_VERSION: u16 = 1;

/// Embeddings for the images and captions an instance refers to.
pub trait FeatureSource: Sync {
    fn image_vector(&self, image_id: &str) -> Option<&[f32]>;
    fn caption_vector(&self, caption_id: &str) -> Option<&[f32]>;
}

/// Image embeddings from a corpus, caption embeddings from a PV model.
pub struct CorpusFeatures<'a> {
    pub corpus: &'a PairedCorpus,
    pub pv: &'a PVModel,
}

impl FeatureSource for CorpusFeatures<'_> {
    fn image_vector(&self, image_id: &str) -> Option<&[f32]> {
        self.corpus
            .image(image_id)
            .map(|im| im.embedding.as_slice())
    }

    fn caption_vector(&self, caption_id: &str) -> Option<&[f32]> {
        self.pv.vector(caption_id)
    }
}

/// Fixed Gaussian random projections for image and caption embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    pub seed: u64,
    pub d_img: usize,
    pub d_pv: usize,
    pub out_dim: usize,
    image: Vec<f64>,
    caption: Vec<f64>,
}

/// Entries are i.i.d. N(0, 1/out_dim); the image matrix is drawn first.
pub fn make_projections(seed: u64, d_img: usize, d_pv: usize, out_dim: usize) -> ProjectionPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (out_dim.max(1) as f64).sqrt()).expect("finite std");
    let image = (0..d_img * out_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    let caption = (0..d_pv * out_dim)
        .map(|_| normal.sample(&mut rng))
        .collect();
    ProjectionPair {
        seed,
        d_img,
        d_pv,
        out_dim,
        image,
        caption,
    }
}

fn project(x: &[f32], matrix: &[f64], out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &matrix[i * out_dim..(i + 1) * out_dim];
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi as f64 * r;
        }
    }
    out
}

impl ProjectionPair {
    pub fn project_image(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_img {
            return Err(Error::DimensionMismatch {
                expected: self.d_img,
                found: x.len(),
            });
        }
        Ok(project(x, &self.image, self.out_dim))
    }

    pub fn project_caption(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.d_pv {
            return Err(Error::DimensionMismatch {
                expected: self.d_pv,
                found: x.len(),
            });
        }
        Ok(project(x, &self.caption, self.out_dim))
    }
}

/// Cosine similarity in `f64`; 0 if either vector is zero.
fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// An instance with all embeddings projected.
#[derive(Debug, Clone)]
pub struct Projected {
    pub image: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub target: usize,
}

pub fn project_instances<S: FeatureSource>(
    instances: &[Instance],
    projections: &ProjectionPair,
    features: &S,
) -> Result<Vec<Projected>> {
    instances
        .par_iter()
        .map(|inst| {
            let image = features.image_vector(&inst.image_id).ok_or_else(|| {
                Error::invalid(format!("no embedding for image '{}'", inst.image_id))
            })?;
            let candidates = inst
                .candidates
                .iter()
                .map(|c| {
                    let v = features
                        .caption_vector(&c.caption_id)
                        .ok_or_else(|| Error::UnknownCaption(c.caption_id.clone()))?;
                    projections.project_caption(v)
                })
                .collect::<Result<_>>()?;
            Ok(Projected {
                image: projections.project_image(image)?,
                candidates,
                target: inst.target_index().ok_or_else(|| Error::InvalidInstance {
                    instance_id: inst.instance_id.clone(),
                    reason: "no target".into(),
                })?,
            })
        })
        .collect()
}

fn accuracy_of(predictions: &[usize], projected: &[Projected]) -> f64 {
    if projected.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(projected)
        .filter(|(p, x)| **p == x.target)
        .count();
    correct as f64 / projected.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Image embedding → caption embedding.
    I2C,
    /// Caption embedding → image embedding.
    C2I,
}

/// A linear map `y = xᵀW` fitted by ridge regression.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub direction: Direction,
    pub ridge: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<f64>,
}

impl LinearMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, projection_seed: u64) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(LMAP_MAGIC)?;
        out.write_u16::<LittleEndian>(MODEL_VERSION)?;
        out.write_u8(match self.direction {
            Direction::I2C => 0,
            Direction::C2I => 1,
        })?;
        out.write_u64::<LittleEndian>(projection_seed)?;
        out.write_f64::<LittleEndian>(self.ridge)?;
        write_matrix(&mut out, self.rows, self.cols, &self.weights)?;
        out.flush()?;
        Ok(())
    }

    /// Returns the map and the projection seed it was trained with.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, LMAP_MAGIC, "linear map")?;
        let direction = match r.read_u8()? {
            0 => Direction::I2C,
            1 => Direction::C2I,
            d => {
                return Err(Error::BadFormat {
                    format: "linear map",
                    reason: format!("unknown direction tag {d}"),
                })
            }
        };
        let seed = r.read_u64::<LittleEndian>()?;
        let ridge = r.read_f64::<LittleEndian>()?;
        let (rows, cols, weights) = read_matrix(&mut r)?;
        Ok((
            LinearMap {
                direction,
                ridge,
                rows,
                cols,
                weights,
            },
            seed,
        ))
    }
}

fn write_matrix(out: &mut impl Write, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    out.write_u32::<LittleEndian>(rows as u32)?;
    out.write_u32::<LittleEndian>(cols as u32)?;
    for &v in data {
        out.write_f32::<LittleEndian>(v as f32)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>)> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0f32; rows * cols];
    r.read_f32_into::<LittleEndian>(&mut buf)?;
    if buf.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadFormat {
            format: "model",
            reason: "non-finite weight".into(),
        });
    }
    Ok((rows, cols, buf.into_iter().map(f64::from).collect()))
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4], format: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::BadFormat {
            format,
            reason: format!("bad magic {m:?}"),
        });
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != MODEL_VERSION {
        return Err(Error::BadFormat {
            format,
            reason: format!("unsupported version {version}"),
        });
    }
    Ok(())
}

/// Closed-form ridge regression `W = (XᵀX + ridge·I)⁻¹ XᵀY`.
pub fn fit_linear_map(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    ridge: f64,
    direction: Direction,
) -> Result<LinearMap> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "need matching non-empty inputs/targets ({} vs {})",
            inputs.len(),
            targets.len()
        )));
    }
    let din = inputs[0].len();
    let dout = targets[0].len();
    if let Some(bad) = inputs.iter().find(|x| x.len() != din) {
        return Err(Error::DimensionMismatch {
            expected: din,
            found: bad.len(),
        });
    }
    if let Some(bad) = targets.iter().find(|y| y.len() != dout) {
        return Err(Error::DimensionMismatch {
            expected: dout,
            found: bad.len(),
        });
    }
    let x = DMatrix::from_fn(inputs.len(), din, |r, c| inputs[r][c]);
    let y = DMatrix::from_fn(targets.len(), dout, |r, c| targets[r][c]);
    let xt = x.transpose();
    let gram = &xt * &x + DMatrix::identity(din, din) * ridge;
    let rhs = &xt * &y;
    let w = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).ok_or(Error::Singular)?,
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular);
    }
    let mut weights = Vec::with_capacity(din * dout);
    for r in 0..din {
        for c in 0..dout {
            weights.push(w[(r, c)]);
        }
    }
    Ok(LinearMap {
        direction,
        ridge,
        rows: din,
        cols: dout,
        weights,
    })
}

/// Regression pairs from each instance's image and target caption, in the
/// orientation the direction needs.
pub fn regression_pairs(
    projected: &[Projected],
    direction: Direction,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    projected
        .iter()
        .map(|p| {
            let (img, cap) = (p.image.clone(), p.candidates[p.target].clone());
            match direction {
                Direction::I2C => (img, cap),
                Direction::C2I => (cap, img),
            }
        })
        .unzip()
}

fn check_direction(map: &LinearMap, want: Direction) -> Result<()> {
    if map.direction != want {
        return Err(Error::invalid(format!(
            "expected a {want:?} map, got {:?}",
            map.direction
        )));
    }
    Ok(())
}

/// Picks the candidate nearest (cosine) to the caption embedding predicted
/// from the image.
pub fn predict_i2c(map: &LinearMap, projected: &[Projected]) -> Result<Vec<usize>> {
    check_direction(map, Direction::I2C)?;
    Ok(projected
        .par_iter()
        .map(|p| {
            let pred = map.apply(&p.image);
            argmax(p.candidates.iter().map(|c| cos(&pred, c)))
        })
        .collect())
}

/// Picks the candidate whose predicted image embedding is nearest (cosine)
/// to the real one.
pub fn predict_c2i(map: &LinearMap, projected: &[Projected]) -> Result<Vec<usize>> {
    check_direction(map, Direction::C2I)?;
    Ok(projected
        .par_iter()
        .map(|p| argmax(p.candidates.iter().map(|c| cos(&map.apply(c), &p.image))))
        .collect())
}

pub fn eval_i2c<S: FeatureSource>(
    map: &LinearMap,
    projections: &ProjectionPair,
    features: &S,
    instances: &[Instance],
) -> Result<f64> {
    let projected = project_instances(instances, projections, features)?;
    Ok(accuracy_of(&predict_i2c(map, &projected)?, &projected))
}

pub fn eval_c2i<S: FeatureSource>(
    map: &LinearMap,
    projections: &ProjectionPair,
    features: &S,
    instances: &[Instance],
) -> Result<f64> {
    let projected = project_instances(instances, projections, features)?;
    Ok(accuracy_of(&predict_c2i(map, &projected)?, &projected))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BilinearConfig {
    fn default() -> Self {
        BilinearConfig {
            lr: 0.01,
            epochs: 20,
            seed: 0,
        }
    }
}

/// `f(i, c) = iᵀθc` over projected embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    pub dim_image: usize,
    pub dim_caption: usize,
    /// Row-major `dim_image × dim_caption`.
    pub theta: Vec<f64>,
    pub config: BilinearConfig,
}

impl BilinearModel {
    pub fn zeros(dim_image: usize, dim_caption: usize, config: BilinearConfig) -> Self {
        BilinearModel {
            dim_image,
            dim_caption,
            theta: vec![0.0; dim_image * dim_caption],
            config,
        }
    }

    pub fn compatibility(&self, image: &[f64], caption: &[f64]) -> f64 {
        let mut total = 0.0;
        for (r, &ir) in image.iter().enumerate() {
            if ir == 0.0 {
                continue;
            }
            let row = &self.theta[r * self.dim_caption..(r + 1) * self.dim_caption];
            total += ir * row.iter().zip(caption).map(|(t, c)| t * c).sum::<f64>();
        }
        total
    }

    pub fn predict(&self, p: &Projected) -> usize {
        argmax(p.candidates.iter().map(|c| self.compatibility(&p.image, c)))
    }

    /// Hinge term of one instance and the (worst offender) decoy index, or
    /// `None` if the instance has no decoys.
    pub fn hinge(&self, p: &Projected) -> Option<(f64, usize)> {
        let scores: Vec<f64> = p
            .candidates
            .iter()
            .map(|c| self.compatibility(&p.image, c))
            .collect();
        let offender = argmax(scores.iter().enumerate().map(|(j, &s)| {
            if j == p.target {
                f64::NEG_INFINITY
            } else {
                s
            }
        }));
        if offender == p.target {
            return None;
        }
        Some((scores[offender] - scores[p.target], offender))
    }

    /// Σ_i [max_{j≠j*} f(i,c_j) − f(i,c_j*)]_+
    pub fn loss(&self, projected: &[Projected]) -> f64 {
        projected
            .iter()
            .filter_map(|p| self.hinge(p))
            .map(|(m, _)| m.max(0.0))
            .sum()
    }

    /// Subgradient of one instance's hinge term. The hinge counts as active
    /// at a zero margin and ties among offenders go to the lowest index.
    pub fn subgradient(&self, p: &Projected) -> Option<Vec<f64>> {
        let (margin, offender) = self.hinge(p)?;
        if margin < 0.0 {
            return None;
        }
        let diff: Vec<f64> = p.candidates[offender]
            .iter()
            .zip(&p.candidates[p.target])
            .map(|(o, t)| o - t)
            .collect();
        let mut g = vec![0.0; self.theta.len()];
        for (r, &ir) in p.image.iter().enumerate() {
            for (c, &d) in diff.iter().enumerate() {
                g[r * self.dim_caption + c] = ir * d;
            }
        }
        Some(g)
    }

    fn step(&mut self, p: &Projected, lr: f64) {
        let Some((margin, offender)) = self.hinge(p) else {
            return;
        };
        if margin < 0.0 {
            return;
        }
        let (off, tgt) = (&p.candidates[offender], &p.candidates[p.target]);
        for (r, &ir) in p.image.iter().enumerate() {
            if ir == 0.0 {
                continue;
            }
            let row = &mut self.theta[r * self.dim_caption..(r + 1) * self.dim_caption];
            for ((t, o), c) in row.iter_mut().zip(off).zip(tgt) {
                *t -= lr * ir * (o - c);
            }
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, projection_seed: u64) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(BLIN_MAGIC)?;
        out.write_u16::<LittleEndian>(MODEL_VERSION)?;
        out.write_u64::<LittleEndian>(projection_seed)?;
        write_matrix(&mut out, self.dim_image, self.dim_caption, &self.theta)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let mut r = BufReader::new(File::open(path)?);
        expect_magic(&mut r, BLIN_MAGIC, "bilinear model")?;
        let seed = r.read_u64::<LittleEndian>()?;
        let (rows, cols, theta) = read_matrix(&mut r)?;
        Ok((
            BilinearModel {
                dim_image: rows,
                dim_caption: cols,
                theta,
                config: BilinearConfig::default(),
            },
            seed,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

/// Stochastic subgradient descent on the hinge loss from θ = 0, visiting
/// training instances in a seed-shuffled order each epoch. Returns the
/// epoch with the best dev accuracy (earliest on ties).
pub fn train_bilinear(
    train: &[Projected],
    dev: &[Projected],
    cfg: &BilinearConfig,
) -> Result<(BilinearModel, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let dim_image = train[0].image.len();
    let dim_caption = train[0].candidates[0].len();
    let mut model = BilinearModel::zeros(dim_image, dim_caption, cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, BilinearModel)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            model.step(&train[i], cfg.lr);
        }
        let dev_accuracy =
            eval_bilinear_projected(&model, if dev.is_empty() { train } else { dev });
        log.push(EpochLog {
            epoch,
            train_loss: model.loss(train),
            dev_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _)| dev_accuracy > *acc) {
            best = Some((dev_accuracy, model.clone()));
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}

pub fn eval_bilinear_projected(model: &BilinearModel, projected: &[Projected]) -> f64 {
    let preds: Vec<usize> = projected.par_iter().map(|p| model.predict(p)).collect();
    accuracy_of(&preds, projected)
}

pub fn eval_bilinear<S: FeatureSource>(
    model: &BilinearModel,
    projections: &ProjectionPair,
    features: &S,
    instances: &[Instance],
) -> Result<f64> {
    let projected = project_instances(instances, projections, features)?;
    Ok(eval_bilinear_projected(model, &projected))
}
