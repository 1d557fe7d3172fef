//! Surface similarity, the decoy Score, wmgs-rank and the λ grid search.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;

use crate::corpus::PairedCorpus;
use crate::error::{Error, Result};
use crate::pvembed::PVModel;
use crate::simsearch::{Exclude, SearchIndex, DEFAULT_TOP_N};
use crate::table::GridTable;

pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NR_DECOYS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    pub lambda: f64,
    /// Surface-similarity threshold `L`: pairs at or above it score 0.
    pub threshold: f64,
    /// Neighborhood size `N`.
    pub top_n: usize,
    pub nr_decoys: usize,
}

impl Default for ScoreParams {
    fn default() -> Self {
        ScoreParams {
            lambda: DEFAULT_LAMBDA,
            threshold: DEFAULT_THRESHOLD,
            top_n: DEFAULT_TOP_N,
            nr_decoys: DEFAULT_NR_DECOYS,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda {} not in [0,1]",
                self.lambda
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "threshold L {} not in (0,1]",
                self.threshold
            )));
        }
        if self.nr_decoys < 1 || self.top_n < self.nr_decoys {
            return Err(Error::invalid(format!(
                "need N >= nr_decoys >= 1 (N={}, nr_decoys={})",
                self.top_n, self.nr_decoys
            )));
        }
        Ok(())
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Unsmoothed BLEU of `candidate` against a single `reference`, with the
/// brevity penalty fixed to 1 and n-gram orders `1..=min(4, |candidate|)`.
pub fn bleu_surface<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let max_n = candidate.len().min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refs = ngram_counts(reference, n);
        let clipped: usize = cand
            .iter()
            .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        let total = candidate.len() - n + 1;
        log_sum += (clipped as f64 / total as f64).ln();
    }
    (log_sum / max_n as f64).exp()
}

/// The Score blend: 0 when the surface similarity reaches the threshold,
/// otherwise `λ·sim_pv + (1-λ)·sim_surf`.
pub fn combine(lambda: f64, threshold: f64, sim_pv: f64, sim_surf: f64) -> f64 {
    if sim_surf >= threshold {
        0.0
    } else {
        lambda * sim_pv + (1.0 - lambda) * sim_surf
    }
}

/// Scores candidate/ground-truth caption pairs of one corpus.
pub struct Scorer<'a> {
    index: SearchIndex<'a>,
    corpus: &'a PairedCorpus,
}

impl<'a> Scorer<'a> {
    pub fn new(pv: &'a PVModel, corpus: &'a PairedCorpus) -> Result<Self> {
        Ok(Scorer {
            index: SearchIndex::new(pv, corpus)?,
            corpus,
        })
    }

    pub fn index(&self) -> &SearchIndex<'a> {
        &self.index
    }

    /// BLEU of the candidate's surface words against the ground truth's.
    pub fn surface(&self, candidate: usize, groundtruth: usize) -> f64 {
        bleu_surface(self.corpus.words(candidate), self.corpus.words(groundtruth))
    }

    pub fn score(&self, lambda: f64, threshold: f64, candidate: usize, groundtruth: usize) -> f64 {
        combine(
            lambda,
            threshold,
            self.index.similarity(candidate, groundtruth),
            self.surface(candidate, groundtruth),
        )
    }
}

fn position(corpus: &PairedCorpus, id: &str) -> Result<usize> {
    corpus
        .caption_position(id)
        .ok_or_else(|| Error::UnknownCaption(id.to_owned()))
}

/// Score of `candidate_id` as a decoy for `groundtruth_id`.
pub fn score(
    pv: &PVModel,
    corpus: &PairedCorpus,
    params: &ScoreParams,
    candidate_id: &str,
    groundtruth_id: &str,
) -> Result<f64> {
    let cand = position(corpus, candidate_id)?;
    let gt = position(corpus, groundtruth_id)?;
    for id in [candidate_id, groundtruth_id] {
        if pv.row_of(id).is_none() {
            return Err(Error::UnknownCaption(id.to_owned()));
        }
    }
    let sim_pv = crate::simsearch::cosine(
        pv.vector(candidate_id).expect("checked"),
        pv.vector(groundtruth_id).expect("checked"),
    )?;
    let sim_surf = bleu_surface(corpus.words(cand), corpus.words(gt));
    Ok(combine(params.lambda, params.threshold, sim_pv, sim_surf))
}

/// One caption's cosine neighborhood with the λ-independent parts of the
/// Score cached.
struct Neighborhood {
    /// (position, cosine, bleu)
    entries: Vec<(usize, f64, f64)>,
    siblings: Vec<usize>,
}

fn neighborhoods(
    scorer: &Scorer<'_>,
    corpus: &PairedCorpus,
    n: usize,
) -> Result<Vec<Neighborhood>> {
    for (i, im) in corpus.images().iter().enumerate() {
        let count = corpus.captions_of(i).len();
        if count < 2 {
            return Err(Error::TooFewSiblings {
                image_id: im.image_id.clone(),
                count,
            });
        }
    }
    Ok((0..corpus.captions().len())
        .into_par_iter()
        .map(|q| {
            let entries = scorer
                .index
                .top_n_positions(q, n, Exclude::QueryOnly)
                .into_iter()
                .map(|(pos, cos)| (pos, cos, scorer.surface(pos, q)))
                .collect();
            let siblings = corpus
                .captions_of(corpus.image_of(q))
                .iter()
                .copied()
                .filter(|&s| s != q)
                .collect();
            Neighborhood { entries, siblings }
        })
        .collect())
}

fn contribution(
    hood: &Neighborhood,
    corpus: &PairedCorpus,
    lambda: f64,
    threshold: f64,
    n: usize,
) -> f64 {
    let captions = corpus.captions();
    let mut ranked: Vec<(f64, usize)> = hood
        .entries
        .iter()
        .map(|&(pos, cos, surf)| (combine(lambda, threshold, cos, surf), pos))
        .collect();
    ranked.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| captions[a.1].caption_id.cmp(&captions[b.1].caption_id))
    });
    let total: usize = hood
        .siblings
        .iter()
        .map(|s| {
            ranked
                .iter()
                .position(|(_, p)| p == s)
                .map_or(n + 1, |i| i + 1)
        })
        .sum();
    total as f64 / hood.siblings.len() as f64
}

/// Per-caption wmgs contributions (corpus order): the mean position of the
/// caption's siblings after re-ranking its top-N cosine neighborhood by
/// descending Score. Siblings outside the neighborhood count as N+1.
pub fn wmgs_contributions(
    pv: &PVModel,
    params: &ScoreParams,
    corpus: &PairedCorpus,
) -> Result<Vec<f64>> {
    if params.top_n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    let scorer = Scorer::new(pv, corpus)?;
    let hoods = neighborhoods(&scorer, corpus, params.top_n)?;
    Ok(hoods
        .par_iter()
        .map(|h| contribution(h, corpus, params.lambda, params.threshold, params.top_n))
        .collect())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn wmgs_rank(pv: &PVModel, params: &ScoreParams, corpus: &PairedCorpus) -> Result<f64> {
    Ok(mean(&wmgs_contributions(pv, params, corpus)?))
}

#[derive(Debug, Clone)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub table: Vec<(f64, f64)>,
}

impl LambdaSearch {
    pub fn grid_table(&self) -> GridTable {
        GridTable {
            param: "lambda".into(),
            rows: self
                .table
                .iter()
                .map(|(l, r)| (l.to_string(), *r))
                .collect(),
        }
    }
}

/// Grid search for the λ minimizing wmgs-rank; ties go to the smallest λ.
pub fn optimize_lambda(
    pv: &PVModel,
    corpus: &PairedCorpus,
    lambda_grid: &[f64],
    threshold: f64,
    n: usize,
) -> Result<LambdaSearch> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("lambda grid must be non-empty"));
    }
    for &l in lambda_grid {
        ScoreParams {
            lambda: l,
            threshold,
            top_n: n,
            nr_decoys: 1,
        }
        .validate()?;
    }
    let scorer = Scorer::new(pv, corpus)?;
    let hoods = neighborhoods(&scorer, corpus, n)?;
    let mut table = Vec::with_capacity(lambda_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in lambda_grid {
        let contributions: Vec<f64> = hoods
            .par_iter()
            .map(|h| contribution(h, corpus, lambda, threshold, n))
            .collect();
        let rank = mean(&contributions);
        table.push((lambda, rank));
        let better = match best {
            None => true,
            Some((bl, br)) => rank < br || (rank == br && lambda < bl),
        };
        if better {
            best = Some((lambda, rank));
        }
    }
    Ok(LambdaSearch {
        lambda: best.expect("non-empty grid").0,
        table,
    })
}
