//! Exact top-N cosine neighborhoods over caption embeddings.
//!
//! Vectors are stored as `f32`; dot products accumulate in `f64`. The
//! neighborhood order is descending similarity with ties broken by ascending
//! caption id, and similarities are compared by exact equality of the `f64`
//! result.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::corpus::PairedCorpus;
use crate::error::{Error, Result};
use crate::pvembed::PVModel;

/// Default neighborhood size.
pub const DEFAULT_TOP_N: usize = 500;

/// `f64` dot product of two `f32` vectors. Uses four independent
/// accumulators combined in a fixed order, so the result is reproducible.
#[inline]
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut acc = [0f64; 4];
    let (uc, ur) = u.split_at(u.len() - u.len() % 4);
    let (vc, vr) = v.split_at(uc.len());
    for (a, b) in uc.chunks_exact(4).zip(vc.chunks_exact(4)) {
        acc[0] += a[0] as f64 * b[0] as f64;
        acc[1] += a[1] as f64 * b[1] as f64;
        acc[2] += a[2] as f64 * b[2] as f64;
        acc[3] += a[3] as f64 * b[3] as f64;
    }
    let mut tail = 0f64;
    for (a, b) in ur.iter().zip(vr) {
        tail += *a as f64 * *b as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(u: &[f32]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(dot(u, v) / (nu * nv))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub caption_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query: String,
    pub n: usize,
    pub entries: Vec<Neighbor>,
}

/// Which captions besides the query itself are excluded from a neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclude {
    /// Captions of the query's image (decoy mining).
    SameImage,
    /// Only the query caption (sibling ranking).
    QueryOnly,
}

/// Precomputed rows and norms for a corpus/model pair. Rows follow corpus
/// caption order.
pub struct SearchIndex<'a> {
    corpus: &'a PairedCorpus,
    rows: Vec<&'a [f32]>,
    norms: Vec<f64>,
}

#[derive(Clone, Copy)]
struct HeapEntry<'a> {
    sim: f64,
    id: &'a str,
    pos: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    // Greater = worse: lower similarity, or equal similarity and larger id.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .sim
            .total_cmp(&self.sim)
            .then_with(|| self.id.cmp(other.id))
    }
}

impl<'a> SearchIndex<'a> {
    pub fn new(model: &'a PVModel, corpus: &'a PairedCorpus) -> Result<Self> {
        let mut rows = Vec::with_capacity(corpus.captions().len());
        let mut norms = Vec::with_capacity(corpus.captions().len());
        for cap in corpus.captions() {
            let row = model
                .vector(&cap.caption_id)
                .ok_or_else(|| Error::UnknownCaption(cap.caption_id.clone()))?;
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            rows.push(row);
            norms.push(n);
        }
        Ok(SearchIndex {
            corpus,
            rows,
            norms,
        })
    }

    pub fn corpus(&self) -> &'a PairedCorpus {
        self.corpus
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Cosine similarity between the captions at two corpus positions;
    /// bit-identical to [`cosine`] on the same vectors.
    #[inline]
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        dot(self.rows[a], self.rows[b]) / (self.norms[a] * self.norms[b])
    }

    fn position(&self, caption_id: &str) -> Result<usize> {
        self.corpus
            .caption_position(caption_id)
            .ok_or_else(|| Error::UnknownCaption(caption_id.to_owned()))
    }

    /// The `n` best (position, similarity) pairs for the caption at `query`,
    /// best first.
    pub fn top_n_positions(&self, query: usize, n: usize, exclude: Exclude) -> Vec<(usize, f64)> {
        let captions = self.corpus.captions();
        let query_image = self.corpus.image_of(query);
        let mut heap: BinaryHeap<HeapEntry<'_>> = BinaryHeap::with_capacity(n + 1);
        if n == 0 {
            return Vec::new();
        }
        let q = self.rows[query];
        let qn = self.norms[query];
        for pos in 0..self.rows.len() {
            if pos == query
                || (exclude == Exclude::SameImage && self.corpus.image_of(pos) == query_image)
            {
                continue;
            }
            let sim = dot(q, self.rows[pos]) / (qn * self.norms[pos]);
            let entry = HeapEntry {
                sim,
                id: &captions[pos].caption_id,
                pos,
            };
            if heap.len() < n {
                heap.push(entry);
            } else if let Some(worst) = heap.peek() {
                if entry < *worst {
                    heap.pop();
                    heap.push(entry);
                }
            }
        }
        heap.into_sorted_vec()
            .into_iter()
            .map(|e| (e.pos, e.sim))
            .collect()
    }

    pub fn top_n(&self, query_id: &str, n: usize) -> Result<NeighborList> {
        if n == 0 {
            return Err(Error::invalid("N must be >= 1"));
        }
        let query = self.position(query_id)?;
        let captions = self.corpus.captions();
        let entries = self
            .top_n_positions(query, n, Exclude::SameImage)
            .into_iter()
            .map(|(pos, similarity)| Neighbor {
                caption_id: captions[pos].caption_id.clone(),
                similarity,
            })
            .collect();
        Ok(NeighborList {
            query: query_id.to_owned(),
            n,
            entries,
        })
    }
}

/// The `n` most cosine-similar captions to `query_id` among captions of
/// other images.
pub fn top_n(
    model: &PVModel,
    corpus: &PairedCorpus,
    query_id: &str,
    n: usize,
) -> Result<NeighborList> {
    SearchIndex::new(model, corpus)?.top_n(query_id, n)
}

/// [`top_n`] for many queries on a pool of `threads` workers. The result
/// is element-wise identical to sequential calls.
pub fn batch_top_n<S: AsRef<str> + Sync>(
    model: &PVModel,
    corpus: &PairedCorpus,
    queries: &[S],
    n: usize,
    threads: usize,
) -> Result<Vec<NeighborList>> {
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let index = SearchIndex::new(model, corpus)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        queries
            .par_iter()
            .map(|q| index.top_n(q.as_ref(), n))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .collect()
}
