//! Comprehension accuracy and caption-generation metrics (ROUGE-L, CIDEr-D).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::Instance;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

/// Fraction of instances whose predicted candidate index is the target.
pub fn accuracy(predictions: &[usize], instances: &[Instance]) -> Result<f64> {
    if predictions.len() != instances.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    if instances.is_empty() {
        return Err(Error::invalid("accuracy over an empty instance set"));
    }
    let correct = predictions
        .iter()
        .zip(instances)
        .filter(|(&p, inst)| inst.target_index() == Some(p))
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1.2) of `hypothesis` against each reference; the
/// best reference wins. An empty hypothesis scores 0.
pub fn rouge_l<T: PartialEq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            let lcs = lcs_len(hypothesis, r);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / hypothesis.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

/// Reference captions per image.
pub type ReferenceSet = BTreeMap<String, Vec<Vec<String>>>;

/// Mean over images of [`rouge_l`].
pub fn corpus_rouge_l(hypotheses: &[(String, Vec<String>)], refs: &ReferenceSet) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("no hypotheses"));
    }
    let mut scores: Vec<(&str, f64)> = hypotheses
        .iter()
        .map(|(img, hyp)| {
            let r = refs
                .get(img)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| Error::invalid(format!("no references for image '{img}'")))?;
            Ok((img.as_str(), rouge_l(hyp, r)))
        })
        .collect::<Result<_>>()?;
    scores.sort_by(|a, b| a.0.cmp(b.0));
    Ok(scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64)
}

type NgramCounts<'a> = BTreeMap<&'a [String], f64>;

fn ngrams(tokens: &[String]) -> NgramCounts<'_> {
    let mut counts = BTreeMap::new();
    for n in 1..=CIDER_MAX_N {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0.0) += 1.0;
        }
    }
    counts
}

struct TfIdf<'a> {
    /// One map per n-gram order.
    vec: Vec<BTreeMap<&'a [String], f64>>,
    norm: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], f64>, log_n: f64) -> TfIdf<'a> {
    let mut vec = vec![BTreeMap::new(); CIDER_MAX_N];
    let mut norm = vec![0.0; CIDER_MAX_N];
    for (gram, tf) in ngrams(tokens) {
        let d = df.get(gram).copied().unwrap_or(0.0).max(1.0).ln();
        let v = tf * (log_n - d);
        let order = gram.len() - 1;
        vec[order].insert(gram, v);
        norm[order] += v * v;
    }
    TfIdf {
        vec,
        norm: norm.into_iter().map(f64::sqrt).collect(),
        len: tokens.len(),
    }
}

fn cider_sim(hyp: &TfIdf<'_>, reference: &TfIdf<'_>) -> [f64; CIDER_MAX_N] {
    let delta = hyp.len as f64 - reference.len as f64;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut val = [0.0; CIDER_MAX_N];
    for n in 0..CIDER_MAX_N {
        for (gram, &h) in &hyp.vec[n] {
            if let Some(&r) = reference.vec[n].get(gram) {
                val[n] += h.min(r) * r;
            }
        }
        if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
            val[n] /= hyp.norm[n] * reference.norm[n];
        }
        val[n] *= penalty;
    }
    val
}

/// Corpus CIDEr-D: per image, TF-IDF n-gram (n = 1..4) similarity clipped
/// against each reference with a Gaussian length penalty, averaged over
/// references and orders and scaled by 10; then averaged over images.
/// Document frequencies come from the references of the evaluated images.
pub fn cider(hypotheses: &[(String, Vec<String>)], refs: &ReferenceSet) -> Result<f64> {
    let mut items: Vec<(&str, &[String], &[Vec<String>])> = hypotheses
        .iter()
        .map(|(img, hyp)| {
            let r = refs
                .get(img)
                .filter(|r| !r.is_empty())
                .ok_or_else(|| Error::invalid(format!("no references for image '{img}'")))?;
            Ok((img.as_str(), hyp.as_slice(), r.as_slice()))
        })
        .collect::<Result<_>>()?;
    items.sort_by(|a, b| a.0.cmp(b.0));
    items.dedup_by(|a, b| a.0 == b.0);
    if items.len() < 2 {
        return Err(Error::invalid("CIDEr needs at least two images"));
    }

    let mut df: HashMap<&[String], f64> = HashMap::new();
    for (_, _, image_refs) in &items {
        let grams: HashSet<&[String]> = image_refs
            .iter()
            .flat_map(|r| ngrams(r).into_keys())
            .collect();
        for g in grams {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (items.len() as f64).ln();

    let total: f64 = items
        .iter()
        .map(|(_, hyp, image_refs)| {
            let h = tfidf(hyp, &df, log_n);
            let mut sum = [0.0; CIDER_MAX_N];
            for r in *image_refs {
                let sim = cider_sim(&h, &tfidf(r, &df, log_n));
                for n in 0..CIDER_MAX_N {
                    sum[n] += sim[n];
                }
            }
            let mean_over_n = sum.iter().sum::<f64>() / CIDER_MAX_N as f64;
            mean_over_n / image_refs.len() as f64 * 10.0
        })
        .sum();
    Ok(total / items.len() as f64)
}

/// One row of an evaluation report (`metric,split,value`).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub value: f64,
}

pub fn report_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,split,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.metric, r.split, r.value);
    }
    out
}

pub fn write_report(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, report_csv(rows))?;
    Ok(())
}
