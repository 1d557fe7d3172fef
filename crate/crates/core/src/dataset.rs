//! Multiple-choice instance generation (one target plus mined decoys per
//! ground-truth caption), image-disjoint splits and the JSON-lines format.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PairedCorpus;
use crate::error::{Error, Result};
use crate::pvembed::PVModel;
use crate::scoring::{ScoreParams, Scorer};
use crate::simsearch::Exclude;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub caption_id: String,
    pub text: String,
    pub label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoy_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// One image with its candidate captions, exactly one of which is the
/// target. Decoys come first in descending score order; the target is last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub image_id: String,
    pub split: Split,
    pub candidates: Vec<Candidate>,
}

impl Instance {
    pub fn target_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.label)
    }

    pub fn target(&self) -> Option<&Candidate> {
        self.target_index().map(|i| &self.candidates[i])
    }

    /// Checks the structural invariants that do not need the corpus.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::InvalidInstance {
                instance_id: self.instance_id.clone(),
                reason,
            })
        };
        let trues = self.candidates.iter().filter(|c| c.label).count();
        if trues != 1 {
            return fail(format!("expected exactly one true label, found {trues}"));
        }
        let mut seen = HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.caption_id.as_str()) {
                return fail(format!("caption '{}' appears twice", c.caption_id));
            }
            match (c.label, c.decoy_score) {
                (true, Some(_)) => return fail("target carries a decoy score".into()),
                (false, None) => return fail(format!("decoy '{}' has no score", c.caption_id)),
                (false, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                    return fail(format!(
                        "decoy '{}' has non-positive score {s}",
                        c.caption_id
                    ))
                }
                _ => {}
            }
        }
        let decoys: Vec<&Candidate> = self.candidates.iter().filter(|c| !c.label).collect();
        for pair in decoys.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (sa, sb) = (a.decoy_score.unwrap(), b.decoy_score.unwrap());
            if sa < sb || (sa == sb && a.caption_id > b.caption_id) {
                return fail("decoys are not in descending score order".into());
            }
        }
        Ok(())
    }

    /// Corpus-dependent invariants: candidates resolve and no decoy belongs
    /// to the instance's image.
    pub fn validate_against(&self, corpus: &PairedCorpus) -> Result<()> {
        self.validate()?;
        for c in &self.candidates {
            let rec = corpus
                .caption(&c.caption_id)
                .ok_or_else(|| Error::UnknownCaption(c.caption_id.clone()))?;
            if c.label != (rec.image_id == self.image_id) {
                return Err(Error::InvalidInstance {
                    instance_id: self.instance_id.clone(),
                    reason: format!(
                        "candidate '{}' image does not match its label",
                        c.caption_id
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Decoys for the caption at `target`: neighbors from other images with a
/// positive Score, best first, or `None` when fewer than `nr_decoys` survive.
fn mine_decoys(
    scorer: &Scorer<'_>,
    params: &ScoreParams,
    target: usize,
) -> Option<Vec<(usize, f64)>> {
    let captions = scorer.index().corpus().captions();
    let mut accepted: Vec<(usize, f64)> = scorer
        .index()
        .top_n_positions(target, params.top_n, Exclude::SameImage)
        .into_iter()
        .map(|(pos, _)| {
            (
                pos,
                scorer.score(params.lambda, params.threshold, pos, target),
            )
        })
        .filter(|&(_, s)| s > 0.0)
        .collect();
    if accepted.len() < params.nr_decoys {
        return None;
    }
    accepted.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| captions[a.0].caption_id.cmp(&captions[b.0].caption_id))
    });
    accepted.truncate(params.nr_decoys);
    Some(accepted)
}

/// Builds one instance per ground-truth caption that has at least
/// `nr_decoys` positively scored decoys. Output is sorted by image id, then
/// target caption id; all instances are tagged `train` until split.
pub fn generate_mcic(
    corpus: &PairedCorpus,
    pv: &PVModel,
    params: &ScoreParams,
) -> Result<Vec<Instance>> {
    params.validate()?;
    let scorer = Scorer::new(pv, corpus)?;
    let captions = corpus.captions();
    let mut instances: Vec<Instance> = (0..captions.len())
        .into_par_iter()
        .filter_map(|t| {
            let decoys = mine_decoys(&scorer, params, t)?;
            let target = &captions[t];
            let mut candidates: Vec<Candidate> = decoys
                .into_iter()
                .map(|(pos, s)| Candidate {
                    caption_id: captions[pos].caption_id.clone(),
                    text: captions[pos].raw_text.clone(),
                    label: false,
                    decoy_score: Some(s),
                })
                .collect();
            candidates.push(Candidate {
                caption_id: target.caption_id.clone(),
                text: target.raw_text.clone(),
                label: true,
                decoy_score: None,
            });
            Some(Instance {
                instance_id: target.caption_id.clone(),
                image_id: target.image_id.clone(),
                split: Split::Train,
                candidates,
            })
        })
        .collect();
    instances.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| a.instance_id.cmp(&b.instance_id))
    });
    Ok(instances)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub dev_images: usize,
    pub test_images: usize,
    pub seed: u64,
}

/// Tags instances by image: images are shuffled by seed, the first
/// `dev_images` go to dev, the next `test_images` to test, the rest to train.
pub fn split_dataset(mut instances: Vec<Instance>, spec: &SplitSpec) -> Result<Vec<Instance>> {
    let images: BTreeSet<&str> = instances.iter().map(|i| i.image_id.as_str()).collect();
    if spec.dev_images + spec.test_images >= images.len() {
        return Err(Error::invalid(format!(
            "dev ({}) + test ({}) images must be fewer than the {} images available",
            spec.dev_images,
            spec.test_images,
            images.len()
        )));
    }
    let mut order: Vec<String> = images.into_iter().map(str::to_owned).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let tags: HashMap<String, Split> = order
        .into_iter()
        .enumerate()
        .map(|(i, img)| {
            let split = if i < spec.dev_images {
                Split::Dev
            } else if i < spec.dev_images + spec.test_images {
                Split::Test
            } else {
                Split::Train
            };
            (img, split)
        })
        .collect();
    for inst in &mut instances {
        inst.split = tags[&inst.image_id];
    }
    Ok(instances)
}

pub fn write_dataset(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in instances {
        inst.validate()?;
        serde_json::to_writer(&mut out, inst).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_owned(),
            record: lineno as u64 + 1,
            reason: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}
