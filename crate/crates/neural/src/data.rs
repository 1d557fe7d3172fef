//! Conversion from MC-IC instances to token-id examples.

use std::collections::BTreeSet;

use dmc_core::corpus::{tokenize, PairedCorpus};
use dmc_core::dataset::{Instance, Split};
use dmc_core::metrics::ReferenceSet;
use dmc_core::{Error, Result};
use num_traits::Float;

use crate::tensor::cast;

/// One instance with its candidates encoded against the corpus vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub instance_id: String,
    pub image_id: String,
    /// Index into [`ItemSet::images`].
    pub image: usize,
    pub candidates: Vec<Vec<u32>>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemSet<F> {
    pub images: Vec<Vec<F>>,
    pub image_ids: Vec<String>,
    pub items: Vec<Item>,
}

/// A single ⟨image, candidate caption⟩ binary example.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a, F> {
    pub image: &'a [F],
    pub tokens: &'a [u32],
    pub label: bool,
}

impl<F: Float> ItemSet<F> {
    /// Encodes `instances` (all of them, whatever their split). Candidate
    /// text is tokenized and mapped through the corpus vocabulary.
    pub fn from_instances<'a, I>(instances: I, corpus: &PairedCorpus) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Instance>,
    {
        let mut set = ItemSet {
            images: Vec::new(),
            image_ids: Vec::new(),
            items: Vec::new(),
        };
        let mut image_slot = std::collections::HashMap::new();
        for inst in instances {
            let target = inst.target_index().ok_or_else(|| Error::InvalidInstance {
                instance_id: inst.instance_id.clone(),
                reason: "no target".into(),
            })?;
            let image = match image_slot.get(&inst.image_id) {
                Some(&i) => i,
                None => {
                    let rec = corpus.image(&inst.image_id).ok_or_else(|| {
                        Error::invalid(format!("image '{}' is not in the corpus", inst.image_id))
                    })?;
                    set.images
                        .push(rec.embedding.iter().map(|&v| cast(v as f64)).collect());
                    set.image_ids.push(inst.image_id.clone());
                    image_slot.insert(inst.image_id.clone(), set.images.len() - 1);
                    set.images.len() - 1
                }
            };
            let candidates = inst
                .candidates
                .iter()
                .map(|c| {
                    let tokens = corpus.vocab().encode(&tokenize(&c.text));
                    if tokens.is_empty() {
                        return Err(Error::InvalidInstance {
                            instance_id: inst.instance_id.clone(),
                            reason: format!("candidate '{}' has no tokens", c.caption_id),
                        });
                    }
                    Ok(tokens)
                })
                .collect::<Result<_>>()?;
            set.items.push(Item {
                instance_id: inst.instance_id.clone(),
                image_id: inst.image_id.clone(),
                image,
                candidates,
                target,
            });
        }
        Ok(set)
    }

    pub fn from_split(instances: &[Instance], split: Split, corpus: &PairedCorpus) -> Result<Self> {
        Self::from_instances(instances.iter().filter(|i| i.split == split), corpus)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pair(&self, item: usize, candidate: usize) -> Pair<'_, F> {
        let it = &self.items[item];
        Pair {
            image: &self.images[it.image],
            tokens: &it.candidates[candidate],
            label: candidate == it.target,
        }
    }

    /// (item, candidate) index of every pair, in item order.
    pub fn pair_indices(&self) -> Vec<(usize, usize)> {
        self.items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| (0..it.candidates.len()).map(move |c| (i, c)))
            .collect()
    }

    pub fn pairs(&self) -> Vec<Pair<'_, F>> {
        self.pair_indices()
            .into_iter()
            .map(|(i, c)| self.pair(i, c))
            .collect()
    }
}

/// All corpus captions (surface words) of the given images.
pub fn references_for<'a>(
    corpus: &PairedCorpus,
    image_ids: impl IntoIterator<Item = &'a String>,
) -> Result<ReferenceSet> {
    let mut refs = ReferenceSet::new();
    for id in image_ids.into_iter().collect::<BTreeSet<_>>() {
        let pos = corpus
            .image_position(id)
            .ok_or_else(|| Error::invalid(format!("image '{id}' is not in the corpus")))?;
        let caps = corpus
            .captions_of(pos)
            .iter()
            .map(|&c| corpus.words(c).to_vec())
            .collect();
        refs.insert(id.clone(), caps);
    }
    Ok(refs)
}
