//! Rater assignment state, rebuilt by replaying the event log.

use std::collections::{BTreeMap, HashMap};

use dmc_core::dataset::Instance;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::log::LogEvent;
use crate::report::RESPONSES_PER_INSTANCE;

pub const RATER_CAP: usize = 6;
pub const DEFAULT_IDLE_TIMEOUT_MS: u64 = 30 * 60 * 1000;

pub const TRAINING_INSTRUCTION: &str =
    "Choose the caption that best describes the image. In these examples the correct caption is marked.";

/// Seed of the candidate shuffle shown to `rater_id` for `instance_id`.
pub fn permutation_seed(instance_id: &str, rater_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(instance_id.as_bytes());
    h.update([0u8]);
    h.update(rater_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// `perm[presented] = canonical`.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

pub fn token_of(seed: u64) -> String {
    format!("{seed:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub instance_id: String,
    pub image_url: String,
    pub candidates: Vec<CandidateView>,
    pub permutation_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub instance_id: String,
    pub image_url: String,
    pub candidates: Vec<CandidateView>,
    pub ground_truth_index: usize,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("rater '{rater_id}' already answered instance '{instance_id}'")]
    Duplicate {
        rater_id: String,
        instance_id: String,
    },
    #[error("instance '{0}' already has all its responses")]
    InstanceFull(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Served {
    seed: u64,
    at_ms: u64,
    answered: bool,
}

/// The instances being rated plus their image URLs.
#[derive(Debug, Clone)]
pub struct Pool {
    instances: Vec<Instance>,
    index: HashMap<String, usize>,
    urls: HashMap<String, String>,
}

impl Pool {
    /// Instances are kept in instance-id order.
    pub fn new(
        mut instances: Vec<Instance>,
        urls: HashMap<String, String>,
    ) -> Result<Self, String> {
        instances.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let mut index = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            if inst.target_index().is_none() {
                return Err(format!("instance '{}' has no target", inst.instance_id));
            }
            if !urls.contains_key(&inst.image_id) {
                return Err(format!(
                    "image '{}' is missing from the image manifest",
                    inst.image_id
                ));
            }
            if index.insert(inst.instance_id.clone(), i).is_some() {
                return Err(format!("duplicate instance id '{}'", inst.instance_id));
            }
        }
        Ok(Pool {
            instances,
            index,
            urls,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance(&self, id: &str) -> Option<&Instance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    fn view(&self, inst: &Instance, seed: u64) -> (Vec<usize>, AssignmentView) {
        let perm = permutation(seed, inst.candidates.len());
        let candidates = perm
            .iter()
            .enumerate()
            .map(|(index, &c)| CandidateView {
                index,
                text: inst.candidates[c].text.clone(),
            })
            .collect();
        let view = AssignmentView {
            instance_id: inst.instance_id.clone(),
            image_url: self.urls[&inst.image_id].clone(),
            candidates,
            permutation_token: token_of(seed),
        };
        (perm, view)
    }

    /// The view a rater gets for `instance_id`.
    pub fn presented(&self, instance_id: &str, rater_id: &str) -> Option<AssignmentView> {
        let inst = self.instance(instance_id)?;
        Some(self.view(inst, permutation_seed(instance_id, rater_id)).1)
    }

    /// Shuffled examples with the ground truth revealed.
    pub fn training_examples(&self, limit: usize) -> Vec<TrainingExample> {
        self.instances
            .iter()
            .take(limit)
            .map(|inst| {
                let (perm, view) = self.view(inst, permutation_seed(&inst.instance_id, "training"));
                let target = inst.target_index().expect("checked in new");
                TrainingExample {
                    instance_id: view.instance_id,
                    image_url: view.image_url,
                    candidates: view.candidates,
                    ground_truth_index: perm
                        .iter()
                        .position(|&c| c == target)
                        .expect("permutation"),
                    instruction: TRAINING_INSTRUCTION.to_owned(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentState {
    responses: Vec<usize>,
    raters: HashMap<String, BTreeMap<usize, Served>>,
    idle_timeout_ms: u64,
    rater_cap: usize,
}

impl AssignmentState {
    pub fn new(pool: &Pool, idle_timeout_ms: u64) -> Self {
        AssignmentState {
            responses: vec![0; pool.len()],
            raters: HashMap::new(),
            idle_timeout_ms,
            rater_cap: RATER_CAP,
        }
    }

    /// Rebuilds state from a log, checking each event against the rules.
    pub fn replay(pool: &Pool, idle_timeout_ms: u64, log: &[LogEvent]) -> Result<Self, String> {
        let mut s = Self::new(pool, idle_timeout_ms);
        for (i, ev) in log.iter().enumerate() {
            s.apply(pool, ev)
                .map_err(|e| format!("log event {}: {e}", i + 1))?;
        }
        Ok(s)
    }

    pub fn responses_for(&self, pool: &Pool, instance_id: &str) -> Option<usize> {
        pool.index.get(instance_id).map(|&i| self.responses[i])
    }

    pub fn served_count(&self, rater_id: &str) -> usize {
        self.raters.get(rater_id).map_or(0, BTreeMap::len)
    }

    pub fn served_to(&self, pool: &Pool, rater_id: &str) -> Vec<String> {
        self.raters
            .get(rater_id)
            .map(|m| {
                m.keys()
                    .map(|&i| pool.instances[i].instance_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Unanswered assignments younger than the idle timeout, per instance.
    fn reservations(&self, now_ms: u64) -> Vec<usize> {
        let mut r = vec![0; self.responses.len()];
        for served in self.raters.values() {
            for (&i, s) in served {
                if !s.answered && now_ms.saturating_sub(s.at_ms) < self.idle_timeout_ms {
                    r[i] += 1;
                }
            }
        }
        r
    }

    /// Decides what to serve `rater_id` without changing state. Returns the
    /// event to log when a new instance is assigned, and the view.
    pub fn plan_assignment(
        &self,
        pool: &Pool,
        rater_id: &str,
        now_ms: u64,
    ) -> Option<(Option<LogEvent>, AssignmentView)> {
        let served = self.raters.get(rater_id);
        // A reload gets the open assignment back in the same order.
        if let Some((&i, s)) = served.and_then(|m| {
            m.iter()
                .find(|(&i, s)| !s.answered && self.responses[i] < RESPONSES_PER_INSTANCE)
        }) {
            return Some((None, pool.view(&pool.instances[i], s.seed).1));
        }
        if served.map_or(0, BTreeMap::len) >= self.rater_cap {
            return None;
        }
        let reserved = self.reservations(now_ms);
        let pick = (0..pool.len())
            .filter(|&i| served.is_none_or(|m| !m.contains_key(&i)))
            .filter(|&i| self.responses[i] + reserved[i] < RESPONSES_PER_INSTANCE)
            .min_by_key(|&i| {
                (
                    self.responses[i] + reserved[i],
                    &pool.instances[i].instance_id,
                )
            })?;
        let inst = &pool.instances[pick];
        let seed = permutation_seed(&inst.instance_id, rater_id);
        let ev = LogEvent::Assign {
            rater_id: rater_id.to_owned(),
            instance_id: inst.instance_id.clone(),
            permutation_seed: seed,
            at_ms: now_ms,
        };
        Some((Some(ev), pool.view(inst, seed).1))
    }

    /// Validates a submission and returns the response event to log.
    pub fn plan_response(
        &self,
        pool: &Pool,
        rater_id: &str,
        instance_id: &str,
        chosen_index: usize,
        permutation_token: &str,
        now_ms: u64,
    ) -> Result<LogEvent, SubmitError> {
        let &i = pool
            .index
            .get(instance_id)
            .ok_or_else(|| SubmitError::Invalid(format!("unknown instance '{instance_id}'")))?;
        let served = self
            .raters
            .get(rater_id)
            .and_then(|m| m.get(&i))
            .ok_or_else(|| {
                SubmitError::Invalid(format!(
                    "no assignment of '{instance_id}' to rater '{rater_id}'"
                ))
            })?;
        if served.answered {
            return Err(SubmitError::Duplicate {
                rater_id: rater_id.to_owned(),
                instance_id: instance_id.to_owned(),
            });
        }
        if permutation_token != token_of(served.seed) {
            return Err(SubmitError::Invalid(
                "permutation token does not match the assignment".into(),
            ));
        }
        let inst = &pool.instances[i];
        if chosen_index >= inst.candidates.len() {
            return Err(SubmitError::Invalid(format!(
                "chosen index {chosen_index} out of range for {} candidates",
                inst.candidates.len()
            )));
        }
        if self.responses[i] >= RESPONSES_PER_INSTANCE {
            return Err(SubmitError::InstanceFull(instance_id.to_owned()));
        }
        let canonical = permutation(served.seed, inst.candidates.len())[chosen_index];
        Ok(LogEvent::Response {
            rater_id: rater_id.to_owned(),
            instance_id: instance_id.to_owned(),
            chosen_index,
            canonical_index: canonical,
            permutation_seed: served.seed,
            correct: Some(canonical) == inst.target_index(),
            at_ms: now_ms,
        })
    }

    pub fn apply(&mut self, pool: &Pool, ev: &LogEvent) -> Result<(), String> {
        let &i = pool
            .index
            .get(ev.instance_id())
            .ok_or_else(|| format!("unknown instance '{}'", ev.instance_id()))?;
        match ev {
            LogEvent::Assign {
                rater_id,
                permutation_seed,
                at_ms,
                ..
            } => {
                let m = self.raters.entry(rater_id.clone()).or_default();
                if m.contains_key(&i) {
                    return Err(format!("instance served twice to '{rater_id}'"));
                }
                if m.len() >= self.rater_cap {
                    return Err(format!("rater '{rater_id}' over the cap"));
                }
                m.insert(
                    i,
                    Served {
                        seed: *permutation_seed,
                        at_ms: *at_ms,
                        answered: false,
                    },
                );
            }
            LogEvent::Response {
                rater_id,
                instance_id,
                chosen_index,
                permutation_seed,
                at_ms,
                ..
            } => {
                let expected = self
                    .plan_response(
                        pool,
                        rater_id,
                        instance_id,
                        *chosen_index,
                        &token_of(*permutation_seed),
                        *at_ms,
                    )
                    .map_err(|e| e.to_string())?;
                if &expected != ev {
                    return Err(format!(
                        "response of '{rater_id}' disagrees with the dataset"
                    ));
                }
                self.raters
                    .get_mut(rater_id)
                    .and_then(|m| m.get_mut(&i))
                    .expect("checked by plan_response")
                    .answered = true;
                self.responses[i] += 1;
            }
        }
        Ok(())
    }
}
