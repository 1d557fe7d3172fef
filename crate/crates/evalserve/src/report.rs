//! Human-performance aggregation over a response log.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::log::LogEvent;

/// Responses needed before an instance enters the breakdown.
pub const RESPONSES_PER_INSTANCE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub count: usize,
    /// `100 · count / total_instances`.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Instances with a full set of responses.
    pub total_instances: usize,
    pub all_correct: Bucket,
    pub at_least_two: Bucket,
    pub at_least_one: Bucket,
    pub none_correct: Bucket,
    pub total_responses: usize,
    pub correct_responses: usize,
    /// `100 · correct_responses / total_responses`.
    pub response_accuracy: f64,
    /// Instances with at least one but fewer than the full set of responses.
    pub incomplete_instances: usize,
    pub incomplete_responses: usize,
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

/// Rounds a percentage to one decimal place, as reported in tables.
pub fn round1(p: f64) -> f64 {
    (p * 10.0).round() / 10.0
}

/// Aggregates the response events of `log`. Repeated (rater, instance)
/// responses count once; per instance only the first full set is used for
/// the breakdown.
pub fn aggregate(log: &[LogEvent]) -> AggregateReport {
    let mut seen = HashSet::new();
    let mut per_instance: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    let (mut total_responses, mut correct_responses) = (0, 0);
    for ev in log {
        if let LogEvent::Response {
            rater_id,
            instance_id,
            correct,
            ..
        } = ev
        {
            if !seen.insert((rater_id.as_str(), instance_id.as_str())) {
                continue;
            }
            total_responses += 1;
            correct_responses += usize::from(*correct);
            per_instance.entry(instance_id).or_default().push(*correct);
        }
    }

    let mut counts = [0usize; RESPONSES_PER_INSTANCE + 1];
    let (mut total, mut incomplete, mut incomplete_responses) = (0, 0, 0);
    for answers in per_instance.values() {
        if answers.len() < RESPONSES_PER_INSTANCE {
            incomplete += 1;
            incomplete_responses += answers.len();
            continue;
        }
        total += 1;
        let k = answers[..RESPONSES_PER_INSTANCE]
            .iter()
            .filter(|c| **c)
            .count();
        counts[k] += 1;
    }
    let at_least = |k: usize| counts[k..].iter().sum::<usize>();
    let bucket = |count| Bucket {
        count,
        percent: percent(count, total),
    };
    AggregateReport {
        total_instances: total,
        all_correct: bucket(counts[3]),
        at_least_two: bucket(at_least(2)),
        at_least_one: bucket(at_least(1)),
        none_correct: bucket(counts[0]),
        total_responses,
        correct_responses,
        response_accuracy: percent(correct_responses, total_responses),
        incomplete_instances: incomplete,
        incomplete_responses,
    }
}

impl AggregateReport {
    /// Nesting, partition and percentage consistency.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.total_instances;
        if !(self.all_correct.count <= self.at_least_two.count
            && self.at_least_two.count <= self.at_least_one.count)
        {
            return Err("buckets are not nested".into());
        }
        if self.at_least_one.count + self.none_correct.count != n {
            return Err("≥1 and 0 buckets do not partition the instances".into());
        }
        for b in [
            self.all_correct,
            self.at_least_two,
            self.at_least_one,
            self.none_correct,
        ] {
            if b.percent != percent(b.count, n) {
                return Err(format!(
                    "percentage {} inconsistent with count {}",
                    b.percent, b.count
                ));
            }
        }
        if self.correct_responses > self.total_responses {
            return Err("more correct responses than responses".into());
        }
        Ok(())
    }
}
