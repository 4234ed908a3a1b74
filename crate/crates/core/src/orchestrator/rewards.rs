//! Multi-source reward aggregation.
//!
//! Rewards aimed at the same `(actor, target_tick)` are combined into a
//! confidence-weighted mean `Σ vᵢcᵢ / Σ cᵢ`. Both sums are computed exactly
//! (products included) and rounded once, so the result depends neither on
//! arrival order nor on how one source's confidence is split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::protocol::{finite_f64, ParticipantId, Reward};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReward {
    pub actor: String,
    pub target_tick: u64,
    #[serde(serialize_with = "finite_f64")]
    pub value: f64,
    #[serde(serialize_with = "finite_f64")]
    pub total_confidence: f64,
    pub sources: Vec<ParticipantId>,
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials).
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to a single double, handling the half-way case.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

/// `a·b` as an unevaluated sum of two doubles (an fma recovers the rounding error).
fn exact_product(a: f64, b: f64) -> [f64; 2] {
    let p = a * b;
    [p, a.mul_add(b, -p)]
}

/// Aggregates the contributors to one `(actor, target_tick)`.
///
/// Returns `None` for an empty contributor set.
pub fn aggregate(actor: &str, target_tick: u64, rewards: &[Reward]) -> Option<AggregatedReward> {
    if rewards.is_empty() {
        return None;
    }
    let weighted = exact_sum(rewards.iter().flat_map(|r| exact_product(r.value, r.confidence)));
    let total_confidence = exact_sum(rewards.iter().map(|r| r.confidence));
    let mut sources: Vec<ParticipantId> = rewards.iter().map(|r| r.source.clone()).collect();
    sources.sort();
    sources.dedup();
    Some(AggregatedReward {
        actor: actor.to_string(),
        target_tick,
        value: weighted / total_confidence,
        total_confidence,
        sources,
    })
}

/// Every accepted reward of a trial, keyed by `(actor, target_tick)`.
#[derive(Clone, Debug, Default)]
pub struct RewardLedger {
    entries: BTreeMap<(String, u64), Vec<Reward>>,
}

impl RewardLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a reward and returns the updated aggregate for its target.
    pub fn add(&mut self, reward: Reward) -> AggregatedReward {
        let key = (reward.target_actor.clone(), reward.target_tick);
        let list = self.entries.entry(key.clone()).or_default();
        list.push(reward);
        aggregate(&key.0, key.1, list).expect("non-empty")
    }

    pub fn get(&self, actor: &str, target_tick: u64) -> Option<AggregatedReward> {
        self.entries
            .get(&(actor.to_string(), target_tick))
            .and_then(|l| aggregate(actor, target_tick, l))
    }

    /// Aggregates for every `(actor, target_tick)`, ordered by actor then tick.
    pub fn table(&self) -> Vec<AggregatedReward> {
        self.entries
            .iter()
            .filter_map(|((a, t), l)| aggregate(a, *t, l))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-actor sum of aggregated rewards over a table.
pub fn totals_by_actor(table: &[AggregatedReward]) -> BTreeMap<String, f64> {
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in table {
        per.entry(a.actor.clone()).or_default().push(a.value);
    }
    per.into_iter().map(|(k, v)| (k, exact_sum(v))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::ParticipantKind;
    use proptest::prelude::*;

    fn r(value: f64, confidence: f64, src: &str) -> Reward {
        Reward {
            value,
            confidence,
            source: ParticipantId::new(ParticipantKind::Actor, src),
            target_actor: "a".into(),
            target_tick: 4,
        }
    }

    #[test]
    fn single_full_confidence_source_is_raw_value() {
        let agg = aggregate("a", 4, &[r(1.0, 1.0, "env")]).unwrap();
        assert_eq!(agg.value, 1.0);
        assert_eq!(agg.total_confidence, 1.0);
    }

    #[test]
    fn symmetric_half_confidence_sources() {
        let agg = aggregate("a", 4, &[r(1.0, 0.5, "h1"), r(0.0, 0.5, "h2")]).unwrap();
        assert_eq!(agg.value, 0.5);
        assert_eq!(agg.total_confidence, 1.0);
        let agg = aggregate("a", 4, &[r(1.0, 0.5, "h1"), r(-1.0, 0.5, "h2")]).unwrap();
        assert_eq!(agg.value, 0.0);
    }

    #[test]
    fn empty_never_materializes() {
        assert!(aggregate("a", 0, &[]).is_none());
    }

    #[test]
    fn exact_sum_matches_known_cases() {
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([]), 0.0);
        assert_eq!(exact_sum([1e16, 1.0, 1e-16]), 10000000000000002.0);
    }

    #[test]
    fn ledger_accumulates() {
        let mut l = RewardLedger::new();
        l.add(r(1.0, 0.5, "h1"));
        let agg = l.add(r(0.0, 0.5, "h2"));
        assert_eq!(agg.value, 0.5);
        assert_eq!(l.get("a", 4).unwrap(), agg);
        assert_eq!(l.table().len(), 1);
    }

    proptest! {
        #[test]
        fn exact_sum_is_order_independent(mut xs in prop::collection::vec(-1e6f64..1e6, 0..20), seed in any::<u64>()) {
            let a = exact_sum(xs.iter().copied());
            // deterministic shuffle
            let n = xs.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                xs.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a, exact_sum(xs));
        }

        #[test]
        fn bounded_by_contributors(vals in prop::collection::vec((-10.0f64..10.0, 0.01f64..1.0), 1..8)) {
            let rewards: Vec<Reward> = vals.iter().map(|&(v, c)| r(v, c, "s")).collect();
            let agg = aggregate("a", 4, &rewards).unwrap();
            let lo = vals.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
            let hi = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg.value >= lo - 1e-12 && agg.value <= hi + 1e-12);
        }
    }
}
