//! Target-list enumeration and optimal-list selection: P* = argmax R(u, P)
//! with R the sum of per-position listwise pCTRs.
//!
//! Enumeration stands in for the upstream generative list models: all
//! ordered m-permutations when they fit the budget, otherwise a seeded
//! uniform sample of distinct permutations.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::ImpressionRecord;
use crate::ec::{score_lists_cached, score_lists_recompute, OpCounters, ReprCache};
use crate::error::{Result, RiaError};
use crate::model::RiaModel;
use crate::tensor::Elem;

/// One scored candidate permutation. The reward is exactly the sum of the
/// per-position pCTRs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredList {
    pub items: Vec<u64>,
    pub per_position_pctr: Vec<f64>,
    pub reward: f64,
}

fn permutation_count(n: usize, m: usize, cap: usize) -> usize {
    let mut total: usize = 1;
    for i in 0..m {
        total = match total.checked_mul(n - i) {
            Some(v) if v <= cap => v,
            _ => return cap + 1,
        };
    }
    total
}

/// All ordered m-permutations of the candidates when P(n, m) fits the
/// budget, otherwise `budget` distinct permutations sampled uniformly with
/// the given seed.
pub fn enumerate_target_lists(
    candidates: &[u64],
    m: usize,
    budget: usize,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    let n = candidates.len();
    if m > n {
        return Err(RiaError::Contract {
            module: "selection",
            detail: format!("list length m={m} exceeds candidate count n={n}"),
        });
    }
    if m == 0 || budget == 0 {
        return Err(RiaError::Contract {
            module: "selection",
            detail: "m and budget must be positive".into(),
        });
    }

    if permutation_count(n, m, budget) <= budget {
        let mut out = Vec::new();
        let mut current = Vec::with_capacity(m);
        let mut used = vec![false; n];
        enumerate_rec(candidates, m, &mut used, &mut current, &mut out);
        return Ok(out);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(budget);
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let mut pool: Vec<u64> = candidates.to_vec();
        let mut list = Vec::with_capacity(m);
        for _ in 0..m {
            let idx = rng.gen_range(0..pool.len());
            list.push(pool.swap_remove(idx));
        }
        if seen.insert(list.clone()) {
            out.push(list);
        }
    }
    Ok(out)
}

fn enumerate_rec(
    candidates: &[u64],
    remaining: usize,
    used: &mut [bool],
    current: &mut Vec<u64>,
    out: &mut Vec<Vec<u64>>,
) {
    if remaining == 0 {
        out.push(current.clone());
        return;
    }
    for i in 0..candidates.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        current.push(candidates[i]);
        enumerate_rec(candidates, remaining - 1, used, current, out);
        current.pop();
        used[i] = false;
    }
}

/// Argmax by reward; exact ties break toward the lexicographically smallest
/// item-id sequence so selection is reproducible.
pub fn pick_best(scored: &[ScoredList]) -> Result<ScoredList> {
    let best = scored
        .iter()
        .reduce(|best, cur| {
            if cur.reward > best.reward
                || (cur.reward == best.reward && cur.items < best.items)
            {
                cur
            } else {
                best
            }
        })
        .ok_or_else(|| RiaError::Contract {
            module: "selection",
            detail: "no candidate lists to select from".into(),
        })?;
    Ok(best.clone())
}

/// Score every list through the model (or through the cache when given) and
/// return the argmax-reward list.
pub fn select_best_list<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    lists: &[Vec<u64>],
    cache: Option<&mut ReprCache>,
) -> Result<ScoredList> {
    if lists.is_empty() {
        return Err(RiaError::Contract {
            module: "selection",
            detail: "no candidate lists to select from".into(),
        });
    }
    let mut counters = OpCounters::default();
    let scored = match cache {
        Some(cache) => score_lists_cached(model, record, lists, cache, &mut counters)?,
        None => score_lists_recompute(model, record, lists, &mut counters)?,
    };
    pick_best(&scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_choose_two_ordered_is_six() {
        let lists = enumerate_target_lists(&[10, 20, 30], 2, 100, 0).unwrap();
        assert_eq!(lists.len(), 6);
        let set: HashSet<_> = lists.iter().cloned().collect();
        assert_eq!(set.len(), 6);
    }

    #[test]
    fn full_length_permutations() {
        let lists = enumerate_target_lists(&[1, 2, 3], 3, 100, 0).unwrap();
        assert_eq!(lists.len(), 6);
        for list in &lists {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![1, 2, 3], "each list reorders all candidates");
        }
    }

    #[test]
    fn budget_caps_enumeration_with_seeded_sampling() {
        let a = enumerate_target_lists(&[1, 2, 3], 2, 4, 99).unwrap();
        assert_eq!(a.len(), 4);
        let distinct: HashSet<_> = a.iter().cloned().collect();
        assert_eq!(distinct.len(), 4);
        let b = enumerate_target_lists(&[1, 2, 3], 2, 4, 99).unwrap();
        assert_eq!(a, b, "same seed, same sample");
        let c = enumerate_target_lists(&[1, 2, 3], 2, 4, 100).unwrap();
        assert_ne!(a, c, "different seed should differ");
    }

    #[test]
    fn m_longer_than_candidates_is_rejected() {
        assert!(enumerate_target_lists(&[1, 2], 3, 10, 0).is_err());
    }

    #[test]
    fn pick_best_takes_argmax_and_breaks_ties_lexicographically() {
        let mk = |items: &[u64], reward: f64| ScoredList {
            items: items.to_vec(),
            per_position_pctr: vec![reward],
            reward,
        };
        let best = pick_best(&[mk(&[5, 1], 0.9), mk(&[2, 9], 1.2)]).unwrap();
        assert_eq!(best.items, vec![2, 9]);

        let best = pick_best(&[mk(&[5, 1], 1.2), mk(&[2, 9], 1.2)]).unwrap();
        assert_eq!(best.items, vec![2, 9], "tie goes to smaller id sequence");

        let single = pick_best(&[mk(&[7, 7], 0.4)]).unwrap();
        assert_eq!(single.items, vec![7, 7]);
        assert_eq!(single.reward, 0.4);
    }

    proptest! {
        /// A strictly increasing transform of all rewards never changes the
        /// selected list (ties included, since strict monotonicity keeps
        /// equalities).
        #[test]
        fn argmax_invariant_under_monotone_reward_transforms(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..20),
            scale in 0.05f64..4.0,
            shift in -3.0f64..3.0,
        ) {
            let lists: Vec<ScoredList> = rewards
                .iter()
                .enumerate()
                .map(|(i, &r)| ScoredList {
                    items: vec![i as u64, (i * 7 % 5) as u64],
                    per_position_pctr: vec![r],
                    reward: r,
                })
                .collect();
            let transformed: Vec<ScoredList> = lists
                .iter()
                .map(|l| ScoredList {
                    reward: scale * l.reward.exp() + shift,
                    ..l.clone()
                })
                .collect();
            let a = pick_best(&lists).unwrap();
            let b = pick_best(&transformed).unwrap();
            prop_assert_eq!(a.items, b.items);
        }
    }
}
