//! AUC and LogLoss, plus the quadratic pairwise oracle the fast paths are
//! verified against.

use crate::error::{Result, RiaError};

/// Clamp applied to probabilities before taking logs.
pub const LOGLOSS_EPS: f64 = 1e-7;

/// How scores are pooled across requests for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    /// One pool over all (request, position) pairs.
    Global,
    /// Mean of per-request AUCs over requests with both classes.
    PerRequest,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pooling::Global => write!(f, "global"),
            Pooling::PerRequest => write!(f, "per-request"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n_examples: usize,
    pub pooling: Pooling,
}

impl EvalReport {
    /// Fixed key names for CI parsing.
    pub fn to_text(&self) -> String {
        format!(
            "auc={:.6}\nlogloss={:.6}\nn={}\npooling={}\n",
            self.auc, self.logloss, self.n_examples, self.pooling
        )
    }
}

/// Rank-based AUC in O(N log N): P(score⁺ > score⁻) + 0.5·P(tie).
///
/// Labels are binary. Single-class inputs are an error, not a silent 0.5.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(RiaError::Shape {
            op: "auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(RiaError::UndefinedMetric {
            detail: format!("need both classes, got {n_pos} positives / {n_neg} negatives"),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores are finite"));

    // Average rank within each tied score group (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// O(N²) pairwise estimator; the independent oracle for [`auc`].
pub fn auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(RiaError::UndefinedMetric {
            detail: "need both classes".into(),
        });
    }
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (pos.len() * neg.len()) as f64)
}

/// Mean AUC over groups that contain both classes; groups are consecutive
/// runs of the given sizes.
pub fn auc_grouped(scores: &[f64], labels: &[u8], group_sizes: &[usize]) -> Result<f64> {
    if group_sizes.iter().sum::<usize>() != scores.len() {
        return Err(RiaError::Shape {
            op: "auc-grouped",
            lhs: vec![scores.len()],
            rhs: group_sizes.to_vec(),
        });
    }
    let mut start = 0;
    let mut total = 0.0;
    let mut used = 0usize;
    for &size in group_sizes {
        let (s, l) = (&scores[start..start + size], &labels[start..start + size]);
        start += size;
        if let Ok(a) = auc(s, l) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(RiaError::UndefinedMetric {
            detail: "no group contains both classes".into(),
        });
    }
    Ok(total / used as f64)
}

/// Mean binary cross-entropy with the symmetric ε clamp.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(RiaError::Shape {
            op: "logloss",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let p = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
        total += if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

pub fn evaluate(
    scores: &[f64],
    labels: &[u8],
    pooling: Pooling,
    group_sizes: &[usize],
) -> Result<EvalReport> {
    let auc_value = match pooling {
        Pooling::Global => auc(scores, labels)?,
        Pooling::PerRequest => auc_grouped(scores, labels, group_sizes)?,
    };
    Ok(EvalReport {
        auc: auc_value,
        logloss: logloss(scores, labels)?,
        n_examples: scores.len(),
        pooling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn perfect_and_reversed_order() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
    }

    #[test]
    fn tie_gets_half_credit() {
        // Pairs: (0.5 pos, 0.5 neg) ties, (0.5 pos, 0.2 neg) wins.
        let a = auc(&[0.5, 0.5, 0.2], &[1, 0, 0]).unwrap();
        assert!((a - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            auc(&[0.5, 0.2], &[1, 1]),
            Err(RiaError::UndefinedMetric { .. })
        ));
    }

    #[test]
    fn fast_auc_matches_pairwise_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(4242);
        for trial in 0..25 {
            let n = rng.gen_range(2..400);
            // Coarse grid forces plenty of ties.
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            if n > 1 {
                labels[1] = 0;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise_oracle(&scores, &labels).unwrap();
            assert!(
                (fast - slow).abs() < 1e-12,
                "trial {trial}: fast {fast} vs oracle {slow}"
            );
        }
    }

    #[test]
    fn logloss_reference_values() {
        let half = logloss(&[0.5, 0.5], &[1, 0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);

        // Clamp behavior at p = 1.
        let clamped = logloss(&[1.0], &[1]).unwrap();
        assert!((clamped - -(1.0 - LOGLOSS_EPS).ln()).abs() < 1e-18);
        assert!(clamped < 2e-7);

        // Hand oracle: mean of -ln 0.9 and -ln 0.1.
        let v = logloss(&[0.9, 0.1], &[1, 1]).unwrap();
        let expect = (-(0.9f64.ln()) - 0.1f64.ln()) / 2.0;
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 1.2039728043259361).abs() < 1e-12);
    }

    #[test]
    fn grouped_auc_skips_single_class_groups() {
        let scores = [0.9, 0.1, 0.4, 0.6];
        let labels = [1, 0, 1, 1];
        // Group 2 is all-positive and drops out; group 1 is perfect.
        let a = auc_grouped(&scores, &labels, &[2, 2]).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn report_text_has_fixed_keys() {
        let report = EvalReport {
            auc: 0.75,
            logloss: 0.693147,
            n_examples: 10,
            pooling: Pooling::Global,
        };
        let text = report.to_text();
        assert!(text.contains("auc=0.750000"));
        assert!(text.contains("logloss=0.693147"));
        assert!(text.contains("n=10"));
    }

    proptest! {
        /// AUC only depends on the ordering of scores.
        #[test]
        fn auc_invariant_under_monotone_transforms(
            raw in proptest::collection::vec((0u8..=1, 0.0f64..1.0), 2..60),
            a in 0.1f64..5.0,
            b in -2.0f64..2.0,
        ) {
            let labels: Vec<u8> = raw.iter().map(|(y, _)| *y).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, s)| *s).collect();
            prop_assume!(labels.iter().any(|&y| y == 1) && labels.iter().any(|&y| y == 0));
            // Strictly increasing map: exp preserves order, a > 0 scales.
            let mapped: Vec<f64> = scores.iter().map(|&s| a * s.exp() + b).collect();
            let base = auc(&scores, &labels).unwrap();
            let transformed = auc(&mapped, &labels).unwrap();
            prop_assert!((base - transformed).abs() < 1e-12);
        }

        /// Negating scores complements AUC under the tie convention.
        #[test]
        fn auc_negation_complements(
            raw in proptest::collection::vec((0u8..=1, 0.0f64..1.0), 2..60),
        ) {
            let labels: Vec<u8> = raw.iter().map(|(y, _)| *y).collect();
            let scores: Vec<f64> = raw.iter().map(|(_, s)| *s).collect();
            prop_assume!(labels.iter().any(|&y| y == 1) && labels.iter().any(|&y| y == 0));
            let fwd = auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let bwd = auc(&neg, &labels).unwrap();
            prop_assert!((fwd + bwd - 1.0).abs() < 1e-12);
        }
    }
}
