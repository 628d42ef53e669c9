//! Exact co-exposure counting: how often unordered item k-tuples appear
//! together on an exposed page. The mean count per distinct tuple decays as
//! k grows, which is the combinatorial-sparsity phenomenon that starves
//! listwise models of joint evidence.

use std::collections::HashMap;

use super::ImpressionRecord;
use crate::error::{Result, RiaError};

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRow {
    pub k: usize,
    /// Distinct unordered k-subsets that co-occur on at least one page.
    pub distinct: u64,
    /// Total k-subset incidences over all pages.
    pub total: u64,
    /// total / distinct.
    pub mean_count: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub pages: usize,
    pub rows: Vec<SparsityRow>,
}

impl SparsityReport {
    /// `k=<k> distinct=<d> total=<t> mean=<m>` per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("pages={}\n", self.pages);
        for r in &self.rows {
            out.push_str(&format!(
                "k={} distinct={} total={} mean={:.6}\n",
                r.k, r.distinct, r.total, r.mean_count
            ));
        }
        out
    }
}

/// Count k-tuple co-exposures on the exposed (target) pages of a log for
/// k = 1..=k_max. Exact brute-force enumeration.
pub fn sparsity_report(records: &[ImpressionRecord], k_max: usize) -> Result<SparsityReport> {
    let max_page = records
        .iter()
        .map(|r| r.target_page.len())
        .max()
        .unwrap_or(0);
    if k_max == 0 || k_max > max_page {
        return Err(RiaError::Contract {
            module: "data",
            detail: format!("k_max {k_max} outside 1..={max_page} (longest page)"),
        });
    }

    let mut rows = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let mut counts: HashMap<Vec<u64>, u64> = HashMap::new();
        for record in records {
            let mut items: Vec<u64> =
                record.target_page.items.iter().map(|e| e.item_id).collect();
            items.sort_unstable();
            for combo in combinations(&items, k) {
                *counts.entry(combo).or_insert(0) += 1;
            }
        }
        let distinct = counts.len() as u64;
        let total: u64 = counts.values().sum();
        rows.push(SparsityRow {
            k,
            distinct,
            total,
            mean_count: if distinct == 0 {
                0.0
            } else {
                total as f64 / distinct as f64
            },
        });
    }
    Ok(SparsityReport {
        pages: records.len(),
        rows,
    })
}

fn combinations(items: &[u64], k: usize) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn go(items: &[u64], k: usize, start: usize, current: &mut Vec<u64>, out: &mut Vec<Vec<u64>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            current.push(items[i]);
            go(items, k, i + 1, current, out);
            current.pop();
        }
    }
    go(items, k, 0, &mut current, &mut out);
    out
}
