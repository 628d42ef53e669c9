//! Impression-log schema, validation, synthetic generation, and the
//! co-exposure sparsity analyzer.
//!
//! A log is line-delimited JSON: one header line carrying the schema name
//! and version, then one request per line. The field-by-field layout is
//! documented in `docs/impression-log.md`.

mod generate;
mod io;
mod sparsity;

pub use generate::{generate_synthetic, ClickModel, GeneratorConfig, LATENT_DIM};
pub use io::{load_impressions, write_impressions, SCHEMA_NAME, SCHEMA_VERSION};
pub use sparsity::{sparsity_report, SparsityReport, SparsityRow};

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RiaError};

/// One logged event in the user-context time series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextEvent {
    pub ts: i64,
    /// Feature field name -> category id.
    pub fields: BTreeMap<String, u64>,
}

/// One ranked candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateItem {
    pub item_id: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fields: BTreeMap<String, u64>,
}

/// One slot of a displayed page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageEntry {
    pub item_id: u64,
    /// 1-based display position.
    pub position: u32,
    pub click: u8,
}

/// One displayed list of items shown together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<PageEntry>,
}

impl Page {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn has_click(&self) -> bool {
        self.items.iter().any(|e| e.click == 1)
    }

    /// Entries sorted by display position.
    pub fn by_position(&self) -> Vec<&PageEntry> {
        let mut v: Vec<&PageEntry> = self.items.iter().collect();
        v.sort_by_key(|e| e.position);
        v
    }
}

/// One logged request: context series, candidates, history pages, and the
/// exposed target page with click labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub request_id: String,
    pub user_id: String,
    pub context_events: Vec<ContextEvent>,
    pub candidates: Vec<CandidateItem>,
    pub history_pages: Vec<Page>,
    pub target_page: Page,
}

impl ImpressionRecord {
    /// Check every schema invariant; the error names the violated rule.
    pub fn validate(&self) -> Result<()> {
        let fail = |rule: &str| -> Result<()> {
            Err(RiaError::Invariant {
                record_id: self.request_id.clone(),
                rule: rule.to_string(),
            })
        };

        if self.candidates.is_empty() {
            return fail("candidates nonempty");
        }
        if self.target_page.is_empty() {
            return fail("target page nonempty");
        }
        if self.context_events.is_empty() {
            return fail("context series nonempty");
        }

        let mut seen = HashSet::new();
        if !self.candidates.iter().all(|c| seen.insert(c.item_id)) {
            return fail("candidate ids unique");
        }

        for w in self.context_events.windows(2) {
            if w[1].ts < w[0].ts {
                return fail("context timestamps nondecreasing");
            }
        }

        for page in self.history_pages.iter().chain([&self.target_page]) {
            let mut positions: Vec<u32> = page.items.iter().map(|e| e.position).collect();
            positions.sort_unstable();
            if positions != (1..=page.len() as u32).collect::<Vec<_>>() {
                return fail("positions form a permutation");
            }
            if page.items.iter().any(|e| e.click > 1) {
                return fail("clicks are binary");
            }
        }

        let candidate_ids: HashSet<u64> = self.candidates.iter().map(|c| c.item_id).collect();
        if !self
            .target_page
            .items
            .iter()
            .all(|e| candidate_ids.contains(&e.item_id))
        {
            return fail("target ⊆ candidates");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_record() -> ImpressionRecord {
        ImpressionRecord {
            request_id: "r1".into(),
            user_id: "u1".into(),
            context_events: vec![
                ContextEvent {
                    ts: 10,
                    fields: BTreeMap::from([("item".to_string(), 4u64)]),
                },
                ContextEvent {
                    ts: 20,
                    fields: BTreeMap::from([("item".to_string(), 2u64)]),
                },
            ],
            candidates: vec![
                CandidateItem { item_id: 1, fields: BTreeMap::new() },
                CandidateItem { item_id: 2, fields: BTreeMap::new() },
                CandidateItem { item_id: 3, fields: BTreeMap::new() },
            ],
            history_pages: vec![Page {
                items: vec![
                    PageEntry { item_id: 7, position: 1, click: 0 },
                    PageEntry { item_id: 8, position: 2, click: 1 },
                ],
            }],
            target_page: Page {
                items: vec![
                    PageEntry { item_id: 2, position: 1, click: 1 },
                    PageEntry { item_id: 1, position: 2, click: 0 },
                ],
            },
        }
    }

    #[test]
    fn valid_record_passes() {
        tiny_record().validate().unwrap();
    }

    #[test]
    fn target_not_in_candidates_rejected() {
        let mut r = tiny_record();
        r.target_page.items[0].item_id = 99;
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("target ⊆ candidates"), "{err}");
    }

    #[test]
    fn duplicate_positions_rejected() {
        let mut r = tiny_record();
        r.target_page.items[1].position = 1;
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("positions form a permutation"), "{err}");
    }

    #[test]
    fn non_binary_click_rejected() {
        let mut r = tiny_record();
        r.history_pages[0].items[0].click = 3;
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("clicks are binary"), "{err}");
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let mut r = tiny_record();
        r.context_events[1].ts = 5;
        let err = r.validate().unwrap_err();
        assert!(err.to_string().contains("timestamps"), "{err}");
    }
}
