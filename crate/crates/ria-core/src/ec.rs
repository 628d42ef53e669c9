//! Embedding Cache and the rank→rerank pipeline.
//!
//! At rank time the expensive per-request work — item representations x''
//! from the dual-transformer and history-page encodings H_k — is computed
//! once and stored. At rerank time each candidate permutation needs only
//! the target-page encoding, position-wise target attention, the adaptor,
//! the listwise stack, and the head. Counters prove the avoided work;
//! verify mode proves the scores match.

use std::collections::HashMap;
use std::fmt;
use std::time::Instant;

use crate::data::ImpressionRecord;
use crate::error::{Result, RiaError};
use crate::model::RiaModel;
use crate::params::Session;
use crate::selection::ScoredList;
use crate::tensor::{Elem, Tensor};

/// Logical evaluation counts per pipeline stage. One unit is one block
/// application: a sequence through an HSTU block, a page through
/// self-attention, one query through target attention, one (possibly
/// batched) MLP application.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub hstu_evals: usize,
    pub target_attention_evals: usize,
    pub self_attention_evals: usize,
    pub mlp_evals: usize,
}

impl OpCounters {
    pub fn merge(&mut self, other: &OpCounters) {
        self.hstu_evals += other.hstu_evals;
        self.target_attention_evals += other.target_attention_evals;
        self.self_attention_evals += other.self_attention_evals;
        self.mlp_evals += other.mlp_evals;
    }

    pub fn is_zero(&self) -> bool {
        *self == OpCounters::default()
    }
}

impl fmt::Display for OpCounters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "hstu={} target_attention={} self_attention={} mlp={}",
            self.hstu_evals,
            self.target_attention_evals,
            self.self_attention_evals,
            self.mlp_evals
        )
    }
}

/// Contract of an external key-value store, for deployments that back the
/// cache with a network service. The in-process store below is the only
/// implementation here; replication and remote transports are out of scope.
pub trait ExternalStore {
    fn get(&mut self, key: &CacheKey) -> Option<(Vec<usize>, Vec<u8>)>;
    fn put(&mut self, key: CacheKey, shape: Vec<usize>, bytes: Vec<u8>);
    fn evict_request(&mut self, request_id: &str);
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CacheKey {
    /// x'' of one candidate: (request, item).
    Item { request: String, item: u64 },
    /// H_k of one history page: (request, 1-based page index).
    Page { request: String, k: usize },
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheKey::Item { request, item } => write!(f, "item/{request}/{item}"),
            CacheKey::Page { request, k } => write!(f, "page/{request}/{k}"),
        }
    }
}

struct Entry {
    shape: Vec<usize>,
    bytes: Vec<u8>,
    written_at: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub evictions: usize,
    pub puts: usize,
}

/// In-process representation cache with TTL and grouped eviction.
///
/// Time is a logical second counter advanced by the caller, so staleness is
/// testable. Eviction drops the least-recently-written request group once
/// the entry capacity is exceeded. Hits return exactly the stored bytes.
pub struct ReprCache {
    entries: HashMap<CacheKey, Entry>,
    group_written: HashMap<String, u64>,
    capacity: usize,
    ttl: u64,
    now: u64,
    pub stats: CacheStats,
}

impl ReprCache {
    pub fn new(capacity: usize, ttl_seconds: u64) -> Self {
        Self {
            entries: HashMap::new(),
            group_written: HashMap::new(),
            capacity,
            ttl: ttl_seconds,
            now: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn advance_time(&mut self, seconds: u64) {
        self.now += seconds;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn request_of(key: &CacheKey) -> &str {
        match key {
            CacheKey::Item { request, .. } => request,
            CacheKey::Page { request, .. } => request,
        }
    }

    pub fn put(&mut self, key: CacheKey, shape: Vec<usize>, bytes: Vec<u8>) {
        let request = Self::request_of(&key).to_string();
        self.group_written.insert(request, self.now);
        self.entries.insert(
            key,
            Entry {
                shape,
                bytes,
                written_at: self.now,
            },
        );
        self.stats.puts += 1;
        while self.entries.len() > self.capacity {
            self.evict_oldest_group();
        }
    }

    fn evict_oldest_group(&mut self) {
        // Oldest write wins; ties break on the request id for determinism.
        let victim = self
            .group_written
            .iter()
            .min_by_key(|(req, &tick)| (tick, req.clone()))
            .map(|(req, _)| req.clone());
        if let Some(req) = victim {
            let before = self.entries.len();
            self.entries
                .retain(|key, _| Self::request_of(key) != req.as_str());
            self.stats.evictions += before - self.entries.len();
            self.group_written.remove(&req);
        }
    }

    fn fresh(&self, entry: &Entry) -> bool {
        self.now.saturating_sub(entry.written_at) <= self.ttl
    }

    /// Fetch one entry; absent or expired keys are miss errors naming the
    /// key. A hit returns a copy of exactly the stored bytes.
    pub fn get(&mut self, key: &CacheKey) -> Result<(Vec<usize>, Vec<u8>)> {
        let miss = |stats: &mut CacheStats| {
            stats.misses += 1;
            Err(RiaError::CacheMiss {
                key: key.to_string(),
            })
        };
        match self.entries.get(key) {
            None => miss(&mut self.stats),
            Some(entry) if !self.fresh(entry) => {
                self.entries.remove(key);
                miss(&mut self.stats)
            }
            Some(entry) => {
                self.stats.hits += 1;
                Ok((entry.shape.clone(), entry.bytes.clone()))
            }
        }
    }

    /// Strict all-or-nothing check: every key must be present and fresh,
    /// otherwise the whole request counts as one miss.
    pub fn require_all(&mut self, keys: &[CacheKey]) -> Result<()> {
        for key in keys {
            let ok = self.entries.get(key).is_some_and(|e| self.fresh(e));
            if !ok {
                self.stats.misses += 1;
                return Err(RiaError::CacheMiss {
                    key: key.to_string(),
                });
            }
        }
        Ok(())
    }

    /// One line per entry, sorted by key: `key=<k> shape=<dims> checksum=<fnv64>`.
    pub fn dump(&self) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .map(|(key, entry)| {
                format!(
                    "key={key} shape={:?} checksum={:016x}",
                    entry.shape,
                    fnv64(&entry.bytes)
                )
            })
            .collect();
        lines.sort();
        lines.join("\n")
    }
}

impl ExternalStore for ReprCache {
    fn get(&mut self, key: &CacheKey) -> Option<(Vec<usize>, Vec<u8>)> {
        ReprCache::get(self, key).ok()
    }
    fn put(&mut self, key: CacheKey, shape: Vec<usize>, bytes: Vec<u8>) {
        ReprCache::put(self, key, shape, bytes);
    }
    fn evict_request(&mut self, request_id: &str) {
        let before = self.entries.len();
        self.entries
            .retain(|key, _| Self::request_of(key) != request_id);
        self.stats.evictions += before - self.entries.len();
        self.group_written.remove(request_id);
    }
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Pipeline stages

/// Run the rank-stage work for one record and store every reusable piece:
/// x'' for all n candidates and H_k for the (scope-filtered) history pages.
/// Returns the number of entries stored.
pub fn rank_stage_precompute<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    cache: &mut ReprCache,
    counters: &mut OpCounters,
) -> Result<usize> {
    model.check_record(record)?;
    let mut sess = Session::new(&model.registry, false);
    let pointwise = model.ucdt_stage(&mut sess, record, counters)?;
    let history = model.history_stage(&mut sess, record, counters)?;

    let d = model.cfg.d;
    let reprs = sess.graph.value(pointwise.reprs);
    let data = reprs.data();
    for (i, candidate) in record.candidates.iter().enumerate() {
        let row = Tensor::new(&[d], data[i * d..(i + 1) * d].to_vec())?;
        cache.put(
            CacheKey::Item {
                request: record.request_id.clone(),
                item: candidate.item_id,
            },
            vec![d],
            row.to_bytes(),
        );
    }
    for (k, &h) in history.iter().enumerate() {
        let value = sess.graph.value(h);
        cache.put(
            CacheKey::Page {
                request: record.request_id.clone(),
                k: k + 1,
            },
            value.shape().to_vec(),
            value.to_bytes(),
        );
    }
    Ok(record.candidates.len() + history.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RerankMode {
    Cached,
    Recompute,
    Verify,
}

impl std::str::FromStr for RerankMode {
    type Err = RiaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cached" => Ok(RerankMode::Cached),
            "recompute" => Ok(RerankMode::Recompute),
            "verify" => Ok(RerankMode::Verify),
            other => Err(RiaError::Config(format!("unknown rerank mode `{other}`"))),
        }
    }
}

#[derive(Debug)]
pub struct RerankOutcome {
    pub lists: Vec<ScoredList>,
    /// Work done in this call (both paths combined in verify mode).
    pub counters: OpCounters,
    pub cached_counters: Option<OpCounters>,
    pub recompute_counters: Option<OpCounters>,
    /// Max |cached − recomputed| over all per-position scores (verify only).
    pub verify_max_abs_diff: Option<f64>,
}

fn history_page_count<E: Elem>(model: &RiaModel<E>, record: &ImpressionRecord) -> usize {
    record
        .history_pages
        .iter()
        .filter(|p| match model.cfg.history_scope {
            crate::model::HistoryScope::AllPages => true,
            crate::model::HistoryScope::ClickPages => p.has_click(),
        })
        .count()
}

fn required_keys<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    lists: &[Vec<u64>],
) -> Vec<CacheKey> {
    let mut keys = Vec::new();
    let mut seen_items = std::collections::HashSet::new();
    for list in lists {
        for &item in list {
            if seen_items.insert(item) {
                keys.push(CacheKey::Item {
                    request: record.request_id.clone(),
                    item,
                });
            }
        }
    }
    for k in 1..=history_page_count(model, record) {
        keys.push(CacheKey::Page {
            request: record.request_id.clone(),
            k,
        });
    }
    keys
}

fn scored_list(items: &[u64], probs: Vec<f64>) -> ScoredList {
    let reward = probs.iter().sum();
    ScoredList {
        items: items.to_vec(),
        per_position_pctr: probs,
        reward,
    }
}

/// Score candidate lists straight through the model (rank-stage work
/// recomputed once for the request, then one list stage per list).
pub fn score_lists_recompute<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    lists: &[Vec<u64>],
    counters: &mut OpCounters,
) -> Result<Vec<ScoredList>> {
    if lists.is_empty() {
        return Err(RiaError::Contract {
            module: "ec",
            detail: "no candidate lists to score".into(),
        });
    }
    model.check_record(record)?;
    let mut sess = Session::new(&model.registry, false);
    let pointwise = model.ucdt_stage(&mut sess, record, counters)?;
    let history = model.history_stage(&mut sess, record, counters)?;

    let mut out = Vec::with_capacity(lists.len());
    for list in lists {
        let rows = rows_for_list(record, list)?;
        let repr_rows = sess.graph.gather_rows(pointwise.reprs, &rows)?;
        let probs = model.list_stage(&mut sess, repr_rows, &history, list, counters)?;
        let values: Vec<f64> = sess.graph.value(probs).data().iter().map(|v| v.to_f64()).collect();
        out.push(scored_list(list, values));
    }
    Ok(out)
}

fn rows_for_list(record: &ImpressionRecord, list: &[u64]) -> Result<Vec<usize>> {
    list.iter()
        .map(|&item| {
            record
                .candidates
                .iter()
                .position(|c| c.item_id == item)
                .ok_or_else(|| RiaError::Contract {
                    module: "ec",
                    detail: format!(
                        "list item {item} is not a candidate of request `{}`",
                        record.request_id
                    ),
                })
        })
        .collect()
}

/// Score candidate lists from the cache: only the target-page encoding,
/// PTAU, adaptor, listwise stack, and head run. Strict all-or-nothing on
/// the request's entries.
pub fn score_lists_cached<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    lists: &[Vec<u64>],
    cache: &mut ReprCache,
    counters: &mut OpCounters,
) -> Result<Vec<ScoredList>> {
    if lists.is_empty() {
        return Err(RiaError::Contract {
            module: "ec",
            detail: "no candidate lists to score".into(),
        });
    }
    model.check_record(record)?;
    cache.require_all(&required_keys(model, record, lists))?;

    let d = model.cfg.d;
    let mut sess = Session::new(&model.registry, false);

    let pages = history_page_count(model, record);
    let mut history = Vec::with_capacity(pages);
    for k in 1..=pages {
        let (shape, bytes) = cache.get(&CacheKey::Page {
            request: record.request_id.clone(),
            k,
        })?;
        let tensor = Tensor::<E>::from_bytes(&shape, &bytes)?;
        history.push(sess.graph.constant(tensor));
    }

    let mut out = Vec::with_capacity(lists.len());
    for list in lists {
        let mut row_bytes = Vec::with_capacity(list.len() * d * E::WIDTH);
        for &item in list {
            let (_, bytes) = cache.get(&CacheKey::Item {
                request: record.request_id.clone(),
                item,
            })?;
            row_bytes.extend_from_slice(&bytes);
        }
        let repr_rows = sess
            .graph
            .constant(Tensor::<E>::from_bytes(&[list.len(), d], &row_bytes)?);
        let probs = model.list_stage(&mut sess, repr_rows, &history, list, counters)?;
        let values: Vec<f64> = sess.graph.value(probs).data().iter().map(|v| v.to_f64()).collect();
        out.push(scored_list(list, values));
    }
    Ok(out)
}

/// Dispatch over [`RerankMode`]; verify runs both paths and reports their
/// maximum absolute per-position score difference.
pub fn rerank_stage_score<E: Elem>(
    model: &RiaModel<E>,
    record: &ImpressionRecord,
    lists: &[Vec<u64>],
    cache: Option<&mut ReprCache>,
    mode: RerankMode,
) -> Result<RerankOutcome> {
    match mode {
        RerankMode::Recompute => {
            let mut counters = OpCounters::default();
            let scored = score_lists_recompute(model, record, lists, &mut counters)?;
            Ok(RerankOutcome {
                lists: scored,
                counters,
                cached_counters: None,
                recompute_counters: Some(counters),
                verify_max_abs_diff: None,
            })
        }
        RerankMode::Cached => {
            let cache = cache.ok_or_else(|| RiaError::Contract {
                module: "ec",
                detail: "cached mode needs a cache".into(),
            })?;
            let mut counters = OpCounters::default();
            let scored = score_lists_cached(model, record, lists, cache, &mut counters)?;
            Ok(RerankOutcome {
                lists: scored,
                counters,
                cached_counters: Some(counters),
                recompute_counters: None,
                verify_max_abs_diff: None,
            })
        }
        RerankMode::Verify => {
            let cache = cache.ok_or_else(|| RiaError::Contract {
                module: "ec",
                detail: "verify mode needs a cache".into(),
            })?;
            let mut cached_counters = OpCounters::default();
            let cached = score_lists_cached(model, record, lists, cache, &mut cached_counters)?;
            let mut recompute_counters = OpCounters::default();
            let recomputed =
                score_lists_recompute(model, record, lists, &mut recompute_counters)?;
            let mut max_diff = 0.0f64;
            for (a, b) in cached.iter().zip(&recomputed) {
                for (pa, pb) in a.per_position_pctr.iter().zip(&b.per_position_pctr) {
                    max_diff = max_diff.max((pa - pb).abs());
                }
            }
            let mut total = cached_counters;
            total.merge(&recompute_counters);
            Ok(RerankOutcome {
                lists: recomputed,
                counters: total,
                cached_counters: Some(cached_counters),
                recompute_counters: Some(recompute_counters),
                verify_max_abs_diff: Some(max_diff),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Whole-run simulation and reporting

#[derive(Clone, Debug, Default)]
pub struct PipelineReport {
    pub requests: usize,
    pub lists_scored: usize,
    pub entries_stored: usize,
    pub stats: CacheStats,
    pub rank_counters: OpCounters,
    pub rerank_counters: OpCounters,
    pub verify_max_abs_diff: Option<f64>,
    /// Wall-clock times; nondeterministic, reported but never asserted.
    pub rank_wall_ms: f64,
    pub rerank_wall_ms: f64,
}

impl PipelineReport {
    pub fn hit_rate(&self) -> f64 {
        let total = self.stats.hits + self.stats.misses;
        if total == 0 {
            0.0
        } else {
            self.stats.hits as f64 / total as f64
        }
    }

    /// Line-oriented fixed-key report. Timings carry a `nondeterministic`
    /// marker; everything else is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("requests={}\n", self.requests));
        out.push_str(&format!("lists_scored={}\n", self.lists_scored));
        out.push_str(&format!("entries_stored={}\n", self.entries_stored));
        out.push_str(&format!("hits={}\n", self.stats.hits));
        out.push_str(&format!("misses={}\n", self.stats.misses));
        out.push_str(&format!("evictions={}\n", self.stats.evictions));
        out.push_str(&format!("hit_rate={:.6}\n", self.hit_rate()));
        out.push_str(&format!(
            "rank.hstu={} rank.target_attention={} rank.self_attention={} rank.mlp={}\n",
            self.rank_counters.hstu_evals,
            self.rank_counters.target_attention_evals,
            self.rank_counters.self_attention_evals,
            self.rank_counters.mlp_evals
        ));
        out.push_str(&format!(
            "rerank.hstu={} rerank.target_attention={} rerank.self_attention={} rerank.mlp={}\n",
            self.rerank_counters.hstu_evals,
            self.rerank_counters.target_attention_evals,
            self.rerank_counters.self_attention_evals,
            self.rerank_counters.mlp_evals
        ));
        if let Some(diff) = self.verify_max_abs_diff {
            out.push_str(&format!("max_abs_diff={diff:.3e}\n"));
        }
        out.push_str(&format!(
            "rank_wall_ms={:.3} rerank_wall_ms={:.3} (nondeterministic)\n",
            self.rank_wall_ms, self.rerank_wall_ms
        ));
        out
    }
}

/// Precompute every record, then rerank-score `lists_per_request` candidate
/// permutations per record in the given mode.
pub fn simulate_pipeline<E: Elem>(
    model: &RiaModel<E>,
    records: &[ImpressionRecord],
    lists_per_request: usize,
    mode: RerankMode,
    cache: &mut ReprCache,
    list_seed: u64,
) -> Result<PipelineReport> {
    let mut report = PipelineReport {
        requests: records.len(),
        ..Default::default()
    };

    let rank_start = Instant::now();
    for record in records {
        report.entries_stored +=
            rank_stage_precompute(model, record, cache, &mut report.rank_counters)?;
    }
    report.rank_wall_ms = rank_start.elapsed().as_secs_f64() * 1e3;

    let rerank_start = Instant::now();
    for record in records {
        let candidates: Vec<u64> = record.candidates.iter().map(|c| c.item_id).collect();
        let lists = crate::selection::enumerate_target_lists(
            &candidates,
            model.cfg.m,
            lists_per_request,
            list_seed,
        )?;
        let outcome = rerank_stage_score(model, record, &lists, Some(cache), mode)?;
        report.lists_scored += outcome.lists.len();
        report.rerank_counters.merge(&outcome.counters);
        if let Some(diff) = outcome.verify_max_abs_diff {
            let cur = report.verify_max_abs_diff.get_or_insert(0.0);
            *cur = cur.max(diff);
        }
    }
    report.rerank_wall_ms = rerank_start.elapsed().as_secs_f64() * 1e3;
    report.stats = cache.stats;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RiaConfig;
    use crate::ucdt::tests::tiny_record;

    fn setup() -> (RiaModel<f64>, ImpressionRecord) {
        let cfg = RiaConfig::tiny();
        let model = RiaModel::<f64>::init(cfg.clone()).unwrap();
        let record = tiny_record(&cfg, 77);
        (model, record)
    }

    fn some_lists(record: &ImpressionRecord, m: usize, q: usize) -> Vec<Vec<u64>> {
        let ids: Vec<u64> = record.candidates.iter().map(|c| c.item_id).collect();
        crate::selection::enumerate_target_lists(&ids, m, q, 5).unwrap()
    }

    #[test]
    fn precompute_stores_n_plus_l_entries() {
        let (model, record) = setup();
        let mut cache = ReprCache::new(1024, 3600);
        let mut counters = OpCounters::default();
        let stored = rank_stage_precompute(&model, &record, &mut cache, &mut counters).unwrap();
        assert_eq!(stored, model.cfg.n + record.history_pages.len());
        assert_eq!(cache.len(), stored);
    }

    #[test]
    fn precompute_is_idempotent_and_matches_fresh_forward() {
        let (model, record) = setup();
        let mut cache = ReprCache::new(1024, 3600);
        let mut counters = OpCounters::default();
        rank_stage_precompute(&model, &record, &mut cache, &mut counters).unwrap();
        let dump1 = cache.dump();
        rank_stage_precompute(&model, &record, &mut cache, &mut counters).unwrap();
        assert_eq!(dump1, cache.dump(), "second precompute must overwrite identically");

        // Stored x'' equals a fresh ucdt forward byte for byte.
        let mut sess = Session::new(&model.registry, false);
        let mut c2 = OpCounters::default();
        let out = model.ucdt_stage(&mut sess, &record, &mut c2).unwrap();
        let d = model.cfg.d;
        let fresh = sess.graph.value(out.reprs).to_bytes();
        for (i, cand) in record.candidates.iter().enumerate() {
            let (_, bytes) = cache
                .get(&CacheKey::Item {
                    request: record.request_id.clone(),
                    item: cand.item_id,
                })
                .unwrap();
            assert_eq!(bytes, fresh[i * d * 8..(i + 1) * d * 8]);
        }
    }

    #[test]
    fn cached_equals_recompute_bit_exact_in_f64() {
        let (model, record) = setup();
        let mut cache = ReprCache::new(1024, 3600);
        let mut counters = OpCounters::default();
        rank_stage_precompute(&model, &record, &mut cache, &mut counters).unwrap();
        let lists = some_lists(&record, model.cfg.m, 6);
        let outcome =
            rerank_stage_score(&model, &record, &lists, Some(&mut cache), RerankMode::Verify)
                .unwrap();
        assert_eq!(outcome.verify_max_abs_diff, Some(0.0));
    }

    #[test]
    fn cached_mode_counters_exclude_rank_work() {
        let (model, record) = setup();
        let mut cache = ReprCache::new(1024, 3600);
        let mut c = OpCounters::default();
        rank_stage_precompute(&model, &record, &mut cache, &mut c).unwrap();
        let q = 5;
        let lists = some_lists(&record, model.cfg.m, q);
        let outcome =
            rerank_stage_score(&model, &record, &lists, Some(&mut cache), RerankMode::Cached)
                .unwrap();
        // LMH only: q stacks of I blocks, one target-page encoding per list,
        // m PTAU queries per list.
        assert_eq!(outcome.counters.hstu_evals, q * model.cfg.i);
        assert_eq!(outcome.counters.self_attention_evals, q);
        assert_eq!(outcome.counters.target_attention_evals, q * model.cfg.m);

        let recompute =
            rerank_stage_score(&model, &record, &lists, None, RerankMode::Recompute).unwrap();
        assert!(recompute.counters.hstu_evals > outcome.counters.hstu_evals);
    }

    #[test]
    fn cache_miss_names_the_key_and_recompute_fallback_matches() {
        let (model, record) = setup();
        let mut cache = ReprCache::new(1024, 10);
        let mut c = OpCounters::default();
        rank_stage_precompute(&model, &record, &mut cache, &mut c).unwrap();
        let lists = some_lists(&record, model.cfg.m, 3);

        let before =
            rerank_stage_score(&model, &record, &lists, Some(&mut cache), RerankMode::Cached)
                .unwrap();

        cache.advance_time(11); // past the TTL
        let err = rerank_stage_score(&model, &record, &lists, Some(&mut cache), RerankMode::Cached)
            .unwrap_err();
        match &err {
            RiaError::CacheMiss { key } => assert!(key.starts_with("item/") || key.starts_with("page/")),
            other => panic!("expected cache miss, got {other}"),
        }

        let fallback =
            rerank_stage_score(&model, &record, &lists, None, RerankMode::Recompute).unwrap();
        for (a, b) in before.lists.iter().zip(&fallback.lists) {
            assert_eq!(a.per_position_pctr, b.per_position_pctr);
        }
    }

    #[test]
    fn eviction_drops_least_recently_written_group() {
        let (model, record) = setup();
        let cfg = model.cfg.clone();
        let entries_per_request = cfg.n + record.history_pages.len();
        let mut cache = ReprCache::new(entries_per_request, 3600);
        let mut c = OpCounters::default();
        rank_stage_precompute(&model, &record, &mut cache, &mut c).unwrap();
        assert_eq!(cache.len(), entries_per_request);

        cache.advance_time(1);
        let record2 = tiny_record(&cfg, 78);
        rank_stage_precompute(&model, &record2, &mut cache, &mut c).unwrap();
        assert_eq!(cache.len(), entries_per_request);
        assert!(cache.stats.evictions >= entries_per_request);
        // Only the newer request's entries remain.
        assert!(cache
            .get(&CacheKey::Item {
                request: record.request_id.clone(),
                item: record.candidates[0].item_id
            })
            .is_err());
    }

    #[test]
    fn hit_rate_is_hits_over_total_and_empty_report_is_zero() {
        let report = PipelineReport::default();
        assert_eq!(report.hit_rate(), 0.0);
        assert!(report.rank_counters.is_zero());
        assert!(report.to_text().contains("hits=0"));

        let mut cache = ReprCache::new(16, 3600);
        cache.put(
            CacheKey::Item {
                request: "r".into(),
                item: 1,
            },
            vec![1],
            vec![0; 8],
        );
        let _ = cache.get(&CacheKey::Item { request: "r".into(), item: 1 });
        let _ = cache.get(&CacheKey::Item { request: "r".into(), item: 2 });
        assert_eq!(cache.stats.hits, 1);
        assert_eq!(cache.stats.misses, 1);
    }

    #[test]
    fn pipeline_simulation_recompute_costs_dominate_cached() {
        let (model, _) = setup();
        let cfg = model.cfg.clone();
        let records: Vec<ImpressionRecord> =
            (0..4).map(|s| tiny_record(&cfg, 200 + s)).collect();

        let mut cache = ReprCache::new(4096, 3600);
        let cached =
            simulate_pipeline(&model, &records, 4, RerankMode::Cached, &mut cache, 9).unwrap();
        let mut cache2 = ReprCache::new(4096, 3600);
        let recompute =
            simulate_pipeline(&model, &records, 4, RerankMode::Recompute, &mut cache2, 9)
                .unwrap();
        assert!(
            recompute.rerank_counters.hstu_evals > cached.rerank_counters.hstu_evals,
            "recompute {} vs cached {}",
            recompute.rerank_counters.hstu_evals,
            cached.rerank_counters.hstu_evals
        );
        assert_eq!(
            cached.rerank_counters.hstu_evals,
            cached.lists_scored * cfg.i
        );
    }
}
