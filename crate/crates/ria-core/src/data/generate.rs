//! Seeded synthetic click-log generator with a planted cross-item effect.
//!
//! Clicks follow
//! `Bernoulli(σ(a_u·b_i + pos_bias_o + γ·Σ_{j≠o} sim(i_o, i_j)·2^{−|o−j|}))`
//! with 16-dimensional latent user/item vectors and cosine similarity
//! between item latents. At γ = 0 clicks depend only on (user, item,
//! position); at γ > 0 an item's click rate depends on which items surround
//! it and how close they sit, which is exactly what a listwise model can
//! pick up and a pointwise model cannot.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{CandidateItem, ContextEvent, ImpressionRecord, Page, PageEntry};
use crate::error::{Result, RiaError};

/// Width of the latent user/item vectors behind the click model.
pub const LATENT_DIM: usize = 16;

/// Entry scale of the latent vectors; user-item dot products then have a
/// spread comparable to the position effects.
const LATENT_SCALE: f64 = 0.4;

/// Context events pick the best of this many uniform draws by user affinity,
/// so the series actually reflects the user's latent taste.
const SERIES_CANDIDATES: usize = 6;

/// Probability that a context event revisits one of the request's
/// candidates instead of a fresh catalog item. Users keep interacting with
/// items they are shown, and this overlap is what lets a model tie the
/// series to the current candidates.
const SERIES_REVISIT_PROB: f64 = 0.5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_requests: usize,
    /// Page length.
    pub m: usize,
    /// Candidate-list length (n >= m).
    pub n: usize,
    /// History pages per request.
    pub l: usize,
    /// Context-series length.
    pub t: usize,
    /// Cross-item context strength.
    pub gamma: f64,
    /// Per-position logit offsets, length m. Doubles as the intercept.
    pub position_bias: Vec<f64>,
    pub noise_seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < self.m {
            return Err(RiaError::Config(format!(
                "candidate count n={} must be >= page length m={}",
                self.n, self.m
            )));
        }
        if self.m == 0 || self.t == 0 || self.n_users == 0 || self.n_requests == 0 {
            return Err(RiaError::Config("counts must be positive".into()));
        }
        if self.n_items < self.n {
            return Err(RiaError::Config(format!(
                "item catalog {} smaller than candidate list {}",
                self.n_items, self.n
            )));
        }
        if self.gamma < 0.0 {
            return Err(RiaError::Config("gamma must be nonnegative".into()));
        }
        if self.position_bias.len() != self.m {
            return Err(RiaError::Config(format!(
                "position_bias has {} entries, page length is {}",
                self.position_bias.len(),
                self.m
            )));
        }
        Ok(())
    }
}

/// The latent structure behind generated clicks. Exposed so tests can
/// Monte-Carlo the analytic mean CTR against the empirical one.
///
/// Latent vectors are derived per index from the seed, so they do not
/// depend on generation order; they are materialized up front because the
/// generator touches them constantly.
pub struct ClickModel {
    cfg: GeneratorConfig,
    users: Vec<Vec<f64>>,
    /// Indexed by item id - 1 (id 0 is the padding item and has no latent).
    items: Vec<Vec<f64>>,
    items_unit: Vec<Vec<f64>>,
}

impl ClickModel {
    pub fn new(cfg: &GeneratorConfig) -> Self {
        let latent = |stream: u64, index: u64| -> Vec<f64> {
            let mut rng = ChaCha12Rng::seed_from_u64(mix3(cfg.noise_seed, stream, index));
            gaussian_vec(&mut rng, LATENT_DIM, LATENT_SCALE)
        };
        let users: Vec<Vec<f64>> = (0..cfg.n_users as u64)
            .map(|u| latent(0x75_73_65_72, u))
            .collect();
        let items: Vec<Vec<f64>> = (1..=cfg.n_items as u64)
            .map(|i| latent(0x69_74_65_6d, i))
            .collect();
        let items_unit = items
            .iter()
            .map(|v| {
                let norm = dot(v, v).sqrt();
                if norm == 0.0 {
                    v.clone()
                } else {
                    v.iter().map(|x| x / norm).collect()
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            users,
            items,
            items_unit,
        }
    }

    pub fn user_vec(&self, user: u64) -> &[f64] {
        &self.users[user as usize]
    }

    pub fn item_vec(&self, item: u64) -> &[f64] {
        &self.items[item as usize - 1]
    }

    pub fn affinity(&self, user_vec: &[f64], item: u64) -> f64 {
        dot(user_vec, self.item_vec(item))
    }

    /// Click logit of the item at 1-based `position` on a page of `items`.
    pub fn logit(&self, user_vec: &[f64], items: &[u64], position: usize) -> f64 {
        let o = position - 1;
        let own = self.item_vec(items[o]);
        let own_unit = &self.items_unit[items[o] as usize - 1];
        let mut context = 0.0;
        for (j, &other) in items.iter().enumerate() {
            if j == o {
                continue;
            }
            let decay = 0.5f64.powi((o as i32 - j as i32).abs());
            context += dot(own_unit, &self.items_unit[other as usize - 1]) * decay;
        }
        dot(user_vec, own) + self.cfg.position_bias[o] + self.cfg.gamma * context
    }

    pub fn click_prob(&self, user_vec: &[f64], items: &[u64], position: usize) -> f64 {
        sigmoid(self.logit(user_vec, items, position))
    }
}

/// Generate `cfg.n_requests` records, deterministic per seed and per
/// request index (so ranges may be produced independently).
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<ImpressionRecord>> {
    cfg.validate()?;
    let model = ClickModel::new(cfg);
    (0..cfg.n_requests)
        .map(|idx| Ok(generate_one(cfg, &model, idx as u64)))
        .collect()
}

fn generate_one(cfg: &GeneratorConfig, model: &ClickModel, index: u64) -> ImpressionRecord {
    let mut rng = ChaCha12Rng::seed_from_u64(mix3(cfg.noise_seed, 0x72_65_71, index));
    let user = rng.gen_range(0..cfg.n_users as u64);
    let user_vec = model.user_vec(user);

    let candidate_ids = sample_distinct(&mut rng, cfg.n_items, cfg.n);
    let candidates = candidate_ids
        .iter()
        .map(|&item_id| CandidateItem {
            item_id,
            fields: BTreeMap::new(),
        })
        .collect();

    // Context series: a mix of revisited candidates and taste-biased
    // catalog picks, at one-minute spacing.
    let base_ts = 1_600_000_000 + index as i64 * 3_600;
    let context_events = (0..cfg.t)
        .map(|j| {
            let item = if rng.gen_range(0.0..1.0) < SERIES_REVISIT_PROB {
                candidate_ids[rng.gen_range(0..candidate_ids.len())]
            } else {
                let mut best = rng.gen_range(1..=cfg.n_items as u64);
                let mut best_score = model.affinity(user_vec, best);
                for _ in 1..SERIES_CANDIDATES {
                    let cand = rng.gen_range(1..=cfg.n_items as u64);
                    let score = model.affinity(user_vec, cand);
                    if score > best_score {
                        best = cand;
                        best_score = score;
                    }
                }
                best
            };
            ContextEvent {
                ts: base_ts + j as i64 * 60,
                fields: BTreeMap::from([("item".to_string(), item)]),
            }
        })
        .collect();

    let history_pages = (0..cfg.l)
        .map(|_| {
            let items = sample_distinct(&mut rng, cfg.n_items, cfg.m);
            sample_page(model, user_vec, &items, &mut rng)
        })
        .collect();

    // Exposed page: a uniform ordered m-subset of the candidates.
    let mut order: Vec<usize> = (0..cfg.n).collect();
    for i in 0..cfg.m {
        let j = rng.gen_range(i..cfg.n);
        order.swap(i, j);
    }
    let page_items: Vec<u64> = order[..cfg.m].iter().map(|&i| candidate_ids[i]).collect();
    let target_page = sample_page(model, user_vec, &page_items, &mut rng);

    ImpressionRecord {
        request_id: format!("req-{:08}", index),
        user_id: format!("user-{user}"),
        context_events,
        candidates,
        history_pages,
        target_page,
    }
}

fn sample_page(
    model: &ClickModel,
    user_vec: &[f64],
    items: &[u64],
    rng: &mut ChaCha12Rng,
) -> Page {
    let entries = items
        .iter()
        .enumerate()
        .map(|(o, &item_id)| {
            let p = model.click_prob(user_vec, items, o + 1);
            PageEntry {
                item_id,
                position: o as u32 + 1,
                click: u8::from(rng.gen_range(0.0..1.0) < p),
            }
        })
        .collect();
    Page { items: entries }
}

/// `count` distinct item ids in 1..=n_items by rejection (the catalog is
/// much larger than a page, so retries are rare).
fn sample_distinct(rng: &mut ChaCha12Rng, n_items: usize, count: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(count);
    while out.len() < count {
        let id = rng.gen_range(1..=n_items as u64);
        if !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn gaussian_vec(rng: &mut ChaCha12Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            // Box-Muller from two uniforms.
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u.ln()).sqrt() * v.cos() * scale
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}


fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
