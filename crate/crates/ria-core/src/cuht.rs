//! Context-aware User History and Target: every page (history and target)
//! is encoded by one shared self-attention (PIAU), then each target
//! position attends over the same position across history pages (PTAU).
//!
//! Page rows are `(item embedding + click-marker embedding) ⊕ position
//! embedding`, width D' = D + P_pos. One learned position table of m rows
//! serves all pages.

use rand_chacha::ChaCha12Rng;

use crate::ec::OpCounters;
use crate::error::{Result, RiaError};
use crate::graph::TensorId;
use crate::layers::{
    self_attention, target_attention_grouped, EmbeddingTable, SelfAttentionParams,
    TargetAttentionParams,
};
use crate::model::RiaConfig;
use crate::params::{ParamId, ParamRegistry, Session};
use crate::tensor::{Elem, Tensor};

/// Click-marker vocabulary: exposed without click (also padding), clicked,
/// and the target page whose labels are unknown at scoring time.
pub const MARKER_NONE: usize = 0;
pub const MARKER_CLICK: usize = 1;
pub const MARKER_TARGET: usize = 2;

pub struct CuhtParams<E: Elem> {
    pub piau: SelfAttentionParams<E>,
    pub ptau: TargetAttentionParams<E>,
    pub pos_table: EmbeddingTable<E>,
    pub marker_table: EmbeddingTable<E>,
    no_history: Option<ParamId>,
    m: usize,
    d_prime: usize,
}

impl<E: Elem> CuhtParams<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        cfg: &RiaConfig,
    ) -> Result<Self> {
        let d_prime = cfg.d_prime();
        let piau = SelfAttentionParams::init(registry, rng, "cuht.piau", d_prime, cfg.heads)?;
        let ptau = TargetAttentionParams::init(
            registry,
            rng,
            "cuht.ptau",
            d_prime,
            d_prime,
            cfg.ta_softmax,
        );
        let pos_table = EmbeddingTable::init(registry, rng, "position", cfg.m, cfg.p_pos);
        let marker_table = EmbeddingTable::init(registry, rng, "click-marker", 3, cfg.d);
        let no_history = cfg
            .learned_no_history
            .then(|| registry.add("cuht.no_history", crate::params::init_uniform(rng, &[1, d_prime], d_prime)));
        Ok(Self {
            piau,
            ptau,
            pos_table,
            marker_table,
            no_history,
            m: cfg.m,
            d_prime,
        })
    }
}

/// One assembled page: `[m × D']` rows plus the keep-mask marking real
/// (non-padding) slots.
pub struct PageTensors {
    pub rows: TensorId,
    pub keep: Vec<bool>,
}

/// Build page rows from item indices and click markers, padding short pages
/// with the dedicated padding item (index 0) which the keep-mask then drops
/// from attention.
pub fn build_page<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    item_table: &EmbeddingTable<E>,
    items: &[usize],
    markers: &[usize],
    m: usize,
) -> Result<PageTensors> {
    if items.is_empty() || items.len() > m || items.len() != markers.len() {
        return Err(RiaError::Contract {
            module: "cuht",
            detail: format!(
                "page of {} items / {} markers does not fit length {m}",
                items.len(),
                markers.len()
            ),
        });
    }
    let mut padded_items = items.to_vec();
    let mut padded_markers = markers.to_vec();
    padded_items.resize(m, 0);
    padded_markers.resize(m, MARKER_NONE);

    let item_part = item_table.lookup(sess, &padded_items)?;
    let marker_part = params.marker_table.lookup(sess, &padded_markers)?;
    let base = sess.graph.add(item_part, marker_part)?;
    let positions: Vec<usize> = (0..m).collect();
    let pos_part = params.pos_table.lookup(sess, &positions)?;
    let rows = sess.graph.concat_last(&[base, pos_part])?;

    let mut keep = vec![true; items.len()];
    keep.resize(m, false);
    Ok(PageTensors { rows, keep })
}

/// H_k = selfAttention(E_k) with the one shared parameter set.
pub fn piau_encode_page<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    page: &PageTensors,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    let keep = page.keep.iter().any(|&k| !k).then_some(page.keep.as_slice());
    counters.self_attention_evals += 1;
    self_attention(sess, page.rows, &params.piau, keep)
}

pub fn piau_encode<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    pages: &[PageTensors],
    counters: &mut OpCounters,
) -> Result<Vec<TensorId>> {
    pages
        .iter()
        .map(|p| piau_encode_page(sess, params, p, counters))
        .collect()
}

/// w_o = Attention(h_{o,L+1}, {h_{o,k}}_{k=1..L}) for every position o.
pub fn ptau_attend<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    history: &[TensorId],
    target_enc: TensorId,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    if history.is_empty() {
        return Err(RiaError::Contract {
            module: "cuht",
            detail: "PTAU over an empty history; callers substitute the zero-history fallback"
                .into(),
        });
    }
    let m = params.m;
    let l = history.len();
    for &h in history {
        if sess.graph.value(h).shape() != [m, params.d_prime] {
            return Err(RiaError::Shape {
                op: "ptau",
                lhs: sess.graph.value(h).shape().to_vec(),
                rhs: vec![m, params.d_prime],
            });
        }
    }
    // Keys for position o are row o of every history page, kept in page order.
    let all = sess.graph.concat_rows(history)?;
    let mut indices = Vec::with_capacity(m * l);
    for o in 0..m {
        for k in 0..l {
            indices.push(k * m + o);
        }
    }
    let keys = sess.graph.gather_rows(all, &indices)?;
    counters.target_attention_evals += m;
    counters.mlp_evals += 1;
    target_attention_grouped(sess, target_enc, keys, l, &params.ptau)
}

/// PTAU, or the no-history fallback (zeros, or the learned vector when
/// configured) for users without any usable page.
pub fn ptau_or_fallback<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    history: &[TensorId],
    target_enc: TensorId,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    if !history.is_empty() {
        return ptau_attend(sess, params, history, target_enc, counters);
    }
    match params.no_history {
        Some(id) => {
            let row = sess.param(id);
            sess.graph.tile_rows(row, params.m)
        }
        None => Ok(sess
            .graph
            .constant(Tensor::zeros(&[params.m, params.d_prime]))),
    }
}

/// Composition of PIAU over history + target and PTAU: the full module
/// forward producing the position context `[m × D']`.
pub fn cuht_forward<E: Elem>(
    sess: &mut Session<E>,
    params: &CuhtParams<E>,
    history_pages: &[PageTensors],
    target_page: &PageTensors,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    let history = piau_encode(sess, params, history_pages, counters)?;
    let target_enc = piau_encode_page(sess, params, target_page, counters)?;
    ptau_or_fallback(sess, params, &history, target_enc, counters)
}
