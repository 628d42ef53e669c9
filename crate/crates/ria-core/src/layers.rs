//! Building blocks composed by the model: embedding tables, row-wise MLPs,
//! the gated transduction block, target attention, and shared self-attention.
//!
//! All forwards take a [`Session`] so parameters bind lazily into the graph
//! and gradients flow back to shared tables from every use site.

use rand_chacha::ChaCha12Rng;

use crate::error::{Result, RiaError};
use crate::graph::TensorId;
use crate::params::{init_uniform, ParamId, ParamRegistry, Session};
use crate::tensor::{Elem, Tensor};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-6;

/// Attention mask over a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// Position i attends to positions <= i (chronological series).
    Causal,
    /// Every position attends to every position (sets and pages).
    Full,
}

// ---------------------------------------------------------------------------
// Embedding tables

/// One lookup table per logical feature field. Out-of-range indices are
/// errors, never clamped.
pub struct EmbeddingTable<E: Elem> {
    pub field: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub rows: ParamId,
    marker: std::marker::PhantomData<E>,
}

impl<E: Elem> EmbeddingTable<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        field: &str,
        vocab_size: usize,
        dim: usize,
    ) -> Self {
        let rows = registry.add(
            format!("emb.{field}"),
            init_uniform(rng, &[vocab_size, dim], dim),
        );
        Self {
            field: field.to_string(),
            vocab_size,
            dim,
            rows,
            marker: std::marker::PhantomData,
        }
    }

    pub fn check(&self, index: usize) -> Result<usize> {
        if index >= self.vocab_size {
            return Err(RiaError::Lookup {
                field: self.field.clone(),
                index,
                vocab: self.vocab_size,
            });
        }
        Ok(index)
    }

    /// Rows of the table at `ids`, shape `[ids.len() × dim]`.
    pub fn lookup(&self, sess: &mut Session<E>, ids: &[usize]) -> Result<TensorId> {
        for &id in ids {
            self.check(id)?;
        }
        let table = sess.param(self.rows);
        sess.graph.gather_rows(table, ids)
    }
}

/// Concatenate per-field lookups in declaration order; total width is the
/// sum of the field dims.
pub fn embed_features<E: Elem>(
    sess: &mut Session<E>,
    fields: &[(&EmbeddingTable<E>, &[usize])],
) -> Result<TensorId> {
    if fields.is_empty() {
        return Err(RiaError::Contract {
            module: "layers",
            detail: "embed_features with no fields".into(),
        });
    }
    let count = fields[0].1.len();
    for (table, ids) in fields {
        if ids.len() != count {
            return Err(RiaError::Contract {
                module: "layers",
                detail: format!(
                    "field `{}` has {} ids, expected {count}",
                    table.field,
                    ids.len()
                ),
            });
        }
    }
    let parts: Vec<TensorId> = fields
        .iter()
        .map(|(table, ids)| table.lookup(sess, ids))
        .collect::<Result<_>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    sess.graph.concat_last(&parts)
}

// ---------------------------------------------------------------------------
// MLP

/// Widths of a row-wise MLP, input first. Hidden activations are SiLU; the
/// output is a raw logit (call sites apply sigmoid where the equations do).
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self {
            widths: widths.to_vec(),
        }
    }
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

pub struct Mlp<E: Elem> {
    spec: MlpSpec,
    layers: Vec<Linear>,
    marker: std::marker::PhantomData<E>,
}

impl<E: Elem> Mlp<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        spec: MlpSpec,
    ) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                w: registry.add(
                    format!("{prefix}.{i}.w"),
                    init_uniform(rng, &[w[0], w[1]], w[0]),
                ),
                b: registry.add(format!("{prefix}.{i}.b"), Tensor::zeros(&[w[1]])),
            })
            .collect();
        Self {
            spec,
            layers,
            marker: std::marker::PhantomData,
        }
    }

    pub fn in_width(&self) -> usize {
        self.spec.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.spec.widths.last().unwrap()
    }

    /// Multiply one layer's weight matrix by a constant factor.
    pub fn scale_layer_weights(&self, registry: &mut ParamRegistry<E>, layer: usize, factor: f64) {
        let f = E::from_f64(factor);
        for v in registry.get_mut(self.layers[layer].w).data_mut() {
            *v = *v * f;
        }
    }

    /// Zero the final linear map so the MLP outputs exactly zero everywhere.
    pub fn zero_output_layer(&self, registry: &mut ParamRegistry<E>) {
        let last = self.layers.last().unwrap();
        for v in registry.get_mut(last.w).data_mut() {
            *v = E::zero();
        }
        for v in registry.get_mut(last.b).data_mut() {
            *v = E::zero();
        }
    }

    /// Row-wise application: `[r × w0] -> [r × wn]`. No cross-row mixing.
    pub fn apply(&self, sess: &mut Session<E>, x: TensorId) -> Result<TensorId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = sess.param(layer.w);
            let b = sess.param(layer.b);
            let lin = sess.graph.matmul(h, w)?;
            h = sess.graph.add(lin, b)?;
            if i < last {
                h = sess.graph.silu(h);
            }
        }
        Ok(h)
    }
}

// ---------------------------------------------------------------------------
// HSTU block

/// Gated, softmax-free transduction block.
///
/// With `(U, V, Q, K)` the four `d`-wide splits of `SiLU(f1(X))`:
/// `A = SiLU(Q·Kᵀ/√d)/s` with masked entries contributing zero, and the
/// output is `X + f2(layer_norm(A·V ⊙ U))`. `f2` starts at zero, so a fresh
/// block is the identity map.
pub struct HstuBlockParams<E: Elem> {
    pub d: usize,
    pub heads: usize,
    pub mask_mode: MaskMode,
    f1: Linear,
    f2: Linear,
    gamma: ParamId,
    beta: ParamId,
    marker: std::marker::PhantomData<E>,
}

impl<E: Elem> HstuBlockParams<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        mask_mode: MaskMode,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(RiaError::Config(format!(
                "head count {heads} does not divide width {d}"
            )));
        }
        let f1 = Linear {
            w: registry.add(format!("{prefix}.f1.w"), init_uniform(rng, &[d, 4 * d], d)),
            b: registry.add(format!("{prefix}.f1.b"), Tensor::zeros(&[4 * d])),
        };
        // Zero f2 keeps the block at the identity until training moves it.
        let f2 = Linear {
            w: registry.add(format!("{prefix}.f2.w"), Tensor::zeros(&[d, d])),
            b: registry.add(format!("{prefix}.f2.b"), Tensor::zeros(&[d])),
        };
        let gamma = registry.add(format!("{prefix}.norm.gamma"), {
            Tensor::new(&[d], vec![E::one(); d]).expect("gamma shape")
        });
        let beta = registry.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[d]));
        Ok(Self {
            d,
            heads,
            mask_mode,
            f1,
            f2,
            gamma,
            beta,
            marker: std::marker::PhantomData,
        })
    }

    pub fn zero_f2(&self, registry: &mut ParamRegistry<E>) {
        for v in registry.get_mut(self.f2.w).data_mut() {
            *v = E::zero();
        }
        for v in registry.get_mut(self.f2.b).data_mut() {
            *v = E::zero();
        }
    }
}

/// `[s × d] -> [s × d]`, shape preserving.
pub fn hstu_block<E: Elem>(
    sess: &mut Session<E>,
    x: TensorId,
    params: &HstuBlockParams<E>,
) -> Result<TensorId> {
    let shape = sess.graph.value(x).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.d {
        return Err(RiaError::Shape {
            op: "hstu-block",
            lhs: shape,
            rhs: vec![params.d],
        });
    }
    let s = shape[0];
    let d = params.d;
    let dh = d / params.heads;

    let w1 = sess.param(params.f1.w);
    let b1 = sess.param(params.f1.b);
    let pre = sess.graph.matmul(x, w1)?;
    let pre = sess.graph.add(pre, b1)?;
    let gates = sess.graph.silu(pre);
    let parts = sess.graph.split_last(gates, 4)?;
    let (u, v, q, k) = (parts[0], parts[1], parts[2], parts[3]);

    let mask = match params.mask_mode {
        MaskMode::Full => None,
        MaskMode::Causal => {
            let mut m = vec![E::zero(); s * s];
            for i in 0..s {
                for j in 0..=i {
                    m[i * s + j] = E::one();
                }
            }
            Some(sess.graph.constant(Tensor::new(&[s, s], m)?))
        }
    };

    let mut head_ctx = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = if params.heads == 1 { q } else { sess.graph.narrow_last(q, h * dh, dh)? };
        let kh = if params.heads == 1 { k } else { sess.graph.narrow_last(k, h * dh, dh)? };
        let vh = if params.heads == 1 { v } else { sess.graph.narrow_last(v, h * dh, dh)? };
        let kt = sess.graph.transpose(kh)?;
        let scores = sess.graph.matmul(qh, kt)?;
        let scores = sess.graph.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
        let mut attn = sess.graph.silu(scores);
        attn = sess.graph.scale(attn, E::from_f64(1.0 / s as f64));
        if let Some(m) = mask {
            attn = sess.graph.mul(attn, m)?;
        }
        head_ctx.push(sess.graph.matmul(attn, vh)?);
    }
    let ctx = if head_ctx.len() == 1 {
        head_ctx[0]
    } else {
        sess.graph.concat_last(&head_ctx)?
    };

    let gated = sess.graph.mul(ctx, u)?;
    let gamma = sess.param(params.gamma);
    let beta = sess.param(params.beta);
    let normed = sess.graph.layer_norm(gated, gamma, beta, E::from_f64(LN_EPS))?;
    let w2 = sess.param(params.f2.w);
    let b2 = sess.param(params.f2.b);
    let proj = sess.graph.matmul(normed, w2)?;
    let proj = sess.graph.add(proj, b2)?;
    sess.graph.add(x, proj)
}

// ---------------------------------------------------------------------------
// Target attention

/// DIN-style target attention: a learned scorer over
/// `[q ⊕ k ⊕ (q−k) ⊕ (q⊙k)]` produces one logit per key; weights are a
/// softmax over keys unless normalization is disabled.
pub struct TargetAttentionParams<E: Elem> {
    pub d: usize,
    pub softmax: bool,
    scorer: Mlp<E>,
}

/// Extra gain on the scorer layers at init. Uniformly small weights start
/// the softmax near uniform, where its gradient w.r.t. the scorer is second
/// order; attention logits with spread around one break that plateau.
const SCORER_HIDDEN_GAIN: f64 = 2.0;
const SCORER_OUTPUT_GAIN: f64 = 6.0;

impl<E: Elem> TargetAttentionParams<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d: usize,
        scorer_hidden: usize,
        softmax: bool,
    ) -> Self {
        let scorer = Mlp::init(
            registry,
            rng,
            &format!("{prefix}.scorer"),
            MlpSpec::new(&[4 * d, scorer_hidden, 1]),
        );
        scorer.scale_layer_weights(registry, 0, SCORER_HIDDEN_GAIN);
        scorer.scale_layer_weights(registry, 1, SCORER_OUTPUT_GAIN);
        Self { d, softmax, scorer }
    }
}

/// Batched target attention: `groups` queries, each with its own block of
/// `keys_per_group` consecutive key rows. Returns `[groups × d]`.
pub fn target_attention_grouped<E: Elem>(
    sess: &mut Session<E>,
    queries: TensorId,
    keys: TensorId,
    keys_per_group: usize,
    params: &TargetAttentionParams<E>,
) -> Result<TensorId> {
    let qs = sess.graph.value(queries).shape().to_vec();
    let ks = sess.graph.value(keys).shape().to_vec();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != params.d || ks[1] != params.d {
        return Err(RiaError::Shape {
            op: "target-attention",
            lhs: qs,
            rhs: ks,
        });
    }
    if keys_per_group == 0 {
        return Err(RiaError::Contract {
            module: "layers",
            detail: "target attention over an empty key set".into(),
        });
    }
    let groups = qs[0];
    if ks[0] != groups * keys_per_group {
        return Err(RiaError::Shape {
            op: "target-attention",
            lhs: vec![groups, keys_per_group],
            rhs: ks,
        });
    }
    let d = params.d;
    let t = keys_per_group;

    let qrep = sess.graph.repeat_rows(queries, t)?;
    let diff = sess.graph.sub(qrep, keys)?;
    let had = sess.graph.mul(qrep, keys)?;
    let feats = sess.graph.concat_last(&[qrep, keys, diff, had])?;
    let logits = params.scorer.apply(sess, feats)?; // [groups*t × 1]
    let weights = if params.softmax {
        let rows = sess.graph.reshape(logits, &[groups, t])?;
        let sm = sess.graph.softmax_last(rows)?;
        sess.graph.reshape(sm, &[groups * t, 1])?
    } else {
        logits
    };
    // Broadcast the per-key weight across the key width, then reduce groups.
    let ones = sess.graph.constant(Tensor::new(&[1, d], vec![E::one(); d])?);
    let wmat = sess.graph.matmul(weights, ones)?;
    let weighted = sess.graph.mul(keys, wmat)?;
    sess.graph.sum_row_groups(weighted, t)
}

/// Single-query form: `q: [d]`, `keys: [T × d]` -> `[d]`.
pub fn target_attention<E: Elem>(
    sess: &mut Session<E>,
    q: TensorId,
    keys: TensorId,
    params: &TargetAttentionParams<E>,
) -> Result<TensorId> {
    let t = sess.graph.value(keys).shape()[0];
    let d = params.d;
    let q2 = sess.graph.reshape(q, &[1, d])?;
    let out = target_attention_grouped(sess, q2, keys, t, params)?;
    sess.graph.reshape(out, &[d])
}

// ---------------------------------------------------------------------------
// Self-attention (parameter-shared across pages)

/// Plain scaled-dot-product self-attention with a full mask. One parameter
/// set serves every page it is applied to.
pub struct SelfAttentionParams<E: Elem> {
    pub d: usize,
    pub heads: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    marker: std::marker::PhantomData<E>,
}

impl<E: Elem> SelfAttentionParams<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(RiaError::Config(format!(
                "head count {heads} does not divide width {d}"
            )));
        }
        Ok(Self {
            d,
            heads,
            wq: registry.add(format!("{prefix}.wq"), init_uniform(rng, &[d, d], d)),
            wk: registry.add(format!("{prefix}.wk"), init_uniform(rng, &[d, d], d)),
            wv: registry.add(format!("{prefix}.wv"), init_uniform(rng, &[d, d], d)),
            marker: std::marker::PhantomData,
        })
    }
}

/// `[m × d] -> [m × d]`. `keep`, when present, drops the masked positions
/// from every attention row (padding items).
pub fn self_attention<E: Elem>(
    sess: &mut Session<E>,
    e: TensorId,
    params: &SelfAttentionParams<E>,
    keep: Option<&[bool]>,
) -> Result<TensorId> {
    let shape = sess.graph.value(e).shape().to_vec();
    if shape.len() != 2 || shape[1] != params.d {
        return Err(RiaError::Shape {
            op: "self-attention",
            lhs: shape,
            rhs: vec![params.d],
        });
    }
    let dh = params.d / params.heads;
    let wq = sess.param(params.wq);
    let wk = sess.param(params.wk);
    let wv = sess.param(params.wv);
    let q = sess.graph.matmul(e, wq)?;
    let k = sess.graph.matmul(e, wk)?;
    let v = sess.graph.matmul(e, wv)?;

    let mut head_out = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = if params.heads == 1 { q } else { sess.graph.narrow_last(q, h * dh, dh)? };
        let kh = if params.heads == 1 { k } else { sess.graph.narrow_last(k, h * dh, dh)? };
        let vh = if params.heads == 1 { v } else { sess.graph.narrow_last(v, h * dh, dh)? };
        let kt = sess.graph.transpose(kh)?;
        let scores = sess.graph.matmul(qh, kt)?;
        let scores = sess.graph.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = match keep {
            Some(mask) => sess.graph.softmax_last_masked(scores, mask)?,
            None => sess.graph.softmax_last(scores)?,
        };
        head_out.push(sess.graph.matmul(attn, vh)?);
    }
    if head_out.len() == 1 {
        Ok(head_out[0])
    } else {
        sess.graph.concat_last(&head_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{all_probes, compare, DEFAULT_STEP};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
        init_uniform(rng, shape, 1)
    }

    #[test]
    fn hstu_zero_f2_is_identity() {
        let mut r = rng(1);
        let mut reg = ParamRegistry::<f64>::new();
        let block = HstuBlockParams::init(&mut reg, &mut r, "blk", 6, 1, MaskMode::Full).unwrap();
        let x = rand_tensor(&mut r, &[4, 6]);
        let mut sess = Session::new(&reg, false);
        let xid = sess.graph.constant(x.clone());
        let y = hstu_block(&mut sess, xid, &block).unwrap();
        assert_eq!(sess.graph.value(y).data(), x.data());
    }

    #[test]
    fn hstu_single_token_matches_hand_evaluation() {
        let mut r = rng(2);
        let mut reg = ParamRegistry::<f64>::new();
        let d = 2;
        let block = HstuBlockParams::init(&mut reg, &mut r, "blk", d, 1, MaskMode::Full).unwrap();
        // Make f2 nonzero so the test exercises the whole formula.
        let f2w = reg.lookup("blk.f2.w").unwrap();
        let vals = [0.3, -0.2, 0.1, 0.4];
        for (dst, v) in reg.get_mut(f2w).data_mut().iter_mut().zip(vals) {
            *dst = v;
        }
        let x = [0.7, -0.4];

        let silu = |v: f64| v / (1.0 + (-v).exp());
        let w1 = reg.get(reg.lookup("blk.f1.w").unwrap()).data().to_vec();
        let b1 = reg.get(reg.lookup("blk.f1.b").unwrap()).data().to_vec();
        let mut h = [0.0; 8];
        for j in 0..8 {
            h[j] = silu(x[0] * w1[j] + x[1] * w1[8 + j] + b1[j]);
        }
        let (u, v, q, k) = (&h[0..2], &h[2..4], &h[4..6], &h[6..8]);
        let score = (q[0] * k[0] + q[1] * k[1]) / (d as f64).sqrt();
        let a = silu(score) / 1.0;
        let gated = [a * v[0] * u[0], a * v[1] * u[1]];
        let mean = (gated[0] + gated[1]) / 2.0;
        let var = ((gated[0] - mean).powi(2) + (gated[1] - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let normed = [(gated[0] - mean) * inv, (gated[1] - mean) * inv];
        let expect = [
            x[0] + normed[0] * vals[0] + normed[1] * vals[2],
            x[1] + normed[0] * vals[1] + normed[1] * vals[3],
        ];

        let mut sess = Session::new(&reg, false);
        let xid = sess.graph.constant(Tensor::from_f64(&[1, 2], &x).unwrap());
        let y = hstu_block(&mut sess, xid, &block).unwrap();
        let got = sess.graph.value(y).data();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "got {g}, expected {e}");
        }
    }

    #[test]
    fn hstu_causal_mask_localizes_perturbations() {
        let mut r = rng(3);
        let mut reg = ParamRegistry::<f64>::new();
        let block = HstuBlockParams::init(&mut reg, &mut r, "blk", 4, 1, MaskMode::Causal).unwrap();
        // Nonzero f2 so attention output reaches the residual.
        let f2w = reg.lookup("blk.f2.w").unwrap();
        let mut rr = rng(33);
        *reg.get_mut(f2w) = rand_tensor(&mut rr, &[4, 4]);

        let s = 5;
        let base = rand_tensor(&mut r, &[s, 4]);
        let run = |input: &Tensor<f64>| {
            let mut sess = Session::new(&reg, false);
            let xid = sess.graph.constant(input.clone());
            let y = hstu_block(&mut sess, xid, &block).unwrap();
            sess.graph.value(y).data().to_vec()
        };
        let out0 = run(&base);
        for j in 0..s {
            let mut perturbed = base.clone();
            perturbed.data_mut()[j * 4] += 0.5;
            let out = run(&perturbed);
            for pos in 0..s {
                let changed = (0..4).any(|c| out[pos * 4 + c] != out0[pos * 4 + c]);
                if pos < j {
                    assert!(!changed, "position {pos} changed by perturbing token {j}");
                } else if pos == j {
                    assert!(changed, "position {pos} unaffected by its own perturbation");
                }
            }
        }
    }

    #[test]
    fn hstu_gradients_match_finite_differences() {
        let mut r = rng(4);
        let mut reg = ParamRegistry::<f64>::new();
        let block = HstuBlockParams::init(&mut reg, &mut r, "blk", 4, 1, MaskMode::Causal).unwrap();
        let x = reg.add("x", rand_tensor(&mut r, &[3, 4]));
        // Nonzero f2 so its branch carries gradient.
        let f2w = reg.lookup("blk.f2.w").unwrap();
        let mut rr = rng(44);
        *reg.get_mut(f2w) = rand_tensor(&mut rr, &[4, 4]);

        let loss = |reg: &ParamRegistry<f64>| {
            let mut sess = Session::new(reg, false);
            let xid = sess.param(x);
            let y = hstu_block(&mut sess, xid, &block)?;
            let sq = sess.graph.mul(y, y)?;
            let l = sess.graph.sum(sq);
            sess.graph.value(l).item()
        };

        let mut sess = Session::new(&reg, true);
        let xid = sess.param(x);
        let y = hstu_block(&mut sess, xid, &block).unwrap();
        let sq = sess.graph.mul(y, y).unwrap();
        let l = sess.graph.sum(sq);
        let grads = sess.backward(l).unwrap();

        let probes = all_probes(&reg);
        let report = compare(&mut reg, &grads, &probes, DEFAULT_STEP, 1e-3, loss).unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn target_attention_single_key_returns_it() {
        let mut r = rng(5);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = TargetAttentionParams::init(&mut reg, &mut r, "ta", 3, 4, true);
        let mut sess = Session::new(&reg, false);
        let q = sess.graph.constant(Tensor::from_f64(&[3], &[0.2, -0.7, 1.0]).unwrap());
        let keys = sess.graph.constant(Tensor::from_f64(&[1, 3], &[2.0, 3.0, -1.0]).unwrap());
        let out = target_attention(&mut sess, q, keys, &ta).unwrap();
        assert_eq!(sess.graph.value(out).data(), &[2.0, 3.0, -1.0]);
    }

    #[test]
    fn target_attention_equal_keys_returns_that_key() {
        let mut r = rng(6);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = TargetAttentionParams::init(&mut reg, &mut r, "ta", 2, 4, true);
        let mut sess = Session::new(&reg, false);
        let q = sess.graph.constant(Tensor::from_f64(&[2], &[0.4, 0.1]).unwrap());
        let keys = sess
            .graph
            .constant(Tensor::from_f64(&[4, 2], &[1.5, -0.5, 1.5, -0.5, 1.5, -0.5, 1.5, -0.5]).unwrap());
        let out = target_attention(&mut sess, q, keys, &ta).unwrap();
        let got = sess.graph.value(out).data();
        assert!((got[0] - 1.5).abs() < 1e-12);
        assert!((got[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn target_attention_is_key_order_invariant() {
        let mut r = rng(7);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = TargetAttentionParams::init(&mut reg, &mut r, "ta", 3, 5, true);
        let q = Tensor::from_f64(&[3], &[0.3, 0.9, -0.2]).unwrap();
        let keys: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rand_tensor(&mut r, &[1]).data()[0]).collect())
            .collect();

        let run = |order: &[usize]| {
            let flat: Vec<f64> = order.iter().flat_map(|&i| keys[i].clone()).collect();
            let mut sess = Session::new(&reg, false);
            let qid = sess.graph.constant(q.clone());
            let kid = sess.graph.constant(Tensor::from_f64(&[6, 3], &flat).unwrap());
            let out = target_attention(&mut sess, qid, kid, &ta).unwrap();
            sess.graph.value(out).data().to_vec()
        };
        let base = run(&[0, 1, 2, 3, 4, 5]);
        let mut order: Vec<usize> = (0..6).collect();
        let mut perm_rng = rng(70);
        for _ in 0..10 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut perm_rng);
            let permuted = run(&order);
            for (a, b) in base.iter().zip(&permuted) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn target_attention_output_in_key_hull_for_d1() {
        let mut r = rng(8);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = TargetAttentionParams::init(&mut reg, &mut r, "ta", 1, 4, true);
        for trial in 0..20 {
            let mut tr = rng(100 + trial);
            let keys = rand_tensor(&mut tr, &[5, 1]);
            let lo = keys.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = keys.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sess = Session::new(&reg, false);
            let q = sess.graph.constant(rand_tensor(&mut tr, &[1]));
            let kid = sess.graph.constant(keys);
            let out = target_attention(&mut sess, q, kid, &ta).unwrap();
            let v = sess.graph.value(out).data()[0];
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn target_attention_gradcheck() {
        let mut r = rng(9);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = TargetAttentionParams::init(&mut reg, &mut r, "ta", 3, 4, true);
        let q = reg.add("q", rand_tensor(&mut r, &[2, 3]));
        let keys = reg.add("keys", rand_tensor(&mut r, &[8, 3]));

        let loss = |reg: &ParamRegistry<f64>| {
            let mut sess = Session::new(reg, false);
            let qid = sess.param(q);
            let kid = sess.param(keys);
            let out = target_attention_grouped(&mut sess, qid, kid, 4, &ta)?;
            let sq = sess.graph.mul(out, out)?;
            let l = sess.graph.sum(sq);
            sess.graph.value(l).item()
        };
        let mut sess = Session::new(&reg, true);
        let qid = sess.param(q);
        let kid = sess.param(keys);
        let out = target_attention_grouped(&mut sess, qid, kid, 4, &ta).unwrap();
        let sq = sess.graph.mul(out, out).unwrap();
        let l = sess.graph.sum(sq);
        let grads = sess.backward(l).unwrap();

        let probes = all_probes(&reg);
        let report = compare(&mut reg, &grads, &probes, DEFAULT_STEP, 1e-3, loss).unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn self_attention_single_row_is_value_projection() {
        let mut r = rng(10);
        let mut reg = ParamRegistry::<f64>::new();
        let sa = SelfAttentionParams::init(&mut reg, &mut r, "sa", 3, 1).unwrap();
        let x = [0.5, -1.0, 0.25];
        let wv = reg.get(reg.lookup("sa.wv").unwrap()).data().to_vec();
        let expect: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| x[i] * wv[i * 3 + j]).sum())
            .collect();
        let mut sess = Session::new(&reg, false);
        let e = sess.graph.constant(Tensor::from_f64(&[1, 3], &x).unwrap());
        let y = self_attention(&mut sess, e, &sa, None).unwrap();
        for (g, e) in sess.graph.value(y).data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_identical_rows_give_identical_outputs() {
        let mut r = rng(11);
        let mut reg = ParamRegistry::<f64>::new();
        let sa = SelfAttentionParams::init(&mut reg, &mut r, "sa", 4, 2).unwrap();
        let row = [0.3, -0.6, 0.9, 0.05];
        let data: Vec<f64> = row.iter().cycle().take(12).cloned().collect();
        let mut sess = Session::new(&reg, false);
        let e = sess.graph.constant(Tensor::from_f64(&[3, 4], &data).unwrap());
        let y = self_attention(&mut sess, e, &sa, None).unwrap();
        let out = sess.graph.value(y).data();
        for pos in 1..3 {
            for c in 0..4 {
                assert_eq!(out[c], out[pos * 4 + c]);
            }
        }
    }

    #[test]
    fn self_attention_gradcheck_with_mask() {
        let mut r = rng(12);
        let mut reg = ParamRegistry::<f64>::new();
        let sa = SelfAttentionParams::init(&mut reg, &mut r, "sa", 4, 1).unwrap();
        let x = reg.add("x", rand_tensor(&mut r, &[3, 4]));
        let keep = [true, true, false];

        let loss = |reg: &ParamRegistry<f64>| {
            let mut sess = Session::new(reg, false);
            let e = sess.param(x);
            let y = self_attention(&mut sess, e, &sa, Some(&keep))?;
            let sq = sess.graph.mul(y, y)?;
            let l = sess.graph.sum(sq);
            sess.graph.value(l).item()
        };
        let mut sess = Session::new(&reg, true);
        let e = sess.param(x);
        let y = self_attention(&mut sess, e, &sa, Some(&keep)).unwrap();
        let sq = sess.graph.mul(y, y).unwrap();
        let l = sess.graph.sum(sq);
        let grads = sess.backward(l).unwrap();

        let probes = all_probes(&reg);
        let report = compare(&mut reg, &grads, &probes, DEFAULT_STEP, 1e-3, loss).unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn embed_single_field_returns_row() {
        let mut r = rng(13);
        let mut reg = ParamRegistry::<f64>::new();
        let table = EmbeddingTable::init(&mut reg, &mut r, "item", 5, 3);
        let row0 = reg.get(table.rows).data()[..3].to_vec();
        let mut sess = Session::new(&reg, false);
        let out = embed_features(&mut sess, &[(&table, &[0])]).unwrap();
        assert_eq!(sess.graph.value(out).data(), &row0[..]);
    }

    #[test]
    fn embed_two_fields_concatenate_in_declaration_order() {
        let mut r = rng(14);
        let mut reg = ParamRegistry::<f64>::new();
        let ta = EmbeddingTable::init(&mut reg, &mut r, "a", 4, 2);
        let tb = EmbeddingTable::init(&mut reg, &mut r, "b", 4, 2);
        let ra = reg.get(ta.rows).data()[2..4].to_vec();
        let rb = reg.get(tb.rows).data()[6..8].to_vec();
        let mut sess = Session::new(&reg, false);
        let out = embed_features(&mut sess, &[(&ta, &[1]), (&tb, &[3])]).unwrap();
        assert_eq!(sess.graph.value(out).shape(), &[1, 4]);
        assert_eq!(&sess.graph.value(out).data()[..2], &ra[..]);
        assert_eq!(&sess.graph.value(out).data()[2..], &rb[..]);
    }

    #[test]
    fn embed_out_of_range_errors_with_field_and_index() {
        let mut r = rng(15);
        let mut reg = ParamRegistry::<f64>::new();
        let table = EmbeddingTable::init(&mut reg, &mut r, "item", 5, 3);
        let mut sess = Session::new(&reg, false);
        let err = embed_features(&mut sess, &[(&table, &[5])]).unwrap_err();
        match err {
            RiaError::Lookup { field, index, vocab } => {
                assert_eq!(field, "item");
                assert_eq!(index, 5);
                assert_eq!(vocab, 5);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn embed_gradient_hits_only_looked_up_rows() {
        let mut r = rng(16);
        let mut reg = ParamRegistry::<f64>::new();
        let table = EmbeddingTable::init(&mut reg, &mut r, "item", 4, 2);
        let mut sess = Session::new(&reg, true);
        let out = embed_features(&mut sess, &[(&table, &[1, 3, 1])]).unwrap();
        let l = sess.graph.sum(out);
        let grads = sess.backward(l).unwrap();
        let g = grads.get(table.rows).unwrap();
        assert_eq!(g, &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn mlp_rows_are_independent() {
        let mut r = rng(17);
        let mut reg = ParamRegistry::<f64>::new();
        let mlp = Mlp::init(&mut reg, &mut r, "mlp", MlpSpec::new(&[3, 5, 2]));
        let base = rand_tensor(&mut r, &[3, 3]);
        let run = |input: &Tensor<f64>| {
            let mut sess = Session::new(&reg, false);
            let x = sess.graph.constant(input.clone());
            let y = mlp.apply(&mut sess, x).unwrap();
            sess.graph.value(y).data().to_vec()
        };
        let out0 = run(&base);
        let mut perturbed = base.clone();
        perturbed.data_mut()[3] += 1.0; // row 1
        let out = run(&perturbed);
        assert_eq!(&out[..2], &out0[..2]);
        assert_ne!(&out[2..4], &out0[2..4]);
        assert_eq!(&out[4..], &out0[4..]);
    }

    #[test]
    fn mlp_zero_output_layer_yields_zero() {
        let mut r = rng(18);
        let mut reg = ParamRegistry::<f64>::new();
        let mlp = Mlp::init(&mut reg, &mut r, "mlp", MlpSpec::new(&[3, 4, 1]));
        mlp.zero_output_layer(&mut reg);
        let mut sess = Session::new(&reg, false);
        let x = sess.graph.constant(rand_tensor(&mut r, &[2, 3]));
        let y = mlp.apply(&mut sess, x).unwrap();
        assert_eq!(sess.graph.value(y).data(), &[0.0, 0.0]);
    }
}
