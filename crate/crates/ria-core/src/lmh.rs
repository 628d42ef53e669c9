//! Listwise Multi-HSTU: adaptor over the cached item representations, a
//! depth-I stack of full-mask HSTU blocks over `[t_o ⊕ w_o]`, and the
//! per-position listwise pCTR head. Also home to the listwise and joint
//! losses.

use rand_chacha::ChaCha12Rng;

use crate::ec::OpCounters;
use crate::error::{Result, RiaError};
use crate::graph::TensorId;
use crate::layers::{hstu_block, HstuBlockParams, MaskMode, Mlp, MlpSpec};
use crate::model::RiaConfig;
use crate::params::{ParamRegistry, Session};
use crate::tensor::Elem;
use crate::ucdt::bce_mean;

pub struct LmhParams<E: Elem> {
    adaptor: Mlp<E>,
    blocks: Vec<HstuBlockParams<E>>,
    head: Mlp<E>,
    pub depth: usize,
}

impl<E: Elem> LmhParams<E> {
    pub fn init(
        registry: &mut ParamRegistry<E>,
        rng: &mut ChaCha12Rng,
        cfg: &RiaConfig,
    ) -> Result<Self> {
        if cfg.i == 0 {
            return Err(RiaError::Config("LMH depth I must be >= 1".into()));
        }
        let mut adaptor_widths = vec![cfg.d];
        adaptor_widths.extend(&cfg.adaptor_hidden);
        adaptor_widths.push(cfg.d_t);
        let adaptor = Mlp::init(registry, rng, "lmh.adaptor", MlpSpec::new(&adaptor_widths));

        let fused = cfg.fused_width();
        let blocks = (0..cfg.i)
            .map(|i| {
                HstuBlockParams::init(
                    registry,
                    rng,
                    &format!("lmh.block.{i}"),
                    fused,
                    cfg.heads,
                    MaskMode::Full,
                )
            })
            .collect::<Result<_>>()?;

        let mut head_widths = vec![fused];
        head_widths.extend(&cfg.listwise_head_hidden);
        head_widths.push(1);
        let head = Mlp::init(registry, rng, "lmh.head", MlpSpec::new(&head_widths));
        Ok(Self {
            adaptor,
            blocks,
            head,
            depth: cfg.i,
        })
    }

    pub fn zero_head(&self, registry: &mut ParamRegistry<E>) {
        self.head.zero_output_layer(registry);
    }

    pub fn zero_f2(&self, registry: &mut ParamRegistry<E>) {
        for b in &self.blocks {
            b.zero_f2(registry);
        }
    }
}

/// t_o = MLP(x''_o), row-wise: `[m × D] -> [m × D_t]`.
pub fn adaptor<E: Elem>(
    sess: &mut Session<E>,
    params: &LmhParams<E>,
    reprs: TensorId,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    counters.mlp_evals += 1;
    params.adaptor.apply(sess, reprs)
}

/// Stack `depth` HSTU blocks over the fused rows and apply the head:
/// ŷ_o = σ(MLP(m_{I,o})). Returns probabilities, shape `[m]`.
pub fn lmh_forward<E: Elem>(
    sess: &mut Session<E>,
    params: &LmhParams<E>,
    t_rows: TensorId,
    w_rows: TensorId,
    depth: usize,
    counters: &mut OpCounters,
) -> Result<TensorId> {
    if depth == 0 || depth > params.blocks.len() {
        return Err(RiaError::Contract {
            module: "lmh",
            detail: format!(
                "depth {depth} outside 1..={} configured blocks",
                params.blocks.len()
            ),
        });
    }
    let m = sess.graph.value(t_rows).shape()[0];
    let fused = sess.graph.concat_last(&[t_rows, w_rows])?;
    let mut state = fused;
    for block in &params.blocks[..depth] {
        state = hstu_block(sess, state, block)?;
        counters.hstu_evals += 1;
    }
    let logits = params.head.apply(sess, state)?;
    counters.mlp_evals += 1;
    let flat = sess.graph.reshape(logits, &[m])?;
    Ok(sess.graph.sigmoid(flat))
}

/// Mean BCE over all m positions of the list.
pub fn listwise_loss<E: Elem>(
    sess: &mut Session<E>,
    probs: TensorId,
    clicks: &[u8],
) -> Result<TensorId> {
    let m = sess.graph.value(probs).shape()[0];
    if clicks.len() != m {
        return Err(RiaError::Shape {
            op: "listwise-loss",
            lhs: vec![m],
            rhs: vec![clicks.len()],
        });
    }
    let labels: Vec<f64> = clicks.iter().map(|&c| c as f64).collect();
    bce_mean(sess, probs, &labels)
}

/// L = L1 + L2, the plain unweighted sum unless per-term weights are
/// configured away from 1. NaN inputs abort with the offending term named.
pub fn joint_loss<E: Elem>(
    sess: &mut Session<E>,
    l1: TensorId,
    l2: TensorId,
    weight_l1: f64,
    weight_l2: f64,
) -> Result<TensorId> {
    for (name, id) in [("L1", l1), ("L2", l2)] {
        let v = sess.graph.value(id).item()?;
        if !v.is_finite() {
            return Err(RiaError::Training {
                param: name.into(),
                detail: format!("non-finite loss term {v}"),
            });
        }
    }
    let (a, b) = if weight_l1 == 1.0 && weight_l2 == 1.0 {
        (l1, l2)
    } else {
        (
            sess.graph.scale(l1, E::from_f64(weight_l1)),
            sess.graph.scale(l2, E::from_f64(weight_l2)),
        )
    };
    sess.graph.add(a, b)
}
