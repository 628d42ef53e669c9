//! Optimizer, training loop, evaluation drivers, checkpoints, the joint
//! gradient check, and the depth-sweep experiment.
//!
//! Everything here is deterministic given the config seed: the train/val
//! split hashes request ids, shuffling uses a seeded generator, gradient
//! accumulation order is fixed, and the optimizer walks parameters in
//! registry order. Two identical runs produce byte-identical checkpoints
//! and reports.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{generate_synthetic, GeneratorConfig, ImpressionRecord};
use crate::ec::OpCounters;
use crate::error::{Result, RiaError};
use crate::gradcheck::{self, GradCheckReport};
use crate::metrics::{evaluate, EvalReport, Pooling};
use crate::model::{Precision, RiaConfig, RiaModel};
use crate::params::{GradStore, ParamRegistry, Session};
use crate::tensor::{Elem, Tensor};

// ---------------------------------------------------------------------------
// Optimizer

/// Bias-corrected adaptive-moment update. Every registered parameter is
/// visited every step in registry order; parameters without a gradient this
/// step decay their moments against a zero gradient.
pub struct Adam<E: Elem> {
    lr: E,
    beta1: E,
    beta2: E,
    eps: E,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(cfg: &RiaConfig, registry: &ParamRegistry<E>) -> Self {
        Self {
            lr: E::from_f64(cfg.learning_rate),
            beta1: E::from_f64(cfg.beta1),
            beta2: E::from_f64(cfg.beta2),
            eps: E::from_f64(cfg.epsilon),
            step: 0,
            m: registry.iter().map(|(_, p)| vec![E::zero(); p.value.numel()]).collect(),
            v: registry.iter().map(|(_, p)| vec![E::zero(); p.value.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        registry: &mut ParamRegistry<E>,
        grads: &GradStore<E>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let one = E::one();
        let bc1 = one - pow_int(self.beta1, t);
        let bc2 = one - pow_int(self.beta2, t);

        for slot in 0..self.m.len() {
            let id = crate::params::ParamId(slot);
            if let Some(g) = grads.get(id) {
                if let Some(&bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(RiaError::Training {
                        param: registry.name(id).to_string(),
                        detail: format!("non-finite gradient {bad}"),
                    });
                }
            }
            let zero = E::zero();
            let param = registry.get_mut(id);
            let data = param.data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for j in 0..data.len() {
                let g = grads.get(id).map_or(zero, |g| g[j]);
                m[j] = self.beta1 * m[j] + (one - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (one - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn pow_int<E: Elem>(base: E, exp: i32) -> E {
    let mut out = E::one();
    for _ in 0..exp {
        out = out * base;
    }
    out
}

// ---------------------------------------------------------------------------
// Split and evaluation

/// Stable 90/10 split on a hash of the request id; disjoint by construction.
pub fn split_train_val(records: &[ImpressionRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if fnv64_str(&r.request_id) % 10 == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn fnv64_str(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Clone, Debug)]
pub struct ModelEval {
    pub listwise: EvalReport,
    pub pointwise: EvalReport,
}

/// Score records with both heads over the same (request, position) pairs.
pub fn eval_model<E: Elem>(
    model: &RiaModel<E>,
    records: &[ImpressionRecord],
    pooling: Pooling,
) -> Result<ModelEval> {
    let mut list_scores = Vec::new();
    let mut point_scores = Vec::new();
    let mut labels = Vec::new();
    let mut group_sizes = Vec::new();
    let mut counters = OpCounters::default();
    for record in records {
        let mut sess = Session::new(&model.registry, false);
        let out = model.ria_forward(&mut sess, record, &mut counters)?;
        let lw = sess.graph.value(out.listwise_probs);
        list_scores.extend(lw.data().iter().map(|v| v.to_f64()));
        let pw = sess.graph.value(out.pointwise_probs).data();
        point_scores.extend(out.target_rows.iter().map(|&r| pw[r].to_f64()));
        labels.extend(out.target_clicks.iter().copied());
        group_sizes.push(out.target_clicks.len());
    }
    Ok(ModelEval {
        listwise: evaluate(&list_scores, &labels, pooling, &group_sizes)?,
        pointwise: evaluate(&point_scores, &labels, pooling, &group_sizes)?,
    })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: ModelEval,
    pub val: ModelEval,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub diverged: bool,
}

impl TrainOutcome {
    /// Line-oriented fixed-key report; byte-stable across identical runs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "epoch={} train_loss={:.6} train_auc={:.6} train_logloss={:.6} \
                 val_auc={:.6} val_logloss={:.6} val_pointwise_auc={:.6}\n",
                e.epoch,
                e.train_loss,
                e.train.listwise.auc,
                e.train.listwise.logloss,
                e.val.listwise.auc,
                e.val.listwise.logloss,
                e.val.pointwise.auc,
            ));
        }
        out.push_str(&format!("best_epoch={}\n", self.best_epoch));
        out.push_str(&format!("diverged={}\n", self.diverged));
        if let Some(best) = self.epochs.get(self.best_epoch - 1) {
            out.push_str(&format!(
                "final_val_auc={:.6}\nfinal_val_logloss={:.6}\nfinal_val_pointwise_auc={:.6}\n",
                best.val.listwise.auc, best.val.listwise.logloss, best.val.pointwise.auc
            ));
        }
        out
    }

    pub fn best(&self) -> Option<&EpochReport> {
        self.epochs.get(self.best_epoch - 1)
    }
}

/// How many training records feed the per-epoch train-side evaluation;
/// keeps epoch reports cheap on large logs.
const TRAIN_EVAL_CAP: usize = 4096;

/// Minimize the mean joint loss with Adam. Per-epoch train/val AUC and
/// LogLoss are reported; early stop restores the best-validation-LogLoss
/// parameters after `patience` epochs without improvement. Divergence
/// (non-finite loss or gradient) aborts the epoch and restores the last
/// good parameters.
pub fn train<E: Elem>(
    model: &mut RiaModel<E>,
    records: &[ImpressionRecord],
) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(RiaError::Contract {
            module: "train",
            detail: "empty dataset".into(),
        });
    }
    let (train_idx, val_idx) = split_train_val(records);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(RiaError::Contract {
            module: "train",
            detail: format!(
                "split produced {} train / {} val records; need both nonempty",
                train_idx.len(),
                val_idx.len()
            ),
        });
    }
    let val_records: Vec<ImpressionRecord> =
        val_idx.iter().map(|&i| records[i].clone()).collect();
    let train_eval_records: Vec<ImpressionRecord> = train_idx
        .iter()
        .take(TRAIN_EVAL_CAP)
        .map(|&i| records[i].clone())
        .collect();

    let mut optimizer = Adam::new(&model.cfg, &model.registry);
    let mut rng = ChaCha12Rng::seed_from_u64(model.cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = train_idx.clone();

    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: 0,
        diverged: false,
    };
    let mut best_logloss = f64::INFINITY;
    let mut best_params: Option<Vec<Tensor<E>>> = None;
    let mut bad_epochs = 0usize;

    'epochs: for epoch in 1..=model.cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;

        for batch in order.chunks(model.cfg.batch_size) {
            let mut batch_grads = GradStore::new(model.registry.len());
            let mut ok = true;
            for &idx in batch {
                let record = &records[idx];
                let step = (|| -> Result<f64> {
                    let mut sess = Session::new(&model.registry, true);
                    let mut counters = OpCounters::default();
                    let out = model.ria_forward(&mut sess, record, &mut counters)?;
                    let losses = model.record_loss(&mut sess, &out)?;
                    let value = sess.graph.value(losses.total).item()?.to_f64();
                    let grads = sess.backward(losses.total)?;
                    batch_grads.merge(&grads);
                    Ok(value)
                })();
                match step {
                    Ok(value) => {
                        epoch_loss += value;
                        seen += 1;
                    }
                    Err(RiaError::Training { .. }) => {
                        ok = false;
                        break;
                    }
                    Err(other) => return Err(other),
                }
            }
            if !ok {
                outcome.diverged = true;
                break 'epochs;
            }
            batch_grads.scale(E::from_f64(1.0 / batch.len() as f64));
            if let Err(RiaError::Training { .. }) =
                optimizer.step(&mut model.registry, &batch_grads)
            {
                outcome.diverged = true;
                break 'epochs;
            }
        }

        let report = EpochReport {
            epoch,
            train_loss: if seen == 0 { f64::NAN } else { epoch_loss / seen as f64 },
            train: eval_model(model, &train_eval_records, Pooling::Global)?,
            val: eval_model(model, &val_records, Pooling::Global)?,
        };
        let val_logloss = report.val.listwise.logloss;
        outcome.epochs.push(report);

        if val_logloss < best_logloss {
            best_logloss = val_logloss;
            outcome.best_epoch = epoch;
            best_params = Some(
                model
                    .registry
                    .iter()
                    .map(|(_, p)| p.value.clone())
                    .collect(),
            );
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= model.cfg.patience {
                break;
            }
        }
    }

    // Restore the best (or last good) parameters.
    if let Some(best) = best_params {
        for (slot, value) in best.into_iter().enumerate() {
            *model.registry.get_mut(crate::params::ParamId(slot)) = value;
        }
    }
    if outcome.best_epoch == 0 {
        outcome.best_epoch = outcome.epochs.len().max(1);
    }
    Ok(outcome)
}

/// Stream-separation constant for the shuffle rng.
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6531;

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"RIACKPT\x01";

/// Write `magic | precision tag | config JSON | params` with every buffer
/// little-endian in registry order. Layout details in `docs/checkpoint.md`.
pub fn save_checkpoint<E: Elem>(path: &Path, model: &RiaModel<E>) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(E::TAG);
    let cfg = model.cfg.canonical_json();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(model.registry.len() as u32).to_le_bytes());
    for (_, param) in model.registry.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(param.value.shape().len() as u8);
        for &dim in param.value.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&param.value.to_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Element-width tag of a checkpoint without decoding it (4 or 8).
pub fn peek_checkpoint_precision(path: &Path) -> Result<u8> {
    let mut file = std::fs::File::open(path)?;
    let mut head = [0u8; 9];
    file.read_exact(&mut head)
        .map_err(|_| RiaError::Checkpoint("file too short".into()))?;
    if &head[..8] != CHECKPOINT_MAGIC {
        return Err(RiaError::Checkpoint("bad magic".into()));
    }
    Ok(head[8])
}

/// Rebuild a model from a checkpoint: init from the embedded config, then
/// overwrite every parameter. Names, shapes, and count must match exactly.
pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<RiaModel<E>> {
    let bytes = std::fs::read(path)?;
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(RiaError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    if take(&mut cursor, 8)? != CHECKPOINT_MAGIC {
        return Err(RiaError::Checkpoint("bad magic".into()));
    }
    let tag = take(&mut cursor, 1)?[0];
    if tag != E::TAG {
        return Err(RiaError::Checkpoint(format!(
            "checkpoint precision tag {tag} does not match requested width {}",
            E::TAG
        )));
    }
    let cfg_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let cfg_json = std::str::from_utf8(take(&mut cursor, cfg_len)?)
        .map_err(|e| RiaError::Checkpoint(e.to_string()))?;
    let cfg: RiaConfig =
        serde_json::from_str(cfg_json).map_err(|e| RiaError::Checkpoint(e.to_string()))?;
    let mut model = RiaModel::<E>::init(cfg)?;

    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    if count != model.registry.len() {
        return Err(RiaError::Checkpoint(format!(
            "checkpoint has {count} parameters, model has {}",
            model.registry.len()
        )));
    }
    for _ in 0..count {
        let name_len =
            u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cursor, name_len)?)
            .map_err(|e| RiaError::Checkpoint(e.to_string()))?
            .to_string();
        let ndim = take(&mut cursor, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let data = take(&mut cursor, numel * E::WIDTH)?;
        let tensor = Tensor::<E>::from_bytes(&shape, data)?;
        let id = model.registry.lookup(&name).ok_or_else(|| {
            RiaError::Checkpoint(format!("unknown parameter `{name}` in checkpoint"))
        })?;
        if model.registry.get(id).shape() != shape.as_slice() {
            return Err(RiaError::Checkpoint(format!(
                "parameter `{name}` shape {:?} does not match model {:?}",
                shape,
                model.registry.get(id).shape()
            )));
        }
        *model.registry.get_mut(id) = tensor;
    }
    if cursor != bytes.len() {
        return Err(RiaError::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Joint gradient check

pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub threshold: f64,
    pub passed: bool,
}

/// Synthetic records whose shapes match a model config, for gradient checks
/// and smoke runs.
pub fn synthetic_records_for(cfg: &RiaConfig, count: usize, seed: u64) -> Result<Vec<ImpressionRecord>> {
    let gen_cfg = GeneratorConfig {
        n_users: 16,
        n_items: cfg.vocab_items - 1,
        n_requests: count,
        m: cfg.m,
        n: cfg.n,
        l: cfg.l,
        t: cfg.t,
        gamma: 0.5,
        position_bias: (0..cfg.m).map(|o| -0.4 - 0.2 * o as f64).collect(),
        noise_seed: seed,
    };
    generate_synthetic(&gen_cfg)
}

/// Finite-difference check of the mean joint loss over `records` against
/// the analytic gradients, probing `samples` randomly chosen parameters.
pub fn gradcheck_joint(
    model: &mut RiaModel<f64>,
    records: &[ImpressionRecord],
    samples: usize,
    step: f64,
    threshold: f64,
    seed: u64,
) -> Result<GradCheckOutcome> {
    // The registry moves out so finite differences can mutate it while the
    // model wiring stays borrowed immutably.
    let mut registry = std::mem::replace(&mut model.registry, ParamRegistry::new());

    let result = (|| {
        let loss = |reg: &ParamRegistry<f64>| -> Result<f64> {
            let mut total = 0.0;
            for record in records {
                let mut sess = Session::new(reg, false);
                let mut counters = OpCounters::default();
                let out = model.ria_forward(&mut sess, record, &mut counters)?;
                let losses = model.record_loss(&mut sess, &out)?;
                total += sess.graph.value(losses.total).item()?;
            }
            Ok(total / records.len() as f64)
        };

        let mut grads = GradStore::new(registry.len());
        for record in records {
            let mut sess = Session::new(&registry, true);
            let mut counters = OpCounters::default();
            let out = model.ria_forward(&mut sess, record, &mut counters)?;
            let losses = model.record_loss(&mut sess, &out)?;
            let g = sess.backward(losses.total)?;
            grads.merge(&g);
        }
        grads.scale(1.0 / records.len() as f64);

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let probes = gradcheck::sample_probes(&registry, samples, &mut rng);
        let report = gradcheck::compare(&mut registry, &grads, &probes, step, 1e-3, loss)?;
        Ok(GradCheckOutcome {
            passed: report.max_rel_err < threshold,
            report,
            threshold,
        })
    })();

    model.registry = registry;
    result
}

// ---------------------------------------------------------------------------
// Depth sweep

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub depth: usize,
    pub val_auc: f64,
    pub val_logloss: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            match &r.error {
                None => out.push_str(&format!(
                    "depth={} val_auc={:.6} val_logloss={:.6}\n",
                    r.depth, r.val_auc, r.val_logloss
                )),
                Some(e) => out.push_str(&format!("depth={} error={e}\n", r.depth)),
            }
        }
        out
    }
}

/// Train one model per depth with the shared seed set and report final
/// validation metrics. A failing depth is recorded and the sweep continues.
pub fn depth_sweep<E: Elem>(
    base_cfg: &RiaConfig,
    records: &[ImpressionRecord],
    depths: &[usize],
) -> Result<SweepOutcome> {
    if depths.is_empty() {
        return Err(RiaError::Contract {
            module: "train",
            detail: "empty depth list".into(),
        });
    }
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut cfg = base_cfg.clone();
        cfg.i = depth;
        let run = || -> Result<(f64, f64)> {
            let mut model = RiaModel::<E>::init(cfg.clone())?;
            let outcome = train(&mut model, records)?;
            let best = outcome.best().ok_or_else(|| RiaError::Contract {
                module: "train",
                detail: "no epochs ran".into(),
            })?;
            Ok((best.val.listwise.auc, best.val.listwise.logloss))
        };
        match run() {
            Ok((auc, logloss)) => rows.push(SweepRow {
                depth,
                val_auc: auc,
                val_logloss: logloss,
                error: None,
            }),
            Err(e) => rows.push(SweepRow {
                depth,
                val_auc: f64::NAN,
                val_logloss: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(SweepOutcome { rows })
}

/// Minimal deterministic SVG line chart of AUC against depth.
pub fn render_sweep_svg(outcome: &SweepOutcome) -> String {
    let rows: Vec<&SweepRow> = outcome.rows.iter().filter(|r| r.error.is_none()).collect();
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    if !rows.is_empty() {
        let min_auc = rows.iter().map(|r| r.val_auc).fold(f64::INFINITY, f64::min);
        let max_auc = rows.iter().map(|r| r.val_auc).fold(f64::NEG_INFINITY, f64::max);
        let span = (max_auc - min_auc).max(1e-4);
        let max_depth = rows.iter().map(|r| r.depth).max().unwrap() as f64;
        let min_depth = rows.iter().map(|r| r.depth).min().unwrap() as f64;
        let dspan = (max_depth - min_depth).max(1.0);
        let x = |d: f64| pad + (d - min_depth) / dspan * (w - 2.0 * pad);
        let y = |a: f64| h - pad - (a - min_auc) / span * (h - 2.0 * pad);
        let points: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", x(r.depth as f64), y(r.val_auc)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#2166ac\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for r in &rows {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#2166ac\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">I={} auc={:.4}</text>\n",
                x(r.depth as f64),
                y(r.val_auc),
                x(r.depth as f64) + 6.0,
                y(r.val_auc) - 6.0,
                r.depth,
                r.val_auc
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\">listwise validation AUC vs depth</text>\n",
            pad,
            pad / 2.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Dispatch a closure over the configured precision.
pub fn with_precision<R>(
    precision: Precision,
    f32_path: impl FnOnce() -> Result<R>,
    f64_path: impl FnOnce() -> Result<R>,
) -> Result<R> {
    match precision {
        Precision::F32 => f32_path(),
        Precision::F64 => f64_path(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> RiaModel<f64> {
        RiaModel::<f64>::init(RiaConfig::tiny()).unwrap()
    }

    #[test]
    fn adam_first_step_is_minus_lr_for_unit_gradient() {
        let mut cfg = RiaConfig::tiny();
        cfg.learning_rate = 0.1;
        let mut reg = ParamRegistry::<f64>::new();
        let p = reg.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&cfg, &reg);
        let mut grads = GradStore::new(1);
        grads.accumulate(p, &[1.0]);
        adam.step(&mut reg, &grads).unwrap();
        let got = reg.get(p).data()[0];
        // Bias-corrected ratio is ~1 at t=1, so the step is ~ -lr.
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut cfg = RiaConfig::tiny();
        cfg.learning_rate = 0.1;
        let mut reg = ParamRegistry::<f64>::new();
        let p = reg.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&cfg, &reg);

        // Fresh state, zero grad: nothing moves.
        let grads = GradStore::new(1);
        adam.step(&mut reg, &grads).unwrap();
        assert_eq!(reg.get(p).data()[0], 1.0);

        // After a real step the moments are nonzero and must decay.
        let mut g1 = GradStore::new(1);
        g1.accumulate(p, &[1.0]);
        adam.step(&mut reg, &g1).unwrap();
        let m_after_grad = adam.m[0][0];
        adam.step(&mut reg, &GradStore::new(1)).unwrap();
        assert!(adam.m[0][0].abs() < m_after_grad.abs());
    }

    #[test]
    fn adam_rejects_nan_gradient_with_param_name() {
        let cfg = RiaConfig::tiny();
        let mut reg = ParamRegistry::<f64>::new();
        let p = reg.add("bad.param", Tensor::scalar(1.0));
        let mut adam = Adam::new(&cfg, &reg);
        let mut grads = GradStore::new(1);
        grads.accumulate(p, &[f64::NAN]);
        let err = adam.step(&mut reg, &grads).unwrap_err();
        assert!(err.to_string().contains("bad.param"), "{err}");
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        assert_eq!(peek_checkpoint_precision(&path).unwrap(), 8);

        let loaded = load_checkpoint::<f64>(&path).unwrap();
        for ((_, a), (_, b)) in model.registry.iter().zip(loaded.registry.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.to_bytes(), b.value.to_bytes());
        }

        // Save again from the loaded model: identical file bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_precision_mismatch_is_an_error() {
        let model = tiny_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn forward_after_checkpoint_reload_is_bit_identical() {
        let model = tiny_model();
        let record = crate::ucdt::tests::tiny_record(&model.cfg, 31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();

        let run = |m: &RiaModel<f64>| {
            let mut sess = Session::new(&m.registry, false);
            let mut counters = OpCounters::default();
            let out = m.ria_forward(&mut sess, &record, &mut counters).unwrap();
            (
                sess.graph.value(out.pointwise_probs).to_bytes(),
                sess.graph.value(out.listwise_probs).to_bytes(),
            )
        };
        assert_eq!(run(&model), run(&loaded));
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let cfg = RiaConfig::tiny();
        let records = synthetic_records_for(&cfg, 500, 3).unwrap();
        let (train_idx, val_idx) = split_train_val(&records);
        assert_eq!(train_idx.len() + val_idx.len(), 500);
        assert!(!val_idx.is_empty() && !train_idx.is_empty());
        let (t2, v2) = split_train_val(&records);
        assert_eq!(train_idx, t2);
        assert_eq!(val_idx, v2);
        let overlap: std::collections::HashSet<_> = train_idx.iter().collect();
        assert!(val_idx.iter().all(|i| !overlap.contains(i)));
    }

    #[test]
    fn tiny_training_run_is_deterministic() {
        let cfg = RiaConfig::tiny();
        let records = synthetic_records_for(&cfg, 160, 5).unwrap();
        let run = || {
            let mut model = RiaModel::<f64>::init(cfg.clone()).unwrap();
            let outcome = train(&mut model, &records).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.ckpt");
            save_checkpoint(&path, &model).unwrap();
            (outcome.to_text(), std::fs::read(&path).unwrap())
        };
        let (r1, c1) = run();
        let (r2, c2) = run();
        assert_eq!(r1, r2, "reports must be byte-identical");
        assert_eq!(c1, c2, "checkpoints must be byte-identical");
        assert!(r1.contains("val_auc="));
    }

    #[test]
    fn reported_loss_is_exactly_l1_plus_l2() {
        let model = tiny_model();
        let record = crate::ucdt::tests::tiny_record(&model.cfg, 41);
        let mut sess = Session::new(&model.registry, false);
        let mut counters = OpCounters::default();
        let out = model.ria_forward(&mut sess, &record, &mut counters).unwrap();
        let losses = model.record_loss(&mut sess, &out).unwrap();
        let l1 = sess.graph.value(losses.l1).item().unwrap();
        let l2 = sess.graph.value(losses.l2).item().unwrap();
        let total = sess.graph.value(losses.total).item().unwrap();
        assert_eq!(total.to_bits(), (l1 + l2).to_bits());
    }

    #[test]
    fn sweep_svg_is_deterministic_and_structured() {
        let outcome = SweepOutcome {
            rows: vec![
                SweepRow { depth: 1, val_auc: 0.61, val_logloss: 0.5, error: None },
                SweepRow { depth: 4, val_auc: 0.64, val_logloss: 0.48, error: None },
            ],
        };
        let svg = render_sweep_svg(&outcome);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert_eq!(svg, render_sweep_svg(&outcome));
        assert!(outcome.to_text().contains("depth=4"));
    }
}
