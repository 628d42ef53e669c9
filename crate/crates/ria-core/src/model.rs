//! Model configuration, parameter assembly, and the staged end-to-end
//! forward pass.
//!
//! The forward splits into three stages so the rerank pipeline can reuse
//! rank-stage work: the candidate/context stage producing item
//! representations and pointwise probabilities, the history stage producing
//! page encodings, and the list stage scoring one candidate permutation.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cuht::{self, CuhtParams, PageTensors};
use crate::data::ImpressionRecord;
use crate::ec::OpCounters;
use crate::error::{Result, RiaError};
use crate::graph::TensorId;
use crate::layers::EmbeddingTable;
use crate::lmh::{self, LmhParams};
use crate::params::{ParamRegistry, Session};
use crate::tensor::Elem;
use crate::ucdt::{self, UcdtParams};

/// Numeric width of the training/serving path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F32
    }
}

/// Which history pages feed the page encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryScope {
    /// Every exposed page, click markers embedded per item.
    AllPages,
    /// Only pages with at least one click.
    ClickPages,
}

impl Default for HistoryScope {
    fn default() -> Self {
        HistoryScope::AllPages
    }
}

fn default_one() -> f64 {
    1.0
}
fn default_heads() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_depth() -> usize {
    1
}

/// Every hyperparameter of the model and its training loop.
///
/// `D' = d + p_pos` is always derived, never stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiaConfig {
    /// Item-embedding width D.
    pub d: usize,
    /// Learned position-embedding width.
    pub p_pos: usize,
    /// Adaptor output width (defaults to D).
    pub d_t: usize,
    /// Context-series length.
    pub t: usize,
    /// Candidate-list length.
    pub n: usize,
    /// Page length.
    pub m: usize,
    /// History length in pages.
    pub l: usize,
    /// HSTU depth of the listwise stack.
    pub i: usize,
    /// Item vocabulary (index 0 is the padding item).
    pub vocab_items: usize,

    #[serde(default = "default_depth")]
    pub ucdt_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Normalize target-attention scores with a softmax.
    #[serde(default = "default_true")]
    pub ta_softmax: bool,
    #[serde(default)]
    pub history_scope: HistoryScope,
    /// Learn a dedicated no-history vector instead of zeros for L = 0.
    #[serde(default)]
    pub learned_no_history: bool,

    /// Hidden widths of the pointwise head (input D, output 1 implied).
    #[serde(default)]
    pub pointwise_head_hidden: Vec<usize>,
    /// Hidden widths of the listwise head.
    #[serde(default)]
    pub listwise_head_hidden: Vec<usize>,
    /// Hidden widths of the adaptor (input D, output D_t implied).
    #[serde(default)]
    pub adaptor_hidden: Vec<usize>,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early-stop patience on validation LogLoss, in epochs.
    #[serde(default = "default_depth")]
    pub patience: usize,
    #[serde(default = "default_one")]
    pub loss_weight_pointwise: f64,
    #[serde(default = "default_one")]
    pub loss_weight_listwise: f64,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl RiaConfig {
    /// Derived page-row width D' = D + P_pos.
    pub fn d_prime(&self) -> usize {
        self.d + self.p_pos
    }

    pub fn fused_width(&self) -> usize {
        self.d_t + self.d_prime()
    }

    /// The small configuration used by gradient checks:
    /// D=8, P_pos=4, T=6, n=5, m=3, L=2, I=2.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            p_pos: 4,
            d_t: 8,
            t: 6,
            n: 5,
            m: 3,
            l: 2,
            i: 2,
            vocab_items: 64,
            ucdt_layers: 1,
            heads: 1,
            ta_softmax: true,
            history_scope: HistoryScope::AllPages,
            learned_no_history: false,
            pointwise_head_hidden: vec![4],
            listwise_head_hidden: vec![10],
            adaptor_hidden: vec![],
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 1,
            patience: 1,
            loss_weight_pointwise: 1.0,
            loss_weight_listwise: 1.0,
            seed: 7,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("p_pos", self.p_pos),
            ("d_t", self.d_t),
            ("t", self.t),
            ("n", self.n),
            ("m", self.m),
            ("i", self.i),
            ("vocab_items", self.vocab_items),
            ("ucdt_layers", self.ucdt_layers),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RiaError::Config(format!("{name} must be positive")));
            }
        }
        if self.n < self.m {
            return Err(RiaError::Config(format!(
                "n={} must be >= m={}",
                self.n, self.m
            )));
        }
        if self.d % self.heads != 0 || self.d_prime() % self.heads != 0
            || self.fused_width() % self.heads != 0
        {
            return Err(RiaError::Config(format!(
                "heads={} must divide d={}, d'={} and the fused width {}",
                self.heads,
                self.d,
                self.d_prime(),
                self.fused_width()
            )));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(RiaError::Config("optimizer reals must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RiaError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RiaConfig =
            toml::from_str(text).map_err(|e| RiaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON echo embedded in checkpoints and manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// The full parameter set plus layer wiring. Forwards are pure given the
/// registry, so a model can score requests concurrently once training ends.
pub struct RiaModel<E: Elem> {
    pub cfg: RiaConfig,
    pub registry: ParamRegistry<E>,
    pub item_table: EmbeddingTable<E>,
    pub ucdt: UcdtParams<E>,
    pub cuht: CuhtParams<E>,
    pub lmh: LmhParams<E>,
}

/// Everything the losses and the cache need from one end-to-end pass.
pub struct ForwardOutput {
    /// Per-candidate pointwise pCTR, shape `[n]`.
    pub pointwise_probs: TensorId,
    /// Per-position listwise pCTR of the target page, shape `[m]`.
    pub listwise_probs: TensorId,
    /// Item representations x'' for all candidates, `[n × D]`.
    pub reprs: TensorId,
    /// Self-attention encodings of the history pages, each `[m × D']`.
    pub page_encodings: Vec<TensorId>,
    /// Candidate indices (into the record's candidate list) of the target
    /// page, in display order.
    pub target_rows: Vec<usize>,
    /// Click labels of the target page in display order.
    pub target_clicks: Vec<u8>,
}

impl<E: Elem> RiaModel<E> {
    pub fn init(cfg: RiaConfig) -> Result<Self> {
        cfg.validate()?;
        let mut registry = ParamRegistry::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

        let item_table =
            EmbeddingTable::init(&mut registry, &mut rng, "item", cfg.vocab_items, cfg.d);
        let ucdt = UcdtParams::init(&mut registry, &mut rng, &cfg)?;
        let cuht = CuhtParams::init(&mut registry, &mut rng, &cfg)?;
        let lmh = LmhParams::init(&mut registry, &mut rng, &cfg)?;

        Ok(Self {
            cfg,
            registry,
            item_table,
            ucdt,
            cuht,
            lmh,
        })
    }

    /// Zero both prediction heads; with the (already zero) f2 maps this
    /// pins every probability at exactly 0.5.
    pub fn zero_heads(&mut self) {
        self.ucdt.zero_head(&mut self.registry);
        self.lmh.zero_head(&mut self.registry);
    }

    pub fn zero_all_f2(&mut self) {
        self.ucdt.zero_f2(&mut self.registry);
        self.lmh.zero_f2(&mut self.registry);
    }

    fn item_index(&self, item_id: u64) -> Result<usize> {
        let idx = item_id as usize;
        self.item_table.check(idx)
    }

    /// Shape-check a record against the configuration.
    pub fn check_record(&self, record: &ImpressionRecord) -> Result<()> {
        let cfg = &self.cfg;
        let fail = |detail: String| -> Result<()> {
            Err(RiaError::Contract {
                module: "model",
                detail: format!("record `{}`: {detail}", record.request_id),
            })
        };
        if record.candidates.len() != cfg.n {
            return fail(format!(
                "{} candidates, config expects n={}",
                record.candidates.len(),
                cfg.n
            ));
        }
        if record.target_page.len() != cfg.m {
            return fail(format!(
                "target page of {} items, config expects m={}",
                record.target_page.len(),
                cfg.m
            ));
        }
        if record.context_events.len() != cfg.t {
            return fail(format!(
                "{} context events, config expects t={}",
                record.context_events.len(),
                cfg.t
            ));
        }
        if record.history_pages.len() > cfg.l {
            return fail(format!(
                "{} history pages exceed configured L={}",
                record.history_pages.len(),
                cfg.l
            ));
        }
        Ok(())
    }

    /// Candidate and context stage: X' = HSTU(X), E^u' = HSTU(E^u), target
    /// attention, pointwise head. Everything the rank stage precomputes.
    pub fn ucdt_stage(
        &self,
        sess: &mut Session<E>,
        record: &ImpressionRecord,
        counters: &mut OpCounters,
    ) -> Result<ucdt::PointwiseOutput> {
        let cand_ids: Vec<usize> = record
            .candidates
            .iter()
            .map(|c| self.item_index(c.item_id))
            .collect::<Result<_>>()?;
        let x = self.item_table.lookup(sess, &cand_ids)?;

        let ctx_ids: Vec<usize> = record
            .context_events
            .iter()
            .map(|e| {
                let id = e.fields.get("item").copied().unwrap_or(0);
                self.item_index(id)
            })
            .collect::<Result<_>>()?;
        let e_u = self.item_table.lookup(sess, &ctx_ids)?;

        ucdt::ucdt_forward(sess, &self.ucdt, x, e_u, counters)
    }

    /// History stage: encode the history pages with the shared
    /// self-attention. Returns one `[m × D']` encoding per kept page.
    pub fn history_stage(
        &self,
        sess: &mut Session<E>,
        record: &ImpressionRecord,
        counters: &mut OpCounters,
    ) -> Result<Vec<TensorId>> {
        let pages = self.assemble_history_pages(sess, record)?;
        cuht::piau_encode(sess, &self.cuht, &pages, counters)
    }

    fn assemble_history_pages(
        &self,
        sess: &mut Session<E>,
        record: &ImpressionRecord,
    ) -> Result<Vec<PageTensors>> {
        let kept: Vec<&crate::data::Page> = record
            .history_pages
            .iter()
            .filter(|p| match self.cfg.history_scope {
                HistoryScope::AllPages => true,
                HistoryScope::ClickPages => p.has_click(),
            })
            .collect();
        kept.iter()
            .map(|page| {
                let (items, markers) = self.page_rows(page)?;
                cuht::build_page(sess, &self.cuht, &self.item_table, &items, &markers, self.cfg.m)
            })
            .collect()
    }

    fn page_rows(&self, page: &crate::data::Page) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut items = Vec::with_capacity(page.len());
        let mut markers = Vec::with_capacity(page.len());
        for entry in page.by_position() {
            items.push(self.item_index(entry.item_id)?);
            markers.push(entry.click as usize);
        }
        Ok((items, markers))
    }

    /// List stage: score one ordered candidate list given the item
    /// representations (rows `[m × D]`, display order) and history
    /// encodings. Covers adaptor, target-page encoding, position-wise
    /// target attention, the listwise stack, and the head.
    pub fn list_stage(
        &self,
        sess: &mut Session<E>,
        repr_rows: TensorId,
        history: &[TensorId],
        list_items: &[u64],
        counters: &mut OpCounters,
    ) -> Result<TensorId> {
        if list_items.len() != self.cfg.m {
            return Err(RiaError::Contract {
                module: "model",
                detail: format!(
                    "list of {} items, config expects m={}",
                    list_items.len(),
                    self.cfg.m
                ),
            });
        }
        let t_rows = lmh::adaptor(sess, &self.lmh, repr_rows, counters)?;

        let items: Vec<usize> = list_items
            .iter()
            .map(|&id| self.item_index(id))
            .collect::<Result<_>>()?;
        let markers = vec![cuht::MARKER_TARGET; items.len()];
        let target_page =
            cuht::build_page(sess, &self.cuht, &self.item_table, &items, &markers, self.cfg.m)?;
        let target_enc = cuht::piau_encode_page(sess, &self.cuht, &target_page, counters)?;

        let w = cuht::ptau_or_fallback(sess, &self.cuht, history, target_enc, counters)?;
        lmh::lmh_forward(sess, &self.lmh, t_rows, w, self.cfg.i, counters)
    }

    /// Full end-to-end forward on a logged record.
    pub fn ria_forward(
        &self,
        sess: &mut Session<E>,
        record: &ImpressionRecord,
        counters: &mut OpCounters,
    ) -> Result<ForwardOutput> {
        self.check_record(record)?;
        let pointwise = self.ucdt_stage(sess, record, counters)?;
        let history = self.history_stage(sess, record, counters)?;

        // Target rows in display order, resolved inside the candidate list.
        let mut target_rows = Vec::with_capacity(self.cfg.m);
        let mut target_clicks = Vec::with_capacity(self.cfg.m);
        let mut target_items = Vec::with_capacity(self.cfg.m);
        for entry in record.target_page.by_position() {
            let row = record
                .candidates
                .iter()
                .position(|c| c.item_id == entry.item_id)
                .ok_or_else(|| RiaError::Invariant {
                    record_id: record.request_id.clone(),
                    rule: "target ⊆ candidates".into(),
                })?;
            target_rows.push(row);
            target_clicks.push(entry.click);
            target_items.push(entry.item_id);
        }

        let repr_rows = sess.graph.gather_rows(pointwise.reprs, &target_rows)?;
        let listwise_probs =
            self.list_stage(sess, repr_rows, &history, &target_items, counters)?;

        Ok(ForwardOutput {
            pointwise_probs: pointwise.probs,
            listwise_probs,
            reprs: pointwise.reprs,
            page_encodings: history,
            target_rows,
            target_clicks,
        })
    }

    /// Joint training loss on one record: L = w1·L1 + w2·L2 (weights
    /// default to 1, in which case the sum is taken verbatim).
    pub fn record_loss(
        &self,
        sess: &mut Session<E>,
        out: &ForwardOutput,
    ) -> Result<LossBreakdown> {
        let labeled: Vec<(usize, u8)> = out
            .target_rows
            .iter()
            .copied()
            .zip(out.target_clicks.iter().copied())
            .collect();
        let l1 = ucdt::pointwise_loss(sess, out.pointwise_probs, &labeled)?;
        let l2 = lmh::listwise_loss(sess, out.listwise_probs, &out.target_clicks)?;
        let total = lmh::joint_loss(
            sess,
            l1,
            l2,
            self.cfg.loss_weight_pointwise,
            self.cfg.loss_weight_listwise,
        )?;
        Ok(LossBreakdown { l1, l2, total })
    }
}

pub struct LossBreakdown {
    pub l1: TensorId,
    pub l2: TensorId,
    pub total: TensorId,
}
