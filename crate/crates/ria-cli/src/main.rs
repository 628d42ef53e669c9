//! `ria` — one entry point for the whole pipeline: synthetic log
//! generation, training, evaluation, depth sweeps, list selection, cache
//! simulation, sparsity reports, and gradient checks.
//!
//! Every run reads one TOML config file (`[model]` and/or `[data]`
//! sections); command-line flags override file values. Each subcommand
//! writes its primary artifact plus a JSON run manifest whose config digest
//! changes exactly when the effective config changes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ria_core::data::{
    generate_synthetic, load_impressions, sparsity_report, write_impressions, GeneratorConfig,
    SCHEMA_VERSION,
};
use ria_core::ec::{simulate_pipeline, RerankMode, ReprCache};
use ria_core::error::{Result, RiaError};
use ria_core::metrics::Pooling;
use ria_core::model::{Precision, RiaConfig, RiaModel};
use ria_core::selection::{enumerate_target_lists, select_best_list};
use ria_core::tensor::Elem;
use ria_core::train::{
    depth_sweep, eval_model, gradcheck_joint, load_checkpoint, peek_checkpoint_precision,
    render_sweep_svg, save_checkpoint, synthetic_records_for, train,
};

#[derive(Parser)]
#[command(name = "ria", version, about = "Listwise CTR pipeline: generate, train, evaluate, select, cache-sim")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic impression log.
    GenData(GenDataArgs),
    /// Train a model on an impression log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an impression log.
    Eval(EvalArgs),
    /// Train one model per LMH depth and plot validation AUC.
    DepthSweep(DepthSweepArgs),
    /// Select the best candidate list per request with a trained model.
    Select(SelectArgs),
    /// Simulate the rank-precompute / rerank-reuse pipeline.
    CacheSim(CacheSimArgs),
    /// Count k-tuple co-exposures on a log.
    Sparsity(SparsityArgs),
    /// Finite-difference check of the joint loss gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Run config with a [data] section.
    #[arg(long)]
    config: PathBuf,
    /// Output log path; `.gz` suffix writes the compressed variant.
    #[arg(long)]
    out: PathBuf,
    /// Override: number of requests.
    #[arg(long)]
    requests: Option<usize>,
    /// Override: context-effect strength gamma.
    #[arg(long)]
    gamma: Option<f64>,
    /// Override: generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config with a [model] section.
    #[arg(long)]
    config: PathBuf,
    /// Impression log to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, report, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override: LMH depth I.
    #[arg(long)]
    depth: Option<usize>,
    /// Override: training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override: model/training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override: numeric precision (f32 or f64).
    #[arg(long)]
    precision: Option<String>,
    /// Override: learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Impression log to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    /// AUC pooling: global or per-request.
    #[arg(long, default_value = "global")]
    pooling: String,
}

#[derive(Args)]
struct DepthSweepArgs {
    /// Run config with a [model] section.
    #[arg(long)]
    config: PathBuf,
    /// Impression log to train on.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the table, plot, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated LMH depths, e.g. 1,2,4,8.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
    /// Override: model/training seed shared across depths.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SelectArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Impression log with the requests to select for.
    #[arg(long)]
    data: PathBuf,
    /// Selections output path (one JSON record per request).
    #[arg(long)]
    out: PathBuf,
    /// Enumeration budget per request.
    #[arg(long, default_value_t = 1000)]
    budget: usize,
    /// Seed for sampled enumeration when the budget truncates.
    #[arg(long, default_value_t = 0)]
    list_seed: u64,
    /// Only select for the first N requests.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct CacheSimArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Impression log driving the simulation.
    #[arg(long)]
    data: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    /// Rerank mode: cached, recompute, or verify.
    #[arg(long, default_value = "verify")]
    mode: String,
    /// Candidate lists scored per request.
    #[arg(long, default_value_t = 8)]
    lists: usize,
    /// Cache capacity in entries.
    #[arg(long, default_value_t = 100_000)]
    capacity: usize,
    /// Entry time-to-live in seconds.
    #[arg(long, default_value_t = 3600)]
    ttl: u64,
    /// Only simulate the first N requests.
    #[arg(long)]
    limit: Option<usize>,
    /// Seed for list enumeration.
    #[arg(long, default_value_t = 0)]
    list_seed: u64,
}

#[derive(Args)]
struct SparsityArgs {
    /// Impression log to analyze.
    #[arg(long)]
    data: PathBuf,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
    /// Largest tuple size to count.
    #[arg(long)]
    k_max: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run config with a [model] section (64-bit mode is forced).
    #[arg(long)]
    config: PathBuf,
    /// Parameters to probe.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Max relative error allowed.
    #[arg(long, default_value_t = 1e-5)]
    threshold: f64,
    /// Records in the probe batch.
    #[arg(long, default_value_t = 3)]
    records: usize,
    /// Probe-sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Optional report output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One TOML file holds both sections; subcommands pick what they need.
#[derive(Serialize, Deserialize, Default)]
struct RunConfig {
    model: Option<RiaConfig>,
    data: Option<GeneratorConfig>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| RiaError::Config(format!("{}: {e}", path.display())))
    }

    fn model(&self) -> Result<RiaConfig> {
        let cfg = self
            .model
            .clone()
            .ok_or_else(|| RiaError::Config("config has no [model] section".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn data(&self) -> Result<GeneratorConfig> {
        let cfg = self
            .data
            .clone()
            .ok_or_else(|| RiaError::Config("config has no [data] section".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_digest: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    code_version: String,
    started_unix: u64,
    finished_unix: u64,
}

struct ManifestBuilder {
    command: String,
    config_digest: String,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_unix: u64,
}

impl ManifestBuilder {
    fn new(command: &str, effective_config_json: &str, seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(effective_config_json.as_bytes());
        Self {
            command: command.to_string(),
            config_digest: format!("{:x}", hasher.finalize()),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
        }
    }

    fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn write(self, path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config_digest: self.config_digest,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
        };
        std::fs::write(
            path,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
        )?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            // Machine-readable error record on stderr.
            let record = serde_json::json!({ "error": err.to_string() });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::DepthSweep(args) => cmd_depth_sweep(args),
        Command::Select(args) => cmd_select(args),
        Command::CacheSim(args) => cmd_cache_sim(args),
        Command::Sparsity(args) => cmd_sparsity(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?.data()?;
    if let Some(v) = args.requests {
        cfg.n_requests = v;
    }
    if let Some(v) = args.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = args.seed {
        cfg.noise_seed = v;
    }
    cfg.validate()?;
    let records = generate_synthetic(&cfg)?;
    let count = write_impressions(&args.out, &records)?;
    println!("wrote {count} records to {}", args.out.display());
    let digest = serde_json::to_string(&cfg).expect("config serializes");
    ManifestBuilder::new("gen-data", &digest, cfg.noise_seed)
        .input(&args.config)
        .output(&args.out)
        .write(&manifest_path(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

fn apply_train_overrides(cfg: &mut RiaConfig, args: &TrainArgs) -> Result<()> {
    if let Some(v) = args.depth {
        cfg.i = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(p) = &args.precision {
        cfg.precision = match p.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(RiaError::Config(format!("unknown precision `{other}`"))),
        };
    }
    cfg.validate()
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?.model()?;
    apply_train_overrides(&mut cfg, &args)?;
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let ckpt = args.out_dir.join("model.ckpt");
    let report = args.out_dir.join("train_report.txt");

    fn go<E: Elem>(cfg: &RiaConfig, records: &[ria_core::data::ImpressionRecord], ckpt: &Path, report: &Path) -> Result<()> {
        let mut model = RiaModel::<E>::init(cfg.clone())?;
        let outcome = train(&mut model, records)?;
        save_checkpoint(ckpt, &model)?;
        std::fs::write(report, outcome.to_text())?;
        print!("{}", outcome.to_text());
        Ok(())
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(&cfg, &records, &ckpt, &report)?,
        Precision::F64 => go::<f64>(&cfg, &records, &ckpt, &report)?,
    }

    ManifestBuilder::new("train", &cfg.canonical_json(), cfg.seed)
        .input(&args.config)
        .input(&args.data)
        .output(&ckpt)
        .output(&report)
        .write(&args.out_dir.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn parse_pooling(s: &str) -> Result<Pooling> {
    match s {
        "global" => Ok(Pooling::Global),
        "per-request" => Ok(Pooling::PerRequest),
        other => Err(RiaError::Config(format!("unknown pooling `{other}`"))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let pooling = parse_pooling(&args.pooling)?;
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;

    fn go<E: Elem>(
        ckpt: &Path,
        records: &[ria_core::data::ImpressionRecord],
        pooling: Pooling,
    ) -> Result<(String, u64)> {
        let model = load_checkpoint::<E>(ckpt)?;
        let eval = eval_model(&model, records, pooling)?;
        let mut text = eval.listwise.to_text();
        text.push_str(&format!(
            "pointwise_auc={:.6}\npointwise_logloss={:.6}\n",
            eval.pointwise.auc, eval.pointwise.logloss
        ));
        Ok((text, model.cfg.seed))
    }
    let (text, seed) = match peek_checkpoint_precision(&args.checkpoint)? {
        4 => go::<f32>(&args.checkpoint, &records, pooling)?,
        8 => go::<f64>(&args.checkpoint, &records, pooling)?,
        other => return Err(RiaError::Checkpoint(format!("unknown precision tag {other}"))),
    };
    std::fs::write(&args.out, &text)?;
    print!("{text}");
    ManifestBuilder::new("eval", &format!("{{\"pooling\":\"{}\"}}", args.pooling), seed)
        .input(&args.checkpoint)
        .input(&args.data)
        .output(&args.out)
        .write(&manifest_path(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_depth_sweep(args: DepthSweepArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?.model()?;
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.depths.is_empty() {
        return Err(RiaError::Config("no depths given".into()));
    }
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let outcome = match cfg.precision {
        Precision::F32 => depth_sweep::<f32>(&cfg, &records, &args.depths)?,
        Precision::F64 => depth_sweep::<f64>(&cfg, &records, &args.depths)?,
    };
    let table = args.out_dir.join("sweep.txt");
    let plot = args.out_dir.join("sweep.svg");
    std::fs::write(&table, outcome.to_text())?;
    std::fs::write(&plot, render_sweep_svg(&outcome))?;
    print!("{}", outcome.to_text());

    ManifestBuilder::new("depth-sweep", &cfg.canonical_json(), cfg.seed)
        .input(&args.config)
        .input(&args.data)
        .output(&table)
        .output(&plot)
        .write(&args.out_dir.join("manifest.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_select(args: SelectArgs) -> Result<ExitCode> {
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;
    let limit = args.limit.unwrap_or(records.len()).min(records.len());

    fn go<E: Elem>(
        ckpt: &Path,
        records: &[ria_core::data::ImpressionRecord],
        budget: usize,
        list_seed: u64,
    ) -> Result<(String, u64)> {
        let model = load_checkpoint::<E>(ckpt)?;
        let mut out = String::new();
        for record in records {
            let candidates: Vec<u64> = record.candidates.iter().map(|c| c.item_id).collect();
            let lists = enumerate_target_lists(&candidates, model.cfg.m, budget, list_seed)?;
            let best = select_best_list(&model, record, &lists, None)?;
            let line = serde_json::json!({
                "request_id": record.request_id,
                "items": best.items,
                "reward": best.reward,
                "pctr": best.per_position_pctr,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        Ok((out, model.cfg.seed))
    }
    let (text, seed) = match peek_checkpoint_precision(&args.checkpoint)? {
        4 => go::<f32>(&args.checkpoint, &records[..limit], args.budget, args.list_seed)?,
        8 => go::<f64>(&args.checkpoint, &records[..limit], args.budget, args.list_seed)?,
        other => return Err(RiaError::Checkpoint(format!("unknown precision tag {other}"))),
    };
    std::fs::write(&args.out, &text)?;
    println!("selected lists for {limit} requests -> {}", args.out.display());
    ManifestBuilder::new(
        "select",
        &format!("{{\"budget\":{},\"list_seed\":{}}}", args.budget, args.list_seed),
        seed,
    )
    .input(&args.checkpoint)
    .input(&args.data)
    .output(&args.out)
    .write(&manifest_path(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_cache_sim(args: CacheSimArgs) -> Result<ExitCode> {
    let mode: RerankMode = args.mode.parse()?;
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;
    let limit = args.limit.unwrap_or(records.len()).min(records.len());

    fn go<E: Elem>(
        ckpt: &Path,
        records: &[ria_core::data::ImpressionRecord],
        args: &CacheSimArgs,
        mode: RerankMode,
    ) -> Result<(String, u64)> {
        let model = load_checkpoint::<E>(ckpt)?;
        let mut cache = ReprCache::new(args.capacity, args.ttl);
        let report =
            simulate_pipeline(&model, records, args.lists, mode, &mut cache, args.list_seed)?;
        Ok((report.to_text(), model.cfg.seed))
    }
    let (text, seed) = match peek_checkpoint_precision(&args.checkpoint)? {
        4 => go::<f32>(&args.checkpoint, &records[..limit], &args, mode)?,
        8 => go::<f64>(&args.checkpoint, &records[..limit], &args, mode)?,
        other => return Err(RiaError::Checkpoint(format!("unknown precision tag {other}"))),
    };
    std::fs::write(&args.out, &text)?;
    print!("{text}");
    ManifestBuilder::new(
        "cache-sim",
        &format!(
            "{{\"mode\":\"{}\",\"lists\":{},\"capacity\":{},\"ttl\":{}}}",
            args.mode, args.lists, args.capacity, args.ttl
        ),
        seed,
    )
    .input(&args.checkpoint)
    .input(&args.data)
    .output(&args.out)
    .write(&manifest_path(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sparsity(args: SparsityArgs) -> Result<ExitCode> {
    let records = load_impressions(&args.data, SCHEMA_VERSION)?;
    let report = sparsity_report(&records, args.k_max)?;
    std::fs::write(&args.out, report.to_text())?;
    print!("{}", report.to_text());
    ManifestBuilder::new("sparsity", &format!("{{\"k_max\":{}}}", args.k_max), 0)
        .input(&args.data)
        .output(&args.out)
        .write(&manifest_path(&args.out))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(&args.config)?.model()?;
    cfg.precision = Precision::F64;
    let seed = args.seed.unwrap_or(cfg.seed);
    let records = synthetic_records_for(&cfg, args.records, seed ^ 0x67_63)?;
    let mut model = RiaModel::<f64>::init(cfg.clone())?;
    let outcome = gradcheck_joint(&mut model, &records, args.samples, args.step, args.threshold, seed)?;
    let text = format!(
        "probes={}\nmax_rel_err={:.6e}\nthreshold={:.6e}\nworst={}\npassed={}\n",
        outcome.report.probes,
        outcome.report.max_rel_err,
        outcome.threshold,
        outcome
            .report
            .worst
            .as_ref()
            .map(|(name, idx)| format!("{name}[{idx}]"))
            .unwrap_or_else(|| "-".into()),
        outcome.passed
    );
    print!("{text}");
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
        ManifestBuilder::new("gradcheck", &cfg.canonical_json(), seed)
            .input(&args.config)
            .output(out)
            .write(&manifest_path(out))?;
    }
    Ok(if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}
