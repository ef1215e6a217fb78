//! `vfl`: run secure-aggregation VFL sessions, benchmarks and the
//! masking-vs-Paillier ablation from a JSON config.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 protocol error.
//! `VFL_LOG` sets log verbosity (`error`, `warn`, `info`, `debug`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use vfl_secagg::bench::{run_ablation, run_overhead_suite, AblationConfig, Metric, OverheadSuiteConfig};
use vfl_secagg::data::{presets, synth_generate, Schema};
use vfl_secagg::experiment::{prepare, ExperimentConfig, ExperimentError, Prepared};
use vfl_secagg::model::Checkpoint;
use vfl_secagg::protocol::{ProtocolError, Session};
use vfl_secagg::transport::{overhead_csv, trace_jsonl, Phase};

const CHECKPOINT_STEM: &str = "checkpoint";
const MANIFEST_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "vfl", version, about = "Secure aggregation for vertical federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one key-agreement phase and check every pairwise key.
    SetupCheck(Common),
    /// Train, then write a checkpoint, loss curve, message trace and metrics.
    Train(Common),
    /// Load a checkpoint and run the testing phase.
    Test {
        #[command(flatten)]
        common: Common,
        /// Directory holding `checkpoint.json` and `checkpoint.bin`; defaults to `--out`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Secured-vs-plain CPU and byte overhead tables.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Dataset preset; overrides the config's `dataset`.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Dot-product timing: pairwise masking against Paillier.
    Ablate {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 1024)]
        key_bits: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic CSV for a preset or schema file.
    GenData {
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "banking")]
        dataset: String,
        /// Schema JSON; overrides the preset's schema.
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Row count; defaults to the preset's.
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config, or a `manifest.json` from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    /// `key=value` override; dotted keys reach nested fields. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Protocol(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Protocol(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Protocol(m) => write!(f, "protocol error: {m}"),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(m) => CliError::Config(m),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

impl From<vfl_secagg::bench::BenchError> for CliError {
    fn from(e: vfl_secagg::bench::BenchError) -> Self {
        match e {
            vfl_secagg::bench::BenchError::Protocol(p) => p.into(),
            other => CliError::Protocol(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Config(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Sets `dotted.key` in a JSON object. The value is parsed as JSON when it
/// can be, and kept as a string otherwise.
fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {part:?} is not inside an object")))?;
        if k + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| json!({}));
    }
    Err(CliError::Config("empty override key".into()))
}

/// Reads the config (or the `config` object of a manifest), applies the
/// flag and `--set` overrides, and validates the result.
fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut base = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path).or_else(|e| {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let doc: Value = serde_json::from_str(&text).map_err(|_| CliError::from(e))?;
                let inner = doc
                    .get("config")
                    .filter(|_| doc.get("manifest_version").is_some())
                    .ok_or_else(|| CliError::Config(format!("{} is neither a config nor a manifest", path.display())))?;
                serde_json::from_value::<ExperimentConfig>(inner.clone())
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            })?;
            serde_json::to_value(cfg).expect("config serialises")
        }
        None => serde_json::to_value(ExperimentConfig::default()).expect("config serialises"),
    };
    if let Some(seed) = common.seed {
        apply_override(&mut base, &format!("seed={seed}"))?;
    }
    if let Some(mode) = &common.mode {
        apply_override(&mut base, &format!("mode={mode}"))?;
    }
    if let Some(rounds) = common.rounds {
        apply_override(&mut base, &format!("rounds={rounds}"))?;
    }
    for o in &common.overrides {
        apply_override(&mut base, o)?;
    }
    serde_json::from_value(base).map_err(|e| CliError::Config(format!("invalid config: {e}")))
}

fn manifest(command: &str, cfg: &ExperimentConfig, prepared: Option<&Prepared>, outputs: &[&str]) -> Value {
    json!({
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "config": cfg,
        "seed": cfg.seed,
        "versions": {
            "vfl": env!("CARGO_PKG_VERSION"),
            "vfl_secagg": vfl_secagg::VERSION,
        },
        "data": prepared.map(|p| json!({
            "source": p.source,
            "rows": p.rows,
            "widths": p.widths,
            "train": p.data.train_ids.len(),
            "test": p.data.test_ids.len(),
            "pretrain_accuracy": p.pretrain_accuracy,
        })),
        "outputs": outputs,
    })
}

fn write_manifest(out: &Path, doc: &Value) -> Result<()> {
    write(&out.join("manifest.json"), serde_json::to_string_pretty(doc).expect("manifest serialises"))
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn setup_check(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    out_dir(&common.out)?;
    let prepared = prepare(&cfg)?;
    let mut session = Session::new(cfg.session_config(), prepared.data.clone())?;
    session.run_setup_phase()?;
    let pairs = session
        .verify_pairwise_keys()
        .map_err(|(a, b)| CliError::Protocol(format!("parties {a} and {b} derived different keys")))?;
    println!(
        "setup ok: {} clients, {pairs} pairwise keys agree, aggregator {}",
        session.topology().clients().len(),
        session.topology().aggregator
    );
    write_manifest(&common.out, &manifest("setup-check", &cfg, Some(&prepared), &[]))
}

fn train(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    out_dir(&common.out)?;
    let prepared = prepare(&cfg)?;
    let mut session = Session::new(cfg.session_config(), prepared.data.clone())?;
    session.network().set_capture(true);

    let mut loss = String::from("round,epoch,setup,loss\n");
    let mut metrics = String::from("round,party,kind,bytes,cpu_ms\n");
    let kinds: std::collections::BTreeMap<u16, _> = session.network().parties().into_iter().collect();
    for _ in 0..cfg.rounds {
        let r = session.run_training_round()?;
        info!("round {} epoch {} loss {:.6}", r.round, r.epoch, r.loss);
        writeln!(loss, "{},{},{},{:.12}", r.round, r.epoch, r.setup, r.loss).unwrap();
        for (party, bytes) in &r.bytes {
            let kind = serde_json::to_value(kinds[party]).expect("kind serialises");
            writeln!(
                metrics,
                "{},{party},{},{bytes},{:.3}",
                r.round,
                kind.as_str().unwrap_or_default(),
                r.cpu_ms[party]
            )
            .unwrap();
        }
    }

    session.checkpoint().save(&common.out, CHECKPOINT_STEM).map_err(|e| CliError::Config(e.to_string()))?;
    write(&common.out.join("loss.csv"), loss)?;
    write(&common.out.join("metrics.csv"), metrics)?;
    write(&common.out.join("trace.jsonl"), trace_jsonl(&session.network().log()))?;
    let totals = session.network().meter();
    println!(
        "trained {} rounds in {} mode; {} bytes sent",
        cfg.rounds,
        serde_json::to_value(cfg.mode).unwrap().as_str().unwrap_or_default(),
        session.network().parties().iter().map(|&(p, _)| totals.transmitted(p, Phase::Training)).sum::<u64>()
    );
    session.close();
    let outputs = ["checkpoint.json", "checkpoint.bin", "loss.csv", "metrics.csv", "trace.jsonl"];
    write_manifest(&common.out, &manifest("train", &cfg, Some(&prepared), &outputs))
}

fn test(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    out_dir(&common.out)?;
    let prepared = prepare(&cfg)?;
    let dir = checkpoint.unwrap_or(&common.out);
    let ck = Checkpoint::load(dir, CHECKPOINT_STEM)
        .map_err(|e| CliError::Config(format!("cannot load checkpoint from {}: {e}", dir.display())))?;
    let mut session = Session::new(cfg.session_config(), prepared.data.clone())?;
    session.restore(&ck)?;
    let ids = cfg.test_slice(&prepared.data.test_ids).to_vec();
    let report = session.run_testing_phase(&ids)?;

    let mut predictions = String::from("id,probability,label\n");
    for ((id, p), y) in report.ids.iter().zip(&report.probabilities).zip(&report.labels) {
        writeln!(predictions, "{id},{p:.12},{y}").unwrap();
    }
    let snapshot = session.network().snapshot_metrics();
    let rows = snapshot.overhead(Some(&snapshot)).map_err(|e| CliError::Protocol(e.to_string()))?;
    write(&common.out.join("predictions.csv"), predictions)?;
    write(&common.out.join("test_metrics.csv"), overhead_csv(&rows))?;
    let summary = json!({
        "samples": report.ids.len(),
        "batches": report.batches,
        "accuracy": report.accuracy,
        "auc": report.auc,
    });
    write(&common.out.join("test_report.json"), serde_json::to_string_pretty(&summary).unwrap())?;
    println!(
        "tested {} samples in {} batches: accuracy {:.4}, AUC {:.4}",
        report.ids.len(),
        report.batches,
        report.accuracy,
        report.auc
    );
    session.close();
    let outputs = ["predictions.csv", "test_metrics.csv", "test_report.json"];
    write_manifest(&common.out, &manifest("test", &cfg, Some(&prepared), &outputs))
}

fn bench(common: &Common, dataset: Option<&str>, reps: usize) -> Result<()> {
    let mut common = common.clone();
    if let Some(d) = dataset {
        common.overrides.insert(0, format!("dataset={d}"));
    }
    let cfg = resolve_config(&common)?;
    out_dir(&common.out)?;
    let prepared = prepare(&cfg)?;
    let suite = OverheadSuiteConfig {
        session: cfg.session_config(),
        rounds: cfg.rounds,
        test_batches: cfg.test_batches.unwrap_or(5),
        repetitions: reps,
    };
    let report = run_overhead_suite(&cfg.dataset, &prepared.data, &suite)?;
    write(&common.out.join("table1_cpu.csv"), report.table_csv(Metric::CpuMs))?;
    write(&common.out.join("table2_bytes.csv"), report.table_csv(Metric::Bytes))?;
    write(&common.out.join("overhead_raw.csv"), report.raw_csv())?;
    print!("{}", report.table_csv(Metric::Bytes));
    let mut doc = manifest("bench", &cfg, Some(&prepared), &["table1_cpu.csv", "table2_bytes.csv", "overhead_raw.csv"]);
    doc["repetitions"] = json!(reps);
    write_manifest(&common.out, &doc)
}

fn ablate(out: &Path, config: AblationConfig) -> Result<()> {
    if config.batch_sizes.is_empty() || config.batch_sizes.contains(&0) {
        return Err(CliError::Config("batch sizes must be positive".into()));
    }
    if config.repetitions == 0 || config.key_bits < 64 {
        return Err(CliError::Config("need at least one repetition and a 64-bit modulus".into()));
    }
    out_dir(out)?;
    let report = run_ablation(&config).map_err(|e| CliError::Protocol(e.to_string()))?;
    write(&out.join("ablation.csv"), report.to_csv())?;
    write(&out.join("ablation.dat"), report.to_gnuplot())?;
    print!("{}", report.to_csv());
    if !report.validated() {
        return Err(CliError::Protocol("a private dot product disagrees with the plain matmul".into()));
    }
    let doc = json!({
        "manifest_version": MANIFEST_VERSION,
        "command": "ablate",
        "config": config,
        "seed": config.seed,
        "versions": { "vfl": env!("CARGO_PKG_VERSION"), "vfl_secagg": vfl_secagg::VERSION },
        "outputs": ["ablation.csv", "ablation.dat"],
    });
    write_manifest(out, &doc)
}

fn gen_data(out: &Path, dataset: &str, schema: Option<&Path>, rows: Option<usize>, seed: u64) -> Result<()> {
    let preset = presets::by_name(dataset);
    let schema = match (schema, &preset) {
        (Some(p), _) => Schema::from_json(p).map_err(|e| CliError::Config(e.to_string()))?,
        (None, Some(pr)) => pr.schema.clone(),
        (None, None) => return Err(CliError::Config(format!("unknown dataset {dataset:?}; pass --schema"))),
    };
    let n = rows.or(preset.as_ref().map(|p| p.rows)).unwrap_or(10_000);
    out_dir(out)?;
    let path = out.join(format!("{dataset}.csv"));
    synth_generate(n, &schema, seed)
        .write_csv(&schema, &path)
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!("wrote {n} rows to {}", path.display());
    let doc = json!({
        "manifest_version": MANIFEST_VERSION,
        "command": "gen-data",
        "config": { "dataset": dataset, "schema": schema, "rows": n },
        "seed": seed,
        "versions": { "vfl": env!("CARGO_PKG_VERSION"), "vfl_secagg": vfl_secagg::VERSION },
        "outputs": [format!("{dataset}.csv")],
    });
    write_manifest(out, &doc)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SetupCheck(c) => setup_check(&c),
        Command::Train(c) => train(&c),
        Command::Test { common, checkpoint } => test(&common, checkpoint.as_deref()),
        Command::Bench { common, dataset, reps } => bench(&common, dataset.as_deref(), reps),
        Command::Ablate {
            out,
            batch_sizes,
            reps,
            key_bits,
            seed,
        } => ablate(
            &out,
            AblationConfig {
                batch_sizes,
                repetitions: reps,
                key_bits,
                seed,
                ..Default::default()
            },
        ),
        Command::GenData {
            out,
            dataset,
            schema,
            rows,
            seed,
        } => gen_data(&out, &dataset, schema.as_deref(), rows, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VFL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vfl: {e}");
            ExitCode::from(e.code())
        }
    }
}
