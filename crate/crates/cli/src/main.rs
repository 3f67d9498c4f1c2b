//! `mtrec`: prepare session data, train and evaluate recommenders, and serve
//! one-off recommendations from a checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use mtrec::checkpoint::{load_checkpoint, Checkpoint};
use mtrec::config::RunConfig;
use mtrec::data::{load_catalog, sessions_to_jsonl, ItemCatalog, ITEM_TASK};
use mtrec::eval::{grid_table, GridRow};
use mtrec::heads::Variant;
use mtrec::model::Model;
use mtrec::pipeline::{self, PreparedData};
use mtrec::synthetic;
use mtrec::training::{gradient_check, GradCheckConfig, StopReason};
use mtrec::Error;

#[derive(Parser, Debug)]
#[command(name = "mtrec", version, about = "Session-based recommendation from item metadata")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split sessions, generate examples, train tokenizers and write the artifacts.
    Prepare(Common),
    /// Train the configured variant and write its best checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Where to write the checkpoint (default: <output_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split, or train and compare every variant.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "variants")]
        checkpoint: Option<PathBuf>,
        /// Train and evaluate all five variants and print one combined table.
        #[arg(long)]
        variants: bool,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Recommend next items and categories for a session.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Catalog source; defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Session items, oldest first.
        #[arg(required = true)]
        items: Vec<String>,
    },
    /// Compare analytic gradients with finite differences on one example.
    Gradcheck(Common),
    /// Write a synthetic catalog, session log and config to a directory.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Category)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        sessions: Option<usize>,
    },
}

#[derive(clap::Args, Debug)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SynthKind {
    Category,
    Successor,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::DuplicateItem(_)
            | Error::MissingColumn(_)
            | Error::Tokenizer(_)
            | Error::Variant(_)
            | Error::TaskMismatch(_)
            | Error::Empty(_) => CliError::Validation(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Hash of the effective configuration, recorded in every log line.
fn config_hash(config: &RunConfig) -> String {
    let digest = Sha256::digest(serde_json::to_vec(config).expect("config serializes"));
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn output_dir(config: &RunConfig) -> CliResult<PathBuf> {
    let dir = config.paths.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Prints JSON lines to stdout and appends them to a log file.
struct Log {
    hash: String,
    file: Option<fs::File>,
}

impl Log {
    fn new(config: &RunConfig, file: Option<&Path>) -> CliResult<Self> {
        let file = match file {
            Some(p) => Some(fs::File::create(p).map_err(|e| io_err(p, e))?),
            None => None,
        };
        Ok(Self {
            hash: config_hash(config),
            file,
        })
    }

    fn emit(&mut self, event: &str, mut fields: Value) {
        let obj = fields.as_object_mut().expect("log fields are an object");
        obj.insert("event".into(), event.into());
        obj.insert("config_hash".into(), self.hash.clone().into());
        let line = serde_json::to_string(&fields).expect("log line serializes");
        println!("{line}");
        if let Some(f) = &mut self.file {
            let _ = writeln!(f, "{line}");
        }
    }
}

fn cmd_prepare(common: &Common) -> CliResult {
    let config = load_config(common)?;
    let prepared = pipeline::prepare(&config)?;
    let dir = output_dir(&config)?.join("prepared");
    let written = pipeline::write_artifacts(&prepared, &config, &dir)?;
    let mut log = Log::new(&config, None)?;
    let mut stats = serde_json::to_value(&prepared.stats).expect("stats serialize");
    stats["artifacts"] = written.len().into();
    stats["dir"] = dir.display().to_string().into();
    log.emit("prepared", stats);
    Ok(())
}

fn cmd_train(common: &Common, checkpoint: Option<&Path>) -> CliResult {
    let config = load_config(common)?;
    let dir = output_dir(&config)?;
    let mut log = Log::new(&config, Some(&dir.join("train_log.jsonl")))?;
    let prepared = pipeline::prepare(&config)?;
    log.emit("prepared", serde_json::to_value(&prepared.stats).expect("stats serialize"));
    let artifacts = pipeline::train_prepared_to_checkpoint(&prepared, &config, &mut |r| {
        log.emit("epoch", serde_json::to_value(r).expect("record serializes"))
    })?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("model.ckpt"));
    write_file(&path, &artifacts.checkpoint)?;
    log.emit(
        "checkpoint",
        json!({"path": path.display().to_string(), "parameters": artifacts.parameters, "stop": artifacts.stop}),
    );
    if let StopReason::Diverged(msg) = artifacts.stop {
        return Err(CliError::Runtime(format!("training diverged ({msg}); best checkpoint kept")));
    }
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>, variants: bool, k: Option<usize>) -> CliResult {
    let mut config = load_config(common)?;
    if let Some(k) = k {
        config.eval.k = k;
    }
    let dir = output_dir(&config)?;
    let prepared = pipeline::prepare(&config)?;
    let mut log = Log::new(&config, None)?;
    if variants {
        return eval_grid(&config, &prepared, &dir, &mut log);
    }
    let path = checkpoint.expect("clap requires a checkpoint without --variants");
    let Checkpoint { model, .. } = load_checkpoint(path)?;
    let table = model.item_table(&prepared.catalog)?;
    let report = pipeline::evaluate_on_test(&model, &table, &prepared, &config, config.eval.k)?;
    write_file(&dir.join("eval_report.json"), report.to_json())?;
    write_file(&dir.join("eval_report.txt"), report.to_table())?;
    eprint!("{}", report.to_table());
    log.emit("eval", json!({"variant": model.variant(), "report": report}));
    Ok(())
}

fn eval_grid(config: &RunConfig, prepared: &PreparedData, dir: &Path, log: &mut Log) -> CliResult {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let trained = pipeline::train_variant(prepared, config, variant, config.seed, &mut |r| {
            log.emit("epoch", json!({"variant": variant, "record": r}))
        })?;
        let report =
            pipeline::evaluate_on_test(trained.model(), &trained.table, prepared, config, config.eval.k)?;
        let row = GridRow {
            variant: variant.name().into(),
            parameters: trained.model().parameter_count(),
            report,
        };
        log.emit("variant", serde_json::to_value(&row).expect("row serializes"));
        rows.push(row);
    }
    let table = grid_table(&rows);
    write_file(&dir.join("eval_grid.json"), serde_json::to_string_pretty(&rows).expect("rows serialize"))?;
    write_file(&dir.join("eval_grid.txt"), &table)?;
    eprint!("{table}");
    Ok(())
}

fn recommend_catalog(checkpoint: &Checkpoint, config: Option<&Path>) -> CliResult<ItemCatalog> {
    let config = match config {
        Some(p) => RunConfig::load(p)?,
        None => serde_json::from_value::<RunConfig>(checkpoint.run.clone()).map_err(|_| {
            CliError::Validation("checkpoint carries no run config; pass --config".into())
        })?,
    };
    Ok(load_catalog(&config.paths.catalog, &config.schema)?)
}

fn cmd_recommend(checkpoint: &Path, config: Option<&Path>, k: usize, items: &[String]) -> CliResult {
    if k == 0 {
        return Err(CliError::Validation("--k must be at least 1".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let catalog = recommend_catalog(&ckpt, config)?;
    let model: &Model = &ckpt.model;
    let table = model.item_table(&catalog)?;
    let prefix: Vec<u32> = items.iter().map(|i| table.lookup(i)).collect();
    let prediction = model.predict(&table, &prefix)?;
    let mut out = json!({
        "variant": model.variant(),
        "session": items,
        "unknown_items": items.iter().filter(|i| !catalog.contains(i)).count(),
    });
    let mut categories = serde_json::Map::new();
    for (t, task) in model.tasks().iter().enumerate() {
        let ranked: Vec<Value> = model
            .rank(&prediction.probs[t], t, k)
            .into_iter()
            .map(|(i, p)| json!({"label": task.labels.label(i), "probability": p}))
            .collect();
        if task.name == ITEM_TASK {
            out["items"] = ranked.into();
        } else {
            categories.insert(task.name.clone(), ranked.into());
        }
    }
    out["categories"] = categories.into();
    println!("{}", serde_json::to_string_pretty(&out).expect("output serializes"));
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> CliResult {
    let mut config = load_config(common)?;
    let mut log = Log::new(&config, None)?;
    config.transformer.dropout = 0.0;
    let prepared = pipeline::prepare(&config)?;
    let spec = pipeline::model_spec(&prepared, &config, config.variant)?;
    let model = Model::build(spec, config.seed)?;
    let table = model.item_table(&prepared.catalog)?;
    let examples = model.encode_examples(&prepared.train[..prepared.train.len().min(200)], &table);
    let example = examples
        .iter()
        .max_by_key(|e| e.prefix.len())
        .ok_or_else(|| CliError::Validation("no training examples".into()))?;
    let report = gradient_check(&model, &table, example, &GradCheckConfig { seed: config.seed, ..Default::default() })?;
    for g in &report.groups {
        log.emit("group", serde_json::to_value(g).expect("group serializes"));
    }
    log.emit("gradcheck", json!({"pass": report.pass, "tolerance": report.tolerance, "epsilon": report.epsilon}));
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn cmd_synth(kind: SynthKind, out: &Path, seed: Option<u64>, sessions: Option<usize>) -> CliResult {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let (catalog, log, schema) = match kind {
        SynthKind::Category => {
            let mut cfg = synthetic::CategoryConfig::default();
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.sessions = sessions.unwrap_or(cfg.sessions);
            let (c, s) = synthetic::category_corpus(&cfg);
            (c, s, synthetic::category_schema())
        }
        SynthKind::Successor => {
            let mut cfg = synthetic::SuccessorConfig::default();
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.sessions = sessions.unwrap_or(cfg.sessions);
            let (c, s) = synthetic::successor_corpus(&cfg);
            (c, s, synthetic::successor_schema())
        }
    };
    write_file(&out.join("catalog.tsv"), catalog.to_tsv())?;
    write_file(&out.join("sessions.jsonl"), sessions_to_jsonl(&log))?;
    let config = synthetic::desk_config(schema, "catalog.tsv", "sessions.jsonl", "run");
    write_file(&out.join("config.json"), config.to_json())?;
    println!("{}", json!({"event": "synth", "items": catalog.len(), "sessions": log.len(), "dir": out.display().to_string()}));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Prepare(c) => cmd_prepare(c),
        Command::Train { common, checkpoint } => cmd_train(common, checkpoint.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            variants,
            k,
        } => cmd_eval(common, checkpoint.as_deref(), *variants, *k),
        Command::Recommend {
            checkpoint,
            config,
            k,
            items,
        } => cmd_recommend(checkpoint, config.as_deref(), *k, items),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Synth {
            kind,
            out,
            seed,
            sessions,
        } => cmd_synth(*kind, out, *seed, *sessions),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
