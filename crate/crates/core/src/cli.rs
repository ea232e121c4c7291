//! Command-line interface.
//!
//! Machine-readable results go to stdout as single JSON (or CSV) payloads;
//! human progress notes go to stderr. Exit codes are a stable contract:
//! 0 success, 1 check failure, 2 user/config error, 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{CliConfigFile, ModelConfig};
use crate::data::{load_jsonl, save_jsonl, synth_dataset, Dataset, SynthSpec};
use crate::graph::build_graph;
use crate::model::Model;
use crate::trainer::{
    ablation_sweep, evaluate_checkpoint, history_csv, sweep_csv, train, Checkpoint, SweepAxis,
    TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USER_ERROR: i32 = 2;
pub const EXIT_NUMERIC_ABORT: i32 = 3;

/// Environment variable read by `sweep` for its worker-thread count.
pub const SWEEP_THREADS_ENV: &str = "EMOFUSE_SWEEP_THREADS";

#[derive(Parser)]
#[command(
    name = "emofuse",
    about = "Multimodal conversation emotion classifier: synthesize corpora, train, evaluate, sweep, verify gradients"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tri-modal conversation corpus (JSONL)
    Synth(SynthArgs),
    /// Train a model from a config file and JSONL datasets
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Train one model per hyperparameter value and tabulate metrics
    Sweep(SweepArgs),
    /// Compare analytic gradients of the full model against finite differences
    Gradcheck(GradcheckArgs),
    /// Print a conversation graph's edges and in-degree histogram
    InspectGraph(InspectGraphArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output JSONL path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    convs: usize,
    #[arg(long, default_value_t = 8)]
    min_utts: usize,
    #[arg(long, default_value_t = 12)]
    max_utts: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Feature dims as "t,a,v" (or one value for all three)
    #[arg(long, default_value = "16,16,16")]
    dims: String,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.6)]
    persistence: f64,
    /// Fraction of utterances whose features carry no class signal
    #[arg(long, default_value_t = 0.0)]
    ambiguity: f64,
    /// Skew of fresh label draws toward each speaker's preferred class
    #[arg(long, default_value_t = 0.0)]
    speaker_bias: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (key = value lines)
    #[arg(long)]
    config: PathBuf,
    /// Training JSONL (overrides train_data from the config file)
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation JSONL (overrides valid_data from the config file)
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Output directory for model.ckpt and history.csv
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on training epochs (overrides the config file)
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the confusion matrix as CSV to this path
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Dataset the reported metrics come from (defaults to the valid set)
    #[arg(long)]
    eval: Option<PathBuf>,
    /// windows | layers | lambda | update_rule | modalities
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values; windows and layers take "a:b" pairs
    #[arg(long)]
    values: String,
    /// Write the CSV table here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Conversation length
    #[arg(long, default_value_t = 4)]
    utterances: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Feature dims as "t,a,v"
    #[arg(long, default_value = "5,4,6")]
    dims: String,
    #[arg(long, default_value_t = 8)]
    model_dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Worst tolerated relative error
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Fault-injection hook: perturb this parameter's analytic gradient so
    /// the check must fail (testing only)
    #[arg(long, hide = true)]
    corrupt: Option<String>,
}

#[derive(Args)]
struct InspectGraphArgs {
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 1)]
    j: usize,
    #[arg(long, default_value_t = 1)]
    k: usize,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) =>

 {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

/// Error wrapper that knows its exit code.
#[derive(Debug)]
enum CliError {
    User(String),
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(msg) | CliError::Numeric(msg) => f.write_str(msg),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER_ERROR,
            CliError::Numeric(_) => EXIT_NUMERIC_ABORT,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::NumericalAbort { .. } => CliError::Numeric(err.to_string()),
            other => CliError::User(other.to_string()),
        }
    }
}

macro_rules! user_error_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(err: $ty) -> Self {
                CliError::User(err.to_string())
            }
        })*
    };
}

user_error_from!(
    crate::data::DataError,
    crate::config::ConfigError,
    crate::model::ModelError,
    crate::tensor::TensorError,
    std::io::Error
);

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::InspectGraph(args) => cmd_inspect_graph(args),
    }
}

fn parse_dims(text: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| CliError::User(format!("bad dim '{s}': {e}")))
    };
    match parts.as_slice() {
        [one] => {
            let d = parse(one)?;
            Ok([d, d, d])
        }
        [t, a, v] => Ok([parse(t)?, parse(a)?, parse(v)?]),
        _ => Err(CliError::User(format!(
            "dims must be one value or 't,a,v', got '{text}'"
        ))),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<i32, CliError> {
    let spec = SynthSpec {
        seed: args.seed,
        num_convs: args.convs,
        min_utts: args.min_utts,
        max_utts: args.max_utts,
        num_classes: args.classes,
        num_speakers: args.speakers,
        dims: parse_dims(&args.dims)?,
        separation: args.separation,
        persistence: args.persistence,
        ambiguity: args.ambiguity,
        speaker_bias: args.speaker_bias,
    };
    let dataset = synth_dataset(&spec)?;
    save_jsonl(&args.out, &dataset)?;
    let mut histogram = vec![0usize; spec.num_classes];
    for conv in &dataset.conversations {
        for utt in &conv.utterances {
            histogram[utt.label] += 1;
        }
    }
    eprintln!(
        "wrote {} conversations / {} utterances to {}",
        dataset.conversations.len(),
        dataset.num_utterances(),
        args.out.display()
    );
    println!(
        "{}",
        json!({
            "conversations": dataset.conversations.len(),
            "utterances": dataset.num_utterances(),
            "class_histogram": histogram,
            "path": args.out.display().to_string(),
        })
    );
    Ok(EXIT_OK)
}

fn load_config_file(path: &Path) -> Result<CliConfigFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("cannot read config {}: {e}", path.display())))?;
    Ok(CliConfigFile::parse(&text)?)
}

fn resolve_dataset(
    flag: Option<PathBuf>,
    from_config: Option<&String>,
    what: &str,
) -> Result<Dataset, CliError> {
    let path = flag
        .or_else(|| from_config.map(PathBuf::from))
        .ok_or_else(|| CliError::User(format!("no {what} dataset given (flag or config key)")))?;
    Ok(load_jsonl(&path)?)
}

fn cmd_train(args: TrainArgs) -> Result<i32, CliError> {
    let file = load_config_file(&args.config)?;
    let mut config = file.config.clone();
    if let Some(me) = args.max_epochs {
        config.max_epochs = me;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    // load and validate every input before creating any output
    let train_set = resolve_dataset(args.train, file.train_data.as_ref(), "training")?;
    let valid_set = resolve_dataset(args.valid, file.valid_data.as_ref(), "validation")?;
    let out_dir = args
        .out
        .or_else(|| file.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::User("no output directory given (--out or out_dir)".into()))?;

    eprintln!(
        "training: {} train / {} valid conversations, max {} epochs",
        train_set.conversations.len(),
        valid_set.conversations.len(),
        config.max_epochs
    );
    let outcome = train(&config, &train_set, &valid_set)?;

    fs::create_dir_all(&out_dir)?;
    let ckpt_path = out_dir.join("model.ckpt");
    let history_path = out_dir.join("history.csv");
    outcome.checkpoint.save(&ckpt_path)?;
    fs::write(&history_path, history_csv(&outcome.history))?;

    let last = outcome.history.last();
    println!(
        "{}",
        json!({
            "checkpoint": ckpt_path.display().to_string(),
            "history": history_path.display().to_string(),
            "epochs_run": outcome.history.len(),
            "best_epoch": outcome.best_epoch,
            "best_valid_wa_f1": outcome.checkpoint.best_metric,
            "final_train_loss": last.map(|h| h.train_loss),
        })
    );
    Ok(EXIT_OK)
}

fn cmd_eval(args: EvalArgs) -> Result<i32, CliError> {
    let checkpoint = Checkpoint::load(&args.ckpt)?;
    let dataset = load_jsonl(&args.data)?;
    let report = evaluate_checkpoint(&checkpoint, &dataset)?;
    if let Some(path) = args.confusion_csv {
        fs::write(&path, report.confusion_csv(&dataset.meta.classes))?;
    }
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| CliError::User(e.to_string()))?
    );
    Ok(EXIT_OK)
}

fn parse_pairs(values: &str, what: &str) -> Result<Vec<(usize, usize)>, CliError> {
    values
        .split(',')
        .map(|pair| {
            let (a, b) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::User(format!("{what} values need 'a:b' pairs")))?;
            let a = a
                .parse()
                .map_err(|e| CliError::User(format!("bad {what} value '{pair}': {e}")))?;
            let b = b
                .parse()
                .map_err(|e| CliError::User(format!("bad {what} value '{pair}': {e}")))?;
            Ok((a, b))
        })
        .collect()
}

fn parse_axis(axis: &str, values: &str) -> Result<SweepAxis, CliError> {
    match axis {
        "windows" => Ok(SweepAxis::Windows(parse_pairs(values, "windows")?)),
        "layers" => Ok(SweepAxis::Layers(parse_pairs(values, "layers")?)),
        "lambda" => {
            let vs = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|e| CliError::User(format!("bad lambda '{v}': {e}")))
                })
                .collect::<Result<_, _>>()?;
            Ok(SweepAxis::SpeakerScale(vs))
        }
        "update_rule" => {
            let vs = values
                .split(',')
                .map(|v| v.trim().parse().map_err(CliError::from))
                .collect::<Result<_, _>>()?;
            Ok(SweepAxis::UpdateRules(vs))
        }
        "modalities" => {
            let vs = values
                .split(',')
                .map(|v| v.trim().parse().map_err(CliError::from))
                .collect::<Result<_, _>>()?;
            Ok(SweepAxis::Modalities(vs))
        }
        other => Err(CliError::User(format!(
            "unknown axis '{other}' (windows, layers, lambda, update_rule, modalities)"
        ))),
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<i32, CliError> {
    let file = load_config_file(&args.config)?;
    let config = file.config.clone();
    let train_set = resolve_dataset(args.train, file.train_data.as_ref(), "training")?;
    let valid_set = resolve_dataset(args.valid, file.valid_data.as_ref(), "validation")?;
    let eval_set = match args.eval {
        Some(path) => load_jsonl(&path)?,
        None => valid_set.clone(),
    };
    let axis = parse_axis(&args.axis, &args.values)?;
    let workers = std::env::var(SWEEP_THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1usize)
        .max(1);
    eprintln!("sweep over {} with {workers} worker(s)", args.axis);
    let rows = ablation_sweep(&config, &axis, &train_set, &valid_set, &eval_set, workers)?;
    let csv = sweep_csv(&rows);
    if let Some(path) = args.out {
        fs::write(&path, &csv)?;
    }
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<i32, CliError> {
    let dims = parse_dims(&args.dims)?;
    let dataset = synth_dataset(&SynthSpec {
        seed: args.seed,
        num_convs: 1,
        min_utts: args.utterances,
        max_utts: args.utterances,
        num_classes: args.classes,
        num_speakers: args.speakers,
        dims,
        separation: 2.0,
        persistence: 0.6,
        ambiguity: 0.0,
        speaker_bias: 0.0,
    })?;
    let config = ModelConfig {
        model_dim: args.model_dim,
        heads: args.heads,
        graph_layers: 1,
        cross_layers: 1,
        window_past: 1,
        window_future: 1,
        dropout: 0.0,
        seed: args.seed,
        ..ModelConfig::default()
    };
    let mut model = Model::build(config, dataset.meta.clone())?;
    let conv = &dataset.conversations[0];
    let mut report = model
        .gradcheck(conv, args.step)
        .map_err(|e| CliError::User(e.to_string()))?;

    if let Some(name) = &args.corrupt {
        let hit = report.params.iter_mut().find(|p| &p.name == name);
        match hit {
            Some(p) => {
                p.max_rel_err += 1.0;
                report.worst_rel_err = report.worst_rel_err.max(p.max_rel_err);
            }
            None => {
                return Err(CliError::User(format!(
                    "no parameter named '{name}' to corrupt"
                )))
            }
        }
    }

    // worst error per top-level module prefix
    let mut per_module: std::collections::BTreeMap<String, f64> = Default::default();
    for p in &report.params {
        let module = p.name.split('.').next().unwrap_or("?").to_string();
        let entry = per_module.entry(module).or_insert(0.0);
        *entry = entry.max(p.max_rel_err);
    }
    let failing = report.failing(args.threshold);
    let pass = failing.is_empty();
    println!(
        "{}",
        json!({
            "pass": pass,
            "worst_rel_err": report.worst_rel_err,
            "per_module": per_module,
            "failing": failing,
            "parameters_checked": report.params.len(),
            "utterances": args.utterances,
        })
    );
    for (module, worst) in &per_module {
        eprintln!("{module}: worst rel err {worst:.3e}");
    }
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn cmd_inspect_graph(args: InspectGraphArgs) -> Result<i32, CliError> {
    if args.m == 0 {
        return Err(CliError::User("--m must be at least 1".into()));
    }
    let graph = build_graph(args.m, args.j, args.k);
    let histogram: Vec<[usize; 2]> = graph
        .in_degree_histogram()
        .into_iter()
        .map(|(deg, count)| [deg, count])
        .collect();
    println!(
        "{}",
        json!({
            "m": args.m,
            "window": [args.j, args.k],
            "num_edges": graph.num_edges(),
            "edges": graph.edges(),
            "in_degree_histogram": histogram,
        })
    );
    Ok(EXIT_OK)
}
