//! The `genrank` command line.
//!
//! Training settings come from an optional JSON config file; any flag given on
//! the command line overrides the file, and fields missing from both take the
//! library defaults.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{build_bank, BankError, StrategyKind};
use crate::disturb::{apply, DisturbanceKind};
use crate::exprcore::{evaluate, map_numbers, parse_decimal, parse_expression, results_equal, MappedProblem, NumberTable};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelError};
use crate::pipeline::{
    evaluate_accuracy, init_model, solve, write_verdicts, JointMode, ModelGenerator, PipelineError, Report, TrainConfig,
    Trainer, TrainerState,
};
use crate::seeding::derive_rng;
use crate::synthdata::{generate_dataset, load_dataset, split_dataset, write_records, DataError, OpCountDistribution, MAX_OPS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(e) => CliError::Runtime(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Data(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "genrank", version, about = "Generate & rank solver for math word problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset as JSON lines.
    Synth(SynthArgs),
    /// Fine-tune the generator, then train generator and ranker jointly.
    Train(TrainArgs),
    /// Solve problems with a trained checkpoint.
    Solve(SolveArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Build an expression bank and dump it as JSON lines.
    Bank(BankArgs),
    /// Apply one tree disturbance to an expression.
    Disturb(DisturbArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sample operator counts uniformly from 1 to this value.
    #[arg(long, default_value_t = MAX_OPS)]
    pub max_ops: usize,
    /// Comma-separated probabilities for operator counts 1 to 5; overrides --max-ops.
    #[arg(long)]
    pub op_weights: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Hold out this fold of the training file as the dev set.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long, short = 'k')]
    pub beam_size: Option<usize>,
    #[arg(long, short = 'b')]
    pub bank_size: Option<usize>,
    #[arg(long)]
    pub strategy: Option<StrategyKind>,
    /// Build the bank once instead of after every joint epoch.
    #[arg(long)]
    pub no_online: bool,
    #[arg(long)]
    pub disturb_count: Option<usize>,
    /// Freeze the backbone and generator; train only the ranking head.
    #[arg(long)]
    pub two_stage: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub rank_batch_size: Option<usize>,
    #[arg(long)]
    pub positive_ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many epochs (the run can be continued with --resume).
    #[arg(long)]
    pub halt_after: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Problem text.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub text: Option<String>,
    /// JSON-lines file of objects with a "text" field (and optional "id").
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 24)]
    pub max_len: usize,
    /// Print one JSON object per problem instead of tables.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 24)]
    pub max_len: usize,
    /// Write per-problem verdicts as JSON lines.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Write the report as JSON; printed to standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include accuracy per ground-truth operator count.
    #[arg(long)]
    pub by_length: bool,
}

#[derive(Args, Debug)]
pub struct BankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "model-tree")]
    pub strategy: StrategyKind,
    #[arg(long, short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, short = 'b', default_value_t = 20)]
    pub b: usize,
    #[arg(long)]
    pub disturb_count: Option<usize>,
    #[arg(long, default_value_t = 24)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DisturbArgs {
    /// Expression over NUM tokens, e.g. "NUM0 * NUM1 / NUM2".
    #[arg(long)]
    pub expr: String,
    /// Comma-separated number table, e.g. "25,12,20".
    #[arg(long)]
    pub numbers: String,
    #[arg(long)]
    pub kind: DisturbanceKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Training settings plus the data and output locations of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub fold: Option<usize>,
    pub folds: Option<usize>,
    #[serde(flatten)]
    pub training: TrainConfig,
}

const RUN_KEYS: [&str; 5] = ["train_path", "dev_path", "out_dir", "fold", "folds"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, CliError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let serde_json::Value::Object(mut map) = value else {
            return Err(CliError::Usage("config must be a JSON object".into()));
        };
        let mut run = serde_json::Map::new();
        for key in RUN_KEYS {
            if let Some(v) = map.remove(key) {
                run.insert(key.to_string(), v);
            }
        }
        let training: TrainConfig =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let field = |key: &str| run.get(key).cloned().unwrap_or(serde_json::Value::Null);
        let parse = |key: &str| -> Result<_, CliError> {
            serde_json::from_value(field(key)).map_err(|e| CliError::Usage(format!("config field {key}: {e}")))
        };
        Ok(RunConfig {
            train_path: parse("train_path")?,
            dev_path: parse("dev_path")?,
            out_dir: parse("out_dir")?,
            fold: serde_json::from_value(field("fold")).map_err(|e| CliError::Usage(format!("config field fold: {e}")))?,
            folds: serde_json::from_value(field("folds")).map_err(|e| CliError::Usage(format!("config field folds: {e}")))?,
            training,
        })
    }

    /// Resolve file settings and flag overrides.
    pub fn resolve(args: &TrainArgs) -> Result<RunConfig, CliError> {
        let mut config = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig {
                train_path: None,
                dev_path: None,
                out_dir: None,
                fold: None,
                folds: None,
                training: TrainConfig::default(),
            },
        };
        fn set<T: Clone>(target: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *target = v.clone();
            }
        }
        if args.train.is_some() {
            config.train_path = args.train.clone();
        }
        if args.dev.is_some() {
            config.dev_path = args.dev.clone();
        }
        if args.out.is_some() {
            config.out_dir = args.out.clone();
        }
        if args.fold.is_some() {
            config.fold = args.fold;
        }
        if args.folds.is_some() {
            config.folds = args.folds;
        }
        let t = &mut config.training;
        set(&mut t.seed, &args.seed);
        set(&mut t.finetune_epochs, &args.finetune_epochs);
        set(&mut t.joint_epochs, &args.joint_epochs);
        set(&mut t.beam_size, &args.beam_size);
        set(&mut t.bank_size, &args.bank_size);
        set(&mut t.strategy, &args.strategy);
        if args.no_online {
            t.online = false;
        }
        if args.disturb_count.is_some() {
            t.disturb_count = args.disturb_count;
        }
        if args.two_stage {
            t.joint_mode = JointMode::TwoStage;
        }
        set(&mut t.batch_size, &args.batch_size);
        set(&mut t.rank_batch_size, &args.rank_batch_size);
        set(&mut t.positive_ratio, &args.positive_ratio);
        set(&mut t.optimizer.lr, &args.lr);
        set(&mut t.optimizer.weight_decay, &args.weight_decay);
        set(&mut t.optimizer.warmup_ratio, &args.warmup_ratio);
        set(&mut t.max_len, &args.max_len);
        set(&mut t.model.d_model, &args.d_model);
        set(&mut t.model.heads, &args.heads);
        set(&mut t.model.ff_dim, &args.ff_dim);
        set(&mut t.model.encoder_layers, &args.encoder_layers);
        set(&mut t.model.decoder_layers, &args.decoder_layers);
        config.training.validate()?;
        match (config.fold, config.folds) {
            (Some(f), Some(n)) if n < 2 || f >= n => return Err(CliError::Usage(format!("fold {f} of {n} is out of range"))),
            (Some(_), None) | (None, Some(_)) => return Err(CliError::Usage("--fold and --folds go together".into())),
            _ => {}
        }
        Ok(config)
    }
}

/// Parse arguments, run the command and map failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Solve(args) => cmd_solve(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bank(args) => cmd_bank(&args),
        Command::Disturb(args) => cmd_disturb(&args),
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Write through a temporary file so an interrupted run never leaves a torn file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let distribution = match &args.op_weights {
        Some(text) => {
            let weights: Vec<f64> = text
                .split(',')
                .map(|w| w.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad weight '{w}'"))))
                .collect::<Result<_, _>>()?;
            let weights: [f64; MAX_OPS] =
                weights.try_into().map_err(|_| CliError::Usage(format!("--op-weights needs {MAX_OPS} values")))?;
            OpCountDistribution::new(weights)?
        }
        None if (1..=MAX_OPS).contains(&args.max_ops) => OpCountDistribution::uniform_up_to(args.max_ops),
        None => return Err(CliError::Usage(format!("--max-ops must be between 1 and {MAX_OPS}"))),
    };
    let records = generate_dataset(args.n, &distribution, args.seed);
    let mut out = output(&args.out)?;
    write_records(&records, &mut out)?;
    out.flush()?;
    Ok(())
}

fn load(path: &Path) -> Result<Vec<MappedProblem>, CliError> {
    let dataset = load_dataset(path).map_err(|e| match e {
        DataError::Io(io) => CliError::Usage(format!("{}: {io}", path.display())),
        other => CliError::Usage(format!("{}: {other}", path.display())),
    })?;
    for w in &dataset.warnings {
        eprintln!("warning: {}: line {}: {}", path.display(), w.line, w.message);
    }
    Ok(dataset.problems)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    let (model, _) = load_checkpoint(path).map_err(|e| match e {
        ModelError::Io(io) => CliError::Usage(format!("{}: {io}", path.display())),
        other => CliError::Runtime(format!("{}: {other}", path.display())),
    })?;
    Ok(model)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config = RunConfig::resolve(args)?;
    let train_path = config.train_path.clone().ok_or_else(|| CliError::Usage("no training data (--train)".into()))?;
    let out_dir = config.out_dir.clone().ok_or_else(|| CliError::Usage("no output directory (--out)".into()))?;
    let all = load(&train_path)?;
    let (train, mut dev): (Vec<MappedProblem>, Option<Vec<MappedProblem>>) = match (config.fold, config.folds) {
        (Some(fold), Some(folds)) => {
            let assignment = split_dataset(all.len(), folds, config.training.seed);
            let (held, kept): (Vec<_>, Vec<_>) = all.into_iter().zip(assignment).partition(|(_, f)| *f == fold);
            (kept.into_iter().map(|(p, _)| p).collect(), Some(held.into_iter().map(|(p, _)| p).collect()))
        }
        _ => (all, None),
    };
    if let Some(path) = &config.dev_path {
        dev = Some(load(path)?);
    }
    if train.is_empty() {
        return Err(CliError::Usage("the training set is empty".into()));
    }
    fs::create_dir_all(&out_dir)?;
    let hash = config.training.hash();
    let mut trainer = if args.resume {
        let state_text = fs::read_to_string(out_dir.join(STATE_FILE))
            .map_err(|e| CliError::Usage(format!("nothing to resume in {}: {e}", out_dir.display())))?;
        let state: TrainerState = serde_json::from_str(&state_text)?;
        let model = load_model(&out_dir.join(CHECKPOINT_FILE))?;
        Trainer::resume(config.training.clone(), model, &train, dev.as_deref(), state)?
    } else {
        let model = init_model(&train, &config.training)?;
        write_atomic(&out_dir.join(CONFIG_FILE), &serde_json::to_vec_pretty(&config)?)?;
        Trainer::new(config.training.clone(), model, &train, dev.as_deref())?
    };
    trainer.run(args.halt_after, |t, entry| {
        let model_path = out_dir.join(CHECKPOINT_FILE);
        let tmp = model_path.with_extension("tmp");
        save_checkpoint(&tmp, t.model(), &hash)?;
        fs::rename(&tmp, &model_path)?;
        let mut log = Vec::new();
        for line in t.log() {
            serde_json::to_writer(&mut log, line)?;
            log.push(b'\n');
        }
        write_atomic(&out_dir.join(LOG_FILE), &log).map_err(|e| PipelineError::Config(e.to_string()))?;
        write_atomic(&out_dir.join(STATE_FILE), &serde_json::to_vec(&t.state())?)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        eprintln!(
            "{:?} epoch {}: J_GEN {} J_RANK {}",
            entry.phase,
            entry.epoch,
            entry.j_gen.map_or("-".into(), |v| format!("{v:.4}")),
            entry.j_rank.map_or("-".into(), |v| format!("{v:.4}")),
        );
        Ok(())
    })?;
    if trainer.log().is_empty() {
        save_checkpoint(out_dir.join(CHECKPOINT_FILE), trainer.model(), &hash)?;
        write_atomic(&out_dir.join(LOG_FILE), b"")?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct SolveInput {
    id: Option<String>,
    text: String,
}

fn read_solve_inputs(path: &Path) -> Result<Vec<SolveInput>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut inputs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let input: SolveInput = serde_json::from_str(&line)
            .map_err(|e| CliError::Usage(format!("{}: line {}: malformed record: {e}", path.display(), i + 1)))?;
        inputs.push(input);
    }
    Ok(inputs)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    id: Option<&'a str>,
    expression: Option<String>,
    answer: Option<String>,
    candidates: Vec<crate::pipeline::Candidate>,
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    if args.k == 0 || args.max_len < 2 {
        return Err(CliError::Usage("--k must be at least 1 and --max-len at least 2".into()));
    }
    let inputs = match (&args.text, &args.input) {
        (Some(text), _) => vec![SolveInput { id: None, text: text.clone() }],
        (None, Some(path)) => read_solve_inputs(path)?,
        (None, None) => return Err(CliError::Usage("give --text or --input".into())),
    };
    let model = load_model(&args.checkpoint)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for input in &inputs {
        let (tokens, numbers) = map_numbers(&input.text);
        let solution = solve(&model, &tokens, &numbers, args.k, args.max_len)?;
        if args.json {
            let record = SolveOutput {
                id: input.id.as_deref(),
                expression: solution.choice.as_ref().map(|c| c.expr.to_infix()),
                answer: solution.choice.as_ref().map(|c| c.value.to_string()),
                candidates: solution.candidates,
            };
            serde_json::to_writer(&mut out, &record)?;
            writeln!(out)?;
            continue;
        }
        if let Some(id) = &input.id {
            writeln!(out, "problem {id}")?;
        }
        match &solution.choice {
            Some(choice) => {
                writeln!(out, "expression: {}", choice.expr)?;
                writeln!(out, "answer: {}", choice.value)?;
            }
            None => writeln!(out, "no valid candidate")?,
        }
        writeln!(out, "{:>3}  {:>10}  {:>8}  {:<12} expression", "#", "log-prob", "score", "value")?;
        for (i, c) in solution.candidates.iter().enumerate() {
            let marker = if solution.choice.as_ref().is_some_and(|ch| ch.index == i) { '*' } else { ' ' };
            writeln!(
                out,
                "{marker}{i:>2}  {:>10.4}  {:>8}  {:<12} {}",
                c.log_prob,
                c.score.map_or("-".into(), |v| format!("{v:.4}")),
                c.value.clone().unwrap_or_else(|| "-".into()),
                c.expression
            )?;
        }
    }
    Ok(())
}

pub fn report_json(report: &Report, by_length: bool) -> serde_json::Value {
    let mut value = serde_json::to_value(report).expect("report serializes");
    if !by_length {
        if let Some(map) = value.as_object_mut() {
            map.remove("by_op_count");
        }
    }
    value
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    if args.k == 0 || args.max_len < 2 {
        return Err(CliError::Usage("--k must be at least 1 and --max-len at least 2".into()));
    }
    let problems = load(&args.test)?;
    let model = load_model(&args.checkpoint)?;
    let (report, verdicts) = evaluate_accuracy(&model, &problems, args.k, args.max_len)?;
    if let Some(path) = &args.verdicts {
        let mut out = BufWriter::new(File::create(path)?);
        write_verdicts(&verdicts, &mut out)?;
        out.flush()?;
    }
    let json = serde_json::to_string_pretty(&report_json(&report, args.by_length))?;
    match &args.report {
        Some(path) => fs::write(path, format!("{json}\n"))?,
        None => println!("{json}"),
    }
    if args.by_length {
        eprintln!("{:>4}  {:>8}  {:>9}  {:>9}  {:>9}", "#op", "problems", "G&R", "top-1", "oracle");
        for (ops, t) in &report.by_op_count {
            eprintln!(
                "{ops:>4}  {:>8}  {:>8.1}%  {:>8.1}%  {:>8.1}%",
                t.problems,
                100.0 * t.accuracy,
                100.0 * t.top1_accuracy,
                100.0 * t.oracle_accuracy
            );
        }
    }
    Ok(())
}

pub fn cmd_bank(args: &BankArgs) -> Result<(), CliError> {
    if args.k == 0 || args.b == 0 {
        return Err(CliError::Usage("--k and --b must be at least 1".into()));
    }
    let problems = load(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    let settings = crate::bank::BankSettings {
        strategy: crate::bank::BankStrategy { kind: args.strategy, online: false },
        beam_size: args.k,
        bank_size: args.b,
        disturb_count: args.disturb_count,
    };
    let generator = ModelGenerator { model: &model, max_len: args.max_len };
    let bank = build_bank(&problems, &generator, &settings, args.seed, 0)?;
    let mut out = output(&args.out)?;
    bank.write_jsonl(&mut out)?;
    out.flush()?;
    let m = bank.metrics();
    eprintln!(
        "{} positives, {} negatives ({} from model, {} from disturbance, {} random; {} unparseable, {} invalid)",
        bank.positive_count(),
        bank.negative_count(),
        m.from_model,
        m.from_disturbance,
        m.from_random_sample,
        m.unparseable,
        m.invalid
    );
    Ok(())
}

pub fn cmd_disturb(args: &DisturbArgs) -> Result<(), CliError> {
    let tree = parse_expression(&args.expr).map_err(|e| CliError::Usage(format!("--expr: {e}")))?;
    let values = args
        .numbers
        .split(',')
        .map(|t| {
            let t = t.trim();
            let parsed = match t.strip_prefix('-') {
                Some(rest) => parse_decimal(rest).map(|v| -v),
                None => parse_decimal(t),
            };
            parsed.ok_or_else(|| CliError::Usage(format!("bad number '{t}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let numbers = NumberTable::new(values);
    let before = evaluate(&tree, &numbers).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = derive_rng(args.seed, "disturb", "");
    let outcome = apply(args.kind, &tree, numbers.len(), &mut rng)
        .map_err(|e| CliError::Usage(format!("cannot apply {} to '{}': {e}", args.kind, args.expr)))?;
    let after = evaluate(&outcome.tree, &numbers).map_err(|e| CliError::Runtime(e.to_string()))?;
    let label = if results_equal(&after, &before) { "positive" } else { "negative" };
    println!("before: {tree}  = {before}");
    println!("after:  {}  = {after}", outcome.tree);
    println!("label:  {label}");
    Ok(())
}
