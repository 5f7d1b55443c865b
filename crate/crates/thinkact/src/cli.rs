//! The `thinkact` command-line tool.
//!
//! Exit codes: 0 on success, 1 on a validation error (bad flags, unknown
//! ids, schema violations), 2 on an IO error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thinkact_core::action::Registry;
use thinkact_core::data::{generate_tasks, render_reference, ActionTask, Mix};
use thinkact_core::protocol::serialize;
use thinkact_core::reward::{
    fit_pairwise, score_document, ConsistencyLabel, PairwiseModel, RewardBreakdown, Scorers, TaskKind,
};
use thinkact_core::train::{collect_labels, evaluate, improvement, optimize, OptimConfig, PolicyParams, RewardSource};

use crate::files::{
    read_json, read_jsonl, read_tasks, write_json, write_jsonl, write_tasks, FileError, ReferenceRecord,
};
use crate::ops::{load_checkpoint, run_task, Limits, OpError, SCRIPTED};
use crate::service::{serve, Service, ServiceError, SystemClock};
use crate::store::{valid_id, DataDir, Store, StoreError};

const DEFAULT_DATA_DIR: &str = "thinkact-data";

#[derive(Debug, Parser)]
#[command(
    name = "thinkact",
    version,
    about = "Structured chain-of-thought episodes, rewards and training"
)]
pub struct Cli {
    /// Data directory; defaults to $THINKACT_DATA_DIR, then ./thinkact-data.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a task dataset.
    GenData(GenData),
    /// Render the reference trajectory of every task.
    RenderRefs(RenderRefs),
    /// Run one episode for a task.
    RunEpisode(RunEpisode),
    /// Score a trajectory document and print the breakdown as JSON.
    Score(Score),
    /// Collect oracle-labeled trajectory pairs.
    Collect(Collect),
    /// Fit a pairwise reward model.
    FitRm(FitRm),
    /// Optimize a policy and record every step.
    Optimize(Optimize),
    /// Evaluate a policy per task kind.
    Evaluate(Evaluate),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fractions per kind, e.g. `action=0.5,reasoning=0.3,other=0.2`.
    #[arg(long, default_value = "action=1")]
    pub mix: String,
    /// Defaults to `tasks.jsonl` in the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderRefs {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Defaults to `references.jsonl` in the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunEpisode {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// `SCRIPTED` or a checkpoint id.
    #[arg(long, default_value = SCRIPTED)]
    pub policy: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file of security-policy overrides.
    #[arg(long)]
    pub limits: Option<PathBuf>,
    /// Also write the document here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConsistencyScorer {
    Oracle,
    Model,
}

#[derive(Debug, Args)]
pub struct Score {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Trajectory document to score.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = ConsistencyScorer::Oracle)]
    pub consistency: ConsistencyScorer,
}

#[derive(Debug, Args)]
pub struct Collect {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Checkpoint id; the neutral policy if absent.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub max_rounds: usize,
    /// Defaults to `labels.jsonl` in the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RmTarget {
    /// Fit to oracle labels from `--labels`.
    Consistency,
    /// Fit to the human labels in the queue.
    Preference,
}

#[derive(Debug, Args)]
pub struct FitRm {
    #[arg(long, value_enum, default_value_t = RmTarget::Consistency)]
    pub target: RmTarget,
    /// Label file; defaults to `labels.jsonl` in the data directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Defaults to the target's model file in the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Optimize {
    #[arg(long)]
    pub run_id: String,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Use at most this many tasks, in file order.
    #[arg(long, default_value_t = 32)]
    pub max_tasks: usize,
    #[arg(long, value_enum, default_value_t = ConsistencyScorer::Oracle)]
    pub reward: ConsistencyScorer,
    /// Starting checkpoint id; the neutral policy if absent.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Checkpoint id; the neutral policy if absent.
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn invalid(e: impl ToString) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<FileError> for CliError {
    fn from(e: FileError) -> Self {
        match e {
            FileError::Io { .. } => CliError::Io(e.to_string()),
            FileError::Schema { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OpError> for CliError {
    fn from(e: OpError) -> Self {
        match e {
            OpError::File(f) => f.into(),
            other => CliError::invalid(other),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::File(f) => f.into(),
            other => CliError::invalid(other),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Store(s) => s.into(),
            ServiceError::File(f) => f.into(),
        }
    }
}

/// Parses `action=0.5,reasoning=0.3,other=0.2`.
pub fn parse_mix(text: &str) -> Result<Mix, CliError> {
    let mut mix = Mix::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("mix entry {part:?} is not kind=fraction")))?;
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "action" => TaskKind::Action,
            "reasoning" => TaskKind::Reasoning,
            "other" => TaskKind::Other,
            other => return Err(CliError::invalid(format!("unknown task kind {other:?}"))),
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::invalid(format!("bad fraction in {part:?}")))?;
        if mix.insert(kind, value).is_some() {
            return Err(CliError::invalid(format!("kind {name:?} given twice")));
        }
    }
    Ok(mix)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::invalid)?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::Io(format!("stdout: {e}"))),
        _ => Ok(()),
    }
}

struct Ctx {
    dir: DataDir,
}

impl Ctx {
    fn tasks(&self, path: &Option<PathBuf>) -> Result<Vec<ActionTask>, CliError> {
        Ok(read_tasks(path.as_deref().unwrap_or(&self.dir.tasks()))?)
    }

    fn task(&self, path: &Option<PathBuf>, id: &str) -> Result<ActionTask, CliError> {
        self.tasks(path)?
            .into_iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| CliError::invalid(format!("unknown task {id:?}")))
    }

    fn policy(&self, id: &Option<String>) -> Result<PolicyParams, CliError> {
        match id {
            Some(id) => Ok(load_checkpoint(&self.dir, id)?),
            None => Ok(PolicyParams::neutral()),
        }
    }

    fn consistency_model(&self) -> Result<PairwiseModel, CliError> {
        let path = self.dir.consistency_model();
        let model: PairwiseModel = read_json(&path)?;
        model.check().map_err(CliError::invalid)?;
        Ok(model)
    }

    fn preference_model(&self) -> Result<Option<PairwiseModel>, CliError> {
        let path = self.dir.preference_model();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_json(&path)?))
    }
}

fn or_default(path: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    path.clone().unwrap_or(default)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let dir = cli
        .data_dir
        .map(DataDir::new)
        .or_else(DataDir::from_env)
        .unwrap_or_else(|| DataDir::new(DEFAULT_DATA_DIR));
    let ctx = Ctx { dir };
    let registry = Registry::new();
    match cli.command {
        Command::GenData(a) => {
            let mix = parse_mix(&a.mix)?;
            let tasks = generate_tasks(a.n, a.seed, &mix).map_err(CliError::invalid)?;
            write_tasks(&or_default(&a.out, ctx.dir.tasks()), &tasks)?;
        }
        Command::RenderRefs(a) => {
            let refs = ctx
                .tasks(&a.tasks)?
                .iter()
                .map(|t| {
                    let r = render_reference(t, &registry).map_err(CliError::invalid)?;
                    Ok(ReferenceRecord {
                        task_id: t.task_id.clone(),
                        document: serialize(&r).map_err(CliError::invalid)?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            write_jsonl(&or_default(&a.out, ctx.dir.root.join("references.jsonl")), &refs)?;
        }
        Command::RunEpisode(a) => {
            let task = ctx.task(&a.tasks, &a.task)?;
            let limits: Limits = match &a.limits {
                Some(p) => read_json(p)?,
                None => Limits::default(),
            };
            let sec = limits.apply(&registry)?;
            let out = run_task(&ctx.dir, &registry, &task, &a.policy, &sec, a.seed)?;
            let pref = ctx.preference_model()?;
            let scorers = Scorers {
                preference_model: pref.as_ref(),
                ..Scorers::default()
            };
            let score = score_document(task.kind, &out.document, &task.gold_answer, &scorers);
            if let Some(path) = &a.out {
                fs::write(path, &out.document).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            #[derive(Serialize)]
            struct Report<'a> {
                task_id: &'a str,
                document: &'a str,
                score: RewardBreakdown,
                dispatches: usize,
            }
            print_json(&Report {
                task_id: &task.task_id,
                document: &out.document,
                score,
                dispatches: out.records.len(),
            })?;
        }
        Command::Score(a) => {
            let task = ctx.task(&a.tasks, &a.task)?;
            let document =
                fs::read_to_string(&a.input).map_err(|e| CliError::Io(format!("{}: {e}", a.input.display())))?;
            let consistency = match a.consistency {
                ConsistencyScorer::Oracle => None,
                ConsistencyScorer::Model => Some(ctx.consistency_model()?),
            };
            let pref = ctx.preference_model()?;
            let scorers = Scorers {
                consistency_model: consistency.as_ref(),
                preference_model: pref.as_ref(),
                ..Scorers::default()
            };
            print_json(&score_document(task.kind, &document, &task.gold_answer, &scorers))?;
        }
        Command::Collect(a) => {
            let tasks = ctx.tasks(&a.tasks)?;
            let policy = ctx.policy(&a.policy)?;
            let labels = collect_labels(&policy, &tasks, a.k, a.seed, a.n, a.max_rounds).map_err(CliError::invalid)?;
            if labels.len() < a.n {
                eprintln!("collected {} of {} labels", labels.len(), a.n);
            }
            write_jsonl(&or_default(&a.out, ctx.dir.root.join("labels.jsonl")), &labels)?;
        }
        Command::FitRm(a) => {
            let (labels, default_out): (Vec<ConsistencyLabel>, PathBuf) = match a.target {
                RmTarget::Consistency => (
                    read_jsonl(&or_default(&a.labels, ctx.dir.root.join("labels.jsonl")))?,
                    ctx.dir.consistency_model(),
                ),
                RmTarget::Preference => {
                    let labels = match &a.labels {
                        Some(p) => read_jsonl(p)?,
                        None => {
                            let tasks = if ctx.dir.tasks().exists() {
                                ctx.tasks(&None)?
                            } else {
                                Vec::new()
                            };
                            let gold = |id: &str| {
                                tasks
                                    .iter()
                                    .find(|t| t.task_id == id)
                                    .map(|t| t.gold_answer.clone())
                                    .unwrap_or_default()
                            };
                            Store::open(ctx.dir.clone())?.human_labels(gold)
                        }
                    };
                    (labels, ctx.dir.preference_model())
                }
            };
            let model = fit_pairwise(&labels, a.l2, a.max_iter).map_err(CliError::invalid)?;
            write_json(&or_default(&a.out, default_out), &model)?;
        }
        Command::Optimize(a) => {
            if !valid_id(&a.run_id) {
                return Err(CliError::invalid(format!("bad run id {:?}", a.run_id)));
            }
            let mut tasks = ctx.tasks(&a.tasks)?;
            tasks.truncate(a.max_tasks);
            let reward = match a.reward {
                ConsistencyScorer::Oracle => RewardSource::Oracle,
                ConsistencyScorer::Model => RewardSource::Model(ctx.consistency_model()?),
            };
            let cfg = OptimConfig {
                iterations: a.iterations,
                lr: a.lr,
                k_per_task: a.k,
                seed: a.seed,
                ..OptimConfig::default()
            };
            let init = ctx.policy(&a.init)?;
            let steps = optimize(&init, &tasks, &reward, &cfg).map_err(CliError::invalid)?;
            write_jsonl(&ctx.dir.run_dir(&a.run_id).join("steps.jsonl"), &steps)?;
            let last = steps.last().map_or(init, |s| s.theta_after.clone());
            write_json(&ctx.dir.checkpoint(&a.run_id), &last)?;
            eprintln!("improvement {:.4} over {} steps", improvement(&steps, 10), steps.len());
        }
        Command::Evaluate(a) => {
            let tasks = ctx.tasks(&a.tasks)?;
            let policy = ctx.policy(&a.policy)?;
            let pref = ctx.preference_model()?;
            let scorers = Scorers {
                preference_model: pref.as_ref(),
                ..Scorers::default()
            };
            let summary = evaluate(&policy, &tasks, a.n, a.seed, &scorers).map_err(CliError::invalid)?;
            if let Some(out) = &a.out {
                write_json(out, &summary)?;
            }
            print_json(&summary)?;
        }
        Command::Serve(a) => {
            let svc = Service::open(ctx.dir.clone(), Arc::new(SystemClock))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(e.to_string()))?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&a.addr)
                    .await
                    .map_err(|e| CliError::Io(format!("{}: {e}", a.addr)))?;
                let local = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
                eprintln!("listening on {local}");
                serve(listener, Arc::new(svc))
                    .await
                    .map_err(|e| CliError::Io(e.to_string()))
            })?;
        }
    }
    Ok(())
}

/// Runs the tool and returns its exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
