//! `form`: run reward-machine experiments, learn machines from trace files,
//! and inspect machine files.
//!
//! Exit codes: 0 success, 1 failure (including validation violations),
//! 2 usage error (bad flags, unknown task, bad config), 3 no consistent
//! machine within the state bound, 4 learner time budget exhausted.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use form_core::env::{self, task_by_name, CorpusConfig, EnvError};
use form_core::learner::{self, HypothesisSpace, Label, LearnError, Mode, SearchConfig};
use form_core::logic::Signature;
use form_core::machine::{signature_from_text, signature_to_text, Form, MachineError};
use form_core::rl::RlError;

use config::{parse_seeds, ExperimentConfig, RunMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown task `{0}` (known: {known})", known = env::TASK_NAMES.join(", "))]
    UnknownTask(String),
    #[error("{path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::UnknownTask(_) => 2,
            CliError::Learn(LearnError::Unsat { .. }) | CliError::Rl(RlError::Learn(LearnError::Unsat { .. })) => 3,
            CliError::Learn(LearnError::Timeout(_)) | CliError::Rl(RlError::Learn(LearnError::Timeout(_))) => 4,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "form", version, about = "First-order reward machine experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents on a task across seeds and write metrics.
    Run(RunArgs),
    /// Learn a minimal machine from a labelled trace file.
    Learn(LearnArgs),
    /// Check a machine file for structural and determinism violations.
    Validate { machine: PathBuf },
    /// Write a machine as a Graphviz digraph.
    ExportDot {
        machine: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a machine over every trace in a file.
    Simulate { machine: PathBuf, traces: PathBuf },
    /// Generate a labelled trace corpus for a task.
    GenTraces(GenArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// fixed, learn-form, learn-prop or no-machine.
    #[arg(long)]
    mode: Option<RunMode>,
    /// `0..4` (inclusive) or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Seconds per learner call.
    #[arg(long)]
    budget_learner: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pretrain on this task with its reference machine, then transfer.
    #[arg(long)]
    transfer_from: Option<String>,
    /// Comma-separated states to retrain after transfer (default: initial state).
    #[arg(long, value_delimiter = ',')]
    retrain: Option<Vec<String>>,
}

impl RunArgs {
    fn resolve(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = self.task {
            cfg.task = t;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seeds {
            cfg.seeds = parse_seeds(&s).map_err(CliError::Usage)?;
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(b) = self.budget_learner {
            cfg.budget_learner = b;
        }
        if let Some(o) = self.out {
            cfg.out = o;
        }
        if let Some(t) = self.transfer_from {
            cfg.transfer_from = Some(t);
        }
        if let Some(r) = self.retrain {
            cfg.retrain = r;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Signature file; alternatively take the signature of `--task`.
    #[arg(long, conflicts_with = "task")]
    signature: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// first-order or propositional.
    #[arg(long, default_value = "first-order")]
    mode: String,
    #[arg(long, default_value_t = 60.0)]
    budget_learner: f64,
    #[arg(long)]
    max_states: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long)]
    max_literals: Option<usize>,
    /// Machine output file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 60)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform random walks only, with natural label frequencies.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    signature_out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn load_machine(path: &Path) -> Result<Form, CliError> {
    Form::from_text(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn task(name: &str) -> Result<env::Task, CliError> {
    task_by_name(name).map_err(|_| CliError::UnknownTask(name.to_string()))
}

fn cmd_learn(args: LearnArgs) -> Result<(), CliError> {
    let sig: Signature = match (&args.signature, &args.task) {
        (Some(p), _) => signature_from_text(&read(p)?).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?,
        (None, Some(t)) => task(t)?.signature().clone(),
        (None, None) => return Err(CliError::Usage("learn needs --signature or --task".into())),
    };
    let mode = match args.mode.as_str() {
        "first-order" => Mode::FirstOrder,
        "propositional" => Mode::Propositional,
        m => return Err(CliError::Usage(format!("unknown learner mode `{m}` (expected first-order or propositional)"))),
    };
    if !(args.budget_learner > 0.0 && args.budget_learner.is_finite()) {
        return Err(CliError::Usage("the learner budget must be a positive number of seconds".into()));
    }
    let defaults = SearchConfig::default();
    let cfg = SearchConfig {
        max_states: args.max_states.unwrap_or(defaults.max_states),
        kappa: args.kappa.unwrap_or(defaults.kappa),
        time_budget: Duration::from_secs_f64(args.budget_learner),
        max_literals_per_edge: args.max_literals.unwrap_or(defaults.max_literals_per_edge),
        mode,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let traces = learner::parse_traces(&read(&args.traces)?, &sig)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", args.traces.display())))?;
    let learned = learner::learn(&traces, &sig, &cfg)?;
    let form = &learned.form;
    let states = form.state_count();
    // The space is counted over machines that have both terminal states.
    let u = states + form.rejecting().is_none() as usize;
    let space = |m| learner::space_size(&HypothesisSpace::for_signature(&sig, u, cfg.kappa, m)).1;
    eprintln!("states: {states}");
    eprintln!("edges: {}", form.edges().len());
    eprintln!("literals: {}", form.literal_count());
    eprintln!("wall time: {:.3} s", learned.stats.elapsed.as_secs_f64());
    eprintln!("counterexample rounds: {}", learned.stats.counterexample_rounds);
    eprintln!("space size at |U| = {u}: first-order {} rules, propositional {} rules", space(Mode::FirstOrder), space(Mode::Propositional));
    match &args.out {
        Some(p) => write(p, &form.to_text())?,
        None => print!("{}", form.to_text()),
    }
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<bool, CliError> {
    let form = load_machine(path)?;
    let violations = form.validate();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} states, {} edges", form.state_count(), form.edges().len());
    }
    Ok(violations.is_empty())
}

fn cmd_simulate(machine: &Path, traces: &Path) -> Result<(), CliError> {
    let form = load_machine(machine)?;
    let traces = learner::parse_traces(&read(traces)?, form.signature())
        .map_err(|e| CliError::Invalid(format!("{}: {e}", traces.display())))?;
    for (i, t) in traces.iter().enumerate() {
        let run = form.run_trace(&t.observations)?;
        let names: Vec<&str> = run.states.iter().map(|&s| form.name(s)).collect();
        println!("trace {i} [{}]: {} reward {}", t.label.as_str(), names.join(","), run.total_reward);
    }
    Ok(())
}

fn cmd_gen_traces(args: GenArgs) -> Result<(), CliError> {
    let task = task(&args.task)?;
    let traces = if args.random {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        (0..args.count).map(|_| task.label_trace(&env::random_walk(&task, &mut rng))).collect()
    } else {
        env::generate_corpus(&task, &CorpusConfig { traces: args.count, seed: args.seed, ..Default::default() })
    };
    learner::write_traces(&args.out, &traces, task.signature())?;
    if let Some(p) = &args.signature_out {
        write(p, &signature_to_text(task.signature()))?;
    }
    for label in [Label::Goal, Label::Incomplete, Label::Dead] {
        println!("{}: {}", label.as_str(), traces.iter().filter(|t| t.label == label).count());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run(args) => run::cmd_run(&args.resolve()?)?,
        Command::Learn(args) => cmd_learn(args)?,
        Command::Validate { machine } => {
            if !cmd_validate(&machine)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::ExportDot { machine, out } => {
            let dot = load_machine(&machine)?.to_dot();
            match out {
                Some(p) => write(&p, &dot)?,
                None => print!("{dot}"),
            }
        }
        Command::Simulate { machine, traces } => cmd_simulate(&machine, &traces)?,
        Command::GenTraces(args) => cmd_gen_traces(args)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FORM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
