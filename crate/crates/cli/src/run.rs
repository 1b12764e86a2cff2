//! The `run` command: trains one configuration across seeds and writes
//! `metrics.csv`, `config.toml` and per-version machine snapshots.

use std::fs;
use std::path::Path;

use form_core::env::{task_by_name, Task};
use form_core::machine::Form;
use form_core::par;
use form_core::rl::{self, MachineSource, TrainOutcome, CSV_HEADER};

use crate::config::{ExperimentConfig, RunMode};
use crate::CliError;

pub struct SeedResult {
    pub seed: u64,
    pub outcome: TrainOutcome,
}

fn resolve_task(name: &str) -> Result<Task, CliError> {
    task_by_name(name).map_err(|_| CliError::UnknownTask(name.to_string()))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Pretrains on the source task with its reference machine, then moves the
/// team to `task`, retraining `cfg.retrain` and freezing the rest.
fn transfer_seed(cfg: &ExperimentConfig, src: &Task, task: &Task, seed: u64) -> Result<TrainOutcome, CliError> {
    let rl_cfg = cfg.rl_config(seed);
    let pre = rl::train(src, MachineSource::Fixed(src.reference_machine()?), &rl_cfg)?;
    let team = pre.team.expect("fixed-machine training yields a team");
    let machine = team.machine();
    let retrain = if cfg.retrain.is_empty() {
        vec![machine.initial()]
    } else {
        cfg.retrain
            .iter()
            .map(|n| machine.state_by_name(n).ok_or_else(|| CliError::Usage(format!("unknown state `{n}` in --retrain"))))
            .collect::<Result<_, _>>()?
    };
    let (_, outcome) = rl::transfer(&team, task, &retrain, &rl_cfg)?;
    Ok(outcome)
}

pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>, CliError> {
    cfg.validate()?;
    let task = resolve_task(&cfg.task)?;
    let outcomes: Vec<Result<TrainOutcome, CliError>> = if let Some(src) = &cfg.transfer_from {
        let src = resolve_task(src)?;
        par::map(&cfg.seeds, |&seed| transfer_seed(cfg, &src, &task, seed))
    } else {
        let source = match cfg.mode {
            RunMode::Fixed => MachineSource::Fixed(task.reference_machine()?),
            RunMode::LearnForm | RunMode::LearnProp => MachineSource::Learned(cfg.search_config()?),
            RunMode::NoMachine => MachineSource::NoMachine,
        };
        par::map(&cfg.seeds, |&seed| Ok(rl::train(&task, source.clone(), &cfg.rl_config(seed))?))
    };
    cfg.seeds
        .iter()
        .zip(outcomes)
        .map(|(&seed, o)| o.map(|outcome| SeedResult { seed, outcome }))
        .collect()
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    match &cfg.transfer_from {
        Some(src) => format!("{}-from-{src}", cfg.task),
        None => format!("{}-{}", cfg.task, cfg.mode.as_str()),
    }
}

/// CSV rows ordered by iteration, then by seed.
pub fn metrics_table(cfg: &ExperimentConfig, results: &[SeedResult]) -> String {
    let id = run_id(cfg);
    let longest = results.iter().map(|r| r.outcome.metrics.len()).max().unwrap_or(0);
    let mut out = format!("{CSV_HEADER}\n");
    for i in 0..longest {
        for r in results {
            if let Some(m) = r.outcome.metrics.get(i) {
                out.push_str(&rl::metrics_csv(&id, r.seed, std::slice::from_ref(m)));
            }
        }
    }
    out
}

fn write_machine(dir: &Path, name: &str, form: &Form) -> Result<(), CliError> {
    let violations = form.validate();
    if !violations.is_empty() {
        return Err(CliError::Invalid(format!("refusing to write invalid machine {name}: {}", violations[0])));
    }
    write(&dir.join(name), &form.to_text())
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    cfg.validate()?;
    resolve_task(&cfg.task)?;
    let out = &cfg.out;
    let machines = out.join("machines");
    fs::create_dir_all(&machines).map_err(|e| CliError::Io(machines.clone(), e))?;
    write(&out.join("config.toml"), &cfg.to_toml())?;

    let results = train_all(cfg)?;
    write(&out.join("metrics.csv"), &metrics_table(cfg, &results))?;
    for r in &results {
        for (v, form) in r.outcome.machines.iter().enumerate() {
            write_machine(&machines, &format!("seed{}_v{v}.form", r.seed), form)?;
        }
        let last = r.outcome.metrics.last();
        let timeouts: usize = r.outcome.metrics.iter().map(|m| m.learner_timeouts).sum();
        println!(
            "seed {}: {} episodes, final success {:.3}, episodes to 0.9 {}, machine v{} ({} states){}{}",
            r.seed,
            r.outcome.report.episodes,
            last.map_or(0.0, |m| m.success_rate),
            r.outcome.episodes_to(0.9).map_or("-".to_string(), |e| e.to_string()),
            r.outcome.machines.len().saturating_sub(1),
            r.outcome.machines.last().map_or(0, |m| m.state_count()),
            if timeouts > 0 { format!(", learner TIMEOUT x{timeouts}") } else { String::new() },
            if r.outcome.report.stopped_early { ", stopped early" } else { "" },
        );
    }
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}
