//! Declarative experiment configuration: a TOML file whose fields can each
//! be overridden on the command line. The resolved config is written next to
//! the results.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use form_core::learner::{Mode, SearchConfig};
use form_core::rl::{EarlyStop, Remap, RlConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Fixed,
    LearnForm,
    LearnProp,
    NoMachine,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(RunMode::Fixed),
            "learn-form" => Ok(RunMode::LearnForm),
            "learn-prop" => Ok(RunMode::LearnProp),
            "no-machine" => Ok(RunMode::NoMachine),
            _ => Err(format!("unknown mode `{s}` (expected fixed, learn-form, learn-prop or no-machine)")),
        }
    }
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Fixed => "fixed",
            RunMode::LearnForm => "learn-form",
            RunMode::LearnProp => "learn-prop",
            RunMode::NoMachine => "no-machine",
        }
    }
}

/// `0..4` (inclusive) or a comma-separated list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("invalid seed list `{s}` (expected e.g. `0..4` or `1,3,5`)");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay: f64,
    pub iteration: usize,
    pub shaping: bool,
    pub early_stop: bool,
    pub early_stop_threshold: f64,
    pub early_stop_drop: f64,
    pub structural_remap: bool,
}

impl Default for RlSection {
    fn default() -> Self {
        let rl = RlConfig::default();
        let es = EarlyStop::default();
        RlSection {
            alpha: rl.alpha,
            gamma: rl.gamma,
            epsilon_start: rl.epsilon_start,
            epsilon_end: rl.epsilon_end,
            epsilon_decay: rl.epsilon_decay,
            iteration: rl.iteration,
            shaping: rl.shaping,
            early_stop: rl.early_stop.is_some(),
            early_stop_threshold: es.threshold,
            early_stop_drop: es.drop,
            structural_remap: rl.remap == Remap::Structural,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub max_states: usize,
    pub kappa: usize,
    pub max_literals_per_edge: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let s = SearchConfig::default();
        SearchSection { max_states: s.max_states, kappa: s.kappa, max_literals_per_edge: s.max_literals_per_edge }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub mode: RunMode,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Seconds per learner call.
    pub budget_learner: f64,
    pub out: PathBuf,
    /// Train on this task with its reference machine first, then transfer.
    pub transfer_from: Option<String>,
    /// States retrained after transfer; the rest are frozen. Empty means the
    /// initial state only.
    pub retrain: Vec<String>,
    pub rl: RlSection,
    pub search: SearchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: String::new(),
            mode: RunMode::Fixed,
            seeds: vec![0],
            episodes: 50_000,
            budget_learner: 60.0,
            out: PathBuf::from("results"),
            transfer_from: None,
            retrain: Vec::new(),
            rl: RlSection::default(),
            search: SearchSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.task.is_empty() {
            return Err(CliError::Usage("no task given (use --task or `task` in the config file)".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("at least one seed is required".into()));
        }
        if !(self.budget_learner > 0.0 && self.budget_learner.is_finite()) {
            return Err(CliError::Usage("the learner budget must be a positive number of seconds".into()));
        }
        if self.transfer_from.is_some() && self.mode != RunMode::Fixed {
            return Err(CliError::Usage("transfer runs use --mode fixed".into()));
        }
        self.rl_config(0).validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.search_config().map(|_| ())
    }

    pub fn rl_config(&self, seed: u64) -> RlConfig {
        let r = &self.rl;
        RlConfig {
            alpha: r.alpha,
            gamma: r.gamma,
            epsilon_start: r.epsilon_start,
            epsilon_end: r.epsilon_end,
            epsilon_decay: r.epsilon_decay,
            episodes: self.episodes,
            iteration: r.iteration,
            shaping: r.shaping,
            early_stop: r.early_stop.then_some(EarlyStop { threshold: r.early_stop_threshold, drop: r.early_stop_drop }),
            remap: if r.structural_remap { Remap::Structural } else { Remap::Fresh },
            seed,
        }
    }

    pub fn search_config(&self) -> Result<SearchConfig, CliError> {
        let mode = if self.mode == RunMode::LearnProp { Mode::Propositional } else { Mode::FirstOrder };
        let cfg = SearchConfig {
            max_states: self.search.max_states,
            kappa: self.search.kappa,
            time_budget: Duration::from_secs_f64(self.budget_learner),
            max_literals_per_edge: self.search.max_literals_per_edge,
            mode,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..4").unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("1, 5,2").unwrap(), vec![1, 5, 2]);
        assert!(parse_seeds("4..1").is_err());
        assert!(parse_seeds("a").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            task: "all-yellow-2".into(),
            mode: RunMode::LearnProp,
            seeds: vec![1, 2],
            ..Default::default()
        };
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: ExperimentConfig = toml::from_str("task = \"x\"\nmode = \"no-machine\"\n[rl]\nalpha = 0.1\n").unwrap();
        assert_eq!(cfg.mode, RunMode::NoMachine);
        assert_eq!(cfg.rl.alpha, 0.1);
        assert_eq!(cfg.rl.gamma, RlConfig::default().gamma);
        assert_eq!(cfg.search, SearchSection::default());
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_err());
        let ok = ExperimentConfig { task: "t".into(), ..Default::default() };
        assert!(ok.validate().is_ok());
        let bad = ExperimentConfig { budget_learner: 0.0, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig { transfer_from: Some("a".into()), mode: RunMode::LearnForm, ..ok };
        assert!(bad.validate().is_err());
    }
}
