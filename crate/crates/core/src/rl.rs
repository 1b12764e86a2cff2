//! Multi-agent tabular exploitation of a reward machine.
//!
//! One Q-learner per non-terminal machine state; only the learner of the
//! current state acts. A learner whose outgoing edges carry universal
//! formulae sees, besides the agent cell, one bit per ground atom those
//! formulae quantify over, telling whether it was observed since the machine
//! entered the state. That restores the Markov property for the sub-task.
//!
//! Each step the acting learner receives the potential-based shaping term.
//! The episode's task reward is split evenly over the machine states that
//! took part and credited to each one's final transition, whose update also
//! bootstraps from the successor state's learner. Without that bootstrap a
//! learner values its own exit at the negative potential of the next state
//! and prefers to stall: `(γ−1)Φ(u)` is positive on every step it stays.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Action, Task, Termination};
use crate::learner::{CounterexampleLearner, Label, LearnError, SearchConfig, TraceExample, Update};
use crate::logic::{AtomId, AtomSet, Buffer, Observation};
use crate::machine::{Form, MachineError, StateId};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state {0} has {1} indicator atoms; at most {MAX_INDICATORS} are supported")]
    TooManyIndicators(String, usize),
    #[error("cannot transfer: {0}")]
    Transfer(String),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

pub type Result<T> = std::result::Result<T, RlError>;

pub const MAX_INDICATORS: usize = 12;

/// Stop once the success rate, having reached `threshold`, falls more than
/// `drop` below its best value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub threshold: f64,
    pub drop: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop { threshold: 0.7, drop: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the episode budget over which ε decays linearly.
    pub epsilon_decay: f64,
    pub episodes: usize,
    /// Episodes per reported iteration.
    pub iteration: usize,
    pub shaping: bool,
    pub early_stop: Option<EarlyStop>,
    /// What happens to the tables when LEARNED mode replaces the machine.
    pub remap: Remap,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Remap {
    /// Every state of the new machine starts from a zero table.
    #[default]
    Fresh,
    /// A new state whose outgoing formulae match (as a multiset) those of an
    /// old state inherits that state's table.
    Structural,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            alpha: 0.5,
            gamma: 0.999,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay: 0.5,
            episodes: 50_000,
            iteration: 100,
            shaping: true,
            early_stop: None,
            remap: Remap::Fresh,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        for e in [self.epsilon_start, self.epsilon_end, self.epsilon_decay] {
            if !(0.0..=1.0).contains(&e) {
                return bad("epsilon settings must be in [0, 1]");
            }
        }
        if self.iteration == 0 {
            return bad("iteration length must be positive");
        }
        Ok(())
    }

    /// ε for a 0-based episode index.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = self.epsilon_decay * self.episodes as f64;
        if horizon <= 0.0 || episode as f64 >= horizon {
            return self.epsilon_end;
        }
        let frac = episode as f64 / horizon;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Agent cell plus indicator bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtendedState {
    pub cell: usize,
    pub indicators: Vec<bool>,
}

impl ExtendedState {
    pub fn key(&self) -> usize {
        let bits = self.indicators.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | ((b as usize) << i));
        self.cell << self.indicators.len() | bits
    }
}

/// Ground atoms read through universal formulae on the edges leaving `u`,
/// in canonical order.
pub fn indicator_atoms(form: &Form, u: StateId) -> Vec<AtomId> {
    let sig = form.signature();
    let mut preds = Vec::new();
    for e in form.outgoing(u) {
        e.formula.universal_predicates(&mut preds);
    }
    let mut set = AtomSet::EMPTY;
    for p in &preds {
        if let Ok(m) = sig.instances(p) {
            set = set.union(m);
        }
    }
    set.iter().collect()
}

pub fn extended_state(u: StateId, cell: usize, buffer: &Buffer, form: &Form) -> ExtendedState {
    let g = indicator_atoms(form, u);
    ExtendedState { cell, indicators: g.iter().map(|&a| buffer.seen().contains(a)).collect() }
}

/// `r / n'` for each distinct non-terminal state in `visited`, in order of
/// first visit. The last share absorbs rounding so the shares sum to `r`
/// exactly.
pub fn split_reward(r: f64, visited: &[StateId], form: &Form) -> Vec<(StateId, f64)> {
    let mut seen = BTreeSet::new();
    let contributors: Vec<StateId> =
        visited.iter().copied().filter(|&u| !form.is_terminal(u) && seen.insert(u)).collect();
    let n = contributors.len();
    if n == 0 {
        return Vec::new();
    }
    let share = r / n as f64;
    let mut out: Vec<(StateId, f64)> = contributors.iter().map(|&u| (u, share)).collect();
    let head: f64 = out[..n - 1].iter().map(|x| x.1).sum();
    out[n - 1].1 = r - head;
    out
}

#[derive(Debug, Clone)]
pub struct Agent {
    indicators: Vec<AtomId>,
    mask: AtomSet,
    q: Vec<[f64; 4]>,
    frozen: bool,
}

impl Agent {
    fn new(indicators: Vec<AtomId>, cells: usize) -> Self {
        let mask = indicators.iter().copied().collect();
        let q = vec![[0.0; 4]; cells << indicators.len()];
        Agent { indicators, mask, q, frozen: false }
    }

    pub fn indicators(&self) -> &[AtomId] {
        &self.indicators
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn table(&self) -> &[[f64; 4]] {
        &self.q
    }

    fn key(&self, cell: usize, seen: AtomSet) -> usize {
        let seen = seen.intersection(self.mask);
        let mut bits = 0usize;
        for (i, &a) in self.indicators.iter().enumerate() {
            if seen.contains(a) {
                bits |= 1 << i;
            }
        }
        cell << self.indicators.len() | bits
    }

    fn greedy(&self, key: usize, rng: &mut impl Rng) -> usize {
        let row = &self.q[key];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..4).filter(|&a| row[a] == best).collect();
        ties[rng.gen_range(0..ties.len())]
    }

    fn max(&self, key: usize) -> f64 {
        self.q[key].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One learner per non-terminal state of `machine`.
#[derive(Debug, Clone)]
pub struct AgentTeam {
    machine: Form,
    agents: Vec<Option<Agent>>,
    cells: usize,
}

impl AgentTeam {
    pub fn new(machine: Form, cells: usize) -> Result<Self> {
        let agents = machine
            .states()
            .map(|u| {
                if machine.is_terminal(u) {
                    return Ok(None);
                }
                let g = indicator_atoms(&machine, u);
                if g.len() > MAX_INDICATORS {
                    return Err(RlError::TooManyIndicators(machine.name(u).to_string(), g.len()));
                }
                Ok(Some(Agent::new(g, cells)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AgentTeam { machine, agents, cells })
    }

    pub fn machine(&self) -> &Form {
        &self.machine
    }

    pub fn agent(&self, u: StateId) -> Option<&Agent> {
        self.agents.get(u.0).and_then(Option::as_ref)
    }

    pub fn agent_count(&self) -> usize {
        self.agents.iter().flatten().count()
    }

    /// Copies the table of every old state whose outgoing formulae match a
    /// new state's, ignoring state names.
    fn inherit_matching(&mut self, old: &AgentTeam) {
        let shape = |m: &Form, u: StateId| {
            let mut f: Vec<String> = m.outgoing(u).map(|e| e.formula.to_string()).collect();
            f.sort();
            f
        };
        for u in self.machine.states().collect::<Vec<_>>() {
            let Some(agent) = self.agents[u.0].as_mut() else { continue };
            let want = shape(&self.machine, u);
            let found = old.machine.states().find(|&v| {
                old.agents[v.0].as_ref().is_some_and(|a| a.q.len() == agent.q.len()) && shape(&old.machine, v) == want
            });
            if let Some(v) = found {
                agent.q = old.agents[v.0].as_ref().expect("matched agent").q.clone();
            }
        }
    }

    pub fn freeze(&mut self, u: StateId, frozen: bool) {
        if let Some(Some(a)) = self.agents.get_mut(u.0) {
            a.frozen = frozen;
        }
    }
}

/// Where the reward machine comes from.
#[derive(Debug, Clone)]
pub enum MachineSource {
    Fixed(Form),
    /// Learned online from the labelled episodes.
    Learned(SearchConfig),
    /// A single memoryless learner over agent cells, rewarded on success.
    NoMachine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Episodes completed so far.
    pub episodes: usize,
    /// Mean discounted task return.
    pub mean_return: f64,
    pub success_rate: f64,
    pub machine_version: usize,
    pub learner_time_ms: u64,
    pub learner_timeouts: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub episodes: usize,
    pub env_steps: u64,
    pub machine_steps: u64,
    pub agent_actions: u64,
    /// Episodes whose split shares were checked against the task reward.
    pub conservation_checks: u64,
    pub conservation_failures: u64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// `None` for the no-machine baseline.
    pub team: Option<AgentTeam>,
    pub metrics: Vec<IterationMetrics>,
    pub report: TrainReport,
    /// Every machine used, in version order (LEARNED mode starts with the dummy).
    pub machines: Vec<Form>,
}

impl TrainOutcome {
    /// Episodes completed when the iteration success rate first reached `threshold`.
    pub fn episodes_to(&self, threshold: f64) -> Option<usize> {
        self.metrics.iter().find(|m| m.success_rate >= threshold).map(|m| m.episodes)
    }
}

struct EpisodeStats {
    observations: Vec<Observation>,
    label: Label,
    discounted: f64,
}

/// Final transition of a machine state, credited once the episode's task
/// reward is known: (state, key, action, shaping + bootstrapped successor value).
type Pending = (StateId, usize, usize, f64);

fn run_team_episode(
    task: &Task,
    team: &mut AgentTeam,
    cfg: &RlConfig,
    eps: f64,
    shaping: bool,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<EpisodeStats> {
    let machine = team.machine.clone();
    let potentials = machine.potentials();
    let layout = task.layout();
    let mut st = task.reset();
    let mut rs = machine.start();
    let mut observations = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut machine_reward = 0.0;
    loop {
        let u = rs.current;
        let agent = team.agents[u.0].as_ref().expect("non-terminal state has an agent");
        let key = agent.key(layout.index(st.agent), rs.buffer.seen());
        let explore = !agent.frozen && rng.gen_bool(eps);
        let a = if explore { rng.gen_range(0..4) } else { agent.greedy(key, rng) };
        report.agent_actions += 1;

        let obs = task.step(&mut st, Action::ALL[a])?;
        report.env_steps += 1;
        observations.push(obs);
        let step = machine.step(&mut rs, obs)?;
        report.machine_steps += 1;
        machine_reward += step.reward;
        let v = rs.current;
        let f = if shaping { cfg.gamma * potentials[v.0] - potentials[u.0] } else { 0.0 };

        // Hitting the step cap truncates the episode: the successor keeps its
        // value. Lava, the goal cell and terminal machine states end it.
        let absorbed = matches!(st.terminated, Termination::Goal | Termination::Dead) || machine.is_terminal(v);
        let next = if absorbed {
            0.0
        } else {
            let succ = team.agents[v.0].as_ref().expect("non-terminal state has an agent");
            cfg.gamma * succ.max(succ.key(layout.index(st.agent), rs.buffer.seen()))
        };
        if step.transitioned {
            pending.push((u, key, a, f + next));
        } else {
            let agent = team.agents[u.0].as_mut().expect("acting agent");
            if !agent.frozen {
                agent.q[key][a] += cfg.alpha * (f + next - agent.q[key][a]);
            }
        }
        if absorbed || st.terminated != Termination::Running {
            break;
        }
    }

    let shares = split_reward(machine_reward, &rs.visited, &machine);
    if !shares.is_empty() {
        report.conservation_checks += 1;
        if shares.iter().map(|s| s.1).sum::<f64>() != machine_reward {
            report.conservation_failures += 1;
        }
    }
    for (u, key, a, target) in pending {
        let share = shares.iter().find(|s| s.0 == u).map_or(0.0, |s| s.1);
        if let Some(agent) = team.agents[u.0].as_mut() {
            if !agent.frozen {
                agent.q[key][a] += cfg.alpha * (target + share - agent.q[key][a]);
            }
        }
    }
    let label = task.label(&observations);
    let discounted = if label == Label::Goal { cfg.gamma.powi(observations.len() as i32 - 1) } else { 0.0 };
    Ok(EpisodeStats { observations, label, discounted })
}

fn run_plain_episode(
    task: &Task,
    agent: &mut Agent,
    cfg: &RlConfig,
    eps: f64,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<EpisodeStats> {
    let layout = task.layout();
    let mut st = task.reset();
    let mut observations = Vec::new();
    let mut seen = AtomSet::EMPTY;
    loop {
        let key = layout.index(st.agent);
        let a = if rng.gen_bool(eps) { rng.gen_range(0..4) } else { agent.greedy(key, rng) };
        report.agent_actions += 1;
        let obs = task.step(&mut st, Action::ALL[a])?;
        report.env_steps += 1;
        observations.push(obs);
        seen = seen.union(obs.0);
        if st.terminated != Termination::Running {
            let r = if task.label(&observations) == Label::Goal { 1.0 } else { 0.0 };
            agent.q[key][a] += cfg.alpha * (r - agent.q[key][a]);
            break;
        }
        let next = agent.max(layout.index(st.agent));
        agent.q[key][a] += cfg.alpha * (cfg.gamma * next - agent.q[key][a]);
    }
    let label = task.label(&observations);
    let discounted = if label == Label::Goal { cfg.gamma.powi(observations.len() as i32 - 1) } else { 0.0 };
    Ok(EpisodeStats { observations, label, discounted })
}

/// Accumulates episodes into iteration rows and applies early stopping.
struct Recorder {
    iteration: usize,
    metrics: Vec<IterationMetrics>,
    successes: usize,
    returns: f64,
    count: usize,
    learner_time: Duration,
    timeouts: usize,
    best: f64,
    early: Option<EarlyStop>,
}

impl Recorder {
    fn new(cfg: &RlConfig) -> Self {
        Recorder {
            iteration: cfg.iteration,
            metrics: Vec::new(),
            successes: 0,
            returns: 0.0,
            count: 0,
            learner_time: Duration::ZERO,
            timeouts: 0,
            best: 0.0,
            early: cfg.early_stop,
        }
    }

    /// Records one episode; returns true if training should stop.
    fn push(&mut self, ep: &EpisodeStats, episodes: usize, version: usize) -> bool {
        self.count += 1;
        self.successes += (ep.label == Label::Goal) as usize;
        self.returns += ep.discounted;
        if self.count < self.iteration {
            return false;
        }
        let rate = self.successes as f64 / self.count as f64;
        self.metrics.push(IterationMetrics {
            iteration: self.metrics.len(),
            episodes,
            mean_return: self.returns / self.count as f64,
            success_rate: rate,
            machine_version: version,
            learner_time_ms: self.learner_time.as_millis() as u64,
            learner_timeouts: self.timeouts,
        });
        self.count = 0;
        self.successes = 0;
        self.returns = 0.0;
        self.learner_time = Duration::ZERO;
        self.timeouts = 0;
        let stop = match self.early {
            Some(es) => self.best >= es.threshold && rate < self.best - es.drop,
            None => false,
        };
        self.best = self.best.max(rate);
        stop
    }
}

pub fn train(task: &Task, source: MachineSource, cfg: &RlConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    match source {
        MachineSource::Fixed(form) => {
            let form = form.with_signature(task.signature().clone())?;
            let team = AgentTeam::new(form, task.layout().cell_count())?;
            train_team(task, team, cfg)
        }
        MachineSource::NoMachine => train_plain(task, cfg),
        MachineSource::Learned(search) => train_learned(task, search, cfg),
    }
}

/// Continues training an existing team (frozen agents only act).
pub fn train_team(task: &Task, mut team: AgentTeam, cfg: &RlConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut rec = Recorder::new(cfg);
    for ep in 0..cfg.episodes {
        let stats = run_team_episode(task, &mut team, cfg, cfg.epsilon(ep), cfg.shaping, &mut rng, &mut report)?;
        report.episodes += 1;
        if rec.push(&stats, ep + 1, 0) {
            report.stopped_early = true;
            break;
        }
    }
    let machines = vec![team.machine.clone()];
    Ok(TrainOutcome { team: Some(team), metrics: rec.metrics, report, machines })
}

fn train_plain(task: &Task, cfg: &RlConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::new(Vec::new(), task.layout().cell_count());
    let mut report = TrainReport::default();
    let mut rec = Recorder::new(cfg);
    for ep in 0..cfg.episodes {
        let stats = run_plain_episode(task, &mut agent, cfg, cfg.epsilon(ep), &mut rng, &mut report)?;
        report.episodes += 1;
        if rec.push(&stats, ep + 1, 0) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { team: None, metrics: rec.metrics, report, machines: Vec::new() })
}

fn train_learned(task: &Task, search: SearchConfig, cfg: &RlConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = task.layout().cell_count();
    let mut learner = CounterexampleLearner::new(task.signature().clone(), search);
    let mut team = AgentTeam::new(learner.machine().clone(), cells)?;
    let mut machines = vec![learner.machine().clone()];
    let mut report = TrainReport::default();
    let mut rec = Recorder::new(cfg);
    for ep in 0..cfg.episodes {
        // No shaping while the machine is still the placeholder.
        let shaping = cfg.shaping && learner.version() > 0;
        let stats = run_team_episode(task, &mut team, cfg, cfg.epsilon(ep), shaping, &mut rng, &mut report)?;
        report.episodes += 1;
        let example = TraceExample::new(stats.label, stats.observations.clone());
        match learner.observe(example) {
            Update::Unchanged => {}
            Update::Relearned => {
                rec.learner_time += learner.last_learn_time;
                log::info!("episode {}: machine v{} with {} states", ep + 1, learner.version(), learner.machine().state_count());
                let mut next = AgentTeam::new(learner.machine().clone(), cells)?;
                if cfg.remap == Remap::Structural {
                    next.inherit_matching(&team);
                }
                team = next;
                machines.push(learner.machine().clone());
            }
            Update::Failed(e) => {
                rec.learner_time += learner.last_learn_time;
                rec.timeouts += matches!(e, LearnError::Timeout(_)) as usize;
                log::warn!("episode {}: relearning failed ({e}); keeping machine v{}", ep + 1, learner.version());
            }
        }
        if rec.push(&stats, ep + 1, learner.version()) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { team: Some(team), metrics: rec.metrics, report, machines })
}

/// Moves a team to `task`. States outside `retrain` keep their tables and
/// are frozen; states in `retrain` start from their old table when its
/// shape still fits, and from scratch otherwise.
pub fn transfer(team: &AgentTeam, task: &Task, retrain: &[StateId], cfg: &RlConfig) -> Result<(AgentTeam, TrainOutcome)> {
    let machine = team.machine.with_signature(task.signature().clone())?;
    let cells = task.layout().cell_count();
    if cells != team.cells {
        return Err(RlError::Transfer(format!("grid has {cells} cells, the team was trained on {}", team.cells)));
    }
    let mut next = AgentTeam::new(machine, cells)?;
    for u in next.machine.states().collect::<Vec<_>>() {
        let (Some(new), Some(Some(old))) = (next.agents[u.0].as_mut(), team.agents.get(u.0)) else {
            continue;
        };
        let fits = new.q.len() == old.q.len();
        if retrain.contains(&u) {
            if fits {
                new.q = old.q.clone();
            }
        } else if fits {
            new.q = old.q.clone();
            new.frozen = true;
        } else {
            return Err(RlError::Transfer(format!(
                "state {} changed shape and is not being retrained",
                next.machine.name(u)
            )));
        }
    }
    let outcome = train_team(task, next.clone(), cfg)?;
    let trained = outcome.team.clone().expect("team training returns a team");
    Ok((trained, outcome))
}

/// Trains the same configuration under several seeds, in parallel.
pub fn train_seeds(task: &Task, source: &MachineSource, cfg: &RlConfig, seeds: &[u64]) -> Vec<Result<TrainOutcome>> {
    crate::par::map(seeds, |&seed| {
        let cfg = RlConfig { seed, ..cfg.clone() };
        train(task, source.clone(), &cfg)
    })
}

/// Undiscounted sum of the shaping terms and task reward a run of `form`
/// over `observations` hands out, stopping where an episode would.
pub fn shaped_total(form: &Form, observations: &[Observation], gamma: f64) -> Result<f64> {
    let phi = form.potentials();
    let mut rs = form.start();
    let mut total = 0.0;
    for &obs in observations {
        let u = rs.current;
        let step = form.step(&mut rs, obs)?;
        total += gamma * phi[rs.current.0] - phi[u.0] + step.reward;
        if form.is_terminal(rs.current) {
            break;
        }
    }
    Ok(total)
}

pub const CSV_HEADER: &str =
    "run_id,seed,iteration,episodes,mean_return,success_rate,machine_version,learner_time_ms,learner_timeouts";

/// CSV rows (no header). `learner_time_ms` is the only wall-clock column.
pub fn metrics_csv(run_id: &str, seed: u64, metrics: &[IterationMetrics]) -> String {
    let mut s = String::new();
    for m in metrics {
        let _ = writeln!(
            s,
            "{run_id},{seed},{},{},{:.6},{:.4},{},{},{}",
            m.iteration, m.episodes, m.mean_return, m.success_rate, m.machine_version, m.learner_time_ms, m.learner_timeouts
        );
    }
    s
}

/// Greedy success rate of a team over `episodes` evaluation episodes.
pub fn evaluate(task: &Task, team: &AgentTeam, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut team = team.clone();
    for a in team.agents.iter_mut().flatten() {
        a.frozen = true;
    }
    let cfg = RlConfig { episodes, ..RlConfig::default() };
    let mut report = TrainReport::default();
    let mut wins = 0;
    for _ in 0..episodes {
        let stats = run_team_episode(task, &mut team, &cfg, 0.0, false, &mut rng, &mut report)?;
        wins += (stats.label == Label::Goal) as usize;
    }
    Ok(wins as f64 / episodes.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{task_by_name, GridLayout};
    use crate::logic::{GroundAtom, Signature};
    use crate::machine::form_from_edges;

    #[test]
    fn split_examples() {
        let sig = Signature::builder().proposition("goal").build().unwrap();
        let f = form_from_edges(&sig, "u0", "u_acc", None, &[("u0", "u1", "goal"), ("u1", "u_acc", "goal")]).unwrap();
        let (u0, u1, acc) = (StateId(0), StateId(1), f.accepting());
        assert_eq!(split_reward(1.0, &[u0, u1, acc], &f), vec![(u0, 0.5), (u1, 0.5)]);
        assert_eq!(split_reward(1.0, &[u0], &f), vec![(u0, 1.0)]);
        assert!(split_reward(0.0, &[u0, u1], &f).iter().all(|s| s.1 == 0.0));
    }

    #[test]
    fn split_conserves_exactly() {
        let sig = Signature::builder().proposition("goal").build().unwrap();
        let edges: Vec<(String, String)> = (0..7).map(|i| (format!("u{i}"), format!("u{}", i + 1))).collect();
        let mut list: Vec<(&str, &str, &str)> = edges.iter().map(|(a, b)| (a.as_str(), b.as_str(), "goal")).collect();
        list.push(("u7", "u_acc", "goal"));
        let f = form_from_edges(&sig, "u0", "u_acc", None, &list).unwrap();
        for n in 1..=8 {
            let visited: Vec<StateId> = (0..n).map(StateId).collect();
            for r in [1.0, 0.3, 1.0 / 3.0, 7.25] {
                let s: f64 = split_reward(r, &visited, &f).iter().map(|x| x.1).sum();
                assert_eq!(s, r, "n={n} r={r}");
            }
        }
    }

    #[test]
    fn indicators_follow_universal_edges() {
        let sig = Signature::builder()
            .unary("yellow", ["o0"])
            .unary("blue", ["o4", "o5"])
            .unary("red", ["o2"])
            .proposition("goal")
            .build()
            .unwrap();
        let f = form_from_edges(
            &sig,
            "u0",
            "u_acc",
            None,
            &[("u0", "u_acc", "forall X. blue(X)"), ("u0", "u_acc", "red(o2)"), ("u1", "u_acc", "goal")],
        )
        .unwrap();
        let o = |t: &str| Observation::parse(t, &sig).unwrap();
        let b = Buffer::from_observations(&[o("yellow(o0)"), o("blue(o4)")]);
        let x = extended_state(StateId(0), 5, &b, &f);
        assert_eq!(x.indicators, vec![true, false]);
        let u1 = f.state_by_name("u1").unwrap();
        assert!(extended_state(u1, 5, &b, &f).indicators.is_empty());
        assert_eq!(extended_state(StateId(0), 5, &Buffer::new(), &f).indicators, vec![false, false]);
        assert_eq!(x.key(), 5 << 2 | 1);
    }

    #[test]
    fn epsilon_schedule() {
        let cfg = RlConfig { episodes: 100, ..Default::default() };
        assert_eq!(cfg.epsilon(0), 1.0);
        assert!((cfg.epsilon(25) - 0.525).abs() < 1e-12);
        assert_eq!(cfg.epsilon(50), 0.05);
        assert_eq!(cfg.epsilon(99), 0.05);
        assert!(RlConfig { gamma: 1.0, ..Default::default() }.validate().is_err());
        assert!(RlConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fixed_machine_learns_all_yellow() {
        let task = task_by_name("all-yellow-2").unwrap();
        let m = task.reference_machine().unwrap();
        let cfg = RlConfig { episodes: 6000, ..Default::default() };
        let out = train(&task, MachineSource::Fixed(m), &cfg).unwrap();
        assert_eq!(out.report.conservation_failures, 0);
        assert_eq!(out.report.agent_actions, out.report.env_steps);
        let team = out.team.unwrap();
        assert_eq!(team.agent_count(), 2);
        assert!(evaluate(&task, &team, 20, 1).unwrap() >= 0.95);
    }

    #[test]
    fn training_is_reproducible() {
        let task = task_by_name("all-yellow-2").unwrap();
        let m = task.reference_machine().unwrap();
        let cfg = RlConfig { episodes: 500, seed: 9, ..Default::default() };
        let a = train(&task, MachineSource::Fixed(m.clone()), &cfg).unwrap();
        let b = train(&task, MachineSource::Fixed(m), &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(metrics_csv("x", 9, &a.metrics), metrics_csv("x", 9, &b.metrics));
    }

    #[test]
    fn early_stopping_rule() {
        let cfg = RlConfig { iteration: 1, early_stop: Some(EarlyStop::default()), ..Default::default() };
        let mut rec = Recorder::new(&cfg);
        let ep = |ok: bool| EpisodeStats {
            observations: Vec::new(),
            label: if ok { Label::Goal } else { Label::Incomplete },
            discounted: 0.0,
        };
        assert!(!rec.push(&ep(false), 1, 0));
        assert!(!rec.push(&ep(true), 2, 0));
        assert!(rec.push(&ep(false), 3, 0));
    }

    #[test]
    fn transfer_to_identical_task_keeps_success() {
        let task = task_by_name("all-yellow-2").unwrap();
        let m = task.reference_machine().unwrap();
        let out = train(&task, MachineSource::Fixed(m), &RlConfig { episodes: 6000, ..Default::default() }).unwrap();
        let team = out.team.unwrap();
        let before = evaluate(&task, &team, 20, 3).unwrap();
        let cfg = RlConfig { episodes: 100, epsilon_start: 0.0, epsilon_end: 0.0, ..Default::default() };
        let (moved, _) = transfer(&team, &task, &[], &cfg).unwrap();
        assert!(evaluate(&task, &moved, 20, 3).unwrap() >= before);
    }

    #[test]
    fn shaping_keeps_accepting_runs_ahead() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for task in crate::env::task_catalog() {
            let m = task.reference_machine().unwrap();
            let (mut best_fail, mut worst_win) = (f64::NEG_INFINITY, f64::INFINITY);
            for i in 0..600 {
                let ep = if i % 2 == 0 {
                    crate::env::guided_walk(&task, 0.1, &mut rng)
                } else {
                    crate::env::random_walk(&task, &mut rng)
                };
                let total = shaped_total(&m, &ep.observations, 0.999).unwrap();
                if m.run_trace(&ep.observations).unwrap().final_state == m.accepting() {
                    worst_win = worst_win.min(total);
                } else {
                    best_fail = best_fail.max(total);
                }
            }
            assert!(worst_win.is_finite(), "{}: no accepting run sampled", task.name());
            assert!(worst_win > best_fail, "{}: {worst_win} <= {best_fail}", task.name());
        }
    }

    #[test]
    fn frozen_downstream_agent_still_converges() {
        let task = task_by_name("all-yellow-2").unwrap();
        let m = task.reference_machine().unwrap();
        let trained = train(&task, MachineSource::Fixed(m.clone()), &RlConfig { episodes: 4000, ..Default::default() })
            .unwrap()
            .team
            .unwrap();
        let mut team = AgentTeam::new(m, task.layout().cell_count()).unwrap();
        let u1 = team.machine().state_by_name("u1").unwrap();
        team.agents[u1.0] = trained.agents[u1.0].clone();
        team.freeze(u1, true);
        let frozen = team.agent(u1).unwrap().table().to_vec();
        let out = train_team(&task, team, &RlConfig { episodes: 4000, ..Default::default() }).unwrap();
        let team = out.team.unwrap();
        assert_eq!(team.agent(u1).unwrap().table(), &frozen[..]);
        assert!(evaluate(&task, &team, 20, 0).unwrap() >= 0.95);
    }

    #[test]
    fn structural_remap_copies_matching_tables() {
        let task = task_by_name("all-yellow-2").unwrap();
        let m = task.reference_machine().unwrap();
        let old = train(&task, MachineSource::Fixed(m.clone()), &RlConfig { episodes: 300, ..Default::default() })
            .unwrap()
            .team
            .unwrap();
        let mut next = AgentTeam::new(m, task.layout().cell_count()).unwrap();
        next.inherit_matching(&old);
        for u in next.machine().states() {
            if let Some(a) = next.agent(u) {
                assert_eq!(a.table(), old.agent(u).unwrap().table());
            }
        }
    }

    #[test]
    fn transfer_rejects_missing_atoms() {
        let task = task_by_name("blue-allyellow-7").unwrap();
        let team = AgentTeam::new(task.reference_machine().unwrap(), 64).unwrap();
        let other = task_by_name("all-yellow-2").unwrap();
        let text = "layout v1\nsize 8 8\ncell 0 7 start\ncell 7 7 goal\ncell 0 0 yellow(o0)\n";
        let bare = Task::new("bare", GridLayout::from_text(text).unwrap(), other.objective().clone(), 50).unwrap();
        assert!(transfer(&team, &bare, &[StateId(0)], &RlConfig::default()).is_err());
        assert!(bare.signature().atom_id(&GroundAtom::unary("purple", "o7")).is_err());
    }

    /// Exact value iteration over (cell, indicators) for the first state of
    /// the reference all-yellow machine on a 4×4 grid; the greedy policy
    /// must complete the sub-task from the start.
    #[test]
    fn indicators_make_the_subtask_markov() {
        let text = "layout v1\nsize 4 4\ncell 0 3 start\ncell 3 3 goal\ncell 0 0 yellow(o0)\ncell 3 0 yellow(o1)\ncell 1 0 wall\ncell 2 0 wall\n";
        let layout = GridLayout::from_text(text).unwrap();
        let task = Task::new("tiny", layout, crate::env::Objective::AllOf { colour: "yellow".into() }, 100).unwrap();
        let m = task.reference_machine().unwrap();
        let u0 = m.initial();
        let g = indicator_atoms(&m, u0);
        assert_eq!(g.len(), 2);
        let l = task.layout();
        let n = l.cell_count() << g.len();
        let decode = |k: usize| (k >> g.len(), k & ((1 << g.len()) - 1));
        let bits_of = |bits: usize| -> AtomSet {
            g.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, &a)| a).collect()
        };
        let gamma = 0.9;
        // Successor of (key, action): Some(next key) or a terminal reward.
        let succ = |k: usize, a: Action| -> std::result::Result<usize, f64> {
            let (cell, bits) = decode(k);
            let c = (cell % l.width(), cell / l.width());
            let nc = l.neighbour(c, a);
            let obs = l.observation_at(nc);
            let buf = Buffer::from_observations(&[Observation(bits_of(bits)), obs]);
            let mut rs = m.start();
            rs.buffer = Buffer::from_observations(&[Observation(bits_of(bits))]);
            let step = m.step(&mut rs, obs).unwrap();
            if step.transitioned {
                return Err(1.0);
            }
            if nc == l.goal() {
                return Err(0.0);
            }
            let nbits = g.iter().enumerate().filter(|(_, &a)| buf.seen().contains(a)).fold(0, |b, (i, _)| b | 1 << i);
            Ok(l.index(nc) << g.len() | nbits)
        };
        let mut v = vec![0.0f64; n];
        for _ in 0..200 {
            let mut next = v.clone();
            for k in 0..n {
                next[k] = Action::ALL
                    .iter()
                    .map(|&a| match succ(k, a) {
                        Ok(k2) => gamma * v[k2],
                        Err(r) => r,
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            v = next;
        }
        // Roll the greedy policy out from the start.
        let mut k = l.index(l.start()) << g.len();
        let mut done = false;
        for _ in 0..50 {
            let best = Action::ALL
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let q = |a| match succ(k, a) {
                        Ok(k2) => gamma * v[k2],
                        Err(r) => r,
                    };
                    q(a).partial_cmp(&q(b)).unwrap()
                })
                .unwrap();
            match succ(k, best) {
                Ok(k2) => k = k2,
                Err(r) => {
                    assert_eq!(r, 1.0);
                    done = true;
                    break;
                }
            }
        }
        assert!(done, "greedy policy never completed the sub-task");
    }
}
