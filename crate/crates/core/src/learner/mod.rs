//! Learning minimal machines from labeled traces.
//!
//! [`learn`] returns the cheapest machine consistent with every example under
//! the order (states, literals, quantified literals, canonical key). It runs a
//! counterexample loop over the examples: the exact search in [`search`]
//! only ever sees the examples the previous candidate got wrong, and because
//! any machine consistent with all examples is also consistent with the
//! active subset, the first candidate that passes everything is a minimum for
//! the full set.
//!
//! The search space is acyclic machines with topologically numbered states.
//! Edge labels are conjunctions of literals from [`literal_pool`].

mod io;
pub mod oracle;
mod search;

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::logic::{Atom, AtomId, Constraint, Formula, Literal, LogicError, Observation, QuantifiedAtom, Signature};
use crate::machine::{Edge, Form, MachineError, StateId};

pub use io::{format_trace, parse_trace, parse_traces, read_traces, write_traces};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Goal,
    Incomplete,
    Dead,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Goal => "GOAL",
            Label::Incomplete => "INCOMPLETE",
            Label::Dead => "DEAD",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = LearnError;
    fn from_str(s: &str) -> Result<Self, LearnError> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GOAL" => Ok(Label::Goal),
            "INCOMPLETE" => Ok(Label::Incomplete),
            "DEAD" => Ok(Label::Dead),
            other => Err(LearnError::Format { line: 0, msg: format!("unknown label `{other}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TraceExample {
    pub observations: Vec<Observation>,
    pub label: Label,
}

impl TraceExample {
    pub fn new(label: Label, observations: Vec<Observation>) -> Self {
        TraceExample { observations, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Ground atoms and propositions only.
    Propositional,
    /// Adds existential and universal atoms over every unary predicate.
    #[default]
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Upper bound on states, counting the accepting and rejecting states.
    pub max_states: usize,
    /// Maximum number of parallel edges between a pair of states.
    pub kappa: usize,
    pub time_budget: Duration,
    pub max_literals_per_edge: usize,
    pub mode: Mode,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_states: 8,
            kappa: 1,
            time_budget: Duration::from_secs(60),
            max_literals_per_edge: 3,
            mode: Mode::FirstOrder,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.max_states < 3 {
            return Err(LearnError::InvalidConfig("max_states must be at least 3".into()));
        }
        if self.kappa == 0 {
            return Err(LearnError::InvalidConfig("kappa must be at least 1".into()));
        }
        if self.max_literals_per_edge == 0 {
            return Err(LearnError::InvalidConfig("max_literals_per_edge must be at least 1".into()));
        }
        if self.time_budget.is_zero() {
            return Err(LearnError::InvalidConfig("time budget must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("at least one GOAL example is required")]
    NoGoalExamples,
    #[error("time budget exhausted after {0:?}")]
    Timeout(Duration),
    #[error("no consistent machine with at most {max_states} states")]
    Unsat { max_states: usize },
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("bounds exceeded: {0}")]
    Bounds(String),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Size of the hypothesis space for a fixed number of states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HypothesisSpace {
    pub num_states: usize,
    pub kappa: usize,
    pub herbrand_size: usize,
    pub unary_predicates: usize,
    pub mode: Mode,
}

impl HypothesisSpace {
    pub fn for_signature(sig: &Signature, num_states: usize, kappa: usize, mode: Mode) -> Self {
        HypothesisSpace {
            num_states,
            kappa,
            herbrand_size: sig.atom_count(),
            unary_predicates: sig.unary_predicates().count(),
            mode,
        }
    }
}

/// `(edge_facts, rule_count)`: one edge fact per ordered pair of distinct
/// non-terminal-source states and parallel index, and per edge fact one rule
/// per literal of the pool.
pub fn space_size(hs: &HypothesisSpace) -> (u64, u64) {
    let u = hs.num_states as u64;
    let edge_facts = u.saturating_sub(2) * u.saturating_sub(1) * hs.kappa as u64;
    let mut rules = edge_facts * 2 * hs.herbrand_size as u64;
    if hs.mode == Mode::FirstOrder {
        rules += edge_facts * 4 * hs.unary_predicates as u64;
    }
    (edge_facts, rules)
}

/// One literal of the hypothesis space with its precompiled buffer constraint.
#[derive(Debug, Clone)]
pub struct PoolLiteral {
    pub literal: Literal,
    pub constraint: Constraint,
    pub quantified: bool,
    /// Index of the complementary literal in the pool.
    pub negation: usize,
}

/// Literals available to edge formulae: positive ground literals, then
/// negative ones, then (first-order mode) `∃p`, `¬∃p`, `∀p`, `¬∀p` per unary
/// predicate. Earlier literals win ties in the canonical order.
pub fn literal_pool(sig: &Signature, mode: Mode) -> Result<Vec<PoolLiteral>, LearnError> {
    let n = sig.atom_count();
    let mut pool = Vec::new();
    for positive in [true, false] {
        for i in 0..n {
            let literal = Literal { atom: Atom::Ground(sig.atom(AtomId(i as u8)).clone()), positive };
            let constraint = literal.constraint(sig)?;
            let negation = if positive { i + n } else { i };
            pool.push(PoolLiteral { literal, constraint, quantified: false, negation });
        }
    }
    if mode == Mode::FirstOrder {
        let preds: Vec<String> = sig.unary_predicates().map(str::to_string).collect();
        for p in preds {
            for atom in [QuantifiedAtom::exists(&p), QuantifiedAtom::forall(&p)] {
                for positive in [true, false] {
                    let literal = Literal { atom: Atom::Quantified(atom.clone()), positive };
                    let constraint = literal.constraint(sig)?;
                    let idx = pool.len();
                    let negation = if positive { idx + 1 } else { idx - 1 };
                    pool.push(PoolLiteral { literal, constraint, quantified: true, negation });
                }
            }
        }
    }
    Ok(pool)
}

fn reaches_expected(form: &Form, ex: &TraceExample) -> bool {
    let Ok(out) = form.run_trace(&ex.observations) else {
        return false;
    };
    let f = out.final_state;
    match ex.label {
        Label::Goal => f == form.accepting(),
        Label::Incomplete => f != form.accepting() && Some(f) != form.rejecting(),
        Label::Dead => Some(f) == form.rejecting(),
    }
}

/// Every GOAL trace ends in the accepting state, every INCOMPLETE trace in
/// neither terminal state and every DEAD trace in the rejecting state.
pub fn consistent(form: &Form, examples: &[TraceExample]) -> bool {
    examples.iter().all(|e| reaches_expected(form, e))
}

/// True when the trace contradicts the machine's classification.
pub fn find_counterexample(form: &Form, trace: &TraceExample) -> bool {
    !reaches_expected(form, trace)
}

/// Cost of a machine in the minimality order (without the canonical key).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cost {
    pub states: usize,
    pub literals: usize,
    pub quantified: usize,
}

pub fn cost(form: &Form) -> Cost {
    let mut literals = 0;
    let mut quantified = 0;
    for e in form.edges() {
        let lits = e.formula.literals().unwrap_or_default();
        literals += lits.len();
        quantified += lits.iter().filter(|l| matches!(l.atom, Atom::Quantified(_))).count();
    }
    Cost { states: form.state_count(), literals, quantified }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnStats {
    pub elapsed: Duration,
    /// Examples the exact search had to look at.
    pub active_examples: usize,
    pub counterexample_rounds: usize,
    pub nodes: u64,
}

#[derive(Debug, Clone)]
pub struct Learned {
    pub form: Form,
    pub cost: Cost,
    pub stats: LearnStats,
}

/// Machine-independent description of a search result.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct Solution {
    pub literals: usize,
    pub quantified: usize,
    /// Per non-terminal state, sorted `(target, pool literal indices)` edges.
    pub edges: Vec<Vec<(u8, Vec<u16>)>>,
}

/// Names: `u0 .. u{m-1}`, `u_acc`, then `u_rej` when present.
pub(crate) fn build_form(
    sig: &Signature,
    pool: &[PoolLiteral],
    non_terminal: usize,
    with_reject: bool,
    edges: &[Vec<(u8, Vec<u16>)>],
) -> Result<Form, LearnError> {
    let mut names: Vec<String> = (0..non_terminal).map(|i| format!("u{i}")).collect();
    names.push("u_acc".into());
    if with_reject {
        names.push("u_rej".into());
    }
    let mut out = Vec::new();
    for (from, list) in edges.iter().enumerate() {
        let mut counters = std::collections::BTreeMap::new();
        for (to, lits) in list {
            let index = counters.entry(*to).or_insert(0u32);
            let formula = Formula::conjunction(lits.iter().map(|&i| pool[i as usize].literal.clone()))
                .expect("edges carry at least one literal");
            out.push(Edge { from: StateId(from), to: StateId(*to as usize), index: *index, formula });
            *index += 1;
        }
    }
    let rejecting = with_reject.then_some(StateId(non_terminal + 1));
    Ok(Form::new(sig.clone(), names, StateId(0), StateId(non_terminal), rejecting, out)?)
}

/// Learns a minimal machine consistent with `examples`.
pub fn learn(examples: &[TraceExample], sig: &Signature, cfg: &SearchConfig) -> Result<Learned, LearnError> {
    cfg.validate()?;
    if !examples.iter().any(|e| e.label == Label::Goal) {
        return Err(LearnError::NoGoalExamples);
    }
    let start = Instant::now();
    let deadline = start + cfg.time_budget;
    let pool = literal_pool(sig, cfg.mode)?;
    let with_reject = examples.iter().any(|e| e.label == Label::Dead);
    let mut active: Vec<usize> = Vec::new();
    // Seed with the shortest GOAL trace.
    let first = (0..examples.len())
        .filter(|&i| examples[i].label == Label::Goal)
        .min_by_key(|&i| (examples[i].observations.len(), i))
        .unwrap();
    active.push(first);
    let mut stats = LearnStats::default();
    let mut floor = search::Floor::default();
    loop {
        stats.counterexample_rounds += 1;
        let subset: Vec<&TraceExample> = active.iter().map(|&i| &examples[i]).collect();
        let (sol, non_terminal, nodes) =
            search::minimal(&subset, &pool, cfg, with_reject, deadline, &mut floor).map_err(|e| match e {
                LearnError::Timeout(_) => LearnError::Timeout(start.elapsed()),
                e => e,
            })?;
        stats.nodes += nodes;
        let form = build_form(sig, &pool, non_terminal, with_reject, &sol.edges)?;
        let wrong = (0..examples.len())
            .filter(|i| !active.contains(i) && find_counterexample(&form, &examples[*i]))
            .min_by_key(|&i| (examples[i].observations.len(), i));
        match wrong {
            Some(i) => {
                log::debug!("counterexample #{i} ({}) against {} states", examples[i].label.as_str(), form.state_count());
                active.push(i);
            }
            None => {
                let violations = form.validate();
                assert!(violations.is_empty(), "learned machine violates invariants: {violations:?}");
                assert!(consistent(&form, examples), "learned machine is inconsistent");
                stats.elapsed = start.elapsed();
                stats.active_examples = active.len();
                let cost = cost(&form);
                return Ok(Learned { form, cost, stats });
            }
        }
    }
}

/// Online learner: keeps the examples seen so far and relearns whenever a
/// trace contradicts the current machine.
#[derive(Debug, Clone)]
pub struct CounterexampleLearner {
    signature: Signature,
    config: SearchConfig,
    examples: Vec<TraceExample>,
    current: Form,
    version: usize,
    pub last_learn_time: Duration,
}

#[derive(Debug)]
pub enum Update {
    /// The trace agreed with the current machine (or no GOAL trace exists yet).
    Unchanged,
    /// A new machine was learned.
    Relearned,
    /// Relearning failed; the previous machine stays in place.
    Failed(LearnError),
}

impl CounterexampleLearner {
    pub fn new(signature: Signature, config: SearchConfig) -> Self {
        let current = Form::dummy(signature.clone());
        CounterexampleLearner { signature, config, examples: Vec::new(), current, version: 0, last_learn_time: Duration::ZERO }
    }

    pub fn machine(&self) -> &Form {
        &self.current
    }

    /// 0 for the dummy machine, incremented on every relearn.
    pub fn version(&self) -> usize {
        self.version
    }

    pub fn examples(&self) -> &[TraceExample] {
        &self.examples
    }

    pub fn observe(&mut self, trace: TraceExample) -> Update {
        if !find_counterexample(&self.current, &trace) {
            return Update::Unchanged;
        }
        self.examples.push(trace);
        if !self.examples.iter().any(|e| e.label == Label::Goal) {
            return Update::Unchanged;
        }
        let t = Instant::now();
        let result = learn(&self.examples, &self.signature, &self.config);
        self.last_learn_time = t.elapsed();
        match result {
            Ok(l) => {
                self.current = l.form;
                self.version += 1;
                Update::Relearned
            }
            Err(e) => Update::Failed(e),
        }
    }
}

/// Runs the loop over a finite stream, returning each new machine with the
/// trace that triggered it.
pub fn counterexample_loop(
    traces: impl IntoIterator<Item = TraceExample>,
    sig: &Signature,
    cfg: &SearchConfig,
) -> Result<Vec<(Form, TraceExample)>, LearnError> {
    let mut learner = CounterexampleLearner::new(sig.clone(), cfg.clone());
    let mut out = Vec::new();
    for t in traces {
        match learner.observe(t.clone()) {
            Update::Unchanged => {}
            Update::Relearned => out.push((learner.machine().clone(), t)),
            Update::Failed(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
