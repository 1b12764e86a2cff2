//! The reward machine runtime.
//!
//! A [`Form`] is a finite automaton whose edges carry formulae. Stepping
//! appends the observation to the buffer, evaluates every outgoing edge and
//! moves along the one that holds, clearing the buffer. When nothing holds
//! the machine stays put and the buffer keeps growing.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::logic::{
    self, format_formula, formulas_disjoint, parse_formula, Buffer, CompiledFormula, Formula, LogicError,
    Observation, Predicate, Signature,
};

#[derive(Debug, Error)]
pub enum MachineError {
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("state `{0}` is terminal")]
    TerminalState(String),
    #[error("nondeterministic step from `{from}`: edges to `{a}` and `{b}` both hold")]
    Nondeterministic { from: String, a: String, b: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MachineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub from: StateId,
    pub to: StateId,
    pub index: u32,
    pub formula: Formula,
}

/// Reward emitted on a transition.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum RewardModel {
    /// 1 when entering the accepting state, 0 otherwise.
    #[default]
    Accepting,
    /// Explicit reward per (from, to) pair; missing pairs give 0.
    Table(BTreeMap<(StateId, StateId), f64>),
}

#[derive(Debug, Clone)]
pub struct Form {
    signature: Signature,
    states: Vec<String>,
    initial: StateId,
    accepting: StateId,
    rejecting: Option<StateId>,
    edges: Vec<Edge>,
    reward: RewardModel,
    compiled: Vec<CompiledFormula>,
    outgoing: Vec<Vec<usize>>,
}

impl PartialEq for Form {
    fn eq(&self, other: &Self) -> bool {
        self.signature == other.signature
            && self.states == other.states
            && self.initial == other.initial
            && self.accepting == other.accepting
            && self.rejecting == other.rejecting
            && self.edges == other.edges
            && self.reward == other.reward
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub current: StateId,
    pub buffer: Buffer,
    pub visited: Vec<StateId>,
    pub step_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: StateId,
    pub reward: f64,
    pub transitioned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_state: StateId,
    /// Initial state followed by every state entered.
    pub states: Vec<StateId>,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TerminalHasOutgoing { state: String, edge: usize },
    SelfLoop { state: String, edge: usize },
    DuplicateIndex { from: String, to: String, index: u32 },
    Nondeterministic { from: String, to_a: String, to_b: String, edge_a: usize, edge_b: usize },
    DistinguishedStatesOverlap(String),
    InvalidFormula { edge: usize, error: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TerminalHasOutgoing { state, edge } => {
                write!(f, "terminal state `{state}` has outgoing edge #{edge}")
            }
            Violation::SelfLoop { state, edge } => write!(f, "edge #{edge} is a self-loop on `{state}`"),
            Violation::DuplicateIndex { from, to, index } => {
                write!(f, "edges {from} -> {to} reuse index {index}")
            }
            Violation::Nondeterministic { from, to_a, to_b, edge_a, edge_b } => write!(
                f,
                "edges #{edge_a} ({from} -> {to_a}) and #{edge_b} ({from} -> {to_b}) can hold together"
            ),
            Violation::DistinguishedStatesOverlap(s) => {
                write!(f, "state `{s}` is both accepting and rejecting")
            }
            Violation::InvalidFormula { edge, error } => write!(f, "edge #{edge}: {error}"),
        }
    }
}

impl Form {
    pub fn new(
        signature: Signature,
        states: Vec<String>,
        initial: StateId,
        accepting: StateId,
        rejecting: Option<StateId>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let mut names = BTreeSet::new();
        for s in &states {
            if !names.insert(s.as_str()) {
                return Err(MachineError::DuplicateState(s.clone()));
            }
        }
        let n = states.len();
        let check = |id: StateId| {
            if id.0 < n {
                Ok(())
            } else {
                Err(MachineError::UnknownState(format!("#{}", id.0)))
            }
        };
        check(initial)?;
        check(accepting)?;
        if let Some(r) = rejecting {
            check(r)?;
        }
        let mut outgoing = vec![Vec::new(); n];
        let mut compiled = Vec::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            check(e.from)?;
            check(e.to)?;
            compiled.push(CompiledFormula::compile(&e.formula, &signature)?);
            outgoing[e.from.0].push(i);
        }
        Ok(Form {
            signature,
            states,
            initial,
            accepting,
            rejecting,
            edges,
            reward: RewardModel::Accepting,
            compiled,
            outgoing,
        })
    }

    pub fn builder(signature: Signature) -> FormBuilder {
        FormBuilder { signature, states: Vec::new(), initial: None, accepting: None, rejecting: None, edges: Vec::new() }
    }

    /// Initial state with no outgoing edges, plus accepting and rejecting states.
    pub fn dummy(signature: Signature) -> Self {
        Form::new(
            signature,
            vec!["u0".into(), "u_acc".into(), "u_rej".into()],
            StateId(0),
            StateId(1),
            Some(StateId(2)),
            Vec::new(),
        )
        .expect("dummy machine is well formed")
    }

    /// The same machine re-bound to another signature, e.g. a layout with
    /// more constants. Fails if an edge names a symbol the new signature lacks.
    pub fn with_signature(&self, signature: Signature) -> Result<Self> {
        let f = Form::new(
            signature,
            self.states.clone(),
            self.initial,
            self.accepting,
            self.rejecting,
            self.edges.clone(),
        )?;
        Ok(f.with_reward(self.reward.clone()))
    }

    pub fn with_reward(mut self, reward: RewardModel) -> Self {
        self.reward = reward;
        self
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> {
        (0..self.states.len()).map(StateId)
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn name(&self, s: StateId) -> &str {
        &self.states[s.0]
    }

    pub fn state_by_name(&self, name: &str) -> Option<StateId> {
        self.states.iter().position(|s| s == name).map(StateId)
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    pub fn accepting(&self) -> StateId {
        self.accepting
    }

    pub fn rejecting(&self) -> Option<StateId> {
        self.rejecting
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn outgoing(&self, s: StateId) -> impl Iterator<Item = &Edge> {
        self.outgoing[s.0].iter().map(|&i| &self.edges[i])
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        s == self.accepting || Some(s) == self.rejecting
    }

    /// Total number of literals over all edges (connectives not counted).
    pub fn literal_count(&self) -> usize {
        fn count(f: &Formula) -> usize {
            match f {
                Formula::Atom(_) => 1,
                Formula::Not(g) => count(g),
                Formula::And(a, b) | Formula::Or(a, b) => count(a) + count(b),
            }
        }
        self.edges.iter().map(|e| count(&e.formula)).sum()
    }

    pub fn start(&self) -> RunState {
        RunState { current: self.initial, buffer: Buffer::new(), visited: vec![self.initial], step_count: 0 }
    }

    fn transition_reward(&self, from: StateId, to: StateId) -> f64 {
        match &self.reward {
            RewardModel::Accepting => {
                if to == self.accepting {
                    1.0
                } else {
                    0.0
                }
            }
            RewardModel::Table(t) => t.get(&(from, to)).copied().unwrap_or(0.0),
        }
    }

    /// One application of the state-transition function.
    pub fn step(&self, rs: &mut RunState, obs: Observation) -> Result<StepResult> {
        if self.is_terminal(rs.current) {
            return Err(MachineError::TerminalState(self.name(rs.current).to_string()));
        }
        rs.buffer.push(obs);
        rs.step_count += 1;
        let mut target: Option<StateId> = None;
        for &i in &self.outgoing[rs.current.0] {
            if self.compiled[i].eval_buffer(&rs.buffer) {
                let to = self.edges[i].to;
                match target {
                    Some(t) if t != to => {
                        return Err(MachineError::Nondeterministic {
                            from: self.name(rs.current).to_string(),
                            a: self.name(t).to_string(),
                            b: self.name(to).to_string(),
                        })
                    }
                    _ => target = Some(to),
                }
            }
        }
        match target {
            Some(to) => {
                let reward = self.transition_reward(rs.current, to);
                rs.current = to;
                rs.buffer.clear();
                if !rs.visited.contains(&to) {
                    rs.visited.push(to);
                }
                Ok(StepResult { next_state: to, reward, transitioned: true })
            }
            None => Ok(StepResult { next_state: rs.current, reward: 0.0, transitioned: false }),
        }
    }

    /// Folds [`Form::step`] over a trace, stopping at a terminal state.
    pub fn run_trace(&self, observations: &[Observation]) -> Result<RunOutcome> {
        if observations.is_empty() {
            return Err(MachineError::EmptyTrace);
        }
        let mut rs = self.start();
        let mut states = vec![rs.current];
        let mut total_reward = 0.0;
        for &o in observations {
            if self.is_terminal(rs.current) {
                break;
            }
            let r = self.step(&mut rs, o)?;
            total_reward += r.reward;
            if r.transitioned {
                states.push(r.next_state);
            }
        }
        Ok(RunOutcome { final_state: rs.current, states, total_reward })
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if Some(self.accepting) == self.rejecting {
            out.push(Violation::DistinguishedStatesOverlap(self.name(self.accepting).to_string()));
        }
        let mut seen_idx = BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            if self.is_terminal(e.from) {
                out.push(Violation::TerminalHasOutgoing { state: self.name(e.from).to_string(), edge: i });
            }
            if e.from == e.to {
                out.push(Violation::SelfLoop { state: self.name(e.from).to_string(), edge: i });
            }
            if !seen_idx.insert((e.from, e.to, e.index)) {
                out.push(Violation::DuplicateIndex {
                    from: self.name(e.from).to_string(),
                    to: self.name(e.to).to_string(),
                    index: e.index,
                });
            }
        }
        for s in self.states() {
            let out_edges = &self.outgoing[s.0];
            for (k, &i) in out_edges.iter().enumerate() {
                for &j in &out_edges[k + 1..] {
                    let (a, b) = (&self.edges[i], &self.edges[j]);
                    if a.to == b.to {
                        continue;
                    }
                    match formulas_disjoint(&a.formula, &b.formula, &self.signature) {
                        Ok(true) => {}
                        Ok(false) => out.push(Violation::Nondeterministic {
                            from: self.name(s).to_string(),
                            to_a: self.name(a.to).to_string(),
                            to_b: self.name(b.to).to_string(),
                            edge_a: i,
                            edge_b: j,
                        }),
                        Err(e) => out.push(Violation::InvalidFormula { edge: i, error: e.to_string() }),
                    }
                }
            }
        }
        out
    }

    /// Minimum number of edges from each state to the accepting state, `None` if unreachable.
    pub fn distances_to_accepting(&self) -> Vec<Option<usize>> {
        let n = self.states.len();
        let mut incoming = vec![Vec::new(); n];
        for e in &self.edges {
            incoming[e.to.0].push(e.from.0);
        }
        let mut dist = vec![None; n];
        dist[self.accepting.0] = Some(0);
        let mut queue = VecDeque::from([self.accepting.0]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for &u in &incoming[v] {
                if dist[u].is_none() {
                    dist[u] = Some(d + 1);
                    queue.push_back(u);
                }
            }
        }
        dist
    }

    /// Shaping potential: negated distance to the accepting state, or
    /// `-|states|` when the accepting state cannot be reached.
    pub fn potential(&self, u: StateId) -> f64 {
        match self.distances_to_accepting()[u.0] {
            Some(d) => -(d as f64),
            None => -(self.states.len() as f64),
        }
    }

    /// Potentials for every state, indexed by state id.
    pub fn potentials(&self) -> Vec<f64> {
        let n = self.states.len() as f64;
        self.distances_to_accepting().into_iter().map(|d| d.map_or(-n, |d| -(d as f64))).collect()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph form {\n  rankdir=LR;\n");
        for id in self.states() {
            let shape = if id == self.accepting {
                "doublecircle"
            } else if Some(id) == self.rejecting {
                "box"
            } else {
                "circle"
            };
            let _ = writeln!(s, "  \"{}\" [shape={}];", self.name(id), shape);
        }
        let _ = writeln!(s, "  __start [shape=point];\n  __start -> \"{}\";", self.name(self.initial));
        for e in &self.edges {
            let label = format_formula(&e.formula).replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{}\"];", self.name(e.from), self.name(e.to), label);
        }
        s.push_str("}\n");
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# form machine v1\n");
        s.push_str(&signature_to_text(&self.signature));
        for id in self.states() {
            let mut tags = Vec::new();
            if id == self.initial {
                tags.push("initial");
            }
            if id == self.accepting {
                tags.push("accepting");
            }
            if Some(id) == self.rejecting {
                tags.push("rejecting");
            }
            let _ = write!(s, "state {}", self.name(id));
            for t in tags {
                let _ = write!(s, " {t}");
            }
            s.push('\n');
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "edge {} {} {} \"{}\"",
                self.name(e.from),
                self.name(e.to),
                e.index,
                format_formula(&e.formula)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let (signature, rest) = signature_from_lines(&lines)?;
        let mut states = Vec::new();
        let (mut initial, mut accepting, mut rejecting) = (None, None, None);
        let mut raw_edges = Vec::new();
        for &(line, l) in rest {
            let perr = |msg: String| MachineError::Parse { line, msg };
            let mut words = l.split_whitespace();
            match words.next() {
                Some("state") => {
                    let name = words.next().ok_or_else(|| perr("missing state name".into()))?;
                    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                        return Err(perr(format!("invalid state name `{name}`")));
                    }
                    let id = StateId(states.len());
                    if states.iter().any(|s| s == name) {
                        return Err(perr(format!("duplicate state `{name}`")));
                    }
                    states.push(name.to_string());
                    for tag in words {
                        let slot = match tag {
                            "initial" => &mut initial,
                            "accepting" => &mut accepting,
                            "rejecting" => &mut rejecting,
                            other => return Err(perr(format!("unknown state tag `{other}`"))),
                        };
                        if slot.replace(id).is_some() {
                            return Err(perr(format!("second `{tag}` state")));
                        }
                    }
                }
                Some("edge") => {
                    let q = l.find('"').ok_or_else(|| perr("missing quoted formula".into()))?;
                    if !l.ends_with('"') || l.len() <= q + 1 {
                        return Err(perr("unterminated formula".into()));
                    }
                    let formula_text = &l[q + 1..l.len() - 1];
                    let head: Vec<&str> = l[..q].split_whitespace().collect();
                    if head.len() != 4 {
                        return Err(perr("expected `edge <from> <to> <index> \"<formula>\"`".into()));
                    }
                    let index: u32 = head[3].parse().map_err(|_| perr(format!("bad index `{}`", head[3])))?;
                    raw_edges.push((line, head[1].to_string(), head[2].to_string(), index, formula_text.to_string()));
                }
                Some(other) => return Err(perr(format!("unknown record `{other}`"))),
                None => {}
            }
        }
        let lookup = |line: usize, name: &str| {
            states
                .iter()
                .position(|s| s == name)
                .map(StateId)
                .ok_or_else(|| MachineError::Parse { line, msg: format!("unknown state `{name}`") })
        };
        let mut edges = Vec::new();
        for (line, from, to, index, ftext) in raw_edges {
            let formula = parse_formula(&ftext, &signature)
                .map_err(|e| MachineError::Parse { line, msg: e.to_string() })?;
            edges.push(Edge { from: lookup(line, &from)?, to: lookup(line, &to)?, index, formula });
        }
        let missing = |what: &str| MachineError::Parse { line: 0, msg: format!("no {what} state declared") };
        Form::new(
            signature,
            states,
            initial.ok_or_else(|| missing("initial"))?,
            accepting.ok_or_else(|| missing("accepting"))?,
            rejecting,
            edges,
        )
    }

    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Form::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Signature block shared by machine and signature files.
pub fn signature_to_text(sig: &Signature) -> String {
    let mut s = String::from("signature\n");
    if !sig.constants().is_empty() {
        let _ = writeln!(s, "constants {}", sig.constants().join(" "));
    }
    for p in sig.predicates() {
        if p.arity == 0 {
            let _ = writeln!(s, "proposition {}", p.name);
        } else {
            let members = sig.membership().get(&p.name).cloned().unwrap_or_default();
            let _ = writeln!(s, "unary {}{}{}", p.name, if members.is_empty() { "" } else { " " }, members.join(" "));
        }
    }
    s.push_str("end\n");
    s
}

fn signature_from_lines<'a>(lines: &'a [(usize, &'a str)]) -> Result<(Signature, &'a [(usize, &'a str)])> {
    let Some(&(first_line, first)) = lines.first() else {
        return Err(MachineError::Parse { line: 0, msg: "missing signature block".into() });
    };
    if first != "signature" {
        return Err(MachineError::Parse { line: first_line, msg: "expected `signature`".into() });
    }
    let mut constants = Vec::new();
    let mut predicates = Vec::new();
    let mut membership = BTreeMap::new();
    for (k, &(line, l)) in lines.iter().enumerate().skip(1) {
        let mut words = l.split_whitespace();
        match words.next() {
            Some("end") => {
                let sig = Signature::new(constants, predicates, membership)
                    .map_err(|e| MachineError::Parse { line, msg: e.to_string() })?;
                return Ok((sig, &lines[k + 1..]));
            }
            Some("constants") => constants.extend(words.map(str::to_string)),
            Some("proposition") => {
                for w in words {
                    predicates.push(Predicate { name: w.to_string(), arity: 0 });
                }
            }
            Some("unary") => {
                let name = words
                    .next()
                    .ok_or_else(|| MachineError::Parse { line, msg: "missing predicate name".into() })?;
                predicates.push(Predicate { name: name.to_string(), arity: 1 });
                membership.insert(name.to_string(), words.map(str::to_string).collect());
            }
            Some(other) => {
                return Err(MachineError::Parse { line, msg: format!("unknown signature record `{other}`") })
            }
            None => {}
        }
    }
    Err(MachineError::Parse { line: lines.last().map_or(0, |l| l.0), msg: "unterminated signature block".into() })
}

/// Parses a standalone signature file (just the signature block).
pub fn signature_from_text(text: &str) -> Result<Signature> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let (sig, rest) = signature_from_lines(&lines)?;
    if let Some(&(line, _)) = rest.first() {
        return Err(MachineError::Parse { line, msg: "unexpected content after signature".into() });
    }
    Ok(sig)
}

pub struct FormBuilder {
    signature: Signature,
    states: Vec<String>,
    initial: Option<StateId>,
    accepting: Option<StateId>,
    rejecting: Option<StateId>,
    edges: Vec<(String, String, u32, Formula)>,
}

impl FormBuilder {
    fn add(&mut self, name: &str) -> StateId {
        match self.states.iter().position(|s| s == name) {
            Some(i) => StateId(i),
            None => {
                self.states.push(name.to_string());
                StateId(self.states.len() - 1)
            }
        }
    }

    pub fn state(mut self, name: &str) -> Self {
        self.add(name);
        self
    }

    pub fn initial(mut self, name: &str) -> Self {
        self.initial = Some(self.add(name));
        self
    }

    pub fn accepting(mut self, name: &str) -> Self {
        self.accepting = Some(self.add(name));
        self
    }

    pub fn rejecting(mut self, name: &str) -> Self {
        self.rejecting = Some(self.add(name));
        self
    }

    /// Adds an edge with the next free index for the (from, to) pair.
    pub fn edge(mut self, from: &str, to: &str, formula: Formula) -> Self {
        self.add(from);
        self.add(to);
        let index = self.edges.iter().filter(|e| e.0 == from && e.1 == to).count() as u32;
        self.edges.push((from.to_string(), to.to_string(), index, formula));
        self
    }

    /// Adds an edge whose formula is given as text.
    pub fn edge_text(self, from: &str, to: &str, formula: &str) -> Result<Self> {
        let f = parse_formula(formula, &self.signature)?;
        Ok(self.edge(from, to, f))
    }

    pub fn build(self) -> Result<Form> {
        let find = |n: &str| self.states.iter().position(|s| s == n).map(StateId).unwrap();
        let edges = self
            .edges
            .iter()
            .map(|(f, t, i, formula)| Edge { from: find(f), to: find(t), index: *i, formula: formula.clone() })
            .collect();
        let initial = self.initial.ok_or_else(|| MachineError::UnknownState("<initial>".into()))?;
        let accepting = self.accepting.ok_or_else(|| MachineError::UnknownState("<accepting>".into()))?;
        Form::new(self.signature, self.states, initial, accepting, self.rejecting, edges)
    }
}

/// Convenience used by tests and the catalog: builds a machine from
/// `(from, to, formula text)` triples.
pub fn form_from_edges(
    sig: &Signature,
    initial: &str,
    accepting: &str,
    rejecting: Option<&str>,
    edges: &[(&str, &str, &str)],
) -> Result<Form> {
    let mut b = Form::builder(sig.clone()).initial(initial);
    for (from, to, text) in edges {
        b = b.edge_text(from, to, text)?;
    }
    b = b.accepting(accepting);
    if let Some(r) = rejecting {
        b = b.rejecting(r);
    }
    b.build()
}

impl From<logic::LogicError> for Violation {
    fn from(e: logic::LogicError) -> Self {
        Violation::InvalidFormula { edge: usize::MAX, error: e.to_string() }
    }
}
