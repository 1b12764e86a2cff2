//! Grid-world simulator with coloured checkpoints, a goal cell and lava.
//!
//! Each step moves the agent one cell in one of four directions and emits
//! the atoms of the cell it ends up on. An episode ends when the agent
//! enters the goal cell, steps on lava, or runs out of steps; whether the
//! episode counts as a success is decided afterwards by the task's
//! objective, so reaching the goal cell early is just a failed attempt.
//!
//! Layouts are immutable and cheap to share; [`EnvState`] is the only
//! mutable part of an episode.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::learner::{Label, TraceExample};
use crate::logic::{AtomId, AtomSet, GroundAtom, LogicError, Observation, Predicate, Signature};
use crate::machine::{form_from_edges, Form, MachineError};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("episode already terminated ({0:?})")]
    Terminated(Termination),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("bad objective `{0}`")]
    Objective(String),
    #[error(transparent)]
    Logic(#[from] LogicError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// `(x, y)`, with `y` growing downwards.
pub type Cell = (usize, usize);

pub const DEFAULT_MAX_STEPS: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    Running,
    /// The agent entered the goal cell.
    Goal,
    /// The agent stepped on lava.
    Dead,
    Timeout,
}

#[derive(Debug, Clone)]
pub struct GridLayout {
    width: usize,
    height: usize,
    start: Cell,
    goal: Cell,
    checkpoints: BTreeMap<Cell, GroundAtom>,
    lava: BTreeSet<Cell>,
    walls: BTreeSet<Cell>,
    signature: Signature,
    /// Observation emitted on entering each cell, indexed by `y * width + x`.
    cell_obs: Vec<Observation>,
    goal_atom: AtomId,
    lava_atom: Option<AtomId>,
}

impl PartialEq for GridLayout {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.start == other.start
            && self.goal == other.goal
            && self.checkpoints == other.checkpoints
            && self.lava == other.lava
            && self.walls == other.walls
            && self.signature == other.signature
    }
}

impl GridLayout {
    /// Builds a layout and derives its signature: one unary predicate per
    /// colour (in order of first appearance), constants in checkpoint order,
    /// then `goal` and, if any lava cell exists, `lava`.
    pub fn new(
        width: usize,
        height: usize,
        start: Cell,
        goal: Cell,
        checkpoints: Vec<(Cell, GroundAtom)>,
        lava: BTreeSet<Cell>,
        walls: BTreeSet<Cell>,
    ) -> Result<Self> {
        let bad = |m: String| Err(EnvError::InvalidLayout(m));
        if width == 0 || height == 0 {
            return bad("empty grid".into());
        }
        let in_bounds = |c: Cell| c.0 < width && c.1 < height;
        let mut occupied: BTreeMap<Cell, String> = BTreeMap::new();
        let mut claim = |c: Cell, what: String| -> Result<()> {
            if !in_bounds(c) {
                return Err(EnvError::InvalidLayout(format!("{what} at {c:?} is out of bounds")));
            }
            if let Some(prev) = occupied.insert(c, what.clone()) {
                return Err(EnvError::InvalidLayout(format!("{what} and {prev} share cell {c:?}")));
            }
            Ok(())
        };
        claim(start, "start".into())?;
        claim(goal, "goal".into())?;
        for (c, a) in &checkpoints {
            claim(*c, a.to_string())?;
        }
        for &c in &lava {
            claim(c, "lava".into())?;
        }
        for &c in &walls {
            claim(c, "wall".into())?;
        }

        let mut constants: Vec<String> = Vec::new();
        let mut colours: Vec<String> = Vec::new();
        let mut membership: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (_, a) in &checkpoints {
            let Some(c) = &a.argument else {
                return bad(format!("checkpoint `{a}` must be a coloured constant"));
            };
            if a.predicate == "goal" || a.predicate == "lava" {
                return bad(format!("`{}` is reserved", a.predicate));
            }
            if constants.contains(c) {
                return bad(format!("constant `{c}` appears on more than one cell"));
            }
            constants.push(c.clone());
            if !colours.contains(&a.predicate) {
                colours.push(a.predicate.clone());
            }
            membership.entry(a.predicate.clone()).or_default().push(c.clone());
        }
        let mut predicates: Vec<Predicate> =
            colours.iter().map(|p| Predicate { name: p.clone(), arity: 1 }).collect();
        predicates.push(Predicate { name: "goal".into(), arity: 0 });
        if !lava.is_empty() {
            predicates.push(Predicate { name: "lava".into(), arity: 0 });
        }
        let signature = Signature::new(constants, predicates, membership)?;
        let goal_atom = signature.atom_id(&GroundAtom::proposition("goal"))?;
        let lava_atom = (!lava.is_empty()).then(|| signature.atom_id(&GroundAtom::proposition("lava"))).transpose()?;

        let mut cell_obs = vec![Observation::empty(); width * height];
        cell_obs[goal.1 * width + goal.0] = Observation(AtomSet::singleton(goal_atom));
        for (c, a) in &checkpoints {
            cell_obs[c.1 * width + c.0] = Observation(AtomSet::singleton(signature.atom_id(a)?));
        }
        if let Some(l) = lava_atom {
            for c in &lava {
                cell_obs[c.1 * width + c.0] = Observation(AtomSet::singleton(l));
            }
        }

        let layout = GridLayout {
            width,
            height,
            start,
            goal,
            checkpoints: checkpoints.into_iter().collect(),
            lava,
            walls,
            signature,
            cell_obs,
            goal_atom,
            lava_atom,
        };
        // Everything must be reachable without touching lava or the goal.
        let dist = layout.distances_from(start, false);
        for (c, a) in &layout.checkpoints {
            if dist[layout.index(*c)].is_none() {
                return bad(format!("checkpoint `{a}` at {c:?} is unreachable"));
            }
        }
        if layout.distances_from(start, true)[layout.index(goal)].is_none() {
            return bad("goal is unreachable".into());
        }
        Ok(layout)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Cell {
        self.start
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn checkpoints(&self) -> &BTreeMap<Cell, GroundAtom> {
        &self.checkpoints
    }

    pub fn lava(&self) -> &BTreeSet<Cell> {
        &self.lava
    }

    pub fn walls(&self) -> &BTreeSet<Cell> {
        &self.walls
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.1 * self.width + c.0
    }

    pub fn observation_at(&self, c: Cell) -> Observation {
        self.cell_obs[self.index(c)]
    }

    pub fn cell_of(&self, atom: &GroundAtom) -> Option<Cell> {
        self.checkpoints.iter().find(|(_, a)| *a == atom).map(|(c, _)| *c)
    }

    /// Where `action` takes the agent from `c`; walls and borders clamp.
    pub fn neighbour(&self, c: Cell, action: Action) -> Cell {
        let (x, y) = c;
        let next = match action {
            Action::Up if y > 0 => (x, y - 1),
            Action::Down if y + 1 < self.height => (x, y + 1),
            Action::Left if x > 0 => (x - 1, y),
            Action::Right if x + 1 < self.width => (x + 1, y),
            _ => c,
        };
        if self.walls.contains(&next) {
            c
        } else {
            next
        }
    }

    /// BFS distances from `from`, never passing through lava or (unless
    /// `through_goal`) the goal cell. The goal itself is still a valid
    /// endpoint when `through_goal` is set.
    pub fn distances_from(&self, from: Cell, through_goal: bool) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cell_count()];
        dist[self.index(from)] = Some(0);
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let d = dist[self.index(c)].unwrap();
            if c != from && (c == self.goal || self.lava.contains(&c)) {
                continue;
            }
            for a in Action::ALL {
                let n = self.neighbour(c, a);
                if self.lava.contains(&n) || (n == self.goal && !through_goal) {
                    continue;
                }
                if dist[self.index(n)].is_none() {
                    dist[self.index(n)] = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Same walls, start and goal, with checkpoints and lava shuffled over
    /// the free cells. The signature is unchanged.
    pub fn randomized(&self, seed: u64) -> Result<GridLayout> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let free: Vec<Cell> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|c| *c != self.start && *c != self.goal && !self.walls.contains(c))
            .collect();
        let atoms: Vec<GroundAtom> = self.checkpoints.values().cloned().collect();
        // Keep the original constant order so the signature matches.
        let mut ordered: Vec<GroundAtom> = Vec::new();
        for c in self.signature.constants() {
            ordered.extend(atoms.iter().filter(|a| a.argument.as_deref() == Some(c)).cloned());
        }
        let needed = ordered.len() + self.lava.len();
        if needed > free.len() {
            return Err(EnvError::InvalidLayout("not enough free cells".into()));
        }
        for _ in 0..1000 {
            let mut cells = free.clone();
            cells.shuffle(&mut rng);
            let checkpoints = ordered.iter().cloned().enumerate().map(|(i, a)| (cells[i], a)).collect();
            let lava = cells[ordered.len()..needed].iter().copied().collect();
            if let Ok(l) =
                GridLayout::new(self.width, self.height, self.start, self.goal, checkpoints, lava, self.walls.clone())
            {
                return Ok(l);
            }
        }
        Err(EnvError::InvalidLayout("no reachable random placement found".into()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("layout v1\n");
        let _ = writeln!(s, "size {} {}", self.width, self.height);
        let _ = writeln!(s, "cell {} {} start", self.start.0, self.start.1);
        let _ = writeln!(s, "cell {} {} goal", self.goal.0, self.goal.1);
        let mut cps: Vec<(&Cell, &GroundAtom)> = self.checkpoints.iter().collect();
        let consts = self.signature.constants();
        cps.sort_by_key(|(_, a)| consts.iter().position(|c| Some(c) == a.argument.as_ref()));
        for (c, a) in cps {
            let _ = writeln!(s, "cell {} {} {}", c.0, c.1, a);
        }
        for c in &self.lava {
            let _ = writeln!(s, "cell {} {} lava", c.0, c.1);
        }
        for c in &self.walls {
            let _ = writeln!(s, "cell {} {} wall", c.0, c.1);
        }
        s
    }

    /// Parses the `layout v1` format: `size W H` followed by
    /// `cell X Y <start|goal|lava|wall|pred(const)>` lines.
    pub fn from_text(text: &str) -> Result<GridLayout> {
        let perr = |line: usize, msg: &str| EnvError::Parse { line, msg: msg.to_string() };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "layout v1")) => {}
            Some((n, _)) => return Err(perr(n, "expected `layout v1` header")),
            None => return Err(perr(0, "empty layout")),
        }
        let mut size = None;
        let (mut start, mut goal) = (None, None);
        let mut checkpoints = Vec::new();
        let (mut lava, mut walls) = (BTreeSet::new(), BTreeSet::new());
        for (n, l) in lines {
            let words: Vec<&str> = l.split_whitespace().collect();
            let num = |w: &str| w.parse::<usize>().map_err(|_| perr(n, &format!("bad number `{w}`")));
            match words.as_slice() {
                ["size", w, h] => size = Some((num(w)?, num(h)?)),
                ["cell", x, y, what] => {
                    let c = (num(x)?, num(y)?);
                    match *what {
                        "start" => start = Some(c),
                        "goal" => goal = Some(c),
                        "lava" => {
                            lava.insert(c);
                        }
                        "wall" => {
                            walls.insert(c);
                        }
                        atom => checkpoints.push((c, parse_ground_atom(atom).ok_or_else(|| perr(n, "bad atom"))?)),
                    }
                }
                _ => return Err(perr(n, &format!("unrecognised line `{l}`"))),
            }
        }
        let (w, h) = size.ok_or_else(|| perr(0, "missing `size`"))?;
        let start = start.ok_or_else(|| perr(0, "missing start cell"))?;
        let goal = goal.ok_or_else(|| perr(0, "missing goal cell"))?;
        GridLayout::new(w, h, start, goal, checkpoints, lava, walls)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<GridLayout> {
        GridLayout::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_ground_atom(text: &str) -> Option<GroundAtom> {
    let (p, rest) = text.split_once('(')?;
    let c = rest.strip_suffix(')')?;
    let ok = |s: &str| !s.is_empty() && s.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_');
    (ok(p) && ok(c)).then(|| GroundAtom::unary(p, c))
}

/// The 8×8 arena. Two yellows sit in dead-end pockets so that no memoryless
/// policy can collect both and still reach the goal.
pub fn default_layout(extra_yellows: usize, with_lava: bool) -> Result<GridLayout> {
    let base: [(Cell, &str, &str); 13] = [
        ((0, 0), "yellow", "o0"),
        ((7, 0), "yellow", "o1"),
        ((3, 2), "red", "o2"),
        ((5, 5), "red", "o3"),
        ((2, 4), "blue", "o4"),
        ((5, 2), "blue", "o5"),
        ((1, 5), "purple", "o6"),
        ((6, 4), "purple", "o7"),
        ((3, 6), "gray", "o8"),
        ((4, 0), "gray", "o9"),
        ((2, 1), "green", "o10"),
        ((7, 2), "green", "o11"),
        ((4, 3), "green", "o12"),
    ];
    const EXTRA: [(Cell, &str); 4] = [((2, 6), "o13"), ((5, 4), "o14"), ((7, 3), "o15"), ((1, 2), "o16")];
    if extra_yellows > EXTRA.len() {
        return Err(EnvError::InvalidLayout(format!("at most {} extra yellows", EXTRA.len())));
    }
    let mut checkpoints: Vec<(Cell, GroundAtom)> =
        base.iter().map(|(c, p, o)| (*c, GroundAtom::unary(p, o))).collect();
    checkpoints.extend(EXTRA[..extra_yellows].iter().map(|(c, o)| (*c, GroundAtom::unary("yellow", o))));
    let lava = if with_lava { [(1, 3), (4, 5), (5, 1), (3, 4), (6, 2)].into_iter().collect() } else { BTreeSet::new() };
    let walls = [(1, 0), (6, 0)].into_iter().collect();
    GridLayout::new(8, 8, (0, 7), (7, 7), checkpoints, lava, walls)
}

/// What an episode has to achieve. Every objective fails once lava is seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Objective {
    /// Visit every checkpoint of a colour, then reach the goal.
    AllOf { colour: String },
    /// Visit any checkpoint of a colour other than `excluded`, then reach the goal.
    AnyExcept { colour: String, excluded: String },
    /// Visit any `first` checkpoint, then every `all` checkpoint, then
    /// `then`, then reach the goal.
    Sequence { first: String, all: String, then: GroundAtom },
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::AllOf { colour } => write!(f, "all-of {colour}"),
            Objective::AnyExcept { colour, excluded } => write!(f, "any-except {colour} {excluded}"),
            Objective::Sequence { first, all, then } => write!(f, "sequence {first} {all} {then}"),
        }
    }
}

impl FromStr for Objective {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split_whitespace().collect();
        let err = || EnvError::Objective(s.to_string());
        match words.as_slice() {
            ["all-of", c] => Ok(Objective::AllOf { colour: c.to_string() }),
            ["any-except", c, e] => Ok(Objective::AnyExcept { colour: c.to_string(), excluded: e.to_string() }),
            ["sequence", a, b, t] => Ok(Objective::Sequence {
                first: a.to_string(),
                all: b.to_string(),
                then: parse_ground_atom(t).ok_or_else(err)?,
            }),
            _ => Err(err()),
        }
    }
}

/// Objective compiled against a signature.
#[derive(Debug, Clone)]
enum Compiled {
    AllOf { set: AtomSet },
    AnyExcept { set: AtomSet },
    Sequence { first: AtomSet, all: AtomSet, then: AtomId },
}

#[derive(Debug, Clone)]
pub struct Task {
    name: String,
    layout: Arc<GridLayout>,
    objective: Objective,
    compiled: Compiled,
    max_steps: usize,
}

impl Task {
    pub fn new(name: &str, layout: GridLayout, objective: Objective, max_steps: usize) -> Result<Self> {
        if max_steps == 0 {
            return Err(EnvError::InvalidLayout("max_steps must be positive".into()));
        }
        let sig = layout.signature();
        let compiled = match &objective {
            Objective::AllOf { colour } => Compiled::AllOf { set: sig.instances(colour)? },
            Objective::AnyExcept { colour, excluded } => {
                let ex = sig.atom_id(&GroundAtom::unary(colour, excluded))?;
                Compiled::AnyExcept { set: sig.instances(colour)?.difference(AtomSet::singleton(ex)) }
            }
            Objective::Sequence { first, all, then } => Compiled::Sequence {
                first: sig.instances(first)?,
                all: sig.instances(all)?,
                then: sig.atom_id(then)?,
            },
        };
        Ok(Task { name: name.to_string(), layout: Arc::new(layout), objective, compiled, max_steps })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn signature(&self) -> &Signature {
        self.layout.signature()
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps.max(1);
        self
    }

    /// The same task on a shuffled layout.
    pub fn randomized(&self, seed: u64) -> Result<Task> {
        let mut t = Task::new(&self.name, self.layout.randomized(seed)?, self.objective.clone(), self.max_steps)?;
        t.name = format!("{}@{seed}", self.name);
        Ok(t)
    }

    pub fn dead_predicate(&self, trace: &[Observation]) -> bool {
        match self.layout.lava_atom {
            Some(l) => trace.iter().any(|o| o.0.contains(l)),
            None => false,
        }
    }

    pub fn goal_predicate(&self, trace: &[Observation]) -> bool {
        let goal = self.layout.goal_atom;
        let lava = self.layout.lava_atom;
        let mut phase = 0u8;
        let mut seen = AtomSet::EMPTY;
        for o in trace {
            let o = o.0;
            if lava.is_some_and(|l| o.contains(l)) {
                return false;
            }
            match &self.compiled {
                Compiled::AllOf { set } => {
                    seen = seen.union(o);
                    if o.contains(goal) && set.is_subset(seen) {
                        return true;
                    }
                }
                Compiled::AnyExcept { set } => {
                    if phase == 1 && o.contains(goal) {
                        return true;
                    }
                    if phase == 0 && o.intersects(*set) {
                        phase = 1;
                    }
                }
                Compiled::Sequence { first, all, then } => match phase {
                    0 if o.intersects(*first) => phase = 1,
                    1 => {
                        seen = seen.union(o);
                        if all.is_subset(seen) {
                            phase = 2;
                        }
                    }
                    2 if o.contains(*then) => phase = 3,
                    3 if o.contains(goal) => return true,
                    _ => {}
                },
            }
        }
        false
    }

    /// The hand-written machine for the objective.
    pub fn reference_machine(&self) -> Result<Form> {
        let sig = self.signature();
        let lava = self.layout.lava_atom.is_some();
        let form = match &self.objective {
            Objective::AllOf { colour } => {
                let all = format!("forall X. {colour}(X)");
                form_from_edges(sig, "u0", "u_acc", None, &[("u0", "u1", &all), ("u1", "u_acc", "goal")])?
            }
            Objective::AnyExcept { colour, excluded } => {
                let (guard, rej) = if lava { (" & !lava", Some("u_rej")) } else { ("", None) };
                let first = format!("exists X. {colour}(X) & !{colour}({excluded}){guard}");
                let last = format!("goal{guard}");
                let mut edges = vec![("u0", "u1", first.as_str()), ("u1", "u_acc", last.as_str())];
                if lava {
                    edges.push(("u0", "u_rej", "lava"));
                    edges.push(("u1", "u_rej", "lava"));
                }
                form_from_edges(sig, "u0", "u_acc", rej, &edges)?
            }
            Objective::Sequence { first, all, then } => {
                let a = format!("exists X. {first}(X)");
                let b = format!("forall X. {all}(X)");
                let c = then.to_string();
                form_from_edges(
                    sig,
                    "u0",
                    "u_acc",
                    None,
                    &[("u0", "u1", &a), ("u1", "u2", &b), ("u2", "u3", &c), ("u3", "u_acc", "goal")],
                )?
            }
        };
        Ok(form)
    }

    pub fn reset(&self) -> EnvState {
        EnvState { agent: self.layout.start, steps: 0, terminated: Termination::Running }
    }

    pub fn step(&self, st: &mut EnvState, action: Action) -> Result<Observation> {
        if st.terminated != Termination::Running {
            return Err(EnvError::Terminated(st.terminated));
        }
        let next = self.layout.neighbour(st.agent, action);
        st.agent = next;
        st.steps += 1;
        let obs = self.layout.observation_at(next);
        st.terminated = if self.layout.lava.contains(&next) {
            Termination::Dead
        } else if next == self.layout.goal {
            Termination::Goal
        } else if st.steps >= self.max_steps {
            Termination::Timeout
        } else {
            Termination::Running
        };
        Ok(obs)
    }

    pub fn label(&self, trace: &[Observation]) -> Label {
        if self.dead_predicate(trace) {
            Label::Dead
        } else if self.goal_predicate(trace) {
            Label::Goal
        } else {
            Label::Incomplete
        }
    }

    pub fn label_trace(&self, episode: &Episode) -> TraceExample {
        TraceExample::new(self.label(&episode.observations), episode.observations.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvState {
    pub agent: Cell,
    pub steps: usize,
    pub terminated: Termination,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub observations: Vec<Observation>,
    pub termination: Termination,
}

pub const TASK_NAMES: [&str; 5] =
    ["all-yellow-2", "all-yellow-4", "all-yellow-6", "green-but-one-no-lava", "blue-allyellow-7"];

pub fn task_catalog() -> Vec<Task> {
    TASK_NAMES.iter().map(|n| task_by_name(n).expect("catalog tasks are valid")).collect()
}

/// Looks a task up by name. `name@seed` gives the shuffled-layout variant.
pub fn task_by_name(name: &str) -> Result<Task> {
    if let Some((base, seed)) = name.split_once('@') {
        let seed: u64 = seed.parse().map_err(|_| EnvError::UnknownTask(name.to_string()))?;
        return task_by_name(base)?.randomized(seed);
    }
    let yellow = || Objective::AllOf { colour: "yellow".into() };
    let (layout, objective) = match name {
        "all-yellow-2" => (default_layout(0, false)?, yellow()),
        "all-yellow-4" => (default_layout(2, false)?, yellow()),
        "all-yellow-6" => (default_layout(4, false)?, yellow()),
        "green-but-one-no-lava" => {
            (default_layout(0, true)?, Objective::AnyExcept { colour: "green".into(), excluded: "o12".into() })
        }
        "blue-allyellow-7" => (
            default_layout(0, false)?,
            Objective::Sequence {
                first: "blue".into(),
                all: "yellow".into(),
                then: GroundAtom::unary("purple", "o7"),
            },
        ),
        _ => return Err(EnvError::UnknownTask(name.to_string())),
    };
    Task::new(name, layout, objective, DEFAULT_MAX_STEPS)
}

pub fn random_walk(task: &Task, rng: &mut impl Rng) -> Episode {
    let mut st = task.reset();
    let mut observations = Vec::new();
    while st.terminated == Termination::Running {
        let a = Action::ALL[rng.gen_range(0..4)];
        observations.push(task.step(&mut st, a).expect("running episode"));
    }
    Episode { observations, termination: st.terminated }
}

/// Cells that, visited in order, satisfy the objective (goal excluded).
fn plan(task: &Task, rng: &mut impl Rng) -> Vec<Cell> {
    let layout = task.layout();
    let sig = task.signature();
    let cells_of = |set: AtomSet| -> Vec<Cell> {
        set.iter().filter_map(|id| layout.cell_of(sig.atom(id))).collect()
    };
    match &task.compiled {
        Compiled::AllOf { set } => {
            let mut v = cells_of(*set);
            v.shuffle(rng);
            v
        }
        Compiled::AnyExcept { set } => cells_of(*set).choose(rng).into_iter().copied().collect(),
        Compiled::Sequence { first, all, then } => {
            let mut v: Vec<Cell> = cells_of(*first).choose(rng).into_iter().copied().collect();
            let mut ys = cells_of(*all);
            ys.shuffle(rng);
            v.extend(ys);
            v.extend(layout.cell_of(sig.atom(*then)));
            v
        }
    }
}

/// Walks through `waypoints` and then to the goal along shortest paths,
/// taking a random action with probability `noise`.
pub fn waypoint_walk(task: &Task, waypoints: &[Cell], noise: f64, rng: &mut impl Rng) -> Episode {
    wander_walk(task, 0, waypoints, true, noise, rng)
}

/// `prefix` random steps, then the waypoints, then either the goal or a
/// random walk until the episode ends.
fn wander_walk(
    task: &Task,
    prefix: usize,
    waypoints: &[Cell],
    to_goal: bool,
    noise: f64,
    rng: &mut impl Rng,
) -> Episode {
    let layout = task.layout();
    let mut targets: Vec<Cell> = waypoints.to_vec();
    targets.push(layout.goal());
    let maps: Vec<Vec<Option<usize>>> =
        targets.iter().enumerate().map(|(i, &t)| layout.distances_from(t, i + 1 == targets.len())).collect();
    let mut st = task.reset();
    let mut observations = Vec::new();
    let mut k = 0;
    while st.terminated == Termination::Running {
        while k + 1 < targets.len() && st.agent == targets[k] {
            k += 1;
        }
        let random = st.steps < prefix || (!to_goal && k + 1 == targets.len());
        let a = if random || rng.gen_bool(noise.clamp(0.0, 1.0)) {
            Action::ALL[rng.gen_range(0..4)]
        } else {
            toward(layout, st.agent, &maps[k], k + 1 == targets.len(), rng)
        };
        observations.push(task.step(&mut st, a).expect("running episode"));
    }
    Episode { observations, termination: st.terminated }
}

/// A random move along some shortest path of the distance map `d`; a
/// random move if there is none.
fn toward(layout: &GridLayout, at: Cell, d: &[Option<usize>], allow_goal: bool, rng: &mut impl Rng) -> Action {
    let here = d[layout.index(at)];
    let moves: Vec<Action> = Action::ALL
        .into_iter()
        .filter(|&a| {
            let n = layout.neighbour(at, a);
            (n != layout.goal() || allow_goal) && d[layout.index(n)].is_some() && d[layout.index(n)] < here
        })
        .collect();
    match moves.choose(rng) {
        Some(&a) => a,
        None => Action::ALL[rng.gen_range(0..4)],
    }
}

/// A walk that mixes successful plans, perturbed plans and random
/// checkpoint tours, producing all three labels in useful proportions.
pub fn guided_walk(task: &Task, noise: f64, rng: &mut impl Rng) -> Episode {
    let mut wps = plan(task, rng);
    let all: Vec<Cell> = task.layout().checkpoints().keys().copied().collect();
    match rng.gen_range(0..5) {
        0 => {}
        // Near miss: swap a waypoint for another checkpoint of the same colour.
        4 if !wps.is_empty() => {
            let i = rng.gen_range(0..wps.len());
            let colour = &task.layout().checkpoints()[&wps[i]].predicate;
            let same: Vec<Cell> =
                task.layout().checkpoints().iter().filter(|(_, a)| &a.predicate == colour).map(|(c, _)| *c).collect();
            wps[i] = same[rng.gen_range(0..same.len())];
        }
        1 if !wps.is_empty() => {
            wps.remove(rng.gen_range(0..wps.len()));
        }
        2 if wps.len() > 1 => {
            let i = rng.gen_range(0..wps.len());
            let j = rng.gen_range(0..wps.len());
            wps.swap(i, j);
        }
        _ => {
            let extra = rng.gen_range(1..=3);
            for _ in 0..extra {
                let c = all[rng.gen_range(0..all.len())];
                let at = rng.gen_range(0..=wps.len());
                wps.insert(at, c);
            }
        }
    }
    if !task.layout().lava().is_empty() && rng.gen_bool(0.2) {
        let lava: Vec<Cell> = task.layout().lava().iter().copied().collect();
        wps.insert(rng.gen_range(0..=wps.len()), lava[rng.gen_range(0..lava.len())]);
        return lava_walk(task, &wps, noise, rng);
    }
    let prefix = if rng.gen_bool(0.3) { rng.gen_range(1..=20) } else { 0 };
    wander_walk(task, prefix, &wps, rng.gen_bool(0.75), noise, rng)
}

/// Waypoint walk whose waypoints may include a lava cell: the final step
/// onto lava is taken deliberately.
fn lava_walk(task: &Task, waypoints: &[Cell], noise: f64, rng: &mut impl Rng) -> Episode {
    let layout = task.layout();
    let Some(pos) = waypoints.iter().position(|c| layout.lava().contains(c)) else {
        return waypoint_walk(task, waypoints, noise, rng);
    };
    let lava_cell = waypoints[pos];
    // Reach a cell next to the lava first, then step in.
    let before = &waypoints[..pos];
    let mut ep = Episode { observations: Vec::new(), termination: Termination::Running };
    let mut st = task.reset();
    let mut targets: Vec<Cell> = before.to_vec();
    let adjacent = Action::ALL
        .into_iter()
        .map(|a| layout.neighbour(lava_cell, a))
        .find(|c| *c != lava_cell && !layout.lava().contains(c) && *c != layout.goal());
    let Some(adjacent) = adjacent else {
        return waypoint_walk(task, before, noise, rng);
    };
    targets.push(adjacent);
    let maps: Vec<Vec<Option<usize>>> = targets.iter().map(|&t| layout.distances_from(t, false)).collect();
    let mut k = 0;
    while st.terminated == Termination::Running {
        while k < targets.len() && st.agent == targets[k] {
            k += 1;
        }
        let a = if k == targets.len() {
            Action::ALL.into_iter().find(|&a| layout.neighbour(st.agent, a) == lava_cell).unwrap_or(Action::Up)
        } else if rng.gen_bool(noise.clamp(0.0, 1.0)) {
            Action::ALL[rng.gen_range(0..4)]
        } else {
            toward(layout, st.agent, &maps[k], false, rng)
        };
        ep.observations.push(task.step(&mut st, a).expect("running episode"));
    }
    ep.termination = st.terminated;
    ep
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub traces: usize,
    /// Share of guided walks; the rest are uniform random walks.
    pub guided_fraction: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { traces: 60, guided_fraction: 0.8, noise: 0.1, seed: 0 }
    }
}

/// Labelled traces with the labels the task can produce roughly balanced.
/// Falls back to whatever is generated if a label is too rare to fill.
pub fn generate_corpus(task: &Task, cfg: &CorpusConfig) -> Vec<TraceExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<Label> = if task.layout().lava().is_empty() {
        vec![Label::Goal, Label::Incomplete]
    } else {
        vec![Label::Goal, Label::Incomplete, Label::Dead]
    };
    let quota = cfg.traces.div_ceil(labels.len());
    let mut counts: BTreeMap<Label, usize> = BTreeMap::new();
    let mut out = Vec::with_capacity(cfg.traces);
    let mut spill = Vec::new();
    let mut attempts = 0;
    while out.len() < cfg.traces && attempts < cfg.traces * 200 {
        attempts += 1;
        let ep = if rng.gen_bool(cfg.guided_fraction.clamp(0.0, 1.0)) {
            guided_walk(task, cfg.noise, &mut rng)
        } else {
            random_walk(task, &mut rng)
        };
        let ex = task.label_trace(&ep);
        let c = counts.entry(ex.label).or_default();
        if *c < quota {
            *c += 1;
            out.push(ex);
        } else if spill.len() < cfg.traces {
            spill.push(ex);
        }
    }
    let missing = cfg.traces.saturating_sub(out.len());
    out.extend(spill.into_iter().take(missing));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(task: &Task, text: &str) -> Observation {
        Observation::parse(text, task.signature()).unwrap()
    }

    fn trace(task: &Task, steps: &[&str]) -> Vec<Observation> {
        steps.iter().map(|s| obs(task, s)).collect()
    }

    fn walk_to(task: &Task, st: &mut EnvState, target: Cell) -> Vec<Observation> {
        let d = task.layout().distances_from(target, true);
        let mut out = Vec::new();
        while st.agent != target {
            let here = d[task.layout().index(st.agent)].unwrap();
            let a = Action::ALL
                .into_iter()
                .find(|&a| d[task.layout().index(task.layout().neighbour(st.agent, a))] == Some(here - 1))
                .unwrap();
            out.push(task.step(st, a).unwrap());
        }
        out
    }

    #[test]
    fn catalog_has_all_tasks() {
        let cat = task_catalog();
        assert!(cat.len() >= 5);
        assert!(matches!(task_by_name("nope"), Err(EnvError::UnknownTask(_))));
    }

    #[test]
    fn herbrand_sizes() {
        assert_eq!(task_by_name("blue-allyellow-7").unwrap().signature().atom_count(), 14);
        assert_eq!(task_by_name("green-but-one-no-lava").unwrap().signature().atom_count(), 15);
        assert_eq!(task_by_name("all-yellow-4").unwrap().signature().instances("yellow").unwrap().len(), 4);
        assert_eq!(task_by_name("all-yellow-6").unwrap().signature().instances("yellow").unwrap().len(), 6);
        let sig = task_by_name("green-but-one-no-lava").unwrap().signature().clone();
        assert_eq!(sig.unary_predicates().count(), 6);
        assert_eq!(sig.instances("green").unwrap().len(), 3);
    }

    #[test]
    fn reset_and_step() {
        let t = task_by_name("all-yellow-2").unwrap();
        let st = t.reset();
        assert_eq!(st, t.reset());
        assert_eq!((st.agent, st.steps, st.terminated), ((0, 7), 0, Termination::Running));

        let mut st = t.reset();
        let o = t.step(&mut st, Action::Right).unwrap();
        assert_eq!(o, Observation::empty());
        // Border clamps.
        let mut st = t.reset();
        t.step(&mut st, Action::Left).unwrap();
        assert_eq!(st.agent, (0, 7));
    }

    #[test]
    fn entering_checkpoint_emits_its_atom() {
        let t = task_by_name("blue-allyellow-7").unwrap();
        let mut st = t.reset();
        let obs = walk_to(&t, &mut st, (2, 4));
        assert_eq!(*obs.last().unwrap(), self::obs(&t, "blue(o4)"));
    }

    #[test]
    fn lava_ends_the_episode() {
        let t = task_by_name("green-but-one-no-lava").unwrap();
        let mut st = t.reset();
        st.agent = (1, 4);
        let o = t.step(&mut st, Action::Up).unwrap();
        assert_eq!(o, obs(&t, "lava"));
        assert_eq!(st.terminated, Termination::Dead);
        assert!(matches!(t.step(&mut st, Action::Up), Err(EnvError::Terminated(Termination::Dead))));
        let ep = Episode { observations: vec![o], termination: Termination::Dead };
        assert_eq!(t.label_trace(&ep).label, Label::Dead);
    }

    #[test]
    fn goal_cell_and_timeout() {
        let t = task_by_name("all-yellow-2").unwrap();
        let mut st = t.reset();
        walk_to(&t, &mut st, (7, 7));
        assert_eq!(st.terminated, Termination::Goal);

        let t = t.with_max_steps(3);
        let mut st = t.reset();
        let mut obs = Vec::new();
        for _ in 0..3 {
            obs.push(t.step(&mut st, Action::Left).unwrap());
        }
        assert_eq!(st.terminated, Termination::Timeout);
        assert_eq!(t.label(&obs), Label::Incomplete);
    }

    #[test]
    fn walls_make_pockets() {
        let l = default_layout(0, false).unwrap();
        assert_eq!(l.neighbour((0, 0), Action::Right), (0, 0));
        assert_eq!(l.neighbour((7, 0), Action::Left), (7, 0));
        assert_eq!(l.neighbour((0, 1), Action::Up), (0, 0));
    }

    #[test]
    fn goal_predicates() {
        let t = task_by_name("blue-allyellow-7").unwrap();
        assert!(t.goal_predicate(&trace(&t, &["blue(o5)", "yellow(o0)", "yellow(o1)", "purple(o7)", "goal"])));
        assert!(!t.goal_predicate(&trace(&t, &["yellow(o0)", "blue(o5)", "yellow(o1)", "purple(o7)", "goal"])));
        assert!(!t.goal_predicate(&trace(&t, &["blue(o5)", "yellow(o0)", "yellow(o1)", "purple(o6)", "goal"])));

        let t = task_by_name("all-yellow-2").unwrap();
        assert!(!t.goal_predicate(&trace(&t, &["yellow(o0)", "goal"])));
        assert!(t.goal_predicate(&trace(&t, &["yellow(o1)", "", "yellow(o0)", "goal"])));
        assert_eq!(t.label(&trace(&t, &["yellow(o1)", "yellow(o0)", "goal"])), Label::Goal);

        let t = task_by_name("green-but-one-no-lava").unwrap();
        assert!(t.goal_predicate(&trace(&t, &["green(o10)", "goal"])));
        assert!(!t.goal_predicate(&trace(&t, &["green(o12)", "goal"])));
        assert!(!t.goal_predicate(&trace(&t, &["green(o11)", "lava"])));
        assert!(t.dead_predicate(&trace(&t, &["green(o11)", "lava"])));
    }

    #[test]
    fn reference_machines_are_valid() {
        for t in task_catalog() {
            let m = t.reference_machine().unwrap();
            assert!(m.validate().is_empty(), "{}: {:?}", t.name(), m.validate());
        }
        assert_eq!(task_by_name("blue-allyellow-7").unwrap().reference_machine().unwrap().state_count(), 5);
        assert!(task_by_name("green-but-one-no-lava").unwrap().reference_machine().unwrap().rejecting().is_some());
    }

    #[test]
    fn randomized_layouts() {
        let t = task_by_name("green-but-one-no-lava").unwrap();
        let a = t.randomized(0).unwrap();
        let b = t.randomized(1).unwrap();
        assert_ne!(a.layout().checkpoints(), b.layout().checkpoints());
        assert_eq!(a.signature(), b.signature());
        assert_eq!(a.signature(), t.signature());
        assert_eq!(a.layout(), t.randomized(0).unwrap().layout());
        assert_eq!(task_by_name("all-yellow-2@3").unwrap().name(), "all-yellow-2@3");
    }

    #[test]
    fn layout_text_round_trip() {
        for t in task_catalog() {
            let text = t.layout().to_text();
            let back = GridLayout::from_text(&text).unwrap();
            assert_eq!(&back, t.layout());
        }
        assert!(matches!(GridLayout::from_text("layout v1\nsize 2 x\n"), Err(EnvError::Parse { line: 2, .. })));
    }

    #[test]
    fn invalid_layouts() {
        let cp = |c: Cell, o: &str| (c, GroundAtom::unary("yellow", o));
        let none = BTreeSet::new;
        assert!(GridLayout::new(3, 3, (0, 0), (0, 0), vec![], none(), none()).is_err());
        assert!(GridLayout::new(3, 3, (0, 0), (2, 2), vec![cp((5, 5), "a")], none(), none()).is_err());
        assert!(GridLayout::new(3, 3, (0, 0), (2, 2), vec![cp((1, 1), "a"), cp((1, 2), "a")], none(), none()).is_err());
        // Goal walled off.
        let walls = [(1, 2), (2, 1)].into_iter().collect();
        assert!(GridLayout::new(3, 3, (0, 0), (2, 2), vec![], none(), walls).is_err());
    }

    #[test]
    fn corpus_is_balanced_and_deterministic() {
        let t = task_by_name("green-but-one-no-lava").unwrap();
        let cfg = CorpusConfig { traces: 60, ..Default::default() };
        let c = generate_corpus(&t, &cfg);
        assert_eq!(c.len(), 60);
        for l in [Label::Goal, Label::Incomplete, Label::Dead] {
            assert_eq!(c.iter().filter(|e| e.label == l).count(), 20, "{l:?}");
        }
        assert_eq!(c, generate_corpus(&t, &cfg));
    }

    #[test]
    fn labels_agree_with_reference_machines() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for t in task_catalog() {
            let m = t.reference_machine().unwrap();
            for i in 0..500 {
                let ep = if i % 2 == 0 { random_walk(&t, &mut rng) } else { guided_walk(&t, 0.1, &mut rng) };
                let run = m.run_trace(&ep.observations).unwrap();
                let label = t.label(&ep.observations);
                assert_eq!(label == Label::Goal, run.final_state == m.accepting(), "{}", t.name());
                for o in &ep.observations {
                    assert!(o.0.is_subset(t.signature().all_atoms()));
                }
            }
        }
    }
}
