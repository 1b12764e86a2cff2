//! Exact minimal-machine search.
//!
//! States `0..m` are non-terminal and topologically ordered; `m` is the
//! accepting state and `m + 1` the optional rejecting state. States are
//! closed in order. When state `s` is closed, every trace that can ever reach
//! it is already known, together with the position at which it arrives (its
//! *entry*). Closing `s` picks its outgoing edges, which routes each entry to
//! a later state, to a terminal state, or leaves it at `s` for good.
//!
//! Two edge sets with the same routing are interchangeable for the rest of
//! the search, so each closure keeps only the cheapest set per routing.
//! Subproblems are memoised on the pending entries of the open states.
//! Conjunctions are grouped by where they first fire. Within a group, the
//! concrete conjunction only matters for mutual exclusivity with sibling
//! edges, and that is resolved last.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use super::{Label, LearnError, PoolLiteral, SearchConfig, Solution, TraceExample};
use crate::logic::{constraints_satisfiable, AtomSet, Constraint};

const NONE: u16 = u16::MAX;

/// Rough cap on the bytes held by all workers' caches. Past it a worker drops
/// its own caches; they only save recomputation.
const CACHE_BYTES: usize = 1 << 30;


/// Smallest (non-terminal count, literal count) not yet ruled out. Adding
/// examples never lowers the minimum, so later rounds resume from here.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct Floor {
    non_terminal: usize,
    literals: usize,
}

/// A trace arriving at a state: (trace index, first position in that state).
type Entry = (u16, u16);

struct Problem<'a> {
    pool: &'a [PoolLiteral],
    obs: Vec<Vec<AtomSet>>,
    labels: Vec<Label>,
    m: usize,
    acc: u8,
    rej: Option<u8>,
    kappa: usize,
    max_lits: usize,
    deadline: Instant,
    timed_out: AtomicBool,
    nodes: AtomicU64,
    cache_bytes: AtomicUsize,
}

/// Cheapest edge set for one routing of a state's entries.
#[derive(Debug, Clone)]
struct Choice {
    literals: usize,
    quantified: usize,
    edges: Vec<(u8, Vec<u16>)>,
    routed: Vec<(u8, Entry)>,
}

/// Best completion of the states from some index onwards.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Sub {
    literals: usize,
    quantified: usize,
    edges: Vec<Vec<(u8, Vec<u16>)>>,
}

enum Memo {
    Solved(Option<Arc<Sub>>),
    /// No completion within this many literals.
    Failed(usize),
}

/// A closure computed for some literal cap.
struct Built {
    cap: usize,
    choices: Arc<Vec<Choice>>,
    /// Whether the cap excluded any edge set.
    capped: bool,
}

#[derive(Default)]
struct Worker {
    memo: HashMap<(u8, Vec<Vec<Entry>>), Memo>,
    closures: HashMap<(u8, Vec<Entry>), Built>,
    classes: HashMap<Vec<Entry>, Arc<Classes>>,
    nodes: u64,
    bytes: usize,
}

impl Worker {
    fn clear(&mut self) -> usize {
        self.memo.clear();
        self.closures.clear();
        self.classes.clear();
        std::mem::take(&mut self.bytes)
    }
}

// Size estimates for the cache accounting, including map overhead.
fn entries_bytes(v: &[Entry]) -> usize {
    32 + 4 * v.len()
}

fn edges_bytes(edges: &[(u8, Vec<u16>)]) -> usize {
    edges.iter().map(|e| 40 + 2 * e.1.len()).sum()
}

fn choice_bytes(c: &Choice) -> usize {
    96 + edges_bytes(&c.edges) + 6 * c.routed.len()
}

fn classes_bytes(c: &Classes) -> usize {
    let conjs: usize = c.conjs.iter().map(|k| 80 + 2 * k.lits.len() + std::mem::size_of::<Constraint>() * k.cons.len()).sum();
    let classes: usize = c.classes.iter().map(|k| 56 + 2 * k.fire.len() + 8 * k.reps.len()).sum();
    conjs + classes
}

/// Capped copies of identical consecutive observations. In an acyclic machine
/// with `cap` states a run longer than `cap` behaves exactly like one of
/// length `cap`: transitions inside a run happen on its first copies only.
fn compress(obs: &[crate::logic::Observation], cap: usize) -> Vec<AtomSet> {
    let mut out: Vec<AtomSet> = Vec::with_capacity(obs.len());
    let mut run = 0;
    for o in obs {
        let a = o.atoms();
        if out.last() == Some(&a) {
            run += 1;
            if run >= cap {
                continue;
            }
        } else {
            run = 0;
        }
        out.push(a);
    }
    out
}

pub(crate) fn minimal(
    examples: &[&TraceExample],
    pool: &[PoolLiteral],
    cfg: &SearchConfig,
    with_reject: bool,
    deadline: Instant,
    floor: &mut Floor,
) -> Result<(Solution, usize, u64), LearnError> {
    let terminals = 1 + with_reject as usize;
    if examples.len() > u16::MAX as usize {
        return Err(LearnError::Bounds("too many examples".into()));
    }
    let mut nodes = 0u64;
    let first_m = floor.non_terminal.max(1);
    for m in first_m..=cfg.max_states.saturating_sub(terminals) {
        let cap = m + terminals;
        let obs: Vec<Vec<AtomSet>> = examples.iter().map(|e| compress(&e.observations, cap)).collect();
        if obs.iter().any(|o| o.len() >= NONE as usize) {
            return Err(LearnError::Bounds("trace too long".into()));
        }
        let prob = Problem {
            pool,
            obs,
            labels: examples.iter().map(|e| e.label).collect(),
            m,
            acc: m as u8,
            rej: with_reject.then_some(m as u8 + 1),
            kappa: cfg.kappa,
            max_lits: cfg.max_literals_per_edge,
            deadline,
            timed_out: AtomicBool::new(false),
            nodes: AtomicU64::new(0),
            cache_bytes: AtomicUsize::new(0),
        };
        let lmax: usize = (0..m).map(|s| (m - 1 - s + terminals) * cfg.kappa * cfg.max_literals_per_edge).sum();
        let start = if m == floor.non_terminal { floor.literals } else { 0 };
        let mut root = Root::new(&prob);
        for bound in start..=lmax {
            let (found, cut) = root.solve(bound);
            let spent = prob.nodes.swap(0, Ordering::Relaxed);
            nodes += spent;
            if prob.timed_out.load(Ordering::Relaxed) {
                return Err(LearnError::Timeout(std::time::Duration::ZERO));
            }
            if let Some(sub) = found {
                *floor = Floor { non_terminal: m, literals: sub.literals };
                log::debug!("found {} states, {} literals", m + terminals, sub.literals);
                let sol = Solution { literals: sub.literals, quantified: sub.quantified, edges: sub.edges.clone() };
                return Ok((sol, m, nodes));
            }
            if !cut {
                // Nothing was pruned for cost: no budget can succeed.
                break;
            }
        }
        log::debug!("no machine with {} states", m + terminals);
    }
    Err(LearnError::Unsat { max_states: cfg.max_states })
}

/// The root closure is split across workers. Memo entries are keyed by
/// content, so workers are reused across increasing budgets.
struct Root<'p, 'a> {
    prob: &'p Problem<'a>,
    initial: Vec<Vec<Entry>>,
    workers: Vec<Mutex<Worker>>,
    scratch: Worker,
}

impl<'p, 'a> Root<'p, 'a> {
    fn new(prob: &'p Problem<'a>) -> Self {
        let mut initial = vec![Vec::new(); prob.m];
        initial[0] = (0..prob.obs.len()).map(|t| (t as u16, 0u16)).collect();
        Root { prob, initial, workers: Vec::new(), scratch: Worker::default() }
    }

    fn solve(&mut self, budget: usize) -> (Option<Arc<Sub>>, bool) {
        let prob = self.prob;
        if prob.lower_bound(0, &self.initial) > budget {
            return (None, true);
        }
        if prob.cache_bytes.load(Ordering::Relaxed) > CACHE_BYTES / 2 {
            for w in self.workers.iter_mut().map(|w| w.get_mut().unwrap()).chain([&mut self.scratch]) {
                prob.cache_bytes.fetch_sub(w.clear(), Ordering::Relaxed);
            }
        }
        let (choices, mut cut) = prob.closure(&mut self.scratch, 0, &self.initial[0], budget);
        while self.workers.len() < choices.len() {
            self.workers.push(Mutex::new(Worker::default()));
        }
        let idx: Vec<usize> = (0..choices.len()).collect();
        let (initial, workers) = (&self.initial, &self.workers);
        let results = crate::par::map(&idx, |&i| {
            let mut w = workers[i].lock().unwrap();
            let (sub, cut) = prob.descend(&mut w, 0, initial, &choices[i], budget);
            (sub.map(|s| prob.combine(&choices[i], &s)), cut)
        });
        let mut best: Option<Sub> = None;
        for (r, c) in results {
            cut |= c;
            if let Some(s) = r {
                if best.as_ref().is_none_or(|b| s < *b) {
                    best = Some(s);
                }
            }
        }
        (best.map(Arc::new), cut)
    }
}

impl Problem<'_> {
    fn charge(&self, w: &mut Worker, bytes: usize) {
        w.bytes += bytes;
        if self.cache_bytes.fetch_add(bytes, Ordering::Relaxed) + bytes > CACHE_BYTES {
            self.cache_bytes.fetch_sub(w.clear(), Ordering::Relaxed);
        }
    }

    fn tick(&self, w: &mut Worker) -> bool {
        w.nodes += 1;
        if w.nodes.is_multiple_of(256) {
            self.nodes.fetch_add(256, Ordering::Relaxed);
            if Instant::now() > self.deadline {
                self.timed_out.store(true, Ordering::Relaxed);
            }
        }
        self.timed_out.load(Ordering::Relaxed)
    }

    /// Deadline check for loops that do not own a worker.
    fn expired(&self, counter: &mut u32) -> bool {
        *counter = counter.wrapping_add(1);
        if (*counter).is_multiple_of(1024) && Instant::now() > self.deadline {
            self.timed_out.store(true, Ordering::Relaxed);
        }
        self.timed_out.load(Ordering::Relaxed)
    }

    fn live(&self, e: Entry) -> bool {
        (e.1 as usize) < self.obs[e.0 as usize].len()
    }

    fn needs_exit(&self, e: Entry) -> bool {
        self.live(e) && self.labels[e.0 as usize] != Label::Incomplete
    }

    /// Literals still needed by states `from..m`: every state with pending
    /// GOAL or DEAD traces needs an outgoing edge, and every state nothing
    /// points to yet needs an incoming one.
    fn lower_bound(&self, from: usize, pending: &[Vec<Entry>]) -> usize {
        let mut need_out = 0;
        let mut unreferenced = 0;
        for (j, p) in pending.iter().enumerate().skip(from) {
            if p.iter().any(|&e| self.needs_exit(e)) {
                need_out += 1;
            }
            if j > from && p.is_empty() {
                unreferenced += 1;
            }
        }
        need_out.max(unreferenced)
    }

    fn route(&self, pending: &[Vec<Entry>], s: usize, c: &Choice) -> Vec<Vec<Entry>> {
        let mut next = pending.to_vec();
        next[s].clear();
        for &(t, e) in &c.routed {
            next[t as usize].push(e);
        }
        for p in next.iter_mut().skip(s + 1) {
            p.sort_unstable();
        }
        next
    }

    fn combine(&self, c: &Choice, sub: &Sub) -> Sub {
        let mut edges = Vec::with_capacity(sub.edges.len() + 1);
        edges.push(c.edges.clone());
        edges.extend(sub.edges.iter().cloned());
        Sub { literals: c.literals + sub.literals, quantified: c.quantified + sub.quantified, edges }
    }

    /// Best completion of states `s..m` using at most `budget` literals, and
    /// whether anything was pruned for cost.
    fn solve(&self, w: &mut Worker, s: usize, pending: &[Vec<Entry>], budget: usize) -> (Option<Arc<Sub>>, bool) {
        if s == self.m {
            return (Some(Arc::new(Sub { literals: 0, quantified: 0, edges: Vec::new() })), false);
        }
        if self.tick(w) {
            return (None, true);
        }
        let key = (s as u8, pending[s..].to_vec());
        match w.memo.get(&key) {
            Some(Memo::Solved(Some(sub))) => {
                return if sub.literals <= budget { (Some(sub.clone()), false) } else { (None, true) };
            }
            Some(Memo::Solved(None)) => return (None, false),
            Some(Memo::Failed(b)) if budget <= *b => return (None, true),
            _ => {}
        }
        let key_bytes = 64 + key.1.iter().map(|p| entries_bytes(p)).sum::<usize>();
        if pending[s].is_empty() {
            w.memo.insert(key, Memo::Solved(None));
            self.charge(w, key_bytes);
            return (None, false);
        }
        if self.lower_bound(s, pending) > budget {
            return (None, true);
        }
        let rest_need = pending[s + 1..].iter().filter(|p| p.iter().any(|&e| self.needs_exit(e))).count();
        let (choices, mut cut) = self.closure(w, s, &pending[s], budget - rest_need);
        let mut best: Option<Sub> = None;
        for c in choices.iter() {
            if self.timed_out.load(Ordering::Relaxed) {
                return (None, true);
            }
            if let Some(b) = &best {
                if c.literals > b.literals {
                    break;
                }
            }
            let (sub, sub_cut) = self.descend(w, s, pending, c, best.as_ref().map_or(budget, |b| b.literals.min(budget)));
            cut |= sub_cut;
            if let Some(sub) = sub {
                let cand = self.combine(c, &sub);
                if best.as_ref().is_none_or(|b| cand < *b) {
                    best = Some(cand);
                }
            }
        }
        if self.timed_out.load(Ordering::Relaxed) {
            return (None, true);
        }
        let best = best.map(Arc::new);
        let sub_bytes = best.as_ref().map_or(0, |b| 64 + b.edges.iter().map(|e| 24 + edges_bytes(e)).sum::<usize>());
        let entry = match (&best, cut) {
            (Some(b), _) => Memo::Solved(Some(b.clone())),
            (None, false) => Memo::Solved(None),
            (None, true) => Memo::Failed(budget),
        };
        w.memo.insert(key, entry);
        self.charge(w, key_bytes + sub_bytes);
        (best, cut)
    }

    /// Applies a closure choice at `s` and solves the remaining states.
    fn descend(&self, w: &mut Worker, s: usize, pending: &[Vec<Entry>], c: &Choice, budget: usize) -> (Option<Arc<Sub>>, bool) {
        if c.literals > budget {
            return (None, true);
        }
        let next = self.route(pending, s, c);
        if s + 1 < self.m && next[s + 1].is_empty() {
            // Only earlier states can point at `s + 1`.
            return (None, false);
        }
        if c.literals + self.lower_bound(s + 1, &next) > budget {
            return (None, true);
        }
        self.solve(w, s + 1, &next, budget - c.literals)
    }

    fn targets(&self, s: usize) -> Vec<u8> {
        let mut t: Vec<u8> = (s as u8 + 1..self.m as u8).collect();
        t.push(self.acc);
        if let Some(r) = self.rej {
            t.push(r);
        }
        t
    }

    fn entry_ok(&self, e: Entry, exit: Option<(u8, u16)>) -> bool {
        let label = self.labels[e.0 as usize];
        match exit {
            None => label == Label::Incomplete,
            Some((t, _)) if t == self.acc => label == Label::Goal,
            Some((t, _)) if Some(t) == self.rej => label == Label::Dead,
            Some((_, pos)) => (pos as usize + 1) < self.obs[e.0 as usize].len() || label == Label::Incomplete,
        }
    }

    /// All routings of `entries` reachable by edge sets of at most `cap`
    /// literals, each with its cheapest edge set, cheapest first; plus
    /// whether the cap excluded anything.
    fn closure(&self, w: &mut Worker, s: usize, entries: &[Entry], cap: usize) -> (Arc<Vec<Choice>>, bool) {
        let key = (s as u8, entries.to_vec());
        if let Some(b) = w.closures.get(&key) {
            if b.cap >= cap {
                let over = b.choices.iter().any(|c| c.literals > cap);
                if !over {
                    return (b.choices.clone(), b.capped);
                }
                let kept: Vec<Choice> = b.choices.iter().filter(|c| c.literals <= cap).cloned().collect();
                return (Arc::new(kept), true);
            }
            if !b.capped {
                return (b.choices.clone(), false);
            }
        }
        let (list, capped) = Closure::build(self, s, entries, cap, w);
        let list = Arc::new(list);
        let bytes = 96 + entries_bytes(&key.1) + list.iter().map(choice_bytes).sum::<usize>();
        // A rebuild at a higher cap replaces the old entry; its bytes stay
        // counted until the next clear, which only makes clearing earlier.
        w.closures.insert(key, Built { cap, choices: list.clone(), capped });
        self.charge(w, bytes);
        (list, capped)
    }
}

/// One candidate conjunction.
struct Conj {
    lits: Vec<u16>,
    cons: Vec<Constraint>,
    quantified: usize,
}

struct Class {
    /// First position at which the conjunction holds, per live entry.
    fire: Vec<u16>,
    reps: Vec<usize>,
}

struct Opt {
    class: usize,
    target: u8,
    min_lits: usize,
}

/// Conjunctions over some live entries, grouped by where they first fire.
/// Independent of the state and of the literal cap.
struct Classes {
    conjs: Vec<Conj>,
    classes: Vec<Class>,
}

struct Closure<'c, 'a> {
    prob: &'c Problem<'a>,
    live: Vec<Entry>,
    conjs: Arc<Classes>,
    opts: Vec<Opt>,
    /// `suffix_min[k][e]`: earliest fire on entry `e` among options `k..`.
    suffix_min: Vec<Vec<u16>>,
    excl: HashMap<(usize, usize), bool>,
    effects: HashMap<Vec<u32>, Choice>,
    cap: usize,
    capped: bool,
    steps: u32,
}

impl Classes {
    fn build(prob: &Problem, live: &[Entry]) -> Classes {
        let mut out = Classes { conjs: Vec::new(), classes: Vec::new() };
        let pool = prob.pool;
        // Concatenated position bitsets, one block per live entry.
        let mut offsets = Vec::with_capacity(live.len());
        let mut total = 0usize;
        for &(t, p) in live {
            offsets.push(total);
            total += prob.obs[t as usize].len() - p as usize;
        }
        let words = total.div_ceil(64);
        let mut lit_bits = vec![vec![0u64; words]; pool.len()];
        for (k, &(t, p)) in live.iter().enumerate() {
            let obs = &prob.obs[t as usize];
            let mut seen = AtomSet::EMPTY;
            for (i, &latest) in obs[p as usize..].iter().enumerate() {
                seen = seen.union(latest);
                let bit = offsets[k] + i;
                for (li, pl) in pool.iter().enumerate() {
                    if pl.constraint.holds(latest, seen) {
                        lit_bits[li][bit / 64] |= 1 << (bit % 64);
                    }
                }
            }
        }
        let mut class_of: HashMap<Vec<u16>, usize> = HashMap::new();
        let mut stack_lits = Vec::new();
        let mut stack_cons = Vec::new();
        let max_lits = prob.max_lits;
        #[allow(clippy::too_many_arguments)]
        fn gen(
            c: &mut Classes,
            prob: &Problem,
            live: &[Entry],
            start: usize,
            bits: &[u64],
            lits: &mut Vec<u16>,
            cons: &mut Vec<Constraint>,
            lit_bits: &[Vec<u64>],
            offsets: &[usize],
            max_lits: usize,
            class_of: &mut HashMap<Vec<u16>, usize>,
        ) {
            let pool = prob.pool;
            for j in start..pool.len() {
                if lits.iter().any(|&l| pool[l as usize].negation == j) {
                    continue;
                }
                let nb: Vec<u64> = if lits.is_empty() {
                    lit_bits[j].clone()
                } else {
                    bits.iter().zip(&lit_bits[j]).map(|(a, b)| a & b).collect()
                };
                if nb.iter().all(|&x| x == 0) {
                    continue;
                }
                cons.push(pool[j].constraint);
                if !constraints_satisfiable(cons) {
                    cons.pop();
                    continue;
                }
                lits.push(j as u16);
                let fire: Vec<u16> = live
                    .iter()
                    .enumerate()
                    .map(|(k, &(t, p))| {
                        let len = prob.obs[t as usize].len() - p as usize;
                        first_bit(&nb, offsets[k], len).map_or(NONE, |i| p + i as u16)
                    })
                    .collect();
                let id = c.conjs.len();
                let quantified = lits.iter().filter(|&&l| pool[l as usize].quantified).count();
                c.conjs.push(Conj { lits: lits.clone(), cons: cons.clone(), quantified });
                let next = c.classes.len();
                let cls = *class_of.entry(fire.clone()).or_insert(next);
                if cls == next {
                    c.classes.push(Class { fire, reps: Vec::new() });
                }
                c.classes[cls].reps.push(id);
                if lits.len() < max_lits {
                    gen(c, prob, live, j + 1, &nb, lits, cons, lit_bits, offsets, max_lits, class_of);
                }
                lits.pop();
                cons.pop();
            }
        }
        let ones = vec![u64::MAX; words];
        gen(&mut out, prob, live, 0, &ones, &mut stack_lits, &mut stack_cons, &lit_bits, &offsets, max_lits, &mut class_of);
        let conjs = &out.conjs;
        for cl in &mut out.classes {
            cl.reps.sort_by(|&a, &b| {
                let (x, y) = (&conjs[a], &conjs[b]);
                (x.lits.len(), x.quantified, &x.lits).cmp(&(y.lits.len(), y.quantified, &y.lits))
            });
        }
        // Deterministic class order: cheapest representative first.
        let mut order: Vec<usize> = (0..out.classes.len()).collect();
        order.sort_by(|&a, &b| {
            let (x, y) = (&conjs[out.classes[a].reps[0]], &conjs[out.classes[b].reps[0]]);
            (x.lits.len(), x.quantified, &x.lits).cmp(&(y.lits.len(), y.quantified, &y.lits))
        });
        let mut old: Vec<Option<Class>> = std::mem::take(&mut out.classes).into_iter().map(Some).collect();
        out.classes = order.into_iter().map(|i| old[i].take().unwrap()).collect();
        out
    }

}

impl<'c, 'a> Closure<'c, 'a> {
    fn build(prob: &'c Problem<'a>, s: usize, entries: &[Entry], cap: usize, w: &mut Worker) -> (Vec<Choice>, bool) {
        // Entries that already ended here were validated when routed.
        let live: Vec<Entry> = entries.iter().copied().filter(|&e| prob.live(e)).collect();
        if live.is_empty() {
            return (vec![Choice { literals: 0, quantified: 0, edges: Vec::new(), routed: Vec::new() }], false);
        }
        let classes = match w.classes.get(&live) {
            Some(c) => c.clone(),
            None => {
                let c = Arc::new(Classes::build(prob, &live));
                w.classes.insert(live.clone(), c.clone());
                prob.charge(w, entries_bytes(&live) + classes_bytes(&c));
                c
            }
        };
        let mut c = Closure {
            prob,
            live,
            conjs: classes,
            opts: Vec::new(),
            suffix_min: Vec::new(),
            excl: HashMap::new(),
            effects: HashMap::new(),
            cap,
            capped: false,
            steps: 0,
        };
        c.build_options(s);
        let n = c.live.len();
        let mut st = DfsState {
            best_pos: vec![NONE; n],
            best_opt: vec![u32::MAX; n],
            tie: vec![false; n],
            chosen: Vec::new(),
            per_target: vec![0; prob.m + 2],
            lits: 0,
        };
        c.dfs(0, &mut st, w);
        let mut out: Vec<Choice> = c.effects.into_values().collect();
        out.sort_by(|a, b| (a.literals, a.quantified, &a.edges).cmp(&(b.literals, b.quantified, &b.edges)));
        (out, c.capped)
    }

    fn build_options(&mut self, s: usize) {
        let targets = self.prob.targets(s);
        for (ci, cl) in self.conjs.classes.iter().enumerate() {
            let min_lits = self.conjs.conjs[cl.reps[0]].lits.len();
            for &t in &targets {
                self.opts.push(Opt { class: ci, target: t, min_lits });
            }
        }
        let n = self.live.len();
        let mut suffix = vec![vec![NONE; n]; self.opts.len() + 1];
        for k in (0..self.opts.len()).rev() {
            let fire = &self.conjs.classes[self.opts[k].class].fire;
            let (head, tail) = suffix.split_at_mut(k + 1);
            for e in 0..n {
                head[k][e] = tail[0][e].min(fire[e]);
            }
        }
        self.suffix_min = suffix;
    }

    fn dfs(&mut self, k: usize, st: &mut DfsState, w: &mut Worker) {
        if self.prob.tick(w) {
            return;
        }
        self.record(st);
        let n = self.live.len();
        for o in k..self.opts.len() {
            let opt = &self.opts[o];
            if st.per_target[opt.target as usize] >= self.prob.kappa {
                continue;
            }
            if st.lits + opt.min_lits > self.cap {
                self.capped = true;
                continue;
            }
            let fire = &self.conjs.classes[opt.class].fire;
            let mut next = st.clone();
            let mut conflict = false;
            for e in 0..n {
                let f = fire[e];
                if f == NONE {
                    continue;
                }
                if f < next.best_pos[e] {
                    next.best_pos[e] = f;
                    next.best_opt[e] = o as u32;
                    next.tie[e] = false;
                } else if f == next.best_pos[e] {
                    if self.opts[next.best_opt[e] as usize].target != opt.target {
                        conflict = true;
                        break;
                    }
                    next.tie[e] = true;
                }
            }
            if conflict {
                continue;
            }
            next.chosen.push(o);
            // Every chosen edge must still be the unique first edge somewhere;
            // adding edges can only take that away.
            let all_first = next.chosen.iter().all(|&c| (0..n).any(|e| next.best_opt[e] == c as u32 && !next.tie[e]));
            if !all_first {
                continue;
            }
            next.per_target[opt.target as usize] += 1;
            next.lits += opt.min_lits;
            // Entries in a bad spot need an earlier firing edge from the rest.
            let mut fixable = true;
            let mut needs_more = false;
            for e in 0..n {
                let exit = (next.best_pos[e] != NONE)
                    .then(|| (self.opts[next.best_opt[e] as usize].target, next.best_pos[e]));
                if !self.prob.entry_ok(self.live[e], exit) {
                    needs_more = true;
                    if self.suffix_min[o + 1][e] >= next.best_pos[e] {
                        fixable = false;
                        break;
                    }
                }
            }
            if !fixable {
                continue;
            }
            if needs_more && next.lits >= self.cap {
                self.capped = true;
                continue;
            }
            self.dfs(o + 1, &mut next, w);
        }
    }

    /// Registers the current edge set if it routes every entry acceptably.
    fn record(&mut self, st: &DfsState) {
        let n = self.live.len();
        let mut effect = Vec::with_capacity(n);
        for e in 0..n {
            let exit = (st.best_pos[e] != NONE).then(|| (self.opts[st.best_opt[e] as usize].target, st.best_pos[e]));
            if !self.prob.entry_ok(self.live[e], exit) {
                return;
            }
            effect.push(match exit {
                None => u32::MAX,
                Some((t, _)) if t as usize >= self.prob.m => (t as u32) << 16,
                Some((t, p)) => ((t as u32) << 16) | p as u32,
            });
        }
        let bound = self.effects.get(&effect).map(|c| (c.literals, c.quantified));
        if let Some((l, _)) = bound {
            if st.lits > l {
                return;
            }
        }
        let Some((lits, quantified, edges)) = self.assign(&st.chosen, bound) else {
            return;
        };
        if let Some(old) = self.effects.get(&effect) {
            if (old.literals, old.quantified, &old.edges) <= (lits, quantified, &edges) {
                return;
            }
        }
        let mut routed: Vec<(u8, Entry)> = Vec::new();
        for e in 0..n {
            if st.best_pos[e] == NONE {
                continue;
            }
            let t = self.opts[st.best_opt[e] as usize].target;
            if (t as usize) < self.prob.m {
                routed.push((t, (self.live[e].0, st.best_pos[e] + 1)));
            }
        }
        self.effects.insert(effect, Choice { literals: lits, quantified, edges, routed });
    }

    fn exclusive(&mut self, a: usize, b: usize) -> bool {
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(&x) = self.excl.get(&key) {
            return x;
        }
        let mut cons = self.conjs.conjs[a].cons.clone();
        cons.extend_from_slice(&self.conjs.conjs[b].cons);
        let x = !constraints_satisfiable(&cons);
        self.excl.insert(key, x);
        x
    }

    /// Cheapest choice of one conjunction per chosen (class, target) such that
    /// edges to distinct targets are mutually exclusive.
    fn assign(&mut self, chosen: &[usize], bound: Option<(usize, usize)>) -> Option<(usize, usize, Vec<(u8, Vec<u16>)>)> {
        if chosen.is_empty() {
            return Some((0, 0, Vec::new()));
        }
        let edges: Vec<(usize, u8)> = chosen.iter().map(|&o| (self.opts[o].class, self.opts[o].target)).collect();
        // Remaining minimum literals from index i on.
        let mut rest_min = vec![0usize; edges.len() + 1];
        for i in (0..edges.len()).rev() {
            rest_min[i] = rest_min[i + 1] + self.conjs.conjs[self.conjs.classes[edges[i].0].reps[0]].lits.len();
        }
        let mut best: Option<(usize, usize, Vec<(u8, Vec<u16>)>)> = None;
        let limit = bound.map_or(self.cap, |(l, _)| l.min(self.cap));
        let mut picked: Vec<usize> = Vec::with_capacity(edges.len());
        self.assign_rec(&edges, &rest_min, 0, 0, 0, limit, &mut picked, &mut best);
        best
    }

    #[allow(clippy::too_many_arguments)]
    fn assign_rec(
        &mut self,
        edges: &[(usize, u8)],
        rest_min: &[usize],
        i: usize,
        lits: usize,
        quant: usize,
        limit: usize,
        picked: &mut Vec<usize>,
        best: &mut Option<(usize, usize, Vec<(u8, Vec<u16>)>)>,
    ) {
        if i == edges.len() {
            let mut key: Vec<(u8, Vec<u16>)> =
                picked.iter().zip(edges).map(|(&c, &(_, t))| (t, self.conjs.conjs[c].lits.clone())).collect();
            key.sort();
            let cand = (lits, quant, key);
            if best.as_ref().is_none_or(|b| cand < *b) {
                *best = Some(cand);
            }
            return;
        }
        if self.prob.expired(&mut self.steps) {
            return;
        }
        let (cls, target) = edges[i];
        let n_reps = self.conjs.classes[cls].reps.len();
        for r in 0..n_reps {
            let c = self.conjs.classes[cls].reps[r];
            let l = self.conjs.conjs[c].lits.len();
            let q = self.conjs.conjs[c].quantified;
            let total = lits + l + rest_min[i + 1];
            if total > limit {
                if total > self.cap {
                    self.capped = true;
                }
                // Representatives are sorted by size.
                break;
            }
            if let Some(b) = best {
                if (total, quant + q) > (b.0, b.1) {
                    if total > b.0 {
                        break;
                    }
                    continue;
                }
            }
            let ok = (0..i).all(|j| edges[j].1 == target || self.exclusive(picked[j], c));
            if !ok {
                continue;
            }
            picked.push(c);
            self.assign_rec(edges, rest_min, i + 1, lits + l, quant + q, limit, picked, best);
            picked.pop();
        }
    }
}

#[derive(Clone)]
struct DfsState {
    best_pos: Vec<u16>,
    best_opt: Vec<u32>,
    tie: Vec<bool>,
    chosen: Vec<usize>,
    per_target: Vec<usize>,
    lits: usize,
}

fn first_bit(bits: &[u64], start: usize, len: usize) -> Option<usize> {
    let end = start + len;
    let mut i = start;
    while i < end {
        let w = i / 64;
        let shift = i % 64;
        let word = bits[w] >> shift;
        if word != 0 {
            let pos = i + word.trailing_zeros() as usize;
            return (pos < end).then_some(pos - start);
        }
        i = (w + 1) * 64;
    }
    None
}
