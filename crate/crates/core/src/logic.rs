//! First-order language over unary predicates and propositions.
//!
//! A [`Signature`] fixes the constants, the predicates and which ground atoms
//! exist. Every ground atom of the Herbrand base gets a dense [`AtomId`], so
//! observations and buffers are plain bitsets ([`AtomSet`]).
//!
//! Satisfiability is evaluated against a [`Buffer`]: propositions, ground
//! atoms and existential atoms look at the latest observation only, while
//! universal atoms look at the union of everything seen since the machine
//! last changed state.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

/// Upper bound on the Herbrand base size (one bit per atom).
pub const MAX_ATOMS: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LogicError {
    #[error("empty name")]
    EmptyName,
    #[error("duplicate constant `{0}`")]
    DuplicateConstant(String),
    #[error("duplicate predicate `{0}`")]
    DuplicatePredicate(String),
    #[error("predicate `{name}` has unsupported arity {arity} (only 0 and 1 are allowed)")]
    UnsupportedArity { name: String, arity: u8 },
    #[error("unknown constant `{0}`")]
    UnknownConstant(String),
    #[error("unknown predicate `{0}`")]
    UnknownPredicate(String),
    #[error("proposition `{0}` cannot have members")]
    PropositionMembership(String),
    #[error("`{0}` is not a unary predicate")]
    NotUnary(String),
    #[error("`{0}` is not a proposition")]
    NotProposition(String),
    #[error("`{0}` is not in the Herbrand base")]
    NotInHerbrandBase(String),
    #[error("Herbrand base has {0} atoms, more than the supported {MAX_ATOMS}")]
    TooManyAtoms(usize),
    #[error("formula is not a conjunction of literals: {0}")]
    NotLiteralConjunction(String),
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, LogicError>;

/// Index of a ground atom inside its signature's Herbrand base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AtomId(pub u8);

/// A set of ground atoms of one signature.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AtomSet(pub u128);

impl AtomSet {
    pub const EMPTY: AtomSet = AtomSet(0);

    pub fn singleton(id: AtomId) -> Self {
        AtomSet(1u128 << id.0)
    }

    pub fn contains(self, id: AtomId) -> bool {
        self.0 >> id.0 & 1 == 1
    }

    pub fn insert(&mut self, id: AtomId) {
        self.0 |= 1u128 << id.0;
    }

    pub fn union(self, other: AtomSet) -> AtomSet {
        AtomSet(self.0 | other.0)
    }

    pub fn intersection(self, other: AtomSet) -> AtomSet {
        AtomSet(self.0 & other.0)
    }

    pub fn difference(self, other: AtomSet) -> AtomSet {
        AtomSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: AtomSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersects(self, other: AtomSet) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = AtomId> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                return None;
            }
            let i = bits.trailing_zeros();
            bits &= bits - 1;
            Some(AtomId(i as u8))
        })
    }
}

impl FromIterator<AtomId> for AtomSet {
    fn from_iter<I: IntoIterator<Item = AtomId>>(iter: I) -> Self {
        let mut s = AtomSet::EMPTY;
        for id in iter {
            s.insert(id);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    pub name: String,
    pub arity: u8,
}

/// A proposition (`argument == None`) or a unary predicate applied to a constant.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroundAtom {
    pub predicate: String,
    pub argument: Option<String>,
}

impl GroundAtom {
    pub fn proposition(name: &str) -> Self {
        GroundAtom { predicate: name.to_string(), argument: None }
    }

    pub fn unary(predicate: &str, constant: &str) -> Self {
        GroundAtom { predicate: predicate.to_string(), argument: Some(constant.to_string()) }
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.argument {
            Some(c) => write!(f, "{}({})", self.predicate, c),
            None => f.write_str(&self.predicate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quantifier {
    Exists,
    Forall,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuantifiedAtom {
    pub quantifier: Quantifier,
    pub predicate: String,
}

impl QuantifiedAtom {
    pub fn exists(predicate: &str) -> Self {
        QuantifiedAtom { quantifier: Quantifier::Exists, predicate: predicate.to_string() }
    }

    pub fn forall(predicate: &str) -> Self {
        QuantifiedAtom { quantifier: Quantifier::Forall, predicate: predicate.to_string() }
    }
}

impl fmt::Display for QuantifiedAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = match self.quantifier {
            Quantifier::Exists => "exists",
            Quantifier::Forall => "forall",
        };
        write!(f, "{q} X. {}(X)", self.predicate)
    }
}

/// Signature: constants, predicates of arity 0 or 1, and the membership
/// relation that says which ground atoms exist.
#[derive(Debug, Clone)]
pub struct Signature {
    constants: Vec<String>,
    predicates: Vec<Predicate>,
    membership: BTreeMap<String, Vec<String>>,
    atoms: Vec<GroundAtom>,
    atom_index: HashMap<GroundAtom, AtomId>,
    instance_masks: HashMap<String, AtomSet>,
}

impl PartialEq for Signature {
    fn eq(&self, other: &Self) -> bool {
        self.constants == other.constants
            && self.predicates == other.predicates
            && self.membership == other.membership
    }
}

impl Eq for Signature {}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        Err(LogicError::EmptyName)
    } else {
        Ok(())
    }
}

impl Signature {
    /// Builds a signature. `membership` maps each unary predicate to the
    /// constants it holds for; constants are stored in `constants` order.
    pub fn new(
        constants: Vec<String>,
        predicates: Vec<Predicate>,
        membership: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let mut const_pos = HashMap::new();
        for (i, c) in constants.iter().enumerate() {
            check_name(c)?;
            if const_pos.insert(c.clone(), i).is_some() {
                return Err(LogicError::DuplicateConstant(c.clone()));
            }
        }
        let mut seen_preds = HashMap::new();
        for p in &predicates {
            check_name(&p.name)?;
            if p.arity > 1 {
                return Err(LogicError::UnsupportedArity { name: p.name.clone(), arity: p.arity });
            }
            if seen_preds.insert(p.name.clone(), p.arity).is_some() {
                return Err(LogicError::DuplicatePredicate(p.name.clone()));
            }
        }
        let mut normalized = BTreeMap::new();
        for (pred, members) in membership {
            match seen_preds.get(&pred) {
                None => return Err(LogicError::UnknownPredicate(pred)),
                Some(0) => return Err(LogicError::PropositionMembership(pred)),
                Some(_) => {}
            }
            let mut ms = Vec::with_capacity(members.len());
            for m in members {
                let pos = *const_pos.get(&m).ok_or_else(|| LogicError::UnknownConstant(m.clone()))?;
                ms.push((pos, m));
            }
            ms.sort();
            ms.dedup();
            normalized.insert(pred, ms.into_iter().map(|(_, m)| m).collect::<Vec<_>>());
        }

        let mut atoms = Vec::new();
        let mut instance_masks = HashMap::new();
        for p in &predicates {
            if p.arity == 0 {
                atoms.push(GroundAtom::proposition(&p.name));
            } else {
                let mut mask = AtomSet::EMPTY;
                for c in normalized.get(&p.name).into_iter().flatten() {
                    if atoms.len() >= MAX_ATOMS {
                        return Err(LogicError::TooManyAtoms(atoms.len() + 1));
                    }
                    mask.insert(AtomId(atoms.len() as u8));
                    atoms.push(GroundAtom::unary(&p.name, c));
                }
                instance_masks.insert(p.name.clone(), mask);
            }
            if atoms.len() > MAX_ATOMS {
                return Err(LogicError::TooManyAtoms(atoms.len()));
            }
        }
        let atom_index = atoms.iter().enumerate().map(|(i, a)| (a.clone(), AtomId(i as u8))).collect();
        Ok(Signature { constants, predicates, membership: normalized, atoms, atom_index, instance_masks })
    }

    pub fn builder() -> SignatureBuilder {
        SignatureBuilder::default()
    }

    pub fn constants(&self) -> &[String] {
        &self.constants
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn membership(&self) -> &BTreeMap<String, Vec<String>> {
        &self.membership
    }

    pub fn arity(&self, predicate: &str) -> Option<u8> {
        self.predicates.iter().find(|p| p.name == predicate).map(|p| p.arity)
    }

    pub fn unary_predicates(&self) -> impl Iterator<Item = &str> {
        self.predicates.iter().filter(|p| p.arity == 1).map(|p| p.name.as_str())
    }

    pub fn propositions(&self) -> impl Iterator<Item = &str> {
        self.predicates.iter().filter(|p| p.arity == 0).map(|p| p.name.as_str())
    }

    /// Number of atoms in the Herbrand base.
    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom(&self, id: AtomId) -> &GroundAtom {
        &self.atoms[id.0 as usize]
    }

    pub fn atom_id(&self, atom: &GroundAtom) -> Result<AtomId> {
        self.atom_index
            .get(atom)
            .copied()
            .ok_or_else(|| LogicError::NotInHerbrandBase(atom.to_string()))
    }

    /// All ground instances of a unary predicate as a bitset.
    pub fn instances(&self, predicate: &str) -> Result<AtomSet> {
        match self.arity(predicate) {
            None => Err(LogicError::UnknownPredicate(predicate.to_string())),
            Some(0) => Err(LogicError::NotUnary(predicate.to_string())),
            Some(_) => Ok(self.instance_masks.get(predicate).copied().unwrap_or_default()),
        }
    }

    pub fn all_atoms(&self) -> AtomSet {
        (0..self.atoms.len()).map(|i| AtomId(i as u8)).collect()
    }

    pub fn atoms_of(&self, set: AtomSet) -> Vec<&GroundAtom> {
        set.iter().map(|id| self.atom(id)).collect()
    }

    /// Parses `p(oK)` or `p` into an atom id.
    pub fn parse_atom(&self, text: &str) -> Result<AtomId> {
        let text = text.trim();
        let atom = match text.find('(') {
            Some(open) => {
                let close = text.rfind(')').filter(|c| *c > open).ok_or_else(|| LogicError::Syntax {
                    pos: text.len(),
                    msg: format!("missing `)` in `{text}`"),
                })?;
                GroundAtom::unary(text[..open].trim(), text[open + 1..close].trim())
            }
            None => GroundAtom::proposition(text),
        };
        self.atom_id(&atom)
    }

    pub fn format_set(&self, set: AtomSet) -> String {
        set.iter().map(|id| self.atom(id).to_string()).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Default)]
pub struct SignatureBuilder {
    constants: Vec<String>,
    predicates: Vec<Predicate>,
    membership: BTreeMap<String, Vec<String>>,
}

impl SignatureBuilder {
    pub fn constant(mut self, name: &str) -> Self {
        self.constants.push(name.to_string());
        self
    }

    pub fn proposition(mut self, name: &str) -> Self {
        self.predicates.push(Predicate { name: name.to_string(), arity: 0 });
        self
    }

    /// Declares a unary predicate; unknown member constants are added to the
    /// constant list on the fly.
    pub fn unary<'a>(mut self, name: &str, members: impl IntoIterator<Item = &'a str>) -> Self {
        self.predicates.push(Predicate { name: name.to_string(), arity: 1 });
        let ms: Vec<String> = members.into_iter().map(str::to_string).collect();
        for m in &ms {
            if !self.constants.contains(m) {
                self.constants.push(m.clone());
            }
        }
        self.membership.insert(name.to_string(), ms);
        self
    }

    pub fn build(self) -> Result<Signature> {
        Signature::new(self.constants, self.predicates, self.membership)
    }
}

/// Herbrand base in canonical order (predicate declaration order, then
/// constant order).
pub fn herbrand_base(sig: &Signature) -> Vec<GroundAtom> {
    sig.atoms.clone()
}

pub fn ground_instances(q: &QuantifiedAtom, sig: &Signature) -> Result<Vec<GroundAtom>> {
    let mask = sig.instances(&q.predicate)?;
    Ok(mask.iter().map(|id| sig.atom(id).clone()).collect())
}

/// The set of atoms emitted by the labelling function at one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Observation(pub AtomSet);

impl Observation {
    pub fn empty() -> Self {
        Observation(AtomSet::EMPTY)
    }

    pub fn from_atoms<'a>(sig: &Signature, atoms: impl IntoIterator<Item = &'a GroundAtom>) -> Result<Self> {
        let mut s = AtomSet::EMPTY;
        for a in atoms {
            s.insert(sig.atom_id(a)?);
        }
        Ok(Observation(s))
    }

    /// Parses a comma-separated atom list; the empty string is the empty observation.
    pub fn parse(text: &str, sig: &Signature) -> Result<Self> {
        let mut s = AtomSet::EMPTY;
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            s.insert(sig.parse_atom(part)?);
        }
        Ok(Observation(s))
    }

    pub fn atoms(self) -> AtomSet {
        self.0
    }

    pub fn format(self, sig: &Signature) -> String {
        sig.format_set(self.0)
    }
}

/// Observations accumulated since the last machine-state change, stored as
/// the latest observation plus the union of all of them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Buffer {
    latest: AtomSet,
    seen: AtomSet,
    length: usize,
}

impl Buffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_observations<'a>(obs: impl IntoIterator<Item = &'a Observation>) -> Self {
        let mut b = Buffer::new();
        for o in obs {
            b.push(*o);
        }
        b
    }

    pub fn push(&mut self, obs: Observation) {
        self.latest = obs.0;
        self.seen = self.seen.union(obs.0);
        self.length += 1;
    }

    pub fn clear(&mut self) {
        *self = Buffer::default();
    }

    pub fn latest(&self) -> AtomSet {
        self.latest
    }

    pub fn seen(&self) -> AtomSet {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Atom {
    /// A proposition or a ground atom.
    Ground(GroundAtom),
    Quantified(QuantifiedAtom),
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Ground(g) => g.fmt(f),
            Atom::Quantified(q) => q.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(Atom),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn prop(name: &str) -> Self {
        Formula::Atom(Atom::Ground(GroundAtom::proposition(name)))
    }

    pub fn ground(predicate: &str, constant: &str) -> Self {
        Formula::Atom(Atom::Ground(GroundAtom::unary(predicate, constant)))
    }

    pub fn exists(predicate: &str) -> Self {
        Formula::Atom(Atom::Quantified(QuantifiedAtom::exists(predicate)))
    }

    pub fn forall(predicate: &str) -> Self {
        Formula::Atom(Atom::Quantified(QuantifiedAtom::forall(predicate)))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(self) -> Self {
        Formula::Not(Box::new(self))
    }

    pub fn and(self, other: Formula) -> Self {
        Formula::And(Box::new(self), Box::new(other))
    }

    pub fn or(self, other: Formula) -> Self {
        Formula::Or(Box::new(self), Box::new(other))
    }

    /// Left-nested conjunction of literals; `None` when `lits` is empty.
    pub fn conjunction(lits: impl IntoIterator<Item = Literal>) -> Option<Formula> {
        lits.into_iter().map(Literal::into_formula).reduce(Formula::and)
    }

    pub fn depth(&self) -> usize {
        match self {
            Formula::Atom(_) => 1,
            Formula::Not(f) => 1 + f.depth(),
            Formula::And(a, b) | Formula::Or(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Flattens a conjunction of literals; errors on anything else.
    pub fn literals(&self) -> Result<Vec<Literal>> {
        let mut out = Vec::new();
        self.collect_literals(&mut out)?;
        Ok(out)
    }

    fn collect_literals(&self, out: &mut Vec<Literal>) -> Result<()> {
        match self {
            Formula::Atom(a) => out.push(Literal { atom: a.clone(), positive: true }),
            Formula::Not(inner) => match inner.as_ref() {
                Formula::Atom(a) => out.push(Literal { atom: a.clone(), positive: false }),
                _ => return Err(LogicError::NotLiteralConjunction(format_formula(self))),
            },
            Formula::And(a, b) => {
                a.collect_literals(out)?;
                b.collect_literals(out)?;
            }
            Formula::Or(..) => return Err(LogicError::NotLiteralConjunction(format_formula(self))),
        }
        Ok(())
    }

    /// Disjunctive normal form over literals (negations pushed to atoms).
    pub fn dnf(&self) -> Vec<Vec<Literal>> {
        fn go(f: &Formula, positive: bool) -> Vec<Vec<Literal>> {
            match (f, positive) {
                (Formula::Atom(a), p) => vec![vec![Literal { atom: a.clone(), positive: p }]],
                (Formula::Not(inner), p) => go(inner, !p),
                (Formula::And(a, b), true) | (Formula::Or(a, b), false) => {
                    let (l, r) = (go(a, positive), go(b, positive));
                    let mut out = Vec::with_capacity(l.len() * r.len());
                    for x in &l {
                        for y in &r {
                            out.push(x.iter().chain(y).cloned().collect());
                        }
                    }
                    out
                }
                (Formula::Or(a, b), true) | (Formula::And(a, b), false) => {
                    let mut out = go(a, positive);
                    out.extend(go(b, positive));
                    out
                }
            }
        }
        go(self, true)
    }

    pub fn has_quantifier(&self) -> bool {
        match self {
            Formula::Atom(Atom::Quantified(_)) => true,
            Formula::Atom(Atom::Ground(_)) => false,
            Formula::Not(f) => f.has_quantifier(),
            Formula::And(a, b) | Formula::Or(a, b) => a.has_quantifier() || b.has_quantifier(),
        }
    }

    /// Predicates of universally quantified atoms occurring anywhere in the formula.
    pub fn universal_predicates(&self, out: &mut Vec<String>) {
        match self {
            Formula::Atom(Atom::Quantified(q)) if q.quantifier == Quantifier::Forall => {
                if !out.contains(&q.predicate) {
                    out.push(q.predicate.clone());
                }
            }
            Formula::Atom(_) => {}
            Formula::Not(f) => f.universal_predicates(out),
            Formula::And(a, b) | Formula::Or(a, b) => {
                a.universal_predicates(out);
                b.universal_predicates(out);
            }
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_formula(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Literal {
    pub atom: Atom,
    pub positive: bool,
}

impl Literal {
    pub fn into_formula(self) -> Formula {
        let f = Formula::Atom(self.atom);
        if self.positive {
            f
        } else {
            f.not()
        }
    }
}

/// What a literal requires of the buffer, in terms of atom bitsets.
///
/// This is the quantified-to-ground expansion: a positive universal or a
/// negative existential forces every instance, while a positive existential or
/// a negative universal only asks for a nonempty choice among the instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constraint {
    /// Every atom of the mask is in the latest observation.
    InLatest(AtomSet),
    /// No atom of the mask is in the latest observation.
    NotInLatest(AtomSet),
    /// Some atom of the mask is in the latest observation.
    SomeInLatest(AtomSet),
    /// Every atom of the mask has been seen.
    AllSeen(AtomSet),
    /// Some atom of the mask has not been seen.
    SomeNotSeen(AtomSet),
}

impl Constraint {
    pub fn holds(self, latest: AtomSet, seen: AtomSet) -> bool {
        match self {
            Constraint::InLatest(m) => m.is_subset(latest),
            Constraint::NotInLatest(m) => !m.intersects(latest),
            Constraint::SomeInLatest(m) => m.intersects(latest),
            Constraint::AllSeen(m) => m.is_subset(seen),
            Constraint::SomeNotSeen(m) => !m.is_subset(seen),
        }
    }

    /// True when only the latest observation matters.
    pub fn is_latest_only(self) -> bool {
        matches!(self, Constraint::InLatest(_) | Constraint::NotInLatest(_) | Constraint::SomeInLatest(_))
    }
}

impl Literal {
    pub fn constraint(&self, sig: &Signature) -> Result<Constraint> {
        Ok(match (&self.atom, self.positive) {
            (Atom::Ground(g), true) => Constraint::InLatest(AtomSet::singleton(sig.atom_id(g)?)),
            (Atom::Ground(g), false) => Constraint::NotInLatest(AtomSet::singleton(sig.atom_id(g)?)),
            (Atom::Quantified(q), pos) => {
                let mask = sig.instances(&q.predicate)?;
                match (q.quantifier, pos) {
                    (Quantifier::Exists, true) => Constraint::SomeInLatest(mask),
                    (Quantifier::Exists, false) => Constraint::NotInLatest(mask),
                    (Quantifier::Forall, true) => Constraint::AllSeen(mask),
                    (Quantifier::Forall, false) => Constraint::SomeNotSeen(mask),
                }
            }
        })
    }
}

/// Decides whether some buffer satisfies every constraint at once.
///
/// Buffers are abstracted to a pair `latest ⊆ seen`, which is exact for
/// every formula of the language. Forced requirements are collected first and
/// the existential choices are then searched with backtracking, keeping
/// `seen` as small as possible.
pub fn constraints_satisfiable(cs: &[Constraint]) -> bool {
    let mut must_latest = AtomSet::EMPTY;
    let mut not_latest = AtomSet::EMPTY;
    let mut must_seen = AtomSet::EMPTY;
    let mut some_latest = Vec::new();
    let mut some_not_seen = Vec::new();
    for c in cs {
        match *c {
            Constraint::InLatest(m) => must_latest = must_latest.union(m),
            Constraint::NotInLatest(m) => not_latest = not_latest.union(m),
            Constraint::SomeInLatest(m) => some_latest.push(m),
            Constraint::AllSeen(m) => must_seen = must_seen.union(m),
            Constraint::SomeNotSeen(m) => some_not_seen.push(m),
        }
    }
    if must_latest.intersects(not_latest) {
        return false;
    }
    let base_seen = must_seen.union(must_latest);
    if some_not_seen.iter().any(|m| m.is_subset(base_seen)) {
        return false;
    }
    let mut open = Vec::new();
    for m in some_latest {
        let cand = m.difference(not_latest);
        if cand.is_empty() {
            return false;
        }
        if !cand.intersects(must_latest) {
            open.push(cand);
        }
    }
    fn search(open: &[AtomSet], seen: AtomSet, nf: &[AtomSet]) -> bool {
        let Some((first, rest)) = open.split_first() else {
            return true;
        };
        if first.intersects(seen) {
            return search(rest, seen, nf);
        }
        first.iter().any(|a| {
            let s = seen.union(AtomSet::singleton(a));
            nf.iter().all(|m| !m.is_subset(s)) && search(rest, s, nf)
        })
    }
    search(&open, base_seen, &some_not_seen)
}

/// Whether a conjunction of literals can be satisfied by some buffer.
pub fn conjunction_satisfiable(lits: &[Literal], sig: &Signature) -> Result<bool> {
    let cs = lits.iter().map(|l| l.constraint(sig)).collect::<Result<Vec<_>>>()?;
    Ok(constraints_satisfiable(&cs))
}

/// True when no buffer satisfies both conjunctions, i.e. the two edges can
/// never fire together. Both inputs must be conjunctions of literals.
pub fn mutually_exclusive(f1: &Formula, f2: &Formula, sig: &Signature) -> Result<bool> {
    let mut lits = f1.literals()?;
    lits.extend(f2.literals()?);
    Ok(!conjunction_satisfiable(&lits, sig)?)
}

/// Like [`mutually_exclusive`] but accepts arbitrary formulae by going
/// through their disjunctive normal forms.
pub fn formulas_disjoint(f1: &Formula, f2: &Formula, sig: &Signature) -> Result<bool> {
    let (d1, d2) = (f1.dnf(), f2.dnf());
    for a in &d1 {
        for b in &d2 {
            let both: Vec<Literal> = a.iter().chain(b).cloned().collect();
            if conjunction_satisfiable(&both, sig)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// A formula resolved against a signature, ready for fast evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CompiledFormula {
    Check(Constraint),
    Not(Box<CompiledFormula>),
    And(Box<CompiledFormula>, Box<CompiledFormula>),
    Or(Box<CompiledFormula>, Box<CompiledFormula>),
}

impl CompiledFormula {
    pub fn compile(f: &Formula, sig: &Signature) -> Result<Self> {
        Ok(match f {
            Formula::Atom(a) => {
                CompiledFormula::Check(Literal { atom: a.clone(), positive: true }.constraint(sig)?)
            }
            Formula::Not(inner) => CompiledFormula::Not(Box::new(Self::compile(inner, sig)?)),
            Formula::And(a, b) => {
                CompiledFormula::And(Box::new(Self::compile(a, sig)?), Box::new(Self::compile(b, sig)?))
            }
            Formula::Or(a, b) => {
                CompiledFormula::Or(Box::new(Self::compile(a, sig)?), Box::new(Self::compile(b, sig)?))
            }
        })
    }

    pub fn eval(&self, latest: AtomSet, seen: AtomSet) -> bool {
        match self {
            CompiledFormula::Check(c) => c.holds(latest, seen),
            CompiledFormula::Not(f) => !f.eval(latest, seen),
            CompiledFormula::And(a, b) => a.eval(latest, seen) && b.eval(latest, seen),
            CompiledFormula::Or(a, b) => a.eval(latest, seen) || b.eval(latest, seen),
        }
    }

    pub fn eval_buffer(&self, b: &Buffer) -> bool {
        self.eval(b.latest, b.seen)
    }
}

/// Buffer satisfaction: ground atoms and existentials against the latest
/// observation, universals against everything seen, with the usual boolean
/// connectives. Universals over an empty predicate hold vacuously.
pub fn satisfies(b: &Buffer, f: &Formula, sig: &Signature) -> Result<bool> {
    Ok(CompiledFormula::compile(f, sig)?.eval_buffer(b))
}

// ---------------------------------------------------------------------------
// Text syntax

const FORALL: &str = "forall";
const EXISTS: &str = "exists";

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(LogicError::Syntax { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.src[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(format!("expected `{c}`"))
        }
    }

    fn ident(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_lowercase() => {}
            _ => return self.err("expected a name matching [a-z][a-z0-9_]*"),
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_lowercase() || c.is_ascii_digit() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        Ok(&rest[..end])
    }

    fn variable(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let mut chars = rest.char_indices();
        match chars.next() {
            Some((_, c)) if c.is_ascii_uppercase() => {}
            _ => return self.err("expected a variable"),
        }
        let end = chars
            .find(|(_, c)| !(c.is_ascii_alphanumeric() || *c == '_'))
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        self.pos += end;
        Ok(&rest[..end])
    }

    fn disjunction(&mut self) -> Result<Formula> {
        let mut f = self.conjunction()?;
        while self.eat('|') {
            f = f.or(self.conjunction()?);
        }
        Ok(f)
    }

    fn conjunction(&mut self) -> Result<Formula> {
        let mut f = self.unary()?;
        while self.eat('&') {
            f = f.and(self.unary()?);
        }
        Ok(f)
    }

    fn unary(&mut self) -> Result<Formula> {
        if self.eat('!') {
            return Ok(self.unary()?.not());
        }
        if self.eat('(') {
            let f = self.disjunction()?;
            self.expect(')')?;
            return Ok(f);
        }
        let start = self.pos;
        let name = self.ident()?;
        if name == FORALL || name == EXISTS {
            let var = self.variable()?;
            self.expect('.')?;
            let pred = self.ident()?;
            self.expect('(')?;
            let v2 = self.variable()?;
            if v2 != var {
                return self.err(format!("variable `{v2}` is not bound (expected `{var}`)"));
            }
            self.expect(')')?;
            let q = if name == FORALL { Quantifier::Forall } else { Quantifier::Exists };
            return Ok(Formula::Atom(Atom::Quantified(QuantifiedAtom { quantifier: q, predicate: pred.to_string() })));
        }
        if self.eat('(') {
            let arg = self.ident()?;
            self.expect(')')?;
            return Ok(Formula::ground(name, arg));
        }
        if name.is_empty() {
            self.pos = start;
            return self.err("expected a formula");
        }
        Ok(Formula::prop(name))
    }
}

/// Parses formula text without checking names against a signature.
pub fn parse_formula_unchecked(text: &str) -> Result<Formula> {
    let mut p = Parser { src: text, pos: 0 };
    let f = p.disjunction()?;
    if p.peek().is_some() {
        return p.err("unexpected trailing input");
    }
    Ok(f)
}

/// Parses formula text and checks every symbol against `sig`.
pub fn parse_formula(text: &str, sig: &Signature) -> Result<Formula> {
    let f = parse_formula_unchecked(text)?;
    check_symbols(&f, sig)?;
    Ok(f)
}

/// Checks that every atom of `f` exists under `sig`.
pub fn check_symbols(f: &Formula, sig: &Signature) -> Result<()> {
    CompiledFormula::compile(f, sig).map(|_| ())
}

fn precedence(f: &Formula) -> u8 {
    match f {
        Formula::Or(..) => 1,
        Formula::And(..) => 2,
        Formula::Not(_) | Formula::Atom(_) => 3,
    }
}

fn write_formula(f: &Formula, out: &mut String) {
    fn child(f: &Formula, min: u8, out: &mut String) {
        if precedence(f) < min {
            out.push('(');
            write_formula(f, out);
            out.push(')');
        } else {
            write_formula(f, out);
        }
    }
    match f {
        Formula::Atom(a) => out.push_str(&a.to_string()),
        Formula::Not(inner) => {
            out.push('!');
            child(inner, 3, out);
        }
        Formula::And(a, b) => {
            child(a, 2, out);
            out.push_str(" & ");
            child(b, 3, out);
        }
        Formula::Or(a, b) => {
            child(a, 1, out);
            out.push_str(" | ");
            child(b, 2, out);
        }
    }
}

/// Canonical text form; `parse_formula(format_formula(f))` gives back `f`.
pub fn format_formula(f: &Formula) -> String {
    let mut s = String::new();
    write_formula(f, &mut s);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig() -> Signature {
        Signature::builder()
            .unary("yellow", ["o0", "o1"])
            .unary("blue", ["o4", "o5"])
            .unary("red", ["o2"])
            .unary("empty", [])
            .proposition("goal")
            .build()
            .unwrap()
    }

    fn obs(s: &Signature, text: &str) -> Observation {
        Observation::parse(text, s).unwrap()
    }

    fn buf(s: &Signature, steps: &[&str]) -> Buffer {
        let os: Vec<_> = steps.iter().map(|t| obs(s, t)).collect();
        Buffer::from_observations(&os)
    }

    fn sat(b: &Buffer, text: &str, s: &Signature) -> bool {
        satisfies(b, &parse_formula(text, s).unwrap(), s).unwrap()
    }

    #[test]
    fn herbrand_base_small() {
        let s = Signature::builder().proposition("goal").unary("yellow", ["o0", "o1"]).build().unwrap();
        let hb: Vec<String> = herbrand_base(&s).iter().map(|a| a.to_string()).collect();
        assert_eq!(hb, ["goal", "yellow(o0)", "yellow(o1)"]);
        assert!(herbrand_base(&Signature::builder().build().unwrap()).is_empty());
    }

    #[test]
    fn ground_instance_expansion() {
        let s = sig();
        let inst = ground_instances(&QuantifiedAtom::exists("blue"), &s).unwrap();
        assert_eq!(inst, [GroundAtom::unary("blue", "o4"), GroundAtom::unary("blue", "o5")]);
        assert!(ground_instances(&QuantifiedAtom::forall("empty"), &s).unwrap().is_empty());
        assert_eq!(
            ground_instances(&QuantifiedAtom::forall("nope"), &s),
            Err(LogicError::UnknownPredicate("nope".into()))
        );
    }

    #[test]
    fn signature_rejects_bad_input() {
        let binary = Signature::new(vec![], vec![Predicate { name: "on".into(), arity: 2 }], BTreeMap::new());
        assert!(matches!(binary, Err(LogicError::UnsupportedArity { .. })));
        let dup = Signature::builder().proposition("goal").proposition("goal").build();
        assert!(matches!(dup, Err(LogicError::DuplicatePredicate(_))));
        let mut m = BTreeMap::new();
        m.insert("goal".to_string(), vec!["o0".to_string()]);
        let prop = Signature::new(
            vec!["o0".into()],
            vec![Predicate { name: "goal".into(), arity: 0 }],
            m,
        );
        assert!(matches!(prop, Err(LogicError::PropositionMembership(_))));
    }

    #[test]
    fn worked_satisfaction_examples() {
        let s = sig();
        assert!(sat(&buf(&s, &["goal"]), "goal", &s));
        assert!(sat(&buf(&s, &["yellow(o0)", "blue(o4)"]), "exists X. blue(X)", &s));
        let b1 = buf(&s, &["goal", "yellow(o0)", "blue(o4)", "yellow(o1)"]);
        let b2 = buf(&s, &["goal", "yellow(o0)", "blue(o4)"]);
        assert!(sat(&b1, "forall X. yellow(X)", &s));
        assert!(!sat(&b2, "forall X. yellow(X)", &s));
        let c1 = buf(&s, &["goal", "yellow(o0)", "blue(o4)", "", "yellow(o1)"]);
        let c2 = buf(&s, &["goal", "yellow(o0)", "blue(o4)", "", "yellow(o1)", "", "goal"]);
        assert!(!sat(&c1, "forall X. yellow(X) & goal", &s));
        assert!(sat(&c2, "forall X. yellow(X) & goal", &s));
        assert!(sat(&buf(&s, &[""]), "!goal", &s));
    }

    #[test]
    fn vacuous_universal_and_empty_existential() {
        let s = sig();
        let b = buf(&s, &[""]);
        assert!(sat(&b, "forall X. empty(X)", &s));
        assert!(!sat(&b, "exists X. empty(X)", &s));
    }

    #[test]
    fn disjunction_semantics() {
        let s = sig();
        let b = buf(&s, &["red(o2)"]);
        assert!(sat(&b, "forall X. blue(X) | red(o2)", &s));
        assert!(!sat(&b, "goal | blue(o4)", &s));
    }

    #[test]
    fn unknown_atom_is_error() {
        let s = sig();
        assert!(matches!(parse_formula("yellow(o9)", &s), Err(LogicError::NotInHerbrandBase(_))));
        assert!(matches!(parse_formula("forall X. goal(X)", &s), Err(LogicError::NotUnary(_))));
        let f = Formula::prop("lava");
        assert!(satisfies(&Buffer::new(), &f, &s).is_err());
    }

    #[test]
    fn exclusivity_examples() {
        let s = sig();
        let ex = |a: &str, b: &str| {
            mutually_exclusive(&parse_formula(a, &s).unwrap(), &parse_formula(b, &s).unwrap(), &s).unwrap()
        };
        assert!(ex("exists X. blue(X)", "!exists X. blue(X)"));
        assert!(ex("goal", "!goal & exists X. yellow(X)"));
        assert!(!ex("exists X. blue(X)", "goal"));
        // `forall` reads the whole buffer, `!yellow(o0)` only the latest step:
        // [{yellow(o0)}, {yellow(o1)}] satisfies both.
        assert!(!ex("forall X. yellow(X)", "!yellow(o0)"));
        assert!(ex("forall X. yellow(X)", "!exists X. yellow(X) & !forall X. blue(X) & yellow(o1)"));
        assert!(ex("yellow(o0)", "!forall X. yellow(X) & yellow(o1)"));
        assert!(ex("exists X. blue(X) & !blue(o4)", "!blue(o5)"));
        assert!(!ex("exists X. blue(X) & !blue(o4)", "!blue(o4)"));
        let or = parse_formula("goal | blue(o4)", &s).unwrap();
        assert!(mutually_exclusive(&or, &Formula::prop("goal"), &s).is_err());
    }

    #[test]
    fn choice_interaction_with_negated_universal() {
        let s = Signature::builder().unary("p", ["a", "b"]).unary("q", ["a2"]).build().unwrap();
        // exists p forces one p atom into seen; !forall p needs one missing: fine.
        let lits = parse_formula("exists X. p(X) & !forall X. p(X)", &s).unwrap().literals().unwrap();
        assert!(conjunction_satisfiable(&lits, &s).unwrap());
        let lits = parse_formula("p(a) & exists X. p(X) & !p(a) ", &s).unwrap().literals().unwrap();
        assert!(!conjunction_satisfiable(&lits, &s).unwrap());
        let lits = parse_formula("p(a) & p(b) & !forall X. p(X)", &s).unwrap().literals().unwrap();
        assert!(!conjunction_satisfiable(&lits, &s).unwrap());
    }

    #[test]
    fn parse_and_format() {
        let s = sig();
        let f = parse_formula("forall X. yellow(X) & goal", &s).unwrap();
        assert_eq!(f, Formula::forall("yellow").and(Formula::prop("goal")));
        let g = parse_formula("!exists X. blue(X)", &s).unwrap();
        assert_eq!(g, Formula::exists("blue").not());
        assert_eq!(format_formula(&g), "!exists X. blue(X)");
        let h = parse_formula("  !( goal|blue(o4))&yellow(o0) ", &s).unwrap();
        assert_eq!(format_formula(&h), "!(goal | blue(o4)) & yellow(o0)");
        assert_eq!(parse_formula(&format_formula(&h), &s).unwrap(), h);
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse_formula_unchecked("goal & ") {
            Err(LogicError::Syntax { pos, .. }) => assert_eq!(pos, 7),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_formula_unchecked("forall X. p(Y)").is_err());
        assert!(parse_formula_unchecked("goal)").is_err());
        assert!(parse_formula_unchecked("Goal").is_err());
    }

    #[test]
    fn buffer_clear() {
        let s = sig();
        let mut b = buf(&s, &["goal", "yellow(o0)"]);
        assert_eq!(b.len(), 2);
        assert!(b.latest().is_subset(b.seen()));
        b.clear();
        assert!(b.is_empty());
        assert!(b.seen().is_empty());
    }
}
