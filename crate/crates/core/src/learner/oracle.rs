//! Brute-force reference for the learner on tiny instances.
//!
//! Enumerates every acyclic machine in increasing (states, literals) order
//! and returns the first one that validates and agrees with all examples.
//! It shares nothing with the search beyond the literal pool: machines are
//! built as [`Form`]s and checked with [`Form::validate`] and
//! [`super::consistent`].

use super::{build_form, consistent, cost, literal_pool, Label, LearnError, Mode, TraceExample};
use crate::logic::Signature;
use crate::machine::Form;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBounds {
    /// Non-terminal states, at most 3.
    pub max_non_terminal: usize,
    /// Literals per edge, at most 2.
    pub max_literals_per_edge: usize,
    pub kappa: usize,
    /// Give up beyond this many literals per machine.
    pub max_total_literals: usize,
    pub mode: Mode,
}

impl Default for OracleBounds {
    fn default() -> Self {
        OracleBounds { max_non_terminal: 2, max_literals_per_edge: 2, kappa: 2, max_total_literals: 4, mode: Mode::FirstOrder }
    }
}

pub fn oracle_minimal(examples: &[TraceExample], sig: &Signature, bounds: &OracleBounds) -> Result<Form, LearnError> {
    if bounds.max_non_terminal > 3 || bounds.max_literals_per_edge > 2 || sig.atom_count() > 6 {
        return Err(LearnError::Bounds(format!(
            "oracle supports at most 3 non-terminal states, 2 literals per edge and 6 atoms (got {}, {}, {})",
            bounds.max_non_terminal,
            bounds.max_literals_per_edge,
            sig.atom_count()
        )));
    }
    if examples.is_empty() {
        return Ok(Form::dummy(sig.clone()));
    }
    let pool = literal_pool(sig, bounds.mode)?;
    let mut conjs: Vec<Vec<u16>> = Vec::new();
    for i in 0..pool.len() {
        conjs.push(vec![i as u16]);
        if bounds.max_literals_per_edge >= 2 {
            for j in i + 1..pool.len() {
                if pool[i].negation != j {
                    conjs.push(vec![i as u16, j as u16]);
                }
            }
        }
    }
    let with_reject = examples.iter().any(|e| e.label == Label::Dead);
    for m in 1..=bounds.max_non_terminal {
        let acc = m as u8;
        let mut pairs: Vec<(usize, u8)> = Vec::new();
        for from in 0..m {
            for to in from + 1..m {
                pairs.push((from, to as u8));
            }
            pairs.push((from, acc));
            if with_reject {
                pairs.push((from, acc + 1));
            }
        }
        let options: Vec<(usize, usize)> =
            (0..pairs.len()).flat_map(|p| (0..conjs.len()).map(move |c| (p, c))).collect();
        for total in 0..=bounds.max_total_literals {
            let mut best: Option<Form> = None;
            let mut chosen = Vec::new();
            let mut env = Env { sig, pool: &pool, conjs: &conjs, pairs: &pairs, options: &options, m, with_reject, examples, kappa: bounds.kappa };
            env.enumerate(0, total, &mut chosen, &mut best)?;
            if let Some(f) = best {
                return Ok(f);
            }
        }
    }
    Err(LearnError::Unsat { max_states: bounds.max_non_terminal + 1 + with_reject as usize })
}

struct Env<'a> {
    sig: &'a Signature,
    pool: &'a [super::PoolLiteral],
    conjs: &'a [Vec<u16>],
    pairs: &'a [(usize, u8)],
    options: &'a [(usize, usize)],
    m: usize,
    with_reject: bool,
    examples: &'a [TraceExample],
    kappa: usize,
}

impl Env<'_> {
    fn enumerate(
        &mut self,
        start: usize,
        remaining: usize,
        chosen: &mut Vec<usize>,
        best: &mut Option<Form>,
    ) -> Result<(), LearnError> {
        if remaining == 0 {
            return self.check(chosen, best);
        }
        for o in start..self.options.len() {
            let (p, c) = self.options[o];
            let len = self.conjs[c].len();
            if len > remaining {
                continue;
            }
            if chosen.iter().filter(|&&x| self.options[x].0 == p).count() >= self.kappa {
                continue;
            }
            chosen.push(o);
            self.enumerate(o + 1, remaining - len, chosen, best)?;
            chosen.pop();
        }
        Ok(())
    }

    fn check(&self, chosen: &[usize], best: &mut Option<Form>) -> Result<(), LearnError> {
        let mut edges: Vec<Vec<(u8, Vec<u16>)>> = vec![Vec::new(); self.m];
        for &o in chosen {
            let (p, c) = self.options[o];
            let (from, to) = self.pairs[p];
            edges[from].push((to, self.conjs[c].clone()));
        }
        let form = build_form(self.sig, self.pool, self.m, self.with_reject, &edges)?;
        if !consistent(&form, self.examples) || !form.validate().is_empty() {
            return Ok(());
        }
        if best.as_ref().is_none_or(|b| cost(&form) < cost(b)) {
            *best = Some(form);
        }
        Ok(())
    }
}
