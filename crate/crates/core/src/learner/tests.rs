use super::oracle::{oracle_minimal, OracleBounds};
use super::*;
use crate::machine::form_from_edges;

fn sig() -> Signature {
    Signature::builder()
        .unary("yellow", ["o0", "o1"])
        .unary("blue", ["o4", "o5"])
        .proposition("goal")
        .build()
        .unwrap()
}

fn tr(s: &Signature, label: Label, steps: &[&str]) -> TraceExample {
    TraceExample::new(label, steps.iter().map(|t| Observation::parse(t, s).unwrap()).collect())
}

fn running_example(s: &Signature) -> Form {
    form_from_edges(
        s,
        "u0",
        "u_acc",
        None,
        &[("u0", "u1", "forall X. yellow(X)"), ("u1", "u2", "exists X. blue(X)"), ("u2", "u_acc", "goal")],
    )
    .unwrap()
}

fn quick() -> SearchConfig {
    SearchConfig { max_states: 5, kappa: 2, time_budget: Duration::from_secs(30), max_literals_per_edge: 2, mode: Mode::FirstOrder }
}

#[test]
fn space_size_examples() {
    let hs = HypothesisSpace { num_states: 5, kappa: 2, herbrand_size: 7, unary_predicates: 0, mode: Mode::Propositional };
    assert_eq!(space_size(&hs), (24, 336));
    let hs = HypothesisSpace { num_states: 3, kappa: 1, herbrand_size: 1, unary_predicates: 0, mode: Mode::Propositional };
    assert_eq!(space_size(&hs), (2, 4));
    let hs = HypothesisSpace { num_states: 3, kappa: 1, herbrand_size: 1, unary_predicates: 2, mode: Mode::FirstOrder };
    assert_eq!(space_size(&hs), (2, 4 + 16));
}

#[test]
fn pool_layout() {
    let s = sig();
    let p = literal_pool(&s, Mode::Propositional).unwrap();
    assert_eq!(p.len(), 2 * s.atom_count());
    let f = literal_pool(&s, Mode::FirstOrder).unwrap();
    assert_eq!(f.len(), 2 * s.atom_count() + 8);
    for (i, l) in f.iter().enumerate() {
        assert_eq!(f[l.negation].negation, i);
        assert_eq!(f[l.negation].literal.positive, !l.literal.positive);
    }
}

#[test]
fn consistency_and_counterexamples() {
    let s = sig();
    let m = running_example(&s);
    let good = tr(&s, Label::Goal, &["yellow(o0)", "yellow(o1)", "blue(o4)", "goal"]);
    let early = tr(&s, Label::Goal, &["goal"]);
    assert!(consistent(&m, std::slice::from_ref(&good)));
    assert!(!consistent(&m, std::slice::from_ref(&early)));
    assert!(find_counterexample(&m, &early));
    assert!(!find_counterexample(&m, &tr(&s, Label::Incomplete, &["yellow(o0)"])));
    assert!(find_counterexample(&m, &tr(&s, Label::Goal, &["yellow(o0)", "yellow(o1)", "goal"])));
    let dummy = Form::dummy(s.clone());
    assert!(consistent(&dummy, &[tr(&s, Label::Incomplete, &["goal", "blue(o4)"])]));
    assert!(find_counterexample(&dummy, &good));
}

#[test]
fn single_goal_trace() {
    let s = sig();
    let l = learn(&[tr(&s, Label::Goal, &["goal"])], &s, &quick()).unwrap();
    assert_eq!(l.cost, Cost { states: 2, literals: 1, quantified: 0 });
    assert_eq!(l.form.edges().len(), 1);
    assert_eq!(format!("{}", l.form.edges()[0].formula), "goal");
}

#[test]
fn requires_goal_examples() {
    let s = sig();
    assert!(matches!(learn(&[], &s, &quick()), Err(LearnError::NoGoalExamples)));
    assert!(matches!(
        learn(&[tr(&s, Label::Incomplete, &["goal"])], &s, &quick()),
        Err(LearnError::NoGoalExamples)
    ));
}

#[test]
fn contradictory_labels_are_unsat() {
    let s = sig();
    let ex = [tr(&s, Label::Goal, &["goal"]), tr(&s, Label::Incomplete, &["goal"])];
    assert!(matches!(learn(&ex, &s, &quick()), Err(LearnError::Unsat { .. })));
    let b = OracleBounds { max_non_terminal: 1, ..OracleBounds::default() };
    assert!(matches!(oracle_minimal(&ex, &s, &b), Err(LearnError::Unsat { .. })));
}

#[test]
fn oracle_empty_examples_is_dummy() {
    let s = sig();
    let f = oracle_minimal(&[], &s, &OracleBounds::default()).unwrap();
    assert_eq!(f, Form::dummy(s));
}

#[test]
fn all_yellow_uses_universal() {
    let s = sig();
    let ex = vec![
        tr(&s, Label::Goal, &["yellow(o0)", "", "yellow(o1)", "goal"]),
        tr(&s, Label::Goal, &["yellow(o1)", "blue(o4)", "yellow(o0)", "", "goal"]),
        tr(&s, Label::Incomplete, &["yellow(o0)", "goal"]),
        tr(&s, Label::Incomplete, &["yellow(o1)", "", "goal"]),
        tr(&s, Label::Incomplete, &["goal"]),
        tr(&s, Label::Incomplete, &["blue(o5)", "yellow(o1)", "blue(o4)"]),
    ];
    let l = learn(&ex, &s, &quick()).unwrap();
    assert!(l.cost.quantified >= 1, "{}", l.form.to_text());
    assert!(consistent(&l.form, &ex));
    let mut prop = quick();
    prop.mode = Mode::Propositional;
    prop.max_states = 6;
    let p = learn(&ex, &s, &prop).unwrap();
    assert!(p.cost.states > l.cost.states, "{}\n{}", l.form.to_text(), p.form.to_text());
}

#[test]
fn dead_traces_reach_rejecting_state() {
    let s = Signature::builder().unary("green", ["o10", "o11", "o12"]).proposition("goal").proposition("lava").build().unwrap();
    let ex = vec![
        tr(&s, Label::Goal, &["green(o10)", "", "goal"]),
        tr(&s, Label::Goal, &["green(o11)", "goal"]),
        tr(&s, Label::Incomplete, &["green(o12)", "goal"]),
        tr(&s, Label::Incomplete, &["goal"]),
        tr(&s, Label::Dead, &["lava"]),
        tr(&s, Label::Dead, &["green(o10)", "lava"]),
    ];
    let l = learn(&ex, &s, &SearchConfig { max_literals_per_edge: 3, ..quick() }).unwrap();
    assert!(l.form.rejecting().is_some());
    assert!(consistent(&l.form, &ex));
    assert!(l.form.validate().is_empty());
}

#[test]
fn counterexample_loop_behaviour() {
    let s = sig();
    // Only incomplete traces: the dummy machine stays.
    let out = counterexample_loop(vec![tr(&s, Label::Incomplete, &["goal"]); 3], &s, &quick()).unwrap();
    assert!(out.is_empty());
    let stream = vec![
        tr(&s, Label::Incomplete, &["yellow(o0)"]),
        tr(&s, Label::Goal, &["yellow(o0)", "yellow(o1)", "goal"]),
        tr(&s, Label::Goal, &["yellow(o0)", "yellow(o1)", "goal"]),
        tr(&s, Label::Incomplete, &["goal"]),
        tr(&s, Label::Incomplete, &["yellow(o1)", "goal"]),
    ];
    let out = counterexample_loop(stream.clone(), &s, &quick()).unwrap();
    assert!(!out.is_empty());
    // Each machine agrees with every counterexample collected so far.
    let triggers: Vec<TraceExample> = out.iter().map(|(_, t)| t.clone()).collect();
    for (k, (form, _)) in out.iter().enumerate() {
        assert!(consistent(form, &triggers[..=k]), "machine #{k}");
    }
    let last = &out.last().unwrap().0;
    assert!(consistent(last, &stream[1..]), "{}", last.to_text());
}

#[test]
fn trace_format_round_trip() {
    let s = sig();
    let t = tr(&s, Label::Goal, &["yellow(o0)", "", "yellow(o1),blue(o4)", "goal"]);
    let line = format_trace(&t, &s);
    assert_eq!(parse_trace(&line, &s).unwrap(), t);
    assert_eq!(parse_trace("GOAL;yellow(o0)|yellow(o1)|blue(o4)|goal", &s).unwrap().observations.len(), 4);
    match parse_traces("GOAL;goal\nbogus\n", &s) {
        Err(LearnError::Format { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

/// Small random instances: the search and the brute-force oracle agree on
/// (states, literals).
#[test]
fn matches_oracle_on_small_instances() {
    use rand::{Rng, SeedableRng};
    let s = Signature::builder().unary("p", ["a", "b"]).proposition("g").build().unwrap();
    let atoms = s.all_atoms();
    for seed in 0..8u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ex = Vec::new();
        for _ in 0..5 {
            let len = rng.gen_range(1..=4);
            let obs: Vec<Observation> =
                (0..len).map(|_| Observation(atoms.iter().filter(|_| rng.gen_bool(0.35)).collect())).collect();
            let label = if rng.gen_bool(0.4) { Label::Goal } else { Label::Incomplete };
            ex.push(TraceExample::new(label, obs));
        }
        if !ex.iter().any(|e| e.label == Label::Goal) {
            continue;
        }
        let b = OracleBounds { max_non_terminal: 2, max_literals_per_edge: 2, kappa: 2, max_total_literals: 3, mode: Mode::FirstOrder };
        let o = oracle_minimal(&ex, &s, &b);
        let cfg = SearchConfig { max_states: 3, kappa: 2, max_literals_per_edge: 2, ..quick() };
        let l = learn(&ex, &s, &cfg);
        match (o, l) {
            (Ok(o), Ok(l)) => {
                let (co, cl) = (cost(&o), l.cost);
                if co.literals <= 3 {
                    assert_eq!((co.states, co.literals), (cl.states, cl.literals), "seed {seed}\n{}\n{}", o.to_text(), l.form.to_text());
                }
            }
            (Err(LearnError::Unsat { .. }), Ok(l)) => assert!(l.cost.literals > 3 || l.cost.states > 3, "seed {seed}"),
            (Ok(o), Err(e)) => panic!("seed {seed}: oracle found {} but learn failed: {e}", o.to_text()),
            (Err(_), Err(_)) => {}
            (Err(e), Ok(_)) => panic!("seed {seed}: oracle error {e}"),
        }
    }
}

