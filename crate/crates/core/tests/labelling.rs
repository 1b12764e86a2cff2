//! The task labelling functions agree with their reference machines.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use form_core::env::{guided_walk, random_walk, task_by_name, TASK_NAMES};
use form_core::learner::Label;

#[test]
fn labels_agree_with_reference_machines() {
    for name in TASK_NAMES {
        let task = task_by_name(name).unwrap();
        let m = task.reference_machine().unwrap();
        assert!(m.validate().is_empty(), "{name}");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 3];
        for i in 0..10_000 {
            let ep = if i % 2 == 0 { random_walk(&task, &mut rng) } else { guided_walk(&task, 0.2, &mut rng) };
            let run = m.run_trace(&ep.observations).unwrap();
            let by_machine = if run.final_state == m.accepting() {
                Label::Goal
            } else if Some(run.final_state) == m.rejecting() {
                Label::Dead
            } else {
                Label::Incomplete
            };
            let label = task.label(&ep.observations);
            assert_eq!(label, by_machine, "{name}: episode {i}");
            counts[label as usize] += 1;
        }
        // Both outcomes actually occur.
        assert!(counts[Label::Goal as usize] > 0 && counts[Label::Incomplete as usize] > 0, "{name}: {counts:?}");
    }
}
