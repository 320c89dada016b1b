mod common;

use grutrack::assign::Solver;
use grutrack::motion::ModelKind;
use grutrack::simulator::{generate_scenario, Layout, SimConfig};
use grutrack::tracker::{track_sequence, MotionMode, TrackerConfig};

#[test]
fn two_stage_equals_brute_force_per_stage() {
    assert_eq!(common::two_stage_mismatches(1000, 17), 0);
}

#[test]
fn brute_force_respects_threshold() {
    let sim = vec![vec![0.9, 0.2], vec![0.25, 0.1]];
    assert_eq!(common::brute_force_matching(&sim, &[0, 1], &[0, 1], 0.3), vec![(0, 0)]);
    assert_eq!(common::brute_force_matching(&sim, &[0, 1], &[0, 1], 0.0), vec![(0, 0), (1, 1)]);
}

#[test]
fn tracker_agrees_with_exhaustive_solver_on_crossing() {
    let sim = SimConfig {
        frames: 40,
        objects: 2,
        layout: Layout::Crossing,
        motion_kinds: vec![ModelKind::Ctra],
        ..Default::default()
    };
    for seed in 0..5 {
        let scene = generate_scenario(&sim, seed).unwrap();
        let run = |solver| {
            let cfg = TrackerConfig { solver, ..Default::default() };
            track_sequence(&scene.frames, MotionMode::Ekf, &cfg, None).unwrap()
        };
        assert_eq!(run(Solver::Hungarian), run(Solver::Exhaustive), "seed {seed}");
    }
}
