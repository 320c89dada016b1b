mod common;

use grutrack::motion::ModelKind;

fn check(kind: ModelKind, seed: u64) {
    let r = common::gain_network_fd_check(kind, 5, seed);
    println!("{kind}: {r:?}");
    assert!(r.checked > 1000);
    assert!(r.skipped * 100 < r.checked, "too many kinks: {r:?}");
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn ctra_gain_network_matches_finite_differences() {
    check(ModelKind::Ctra, 3);
}

#[test]
fn bicycle_gain_network_matches_finite_differences() {
    check(ModelKind::Bicycle, 8);
}
