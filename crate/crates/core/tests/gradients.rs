#[path = "support/gradients.rs"]
mod gradients;

const TOLERANCE: f64 = 1e-5;

#[test]
fn every_operation_matches_finite_differences() {
    for (name, err) in gradients::op_checks().unwrap() {
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn full_objective_matches_finite_differences() {
    for (name, err) in gradients::objective_checks().unwrap() {
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
}
