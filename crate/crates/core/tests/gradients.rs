mod support;

use support::gradients::{full_loss_error, op_errors};

#[test]
fn every_op_matches_finite_differences() {
    for (name, err) in op_errors() {
        assert!(err <= 1e-4, "{name}: relative error {err}");
    }
}

#[test]
fn full_loss_matches_finite_differences() {
    let err = full_loss_error(4, 8, 1);
    assert!(err <= 1e-4, "relative error {err}");
}
