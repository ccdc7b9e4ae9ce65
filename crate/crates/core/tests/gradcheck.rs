//! Central-difference checks of every differentiable tape operation and of
//! whole models.

mod common;

use common::{model_grad_check, op_gradient_errors, small_model, FD_REL_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let errors = op_gradient_errors();
    assert!(errors.len() >= 16);
    for (name, worst) in errors {
        assert!(worst <= FD_REL_TOL, "{name}: worst relative error {worst:.3e}");
    }
}

#[test]
fn full_models_match_finite_differences() {
    for ordering in ["C5", "C1", "SMAN1"] {
        let worst = model_grad_check(&small_model(ordering));
        assert!(worst <= FD_REL_TOL, "{ordering}: worst relative error {worst:.3e}");
    }
}
