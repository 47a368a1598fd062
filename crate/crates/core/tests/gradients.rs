//! Central finite-difference validation of every differentiable op and of
//! the full model gradient used by the attack loop.

use atnbreak_core::gradcheck::{check_model_gradients, check_tensor_ops, tiny_check_config};

#[test]
fn every_op_matches_central_differences() {
    for check in check_tensor_ops(100, 20240917) {
        assert!(
            check.max_rel_err < 1e-6,
            "{}: max relative error {} over {} cases",
            check.name,
            check.max_rel_err,
            check.cases
        );
    }
}

#[test]
fn full_model_gradient_matches_central_differences() {
    let cfg = tiny_check_config();
    let report = check_model_gradients(&cfg, 7);
    assert!(
        report.input_rel_err < 1e-4,
        "input gradient: max relative error {}",
        report.input_rel_err
    );
    assert!(
        report.param_rel_err < 1e-4,
        "parameter gradients: max relative error {} over {} tensors",
        report.param_rel_err,
        report.params_checked
    );
}
