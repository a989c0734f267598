mod common;

use skiplab::training::Objective;

#[test]
fn ar_loss_gradients_match_finite_differences() {
    let (err, at) = common::max_gradient_error(Objective::ArNtp);
    eprintln!("max relative error {err:e} at {at}");
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn diffusion_loss_gradients_match_finite_differences() {
    let (err, at) = common::max_gradient_error(Objective::MaskedDiffusion);
    eprintln!("max relative error {err:e} at {at}");
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}
