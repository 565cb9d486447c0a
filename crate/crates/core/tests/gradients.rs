mod common;

use common::gradcheck::{self, TOL};

fn assert_ok(c: gradcheck::OpCheck) {
    assert!(
        c.max_rel_err < TOL,
        "{}: max relative error {:.3e} over {} instances",
        c.op,
        c.max_rel_err,
        c.instances
    );
}

#[test]
fn linear_matches_finite_differences() {
    assert_ok(gradcheck::linear_check(20));
}

#[test]
fn gru_step_matches_finite_differences() {
    assert_ok(gradcheck::gru_check(20));
}

#[test]
fn conv1d_matches_finite_differences() {
    assert_ok(gradcheck::conv1d_check(20));
}

#[test]
fn weighted_cross_entropy_matches_finite_differences() {
    assert_ok(gradcheck::wce_check(20));
}

#[test]
fn kl_gaussian_matches_finite_differences() {
    assert_ok(gradcheck::kl_check(20));
}

#[test]
fn auxiliary_ops_match_finite_differences() {
    for c in gradcheck::misc_checks(20) {
        assert_ok(c);
    }
}

#[test]
fn pvae_loss_matches_finite_differences() {
    assert_ok(gradcheck::vae_loss_check(molvae_core::vae::Arch::Pvae, 5));
}

#[test]
fn cvae_loss_matches_finite_differences() {
    assert_ok(gradcheck::vae_loss_check(molvae_core::vae::Arch::Cvae, 5));
}
