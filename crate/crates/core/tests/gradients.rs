mod common;

use common::*;

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..5 {
        for (name, check) in loss_gradient_checks(seed) {
            assert!(check.passes(), "{name} seed {seed}: {check:?}");
        }
    }
}

#[test]
fn mlp_model_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let check = model_gradient_check(small_mlp_spec(seed), seed);
        assert!(check.passes(), "seed {seed}: {check:?}");
    }
}

#[test]
fn conv_model_gradient_matches_finite_differences() {
    for seed in 0..6 {
        let check = model_gradient_check(small_conv_spec(seed), seed);
        assert!(check.passes(), "seed {seed}: {check:?}");
    }
}

#[test]
fn checker_flags_a_kink() {
    // |x| at 0 has no derivative; the checker must not report agreement there
    let check = check_gradient(&[0.0, 2.0], &[0.0, 1.0], |x| x[0].abs() + x[1]);
    assert_eq!(check.kinks, 0);
    let check = check_gradient(&[3e-5], &[1.0], |x| x[0].abs());
    assert_eq!(check.kinks, 1);
}
