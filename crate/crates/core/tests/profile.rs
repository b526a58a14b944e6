mod common;

use lle_core::profile::{
    linearized_operator, profile_residual, solve_profile, BranchMeta, WaveProfile, CERTIFIED_RESIDUAL,
};
use lle_core::spectral::PeriodicGrid;

use common::{params, wave};

#[test]
fn wave_solves_the_profile_equation() {
    let phi = wave();
    assert!(profile_residual(&phi.field, &phi.params).l2_norm() < CERTIFIED_RESIDUAL);
    assert!(phi.first_harmonic() > 1e-3, "the wave is not a constant state");
}

#[test]
fn derivative_spans_the_kernel() {
    let phi = wave();
    let d = phi.derivative();
    let ad = linearized_operator(phi).apply(&d).unwrap();
    assert!(ad.l2_norm() <= 1e-8 * d.l2_norm());
}

#[test]
fn newton_is_stable_at_a_solution() {
    let phi = wave();
    let again = solve_profile(&phi.field, &phi.params, 1e-11).unwrap();
    assert!(again.field.sub(&phi.field).unwrap().l2_norm() < 1e-9);
}

#[test]
fn json_round_trip() {
    let phi = wave();
    let back = WaveProfile::from_json(&phi.to_json()).unwrap();
    assert_eq!(back.params, phi.params);
    // stored as Fourier coefficients, so values agree to roundoff
    assert!(common::rel_diff(&back.field, &phi.field) < 1e-14);
}

#[test]
fn certification_rejects_bad_fields() {
    let phi = wave();
    let shifted = phi.field.scale(1.01);
    assert!(WaveProfile::certify(phi.params, shifted, BranchMeta::default()).is_err());
    let mut p = params();
    p.period = 6.0;
    assert!(WaveProfile::certify(p, phi.field.clone(), BranchMeta::default()).is_err());
    let g = PeriodicGrid::new(64, 5.5).unwrap();
    assert!(WaveProfile::certify(params(), lle_core::spectral::Field2::zeros(g), BranchMeta::default()).is_err());
}
