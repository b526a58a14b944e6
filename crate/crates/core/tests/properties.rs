mod common;

use common::props;

#[test]
fn sobolev_interpolation() {
    props::sobolev_interpolation().unwrap();
}

#[test]
fn parseval() {
    props::parseval().unwrap();
}

#[test]
fn projection_idempotence() {
    props::projection_idempotence().unwrap();
}

#[test]
fn translation_equivariance() {
    props::translation_equivariance().unwrap();
}

#[test]
fn reality_round_trips() {
    props::reality_round_trips().unwrap();
}
