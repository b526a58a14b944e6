//! Randomized invariants, shared by `properties.rs` and the acceptance run.

use std::sync::OnceLock;

use lle_core::semigroup::{KernelOptions, SemigroupKernel};
use lle_core::spectral::{sobolev_norm, spectral_derivative, Field2, PeriodicGrid, SpectralCoeffs};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

use super::{random_field, rel_diff, wave};

pub const CASES: u32 = 100;

fn runner() -> TestRunner {
    let config = Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

/// (grid, seed, modes) with modes below the Nyquist index.
fn field_params() -> impl Strategy<Value = (PeriodicGrid, u64, usize)> {
    (prop_oneof![Just(16usize), Just(32), Just(64)], 0.5f64..20.0, any::<u64>(), 1usize..64).prop_map(
        |(n, l, seed, m)| (PeriodicGrid::new(n, l).unwrap(), seed, 1 + m % (n / 2 - 1)),
    )
}

fn kernel() -> &'static SemigroupKernel {
    static K: OnceLock<SemigroupKernel> = OnceLock::new();
    K.get_or_init(|| SemigroupKernel::new(wave(), 2, &KernelOptions::default()).unwrap())
}

fn kernel_field(seed: u64) -> Field2 {
    random_field(*kernel().grid(), 20, seed)
}

/// `||f'||^2 <= ||f''|| ||f||`.
pub fn sobolev_interpolation() -> Result<(), String> {
    check(field_params(), |(g, seed, m)| {
        let f = random_field(g, m, seed);
        let d1 = spectral_derivative(&f, 1).unwrap().l2_norm();
        let d2 = spectral_derivative(&f, 2).unwrap().l2_norm();
        let f0 = f.l2_norm();
        prop_assert!(d1 * d1 <= d2 * f0 * (1.0 + 1e-12) + 1e-300, "{} > {}", d1 * d1, d2 * f0);
        let h1 = sobolev_norm(&f, 1).unwrap();
        prop_assert!((h1 * h1 - f0 * f0 - d1 * d1).abs() <= 1e-10 * h1 * h1);
        Ok(())
    })
}

pub fn parseval() -> Result<(), String> {
    check(field_params(), |(g, seed, m)| {
        let f = random_field(g, m, seed);
        let a = f.l2_norm();
        let b = SpectralCoeffs::from_field(&f).l2_norm();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300), "{a} vs {b}");
        Ok(())
    })
}

/// `P_0 P_0 = P_0` on the `N = 2` kernel.
pub fn projection_idempotence() -> Result<(), String> {
    check(any::<u64>(), |seed| {
        let k = kernel();
        let v = kernel_field(seed);
        let p = k.apply_zero_projection(&v).unwrap();
        let pp = k.apply_zero_projection(&p).unwrap();
        let err = pp.sub(&p).unwrap().l2_norm();
        prop_assert!(err <= 1e-10 * (p.l2_norm() + v.l2_norm()), "defect {err:e}");
        Ok(())
    })
}

/// Shifts commute with derivatives, and shifts by `T` with `e^{A t}`.
pub fn translation_equivariance() -> Result<(), String> {
    check((field_params(), -10.0f64..10.0, 0.0f64..5.0), |((g, seed, m), s, t)| {
        let f = random_field(g, m, seed);
        let a = spectral_derivative(&f.translate(s), 1).unwrap();
        let b = spectral_derivative(&f, 1).unwrap().translate(s);
        prop_assert!(a.sub(&b).unwrap().l2_norm() <= 1e-10 * (1.0 + b.l2_norm()));
        let k = kernel();
        let v = kernel_field(seed);
        let period = wave().params.period;
        let lhs = k.apply_semigroup(t, &v.translate(period)).unwrap();
        let rhs = k.apply_semigroup(t, &v).unwrap().translate(period);
        prop_assert!(rel_diff(&lhs, &rhs) <= 1e-10, "semigroup shift defect {:e}", rel_diff(&lhs, &rhs));
        Ok(())
    })
}

/// Real components survive the Fourier and Bloch transforms.
pub fn reality_round_trips() -> Result<(), String> {
    check(field_params(), |(g, seed, m)| {
        let f = random_field(g, m, seed);
        let c = SpectralCoeffs::from_field(&f);
        let scale = c.l2_norm() / g.period().sqrt();
        prop_assert!(c.reality_defect() <= 1e-13 * (1.0 + scale));
        prop_assert!(rel_diff(&c.to_field(), &f) <= 1e-13);
        let split = Field2::from_components(g, &f.re(), &f.im()).unwrap();
        prop_assert_eq!(split.values(), f.values());
        let k = kernel();
        let v = kernel_field(seed);
        let back = k.inverse_bloch(&k.bloch_transform(&v).unwrap());
        prop_assert!(rel_diff(&back, &v) <= 1e-13, "bloch round trip {:e}", rel_diff(&back, &v));
        Ok(())
    })
}

pub fn all() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("sobolev interpolation", sobolev_interpolation()),
        ("parseval", parseval()),
        ("projection idempotence", projection_idempotence()),
        ("translation equivariance", translation_equivariance()),
        ("reality round trips", reality_round_trips()),
    ]
}
