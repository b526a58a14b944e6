mod common;

use lle_core::evolution::{evolve_nonlinear, SimulationConfig};
use lle_core::experiments::{generate_perturbation, PerturbationConfig, PerturbationKind};
use lle_core::modulation::{
    assemble_nonlinearity, inverse_modulated, shifted_samples, solve_modulation, ModulationOptions,
};
use lle_core::semigroup::{KernelOptions, SemigroupKernel};
use lle_core::spectral::{Field2, ScalarField, C64};

use common::{random_field, wave};

fn localized(amplitude: f64, n: usize) -> Field2 {
    let cfg = PerturbationConfig {
        kind: PerturbationKind::Localized,
        amplitude,
        seed: 5,
        width: 1.35,
    };
    generate_perturbation(&cfg, wave(), n)
}

#[test]
fn zero_shift_is_identity() {
    let f = random_field(*wave().grid(), 12, 1);
    let g = shifted_samples(&f, 0.0, &vec![0.0; f.grid().n_points()]);
    assert!(common::rel_diff(&g, &f) < 1e-14);
}

#[test]
fn translates_are_cancelled() {
    let phi = wave();
    let n = 2;
    let ext = phi.field.tile(n);
    let grid = *ext.grid();
    for c in [0.02, 0.3, -1.1] {
        let psi = ext.translate(c);
        let zero = ScalarField::zeros(grid);
        let v = inverse_modulated(&psi, phi, &zero, n as f64 * c, n).unwrap();
        assert!(v.l2_norm() < 1e-10 * ext.l2_norm(), "sigma: c = {c}, |v| = {:e}", v.l2_norm());
        let g = ScalarField::constant(grid, c);
        let v = inverse_modulated(&psi, phi, &g, 0.0, n).unwrap();
        assert!(v.l2_norm() < 1e-10 * ext.l2_norm(), "gamma: c = {c}, |v| = {:e}", v.l2_norm());
    }
}

#[test]
fn nonlinearity_of_zero_and_unmodulated_limit() {
    let phi = wave();
    let n = 2;
    let grid = phi.grid().repeated(n);
    let zero = ScalarField::zeros(grid);
    let parts = assemble_nonlinearity(&Field2::zeros(grid), &zero, &zero, 0.0, phi, n).unwrap();
    assert_eq!(parts.combined.l2_norm(), 0.0);

    let v = localized(1e-2, n);
    let parts = assemble_nonlinearity(&v, &zero, &zero, 0.0, phi, n).unwrap();
    let ext = phi.field.tile(n);
    let i = C64::new(0.0, 1.0);
    let direct: Vec<C64> = v
        .values()
        .iter()
        .zip(ext.values())
        .map(|(&w, &p)| i * (2.0 * w.norm_sqr() * p + w * w * p.conj() + w.norm_sqr() * w))
        .collect();
    let direct = Field2::new(grid, direct).unwrap();
    let err = parts.combined.sub(&direct).unwrap().l2_norm();
    assert!(err <= 1e-12 * direct.l2_norm().max(1e-300), "{err:e}");
}

#[test]
fn nonlinearity_is_quadratic_in_small_data() {
    let phi = wave();
    let n = 2;
    let grid = phi.grid().repeated(n);
    let v = localized(1.0, n);
    let g1 = ScalarField::from_fn(grid, |x| 0.3 * (2.0 * std::f64::consts::PI * x / (n as f64 * phi.params.period)).sin());
    let g2 = ScalarField::from_fn(grid, |x| 0.2 * (2.0 * std::f64::consts::PI * x / (n as f64 * phi.params.period)).cos());
    let size = |e: f64| {
        assemble_nonlinearity(&v.scale(e), &g1.axpby(e, &g1, 0.0), &g2.axpby(e, &g2, 0.0), 0.1 * e, phi, n)
            .unwrap()
            .combined
            .l2_norm()
    };
    let ratio = size(2e-4) / size(1e-4);
    assert!((ratio - 4.0).abs() < 1e-2, "ratio {ratio}");
}

fn run(amplitude: f64, n: usize, t_end: f64, stride: usize) -> (lle_core::evolution::Trajectory, lle_core::modulation::ModulationState) {
    let phi = wave();
    let kernel = SemigroupKernel::new(phi, n, &KernelOptions::default()).unwrap();
    let psi0 = phi.field.tile(n).add(&localized(amplitude, n)).unwrap();
    let cfg = SimulationConfig {
        dt: 5e-3,
        t_end,
        snapshot_stride: stride,
        dealias: false,
        probe_every: 0,
    };
    let traj = evolve_nonlinear(&psi0, &phi.params, &cfg).unwrap();
    let state = solve_modulation(&traj, phi, &kernel, &ModulationOptions::default()).unwrap();
    (traj, state)
}

#[test]
fn unperturbed_wave_has_no_modulation() {
    let (_, s) = run(0.0, 2, 5.0, 20);
    for k in 0..s.len() {
        assert!(s.sigma[k].abs() < 1e-7, "sigma({}) = {:e}", s.times[k], s.sigma[k]);
        assert!(s.gamma(k).linf_norm() < 1e-7);
    }
}

#[test]
fn modulation_vanishes_before_cutoff_and_sigma_t_matches_differences() {
    let (_, s) = run(1e-3, 2, 4.0, 4);
    for k in 0..s.len() {
        if s.times[k] <= 1.0 {
            assert_eq!(s.sigma[k], 0.0, "t = {}", s.times[k]);
            assert!(s.gamma_hat[k].iter().all(|c| c.norm() == 0.0));
        }
    }
    let h = s.times[1] - s.times[0];
    let scale = s.sigma_t.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(scale > 0.0);
    for k in 1..s.len() - 1 {
        if s.times[k] < 2.2 {
            // the cutoff is only C^3 at t = 1 and t = 2
            continue;
        }
        let fd = (s.sigma[k + 1] - s.sigma[k - 1]) / (2.0 * h);
        assert!((fd - s.sigma_t[k]).abs() <= 1e-2 * scale, "t = {}: {fd:e} vs {:e}", s.times[k], s.sigma_t[k]);
    }
}
