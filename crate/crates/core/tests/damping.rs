mod common;

use lle_core::damping::{memory_recursive, memory_trapezoid, modulated_energy, norm_equivalence};
use lle_core::spectral::{Field2, PeriodicGrid, ScalarField};

use common::{random_field, wave};

#[test]
fn energy_against_closed_form_derivatives() {
    let l = 7.0;
    let k = 2.0 * std::f64::consts::PI / l;
    let g = PeriodicGrid::new(128, l).unwrap();
    let v = Field2::from_fn(g, |x| (0.3 * (k * x).sin(), 0.1 * (2.0 * k * x).cos()));
    let vx = |x: f64| (0.3 * k * (k * x).cos(), -0.2 * k * (2.0 * k * x).sin());
    let vxx = |x: f64| (-0.3 * k * k * (k * x).sin(), -0.4 * k * k * (2.0 * k * x).cos());
    let phi = Field2::from_fn(g, |x| (1.0 + 0.4 * (k * x).cos(), 0.2 * (k * x).sin()));
    let beta = -1.0;
    // ||v_xx||^2 + (1/beta) int Re(conj(phi)^2 v_x^2), by the trapezoid rule
    let h = g.spacing();
    let mut exact = 0.0;
    for (j, x) in g.nodes().into_iter().enumerate() {
        let (a, b) = vxx(x);
        let (c, d) = vx(x);
        let w = lle_core::spectral::C64::new(c, d);
        let p = phi.values()[j].conj();
        exact += h * (a * a + b * b + (p * p * w * w).re / beta);
    }
    let e = modulated_energy(&v, &phi, beta).unwrap();
    assert!((e - exact).abs() <= 1e-10 * exact.abs(), "{e} vs {exact}");
}

#[test]
fn energy_is_quadratic_and_vanishes_on_constants() {
    let phi = wave();
    let v = random_field(*phi.grid(), 10, 4);
    let e1 = modulated_energy(&v, &phi.field, phi.params.beta).unwrap();
    let e3 = modulated_energy(&v.scale(3.0), &phi.field, phi.params.beta).unwrap();
    assert!((e3 - 9.0 * e1).abs() <= 1e-12 * e3.abs());
    let c = Field2::from_fn(*phi.grid(), |_| (0.7, -0.2));
    assert!(modulated_energy(&c, &phi.field, phi.params.beta).unwrap().abs() < 1e-14);
}

#[test]
fn memory_solves_its_differential_equation() {
    let h = 1e-3;
    let t: Vec<f64> = (0..5000).map(|k| h * k as f64).collect();
    let g: Vec<f64> = t.iter().map(|s| (1.0 + s).powf(-0.5) * (1.0 + 0.3 * s.sin())).collect();
    let m = memory_recursive(&t, &g);
    let trap = memory_trapezoid(&t, &g);
    for k in 1..t.len() - 1 {
        let fd = (m[k + 1] - m[k - 1]) / (2.0 * h);
        assert!((fd + m[k] - g[k]).abs() <= 1e-6, "t = {}", t[k]);
        assert!((m[k] - trap[k]).abs() <= 1e-12);
    }
}

#[test]
fn norm_equivalence_trivial_and_degenerate() {
    let phi = wave();
    let n = 2;
    let ext = phi.field.tile(n);
    let grid = *ext.grid();
    let zero = ScalarField::zeros(grid);
    let e = norm_equivalence(&ext, phi, &zero, 0.0, n).unwrap();
    assert!(e.degenerate);
    assert_eq!((e.h2_ratio, e.l2_ratio), (1.0, 1.0));
    let psi = ext.add(&random_field(grid, 20, 2).scale(1e-3)).unwrap();
    let e = norm_equivalence(&psi, phi, &zero, 0.0, n).unwrap();
    assert!(!e.degenerate);
    assert!((e.h2_ratio - 1.0).abs() < 1e-12 && (e.l2_ratio - 1.0).abs() < 1e-12, "{e:?}");
}
