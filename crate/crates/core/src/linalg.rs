//! Dense complex linear algebra on top of nalgebra: spectra, eigenvectors,
//! inverse iteration and the matrix exponential.

use nalgebra::{DMatrix, DVector};

use crate::spectral::C64;

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

const SCHUR_MAX_ITER: usize = 0; // 0 = nalgebra's default

/// Complex Schur factors `A = Q T Q^H`.
pub fn schur(a: &CMatrix) -> Option<(CMatrix, CMatrix)> {
    let s = nalgebra::linalg::Schur::try_new(a.clone(), f64::EPSILON, SCHUR_MAX_ITER)?;
    Some(s.unpack())
}

/// All eigenvalues of a dense complex matrix.
pub fn eigenvalues(a: &CMatrix) -> Option<Vec<C64>> {
    let (_, t) = schur(a)?;
    Some((0..t.nrows()).map(|i| t[(i, i)]).collect())
}

/// Eigenvalues with unit-norm right eigenvectors (columns), from the Schur
/// form by triangular back-substitution.
pub fn eigen(a: &CMatrix) -> Option<(Vec<C64>, CMatrix)> {
    let (q, t) = schur(a)?;
    let n = t.nrows();
    let scale = t.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
    let small = f64::EPSILON * scale;
    let mut y = CMatrix::zeros(n, n);
    for k in 0..n {
        let lam = t[(k, k)];
        y[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in i + 1..=k {
                s += t[(i, j)] * y[(j, k)];
            }
            let mut d = t[(i, i)] - lam;
            if d.norm() < small {
                d = C64::new(small, 0.0);
            }
            y[(i, k)] = -s / d;
        }
    }
    let mut v = q * y;
    for k in 0..n {
        let nrm = v.column(k).norm();
        if nrm > 0.0 {
            v.column_mut(k).unscale_mut(nrm);
        }
    }
    Some(((0..n).map(|i| t[(i, i)]).collect(), v))
}

/// Refine an eigenpair near `shift` by inverse iteration; returns the Rayleigh
/// quotient and the unit eigenvector.
pub fn inverse_iteration(a: &CMatrix, shift: C64, start: &CVector, iters: usize) -> Option<(C64, CVector)> {
    let n = a.nrows();
    let scale = a.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1.0);
    // Nudge the shift so the factorization is not exactly singular.
    let mut m = a.clone();
    let nudge = C64::new(1e-13 * scale, 1e-13 * scale);
    for i in 0..n {
        m[(i, i)] -= shift + nudge;
    }
    let lu = m.lu();
    let mut x = start.clone();
    let nrm = x.norm();
    if nrm == 0.0 {
        return None;
    }
    x.unscale_mut(nrm);
    for _ in 0..iters {
        let mut y = lu.solve(&x)?;
        let nrm = y.norm();
        if !nrm.is_finite() || nrm == 0.0 {
            return None;
        }
        y.unscale_mut(nrm);
        x = y;
    }
    let ax = a * &x;
    let lam = x.dotc(&ax);
    Some((lam, x))
}

pub fn conj_transpose(a: &CMatrix) -> CMatrix {
    a.adjoint()
}

fn one_norm(a: &CMatrix) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|c| c.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// Matrix exponential by scaling and squaring with the degree-13 Pade
/// approximant.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let norm = one_norm(a);
    if norm == 0.0 {
        return CMatrix::identity(n, n);
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a.unscale(2f64.powi(s));
    let b = PADE13;
    let id = CMatrix::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let c = |x: f64| C64::new(x, 0.0);
    let u_inner = &a6 * (&a6 * c(b[13]) + &a4 * c(b[11]) + &a2 * c(b[9]))
        + &a6 * c(b[7])
        + &a4 * c(b[5])
        + &a2 * c(b[3])
        + &id * c(b[1]);
    let u = &a * u_inner;
    let v = &a6 * (&a6 * c(b[12]) + &a4 * c(b[10]) + &a2 * c(b[8]))
        + &a6 * c(b[6])
        + &a4 * c(b[4])
        + &a2 * c(b[2])
        + &id * c(b[0]);
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Pade denominator is nonsingular after scaling");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}
