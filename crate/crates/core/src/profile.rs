//! Stationary periodic waves: the profile residual, its linearization, a
//! bordered Newton solver and natural-parameter continuation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{Field2, PeriodicGrid, SpectralError, C64};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("Newton did not converge in {iters} iterations (residual {residual:.3e})")]
    NoConvergence { iters: usize, residual: f64 },
    #[error("singular Jacobian at iteration {0}; try continuation past the fold")]
    SingularJacobian(usize),
    #[error("profile not certified: {0}")]
    NotCertified(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("serialization: {0}")]
    Serde(String),
}

/// Physical parameters `(alpha, beta, F)` and the fundamental period `T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LLEParams {
    pub alpha: f64,
    pub beta: f64,
    pub forcing: f64,
    pub period: f64,
}

impl LLEParams {
    pub fn new(alpha: f64, beta: f64, forcing: f64, period: f64) -> Result<Self, ProfileError> {
        let p = Self {
            alpha,
            beta,
            forcing,
            period,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let all_finite = [self.alpha, self.beta, self.forcing, self.period].iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(ProfileError::InvalidParams("non-finite parameter".into()));
        }
        if self.beta == 0.0 {
            return Err(ProfileError::InvalidParams("beta must be nonzero".into()));
        }
        if self.forcing <= 0.0 {
            return Err(ProfileError::InvalidParams("forcing must be positive".into()));
        }
        if self.period <= 0.0 {
            return Err(ProfileError::InvalidParams("period must be positive".into()));
        }
        Ok(())
    }

    /// Fundamental wavenumber `2 pi / T`.
    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.period
    }
}

/// Where a profile came from on a continuation branch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BranchMeta {
    pub parameter: Option<String>,
    pub parent_value: Option<f64>,
    pub newton_iterations: usize,
}

/// A certified `T`-periodic stationary solution.
#[derive(Clone, Debug)]
pub struct WaveProfile {
    pub params: LLEParams,
    pub field: Field2,
    pub residual_norm: f64,
    pub tail_ratio: f64,
    pub branch: BranchMeta,
}

/// Residual bound every certified profile satisfies.
pub const CERTIFIED_RESIDUAL: f64 = 1e-9;
/// Relative size allowed for the top 10% of Fourier modes.
pub const CERTIFIED_TAIL: f64 = 1e-8;

impl WaveProfile {
    /// Re-verify residual and smoothness from scratch.
    pub fn certify(params: LLEParams, field: Field2, branch: BranchMeta) -> Result<Self, ProfileError> {
        params.validate()?;
        if (field.grid().period() - params.period).abs() > 1e-12 * params.period {
            return Err(ProfileError::NotCertified("grid period differs from T".into()));
        }
        let residual_norm = profile_residual(&field, &params).l2_norm();
        let tail_ratio = field.coeffs().tail_ratio(0.1);
        if !(residual_norm < CERTIFIED_RESIDUAL) {
            return Err(ProfileError::NotCertified(format!("residual {residual_norm:.3e}")));
        }
        if !(tail_ratio < CERTIFIED_TAIL) {
            return Err(ProfileError::NotCertified(format!("spectral tail {tail_ratio:.3e}")));
        }
        Ok(Self {
            params,
            field,
            residual_norm,
            tail_ratio,
            branch,
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.field.grid()
    }

    /// `phi'` on one period.
    pub fn derivative(&self) -> Field2 {
        self.field.derivative_unchecked(1)
    }

    /// Amplitude of the first harmonic, a non-constancy indicator.
    pub fn first_harmonic(&self) -> f64 {
        let c = self.field.coeffs();
        c.r[1].norm().max(c.i[1].norm())
    }

    pub fn to_json(&self) -> String {
        let c = self.field.coeffs();
        let rec = ProfileRecord {
            params: self.params,
            n_points: self.grid().n_points(),
            coeff_r: c.r.iter().map(|z| [z.re, z.im]).collect(),
            coeff_i: c.i.iter().map(|z| [z.re, z.im]).collect(),
            residual_norm: self.residual_norm,
            tail_ratio: self.tail_ratio,
            branch: self.branch.clone(),
        };
        serde_json::to_string_pretty(&rec).expect("profile record serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ProfileError> {
        let rec: ProfileRecord = serde_json::from_str(s).map_err(|e| ProfileError::Serde(e.to_string()))?;
        let grid = PeriodicGrid::new(rec.n_points, rec.params.period)?;
        if rec.coeff_r.len() != rec.n_points || rec.coeff_i.len() != rec.n_points {
            return Err(ProfileError::Serde("coefficient count mismatch".into()));
        }
        let packed: Vec<C64> = rec
            .coeff_r
            .iter()
            .zip(&rec.coeff_i)
            .map(|(a, b)| C64::new(a[0], a[1]) + C64::new(0.0, 1.0) * C64::new(b[0], b[1]))
            .collect();
        let values = crate::spectral::ifft(&packed);
        let field = Field2::new(grid, values)?;
        Self::certify(rec.params, field, rec.branch)
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    params: LLEParams,
    n_points: usize,
    coeff_r: Vec<[f64; 2]>,
    coeff_i: Vec<[f64; 2]>,
    residual_norm: f64,
    tail_ratio: f64,
    branch: BranchMeta,
}

/// `-i beta phi'' - (1 + i alpha) phi + i |phi|^2 phi + F` in packed form.
pub fn profile_residual(phi: &Field2, params: &LLEParams) -> Field2 {
    let d2 = phi.derivative_unchecked(2);
    let i = C64::new(0.0, 1.0);
    let a = C64::new(1.0, params.alpha);
    let values = phi
        .values()
        .iter()
        .zip(d2.values())
        .map(|(&p, &pxx)| -i * params.beta * pxx - a * p + i * p.norm_sqr() * p + params.forcing)
        .collect();
    Field2::from_raw(*phi.grid(), values)
}

/// The linearization `A[phi] = -I + J L[phi]`, acting on fields over any
/// whole number of periods of `phi`.
#[derive(Clone, Debug)]
pub struct LinearizedOperator {
    phi: Field2,
    alpha: f64,
    beta: f64,
}

pub fn linearized_operator(phi: &WaveProfile) -> LinearizedOperator {
    LinearizedOperator::new(&phi.field, &phi.params)
}

impl LinearizedOperator {
    pub fn new(phi: &Field2, params: &LLEParams) -> Self {
        Self {
            phi: phi.clone(),
            alpha: params.alpha,
            beta: params.beta,
        }
    }

    /// The same operator on `n` copies of the period.
    pub fn on_periods(&self, n: usize) -> Self {
        Self {
            phi: self.phi.tile(n),
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.phi.grid()
    }

    /// `A v = -v + i(-beta v'' - alpha v + 2|phi|^2 v + phi^2 conj(v))`.
    pub fn apply(&self, v: &Field2) -> Result<Field2, SpectralError> {
        if !v.grid().same_as(self.phi.grid()) {
            return Err(SpectralError::GridMismatch);
        }
        let vxx = v.derivative_unchecked(2);
        let i = C64::new(0.0, 1.0);
        let values = v
            .values()
            .iter()
            .zip(vxx.values())
            .zip(self.phi.values())
            .map(|((&w, &wxx), &p)| {
                let l = -wxx * self.beta - w * self.alpha + w * (2.0 * p.norm_sqr()) + p * p * w.conj();
                -w + i * l
            })
            .collect();
        Ok(Field2::from_raw(*v.grid(), values))
    }

    /// Dense real matrix on the nodal values ordered `[f_r; f_i]`.
    pub fn dense(&self) -> DMatrix<f64> {
        let grid = *self.phi.grid();
        let n = grid.n_points();
        let d2 = crate::spectral::second_derivative_matrix(&grid);
        let mut a = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for i in 0..n {
            let p = self.phi.values()[i];
            let (r, im) = (p.re, p.im);
            let b11 = 3.0 * r * r + im * im;
            let b12 = 2.0 * r * im;
            let b22 = r * r + 3.0 * im * im;
            for j in 0..n {
                // L11 = -beta D2 - alpha + b11, L22 = -beta D2 - alpha + b22, L12 = L21 = b12.
                let dd = -self.beta * d2[i][j];
                let diag = if i == j { 1.0 } else { 0.0 };
                let l11 = dd + diag * (-self.alpha + b11);
                let l22 = dd + diag * (-self.alpha + b22);
                let l12 = diag * b12;
                // A = -I + J L with J = [[0,-1],[1,0]].
                a[(i, j)] = -diag - l12;
                a[(i, n + j)] = -l22;
                a[(n + i, j)] = l11;
                a[(n + i, n + j)] = -diag + l12;
            }
        }
        a
    }
}

pub(crate) fn flatten(f: &Field2) -> DVector<f64> {
    let n = f.grid().n_points();
    DVector::from_fn(2 * n, |k, _| if k < n { f.values()[k].re } else { f.values()[k - n].im })
}

pub(crate) fn unflatten(grid: PeriodicGrid, v: &DVector<f64>) -> Field2 {
    let n = grid.n_points();
    Field2::from_raw(grid, (0..n).map(|k| C64::new(v[k], v[n + k])).collect())
}

/// Newton controls.
#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub max_iters: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { max_iters: 50 }
    }
}

pub const DEFAULT_TOL: f64 = 1e-11;

/// Newton iteration on the profile equation with the phase pinned against
/// the current iterate's derivative when that derivative is nontrivial.
pub fn solve_profile(guess: &Field2, params: &LLEParams, tol: f64) -> Result<WaveProfile, ProfileError> {
    solve_profile_with(guess, params, tol, NewtonOptions::default())
}

pub fn solve_profile_with(
    guess: &Field2,
    params: &LLEParams,
    tol: f64,
    opts: NewtonOptions,
) -> Result<WaveProfile, ProfileError> {
    params.validate()?;
    if tol < 1e-12 {
        return Err(ProfileError::InvalidParams(format!("tol {tol:e} below 1e-12")));
    }
    let grid = *guess.grid();
    if (grid.period() - params.period).abs() > 1e-12 * params.period {
        return Err(ProfileError::InvalidParams("guess grid period differs from T".into()));
    }
    let n2 = 2 * grid.n_points();
    let mut phi = guess.clone();
    let mut last = f64::INFINITY;
    for it in 0..=opts.max_iters {
        let g = profile_residual(&phi, params);
        let res = g.l2_norm();
        log::debug!("newton iter {it}: residual {res:.3e} (ratio to previous squared {:.3e})", res / (last * last));
        if res < tol {
            let branch = BranchMeta {
                newton_iterations: it,
                ..Default::default()
            };
            return WaveProfile::certify(*params, phi, branch);
        }
        if it == opts.max_iters || !res.is_finite() {
            return Err(ProfileError::NoConvergence { iters: it, residual: res });
        }
        last = res;
        let jac = LinearizedOperator::new(&phi, params).dense();
        let rhs = -flatten(&g);
        let dphi = phi.derivative_unchecked(1);
        let pin = dphi.l2_norm() > 1e-8 * phi.l2_norm().max(1.0);
        let step = if pin {
            let p = flatten(&dphi);
            let p = &p / p.norm();
            let mut m = DMatrix::<f64>::zeros(n2 + 1, n2 + 1);
            m.view_mut((0, 0), (n2, n2)).copy_from(&jac);
            for k in 0..n2 {
                m[(k, n2)] = p[k];
                m[(n2, k)] = p[k];
            }
            let mut b = DVector::<f64>::zeros(n2 + 1);
            b.rows_mut(0, n2).copy_from(&rhs);
            let sol = m.lu().solve(&b).ok_or(ProfileError::SingularJacobian(it))?;
            sol.rows(0, n2).into_owned()
        } else {
            jac.lu().solve(&rhs).ok_or(ProfileError::SingularJacobian(it))?
        };
        if !step.iter().all(|v| v.is_finite()) {
            return Err(ProfileError::SingularJacobian(it));
        }
        let upd = unflatten(grid, &step);
        phi = phi.add(&upd)?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Real roots `rho = |phi|^2` of `F^2 = rho (1 + (alpha - rho)^2)`, ascending.
pub fn constant_states(alpha: f64, forcing: f64) -> Vec<f64> {
    // rho^3 - 2 alpha rho^2 + (1 + alpha^2) rho - F^2 = 0
    let (b, c, d) = (-2.0 * alpha, 1.0 + alpha * alpha, -forcing * forcing);
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = if disc > 0.0 {
        let s = disc.sqrt();
        vec![(-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt() + shift]
    } else {
        let r = (-p / 3.0).sqrt();
        let arg = if r > 0.0 { (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0) } else { 0.0 };
        let th = arg.acos();
        (0..3)
            .map(|k| 2.0 * r * ((th - 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift)
            .collect()
    };
    let f = |x: f64| ((x + b) * x + c) * x + d;
    let df = |x: f64| (3.0 * x + 2.0 * b) * x + c;
    for r in roots.iter_mut() {
        for _ in 0..4 {
            let der = df(*r);
            if der != 0.0 {
                *r -= f(*r) / der;
            }
        }
    }
    roots.retain(|r| *r > 0.0 && r.is_finite());
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    roots
}

/// The homogeneous state with `|phi|^2 = rho`: `phi = F / (1 + i(alpha - rho))`.
pub fn constant_state(params: &LLEParams, rho: f64) -> C64 {
    C64::new(params.forcing, 0.0) / C64::new(1.0, params.alpha - rho)
}

pub fn constant_field(grid: PeriodicGrid, c: C64) -> Field2 {
    Field2::from_raw(grid, vec![c; grid.n_points()])
}

/// Real 2x2 symbol `-I + J((beta kappa^2 - alpha) I + B(c))` of the
/// linearization at a constant state, acting on mode `e^{i kappa x}`.
pub fn constant_state_symbol(params: &LLEParams, c: C64, kappa: f64) -> [[f64; 2]; 2] {
    let s = params.beta * kappa * kappa - params.alpha;
    let (r, i) = (c.re, c.im);
    let l11 = s + 3.0 * r * r + i * i;
    let l22 = s + r * r + 3.0 * i * i;
    let l12 = 2.0 * r * i;
    [[-1.0 - l12, -l22], [l11, -1.0 + l12]]
}

/// Closed-form eigenvalues `-1 +- sqrt(-(q - rho)(q + rho))`,
/// `q = beta kappa^2 - alpha + 2 rho`.
pub fn constant_state_eigenvalues(params: &LLEParams, rho: f64, kappa: f64) -> [C64; 2] {
    let q = params.beta * kappa * kappa - params.alpha + 2.0 * rho;
    let det = (q - rho) * (q + rho);
    let root = C64::new(-det, 0.0).sqrt();
    [C64::new(-1.0, 0.0) + root, C64::new(-1.0, 0.0) - root]
}

/// Constant state plus `eps cos(K x) w`, with `w` the real direction of the
/// most unstable (or least stable) eigenvector of the symbol at `K`.
pub fn harmonic_seed(params: &LLEParams, n_points: usize, rho: f64, eps: f64) -> Result<Field2, ProfileError> {
    let grid = PeriodicGrid::new(n_points, params.period)?;
    let c = constant_state(params, rho);
    let k = params.wavenumber();
    let s = constant_state_symbol(params, c, k);
    let lam = constant_state_eigenvalues(params, rho, k)
        .into_iter()
        .max_by(|a, b| a.re.partial_cmp(&b.re).unwrap())
        .unwrap();
    let (mut wr, mut wi) = if s[0][1].abs() > 1e-14 {
        (C64::new(s[0][1], 0.0), lam - s[0][0])
    } else {
        (lam - s[1][1], C64::new(s[1][0], 0.0))
    };
    let nrm = (wr.norm_sqr() + wi.norm_sqr()).sqrt().max(1e-300);
    wr /= nrm;
    wi /= nrm;
    Ok(Field2::from_fn(grid, |x| {
        let cs = (k * x).cos();
        (c.re + eps * cs * wr.re, c.im + eps * cs * wi.re)
    }))
}

/// Which parameter a continuation run moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationParameter {
    Forcing,
    Alpha,
}

#[derive(Debug, Error)]
#[error("continuation aborted at step {step}: {source}")]
pub struct ContinuationError {
    pub step: usize,
    #[source]
    pub source: ProfileError,
    /// Profiles computed before the failure, starting with the start point.
    pub completed: Vec<WaveProfile>,
}

/// Natural-parameter continuation; element 0 of the result is `start`.
pub fn continuation_sweep(
    start: &WaveProfile,
    parameter: ContinuationParameter,
    step: f64,
    n_steps: usize,
) -> Result<Vec<WaveProfile>, ContinuationError> {
    let mut branch = vec![start.clone()];
    for s in 1..=n_steps {
        let prev = branch.last().unwrap();
        let mut params = prev.params;
        let parent = match parameter {
            ContinuationParameter::Forcing => {
                params.forcing += step;
                prev.params.forcing
            }
            ContinuationParameter::Alpha => {
                params.alpha += step;
                prev.params.alpha
            }
        };
        match solve_profile(&prev.field, &params, DEFAULT_TOL) {
            Ok(mut p) => {
                p.branch.parameter = Some(
                    match parameter {
                        ContinuationParameter::Forcing => "forcing",
                        ContinuationParameter::Alpha => "alpha",
                    }
                    .to_string(),
                );
                p.branch.parent_value = Some(parent);
                branch.push(p);
            }
            Err(e) => {
                log::warn!("continuation stopped at step {s}: {e}");
                return Err(ContinuationError {
                    step: s,
                    source: e,
                    completed: branch,
                });
            }
        }
    }
    Ok(branch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> LLEParams {
        LLEParams::new(1.0, -1.0, 1.2, 5.5).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(LLEParams::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(LLEParams::new(1.0, 1.0, -1.0, 1.0).is_err());
        assert!(LLEParams::new(1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn zero_field_zero_forcing() {
        let p = LLEParams {
            alpha: 0.3,
            beta: 1.0,
            forcing: 0.0,
            period: 2.0,
        };
        let g = PeriodicGrid::new(16, 2.0).unwrap();
        assert_eq!(profile_residual(&Field2::zeros(g), &p).linf_norm(), 0.0);
    }

    #[test]
    fn constant_state_identity() {
        let c = C64::new(0.7, -0.4);
        let alpha = 0.8;
        // F := (1 + i alpha) c - i |c|^2 c, evaluated as a complex number.
        let f = C64::new(1.0, alpha) * c - C64::new(0.0, 1.0) * c.norm_sqr() * c;
        let g = PeriodicGrid::new(8, 3.0).unwrap();
        let phi = constant_field(g, c);
        let i = C64::new(0.0, 1.0);
        let a = C64::new(1.0, alpha);
        for v in phi.values() {
            let r = -a * v + i * v.norm_sqr() * v + f;
            assert!(r.norm() < 1e-14);
        }
    }

    #[test]
    fn cubic_roots_satisfy_response_curve() {
        for &(alpha, f) in &[(1.0, 1.2), (3.0, 1.8), (4.0, 2.5), (-1.0, 0.5)] {
            let roots = constant_states(alpha, f);
            assert!(!roots.is_empty());
            for r in roots {
                let lhs = r * (1.0 + (alpha - r) * (alpha - r));
                assert!((lhs - f * f).abs() < 1e-12 * f * f);
            }
        }
        assert_eq!(constant_states(3.0, 1.8).len(), 3);
    }

    #[test]
    fn exact_constant_converges_immediately() {
        let p = params();
        let rho = constant_states(p.alpha, p.forcing)[0];
        let g = PeriodicGrid::new(64, p.period).unwrap();
        let w = solve_profile(&constant_field(g, constant_state(&p, rho)), &p, 1e-11).unwrap();
        assert!(w.branch.newton_iterations <= 1);
        assert!(w.residual_norm < 1e-13);
    }

    #[test]
    fn dense_matches_matrix_free() {
        let p = params();
        let g = PeriodicGrid::new(32, p.period).unwrap();
        let phi = Field2::from_fn(g, |x| (1.0 + 0.3 * (x * 1.1).cos(), 0.2 * (x * 1.1).sin()));
        let op = LinearizedOperator::new(&phi, &p);
        let v = Field2::from_fn(g, |x| ((2.0 * x).sin(), (3.4 * x).cos() + 0.1));
        let a = op.apply(&v).unwrap();
        let b = unflatten(g, &(op.dense() * flatten(&v)));
        assert!(a.sub(&b).unwrap().linf_norm() < 1e-10);
    }
}
