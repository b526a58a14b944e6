//! Phase modulation `(sigma, gamma)` of a nonlinear trajectory, the inverse-
//! and forward-modulated perturbations, and the quasilinear nonlinearity
//! driving the modulated Duhamel system.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evolution::Trajectory;
use crate::fit;
use crate::profile::WaveProfile;
use crate::semigroup::{phase_field_on, BlochCoeffs, SemigroupError, SemigroupKernel};
use crate::spectral::{
    derivative_values, fft, ifft, trig_interpolate, Field2, PeriodicGrid, ScalarField, SpectralError, C64,
};

#[derive(Debug, Error)]
pub enum ModulationError {
    #[error("|gamma_x| = {value:.3e} exceeds the cap {cap} at t = {time}")]
    ConstraintViolated { time: f64, value: f64, cap: f64 },
    #[error("iterate norm {value:.3e} exceeds the cap {cap}")]
    IterateCap { value: f64, cap: f64 },
    #[error("Picard iteration diverged (updates {history:?})")]
    FixedPointDiverged { history: Vec<f64> },
    #[error("Picard iteration did not reach {tol:e} in {iters} sweeps (last update {last:.3e})")]
    NoConvergence { iters: usize, tol: f64, last: f64 },
    #[error("initial perturbation size {size:.3e} exceeds the small-data threshold {threshold:.3e}")]
    NotSmall { size: f64, threshold: f64 },
    #[error("trajectory/kernel mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Samples of `f(x + c + r(x))` for a band-limited `f`.
///
/// The uniform part `c` is applied exactly in Fourier space; the remaining
/// small shift is summed as a Taylor series of the trigonometric interpolant.
/// Large shifts fall back to direct evaluation of the interpolant.
pub fn shifted_samples(f: &Field2, c: f64, r: &[f64]) -> Field2 {
    let grid = *f.grid();
    let n = grid.n_points();
    assert_eq!(r.len(), n, "shift field must live on the grid of f");
    let fc = f.translate(c);
    let rmax = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if rmax == 0.0 {
        return fc;
    }
    let kmax = std::f64::consts::PI / grid.spacing();
    if rmax * kmax > 2.0 {
        let nodes = grid.nodes();
        let pts: Vec<f64> = nodes.iter().zip(r).map(|(x, rv)| x + c + rv).collect();
        let vals = trig_interpolate(f, &pts);
        return Field2::from_components(
            grid,
            &vals.iter().map(|v| v.0).collect::<Vec<_>>(),
            &vals.iter().map(|v| v.1).collect::<Vec<_>>(),
        )
        .expect("interpolated values are finite");
    }
    let coeffs = fft(fc.values());
    let scale = fc.linf_norm().max(f64::MIN_POSITIVE);
    let mut acc: Vec<C64> = fc.values().to_vec();
    let mut rpow: Vec<f64> = vec![1.0; n];
    let mut fact = 1.0;
    for order in 1..80 {
        fact *= order as f64;
        for (p, rv) in rpow.iter_mut().zip(r) {
            *p *= rv;
        }
        let mut c = coeffs.clone();
        for (j, ck) in c.iter_mut().enumerate() {
            if order % 2 == 1 && j == n / 2 {
                *ck = C64::new(0.0, 0.0);
            } else {
                *ck *= C64::new(0.0, grid.wavenumber(j)).powu(order as u32);
            }
        }
        let d = ifft(&c);
        let mut worst = 0.0f64;
        for ((a, dv), p) in acc.iter_mut().zip(&d).zip(&rpow) {
            let term = dv * (p / fact);
            worst = worst.max(term.norm());
            *a += term;
        }
        if worst < 1e-17 * scale {
            break;
        }
    }
    Field2::new(grid, acc).expect("shifted samples are finite")
}

fn check_gamma_x(gamma: &ScalarField, cap: f64, time: f64) -> Result<ScalarField, ModulationError> {
    let gx = gamma.derivative(1);
    let value = gx.linf_norm();
    if value > cap {
        return Err(ModulationError::ConstraintViolated { time, value, cap });
    }
    Ok(gx)
}

/// `v(x) = psi(x - gamma(x) - sigma/N) - phi(x)`.
pub fn inverse_modulated(
    psi: &Field2,
    phi: &WaveProfile,
    gamma: &ScalarField,
    sigma: f64,
    n: usize,
) -> Result<Field2, ModulationError> {
    check_gamma_x(gamma, 0.5, f64::NAN)?;
    let phi_ext = phi.field.tile(n);
    if !psi.grid().same_as(phi_ext.grid()) || !gamma.grid().same_as(psi.grid()) {
        return Err(SpectralError::GridMismatch.into());
    }
    let r: Vec<f64> = gamma.values().iter().map(|g| -g).collect();
    Ok(shifted_samples(psi, -sigma / n as f64, &r).sub(&phi_ext)?)
}

/// `v_ring(x) = psi(x) - phi(x + gamma(x) + sigma/N)`.
pub fn forward_modulated(
    psi: &Field2,
    phi: &WaveProfile,
    gamma: &ScalarField,
    sigma: f64,
    n: usize,
) -> Result<Field2, ModulationError> {
    Ok(psi.sub(&forward_profile(phi, gamma, sigma, n)?)?)
}

/// `phi_ring(x) = phi(x + gamma(x) + sigma/N)` on `[0, N T]`.
pub fn forward_profile(phi: &WaveProfile, gamma: &ScalarField, sigma: f64, n: usize) -> Result<Field2, ModulationError> {
    let phi_ext = phi.field.tile(n);
    if !gamma.grid().same_as(phi_ext.grid()) {
        return Err(SpectralError::GridMismatch.into());
    }
    Ok(shifted_samples(&phi_ext, sigma / n as f64, gamma.values()))
}

/// The unmodulated, inverse-modulated and forward-modulated perturbations.
#[derive(Clone, Debug)]
pub struct PerturbationTriple {
    pub unmodulated: Field2,
    pub inverse_modulated: Field2,
    pub forward_modulated: Field2,
}

impl PerturbationTriple {
    pub fn new(psi: &Field2, phi: &WaveProfile, gamma: &ScalarField, sigma: f64, n: usize) -> Result<Self, ModulationError> {
        Ok(Self {
            unmodulated: psi.sub(&phi.field.tile(n))?,
            inverse_modulated: inverse_modulated(psi, phi, gamma, sigma, n)?,
            forward_modulated: forward_modulated(psi, phi, gamma, sigma, n)?,
        })
    }
}

/// The parts `Q`, `R`, `P` and `N = Q + R_x + P_xx`.
#[derive(Clone, Debug)]
pub struct NonlinearityParts {
    pub q: Field2,
    pub r: Field2,
    pub p: Field2,
    pub combined: Field2,
}

/// Evaluate the modulated nonlinearity for `v` on `[0, N T]`.
pub fn assemble_nonlinearity(
    v: &Field2,
    gamma: &ScalarField,
    gamma_t: &ScalarField,
    sigma_t: f64,
    phi: &WaveProfile,
    n: usize,
) -> Result<NonlinearityParts, ModulationError> {
    let phi_ext = phi.field.tile(n);
    let dphi_ext = phi.derivative().tile(n);
    let grid = *v.grid();
    if !grid.same_as(phi_ext.grid()) || !gamma.grid().same_as(&grid) || !gamma_t.grid().same_as(&grid) {
        return Err(SpectralError::GridMismatch.into());
    }
    let gx = check_gamma_x(gamma, 0.5, f64::NAN)?;
    let gxx = gamma.derivative(2);
    Ok(nonlinearity_with(v, &gx, &gxx, gamma_t, sigma_t, &phi_ext, &dphi_ext, phi.params.beta, n))
}

#[allow(clippy::too_many_arguments)]
fn nonlinearity_with(
    v: &Field2,
    gx: &ScalarField,
    gxx: &ScalarField,
    gt: &ScalarField,
    sigma_t: f64,
    phi_ext: &Field2,
    dphi_ext: &Field2,
    beta: f64,
    n: usize,
) -> NonlinearityParts {
    let i = C64::new(0.0, 1.0);
    let grid = *v.grid();
    let np = grid.n_points();
    let mut q = Vec::with_capacity(np);
    let mut r = Vec::with_capacity(np);
    let mut p = Vec::with_capacity(np);
    let st = sigma_t / n as f64;
    for j in 0..np {
        let vv = v.values()[j];
        let ph = phi_ext.values()[j];
        let dph = dphi_ext.values()[j];
        let (gxj, gxxj, gtj) = (gx.values()[j], gxx.values()[j], gt.values()[j]);
        let om = 1.0 - gxj;
        let m2 = vv.norm_sqr();
        q.push(i * (2.0 * m2 * ph + vv * vv * ph.conj() + m2 * vv) * om);
        r.push(-vv * (gtj + st) + i * beta * (vv * (gxxj / (om * om)) - dph * (gxj * gxj / om)));
        p.push(-i * beta * vv * (gxj + gxj / om));
    }
    let rx = derivative_values(&grid, &r, 1);
    let pxx = derivative_values(&grid, &p, 2);
    let combined: Vec<C64> = (0..np).map(|j| q[j] + rx[j] + pxx[j]).collect();
    let mk = |v: Vec<C64>| Field2::new(grid, v).expect("nonlinearity is finite");
    NonlinearityParts {
        q: mk(q),
        r: mk(r),
        p: mk(p),
        combined: mk(combined),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulationOptions {
    /// Stop when `sup_t (||gamma_new - gamma||_{H^4} + |sigma_new - sigma|)` is below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Cap on `||gamma_x||_{L^inf}`.
    pub gamma_x_cap: f64,
    /// Cap on `sup_t (||gamma||_{H^4} + |sigma|)`.
    pub iterate_cap: f64,
    /// Largest accepted `||v0||_{L^1} + ||v0||_{H^2}`.
    pub small_data: f64,
}

impl Default for ModulationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 40,
            gamma_x_cap: 0.5,
            iterate_cap: 1.0,
            small_data: 1e-2,
        }
    }
}

/// Solution of the modulation system on the snapshot times of a trajectory.
///
/// `gamma` is stored through per-xi coefficients: at snapshot `k`,
/// `gamma(x) = Re sum_{xi != 0} gamma_hat[k][b] e^{i xi_b x}`, `b` in `Omega_N` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulationState {
    pub times: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_t: Vec<f64>,
    pub gamma_hat: Vec<Vec<C64>>,
    pub gamma_t_hat: Vec<Vec<C64>>,
    pub n_periods: usize,
    pub xis: Vec<f64>,
    pub grid: PeriodicGrid,
    pub iterations: usize,
    pub update_history: Vec<f64>,
    pub max_gamma_x: Vec<f64>,
    /// `<Phi~_0, N(s)>_{L^2_N}` at each snapshot, from the final iterate.
    pub sigma_forcing: Vec<f64>,
    pub sigma_nl: f64,
    pub sigma_nl_tail: f64,
}

fn scaled(coef: &[C64], xis: &[f64], l: usize) -> Vec<C64> {
    coef.iter().zip(xis).map(|(c, &xi)| c * C64::new(0.0, xi).powu(l as u32)).collect()
}

impl ModulationState {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `d_x^l gamma` at snapshot `k`.
    pub fn gamma_deriv(&self, k: usize, l: usize) -> ScalarField {
        phase_field_on(&self.grid, self.n_periods, &scaled(&self.gamma_hat[k], &self.xis, l))
    }

    pub fn gamma(&self, k: usize) -> ScalarField {
        self.gamma_deriv(k, 0)
    }

    /// `d_x^l d_t gamma` at snapshot `k`.
    pub fn gamma_t_deriv(&self, k: usize, l: usize) -> ScalarField {
        phase_field_on(&self.grid, self.n_periods, &scaled(&self.gamma_t_hat[k], &self.xis, l))
    }

    pub fn gamma_t(&self, k: usize) -> ScalarField {
        self.gamma_t_deriv(k, 0)
    }

    /// `gamma_nl = gamma + sigma / N`.
    pub fn gamma_nl(&self, k: usize) -> ScalarField {
        self.gamma(k).add_constant(self.sigma[k] / self.n_periods as f64)
    }

    pub fn zero(times: Vec<f64>, n_periods: usize, xis: Vec<f64>, grid: PeriodicGrid) -> Self {
        let nt = times.len();
        let nx = xis.len();
        Self {
            sigma: vec![0.0; nt],
            sigma_t: vec![0.0; nt],
            gamma_hat: vec![vec![C64::new(0.0, 0.0); nx]; nt],
            gamma_t_hat: vec![vec![C64::new(0.0, 0.0); nx]; nt],
            max_gamma_x: vec![0.0; nt],
            sigma_forcing: vec![0.0; nt],
            times,
            n_periods,
            xis,
            grid,
            iterations: 0,
            update_history: Vec::new(),
            sigma_nl: 0.0,
            sigma_nl_tail: 0.0,
        }
    }

    pub const CSV_HEADER: &'static str = "t,sigma,sigma_t,max_gamma_x,gamma_l2";

    /// Per-time CSV: `t, sigma, sigma_t, max_gamma_x, gamma_l2`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for k in 0..self.len() {
            writeln!(
                s,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.times[k],
                self.sigma[k],
                self.sigma_t[k],
                self.max_gamma_x[k],
                self.gamma(k).l2_norm()
            )
            .unwrap();
        }
        s
    }

    /// Spectral coefficients of gamma: `t` then `re, im` per xi in `Omega_N` order.
    pub fn gamma_coeffs_csv(&self) -> String {
        let mut s = String::from("t");
        for b in 0..self.xis.len() {
            write!(s, ",re_{b},im_{b}").unwrap();
        }
        s.push('\n');
        for k in 0..self.len() {
            write!(s, "{:.17e}", self.times[k]).unwrap();
            for c in &self.gamma_hat[k] {
                write!(s, ",{:.17e},{:.17e}", c.re, c.im).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Write `modulation.csv`, `gamma_coeffs.csv` and the `modulation.json` index.
    pub fn save(&self, dir: &Path) -> Result<(), ModulationError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("modulation.csv"), self.to_csv())?;
        std::fs::write(dir.join("gamma_coeffs.csv"), self.gamma_coeffs_csv())?;
        let index = serde_json::json!({
            "n_periods": self.n_periods,
            "xis": self.xis,
            "iterations": self.iterations,
            "update_history": self.update_history,
            "sigma_nl": self.sigma_nl,
            "sigma_nl_tail": self.sigma_nl_tail,
            "files": {"per_time": "modulation.csv", "gamma_coefficients": "gamma_coeffs.csv"},
        });
        std::fs::write(dir.join("modulation.json"), serde_json::to_string_pretty(&index).unwrap())?;
        Ok(())
    }
}

/// Kernel tables on the lag grid `m * dt`.
struct LagTables {
    chi: Vec<f64>,
    dchi: Vec<f64>,
    /// `e^{lambda_b m dt}` per xi.
    ex: Vec<Vec<C64>>,
}

impl LagTables {
    fn new(kernel: &SemigroupKernel, dt: f64, len: usize) -> Self {
        let chi = kernel.chi();
        let lam = kernel.lambdas();
        Self {
            chi: (0..len).map(|m| chi.eval(m as f64 * dt)).collect(),
            dchi: (0..len).map(|m| chi.derivative(m as f64 * dt, 1)).collect(),
            ex: lam.iter().map(|l| (0..len).map(|m| (l * (m as f64 * dt)).exp()).collect()).collect(),
        }
    }
}

/// `sigma, sigma_t, Gamma, Gamma_t` at snapshot `k` from the amplitudes `a` of
/// `v0` and `c[j]` of the nonlinearity (trapezoid in `s`).
fn convolve(
    kernel: &SemigroupKernel,
    tabs: &LagTables,
    dt: f64,
    a: &[C64],
    c: &[Vec<C64>],
    k: usize,
) -> (f64, f64, Vec<C64>, Vec<C64>) {
    let nn = kernel.n_periods() as f64;
    let z = kernel.zero_index();
    let lam = kernel.lambdas();
    let rho = kernel.rhos();
    let xis = kernel.xis();
    let w = |j: usize| if j == 0 || j == k { 0.5 * dt } else { dt };
    // Lags m <= 1/dt carry chi = 0 and chi' = 0.
    let mut s0 = tabs.chi[k] * a[z].re;
    let mut s1 = tabs.dchi[k] * a[z].re;
    for j in 0..=k {
        let m = k - j;
        if tabs.chi[m] == 0.0 && tabs.dchi[m] == 0.0 {
            continue;
        }
        s0 += w(j) * tabs.chi[m] * c[j][z].re;
        s1 += w(j) * tabs.dchi[m] * c[j][z].re;
    }
    let mut g = vec![C64::new(0.0, 0.0); a.len()];
    let mut gt = vec![C64::new(0.0, 0.0); a.len()];
    for b in 0..a.len() {
        if xis[b] == 0.0 || rho[b] == 0.0 {
            continue;
        }
        let ex = &tabs.ex[b];
        let mut acc0 = tabs.chi[k] * ex[k] * a[b];
        let mut acc1 = (tabs.dchi[k] + lam[b] * tabs.chi[k]) * ex[k] * a[b];
        for j in 0..=k {
            let m = k - j;
            if tabs.chi[m] == 0.0 && tabs.dchi[m] == 0.0 {
                continue;
            }
            let e = ex[m] * c[j][b] * w(j);
            acc0 += e * tabs.chi[m];
            acc1 += e * (tabs.dchi[m] + lam[b] * tabs.chi[m]);
        }
        g[b] = acc0 * rho[b];
        gt[b] = acc1 * rho[b];
    }
    (nn * s0, nn * s1, g, gt)
}

/// Everything a Picard sweep needs from one snapshot.
struct SnapshotEval {
    v: Field2,
    nonlin: Field2,
    amps: Vec<C64>,
    max_gx: f64,
}

fn evaluate_snapshot(
    psi: &Field2,
    state: &ModulationState,
    k: usize,
    kernel: &SemigroupKernel,
    phi_ext: &Field2,
    dphi_ext: &Field2,
    beta: f64,
    cap: f64,
) -> Result<SnapshotEval, ModulationError> {
    let n = state.n_periods;
    let gamma = state.gamma(k);
    let gx = state.gamma_deriv(k, 1);
    let max_gx = gx.linf_norm();
    if max_gx > cap {
        return Err(ModulationError::ConstraintViolated {
            time: state.times[k],
            value: max_gx,
            cap,
        });
    }
    let gxx = state.gamma_deriv(k, 2);
    let gt = state.gamma_t(k);
    let r: Vec<f64> = gamma.values().iter().map(|g| -g).collect();
    let v = shifted_samples(psi, -state.sigma[k] / n as f64, &r).sub(phi_ext)?;
    let parts = nonlinearity_with(&v, &gx, &gxx, &gt, state.sigma_t[k], phi_ext, dphi_ext, beta, n);
    let amps = kernel.amplitudes(&parts.combined, 0)?;
    Ok(SnapshotEval {
        v,
        nonlin: parts.combined,
        amps,
        max_gx,
    })
}

fn uniform_spacing(traj: &Trajectory) -> Result<f64, ModulationError> {
    if traj.len() < 2 {
        return Err(ModulationError::Mismatch("need at least two snapshots".into()));
    }
    let dt = traj.times[1] - traj.times[0];
    for w in traj.times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(ModulationError::Mismatch("snapshot times are not uniform".into()));
        }
    }
    if traj.times[0].abs() > 1e-12 {
        return Err(ModulationError::Mismatch("trajectory must start at t = 0".into()));
    }
    Ok(dt)
}

/// Picard iteration on the discretized integral system for `(sigma, gamma)`.
pub fn solve_modulation(
    traj: &Trajectory,
    phi: &WaveProfile,
    kernel: &SemigroupKernel,
    opts: &ModulationOptions,
) -> Result<ModulationState, ModulationError> {
    let n = kernel.n_periods();
    if traj.n_periods != n || !traj.grid().same_as(kernel.grid()) {
        return Err(ModulationError::Mismatch("trajectory and kernel live on different domains".into()));
    }
    let dt = uniform_spacing(traj)?;
    let phi_ext = phi.field.tile(n);
    let dphi_ext = kernel.dphi().clone();
    let v0 = traj.states[0].sub(&phi_ext)?;
    let size = v0.l1_norm() + crate::spectral::sobolev_norm(&v0, 2)?;
    if size > opts.small_data {
        return Err(ModulationError::NotSmall {
            size,
            threshold: opts.small_data,
        });
    }
    let a = kernel.amplitudes(&v0, 0)?;
    let nt = traj.len();
    let tabs = LagTables::new(kernel, dt, nt);
    let mut state = ModulationState::zero(traj.times.clone(), n, kernel.xis(), *kernel.grid());
    let beta = phi.params.beta;
    let mut history: Vec<f64> = Vec::new();
    let mut amps: Vec<Vec<C64>> = Vec::new();
    for sweep in 1..=opts.max_iters {
        let evals: Vec<Result<(Vec<C64>, f64), ModulationError>> = (0..nt)
            .into_par_iter()
            .map(|k| {
                evaluate_snapshot(&traj.states[k], &state, k, kernel, &phi_ext, &dphi_ext, beta, opts.gamma_x_cap)
                    .map(|e| (e.amps, e.max_gx))
            })
            .collect();
        amps.clear();
        let mut max_gx = Vec::with_capacity(nt);
        for e in evals {
            let (c, g) = e?;
            amps.push(c);
            max_gx.push(g);
        }
        let updated: Vec<(f64, f64, Vec<C64>, Vec<C64>)> =
            (0..nt).into_par_iter().map(|k| convolve(kernel, &tabs, dt, &a, &amps, k)).collect();
        let mut diff = 0.0f64;
        let mut size = 0.0f64;
        let mut next = state.clone();
        next.max_gamma_x = max_gx;
        for (k, (s, st, g, gt)) in updated.into_iter().enumerate() {
            next.sigma[k] = s;
            next.sigma_t[k] = st;
            next.gamma_hat[k] = g;
            next.gamma_t_hat[k] = gt;
        }
        let norms: Vec<(f64, f64)> = (0..nt)
            .into_par_iter()
            .map(|k| {
                let dg: Vec<C64> = next.gamma_hat[k].iter().zip(&state.gamma_hat[k]).map(|(x, y)| x - y).collect();
                let d = phase_field_on(&next.grid, n, &dg).sobolev_norm(4) + (next.sigma[k] - state.sigma[k]).abs();
                let s = next.gamma(k).sobolev_norm(4) + next.sigma[k].abs();
                (d, s)
            })
            .collect();
        for (d, s) in norms {
            diff = diff.max(d);
            size = size.max(s);
        }
        history.push(diff);
        log::debug!("modulation sweep {sweep}: update {diff:.3e}, size {size:.3e}");
        state = next;
        if size > opts.iterate_cap {
            return Err(ModulationError::IterateCap {
                value: size,
                cap: opts.iterate_cap,
            });
        }
        if diff < opts.tol {
            state.iterations = sweep;
            break;
        }
        let h = history.len();
        if h >= 3 && history[h - 1] > history[h - 2] && history[h - 2] > history[h - 3] {
            return Err(ModulationError::FixedPointDiverged { history });
        }
        if sweep == opts.max_iters {
            return Err(ModulationError::NoConvergence {
                iters: sweep,
                tol: opts.tol,
                last: diff,
            });
        }
    }
    state.update_history = history;
    // Final gamma_x check on the converged iterate.
    for k in 0..nt {
        let g = state.gamma_deriv(k, 1).linf_norm();
        state.max_gamma_x[k] = g;
        if g > opts.gamma_x_cap {
            return Err(ModulationError::ConstraintViolated {
                time: state.times[k],
                value: g,
                cap: opts.gamma_x_cap,
            });
        }
    }
    let z = kernel.zero_index();
    let nn = n as f64;
    state.sigma_forcing = amps.iter().map(|c| nn * c[z].re).collect();
    let (snl, tail) = sigma_nl(nn * a[z].re, &state.times, &state.sigma_forcing);
    state.sigma_nl = snl;
    state.sigma_nl_tail = tail;
    Ok(state)
}

/// `sigma_nl = <Phi~_0, v0> + int_0^{t_end} <Phi~_0, N> ds`, with a tail bound
/// from a power-law fit of the integrand over the second half of the window.
fn sigma_nl(s0: f64, times: &[f64], forcing: &[f64]) -> (f64, f64) {
    let nt = times.len();
    let mut integral = 0.0;
    for j in 1..nt {
        integral += 0.5 * (times[j] - times[j - 1]) * (forcing[j] + forcing[j - 1]);
    }
    let t_end = times[nt - 1];
    let series: Vec<(f64, f64)> = times.iter().zip(forcing).map(|(&t, &f)| (t, f.abs())).collect();
    let tail = match fit::fit_decay_exponent(&series, (0.5 * t_end, t_end)) {
        Ok(f) if f.exponent < -1.0 => f.constant * (1.0 + t_end).powf(f.exponent + 1.0) / -(f.exponent + 1.0),
        Ok(_) => f64::INFINITY,
        Err(_) => if forcing.iter().all(|f| *f == 0.0) { 0.0 } else { f64::INFINITY },
    };
    (s0 + integral, tail)
}

/// `L^2_N` norms of the residual of the integral equation for `v` at every
/// snapshot, with the Duhamel integrals taken by the trapezoid rule in `s`.
pub fn duhamel_residual(
    traj: &Trajectory,
    phi: &WaveProfile,
    kernel: &SemigroupKernel,
    state: &ModulationState,
) -> Result<Vec<f64>, ModulationError> {
    let n = kernel.n_periods();
    let dt = uniform_spacing(traj)?;
    let nt = traj.len();
    let phi_ext = phi.field.tile(n);
    let dphi_ext = kernel.dphi().clone();
    let beta = phi.params.beta;
    let v0 = traj.states[0].sub(&phi_ext)?;
    let a = kernel.amplitudes(&v0, 0)?;
    let evals: Vec<SnapshotEval> = (0..nt)
        .into_par_iter()
        .map(|k| evaluate_snapshot(&traj.states[k], state, k, kernel, &phi_ext, &dphi_ext, beta, f64::INFINITY))
        .collect::<Result<_, _>>()?;
    let amps: Vec<Vec<C64>> = evals.iter().map(|e| e.amps.clone()).collect();
    let tabs = LagTables::new(kernel, dt, nt);
    let step = kernel.step_propagators(dt);
    let apply = |c: &BlochCoeffs| -> BlochCoeffs { step.iter().zip(c).map(|(e, g)| e * g).collect() };
    let add = |x: &BlochCoeffs, y: &BlochCoeffs, s: f64| -> BlochCoeffs {
        x.iter().zip(y).map(|(p, q)| p + q * C64::new(s, 0.0)).collect()
    };
    let mut free = kernel.bloch_transform(&v0)?;
    let mut integral: BlochCoeffs = free.iter().map(|g| g * C64::new(0.0, 0.0)).collect();
    let mut prev_n = kernel.bloch_transform(&evals[0].nonlin)?;
    let mut out = Vec::with_capacity(nt);
    for k in 0..nt {
        if k > 0 {
            let cur = kernel.bloch_transform(&evals[k].nonlin)?;
            integral = add(&apply(&add(&integral, &prev_n, 0.5 * dt)), &cur, 0.5 * dt);
            free = apply(&free);
            prev_n = cur;
        }
        let (s, _, g, _) = convolve(kernel, &tabs, dt, &a, &amps, k);
        let gamma_hat = phase_field_on(kernel.grid(), n, &g);
        let lin = kernel.inverse_bloch(&add(&free, &integral, 1.0));
        let phase = dphi_ext.mul_scalar_field(&gamma_hat.add_constant(s / n as f64))?;
        let gx = state.gamma_deriv(k, 1);
        let gxv = evals[k].v.mul_scalar_field(&gx)?;
        let r = evals[k].v.sub(&lin)?.add(&phase)?.sub(&gxv)?;
        out.push(r.l2_norm());
    }
    Ok(out)
}
