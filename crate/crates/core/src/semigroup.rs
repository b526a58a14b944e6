//! The linearized solution operator `e^{A[phi] t}` on `[0, N T]` through its
//! Bloch representation, and its splitting into the kernel projection, the
//! principal (phase) part and a remainder.
//!
//! Bloch coefficients of an `N T`-periodic field are stored per `xi` in
//! `Omega_N` as coefficient vectors `g` of `e^{i (xi + l K) x}` in the basis
//! of [`crate::bloch`], so that `v(x) = sum_xi e^{i xi x} sum_l g_l e^{i l K x}`.
//! This is `B_T(v) / (N T)` in the usual normalization.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bloch::{self, BlochAssembler, BlochError, CriticalCurve};
use crate::linalg::{self, CMatrix, CVector};
use crate::profile::WaveProfile;
use crate::spectral::{fft, ifft, Field2, PeriodicGrid, ScalarField, SpectralError, C64};

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("derivative counts l + 2j + k = {0} exceed the cap of 6")]
    DerivativeCap(usize),
    #[error("field lives on a grid other than the kernel's [0, N T] grid")]
    GridMismatch,
    #[error("invalid kernel options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Bloch(#[from] BlochError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

/// Largest `l + 2 j + k` accepted by [`SemigroupKernel::apply_principal`].
pub const DERIVATIVE_CAP: usize = 6;

fn bump(s: f64) -> f64 {
    if s > 0.0 {
        (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// Truncated Taylor series `sum c_i e^i` with four coefficients, used to
/// differentiate the cutoff.
#[derive(Clone, Copy, Debug)]
struct Jet([f64; 4]);

impl Jet {
    fn var(x: f64) -> Self {
        Jet([x, 1.0, 0.0, 0.0])
    }

    fn add(self, o: Jet) -> Jet {
        Jet(std::array::from_fn(|i| self.0[i] + o.0[i]))
    }

    fn mul(self, o: Jet) -> Jet {
        let mut r = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 - i {
                r[i + j] += self.0[i] * o.0[j];
            }
        }
        Jet(r)
    }

    fn recip(self) -> Jet {
        let a = self.0;
        let mut r = [0.0; 4];
        r[0] = 1.0 / a[0];
        for k in 1..4 {
            let s: f64 = (1..=k).map(|j| a[j] * r[k - j]).sum();
            r[k] = -s / a[0];
        }
        Jet(r)
    }

    fn exp(self) -> Jet {
        let a = self.0;
        let mut r = [0.0; 4];
        r[0] = a[0].exp();
        for k in 1..4 {
            let s: f64 = (1..=k).map(|j| j as f64 * a[j] * r[k - j]).sum();
            r[k] = s / k as f64;
        }
        Jet(r)
    }

    fn scale(self, c: f64) -> Jet {
        Jet(self.0.map(|v| v * c))
    }
}

/// Temporal cutoff: 0 on `[0, 1]`, 1 on `[2, inf)`, smooth in between.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct CutoffChi;

impl CutoffChi {
    pub fn eval(&self, t: f64) -> f64 {
        let a = bump(t - 1.0);
        let b = bump(2.0 - t);
        if a + b == 0.0 {
            0.0
        } else {
            a / (a + b)
        }
    }

    /// `d^order chi / dt^order` for `order <= 3`.
    pub fn derivative(&self, t: f64, order: usize) -> f64 {
        assert!(order <= 3, "cutoff derivatives are available up to order 3");
        if order == 0 {
            return self.eval(t);
        }
        if t <= 1.0 || t >= 2.0 {
            return 0.0;
        }
        // h(s) = exp(-1/s) on both knots; chi = h1 / (h1 + h2).
        let s1 = Jet::var(t - 1.0);
        let s2 = Jet([2.0 - t, -1.0, 0.0, 0.0]);
        let h1 = s1.recip().scale(-1.0).exp();
        let h2 = s2.recip().scale(-1.0).exp();
        let chi = h1.mul(h1.add(h2).recip());
        let fact = [1.0, 1.0, 2.0, 6.0];
        chi.0[order] * fact[order]
    }
}

/// Frequency cutoff: 1 for `|xi| < xi1/2`, 0 for `|xi| > xi1`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CutoffRho {
    pub xi1: f64,
}

impl CutoffRho {
    pub fn eval(&self, xi: f64) -> f64 {
        let a = bump(self.xi1 - xi.abs());
        let b = bump(xi.abs() - self.xi1 / 2.0);
        if a + b == 0.0 {
            0.0
        } else {
            a / (a + b)
        }
    }
}

enum Propagator {
    /// `A = V diag(lam) V^{-1}`.
    Eigen { v: CMatrix, vinv: CMatrix, lam: Vec<C64> },
    /// Matrix exponentials computed on demand and cached per time.
    Dense,
}

struct XiBlock {
    xi: f64,
    matrix: CMatrix,
    prop: Propagator,
    lambda: C64,
    adjoint: CVector,
    rho: f64,
}

/// Per-xi coefficient vectors of an `N T`-periodic field.
pub type BlochCoeffs = Vec<CVector>;

#[derive(Clone, Debug)]
pub struct KernelOptions {
    /// Fourier truncation of the Bloch matrices.
    pub m: usize,
    /// Outer knot of the frequency cutoff; taken from the critical curve if unset.
    pub xi1: Option<f64>,
    /// Half-size of the symmetric grid added to `Omega_N` when tracking the curve.
    pub extra_samples: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            m: bloch::DEFAULT_M,
            xi1: None,
            extra_samples: 16,
        }
    }
}

/// Sealed semigroup data for one wave and one `N`.
pub struct SemigroupKernel {
    phi: WaveProfile,
    n: usize,
    m: usize,
    grid: PeriodicGrid,
    blocks: Vec<XiBlock>,
    curve: CriticalCurve,
    chi: CutoffChi,
    rho: CutoffRho,
    dphi_ext: Field2,
    cache: Mutex<HashMap<u64, Vec<CMatrix>>>,
}

/// Relative mismatch above which the eigen-decomposition is not trusted.
const EIGEN_CHECK_TOL: f64 = 1e-9;

fn make_propagator(a: &CMatrix) -> Propagator {
    if let Some((lam, v)) = linalg::eigen(a) {
        if let Some(vinv) = v.clone().try_inverse() {
            let d = CMatrix::from_diagonal(&CVector::from_iterator(lam.len(), lam.iter().map(|l| l.exp())));
            let via_eigen = &v * d * &vinv;
            let reference = linalg::expm(a);
            let err = (&via_eigen - &reference).norm() / reference.norm();
            if err < EIGEN_CHECK_TOL {
                return Propagator::Eigen { v, vinv, lam };
            }
            log::debug!("eigen propagator rejected (mismatch {err:.2e}); using expm");
        }
    }
    Propagator::Dense
}

impl SemigroupKernel {
    pub fn new(phi: &WaveProfile, n: usize, opts: &KernelOptions) -> Result<Self, SemigroupError> {
        if n == 0 {
            return Err(SemigroupError::InvalidOptions("N must be positive".into()));
        }
        let t = phi.params.period;
        let xis = bloch::omega(n, t);
        let mut samples = xis.clone();
        samples.extend(bloch::symmetric_grid(opts.extra_samples.max(1), t));
        let curve = bloch::critical_curve(phi, &samples, opts.m)?;
        let xi1 = opts.xi1.unwrap_or(curve.xi1);
        if !(xi1 > 0.0 && xi1 <= PI / t * (1.0 + 1e-12)) {
            return Err(SemigroupError::InvalidOptions(format!("xi1 = {xi1} outside (0, pi/T]")));
        }
        let rho = CutoffRho { xi1 };
        let asm = BlochAssembler::new(phi, opts.m)?;
        let built: Vec<Result<XiBlock, SemigroupError>> = xis
            .par_iter()
            .map(|&xi| {
                let a = asm.assemble(xi)?.matrix;
                let prop = make_propagator(&a);
                let idx = curve.index_of(xi).expect("Omega_N is among the curve samples");
                Ok(XiBlock {
                    xi,
                    prop,
                    matrix: a,
                    lambda: curve.lambda[idx],
                    adjoint: curve.adjoint[idx].clone(),
                    rho: rho.eval(xi),
                })
            })
            .collect();
        let blocks = built.into_iter().collect::<Result<Vec<_>, _>>()?;
        let grid = phi.grid().repeated(n);
        Ok(Self {
            phi: phi.clone(),
            n,
            m: opts.m,
            grid,
            blocks,
            curve,
            chi: CutoffChi,
            rho,
            dphi_ext: phi.derivative().tile(n),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn n_periods(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn profile(&self) -> &WaveProfile {
        &self.phi
    }

    pub fn curve(&self) -> &CriticalCurve {
        &self.curve
    }

    pub fn chi(&self) -> CutoffChi {
        self.chi
    }

    pub fn rho(&self) -> CutoffRho {
        self.rho
    }

    pub fn xi1(&self) -> f64 {
        self.rho.xi1
    }

    /// `Omega_N` in kernel order.
    pub fn xis(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.xi).collect()
    }

    /// `lambda_c(xi)` for `xi` in `Omega_N`.
    pub fn lambdas(&self) -> Vec<C64> {
        self.blocks.iter().map(|b| b.lambda).collect()
    }

    /// `rho(xi)` for `xi` in `Omega_N`.
    pub fn rhos(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.rho).collect()
    }

    /// `phi'` on `[0, N T]`.
    pub fn dphi(&self) -> &Field2 {
        &self.dphi_ext
    }

    fn check(&self, v: &Field2) -> Result<(), SemigroupError> {
        if v.grid().same_as(&self.grid) {
            Ok(())
        } else {
            Err(SemigroupError::GridMismatch)
        }
    }

    /// Index of `xi_k` (k in the `Omega_N` integer range) in kernel order.
    fn k_of(&self, b: usize) -> i64 {
        b as i64 - (self.n / 2) as i64
    }

    /// Bloch coefficients of `v`.
    pub fn bloch_transform(&self, v: &Field2) -> Result<BlochCoeffs, SemigroupError> {
        self.check(v)?;
        let np = self.grid.n_points() as i64;
        let n = self.n as i64;
        let m = self.m as i64;
        let w = (2 * m + 1) as usize;
        let re: Vec<C64> = v.values().iter().map(|c| C64::new(c.re, 0.0)).collect();
        let im: Vec<C64> = v.values().iter().map(|c| C64::new(c.im, 0.0)).collect();
        let gr = fft(&re);
        let gi = fft(&im);
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let k = self.k_of(b);
            let mut g = CVector::zeros(2 * w);
            for (p, l) in (-m..=m).enumerate() {
                let mode = k + n * l;
                let weight = if mode.abs() == np / 2 { 0.5 } else { 1.0 };
                if mode < -np / 2 || mode > np / 2 {
                    continue;
                }
                let slot = mode.rem_euclid(np) as usize;
                g[p] = gr[slot] * weight;
                g[w + p] = gi[slot] * weight;
            }
            out.push(g);
        }
        Ok(out)
    }

    /// Resum Bloch coefficients into a field (real part of each component).
    pub fn inverse_bloch(&self, coeffs: &BlochCoeffs) -> Field2 {
        let np = self.grid.n_points() as i64;
        let n = self.n as i64;
        let m = self.m as i64;
        let w = (2 * m + 1) as usize;
        let mut cr = vec![C64::new(0.0, 0.0); np as usize];
        let mut ci = vec![C64::new(0.0, 0.0); np as usize];
        for (b, g) in coeffs.iter().enumerate() {
            let k = self.k_of(b);
            for (p, l) in (-m..=m).enumerate() {
                let mode = k + n * l;
                if mode < -np / 2 || mode > np / 2 {
                    continue;
                }
                let slot = mode.rem_euclid(np) as usize;
                cr[slot] += g[p];
                ci[slot] += g[w + p];
            }
        }
        let fr = ifft(&cr);
        let fi = ifft(&ci);
        let values = fr.iter().zip(&fi).map(|(a, b)| C64::new(a.re, b.re)).collect();
        Field2::new(self.grid, values).expect("resummed field is finite")
    }

    fn dense_exp(&self, t: f64) -> Vec<CMatrix> {
        let key = t.to_bits();
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return v.clone();
        }
        let mats: Vec<CMatrix> = self
            .blocks
            .par_iter()
            .map(|b| match b.prop {
                Propagator::Dense => linalg::expm(&(&b.matrix * C64::new(t, 0.0))),
                Propagator::Eigen { .. } => CMatrix::zeros(0, 0),
            })
            .collect();
        self.cache.lock().unwrap().insert(key, mats.clone());
        mats
    }

    /// `e^{A_xi t}` applied blockwise.
    pub fn propagate(&self, t: f64, coeffs: &BlochCoeffs) -> Result<BlochCoeffs, SemigroupError> {
        if t < 0.0 {
            return Err(SemigroupError::NegativeTime(t));
        }
        let needs_dense = self.blocks.iter().any(|b| matches!(b.prop, Propagator::Dense));
        let dense = if needs_dense { self.dense_exp(t) } else { Vec::new() };
        Ok(self
            .blocks
            .iter()
            .zip(coeffs)
            .enumerate()
            .map(|(i, (b, g))| match &b.prop {
                Propagator::Eigen { v, vinv, lam } => {
                    let mut y = vinv * g;
                    for (yk, l) in y.iter_mut().zip(lam) {
                        *yk *= (l * t).exp();
                    }
                    v * y
                }
                Propagator::Dense => &dense[i] * g,
            })
            .collect())
    }

    /// Per-xi step propagators `e^{A_xi dt}` by scaling and squaring.
    pub fn step_propagators(&self, dt: f64) -> Vec<CMatrix> {
        self.blocks
            .par_iter()
            .map(|b| linalg::expm(&(&b.matrix * C64::new(dt, 0.0))))
            .collect()
    }

    pub fn apply_semigroup(&self, t: f64, v: &Field2) -> Result<Field2, SemigroupError> {
        let g = self.bloch_transform(v)?;
        Ok(self.inverse_bloch(&self.propagate(t, &g)?))
    }

    /// `A[phi] v` computed blockwise (used to check kernels and generators).
    pub fn apply_generator(&self, v: &Field2) -> Result<Field2, SemigroupError> {
        let g = self.bloch_transform(v)?;
        let out = self.blocks.iter().zip(&g).map(|(b, gk)| &b.matrix * gk).collect();
        Ok(self.inverse_bloch(&out))
    }

    /// Amplitudes `c_xi(d_x^k v) = <Phi~_xi, g_xi>_T` for all `xi` in `Omega_N`.
    pub fn amplitudes_of(&self, coeffs: &BlochCoeffs, k: usize) -> Vec<C64> {
        let t = self.phi.params.period;
        let kk = 2.0 * PI / t;
        let m = self.m as i64;
        let w = (2 * m + 1) as usize;
        self.blocks
            .iter()
            .zip(coeffs)
            .map(|(b, g)| {
                let mut s = C64::new(0.0, 0.0);
                for (p, l) in (-m..=m).enumerate() {
                    let f = C64::new(0.0, b.xi + l as f64 * kk).powu(k as u32);
                    s += b.adjoint[p].conj() * g[p] * f + b.adjoint[w + p].conj() * g[w + p] * f;
                }
                s * t
            })
            .collect()
    }

    pub fn amplitudes(&self, v: &Field2, k: usize) -> Result<Vec<C64>, SemigroupError> {
        Ok(self.amplitudes_of(&self.bloch_transform(v)?, k))
    }

    /// Index of `xi = 0` in kernel order.
    pub fn zero_index(&self) -> usize {
        self.n / 2
    }

    /// `<Phi~_0, v>_{L^2(0, N T)}`.
    pub fn sigma_linear(&self, v: &Field2) -> Result<f64, SemigroupError> {
        let c = self.amplitudes(v, 0)?;
        Ok(self.n as f64 * c[self.zero_index()].re)
    }

    /// `P_{0,N} v = (1/N) phi' <Phi~_0, v>_N`.
    pub fn apply_zero_projection(&self, v: &Field2) -> Result<Field2, SemigroupError> {
        let s = self.sigma_linear(v)?;
        Ok(self.dphi_ext.scale(s / self.n as f64))
    }

    /// Scalar field `Re sum_{xi != 0} coef_xi e^{i xi x}` from per-xi values.
    pub fn phase_field(&self, coef: &[C64]) -> ScalarField {
        phase_field_on(&self.grid, self.n, coef)
    }

    /// Per-xi multipliers `rho (i xi)^l lambda^j e^{lambda t}`.
    pub fn principal_weights(&self, t: f64, l: usize, j: usize) -> Vec<C64> {
        self.blocks
            .iter()
            .map(|b| {
                if b.xi == 0.0 || b.rho == 0.0 {
                    return C64::new(0.0, 0.0);
                }
                C64::new(0.0, b.xi).powu(l as u32) * b.lambda.powu(j as u32) * (b.lambda * t).exp() * b.rho
            })
            .collect()
    }

    fn check_caps(t: f64, l: usize, j: usize, k: usize) -> Result<(), SemigroupError> {
        if t < 0.0 {
            return Err(SemigroupError::NegativeTime(t));
        }
        let s = l + 2 * j + k;
        if s > DERIVATIVE_CAP {
            return Err(SemigroupError::DerivativeCap(s));
        }
        Ok(())
    }

    /// `d_x^l d_t^j s_{p,N}(t) d_x^k v`.
    pub fn apply_principal(&self, t: f64, v: &Field2, l: usize, j: usize, k: usize) -> Result<ScalarField, SemigroupError> {
        Self::check_caps(t, l, j, k)?;
        let c = self.amplitudes(v, k)?;
        Ok(self.principal_from_amplitudes(t, &c, l, j))
    }

    pub fn principal_from_amplitudes(&self, t: f64, c: &[C64], l: usize, j: usize) -> ScalarField {
        let w = self.principal_weights(t, l, j);
        let coef: Vec<C64> = w.iter().zip(c).map(|(a, b)| a * b).collect();
        self.phase_field(&coef)
    }

    /// `d_x^l d_t^j (chi(t) s_{p,N}(t)) d_x^k v`, product rule in `t`.
    pub fn apply_principal_tilde(
        &self,
        t: f64,
        v: &Field2,
        l: usize,
        j: usize,
        k: usize,
    ) -> Result<ScalarField, SemigroupError> {
        Self::check_caps(t, l, j, k)?;
        let c = self.amplitudes(v, k)?;
        Ok(self.principal_tilde_from_amplitudes(t, &c, l, j))
    }

    pub fn principal_tilde_from_amplitudes(&self, t: f64, c: &[C64], l: usize, j: usize) -> ScalarField {
        let mut coef = vec![C64::new(0.0, 0.0); c.len()];
        let binom = |n: usize, r: usize| -> f64 { (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64) };
        for i in 0..=j {
            let dchi = self.chi.derivative(t, i);
            if dchi == 0.0 {
                continue;
            }
            let w = self.principal_weights(t, l, j - i);
            for (cf, (wk, ck)) in coef.iter_mut().zip(w.iter().zip(c)) {
                *cf += wk * ck * (binom(j, i) * dchi);
            }
        }
        self.phase_field(&coef)
    }

    /// `S~_N(t) v = e^{A t} v - chi(t) P_{0,N} v - phi' s~_{p,N}(t) v`.
    pub fn apply_remainder(&self, t: f64, v: &Field2) -> Result<Field2, SemigroupError> {
        let full = self.apply_semigroup(t, v)?;
        let p0 = self.apply_zero_projection(v)?;
        let sp = self.apply_principal_tilde(t, v, 0, 0, 0)?;
        let phase = self.dphi_ext.mul_scalar_field(&sp)?;
        Ok(full.axpby(1.0, &p0, -self.chi.eval(t))?.sub(&phase)?)
    }

    /// Norms of the linear decay decomposition for `v` at each time.
    pub fn decay_sweep(&self, v: &Field2, times: &[f64]) -> Result<DecaySweep, SemigroupError> {
        let g = self.bloch_transform(v)?;
        let c = self.amplitudes_of(&g, 0);
        let sigma = self.n as f64 * c[self.zero_index()].re;
        let shift = self.dphi_ext.scale(sigma / self.n as f64);
        let p0 = shift.clone();
        let rows: Vec<Result<DecayRow, SemigroupError>> = times
            .par_iter()
            .map(|&t| {
                let full = self.inverse_bloch(&self.propagate(t, &g)?);
                let sp = self.principal_from_amplitudes(t, &c, 0, 0);
                let spt = self.principal_tilde_from_amplitudes(t, &c, 0, 0);
                let phase = self.dphi_ext.mul_scalar_field(&sp)?;
                let minus_p = full.sub(&shift)?;
                let minus_phase = minus_p.sub(&phase)?;
                let rem = full
                    .axpby(1.0, &p0, -self.chi.eval(t))?
                    .sub(&self.dphi_ext.mul_scalar_field(&spt)?)?;
                Ok(DecayRow {
                    t,
                    norm_full: full.l2_norm(),
                    norm_minus_p: minus_p.l2_norm(),
                    norm_gamma: sp.l2_norm(),
                    norm_minus_phase: minus_phase.l2_norm(),
                    norm_remainder: rem.l2_norm(),
                })
            })
            .collect();
        Ok(DecaySweep {
            n: self.n,
            sigma,
            xi1: self.xi1(),
            rows: rows.into_iter().collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DecayRow {
    pub t: f64,
    /// `||e^{At} v||`
    pub norm_full: f64,
    /// `||e^{At} v - phi' sigma / N||`
    pub norm_minus_p: f64,
    /// `||gamma_l(t) - sigma / N|| = ||s_{p,N}(t) v||`
    pub norm_gamma: f64,
    /// `||e^{At} v - phi' gamma_l(t)||`
    pub norm_minus_phase: f64,
    /// `||S~_N(t) v||`
    pub norm_remainder: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecaySweep {
    pub n: usize,
    pub sigma: f64,
    pub xi1: f64,
    pub rows: Vec<DecayRow>,
}

impl DecaySweep {
    pub const CSV_HEADER: &'static str = "t,norm_full,norm_minus_P,norm_minus_phase,norm_remainder,norm_gamma";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(
                s,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.t, r.norm_full, r.norm_minus_p, r.norm_minus_phase, r.norm_remainder, r.norm_gamma
            )
            .unwrap();
        }
        s
    }

    pub fn series(&self, f: impl Fn(&DecayRow) -> f64) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t, f(r))).collect()
    }
}

/// `Re sum_{xi != 0} coef_xi e^{i xi x}` on the `N T` grid, with `coef` in
/// `Omega_N` order (`k = -floor(N/2), ..`).
pub fn phase_field_on(grid: &PeriodicGrid, n: usize, coef: &[C64]) -> ScalarField {
    let np = grid.n_points();
    let mut c = vec![C64::new(0.0, 0.0); np];
    for (b, v) in coef.iter().enumerate() {
        let k = b as i64 - (n / 2) as i64;
        if k != 0 {
            c[k.rem_euclid(np as i64) as usize] += v;
        }
    }
    let f = ifft(&c);
    ScalarField::new(*grid, f.iter().map(|z| z.re).collect()).expect("sizes agree")
}

/// `(1/N) sum_{xi in Omega_N} xi^{2n} e^{-2 d xi^2 t}`.
pub fn riemann_envelope(n: u32, d: f64, t: f64, big_n: usize, period: f64) -> f64 {
    assert!(n <= 3, "envelope order is capped at 3");
    bloch::omega(big_n, period)
        .into_iter()
        .map(|xi| xi.powi(2 * n as i32) * (-2.0 * d * xi * xi * t).exp())
        .sum::<f64>()
        / big_n as f64
}
