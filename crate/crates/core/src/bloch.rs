//! Bloch operators `A_xi[phi]` on `T`-periodic Fourier modes, spectral
//! stability certification, the critical curve through the origin and the
//! subharmonic spectral gap.
//!
//! Coefficient vectors use the ordering `[u_r(l), l = -M..M ; u_i(l), l = -M..M]`
//! for `u(x) = sum_l u(l) e^{i l K x}`, `K = 2 pi / T`. Pairings are
//! Hermitian: `<a, b>_T = T sum conj(a) b`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, CMatrix, CVector};
use crate::profile::{LLEParams, WaveProfile};
use crate::spectral::{fft, ifft, Field2, SpectralCoeffs, C64};

#[derive(Debug, Error)]
pub enum BlochError {
    #[error("xi = {xi} outside [-pi/T, pi/T] (T = {period})")]
    XiOutOfRange { xi: f64, period: f64 },
    #[error("M = {0} is below the minimum of 8")]
    TooFewModes(usize),
    #[error("eigensolver failed at xi = {0}")]
    EigensolverFailure(f64),
    #[error("doubling M moved Re(lambda) by {shift:.3e} at xi = {xi}")]
    ResolutionSuspect { xi: f64, shift: f64 },
    #[error("lost the critical curve at xi = {xi} (eigenvector overlap {overlap:.3})")]
    CurveTrackingLost { xi: f64, overlap: f64 },
    #[error("stability report did not pass")]
    NotCertified,
    #[error("invalid sampling: {0}")]
    BadSamples(String),
}

/// Tolerances of the stability conditions.
pub const RE_TOL: f64 = 1e-9;
pub const ZERO_MODE_TOL: f64 = 1e-7;
pub const SIMPLE_GAP: f64 = 1e-6;
pub const EIGVEC_TOL: f64 = 1e-7;
pub const RESOLUTION_TOL: f64 = 1e-7;
pub const DEFAULT_M: usize = 32;

/// Fourier coefficients of the entries of `B(phi)` for indices `-2M..=2M`.
#[derive(Clone, Debug)]
struct Multipliers {
    m: usize,
    b11: Vec<C64>,
    b12: Vec<C64>,
    b22: Vec<C64>,
}

impl Multipliers {
    fn new(phi: &Field2, m: usize) -> Self {
        let n = phi.grid().n_points();
        let mut nf = 4 * n.max(2 * m + 1);
        if nf % 2 == 1 {
            nf += 1;
        }
        // Zero-pad phi's spectrum onto the fine grid.
        let c = fft(phi.values());
        let mut cf = vec![C64::new(0.0, 0.0); nf];
        for j in 0..n {
            let k = phi.grid().mode_index(j);
            if k == -(n as i64) / 2 {
                cf[(nf as i64 + k) as usize] += c[j] * 0.5;
                cf[(-k) as usize] += c[j] * 0.5;
            } else {
                cf[k.rem_euclid(nf as i64) as usize] += c[j];
            }
        }
        let pf = ifft(&cf);
        let f11: Vec<C64> = pf.iter().map(|p| C64::new(3.0 * p.re * p.re + p.im * p.im, 0.0)).collect();
        let f12: Vec<C64> = pf.iter().map(|p| C64::new(2.0 * p.re * p.im, 0.0)).collect();
        let f22: Vec<C64> = pf.iter().map(|p| C64::new(p.re * p.re + 3.0 * p.im * p.im, 0.0)).collect();
        let pick = |v: Vec<C64>| -> Vec<C64> {
            let h = fft(&v);
            (-(2 * m as i64)..=(2 * m as i64))
                .map(|k| h[k.rem_euclid(nf as i64) as usize])
                .collect()
        };
        Self {
            m,
            b11: pick(f11),
            b12: pick(f12),
            b22: pick(f22),
        }
    }

    fn at(&self, v: &[C64], k: i64) -> C64 {
        v[(k + 2 * self.m as i64) as usize]
    }
}

/// Dense Bloch matrix at one `xi`.
#[derive(Clone, Debug)]
pub struct BlochOperator {
    pub xi: f64,
    pub m: usize,
    pub period: f64,
    pub matrix: CMatrix,
}

impl BlochOperator {
    pub fn dim(&self) -> usize {
        2 * (2 * self.m + 1)
    }

    /// Largest violation of the conjugation symmetry that makes the matrix
    /// real in a cosine/sine basis (meaningful at `xi = 0`).
    pub fn reality_defect(&self) -> f64 {
        let w = 2 * self.m + 1;
        let flip = |a: usize| -> usize {
            let (blk, l) = (a / w, a % w);
            blk * w + (w - 1 - l)
        };
        let d = self.dim();
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                let e = (self.matrix[(a, b)] - self.matrix[(flip(a), flip(b))].conj()).norm();
                worst = worst.max(e);
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Result<Vec<C64>, BlochError> {
        linalg::eigenvalues(&self.matrix).ok_or(BlochError::EigensolverFailure(self.xi))
    }
}

/// Reusable assembler for a fixed profile and truncation.
#[derive(Clone, Debug)]
pub struct BlochAssembler {
    params: LLEParams,
    mult: Multipliers,
}

impl BlochAssembler {
    pub fn new(phi: &WaveProfile, m: usize) -> Result<Self, BlochError> {
        if m < 8 {
            return Err(BlochError::TooFewModes(m));
        }
        Ok(Self {
            params: phi.params,
            mult: Multipliers::new(&phi.field, m),
        })
    }

    pub fn m(&self) -> usize {
        self.mult.m
    }

    pub fn assemble(&self, xi: f64) -> Result<BlochOperator, BlochError> {
        let t = self.params.period;
        if xi.abs() > PI / t * (1.0 + 1e-12) {
            return Err(BlochError::XiOutOfRange { xi, period: t });
        }
        let m = self.mult.m as i64;
        let w = (2 * m + 1) as usize;
        let kk = 2.0 * PI / t;
        let (alpha, beta) = (self.params.alpha, self.params.beta);
        let mut a = CMatrix::zeros(2 * w, 2 * w);
        for (p, l) in (-m..=m).enumerate() {
            let kap = l as f64 * kk + xi;
            let dl = beta * kap * kap - alpha;
            for (q, j) in (-m..=m).enumerate() {
                let t11 = self.mult.at(&self.mult.b11, l - j);
                let t12 = self.mult.at(&self.mult.b12, l - j);
                let t22 = self.mult.at(&self.mult.b22, l - j);
                let diag = if p == q { 1.0 } else { 0.0 };
                // A = [[-I - T12, -D - T22], [D + T11, -I + T12]]
                a[(p, q)] = -t12 - diag;
                a[(p, w + q)] = -t22 - dl * diag;
                a[(w + p, q)] = t11 + dl * diag;
                a[(w + p, w + q)] = t12 - diag;
            }
        }
        Ok(BlochOperator {
            xi,
            m: self.mult.m,
            period: t,
            matrix: a,
        })
    }
}

/// `A_xi[phi]` as a dense matrix on `2(2M+1)` Fourier modes.
pub fn assemble_bloch(phi: &WaveProfile, xi: f64, m: usize) -> Result<BlochOperator, BlochError> {
    BlochAssembler::new(phi, m)?.assemble(xi)
}

/// Coefficients of a `T`-periodic field in the Bloch basis.
pub fn to_basis(f: &Field2, m: usize) -> CVector {
    let c = SpectralCoeffs::from_field(f);
    let n = f.grid().n_points() as i64;
    let w = 2 * m + 1;
    let mut v = CVector::zeros(2 * w);
    for (p, l) in (-(m as i64)..=(m as i64)).enumerate() {
        let weight = if l.abs() == n / 2 { 0.5 } else { 1.0 };
        if l.abs() > n / 2 {
            continue;
        }
        let slot = l.rem_euclid(n) as usize;
        v[p] = c.r[slot] * weight;
        v[w + p] = c.i[slot] * weight;
    }
    v
}

/// Hermitian pairing `<a, b>_T`.
pub fn pair(a: &CVector, b: &CVector, period: f64) -> C64 {
    a.dotc(b) * period
}

/// `Omega_N = {2 pi k / (N T)}` with `k` in `[-floor(N/2), N - floor(N/2))`.
pub fn omega(n: usize, period: f64) -> Vec<f64> {
    let lo = -((n / 2) as i64);
    let hi = n as i64 - (n / 2) as i64;
    (lo..hi).map(|k| 2.0 * PI * k as f64 / (n as f64 * period)).collect()
}

/// Symmetric grid of `2 h + 1` points on `[-pi/T, pi/T]`.
pub fn symmetric_grid(half: usize, period: f64) -> Vec<f64> {
    (-(half as i64)..=(half as i64))
        .map(|k| PI / period * k as f64 / half as f64)
        .collect()
}

fn max_re(v: &[C64]) -> C64 {
    *v.iter().max_by(|a, b| a.re.partial_cmp(&b.re).unwrap()).unwrap()
}

/// Index of the eigenvalue nearest zero.
fn nearest_zero(v: &[C64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].norm().partial_cmp(&v[b].norm()).unwrap()).unwrap()
}

/// Options for [`certify_stability_with`].
#[derive(Clone, Debug)]
pub struct CertifyOptions {
    /// Check every `resolution_stride`-th grid value at `2M` (0 disables).
    pub resolution_stride: usize,
    /// `delta_N` is reported for `N = 1, 2, 4, ..` up to this value.
    pub delta_n_max: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            resolution_stride: 8,
            delta_n_max: 64,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Offender {
    pub xi: f64,
    pub re: f64,
    pub im: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlochStabilityReport {
    pub coverage_ok: bool,
    pub d1_passed: bool,
    pub d2_passed: bool,
    pub d3_passed: bool,
    pub theta: f64,
    pub delta_by_n: BTreeMap<usize, f64>,
    pub xi_grid: Vec<f64>,
    /// Per grid value, eigenvalues sorted by decreasing real part.
    pub spectra: Vec<Vec<C64>>,
    pub d1_offender: Option<Offender>,
    pub d2_offender: Option<Offender>,
    pub zero_mode_second_smallest: f64,
    pub zero_mode_eigvec_defect: f64,
    pub m: usize,
}

impl BlochStabilityReport {
    pub fn passed(&self) -> bool {
        self.coverage_ok && self.d1_passed && self.d2_passed && self.d3_passed
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns `xi, re_lambda, im_lambda, branch_id`; branch ids rank the
    /// eigenvalues by decreasing real part.
    pub fn spectra_csv(&self) -> String {
        let mut s = String::from("xi,re_lambda,im_lambda,branch_id\n");
        for (xi, spec) in self.xi_grid.iter().zip(&self.spectra) {
            for (b, l) in spec.iter().enumerate() {
                writeln!(s, "{:.17e},{:.17e},{:.17e},{}", xi, l.re, l.im, b).unwrap();
            }
        }
        s
    }
}

fn spectra_on(asm: &BlochAssembler, xs: &[f64]) -> Result<Vec<Vec<C64>>, BlochError> {
    xs.par_iter()
        .map(|&xi| {
            let mut ev = asm.assemble(xi)?.eigenvalues()?;
            ev.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
            Ok(ev)
        })
        .collect()
}

/// Spectral abscissa excluding the translational zero eigenvalue at `xi = 0`.
fn abscissa_without_zero(xi: f64, spec: &[C64]) -> Option<C64> {
    if xi == 0.0 {
        let z = nearest_zero(spec);
        if spec[z].norm() < ZERO_MODE_TOL {
            let rest: Vec<C64> = spec.iter().enumerate().filter(|(i, _)| *i != z).map(|(_, v)| *v).collect();
            return if rest.is_empty() { None } else { Some(max_re(&rest)) };
        }
    }
    Some(max_re(spec))
}

pub fn certify_stability(phi: &WaveProfile, xi_grid: &[f64], m: usize) -> Result<BlochStabilityReport, BlochError> {
    certify_stability_with(phi, xi_grid, m, &CertifyOptions::default())
}

pub fn certify_stability_with(
    phi: &WaveProfile,
    xi_grid: &[f64],
    m: usize,
    opts: &CertifyOptions,
) -> Result<BlochStabilityReport, BlochError> {
    let t = phi.params.period;
    let asm = BlochAssembler::new(phi, m)?;
    let mut grid: Vec<f64> = xi_grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let has_zero = grid.iter().any(|&x| x == 0.0);
    let symmetric = grid
        .iter()
        .zip(grid.iter().rev())
        .all(|(a, b)| (a + b).abs() <= 1e-12 * (PI / t));
    let extent = grid.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let coverage_ok = has_zero && symmetric && grid.len() >= 9 && extent >= 0.9 * PI / t;

    let spectra = spectra_on(&asm, &grid)?;

    // (D1) spectrum in the open left half plane except the zero mode.
    let mut d1_offender: Option<Offender> = None;
    let mut worst = f64::NEG_INFINITY;
    for (&xi, spec) in grid.iter().zip(&spectra) {
        if let Some(l) = abscissa_without_zero(xi, spec) {
            if l.re > worst {
                worst = l.re;
                d1_offender = Some(Offender { xi, re: l.re, im: l.im });
            }
        }
    }
    let d1_passed = worst <= RE_TOL;

    // (D2) quadratic tangency: largest theta with max Re <= -theta xi^2 + tol.
    let mut theta = f64::INFINITY;
    let mut d2_offender = None;
    for (&xi, spec) in grid.iter().zip(&spectra) {
        if xi == 0.0 {
            continue;
        }
        let l = max_re(spec);
        let th = (RE_TOL - l.re) / (xi * xi);
        if th < theta {
            theta = th;
            d2_offender = Some(Offender { xi, re: l.re, im: l.im });
        }
    }
    if !theta.is_finite() {
        theta = 0.0;
    }
    let d2_passed = theta > 0.0 && coverage_ok;
    let theta = theta.max(0.0);

    // (D3) simple zero eigenvalue with eigenvector phi'.
    let mut second = 0.0;
    let mut defect = f64::INFINITY;
    let mut d3_passed = false;
    if let Some(iz) = grid.iter().position(|&x| x == 0.0) {
        let spec = &spectra[iz];
        let mut mags: Vec<f64> = spec.iter().map(|l| l.norm()).collect();
        mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
        second = mags.get(1).copied().unwrap_or(0.0);
        let a0 = asm.assemble(0.0)?;
        let p = to_basis(&phi.derivative(), m);
        if p.norm() > 0.0 {
            if let Some((_, v)) = linalg::inverse_iteration(&a0.matrix, C64::new(0.0, 0.0), &p, 3) {
                let proj = p.dotc(&v) / p.dotc(&p);
                defect = (&v - &p * proj).norm() / v.norm();
            }
        }
        d3_passed = mags[0] < ZERO_MODE_TOL && second > SIMPLE_GAP && defect <= EIGVEC_TOL;
    }

    // Resolution probe at doubled truncation.
    if opts.resolution_stride > 0 {
        let asm2 = BlochAssembler::new(phi, 2 * m)?;
        let probe: Vec<(f64, f64)> = grid
            .iter()
            .zip(&spectra)
            .step_by(opts.resolution_stride)
            .map(|(&x, s)| (x, s[0].re))
            .collect();
        let shifts: Vec<Result<(f64, f64), BlochError>> = probe
            .par_iter()
            .map(|&(xi, re)| {
                let ev = asm2.assemble(xi)?.eigenvalues()?;
                Ok((xi, (max_re(&ev).re - re).abs()))
            })
            .collect();
        for s in shifts {
            let (xi, shift) = s?;
            if shift > RESOLUTION_TOL {
                return Err(BlochError::ResolutionSuspect { xi, shift });
            }
        }
    }

    let mut delta_by_n = BTreeMap::new();
    if opts.delta_n_max >= 1 {
        let nmax = opts.delta_n_max.next_power_of_two();
        let om = omega(nmax, t);
        let sp = spectra_on(&asm, &om)?;
        let mut n = 1;
        while n <= nmax {
            let sub = omega(n, t);
            let mut worst = f64::NEG_INFINITY;
            for xi in sub {
                let idx = om.iter().position(|&x| (x - xi).abs() < 1e-12).expect("Omega_N nests in Omega_max");
                if let Some(l) = abscissa_without_zero(if xi.abs() < 1e-15 { 0.0 } else { xi }, &sp[idx]) {
                    worst = worst.max(l.re);
                }
            }
            delta_by_n.insert(n, -worst);
            n *= 2;
        }
    }

    Ok(BlochStabilityReport {
        coverage_ok,
        d1_passed,
        d2_passed,
        d3_passed,
        theta,
        delta_by_n,
        xi_grid: grid,
        spectra,
        d1_offender,
        d2_offender,
        zero_mode_second_smallest: second,
        zero_mode_eigvec_defect: defect,
        m,
    })
}

/// Critical eigenvalue branch `lambda_c(xi)` with eigenfunctions and
/// adjoint eigenfunctions in the Bloch basis.
#[derive(Clone, Debug)]
pub struct CriticalCurve {
    pub params: LLEParams,
    pub m: usize,
    pub xi: Vec<f64>,
    pub lambda: Vec<C64>,
    pub eigfun: Vec<CVector>,
    pub adjoint: Vec<CVector>,
    /// Distance from `lambda_c` to the rest of the spectrum per sample.
    pub separation: Vec<f64>,
    pub a: f64,
    pub d: f64,
    pub xi1: f64,
    /// Samples used for the expansion fit (including tracking substeps).
    pub fit_points: Vec<(f64, C64)>,
}

#[derive(Serialize)]
struct CurveRecord<'a> {
    params: LLEParams,
    m: usize,
    xi: &'a [f64],
    lambda_re: Vec<f64>,
    lambda_im: Vec<f64>,
    separation: &'a [f64],
    a: f64,
    d: f64,
    xi1: f64,
}

impl CriticalCurve {
    /// Sample index of `xi` (matched to 1e-12).
    pub fn index_of(&self, xi: f64) -> Option<usize> {
        self.xi.iter().position(|&x| (x - xi).abs() <= 1e-12)
    }

    pub fn to_json(&self) -> String {
        let rec = CurveRecord {
            params: self.params,
            m: self.m,
            xi: &self.xi,
            lambda_re: self.lambda.iter().map(|l| l.re).collect(),
            lambda_im: self.lambda.iter().map(|l| l.im).collect(),
            separation: &self.separation,
            a: self.a,
            d: self.d,
            xi1: self.xi1,
        };
        serde_json::to_string_pretty(&rec).expect("curve serializes")
    }

    /// `lambda_c` from the fitted expansion `i a xi - d xi^2`.
    pub fn quadratic_model(&self, xi: f64) -> C64 {
        C64::new(-self.d * xi * xi, self.a * xi)
    }
}

/// Largest spacing used when walking along the curve.
fn max_track_step(period: f64) -> f64 {
    PI / period / 16.0
}

struct Tracked {
    lambda: C64,
    vec: CVector,
}

fn track_step(asm: &BlochAssembler, prev: &Tracked, xi: f64) -> Result<Tracked, BlochError> {
    let a = asm.assemble(xi)?;
    let (lam, v) =
        linalg::inverse_iteration(&a.matrix, prev.lambda, &prev.vec, 4).ok_or(BlochError::EigensolverFailure(xi))?;
    let overlap = prev.vec.dotc(&v).norm() / (prev.vec.norm() * v.norm());
    if overlap < 0.9 {
        return Err(BlochError::CurveTrackingLost { xi, overlap });
    }
    Ok(Tracked { lambda: lam, vec: v })
}

/// Least-squares fit of `Re = c2 xi^2 + c4 xi^4 + c6 xi^6`,
/// `Im = a xi + b3 xi^3 + b5 xi^5`; returns `(a, d)`.
fn fit_expansion(points: &[(f64, C64)]) -> (f64, f64) {
    let solve = |rows: Vec<[f64; 3]>, rhs: Vec<f64>| -> [f64; 3] {
        let m = nalgebra::DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let b = nalgebra::DVector::from_vec(rhs);
        let sol = m.svd(true, true).solve(&b, 1e-14).expect("least squares solves");
        [sol[0], sol[1], sol[2]]
    };
    let pts: Vec<&(f64, C64)> = points.iter().filter(|(x, _)| *x != 0.0).collect();
    if pts.len() < 3 {
        return (f64::NAN, f64::NAN);
    }
    // Scale columns by the largest |xi| for conditioning.
    let s = pts.iter().map(|(x, _)| x.abs()).fold(0.0, f64::max);
    let re = solve(
        pts.iter().map(|(x, _)| { let u = x / s; [u * u, u.powi(4), u.powi(6)] }).collect(),
        pts.iter().map(|(_, l)| l.re).collect(),
    );
    let im = solve(
        pts.iter().map(|(x, _)| { let u = x / s; [u, u.powi(3), u.powi(5)] }).collect(),
        pts.iter().map(|(_, l)| l.im).collect(),
    );
    (im[0] / s, -re[0] / (s * s))
}

/// Track `lambda_c` over `xi_samples` (which must include 0) starting from the
/// translational mode, normalize eigenfunctions and adjoints, and fit `(a, d)`.
pub fn critical_curve(phi: &WaveProfile, xi_samples: &[f64], m: usize) -> Result<CriticalCurve, BlochError> {
    let t = phi.params.period;
    let asm = BlochAssembler::new(phi, m)?;
    let mut xs: Vec<f64> = xi_samples.to_vec();
    if !xs.iter().any(|&x| x == 0.0) {
        xs.push(0.0);
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() <= 1e-14);
    for &x in &xs {
        if x.abs() > PI / t * (1.0 + 1e-12) {
            return Err(BlochError::XiOutOfRange { xi: x, period: t });
        }
    }
    let p = to_basis(&phi.derivative(), m);
    let pnorm2 = p.dotc(&p).re;
    if pnorm2 == 0.0 {
        return Err(BlochError::BadSamples("profile is constant; no translational mode".into()));
    }
    let a0 = asm.assemble(0.0)?;
    let (l0, v0) = linalg::inverse_iteration(&a0.matrix, C64::new(0.0, 0.0), &p, 4)
        .ok_or(BlochError::EigensolverFailure(0.0))?;
    let start = Tracked { lambda: l0, vec: v0 };

    let hmax = max_track_step(t);
    let mut tracked: BTreeMap<usize, Tracked> = BTreeMap::new();
    let mut fit_points = vec![(0.0, l0)];
    let iz = xs.iter().position(|&x| x == 0.0).unwrap();
    tracked.insert(iz, Tracked { lambda: start.lambda, vec: start.vec.clone() });
    for dir in [1i64, -1] {
        let mut cur = Tracked { lambda: start.lambda, vec: start.vec.clone() };
        let mut cur_xi = 0.0;
        let mut idx = iz as i64 + dir;
        while idx >= 0 && (idx as usize) < xs.len() {
            let target = xs[idx as usize];
            let nsub = ((target - cur_xi).abs() / hmax).ceil().max(1.0) as usize;
            for s in 1..=nsub {
                let x = cur_xi + (target - cur_xi) * s as f64 / nsub as f64;
                cur = track_step(&asm, &cur, x)?;
                fit_points.push((x, cur.lambda));
            }
            cur_xi = target;
            tracked.insert(idx as usize, Tracked { lambda: cur.lambda, vec: cur.vec.clone() });
            idx += dir;
        }
    }

    // Normalize, compute adjoints and separations per sample.
    let results: Vec<Result<(C64, CVector, CVector, f64), BlochError>> = xs
        .par_iter()
        .enumerate()
        .map(|(i, &xi)| {
            let tr = &tracked[&i];
            let a = asm.assemble(xi)?;
            let mut v = tr.vec.clone();
            let c = pair(&p, &v, t);
            if c.norm() < 1e-3 * pnorm2.sqrt() * v.norm() * t {
                return Err(BlochError::CurveTrackingLost { xi, overlap: c.norm() });
            }
            v *= C64::new(pnorm2 * t, 0.0) / c;
            let ah = a.matrix.adjoint();
            let (_, mut w) = linalg::inverse_iteration(&ah, tr.lambda.conj(), &v, 4)
                .ok_or(BlochError::EigensolverFailure(xi))?;
            let s = pair(&w, &v, t);
            w /= s.conj();
            let ev = a.eigenvalues()?;
            let j = (0..ev.len())
                .min_by(|&x, &y| (ev[x] - tr.lambda).norm().partial_cmp(&(ev[y] - tr.lambda).norm()).unwrap())
                .unwrap();
            let sep = ev
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != j)
                .map(|(_, e)| (e - tr.lambda).norm())
                .fold(f64::INFINITY, f64::min);
            Ok((tr.lambda, v, w, sep))
        })
        .collect();
    let mut lambda = Vec::with_capacity(xs.len());
    let mut eigfun = Vec::with_capacity(xs.len());
    let mut adjoint = Vec::with_capacity(xs.len());
    let mut separation = Vec::with_capacity(xs.len());
    for r in results {
        let (l, v, w, s) = r?;
        lambda.push(l);
        eigfun.push(v);
        adjoint.push(w);
        separation.push(s);
    }

    // Isolation radius: grow from zero while separation > 2 |lambda_c|.
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].abs().partial_cmp(&xs[b].abs()).unwrap());
    let mut xi1 = 0.0f64;
    for &i in &order {
        if separation[i] > 2.0 * lambda[i].norm() {
            xi1 = xi1.max(xs[i].abs());
        } else {
            break;
        }
    }
    let xi1 = xi1.max(0.2 * PI / t);

    let window: Vec<(f64, C64)> = fit_points.iter().filter(|(x, _)| x.abs() <= xi1 / 2.0 + 1e-14).copied().collect();
    let (a, d) = fit_expansion(&window);
    fit_points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    Ok(CriticalCurve {
        params: phi.params,
        m,
        xi: xs,
        lambda,
        eigfun,
        adjoint,
        separation,
        a,
        d,
        xi1,
        fit_points,
    })
}

/// The curve on a symmetric grid of `2 half + 1` points over the zone.
pub fn standard_curve(phi: &WaveProfile, half: usize, m: usize) -> Result<CriticalCurve, BlochError> {
    critical_curve(phi, &symmetric_grid(half, phi.params.period), m)
}

/// `delta_N = -max Re` over the spectra at `Omega_N`, zero mode excluded.
pub fn subharmonic_gap(
    phi: &WaveProfile,
    curve: &CriticalCurve,
    report: &BlochStabilityReport,
    n: usize,
) -> Result<f64, BlochError> {
    if !report.passed() {
        return Err(BlochError::NotCertified);
    }
    let asm = BlochAssembler::new(phi, curve.m)?;
    let om = omega(n, phi.params.period);
    let spectra = spectra_on(&asm, &om)?;
    let mut worst = f64::NEG_INFINITY;
    for (&xi, spec) in om.iter().zip(&spectra) {
        if let Some(l) = abscissa_without_zero(xi, spec) {
            worst = worst.max(l.re);
        }
    }
    Ok(-worst)
}

/// Dense Fourier-Galerkin matrix of `A[phi]` on `[0, N T]` restricted to the
/// modes `m = k + N l`, `|l| <= M`, `k` ranging over the `Omega_N` indices.
/// Built directly from the `N T`-periodic extension, without any Bloch
/// regrouping, and ordered by global mode index.
pub fn galerkin_matrix_nt(phi: &WaveProfile, n: usize, m: usize) -> CMatrix {
    let ext = phi.field.tile(n);
    let mult = Multipliers::new(&ext, (m + 1) * n);
    let lo = -((n / 2) as i64);
    let hi = n as i64 - (n / 2) as i64;
    let mut modes: Vec<i64> = Vec::new();
    for k in lo..hi {
        for l in -(m as i64)..=(m as i64) {
            modes.push(k + n as i64 * l);
        }
    }
    modes.sort();
    let w = modes.len();
    let kk = 2.0 * PI / (n as f64 * phi.params.period);
    let (alpha, beta) = (phi.params.alpha, phi.params.beta);
    let mut a = CMatrix::zeros(2 * w, 2 * w);
    for (p, &mp) in modes.iter().enumerate() {
        let kap = mp as f64 * kk;
        let dl = beta * kap * kap - alpha;
        for (q, &mq) in modes.iter().enumerate() {
            let t11 = mult.at(&mult.b11, mp - mq);
            let t12 = mult.at(&mult.b12, mp - mq);
            let t22 = mult.at(&mult.b22, mp - mq);
            let diag = if p == q { 1.0 } else { 0.0 };
            a[(p, q)] = -t12 - diag;
            a[(p, w + q)] = -t22 - dl * diag;
            a[(w + p, q)] = t11 + dl * diag;
            a[(w + p, w + q)] = t12 - diag;
        }
    }
    a
}

/// Symmetric Hausdorff distance between two finite point sets in C.
pub fn hausdorff(a: &[C64], b: &[C64]) -> f64 {
    let one = |x: &[C64], y: &[C64]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    one(a, b).max(one(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn omega_sets() {
        assert_eq!(omega(1, 2.0), vec![0.0]);
        let o2 = omega(2, 2.0);
        assert_eq!(o2.len(), 2);
        assert!((o2[0] + PI / 2.0).abs() < 1e-15 && o2[1] == 0.0);
        let o5 = omega(5, 1.0);
        assert_eq!(o5.len(), 5);
        assert!(o5.iter().all(|&x| (-PI..PI).contains(&x)));
        for x in omega(8, 3.0) {
            let ph = x * 8.0 * 3.0;
            assert!((ph / (2.0 * PI) - (ph / (2.0 * PI)).round()).abs() < 1e-12);
        }
    }

    #[test]
    fn hausdorff_basic() {
        let a = [C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let b = [C64::new(1.0, 0.0), C64::new(0.0, 0.1)];
        assert!((hausdorff(&a, &b) - 0.1).abs() < 1e-15);
    }
}
