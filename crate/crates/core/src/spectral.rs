//! Periodic Fourier-pseudospectral toolkit on `[0, L)`.
//!
//! A [`Field2`] stores the real pair `(f_r, f_i)` packed as the complex value
//! `f_r + i f_i` at each node. Every operator in this module is real (it maps
//! real pairs to real pairs), so acting on the packed values complex-linearly
//! is the same as acting on both components.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type C64 = Complex64;

/// Highest derivative order exposed by the public operators.
pub const MAX_DERIVATIVE: usize = 4;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("grid needs an even, positive number of points (got {0})")]
    OddGrid(usize),
    #[error("period must be positive and finite (got {0})")]
    BadPeriod(f64),
    #[error("derivative order {0} exceeds the supported maximum")]
    OrderTooHigh(usize),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("value count {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Parse(String),
}

/// Equispaced nodes `x_j = j L / n` on a periodic interval of length `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    n_points: usize,
    period: f64,
}

impl PeriodicGrid {
    pub fn new(n_points: usize, period: f64) -> Result<Self, SpectralError> {
        if n_points == 0 || n_points % 2 != 0 {
            return Err(SpectralError::OddGrid(n_points));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(SpectralError::BadPeriod(period));
        }
        Ok(Self { n_points, period })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn spacing(&self) -> f64 {
        self.period / self.n_points as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.spacing()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.node(j)).collect()
    }

    /// Signed mode index of FFT slot `j`: `0, 1, .., n/2 - 1, -n/2, .., -1`.
    pub fn mode_index(&self, j: usize) -> i64 {
        let n = self.n_points as i64;
        let j = j as i64;
        if j < n / 2 {
            j
        } else {
            j - n
        }
    }

    /// FFT slot holding signed mode `k`, if it is represented on this grid.
    pub fn slot(&self, k: i64) -> Option<usize> {
        let n = self.n_points as i64;
        if k >= -n / 2 && k < n / 2 {
            Some(k.rem_euclid(n) as usize)
        } else {
            None
        }
    }

    /// Physical wavenumber `2 pi k / L` of FFT slot `j`.
    pub fn wavenumber(&self, j: usize) -> f64 {
        2.0 * std::f64::consts::PI * self.mode_index(j) as f64 / self.period
    }

    pub fn wavenumbers(&self) -> Vec<f64> {
        (0..self.n_points).map(|j| self.wavenumber(j)).collect()
    }

    /// The same sampling density repeated over `n` periods.
    pub fn repeated(&self, n: usize) -> Self {
        Self {
            n_points: self.n_points * n,
            period: self.period * n as f64,
        }
    }

    pub fn same_as(&self, other: &Self) -> bool {
        self.n_points == other.n_points
            && (self.period - other.period).abs() <= 1e-12 * self.period.max(other.period)
    }
}

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, forward: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if let Some(f) = p.1.get(&(n, forward)) {
            return f.clone();
        }
        let f = if forward {
            p.0.plan_fft_forward(n)
        } else {
            p.0.plan_fft_inverse(n)
        };
        p.1.insert((n, forward), f.clone());
        f
    })
}

/// Normalized forward transform: `c_k = (1/n) sum_j f_j e^{-2 pi i jk/n}`.
pub fn fft(values: &[C64]) -> Vec<C64> {
    let mut buf = values.to_vec();
    plan(buf.len(), true).process(&mut buf);
    let s = 1.0 / buf.len() as f64;
    buf.iter_mut().for_each(|c| *c *= s);
    buf
}

/// Inverse of [`fft`]: `f_j = sum_k c_k e^{2 pi i jk/n}`.
pub fn ifft(coeffs: &[C64]) -> Vec<C64> {
    let mut buf = coeffs.to_vec();
    plan(buf.len(), false).process(&mut buf);
    buf
}

/// Multiplier `(i kappa)^order` per FFT slot. For odd orders the unpaired
/// Nyquist slot is zeroed so that real data stays real.
pub fn derivative_symbol(grid: &PeriodicGrid, order: usize) -> Vec<C64> {
    let n = grid.n_points();
    (0..n)
        .map(|j| {
            if order % 2 == 1 && j == n / 2 {
                return C64::new(0.0, 0.0);
            }
            C64::new(0.0, grid.wavenumber(j)).powu(order as u32)
        })
        .collect()
}

/// Spectral derivative of packed values without the public order cap.
pub(crate) fn derivative_values(grid: &PeriodicGrid, values: &[C64], order: usize) -> Vec<C64> {
    if order == 0 {
        return values.to_vec();
    }
    let mut c = fft(values);
    for (ck, s) in c.iter_mut().zip(derivative_symbol(grid, order)) {
        *ck *= s;
    }
    ifft(&c)
}

/// Translate packed values: returns samples of `f(x + s)`.
pub(crate) fn translate_values(grid: &PeriodicGrid, values: &[C64], s: f64) -> Vec<C64> {
    let mut c = fft(values);
    let n = grid.n_points();
    for (j, ck) in c.iter_mut().enumerate() {
        let k = grid.wavenumber(j);
        if j == n / 2 {
            // Keep the Nyquist term real: cos(k s) is the real part of its shift.
            *ck *= (k * s).cos();
        } else {
            *ck *= C64::from_polar(1.0, k * s);
        }
    }
    ifft(&c)
}

/// Zero the modes with `|k| > n/3` (2/3 rule).
pub fn dealias(coeffs: &mut [C64]) {
    let n = coeffs.len() as i64;
    for (j, c) in coeffs.iter_mut().enumerate() {
        let j = j as i64;
        let k = if j < n / 2 { j } else { j - n };
        if 3 * k.abs() > n {
            *c = C64::new(0.0, 0.0);
        }
    }
}

/// A real two-component field sampled on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2 {
    grid: PeriodicGrid,
    values: Vec<C64>,
}

impl Field2 {
    pub fn new(grid: PeriodicGrid, values: Vec<C64>) -> Result<Self, SpectralError> {
        if values.len() != grid.n_points() {
            return Err(SpectralError::LengthMismatch {
                expected: grid.n_points(),
                got: values.len(),
            });
        }
        if let Some(j) = values.iter().position(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(SpectralError::NonFinite(j));
        }
        Ok(Self { grid, values })
    }

    /// Construct without the finiteness scan; used on hot paths whose inputs
    /// are already checked.
    pub(crate) fn from_raw(grid: PeriodicGrid, values: Vec<C64>) -> Self {
        debug_assert_eq!(values.len(), grid.n_points());
        Self { grid, values }
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self::from_raw(grid, vec![C64::new(0.0, 0.0); grid.n_points()])
    }

    pub fn from_components(grid: PeriodicGrid, re: &[f64], im: &[f64]) -> Result<Self, SpectralError> {
        if re.len() != im.len() {
            return Err(SpectralError::LengthMismatch {
                expected: re.len(),
                got: im.len(),
            });
        }
        Self::new(grid, re.iter().zip(im).map(|(&a, &b)| C64::new(a, b)).collect())
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(f64) -> (f64, f64)) -> Self {
        let values = grid
            .nodes()
            .into_iter()
            .map(|x| {
                let (a, b) = f(x);
                C64::new(a, b)
            })
            .collect();
        Self::from_raw(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.im).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn check_grid(&self, other: &Field2) -> Result<(), SpectralError> {
        if self.grid.same_as(&other.grid) {
            Ok(())
        } else {
            Err(SpectralError::GridMismatch)
        }
    }

    pub fn add(&self, other: &Field2) -> Result<Field2, SpectralError> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Field2) -> Result<Field2, SpectralError> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub(crate) fn zip_with(&self, other: &Field2, f: impl Fn(C64, C64) -> C64) -> Field2 {
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Field2::from_raw(self.grid, values)
    }

    pub fn scale(&self, s: f64) -> Field2 {
        Field2::from_raw(self.grid, self.values.iter().map(|v| v * s).collect())
    }

    /// `a self + b other`.
    pub fn axpby(&self, a: f64, other: &Field2, b: f64) -> Result<Field2, SpectralError> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |x, y| x * a + y * b))
    }

    /// Pointwise product with a scalar field.
    pub fn mul_scalar_field(&self, s: &ScalarField) -> Result<Field2, SpectralError> {
        if !self.grid.same_as(&s.grid) {
            return Err(SpectralError::GridMismatch);
        }
        Ok(Field2::from_raw(
            self.grid,
            self.values.iter().zip(&s.values).map(|(v, &a)| v * a).collect(),
        ))
    }

    /// Extend a field periodically onto `n` copies of its period.
    pub fn tile(&self, n: usize) -> Field2 {
        let mut values = Vec::with_capacity(self.values.len() * n);
        for _ in 0..n {
            values.extend_from_slice(&self.values);
        }
        Field2::from_raw(self.grid.repeated(n), values)
    }

    /// Samples of `x -> f(x + s)`, exact for resolved trigonometric polynomials.
    pub fn translate(&self, s: f64) -> Field2 {
        Field2::from_raw(self.grid, translate_values(&self.grid, &self.values, s))
    }

    pub fn coeffs(&self) -> SpectralCoeffs {
        SpectralCoeffs::from_field(self)
    }

    /// Largest pointwise Euclidean magnitude.
    pub fn linf_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `int |f| dx` with `|f|` the Euclidean magnitude of the pair.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).sum::<f64>() * self.grid.spacing()
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.spacing()).sqrt()
    }

    /// Spectrally computed derivative of any order (internal use).
    pub(crate) fn derivative_unchecked(&self, order: usize) -> Field2 {
        Field2::from_raw(self.grid, derivative_values(&self.grid, &self.values, order))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SpectralError> {
        let mut out = String::new();
        writeln!(out, "# period={:.17e} n_points={}", self.grid.period(), self.grid.n_points()).unwrap();
        out.push_str("x,f_r,f_i\n");
        for (j, v) in self.values.iter().enumerate() {
            writeln!(out, "{:.17e},{:.17e},{:.17e}", self.grid.node(j), v.re, v.im).unwrap();
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Field2, SpectralError> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| SpectralError::Parse("empty file".into()))??;
        let mut period = None;
        let mut n_points = None;
        for tok in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("period=") {
                period = v.parse::<f64>().ok();
            } else if let Some(v) = tok.strip_prefix("n_points=") {
                n_points = v.parse::<usize>().ok();
            }
        }
        let (period, n_points) = match (period, n_points) {
            (Some(p), Some(n)) => (p, n),
            _ => return Err(SpectralError::Parse("missing period/n_points header".into())),
        };
        let grid = PeriodicGrid::new(n_points, period)?;
        let mut values = Vec::with_capacity(n_points);
        for line in lines {
            let line = line?;
            if line.starts_with("x,") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(SpectralError::Parse(format!("expected 3 columns: {line}")));
            }
            let p = |s: &str| s.trim().parse::<f64>().map_err(|e| SpectralError::Parse(e.to_string()));
            values.push(C64::new(p(cols[1])?, p(cols[2])?));
        }
        Field2::new(grid, values)
    }
}

/// Fourier coefficients of each component, in FFT slot order, normalized so
/// that `f(x) = sum_k c_k e^{i 2 pi k x / L}`.
#[derive(Clone, Debug)]
pub struct SpectralCoeffs {
    grid: PeriodicGrid,
    pub r: Vec<C64>,
    pub i: Vec<C64>,
}

impl SpectralCoeffs {
    pub fn from_field(f: &Field2) -> Self {
        let c = fft(f.values());
        let n = c.len();
        let mut r = vec![C64::new(0.0, 0.0); n];
        let mut i = vec![C64::new(0.0, 0.0); n];
        for k in 0..n {
            let cm = c[(n - k) % n].conj();
            r[k] = (c[k] + cm) * 0.5;
            i[k] = (c[k] - cm) * C64::new(0.0, -0.5);
        }
        Self { grid: *f.grid(), r, i }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn to_field(&self) -> Field2 {
        let packed: Vec<C64> = self
            .r
            .iter()
            .zip(&self.i)
            .map(|(&a, &b)| a + C64::new(0.0, 1.0) * b)
            .collect();
        let v = ifft(&packed);
        // Components are real by construction; drop roundoff in the packing.
        Field2::from_raw(self.grid, v)
    }

    /// Largest violation of `c_{-k} = conj(c_k)` over both components.
    pub fn reality_defect(&self) -> f64 {
        let n = self.r.len();
        (0..n)
            .map(|k| {
                let m = (n - k) % n;
                (self.r[m] - self.r[k].conj()).norm().max((self.i[m] - self.i[k].conj()).norm())
            })
            .fold(0.0, f64::max)
    }

    /// `||f||_{L^2}` by Parseval.
    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.r.iter().chain(&self.i).map(|c| c.norm_sqr()).sum();
        (s * self.grid.period()).sqrt()
    }

    /// Relative magnitude of the top `fraction` of modes (by `|k|`).
    pub fn tail_ratio(&self, fraction: f64) -> f64 {
        let n = self.grid.n_points();
        let kmax = n as f64 / 2.0;
        let cut = kmax * (1.0 - fraction);
        let mut tail = 0.0f64;
        let mut total = 0.0f64;
        for j in 0..n {
            let k = self.grid.mode_index(j).abs() as f64;
            let m = self.r[j].norm().max(self.i[j].norm());
            total = total.max(m);
            if k > cut {
                tail = tail.max(m);
            }
        }
        if total == 0.0 {
            0.0
        } else {
            tail / total
        }
    }
}

/// A real scalar field (phase functions such as `gamma`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self, SpectralError> {
        if values.len() != grid.n_points() {
            return Err(SpectralError::LengthMismatch {
                expected: grid.n_points(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: PeriodicGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.n_points()],
        }
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n_points()],
        }
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: grid.nodes().into_iter().map(f).collect(),
            grid,
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivative(&self, order: usize) -> ScalarField {
        let packed: Vec<C64> = self.values.iter().map(|&v| C64::new(v, 0.0)).collect();
        let d = derivative_values(&self.grid, &packed, order);
        Self {
            grid: self.grid,
            values: d.into_iter().map(|c| c.re).collect(),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.spacing()).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.spacing()
    }

    /// `H^m` norm, any `m` (derivatives are computed spectrally).
    pub fn sobolev_norm(&self, m: usize) -> f64 {
        let mut s = self.l2_norm().powi(2);
        for k in 1..=m {
            s += self.derivative(k).l2_norm().powi(2);
        }
        s.sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn add_constant(&self, c: f64) -> ScalarField {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> ScalarField {
        Self {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    /// Broadcast into the first slot of a [`Field2`] (second slot zero).
    pub fn to_field2(&self) -> Field2 {
        Field2::from_raw(self.grid, self.values.iter().map(|&v| C64::new(v, 0.0)).collect())
    }
}

fn sobolev_sum(f: &Field2, m: usize) -> f64 {
    let c = fft(f.values());
    let period = f.grid().period();
    let n = c.len();
    let mut s = 0.0;
    for (j, ck) in c.iter().enumerate() {
        let k = f.grid().wavenumber(j);
        let mut w = 0.0;
        let mut kp = 1.0;
        for order in 0..=m {
            if order % 2 == 1 && j == n / 2 {
                // the Nyquist term contributes nothing to odd derivatives
            } else {
                w += kp;
            }
            kp *= k * k;
        }
        s += w * ck.norm_sqr();
    }
    s * period
}

/// Spectral derivative of order `order <= 4`.
pub fn spectral_derivative(f: &Field2, order: usize) -> Result<Field2, SpectralError> {
    if order > MAX_DERIVATIVE {
        return Err(SpectralError::OrderTooHigh(order));
    }
    Ok(f.derivative_unchecked(order))
}

/// `(||f||^2 + sum_{k<=m} ||f^{(k)}||^2)^{1/2}` over the grid period.
pub fn sobolev_norm(f: &Field2, m: usize) -> Result<f64, SpectralError> {
    if m > MAX_DERIVATIVE {
        return Err(SpectralError::OrderTooHigh(m));
    }
    Ok(sobolev_sum(f, m).sqrt())
}

/// Real pairing `int (f_r g_r + f_i g_i) dx` by the trapezoid rule.
pub fn inner_product(f: &Field2, g: &Field2) -> Result<f64, SpectralError> {
    f.check_grid(g)?;
    let s: f64 = f
        .values()
        .iter()
        .zip(g.values())
        .map(|(a, b)| a.re * b.re + a.im * b.im)
        .sum();
    Ok(s * f.grid().spacing())
}

/// Evaluate the trigonometric interpolant of `f` at arbitrary points.
pub fn trig_interpolate(f: &Field2, query_points: &[f64]) -> Vec<(f64, f64)> {
    let grid = f.grid();
    let n = grid.n_points();
    let c = SpectralCoeffs::from_field(f);
    let dk = 2.0 * std::f64::consts::PI / grid.period();
    query_points
        .iter()
        .map(|&x| {
            let x = x.rem_euclid(grid.period());
            let step = C64::from_polar(1.0, dk * x);
            // Sum over k = -n/2+1 .. n/2-1 by recurrence, then the Nyquist
            // term as a cosine (the real interpolant's convention).
            let mut sr = c.r[0];
            let mut si = c.i[0];
            let mut e = C64::new(1.0, 0.0);
            for k in 1..n / 2 {
                e *= step;
                let em = e.conj();
                sr += c.r[k] * e + c.r[n - k] * em;
                si += c.i[k] * e + c.i[n - k] * em;
            }
            let ny = (std::f64::consts::PI * n as f64 * x / grid.period()).cos();
            sr += c.r[n / 2] * ny;
            si += c.i[n / 2] * ny;
            (sr.re, si.re)
        })
        .collect()
}

/// Dense real matrix of the second-derivative operator on the grid.
pub fn second_derivative_matrix(grid: &PeriodicGrid) -> Vec<Vec<f64>> {
    let n = grid.n_points();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = vec![C64::new(0.0, 0.0); n];
        e[j] = C64::new(1.0, 0.0);
        let d = derivative_values(grid, &e, 2);
        cols.push(d.into_iter().map(|c| c.re).collect::<Vec<f64>>());
    }
    // cols[j][i] is entry (i, j); return row-major.
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, l: f64) -> PeriodicGrid {
        PeriodicGrid::new(n, l).unwrap()
    }

    #[test]
    fn grid_rejects_odd_and_bad_period() {
        assert!(PeriodicGrid::new(7, 1.0).is_err());
        assert!(PeriodicGrid::new(8, 0.0).is_err());
        let g = grid(8, 2.0);
        assert_eq!(g.node(0), 0.0);
        assert!((g.node(4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn derivative_of_constant_is_zero() {
        let g = grid(32, 3.0);
        let f = Field2::from_fn(g, |_| (2.5, 0.0));
        let d = spectral_derivative(&f, 1).unwrap();
        assert!(d.linf_norm() < 1e-14);
    }

    #[test]
    fn derivative_of_sine() {
        let t = 5.5;
        let g = grid(64, t);
        let k = 2.0 * PI / t;
        let f = Field2::from_fn(g, |x| ((k * x).sin(), 0.0));
        let d = spectral_derivative(&f, 1).unwrap();
        for (j, v) in d.values().iter().enumerate() {
            assert!((v.re - k * (k * g.node(j)).cos()).abs() < 1e-12);
            assert!(v.im.abs() < 1e-14);
        }
    }

    #[test]
    fn second_derivative_symbol() {
        let l = 4.0 * 5.5;
        let g = grid(256, l);
        let k = 2.0 * PI * 3.0 / l;
        let f = Field2::from_fn(g, |x| ((k * x).cos(), (k * x).sin()));
        let d = spectral_derivative(&f, 2).unwrap();
        for (a, b) in d.values().iter().zip(f.values()) {
            assert!((a + b * k * k).norm() < 1e-11);
        }
    }

    #[test]
    fn derivative_order_cap() {
        let f = Field2::zeros(grid(8, 1.0));
        assert!(matches!(spectral_derivative(&f, 5), Err(SpectralError::OrderTooHigh(5))));
    }

    #[test]
    fn sobolev_norms_closed_form() {
        let g = grid(16, 3.0);
        let f = Field2::from_fn(g, |_| (-2.0, 0.0));
        assert!((sobolev_norm(&f, 0).unwrap() - 2.0 * 3.0f64.sqrt()).abs() < 1e-13);
        let t = 5.5;
        let g = grid(64, t);
        let k = 2.0 * PI / t;
        let f = Field2::from_fn(g, |x| ((k * x).sin(), 0.0));
        let want = (t / 2.0 + k * k * t / 2.0).sqrt();
        assert!((sobolev_norm(&f, 1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_exact_on_modes() {
        let l = 8.0;
        let g = grid(32, l);
        let f = Field2::from_fn(g, |x| ((2.0 * PI * x / l).cos(), 0.3 * (6.0 * PI * x / l).sin()));
        let v = trig_interpolate(&f, &[l / 8.0, l / 8.0 + l, g.node(5)]);
        assert!((v[0].0 - (PI / 4.0).cos()).abs() < 1e-12);
        assert!((v[0].0 - v[1].0).abs() < 1e-12 && (v[0].1 - v[1].1).abs() < 1e-12);
        assert!((v[2].0 - f.values()[5].re).abs() < 1e-12);
        assert!((v[2].1 - f.values()[5].im).abs() < 1e-12);
    }

    #[test]
    fn orthogonality_and_translation() {
        let t = 5.5;
        let g = grid(64, t);
        let k = 2.0 * PI / t;
        let s = Field2::from_fn(g, |x| ((k * x).sin(), 0.0));
        let c = Field2::from_fn(g, |x| ((k * x).cos(), 0.0));
        assert!(inner_product(&s, &c).unwrap().abs() < 1e-13);
        let sh = s.translate(0.4);
        for j in 0..64 {
            assert!((sh.values()[j].re - (k * (g.node(j) + 0.4)).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn dealias_mask() {
        let mut c = vec![C64::new(1.0, 0.0); 12];
        dealias(&mut c);
        let kept: Vec<i64> = (0..12).filter(|&j| c[j].re != 0.0).map(|j| if j < 6 { j as i64 } else { j as i64 - 12 }).collect();
        assert_eq!(kept, vec![0, 1, 2, 3, 4, -4, -3, -2, -1]);
    }

    #[test]
    fn csv_round_trip() {
        let g = grid(16, 2.5);
        let f = Field2::from_fn(g, |x| (x.sin(), x.cos()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        f.write_csv(&p).unwrap();
        let h = Field2::read_csv(&p).unwrap();
        assert_eq!(h.grid().n_points(), 16);
        assert!(h.sub(&f).unwrap().linf_norm() < 1e-15);
    }

    #[test]
    fn second_derivative_matrix_matches_operator() {
        let g = grid(16, 2.0);
        let m = second_derivative_matrix(&g);
        let f = Field2::from_fn(g, |x| ((PI * x).sin() + 0.2 * (3.0 * PI * x).cos(), 0.0));
        let d = spectral_derivative(&f, 2).unwrap();
        for i in 0..16 {
            let s: f64 = (0..16).map(|j| m[i][j] * f.values()[j].re).sum();
            assert!((s - d.values()[i].re).abs() < 1e-10);
        }
    }
}
