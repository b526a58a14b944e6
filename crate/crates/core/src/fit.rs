//! Regression of decay laws: algebraic exponents against `log(1 + t)`,
//! exponential rates against `t`, and growth trends against `log N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} points in the window, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("non-positive value {value} at t = {t}")]
    NonPositiveValues { t: f64, value: f64 },
    #[error("invalid window ({0}, {1})")]
    BadWindow(f64, f64),
}

/// Minimum number of samples for a decay fit.
pub const MIN_POINTS: usize = 10;

/// `value ~ constant * (1 + t)^exponent` over `window`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFitResult {
    pub exponent: f64,
    pub constant: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

/// `value ~ constant * exp(-rate t)` over `window`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub rate: f64,
    pub constant: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub n_points: usize,
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r^2)`.
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(xv, yv)| (yv - a - b * xv).powi(2)).sum();
    let r2 = if syy > 0.0 { (1.0 - ss_res / syy).clamp(0.0, 1.0) } else { 1.0 };
    (a, b, r2)
}

fn windowed(series: &[(f64, f64)], window: (f64, f64)) -> Result<Vec<(f64, f64)>, FitError> {
    if !(window.0 < window.1) {
        return Err(FitError::BadWindow(window.0, window.1));
    }
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .collect();
    if pts.len() < MIN_POINTS {
        return Err(FitError::InsufficientData {
            needed: MIN_POINTS,
            found: pts.len(),
        });
    }
    if let Some(&(t, value)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(FitError::NonPositiveValues { t, value });
    }
    Ok(pts)
}

pub fn fit_decay_exponent(series: &[(f64, f64)], window: (f64, f64)) -> Result<DecayFitResult, FitError> {
    let pts = windowed(series, window)?;
    let x: Vec<f64> = pts.iter().map(|(t, _)| (1.0 + t).ln()).collect();
    let y: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let (a, b, r2) = linear_regression(&x, &y);
    Ok(DecayFitResult {
        exponent: b,
        constant: a.exp(),
        r_squared: r2,
        window,
        n_points: pts.len(),
    })
}

pub fn fit_exponential_rate(series: &[(f64, f64)], window: (f64, f64)) -> Result<ExponentialFit, FitError> {
    let pts = windowed(series, window)?;
    let x: Vec<f64> = pts.iter().map(|(t, _)| *t).collect();
    let y: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let (a, b, r2) = linear_regression(&x, &y);
    Ok(ExponentialFit {
        rate: -b,
        constant: a.exp(),
        r_squared: r2,
        window,
        n_points: pts.len(),
    })
}

/// Slope of `log C` against `log N`: the power of any growth of measured
/// constants with the period count.
pub fn slope_vs_log_n(constants: &[(usize, f64)]) -> f64 {
    let x: Vec<f64> = constants.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let y: Vec<f64> = constants.iter().map(|(_, c)| c.ln()).collect();
    linear_regression(&x, &y).1
}

/// Time at which the algebraic law `c1 (1+t)^p` meets the exponential law
/// `c2 e^{-r t}` (bisection on the log difference, searched in `[lo, hi]`).
pub fn crossover_time(alg: &DecayFitResult, exp: &ExponentialFit, lo: f64, hi: f64) -> Option<f64> {
    let f = |t: f64| alg.constant.ln() + alg.exponent * (1.0 + t).ln() - (exp.constant.ln() - exp.rate * t);
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa.signum() == fb.signum() {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m).signum() == fa.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    Some(0.5 * (a + b))
}
