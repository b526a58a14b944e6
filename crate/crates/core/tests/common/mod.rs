//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod props;

use std::path::PathBuf;
use std::sync::OnceLock;

use lle_core::bloch::BlochStabilityReport;
use lle_core::experiments::{ExperimentConfig, Lab};
use lle_core::profile::{LLEParams, WaveProfile};
use lle_core::spectral::{Field2, PeriodicGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn params() -> LLEParams {
    LLEParams::new(1.0, -1.0, 1.2, 5.5).unwrap()
}

struct Prepared {
    _dir: tempfile::TempDir,
    config: ExperimentConfig,
    wave: WaveProfile,
    report: BlochStabilityReport,
}

fn prepared() -> &'static Prepared {
    static CELL: OnceLock<Prepared> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let lab = Lab::prepare(ExperimentConfig::standard(dir.path())).expect("standard wave certifies");
        Prepared {
            config: lab.config,
            wave: lab.wave,
            report: lab.report,
            _dir: dir,
        }
    })
}

/// The certified stable wave used throughout.
pub fn wave() -> &'static WaveProfile {
    &prepared().wave
}

pub fn report() -> &'static BlochStabilityReport {
    &prepared().report
}

/// A lab on the shared wave writing into a fresh directory.
pub fn lab(n_list: &[usize], t_end: f64) -> (Lab, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let p = prepared();
    let mut config = p.config.clone();
    config.output_dir = PathBuf::from(dir.path());
    config.n_list = n_list.to_vec();
    config.time.t_end = t_end;
    (
        Lab {
            config,
            wave: p.wave.clone(),
            report: p.report.clone(),
        },
        dir,
    )
}

/// Smooth random field on `grid` with `modes` harmonics per component.
pub fn random_field(grid: PeriodicGrid, modes: usize, seed: u64) -> Field2 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = grid.period();
    let coef: Vec<(f64, f64, f64, f64)> = (0..modes)
        .map(|k| {
            let s = (-(k as f64 / 6.0).powi(2)).exp();
            (
                s * rng.random_range(-1.0..1.0),
                s * rng.random_range(-1.0..1.0),
                rng.random_range(0.0..6.3),
                rng.random_range(0.0..6.3),
            )
        })
        .collect();
    Field2::from_fn(grid, |x| {
        let mut re = 0.0;
        let mut im = 0.0;
        for (k, &(a, b, p, q)) in coef.iter().enumerate() {
            let w = 2.0 * std::f64::consts::PI * k as f64 / l;
            re += a * (w * x + p).cos();
            im += b * (w * x + q).sin();
        }
        (re, im)
    })
}

pub fn rel_diff(a: &Field2, b: &Field2) -> f64 {
    a.sub(b).unwrap().l2_norm() / b.l2_norm().max(1e-300)
}
