//! Configuration-driven experiment runs: wave search, certification, linear
//! and nonlinear decay studies, crossover runs and damping reports, with
//! per-job artifact directories and an atomically written manifest.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bloch::{certify_stability, subharmonic_gap, symmetric_grid, BlochError, BlochStabilityReport};
use crate::damping::{damping_report, DampingError, DampingOptions, DampingReport};
use crate::evolution::{evolve_nonlinear, EvolutionError, SimulationConfig, Trajectory};
use crate::fit::{crossover_time, fit_decay_exponent, fit_exponential_rate, slope_vs_log_n, DecayFitResult, ExponentialFit, FitError};
use crate::modulation::{forward_modulated, forward_profile, solve_modulation, ModulationError, ModulationOptions, ModulationState};
use crate::profile::{constant_states, harmonic_seed, solve_profile, LLEParams, ProfileError, WaveProfile};
use crate::semigroup::{KernelOptions, SemigroupError, SemigroupKernel};
use crate::spectral::{inner_product, sobolev_norm, Field2, PeriodicGrid, ScalarField, SpectralError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("wave is not spectrally stable: {0}")]
    NotCertified(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("t_end = {t_end} is shorter than 10/delta_N = {needed:.1} for N = {n}")]
    HorizonTooShort { n: usize, t_end: f64, needed: f64 },
    #[error("N = {n}: {source}")]
    Job { n: usize, source: Box<ExperimentError> },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Bloch(#[from] BlochError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Damping(#[from] DampingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<EvolutionError> for ExperimentError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::InvalidConfig(s) => Self::Config(s),
            EvolutionError::Io(e) => Self::Io(e),
            other => Self::Divergence(other.to_string()),
        }
    }
}

impl From<ModulationError> for ExperimentError {
    fn from(e: ModulationError) -> Self {
        match e {
            ModulationError::NotSmall { .. } => Self::Config(e.to_string()),
            ModulationError::Io(e) => Self::Io(e),
            other => Self::Divergence(other.to_string()),
        }
    }
}

impl ExperimentError {
    /// Process exit code: 2 certification failed, 3 numerical divergence, 4 config error, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Job { source, .. } => source.exit_code(),
            Self::NotCertified(_) | Self::Bloch(BlochError::NotCertified) => 2,
            Self::Divergence(_) => 3,
            Self::Config(_) | Self::HorizonTooShort { .. } => 4,
            Self::Profile(ProfileError::InvalidParams(_)) => 4,
            Self::Profile(ProfileError::NoConvergence { .. }) => 3,
            _ => 1,
        }
    }

    fn in_job(self, n: usize) -> Self {
        Self::Job { n, source: Box::new(self) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Gaussian Fourier data on the long modes `2 pi k / (N T)`.
    RandomSmooth,
    /// `cos(2 pi x / (N T))` in the real component.
    SingleMode,
    /// `phi(x + s) - phi(x)`.
    Translate,
    /// Random T-periodic shape under an envelope of width `width * T`.
    Localized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub kind: PerturbationKind,
    /// Size in `||.||_{L^1} + ||.||_{H^2}`.
    pub amplitude: f64,
    pub seed: u64,
    /// Envelope width in periods (`localized` only).
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    1.35
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSearch {
    pub n_points: usize,
    /// Which constant state (ascending `|u|^2`) seeds the search.
    pub branch: usize,
    pub seed_eps: f64,
    pub relax_dt: f64,
    pub relax_time: f64,
    pub newton_tol: f64,
}

impl Default for WaveSearch {
    fn default() -> Self {
        Self {
            n_points: 64,
            branch: 0,
            seed_eps: 0.1,
            relax_dt: 0.01,
            relax_time: 300.0,
            newton_tol: 1e-11,
        }
    }
}

fn default_m() -> usize {
    32
}
fn default_certify_half() -> usize {
    32
}
fn default_samples() -> usize {
    300
}
fn default_workers() -> usize {
    1
}
fn default_nonlinear_fit_start() -> f64 {
    10.0
}
fn default_delta_fraction() -> f64 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: LLEParams,
    #[serde(rename = "N_list")]
    pub n_list: Vec<usize>,
    pub perturbation: PerturbationConfig,
    pub time: SimulationConfig,
    pub fit_window: (f64, f64),
    pub output_dir: PathBuf,
    #[serde(default)]
    pub wave: WaveSearch,
    /// Fourier truncation of the Bloch matrices.
    #[serde(default = "default_m")]
    pub bloch_modes: usize,
    /// Certification grid is `2 * certify_half + 1` points on `[-pi/T, pi/T]`.
    #[serde(default = "default_certify_half")]
    pub certify_half: usize,
    /// Time samples in a linear decay sweep.
    #[serde(default = "default_samples")]
    pub linear_samples: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_delta_fraction")]
    pub delta_fraction: f64,
    /// Earliest fit time for the nonlinear norms, past the H^2 transient.
    #[serde(default = "default_nonlinear_fit_start")]
    pub nonlinear_fit_start: f64,
    #[serde(default)]
    pub modulation: ModulationOptions,
    #[serde(default)]
    pub damping: DampingOptions,
    /// Keep full trajectories of nonlinear runs on disk.
    #[serde(default)]
    pub save_trajectories: bool,
}

impl ExperimentConfig {
    /// Defaults for the stable wave at `alpha = 1, beta = -1, F = 1.2, T = 5.5`.
    pub fn standard(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            params: LLEParams::new(1.0, -1.0, 1.2, 5.5).expect("valid parameters"),
            n_list: vec![32],
            perturbation: PerturbationConfig {
                kind: PerturbationKind::Localized,
                amplitude: 1e-3,
                seed: 1,
                width: default_width(),
            },
            time: SimulationConfig {
                dt: 5e-3,
                t_end: 100.0,
                snapshot_stride: 20,
                dealias: false,
                probe_every: 0,
            },
            fit_window: (2.0, 1e3),
            output_dir: output_dir.into(),
            wave: WaveSearch::default(),
            bloch_modes: default_m(),
            certify_half: default_certify_half(),
            linear_samples: default_samples(),
            workers: default_workers(),
            delta_fraction: default_delta_fraction(),
            nonlinear_fit_start: default_nonlinear_fit_start(),
            modulation: ModulationOptions::default(),
            damping: DampingOptions::default(),
            save_trajectories: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` overrides; dotted keys address nested tables and
    /// values are parsed as TOML (bare words fall back to strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut root = toml::Value::try_from(self).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_toml_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for part in &path[..path.len() - 1] {
                node = node
                    .get_mut(*part)
                    .ok_or_else(|| ExperimentError::Config(format!("unknown key `{key}`")))?;
            }
            let table = node
                .as_table_mut()
                .ok_or_else(|| ExperimentError::Config(format!("`{key}` does not address a table entry")))?;
            let leaf = path[path.len() - 1];
            if !table.contains_key(leaf) {
                return Err(ExperimentError::Config(format!("unknown key `{key}`")));
            }
            table.insert(leaf.to_string(), value);
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |s: String| Err(ExperimentError::Config(s));
        self.params.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.time.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("N_list must be nonempty with positive entries".into());
        }
        if !(self.perturbation.amplitude >= 0.0) {
            return bad("perturbation amplitude must be nonnegative".into());
        }
        if !(self.perturbation.width > 0.0) {
            return bad("perturbation width must be positive".into());
        }
        let (lo, hi) = self.fit_window;
        if !(lo >= 0.0 && lo < hi) {
            return bad(format!("fit window ({lo}, {hi}) is not an interval"));
        }
        if !(self.nonlinear_fit_start >= 0.0) {
            return bad("nonlinear_fit_start must be nonnegative".into());
        }
        if !(self.delta_fraction > 0.0 && self.delta_fraction < 1.0) {
            return bad("delta_fraction must lie in (0, 1)".into());
        }
        if self.workers == 0 || self.linear_samples < 2 || self.wave.n_points < 8 {
            return bad("workers, linear_samples and wave.n_points must be positive and sensible".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// `||f||_{L^1} + ||f||_{H^2}`.
pub fn data_size(f: &Field2) -> f64 {
    f.l1_norm() + sobolev_norm(f, 2).expect("order within range")
}

fn envelope(grid: &PeriodicGrid, n: usize, width: f64) -> Vec<f64> {
    let l = grid.period();
    let kappa = 2.0 * (n as f64 / (2.0 * PI * width)).powi(2);
    grid.nodes()
        .iter()
        .map(|x| (kappa * ((2.0 * PI * (x - l / 2.0) / l).cos() - 1.0)).exp())
        .collect()
}

fn random_series(rng: &mut ChaCha8Rng, nodes: &[f64], base: f64, modes: usize) -> Vec<f64> {
    let mut out = vec![0.0; nodes.len()];
    for k in 0..modes {
        let a: f64 = rng.sample::<f64, _>(StandardNormal) * (-(k as f64 / 8.0).powi(2) / 2.0).exp();
        let p: f64 = rng.random_range(0.0..2.0 * PI);
        for (o, x) in out.iter_mut().zip(nodes) {
            *o += a * (k as f64 * base * x + p).cos();
        }
    }
    out
}

/// The configured perturbation on `[0, N T]`.
pub fn generate_perturbation(cfg: &PerturbationConfig, phi: &WaveProfile, n: usize) -> Field2 {
    let ext = phi.field.tile(n);
    let grid = *ext.grid();
    if cfg.amplitude == 0.0 {
        return Field2::zeros(grid);
    }
    let t = phi.params.period;
    let nodes = grid.nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = match cfg.kind {
        PerturbationKind::Translate => {
            let d = phi.derivative();
            let s = cfg.amplitude / data_size(&d);
            return ext.translate(s).sub(&ext).expect("same grid");
        }
        PerturbationKind::SingleMode => {
            let k = 2.0 * PI / (n as f64 * t);
            Field2::from_fn(grid, |x| ((k * x).cos(), 0.0))
        }
        PerturbationKind::RandomSmooth => {
            let k = 2.0 * PI / (n as f64 * t);
            let re = random_series(&mut rng, &nodes, k, 40);
            let im = random_series(&mut rng, &nodes, k, 40);
            Field2::from_components(grid, &re, &im).expect("finite")
        }
        PerturbationKind::Localized => {
            let k = 2.0 * PI / t;
            let env = envelope(&grid, n, cfg.width);
            let re: Vec<f64> = random_series(&mut rng, &nodes, k, 16).iter().zip(&env).map(|(a, b)| a * b).collect();
            let im: Vec<f64> = random_series(&mut rng, &nodes, k, 16).iter().zip(&env).map(|(a, b)| a * b).collect();
            Field2::from_components(grid, &re, &im).expect("finite")
        }
    };
    raw.scale(cfg.amplitude / data_size(&raw))
}

/// Relaxation from a harmonic seed followed by Newton refinement.
pub fn find_wave(params: &LLEParams, search: &WaveSearch) -> Result<WaveProfile, ExperimentError> {
    let roots = constant_states(params.alpha, params.forcing);
    let rho = *roots
        .get(search.branch)
        .ok_or_else(|| ExperimentError::Config(format!("constant-state branch {} does not exist", search.branch)))?;
    let seed = harmonic_seed(params, search.n_points, rho, search.seed_eps)?;
    let steps = (search.relax_time / search.relax_dt).round().max(1.0) as usize;
    let cfg = SimulationConfig {
        dt: search.relax_dt,
        t_end: search.relax_time,
        snapshot_stride: steps,
        dealias: false,
        probe_every: 0,
    };
    let relaxed = evolve_nonlinear(&seed, params, &cfg)?;
    Ok(solve_profile(relaxed.final_state(), params, search.newton_tol)?)
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    write_atomic(path, serde_json::to_string_pretty(value).expect("serializes").as_bytes())
}

/// A wave together with its stability certificate and the run configuration.
pub struct Lab {
    pub config: ExperimentConfig,
    pub wave: WaveProfile,
    pub report: BlochStabilityReport,
}

impl Lab {
    /// Load `wave.json` from the output directory or search for a wave, then certify it.
    pub fn prepare(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        std::fs::create_dir_all(&config.output_dir)?;
        let wave_path = config.output_dir.join("wave.json");
        let wave = match std::fs::read_to_string(&wave_path) {
            Ok(s) => {
                let w = WaveProfile::from_json(&s)?;
                if w.params != config.params {
                    return Err(ExperimentError::Config(format!(
                        "{} holds a wave for different parameters",
                        wave_path.display()
                    )));
                }
                w
            }
            Err(_) => {
                let w = find_wave(&config.params, &config.wave)?;
                write_atomic(&wave_path, w.to_json().as_bytes())?;
                w
            }
        };
        let report = certify_stability(&wave, &symmetric_grid(config.certify_half, wave.params.period), config.bloch_modes)?;
        write_atomic(&config.output_dir.join("certificate.json"), report.to_json().as_bytes())?;
        write_atomic(&config.output_dir.join("spectra.csv"), report.spectra_csv().as_bytes())?;
        if !report.passed() {
            return Err(ExperimentError::NotCertified(format!(
                "coverage {} D1 {} D2 {} D3 {}",
                report.coverage_ok, report.d1_passed, report.d2_passed, report.d3_passed
            )));
        }
        Ok(Self { config, wave, report })
    }

    pub fn kernel(&self, n: usize) -> Result<SemigroupKernel, ExperimentError> {
        let opts = KernelOptions {
            m: self.config.bloch_modes,
            ..KernelOptions::default()
        };
        Ok(SemigroupKernel::new(&self.wave, n, &opts)?)
    }

    pub fn gap(&self, kernel: &SemigroupKernel) -> Result<f64, ExperimentError> {
        Ok(subharmonic_gap(&self.wave, kernel.curve(), &self.report, kernel.n_periods())?)
    }

    fn job_dir(&self, study: &str, n: usize) -> Result<PathBuf, ExperimentError> {
        let d = self
            .config
            .output_dir
            .join(study)
            .join(format!("N{n}_seed{}", self.config.perturbation.seed));
        std::fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn run_jobs<T: Send>(
        &self,
        study: &str,
        job: impl Fn(usize, &Path) -> Result<T, ExperimentError> + Sync,
    ) -> Result<Vec<T>, ExperimentError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let results: Vec<Result<T, ExperimentError>> = pool.install(|| {
            self.config
                .n_list
                .par_iter()
                .map(|&n| {
                    let dir = self.job_dir(study, n)?;
                    job(n, &dir).map_err(|e| e.in_job(n))
                })
                .collect()
        });
        results.into_iter().collect()
    }

    /// Manifest with the config, its hash, crate version and `results`, written last.
    fn write_manifest(&self, study: &str, results: &impl Serialize) -> Result<PathBuf, ExperimentError> {
        let dir = self.config.output_dir.join(study);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml())?;
        let manifest = serde_json::json!({
            "study": study,
            "config": self.config,
            "config_hash": self.config.hash(),
            "versions": {"lle-core": env!("CARGO_PKG_VERSION")},
            "wave": {"first_harmonic": self.wave.first_harmonic(), "theta": self.report.theta},
            "results": results,
        });
        let path = dir.join("manifest.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// A finished job's summary, if its directory holds one for this config.
    fn resume<T: for<'de> Deserialize<'de>>(&self, dir: &Path) -> Option<T> {
        let text = std::fs::read_to_string(dir.join("summary.json")).ok()?;
        let v: serde_json::Value = serde_json::from_str(&text).ok()?;
        if v.get("config_hash")?.as_str()? != self.config.hash() {
            return None;
        }
        serde_json::from_value(v.get("summary")?.clone()).ok()
    }

    fn finish_job<T: Serialize>(&self, dir: &Path, summary: &T) -> Result<(), ExperimentError> {
        write_json(
            &dir.join("summary.json"),
            &serde_json::json!({"config_hash": self.config.hash(), "summary": summary}),
        )
    }
}

/// Fit window for N: the configured window capped by `1/(4 delta_N)` and the data range.
pub fn intermediate_window(window: (f64, f64), delta_n: f64, t_end: f64) -> Option<(f64, f64)> {
    let hi = window.1.min(1.0 / (4.0 * delta_n)).min(t_end);
    (hi > window.0).then_some((window.0, hi))
}

fn try_fit(series: &[(f64, f64)], window: Option<(f64, f64)>) -> Option<DecayFitResult> {
    window.and_then(|w| fit_decay_exponent(series, w).ok())
}

/// `window` cut where `series` drops below `rel * sup |series|` for good.
///
/// `|sigma - sigma_nl|` settles to roundoff within a few time units; the fit
/// only sees the part that is still resolved.
pub fn resolved_window(series: &[(f64, f64)], window: (f64, f64), rel: f64) -> Option<(f64, f64)> {
    let top = series.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    let floor = rel * top;
    let last = series.iter().rev().find(|p| p.1 > floor && p.0 >= window.0)?.0;
    let hi = window.1.min(last);
    (hi > window.0).then_some((window.0, hi))
}

/// `sup_t value(t) (1 + t)^{-p} / size`.
pub fn prefactor(series: &[(f64, f64)], p: f64, size: f64) -> f64 {
    series.iter().map(|(t, v)| v * (1.0 + t).powf(-p) / size).fold(0.0, f64::max)
}

pub const LINEAR_TARGETS: [f64; 3] = [-0.25, -0.25, -0.75];
pub const LINEAR_NAMES: [&str; 3] = ["norm_minus_P", "norm_gamma", "norm_minus_phase"];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearJob {
    pub n: usize,
    pub delta_n: f64,
    pub sigma: f64,
    pub size: f64,
    pub window: Option<(f64, f64)>,
    /// Fits of `norm_minus_P`, `norm_gamma`, `norm_minus_phase`.
    pub fits: Vec<Option<DecayFitResult>>,
    /// `sup_t norm (1+t)^{-target} / ||f||` for the same three norms, `t` in `[0, fit_window.1]`.
    pub prefactors: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearDecaySummary {
    pub jobs: Vec<LinearJob>,
    /// Slope of `log prefactor` against `log N` per norm.
    pub prefactor_slopes: Vec<f64>,
}

pub fn run_linear_decay(lab: &Lab) -> Result<LinearDecaySummary, ExperimentError> {
    let cfg = &lab.config;
    let jobs = lab.run_jobs("linear", |n, dir| {
        if let Some(j) = lab.resume::<LinearJob>(dir) {
            return Ok(j);
        }
        let kernel = lab.kernel(n)?;
        let delta_n = lab.gap(&kernel)?;
        let f = generate_perturbation(&cfg.perturbation, &lab.wave, n);
        let size = data_size(&f);
        let window = intermediate_window(cfg.fit_window, delta_n, f64::INFINITY);
        let t_max = window.map_or(cfg.fit_window.0.max(1.0) * 2.0, |w| w.1);
        let m = cfg.linear_samples;
        let times: Vec<f64> = (0..=m).map(|i| t_max * i as f64 / m as f64).collect();
        let sweep = kernel.decay_sweep(&f, &times)?;
        std::fs::write(dir.join("decay.csv"), sweep.to_csv())?;
        let series = [
            sweep.series(|r| r.norm_minus_p),
            sweep.series(|r| r.norm_gamma),
            sweep.series(|r| r.norm_minus_phase),
        ];
        // Prefactors are taken over the same time range for every N.
        let horizon = cfg.fit_window.1;
        let times: Vec<f64> = (0..=m).map(|i| horizon * i as f64 / m as f64).collect();
        let long = kernel.decay_sweep(&f, &times)?;
        std::fs::write(dir.join("decay_long.csv"), long.to_csv())?;
        let long_series = [
            long.series(|r| r.norm_minus_p),
            long.series(|r| r.norm_gamma),
            long.series(|r| r.norm_minus_phase),
        ];
        let job = LinearJob {
            n,
            delta_n,
            sigma: sweep.sigma,
            size,
            window,
            fits: series.iter().map(|s| try_fit(s, window)).collect(),
            prefactors: long_series
                .iter()
                .zip(LINEAR_TARGETS)
                .map(|(s, p)| if size > 0.0 { prefactor(s, p, size) } else { 0.0 })
                .collect(),
        };
        lab.finish_job(dir, &job)?;
        Ok(job)
    })?;
    let prefactor_slopes = (0..3)
        .map(|c| {
            let pts: Vec<(usize, f64)> = jobs.iter().filter(|j| j.prefactors[c] > 0.0).map(|j| (j.n, j.prefactors[c])).collect();
            if pts.len() >= 2 { slope_vs_log_n(&pts) } else { 0.0 }
        })
        .collect();
    let summary = LinearDecaySummary { jobs, prefactor_slopes };
    lab.write_manifest("linear", &summary)?;
    Ok(summary)
}

/// Relative level below which `|sigma - sigma_nl|` is roundoff.
pub const SIGMA_FLOOR: f64 = 1e-11;
pub const NONLINEAR_TARGETS: [f64; 5] = [-0.25, -0.25, -0.75, -0.75, -0.75];
pub const NONLINEAR_HEADER: &str =
    "t,norm_translate_h2,norm_gamma_nl_l2,norm_modulated_h2,norm_gamma_x_h3,norm_gamma_t_h2,sigma_deviation";

/// The norm trajectories of the nonlinear decay laws at each snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlinearNorms {
    pub times: Vec<f64>,
    /// `||psi - phi(. + sigma_nl/N)||_{H^2}`, `||gamma_nl - sigma_nl/N||_{L^2}`,
    /// `||psi - phi(. + gamma_nl)||_{H^2}`, `||d_x gamma_nl||_{H^3}`,
    /// `||d_t gamma_nl||_{H^2}`, `|sigma - sigma_nl|`.
    pub rows: Vec<[f64; 6]>,
}

impl NonlinearNorms {
    pub fn series(&self, c: usize) -> Vec<(f64, f64)> {
        self.times.iter().zip(&self.rows).map(|(t, r)| (*t, r[c])).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{NONLINEAR_HEADER}\n");
        for (t, r) in self.times.iter().zip(&self.rows) {
            s.push_str(&format!("{t:.17e}"));
            for v in r {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }
}

pub fn nonlinear_norms(traj: &Trajectory, phi: &WaveProfile, state: &ModulationState) -> Result<NonlinearNorms, ExperimentError> {
    let n = state.n_periods;
    let nn = n as f64;
    let zero = ScalarField::zeros(*traj.grid());
    let settled = forward_profile(phi, &zero, state.sigma_nl, n)?;
    let rows: Vec<Result<[f64; 6], ExperimentError>> = (0..traj.len())
        .into_par_iter()
        .map(|k| {
            let psi = &traj.states[k];
            let r1 = sobolev_norm(&psi.sub(&settled)?, 2)?;
            let r2 = state.gamma_nl(k).add_constant(-state.sigma_nl / nn).l2_norm();
            let r3 = sobolev_norm(&forward_modulated(psi, phi, &state.gamma(k), state.sigma[k], n)?, 2)?;
            let r4 = state.gamma_deriv(k, 1).sobolev_norm(3);
            let r5 = state.gamma_t(k).add_constant(state.sigma_t[k] / nn).sobolev_norm(2);
            let r6 = (state.sigma[k] - state.sigma_nl).abs();
            Ok([r1, r2, r3, r4, r5, r6])
        })
        .collect();
    Ok(NonlinearNorms {
        times: traj.times.clone(),
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlinearJob {
    pub n: usize,
    pub delta_n: f64,
    /// `E_0 = ||v_0||_{L^1} + ||v_0||_{H^2}`.
    pub e0: f64,
    pub degenerate: bool,
    pub sigma_nl: f64,
    pub sigma_nl_tail: f64,
    pub picard_iterations: usize,
    pub window: Option<(f64, f64)>,
    /// Fits of the six series in [`NonlinearNorms`] order.
    pub fits: Vec<Option<DecayFitResult>>,
    /// `sup_t norm (1+t)^{-target} / E_0` for the five decaying norms.
    pub prefactors: Vec<f64>,
    pub damping_c: Option<f64>,
    pub damping_k: Option<f64>,
    pub damping_feasible: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NonlinearDecaySummary {
    pub jobs: Vec<NonlinearJob>,
}

/// Evolve `phi + v0`, solve the modulation system and collect the decay norms.
pub fn nonlinear_run(
    lab: &Lab,
    kernel: &SemigroupKernel,
    time: &SimulationConfig,
) -> Result<(Trajectory, ModulationState, NonlinearNorms), ExperimentError> {
    let n = kernel.n_periods();
    let v0 = generate_perturbation(&lab.config.perturbation, &lab.wave, n);
    let psi0 = lab.wave.field.tile(n).add(&v0)?;
    let traj = evolve_nonlinear(&psi0, &lab.wave.params, time)?;
    let state = solve_modulation(&traj, &lab.wave, kernel, &lab.config.modulation)?;
    let norms = nonlinear_norms(&traj, &lab.wave, &state)?;
    Ok((traj, state, norms))
}

pub fn run_nonlinear_decay(lab: &Lab) -> Result<NonlinearDecaySummary, ExperimentError> {
    let cfg = &lab.config;
    let jobs = lab.run_jobs("nonlinear", |n, dir| {
        if let Some(j) = lab.resume::<NonlinearJob>(dir) {
            return Ok(j);
        }
        let kernel = lab.kernel(n)?;
        let delta_n = lab.gap(&kernel)?;
        let start = cfg.fit_window.0.max(cfg.nonlinear_fit_start);
        let window = intermediate_window((start, cfg.fit_window.1), delta_n, cfg.time.t_end);
        if cfg.perturbation.amplitude == 0.0 {
            // phi itself is the trajectory; every norm vanishes identically.
            let steps = cfg.time.n_steps() / cfg.time.snapshot_stride;
            let norms = NonlinearNorms {
                times: (0..=steps).map(|k| k as f64 * cfg.time.snapshot_spacing()).collect(),
                rows: vec![[0.0; 6]; steps + 1],
            };
            std::fs::write(dir.join("nonlinear.csv"), norms.to_csv())?;
            let job = NonlinearJob {
                n,
                delta_n,
                e0: 0.0,
                degenerate: true,
                sigma_nl: 0.0,
                sigma_nl_tail: 0.0,
                picard_iterations: 0,
                window,
                fits: vec![None; 6],
                prefactors: vec![0.0; 5],
                damping_c: Some(1.0),
                damping_k: Some(0.0),
                damping_feasible: Some(true),
            };
            lab.finish_job(dir, &job)?;
            return Ok(job);
        }
        let (traj, state, norms) = nonlinear_run(lab, &kernel, &cfg.time)?;
        let e0 = data_size(&traj.states[0].sub(&lab.wave.field.tile(n))?);
        std::fs::write(dir.join("nonlinear.csv"), norms.to_csv())?;
        state.save(&dir.join("modulation"))?;
        if cfg.save_trajectories {
            traj.save(&dir.join("trajectory"))?;
        }
        let damping = match damping_report(&traj, &state, &lab.wave, &cfg.damping) {
            Ok(r) => {
                std::fs::write(dir.join("damping.csv"), r.to_csv())?;
                write_json(&dir.join("damping.json"), &r.summary_json())?;
                Some(r)
            }
            Err(DampingError::SmallnessViolated { time, value, r1 }) => {
                log::warn!("N = {n}: damping monitor {value:.3e} > R1 = {r1} at t = {time}");
                None
            }
            Err(e) => return Err(e.into()),
        };
        let job = NonlinearJob {
            n,
            delta_n,
            e0,
            degenerate: false,
            sigma_nl: state.sigma_nl,
            sigma_nl_tail: state.sigma_nl_tail,
            picard_iterations: state.iterations,
            window,
            fits: (0..6)
                .map(|c| {
                    let series = norms.series(c);
                    if c == 5 {
                        // the sigma deviation uses the early window, cut at roundoff
                        let early = intermediate_window(cfg.fit_window, delta_n, cfg.time.t_end);
                        try_fit(&series, early.and_then(|w| resolved_window(&series, w, SIGMA_FLOOR)))
                    } else {
                        try_fit(&series, window)
                    }
                })
                .collect(),
            prefactors: (0..5).map(|c| prefactor(&norms.series(c), NONLINEAR_TARGETS[c], e0)).collect(),
            damping_c: damping.as_ref().map(|d| d.c),
            damping_k: damping.as_ref().map(|d| d.k),
            damping_feasible: damping.as_ref().map(|d| d.feasible),
        };
        lab.finish_job(dir, &job)?;
        Ok(job)
    })?;
    let summary = NonlinearDecaySummary { jobs };
    lab.write_manifest("nonlinear", &summary)?;
    Ok(summary)
}

/// Translate `s` minimizing `||psi - phi(. + s)||_{L^2}`, by Newton steps from `s0`.
pub fn best_translate(psi: &Field2, phi: &WaveProfile, n: usize, s0: f64) -> Result<f64, ExperimentError> {
    let ext = phi.field.tile(n);
    let d1 = phi.derivative().tile(n);
    let mut s = s0;
    for _ in 0..20 {
        let shifted = ext.translate(s);
        let dshift = d1.translate(s);
        let r = psi.sub(&shifted)?;
        let g = inner_product(&dshift, &r)?;
        let h = inner_product(&dshift, &dshift)? - inner_product(&dshift.derivative_unchecked(1), &r)?;
        let step = g / h;
        s += step;
        if step.abs() < 1e-15 * (1.0 + s.abs()) {
            break;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossoverJob {
    pub n: usize,
    pub delta_n: f64,
    /// `delta = delta_fraction * delta_N`.
    pub delta: f64,
    pub e0: f64,
    /// `sup_t u(t) (1+t)^{1/4} / E_0`.
    pub m_algebraic: f64,
    /// `sup_t u(t) e^{delta t} / E_0`.
    pub m_exponential: f64,
    /// Last time at which `M_delta e^{-delta t}` is not below `M (1+t)^{-1/4}`.
    pub crossover_time: f64,
    /// Rate fitted over `[5/delta_N, 10/delta_N]`.
    pub late_rate: Option<ExponentialFit>,
    pub rate_relative_error: Option<f64>,
    pub translate: f64,
    pub sigma_nl_over_n: f64,
    pub translate_error: f64,
}

/// Last time at which the exponential bound `m_exp e^{-delta t}` is not
/// below the algebraic bound `m_alg (1+t)^{-1/4}`; zero if it never is.
pub fn bound_crossover(m_alg: f64, m_exp: f64, delta: f64) -> f64 {
    if !(m_alg > 0.0 && m_exp > 0.0 && delta > 0.0) {
        return 0.0;
    }
    let alg = DecayFitResult {
        exponent: -0.25,
        constant: m_alg,
        r_squared: 1.0,
        window: (0.0, f64::INFINITY),
        n_points: 0,
    };
    let exp = ExponentialFit {
        rate: delta,
        constant: m_exp,
        r_squared: 1.0,
        window: (0.0, f64::INFINITY),
        n_points: 0,
    };
    // log(exp bound / alg bound) is concave in t with its peak at 1/(4 delta) - 1.
    let gap = |t: f64| m_exp.ln() - delta * t - m_alg.ln() + 0.25 * (1.0 + t).ln();
    let peak = (0.25 / delta - 1.0).max(0.0);
    if gap(peak) < 0.0 {
        return 0.0;
    }
    let mut hi = 2.0 * peak + 1.0;
    while gap(hi) >= 0.0 {
        hi *= 2.0;
    }
    crossover_time(&alg, &exp, peak, hi).unwrap_or(peak)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossoverSummary {
    pub jobs: Vec<CrossoverJob>,
    /// Crossover times strictly increase along increasing N.
    pub monotone: bool,
}

pub const CROSSOVER_HEADER: &str = "t,norm_settled_l2,norm_asymptotic_l2";

pub fn run_crossover(lab: &Lab) -> Result<CrossoverSummary, ExperimentError> {
    let cfg = &lab.config;
    let mut jobs = lab.run_jobs("crossover", |n, dir| {
        if let Some(j) = lab.resume::<CrossoverJob>(dir) {
            return Ok(j);
        }
        let kernel = lab.kernel(n)?;
        let delta_n = lab.gap(&kernel)?;
        let needed = 10.0 / delta_n;
        if cfg.time.t_end < needed {
            return Err(ExperimentError::HorizonTooShort {
                n,
                t_end: cfg.time.t_end,
                needed,
            });
        }
        let (traj, state, _) = nonlinear_run(lab, &kernel, &cfg.time)?;
        let ext = lab.wave.field.tile(n);
        let e0 = data_size(&traj.states[0].sub(&ext)?);
        let nn = n as f64;
        let settled = ext.translate(state.sigma_nl / nn);
        let translate = best_translate(traj.final_state(), &lab.wave, n, state.sigma_nl / nn)?;
        let asymptotic = ext.translate(translate);
        let u: Vec<(f64, f64)> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| (*t, s.sub(&settled).expect("same grid").l2_norm()))
            .collect();
        let w: Vec<(f64, f64)> = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| (*t, s.sub(&asymptotic).expect("same grid").l2_norm()))
            .collect();
        let mut csv = format!("{CROSSOVER_HEADER}\n");
        for (a, b) in u.iter().zip(&w) {
            csv.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", a.0, a.1, b.1));
        }
        std::fs::write(dir.join("crossover.csv"), csv)?;
        let delta = cfg.delta_fraction * delta_n;
        // Suprema stop at the horizon 10/delta_N, before u(t) reaches roundoff.
        let early: Vec<(f64, f64)> = u.iter().copied().filter(|(t, _)| *t <= needed).collect();
        let m_algebraic = prefactor(&early, -0.25, e0);
        let m_exponential = early.iter().map(|(t, v)| v * (delta * t).exp() / e0).fold(0.0, f64::max);
        let crossover = bound_crossover(m_algebraic, m_exponential, delta);
        let late_rate = fit_exponential_rate(&w, (5.0 / delta_n, needed)).ok();
        let job = CrossoverJob {
            n,
            delta_n,
            delta,
            e0,
            m_algebraic,
            m_exponential,
            crossover_time: crossover,
            rate_relative_error: late_rate.map(|f| (f.rate - delta_n).abs() / delta_n),
            late_rate,
            translate,
            sigma_nl_over_n: state.sigma_nl / nn,
            translate_error: (translate - state.sigma_nl / nn).abs(),
        };
        lab.finish_job(dir, &job)?;
        Ok(job)
    })?;
    jobs.sort_by_key(|j| j.n);
    let monotone = jobs.windows(2).all(|p| p[1].crossover_time > p[0].crossover_time);
    let summary = CrossoverSummary { jobs, monotone };
    lab.write_manifest("crossover", &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DampingJob {
    pub n: usize,
    pub c: f64,
    pub k: f64,
    pub feasible: bool,
    pub chain_violations: usize,
    /// `C` from the same run with `dt` halved.
    pub c_half_dt: f64,
    pub c_relative_change: f64,
    pub max_memory_discrepancy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DampingSummary {
    pub jobs: Vec<DampingJob>,
}

/// Damping report for one nonlinear run at the given time settings.
pub fn damping_for(lab: &Lab, kernel: &SemigroupKernel, time: &SimulationConfig) -> Result<DampingReport, ExperimentError> {
    let (traj, state, _) = nonlinear_run(lab, kernel, time)?;
    Ok(damping_report(&traj, &state, &lab.wave, &lab.config.damping)?)
}

pub fn run_damping_report(lab: &Lab) -> Result<DampingSummary, ExperimentError> {
    let cfg = &lab.config;
    let jobs = lab.run_jobs("damping", |n, dir| {
        if let Some(j) = lab.resume::<DampingJob>(dir) {
            return Ok(j);
        }
        let kernel = lab.kernel(n)?;
        let full = damping_for(lab, &kernel, &cfg.time)?;
        let half_time = SimulationConfig {
            dt: cfg.time.dt / 2.0,
            snapshot_stride: cfg.time.snapshot_stride * 2,
            ..cfg.time
        };
        let half = damping_for(lab, &kernel, &half_time)?;
        std::fs::write(dir.join("damping.csv"), full.to_csv())?;
        write_json(&dir.join("damping.json"), &full.summary_json())?;
        let job = DampingJob {
            n,
            c: full.c,
            k: full.k,
            feasible: full.feasible,
            chain_violations: full.chain_violations.len(),
            c_half_dt: half.c,
            c_relative_change: (half.c - full.c).abs() / full.c,
            max_memory_discrepancy: full.max_memory_discrepancy,
        };
        lab.finish_job(dir, &job)?;
        Ok(job)
    })?;
    let summary = DampingSummary { jobs };
    lab.write_manifest("damping", &summary)?;
    Ok(summary)
}

/// Fits of every named column of a CSV table against its `t` column.
pub fn fit_table(text: &str, window: (f64, f64)) -> Result<BTreeMap<String, Result<DecayFitResult, String>>, ExperimentError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| ExperimentError::Config("empty table".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if header.first().map(String::as_str) != Some("t") {
        return Err(ExperimentError::Config("first column must be `t`".into()));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (i, line) in lines.enumerate() {
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() != header.len() {
            return Err(ExperimentError::Config(format!("row {} has {} fields, expected {}", i + 2, vals.len(), header.len())));
        }
        for (c, v) in vals.iter().enumerate() {
            cols[c].push(
                v.trim()
                    .parse()
                    .map_err(|_| ExperimentError::Config(format!("row {}: `{v}` is not a number", i + 2)))?,
            );
        }
    }
    Ok(header
        .iter()
        .enumerate()
        .skip(1)
        .map(|(c, name)| {
            let series: Vec<(f64, f64)> = cols[0].iter().copied().zip(cols[c].iter().copied()).collect();
            (name.clone(), fit_decay_exponent(&series, window).map_err(|e| e.to_string()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = ExperimentConfig::standard("out");
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        let o = cfg
            .with_overrides(&["perturbation.amplitude=2e-3".into(), "N_list=[1, 2]".into(), "time.dt = 0.01".into()])
            .unwrap();
        assert_eq!(o.perturbation.amplitude, 2e-3);
        assert_eq!(o.n_list, vec![1, 2]);
        assert_eq!(o.time.dt, 0.01);
        assert_ne!(o.hash(), cfg.hash());
        assert!(cfg.with_overrides(&["nope.x=1".into()]).is_err());
        assert!(cfg.with_overrides(&["bogus=1".into()]).is_err());
        assert!(cfg.with_overrides(&["fit_window=[5.0, 1.0]".into()]).is_err());
        assert_eq!(cfg.with_overrides(&["N_list=[]".into()]).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn fit_table_reads_columns() {
        let mut s = String::from("t,a,b\n");
        for i in 0..50 {
            let t = i as f64;
            s.push_str(&format!("{t},{},{}\n", (1.0 + t).powf(-0.75), 2.0));
        }
        let fits = fit_table(&s, (0.0, 49.0)).unwrap();
        assert!((fits["a"].as_ref().unwrap().exponent + 0.75).abs() < 1e-10);
        assert!(fits["b"].as_ref().unwrap().exponent.abs() < 1e-10);
        assert!(fit_table("x,a\n1,2\n", (0.0, 1.0)).is_err());
    }

    #[test]
    fn bound_crossover_cases() {
        let t = bound_crossover(1.0, 1.0, 0.05);
        assert!(t > 0.25 / 0.05 - 1.0);
        assert!((0.25 * (1.0 + t).ln() - 0.05 * t).abs() < 1e-9);
        assert_eq!(bound_crossover(1.0, 0.1, 0.2), 0.0);
        assert!(bound_crossover(1.0, 10.0, 0.01) > bound_crossover(1.0, 10.0, 0.02));
    }

    #[test]
    fn window_capping() {
        assert_eq!(intermediate_window((2.0, 1e3), 0.01, 1e4), Some((2.0, 25.0)));
        assert_eq!(intermediate_window((2.0, 1e3), 0.5, 1e4), None);
        assert_eq!(intermediate_window((2.0, 10.0), 0.001, 8.0), Some((2.0, 8.0)));
        let s: Vec<(f64, f64)> = (0..100).map(|k| (k as f64, if k < 30 { (-(k as f64)).exp() } else { 0.0 })).collect();
        assert_eq!(resolved_window(&s, (2.0, 80.0), 1e-11), Some((2.0, 25.0)));
        assert_eq!(resolved_window(&s, (2.0, 10.0), 1e-11), Some((2.0, 10.0)));
        assert_eq!(resolved_window(&s, (40.0, 80.0), 1e-11), None);
    }
}
