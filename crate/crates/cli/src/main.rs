use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lle_core::experiments::{
    find_wave, fit_table, run_crossover, run_damping_report, run_linear_decay, run_nonlinear_decay, write_atomic,
    ExperimentConfig, ExperimentError, Lab,
};

/// Stability lab for periodic Lugiato-Lefever waves under subharmonic perturbations.
///
/// Numeric results go to CSV/JSON files under the output directory; a JSON
/// summary is printed on stdout and logs go to stderr.
/// Exit codes: 0 success, 2 certification failed, 3 numerical divergence, 4 config error.
#[derive(Parser)]
#[command(name = "lle-lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--param perturbation.amplitude=2e-3`.
    #[arg(long = "param", value_name = "KEY=VALUE", global = true)]
    params: Vec<String>,
    /// Shorthand for `--param output_dir=...`.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a periodic wave and write wave.json.
    FindWave,
    /// Certify spectral stability of the wave (exit code 2 if it fails).
    Certify,
    /// Linear decay study over N_list.
    LinearDecay,
    /// Nonlinear decay study with modulation and damping reports.
    NonlinearDecay,
    /// Long-horizon runs locating the algebraic-to-exponential crossover.
    Crossover,
    /// Damping certificate, repeated with halved dt.
    DampingReport,
    /// Fit decay exponents to every column of a CSV table with a `t` column.
    Fit {
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        t_min: f64,
        #[arg(long)]
        t_max: f64,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let base = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::standard("lab-output"),
    };
    let mut overrides = common.params.clone();
    if let Some(d) = &common.output_dir {
        overrides.push(format!("output_dir={:?}", d.display().to_string()));
    }
    base.with_overrides(&overrides)
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    if let Command::Fit { input, t_min, t_max } = &cli.command {
        let text = std::fs::read_to_string(input).map_err(|e| ExperimentError::Config(format!("{}: {e}", input.display())))?;
        let fits = fit_table(&text, (*t_min, *t_max))?;
        let out: serde_json::Map<String, serde_json::Value> = fits
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    Ok(f) => serde_json::to_value(f).expect("serializes"),
                    Err(e) => serde_json::json!({ "error": e }),
                };
                (k, v)
            })
            .collect();
        print(&out);
        return Ok(());
    }
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::FindWave => {
            std::fs::create_dir_all(&cfg.output_dir)?;
            let wave = find_wave(&cfg.params, &cfg.wave)?;
            let path = cfg.output_dir.join("wave.json");
            write_atomic(&path, wave.to_json().as_bytes())?;
            log::info!("wrote {}", path.display());
            print(&serde_json::json!({
                "wave": path,
                "first_harmonic": wave.first_harmonic(),
                "n_points": wave.field.grid().n_points(),
            }));
        }
        Command::Certify => {
            let lab = Lab::prepare(cfg)?;
            print(&serde_json::json!({
                "passed": lab.report.passed(),
                "theta": lab.report.theta,
                "delta_by_n": lab.report.delta_by_n,
            }));
        }
        Command::LinearDecay => print(&run_linear_decay(&Lab::prepare(cfg)?)?),
        Command::NonlinearDecay => print(&run_nonlinear_decay(&Lab::prepare(cfg)?)?),
        Command::Crossover => print(&run_crossover(&Lab::prepare(cfg)?)?),
        Command::DampingReport => print(&run_damping_report(&Lab::prepare(cfg)?)?),
        Command::Fit { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
