use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpvio::config::ScenarioConfig;
use gpvio::graph::Backend;
use gpvio::io::{read_tum, write_tum};
use gpvio::pipeline::{self, Dataset, GROUND_TRUTH_FILE};
use gpvio::Error;

#[derive(Parser)]
#[command(name = "gpvio", version, about = "Simulate, run and evaluate the CT-IMU and GP-IMU back-ends")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Scenario {
    /// Scenario TOML; defaults apply to every key it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Trajectory duration (s).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write IMU, track and ground-truth files for a scenario.
    Simulate {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one back-end; writes `<backend>.tum`, a timing CSV and stage totals.
    Run {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, short)]
        backend: Option<String>,
        /// Dataset directory from `simulate`; simulated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// RMS RTE of an estimate against a reference, both TUM files.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Supplies the alignment horizon and segment lengths.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Report path; printed to stdout if absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Both back-ends on the same dataset.
    Compare {
        #[command(flatten)]
        scenario: Scenario,
        #[arg(long, short)]
        out: PathBuf,
    },
}

fn load(s: &Scenario) -> Result<ScenarioConfig, Error> {
    let mut cfg = match &s.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = s.seed {
        cfg.seed = seed;
    }
    if let Some(d) = s.duration {
        cfg.trajectory.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_backend(s: &str) -> Result<Backend, Error> {
    match s {
        "ct_imu" | "ct-imu" | "CT_IMU" => Ok(Backend::CtImu),
        "gp_imu" | "gp-imu" | "GP_IMU" => Ok(Backend::GpImu),
        _ => Err(gpvio::config::ConfigError::Invalid(format!("unknown backend {s:?}; expected ct_imu or gp_imu")).into()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).expect("plain data");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn execute(cmd: &Command) -> Result<(), Error> {
    match cmd {
        Command::Simulate { scenario, out } => {
            let cfg = load(scenario)?;
            let data = pipeline::simulate(&cfg)?;
            data.write(out)?;
            std::fs::write(out.join("scenario.toml"), cfg.to_toml_string())?;
            log::info!("{} IMU samples, {} observations written to {}", data.imu.len(), data.tracks.len(), out.display());
        }
        Command::Run { scenario, backend, data, out } => {
            let cfg = load(scenario)?;
            let backend = match backend {
                Some(b) => parse_backend(b)?,
                None => cfg.window.backend,
            };
            let data = match data {
                Some(dir) => Dataset::read(dir)?,
                None => pipeline::simulate(&cfg)?,
            };
            let result = pipeline::run(&cfg, &data, backend)?;
            result.write(out, backend)?;
            write_tum(&out.join(GROUND_TRUTH_FILE), &data.ground_truth)?;
            let metrics = pipeline::evaluate(&cfg, &result.trajectory, &data.ground_truth)?;
            write_json(&out.join(format!("{backend}_metrics.json")), &metrics)?;
            write_json(&out.join(format!("{backend}_summary.json")), &result.summary)?;
            if result.summary.stalled_steps > 0 {
                log::warn!("{} of {} steps stalled", result.summary.stalled_steps, result.summary.steps);
            }
        }
        Command::Evaluate { est, gt, config, out } => {
            let cfg = match config {
                Some(p) => ScenarioConfig::load(p)?,
                None => ScenarioConfig::default(),
            };
            let report = pipeline::evaluate(&cfg, &read_tum(est)?, &read_tum(gt)?)?;
            match out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report).expect("plain data")),
            }
        }
        Command::Compare { scenario, out } => {
            let cfg = load(scenario)?;
            let data = pipeline::simulate(&cfg)?;
            let cmp = pipeline::compare(&cfg, &data)?;
            std::fs::create_dir_all(out)?;
            for (backend, run) in &cmp.runs {
                run.write(out, *backend)?;
            }
            write_tum(&out.join(GROUND_TRUTH_FILE), &data.ground_truth)?;
            write_json(&out.join("compare.json"), &cmp.report)?;
            let stages: Vec<_> = cmp.runs.iter().map(|(b, r)| (b.to_string(), r.stages)).collect();
            write_json(&out.join("compare_timing.json"), &stages)?;
            print!("{}", cmp.report.table());
        }
    }
    Ok(())
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Simulate { out, .. } | Command::Run { out, .. } | Command::Compare { out, .. } => Some(out),
        Command::Evaluate { .. } => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(dir) = out_dir(&cli.command) {
                let report = serde_json::json!({ "status": "failed", "error": e.to_string() });
                if std::fs::create_dir_all(dir).is_ok() {
                    let _ = std::fs::write(dir.join("failure.json"), report.to_string() + "\n");
                }
            }
            ExitCode::from(2)
        }
    }
}
