use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use robust_sis::allocate::{certify, evaluate_allocation, worst_case_rho, Certification};
use robust_sis::epidemic::observe;
use robust_sis::experiments::{compare_allocations, sweep_sensors, sweep_t, ExperimentError, RunConfig, Scenario};

const CERTIFY_SAMPLES: usize = 200;
const CERTIFY_STEPS: usize = 50;

#[derive(Debug, Parser)]
#[command(name = "robust-sis", version, about = "Robust vaccine allocation for SIS epidemics on directed networks")]
struct Cli {
    /// Run configuration (JSON). Defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Robust,
    Optimal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the network, the full trajectory and the sensor readings.
    Simulate,
    /// Builds the uncertainty model from the configured sensors.
    Constraints {
        /// Observation horizon; defaults to t_max.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Solves one allocation.
    Allocate {
        #[arg(long, value_enum, default_value_t = Mode::Robust)]
        mode: Mode,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Worst-case spectral radius of an allocation over the uncertainty model.
    WorstCase {
        /// Allocation JSON with a `dc` array; defaults to the natural rates.
        #[arg(long)]
        dc: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Certified rate against the observation horizon.
    SweepT,
    /// Certified rate against the number of sensors.
    SweepSensors,
    /// Robust allocations against the known-network optimum.
    Compare,
}

#[derive(Deserialize)]
struct DcFile {
    dc: Vec<f64>,
}

#[derive(Serialize)]
struct WorstCaseReport {
    dc: Vec<f64>,
    rho_wor: f64,
    rho_true: f64,
    certification: Certification,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_trajectory(path: &Path, scenario: &Scenario) -> Result<(), ExperimentError> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    let n = scenario.config.n;
    let header: Vec<String> = (1..=n).map(|i| format!("p_{i}")).collect();
    writeln!(w, "t,{}", header.join(","))?;
    for (t, p) in scenario.trajectory.states.iter().enumerate() {
        let vals: Vec<String> = p.as_slice().iter().map(|v| v.to_string()).collect();
        writeln!(w, "{t},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn horizon_of(scenario: &Scenario, horizon: Option<usize>) -> Result<usize, ExperimentError> {
    let t = horizon.unwrap_or(scenario.config.t_max);
    if t > scenario.config.t_max {
        return Err(ExperimentError::Config(format!(
            "horizon {t} exceeds t_max = {}",
            scenario.config.t_max
        )));
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = cli.out_dir {
        config.out_dir = dir;
    }
    let scenario = Scenario::build(&config)?;
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;

    match cli.command {
        Command::Simulate => {
            scenario.network.write_csv(File::create(out.join("network.csv"))?)?;
            write_trajectory(&out.join("trajectory.csv"), &scenario)?;
            let sensors = scenario.sensors();
            if sensors.is_empty() {
                log::warn!("no sensors configured, skipping observations.csv");
            } else {
                observe(&scenario.trajectory, &sensors)?.write_csv(File::create(out.join("observations.csv"))?)?;
            }
        }
        Command::Constraints { horizon } => {
            let model = scenario.model(&scenario.sensors(), horizon_of(&scenario, horizon)?)?;
            let path = out.join("model.json");
            fs::write(&path, model.to_json()? + "\n")?;
            log::info!("wrote {}", path.display());
        }
        Command::Allocate { mode, horizon } => {
            let (result, name) = match mode {
                Mode::Robust => {
                    let model = scenario.model(&scenario.sensors(), horizon_of(&scenario, horizon)?)?;
                    (scenario.robust(&model)?, "allocation_robust.json")
                }
                Mode::Optimal => (scenario.optimal()?, "allocation_optimal.json"),
            };
            println!("lambda* = {:.9} ({})", result.lambda_star, result.status);
            write_json(&out.join(name), &result)?;
        }
        Command::WorstCase { dc, horizon } => {
            let dc = match dc {
                Some(path) => {
                    let parsed: DcFile = serde_json::from_str(&fs::read_to_string(path)?)?;
                    parsed.dc
                }
                None => scenario.cost.upper.clone(),
            };
            if dc.len() != config.n {
                return Err(ExperimentError::Config(format!(
                    "allocation has {} entries, expected {}",
                    dc.len(),
                    config.n
                )));
            }
            let model = scenario.model(&scenario.sensors(), horizon_of(&scenario, horizon)?)?;
            let rho_wor = worst_case_rho(&model, &dc, &config.solver)?;
            let rho_true = evaluate_allocation(&scenario.network.rate_matrix(), &dc)?;
            let certification = certify(&model, &dc, rho_wor, 1e-6, CERTIFY_SAMPLES, CERTIFY_STEPS, config.seed)?;
            println!("worst case rho = {rho_wor:.9}, true rho = {rho_true:.9}");
            if certification.violations > 0 {
                log::warn!(
                    "{} of {} sampled matrices exceed the worst case",
                    certification.violations,
                    certification.samples
                );
            }
            write_json(
                &out.join("worst_case.json"),
                &WorstCaseReport {
                    dc,
                    rho_wor,
                    rho_true,
                    certification,
                },
            )?;
        }
        Command::SweepT => {
            let result = sweep_t(&scenario, cli.jobs)?;
            result.save(&out.join("sweep_t.csv"))?;
        }
        Command::SweepSensors => {
            let result = sweep_sensors(&scenario, cli.jobs)?;
            if let Some(k) = result.first_below_one() {
                println!("certified rate below 1 from {k} sensors");
            }
            result.save(&out.join("sweep_sensors.csv"))?;
        }
        Command::Compare => {
            let result = compare_allocations(&scenario, cli.jobs)?;
            if let Some(last) = result.rows.last() {
                println!(
                    "gap at T = {}: {:.6e}",
                    last.param,
                    last.rho_eval_rob - last.rho_eval_opt
                );
            }
            result.save(&out.join("compare.csv"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap reports usage errors with code 2, which is reserved for infeasibility
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_infeasible() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
