use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use signal_lab::bundled;
use signal_lab::controller::Variant;
use signal_lab::metrics::{compare_table, MetricsReport, TraceSeries};
use signal_lab::network::{validate_network, NetworkFile, TrafficNetwork};
use signal_lab::scenario::{Scenario, Seeds, DEFAULT_R_WEIGHT};
use signal_lab::simulator::{run, RunConfig, RunError};
use signal_lab::synthesis::{synthesize, GainSet, GainsFile, Tolerances};

const OUT_ENV: &str = "SIGNAL_LAB_OUT";

#[derive(Parser)]
#[command(name = "signal-lab", version, about = "Store-and-forward signal control laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize feedback and feedforward gains for a network.
    Gains {
        #[arg(long)]
        network: PathBuf,
        /// Input weight r in R = r I.
        #[arg(long, default_value_t = DEFAULT_R_WEIGHT, allow_negative_numbers = true)]
        r_weight: f64,
        #[arg(long, env = OUT_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Run a closed-loop simulation and write trace, greens and metrics.
    Simulate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the controller variant of the scenario.
        #[arg(long)]
        controller: Option<Variant>,
        #[arg(long, env = OUT_ENV, default_value = "out")]
        out: PathBuf,
        /// Overrides both seeds: demand uses SEED and the sensors SEED + 1.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the horizon (s).
        #[arg(long, allow_negative_numbers = true)]
        horizon: Option<f64>,
    },
    /// Compute metrics from a trace CSV.
    Metrics {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, env = OUT_ENV, default_value = "out")]
        out: PathBuf,
    },
    /// Tabulate two or more metrics reports.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = TableFormat::Text)]
        format: TableFormat,
    },
    /// Write a bundled example network and scenario.
    MakeExample {
        #[arg(value_enum)]
        kind: ExampleKind,
        #[arg(long, env = OUT_ENV, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleKind {
    Chain2,
    Grid4,
}

/// Failure classes mapped to exit codes.
enum Failure {
    /// Bad input: unreadable or invalid files, out-of-range options.
    Config(anyhow::Error),
    /// The model itself failed: synthesis, simulation invariants.
    Model(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Model(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Model(e) => e,
        }
    }
}

trait Classify<T> {
    fn config(self) -> Result<T, Failure>;
    fn model(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn model(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Model(e.into()))
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    network: Option<String>,
    scenario: Option<String>,
    controller: Option<Variant>,
    out: String,
    seeds: Option<Seeds>,
    r_weight: Option<f64>,
    tolerances: Tolerances,
    resolved_scenario: Option<&'a Scenario>,
}

impl<'a> RunManifest<'a> {
    fn new(command: &'static str, out: &Path) -> Self {
        Self {
            tool: "signal-lab",
            version: env!("CARGO_PKG_VERSION"),
            command,
            network: None,
            scenario: None,
            controller: None,
            out: out.display().to_string(),
            seeds: None,
            r_weight: None,
            tolerances: Tolerances::default(),
            resolved_scenario: None,
        }
    }
}

/// Writes through a temporary file in the same directory and renames it.
fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().ok_or_else(|| anyhow!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    text
}

fn load_network(path: &Path) -> Result<TrafficNetwork, Failure> {
    let raw = NetworkFile::load(path).config()?;
    validate_network(&raw)
        .with_context(|| format!("invalid network {}", path.display()))
        .config()
}

fn cmd_gains(network: &Path, r_weight: f64, out: &Path) -> Result<(), Failure> {
    if !(r_weight > 0.0 && r_weight.is_finite()) {
        return Err(Failure::Config(anyhow!("--r-weight must be positive, got {r_weight}")));
    }
    let net = load_network(network)?;
    let gains = synthesize(&net, r_weight).context("gain synthesis failed").model()?;
    let report = &gains.report;
    eprintln!(
        "rank {} of {} stages, decomposition residual {:.3e}, DARE residual {:.3e} after {} iterations, closed-loop spectral radius {:.6}",
        report.rank,
        net.stages(),
        report.decomposition_residual,
        report.dare_residual,
        report.dare_iterations,
        report.closed_loop_radius
    );
    write_atomic(&out.join("gains.json"), &to_json(&GainsFile::from_gains(&gains, r_weight))).config()?;
    let mut manifest = RunManifest::new("gains", out);
    manifest.network = Some(network.display().to_string());
    manifest.r_weight = Some(r_weight);
    write_atomic(&out.join("manifest.json"), &to_json(&manifest)).config()?;
    emit(&format!("{}\n", out.join("gains.json").display()));
    Ok(())
}

fn classify_run(err: RunError) -> Failure {
    match err {
        RunError::Sim(_) | RunError::Estimator(_) => Failure::Model(err.into()),
        _ => Failure::Config(err.into()),
    }
}

struct SimulateArgs<'a> {
    network: &'a Path,
    scenario: &'a Path,
    controller: Option<Variant>,
    out: &'a Path,
    seed: Option<u64>,
    horizon: Option<f64>,
}

fn cmd_simulate(args: SimulateArgs<'_>) -> Result<(), Failure> {
    let net = load_network(args.network)?;
    let mut scenario = Scenario::load(args.scenario).config()?;
    if let Some(v) = args.controller {
        scenario.controller.variant = v;
    }
    if let Some(seed) = args.seed {
        scenario.seeds = Seeds {
            demand: seed,
            sensor: seed.wrapping_add(1),
        };
    }
    if let Some(h) = args.horizon {
        scenario.horizon_s = h;
    }
    scenario.validate().config()?;
    let cfg = RunConfig::from_scenario(&scenario, &net).map_err(classify_run)?;
    let demand = scenario.demand_profile().config()?;
    let gains: GainSet = synthesize(&net, scenario.controller.r_weight)
        .context("gain synthesis failed")
        .model()?;
    let trace = run(&net, &gains, &demand, &cfg).map_err(classify_run)?;
    let report = MetricsReport::from_trace(&trace, net.x_max()).model()?;

    let out = args.out;
    write_atomic(&out.join("trace.csv"), &trace.to_csv()).config()?;
    write_atomic(&out.join("greens.csv"), &trace.greens_csv()).config()?;
    write_atomic(&out.join("metrics.json"), &report.to_json()).config()?;
    let mut manifest = RunManifest::new("simulate", out);
    manifest.network = Some(args.network.display().to_string());
    manifest.scenario = Some(args.scenario.display().to_string());
    manifest.controller = Some(scenario.controller.variant);
    manifest.seeds = Some(scenario.seeds);
    manifest.r_weight = Some(scenario.controller.r_weight);
    manifest.resolved_scenario = Some(&scenario);
    write_atomic(&out.join("manifest.json"), &to_json(&manifest)).config()?;
    emit(&format!(
        "{}: TTS {:.3} veh·h, RQB {:.1} veh, TTB {:.3} veh·h\n",
        scenario.controller.variant.label(),
        report.tts,
        report.rqb,
        report.ttb
    ));
    Ok(())
}

fn cmd_metrics(network: &Path, trace: &Path, out: &Path) -> Result<(), Failure> {
    let net = load_network(network)?;
    let text = fs::read_to_string(trace)
        .with_context(|| format!("reading {}", trace.display()))
        .config()?;
    let series = TraceSeries::from_csv(&text).config()?;
    let report = MetricsReport::from_series(&series, net.x_max(), None).config()?;
    let json = report.to_json();
    write_atomic(&out.join("metrics.json"), &json).config()?;
    let mut manifest = RunManifest::new("metrics", out);
    manifest.network = Some(network.display().to_string());
    write_atomic(&out.join("manifest.json"), &to_json(&manifest)).config()?;
    emit(&json);
    Ok(())
}

fn cmd_compare(paths: &[PathBuf], format: TableFormat) -> Result<(), Failure> {
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .config()?;
        let report: MetricsReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .config()?;
        let name = report
            .controller
            .clone()
            .unwrap_or_else(|| path.display().to_string());
        reports.push((name, report));
    }
    let table = compare_table(&reports).config()?;
    match format {
        TableFormat::Text => emit(&table),
        TableFormat::Csv => {
            let mut csv = String::from("method,tts_veh_h,rqb_veh,ttb_veh_h\n");
            for (name, r) in &reports {
                csv.push_str(&format!("{},{},{},{}\n", name, r.tts, r.rqb, r.ttb));
            }
            emit(&csv);
        }
    }
    Ok(())
}

fn cmd_make_example(kind: ExampleKind, out: &Path) -> Result<(), Failure> {
    let mut files = Vec::new();
    match kind {
        ExampleKind::Chain2 => {
            files.push(("network.json", bundled::chain2().to_json()));
            files.push(("scenario.json", bundled::chain2_scenario().to_json()));
        }
        ExampleKind::Grid4 => {
            files.push(("network.json", bundled::grid4().to_json()));
            files.push(("scenario.json", bundled::grid4_pulse_scenario().to_json()));
            files.push(("scenario_historic.json", bundled::grid4_historic_scenario().to_json()));
        }
    }
    for (name, text) in files {
        let path = out.join(name);
        write_atomic(&path, &text).config()?;
        emit(&format!("{}\n", path.display()));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gains { network, r_weight, out } => cmd_gains(&network, r_weight, &out),
        Command::Simulate {
            network,
            scenario,
            controller,
            out,
            seed,
            horizon,
        } => cmd_simulate(SimulateArgs {
            network: &network,
            scenario: &scenario,
            controller,
            out: &out,
            seed,
            horizon,
        }),
        Command::Metrics { network, trace, out } => cmd_metrics(&network, &trace, &out),
        Command::Compare { reports, format } => cmd_compare(&reports, format),
        Command::MakeExample { kind, out } => cmd_make_example(kind, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
