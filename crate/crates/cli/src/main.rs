use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bubblelink::comm::{ber_csv, ber_sweep, default_bin_width, estimate_cir, PassFilter};
use bubblelink::config::load_config_with_overrides;
use bubblelink::fluid::channel_reynolds;
use bubblelink::io::Provenance;
use bubblelink::studies::{
    circulation_analysis, compare_series_detailed, load_measured, run_comparison_detailed, simulated_series,
    CompareOptions,
};
use bubblelink::{run_with, Error, Result, RunOptions, Scenario, SimulationResult};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

/// Environment variable holding the worker thread count.
const WORKERS_ENV: &str = "BUBBLELINK_WORKERS";

#[derive(Parser)]
#[command(name = "bubblelink", version, about = "Microbubble transport and link simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write events, CIR and a summary.
    Run(Common),
    /// Run the water/blood-like × high/physiological velocity grid.
    Cases(Common),
    /// Bit error rate against symbol duration.
    BerSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated symbol durations in seconds.
        #[arg(long, value_delimiter = ',')]
        tsym_list: Option<Vec<f64>>,
    },
    /// Compare the simulated arrival curve with a measured series.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Measured `t,intensity` CSV; defaults to studies.measured_path.
        #[arg(long)]
        measured: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override a configuration value, e.g. `flow.mean_velocity=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<Scenario> {
        load_config_with_overrides(&self.config, &self.overrides)
    }

    fn prepare_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

fn run_options() -> Result<RunOptions> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(RunOptions::default()),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(RunOptions { workers: Some(n) }),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got \"{v}\""))),
        },
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write(path, &text)
}

fn metadata(p: &Provenance) -> Value {
    serde_json::to_value(p).expect("provenance serializes")
}

fn summary_json(result: &SimulationResult, prov: &Provenance, cir_bin_width: Option<f64>) -> Value {
    let sc = &result.scenario;
    let mut first = result.first_pass_times();
    first.sort_by(f64::total_cmp);
    let re = channel_reynolds(&sc.medium, &sc.geometry, &sc.flow);
    let max_pass = result.arrivals.iter().map(|a| a.pass_index).max().unwrap_or(0);
    let per_pass: Vec<Value> = (1..=max_pass)
        .map(|p| json!({"pass_index": p, "arrivals": result.arrivals.iter().filter(|a| a.pass_index == p).count()}))
        .collect();
    json!({
        "metadata": metadata(prov),
        "dt": result.dt,
        "duration": result.duration(),
        "injected": result.injected_count,
        "in_flight": result.in_flight_count,
        "absorbed": result.absorbed_count,
        "expired": result.expired_count,
        "arrivals": result.arrivals.len(),
        "arrivals_per_pass": per_pass,
        "first_pass_earliest": first.first(),
        "first_pass_latest": first.last(),
        "loop_period": sc.loop_period(),
        "channel_reynolds": re.value,
        "laminar_assumption_violated": re.laminar_violated,
        "cir_bin_width": cir_bin_width,
        "scenario": sc,
    })
}

/// Writes events, CIR (impulse schedules only), summary and trajectory files.
fn write_run_outputs(dir: &Path, result: &SimulationResult, prov: &Provenance) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(&dir.join("events.csv"), &result.events_csv(Some(prov)))?;
    let bin_width = if result.scenario.injection.is_impulse() {
        let bw = default_bin_width(result);
        let cir = estimate_cir(result, bw, &PassFilter::All)?;
        write(&dir.join("cir.csv"), &cir.to_csv(Some(prov)))?;
        Some(bw)
    } else {
        None
    };
    if result.scenario.simulation.trajectory_stride > 0 {
        write(&dir.join("trajectory.csv"), &result.trajectory_csv(Some(prov)))?;
    }
    write_json(&dir.join("summary.json"), &summary_json(result, prov, bin_width))
}

fn cmd_run(common: &Common) -> Result<()> {
    let sc = common.load()?;
    common.prepare_out()?;
    let prov = Provenance::new(&sc, common.seed);
    let result = run_with(&sc, common.seed, &run_options()?)?;
    write_run_outputs(&common.out, &result, &prov)
}

fn cmd_cases(common: &Common) -> Result<()> {
    let sc = common.load()?;
    common.prepare_out()?;
    let prov = Provenance::new(&sc, common.seed);
    let (report, results) = run_comparison_detailed(&sc, common.seed, &run_options()?)?;
    for (case, result) in &results {
        let case_prov = Provenance::new(&result.scenario, common.seed);
        write_run_outputs(&common.out.join(case.label()), result, &case_prov)?;
    }
    let circulation = circulation_analysis(&report, sc.studies.reference_period);
    write_json(
        &common.out.join("comparison_report.json"),
        &json!({
            "metadata": metadata(&prov),
            "reference_period": sc.studies.reference_period,
            "cases": report.cases,
            "circulation": circulation,
        }),
    )
}

fn cmd_ber_sweep(common: &Common, tsym_list: Option<&[f64]>) -> Result<()> {
    let mut sc = common.load()?;
    if let Some(list) = tsym_list {
        sc.comm.tsym_list = list.to_vec();
        sc.validate()?;
    }
    common.prepare_out()?;
    let prov = Provenance::new(&sc, common.seed);
    let points = ber_sweep(&sc, &sc.comm.tsym_list, common.seed, &run_options()?)?;
    write(&common.out.join("ber_sweep.csv"), &ber_csv(&points, Some(&prov)))?;
    write_json(
        &common.out.join("ber_sweep.json"),
        &json!({"metadata": metadata(&prov), "points": points}),
    )
}

fn cmd_validate(common: &Common, measured: Option<&Path>) -> Result<()> {
    let sc = common.load()?;
    let path = measured
        .map(Path::to_path_buf)
        .or_else(|| sc.studies.measured_path.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no measured series: pass --measured or set studies.measured_path".into()))?;
    let series = load_measured(&path)?;
    common.prepare_out()?;
    let prov = Provenance::new(&sc, common.seed);
    let result = run_with(&sc, common.seed, &run_options()?)?;
    let bin_width = default_bin_width(&result);
    let simulated = simulated_series(&result, bin_width)?;
    let (metrics, resampled) = compare_series_detailed(&series, &simulated, &CompareOptions::from(&sc.studies))?;
    write(&common.out.join("simulated_series.csv"), &simulated.to_csv())?;
    write(&common.out.join("validation_series.csv"), &resampled.to_csv(Some(&prov)))?;
    write_json(
        &common.out.join("validation.json"),
        &json!({
            "metadata": metadata(&prov),
            "measured": path.display().to_string(),
            "bin_width": bin_width,
            "metrics": metrics,
        }),
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Cases(c) => cmd_cases(c),
        Command::BerSweep { common, tsym_list } => cmd_ber_sweep(common, tsym_list.as_deref()),
        Command::Validate { common, measured } => cmd_validate(common, measured.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
