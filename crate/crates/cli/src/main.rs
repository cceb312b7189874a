use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use stmux::config::{load_config, parse_config, parse_override};
use stmux::experiment::{
    calibrate, csv_string, outcome_row, read_csv, report, sweep, write_csv, CalibrationSetup, CsvRow, Evaluator,
    ReportKind, SweepSpec, TargetsFile, CSV_HEADER, FREE_PARAMS, MICROBENCH_CONFIG, MODELS_CONFIG,
};
use stmux::workload::preset_for_layers;
use stmux::{presets, DeviceSpec, Error, PolicyKind};

#[derive(Parser)]
#[command(name = "stmux", version, about = "Simulate GPU sharing strategies for multi-tenant DNN inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and emit its CSV row.
    Run(RunArgs),
    /// Run a replica sweep and emit one CSV row per cell.
    Sweep(SweepArgs),
    /// Render a results CSV as a table.
    Report(ReportArgs),
    /// Fit free device parameters to metric targets.
    Calibrate(CalibrateArgs),
    /// List workload presets.
    Presets,
}

#[derive(Args)]
struct Overrides {
    /// Override a config value by dotted path, e.g. `sim.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Simulation seed (same as `--set sim.seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn parse(&self) -> Result<Vec<(String, Value)>, Error> {
        let mut out = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
        if let Some(seed) = self.seed {
            out.push(("sim.seed".into(), Value::from(seed)));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Config file (JSON).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Append the row to this CSV (header written when the file is new).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Write the event log as NDJSON.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base config; the shipped microbenchmark config when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Sweep description (JSON). Flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Workload preset.
    #[arg(long)]
    preset: Option<String>,
    /// Replica counts, e.g. `2..120` or `2,4,8`.
    #[arg(long)]
    replicas: Option<String>,
    /// Comma-separated policies.
    #[arg(long)]
    policies: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Space-time target batch.
    #[arg(long)]
    target_batch: Option<u32>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Results CSV.
    #[arg(long)]
    csv: PathBuf,
    /// One of table1, fig3, fig4, fig6.
    #[arg(long, short)]
    report: String,
    /// Also write the report as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Targets file; the shipped targets when omitted.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Comma-separated free parameters.
    #[arg(long, default_value = "space_sched_penalty,launch_serialization,context_switch_overhead")]
    params: String,
    /// Maximum metric evaluations.
    #[arg(long, default_value_t = 80)]
    budget: u32,
    /// Starting profile: a built-in name or a JSON file.
    #[arg(long, default_value = "v100")]
    device: String,
    /// Base config for microbenchmark sweeps.
    #[arg(long)]
    micro_config: Option<PathBuf>,
    /// Base config for whole-model sweeps.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Write the fitted profile here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// CLI failure: exit code plus a one-line reason.
struct Failure {
    code: u8,
    line: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match e.class() {
            "oom" => 2,
            "config" | "input" | "io" => 1,
            _ => 3,
        };
        Failure {
            code,
            line: format!("{}-error: {}", e.class(), single_line(&e.to_string())),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Failure {
        Error::Io(e).into()
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| Error::config(what, format!("cannot parse `{p}`"))))
        .collect()
}

fn parse_replicas(s: &str) -> Result<Vec<u32>, Error> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once("..") {
            let a: u32 = a.parse().map_err(|_| Error::config("replicas", format!("bad range `{part}`")))?;
            let b: u32 = b
                .trim_start_matches('=')
                .parse()
                .map_err(|_| Error::config("replicas", format!("bad range `{part}`")))?;
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| Error::config("replicas", format!("bad value `{part}`")))?);
        }
    }
    Ok(out)
}

fn append_rows(path: &Path, rows: &[CsvRow]) -> Result<(), Failure> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let text = csv_string(rows);
    let body = if fresh { text.as_str() } else { text.split_once('\n').map_or("", |(_, b)| b) };
    if !fresh {
        let existing = fs::read_to_string(path)?;
        if existing.lines().next() != Some(CSV_HEADER.join(",").as_str()) {
            return Err(Error::Csv(format!("{} has a different header", path.display())).into());
        }
    }
    OpenOptions::new().create(true).append(true).open(path)?.write_all(body.as_bytes())?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, &args.overrides.parse()?)?;
    let trace = stmux::run(&config)?;
    if let Some(path) = &args.trace_out {
        trace.save_ndjson(path)?;
    }
    let workload = preset_for_layers(&config.tenants[0].layers).unwrap_or("custom");
    let replicas = match config.policy {
        PolicyKind::Exclusive => config.policy_params.batch_size as u32,
        _ => config.tenants.len() as u32,
    };
    let metrics = stmux::aggregate(&trace, &config)?;
    let row = outcome_row(workload, replicas, &config, Ok(metrics));
    match &args.out {
        Some(path) => append_rows(path, &[row])?,
        None => print!("{}", csv_string(&[row])),
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Failure> {
    let overrides = args.overrides.parse()?;
    let base = match &args.config {
        Some(p) => load_config(p, &overrides)?,
        None => parse_config(MICROBENCH_CONFIG, &overrides, None)?,
    };
    let mut spec = match &args.spec {
        Some(p) => {
            serde_json::from_str::<SweepSpec>(&fs::read_to_string(p)?)
                .map_err(|e| Error::config("sweep", e.to_string()))?
        }
        None => SweepSpec {
            r_values: Vec::new(),
            policies: PolicyKind::ALL.to_vec(),
            workload_preset: String::new(),
            seeds: vec![base.seed],
            target_batch: None,
        },
    };
    if let Some(p) = args.preset {
        spec.workload_preset = p;
    }
    if let Some(r) = &args.replicas {
        spec.r_values = parse_replicas(r)?;
    }
    if let Some(p) = &args.policies {
        spec.policies = parse_list("policies", p)?;
    }
    if let Some(s) = &args.seeds {
        spec.seeds = parse_list("seeds", s)?;
    }
    if args.target_batch.is_some() {
        spec.target_batch = args.target_batch;
    }
    let rows = sweep(&base, &spec)?;
    match &args.out {
        Some(path) => write_csv(&rows, io::BufWriter::new(fs::File::create(path)?))?,
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), Failure> {
    let kind: ReportKind = args.report.parse()?;
    let rows = read_csv(fs::File::open(&args.csv)?)?;
    let reports = report(&rows, kind)?;
    let mut out = io::stdout().lock();
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        write!(out, "{}", r.render_text())?;
    }
    if let Some(path) = &args.csv_out {
        let text: Vec<String> = reports.iter().map(|r| r.to_csv()).collect();
        fs::write(path, text.join("\n"))?;
    }
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let targets = match &args.targets {
        Some(p) => TargetsFile::parse(&fs::read_to_string(p)?)?,
        None => TargetsFile::parse(stmux::experiment::TARGETS)?,
    };
    let start = match DeviceSpec::builtin(&args.device) {
        Some(d) => d,
        None => DeviceSpec::load(Path::new(&args.device))?,
    };
    let free: Vec<String> = args.params.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let micro = match &args.micro_config {
        Some(p) => load_config(p, &[])?,
        None => parse_config(MICROBENCH_CONFIG, &[], None)?,
    };
    let model = match &args.model_config {
        Some(p) => load_config(p, &[])?,
        None => parse_config(MODELS_CONFIG, &[], None)?,
    };
    let mut evaluator = Evaluator::new(CalibrationSetup::new(micro, model));
    let result = calibrate(&start, &targets.targets, &free, args.budget, &mut evaluator)?;

    let profile = result.device.to_json_pretty() + "\n";
    match &args.out {
        Some(p) => fs::write(p, &profile)?,
        None => print!("{profile}"),
    }
    let mut err = io::stderr().lock();
    writeln!(err, "evaluations: {}", result.evaluations)?;
    for (name, _, _) in FREE_PARAMS {
        let v = match name {
            "space_sched_penalty" => result.device.space_sched_penalty,
            "launch_serialization" => result.device.launch_serialization,
            _ => result.device.context_switch_overhead,
        };
        writeln!(err, "{name} = {v}")?;
    }
    for a in &result.achieved {
        let mark = if a.relative_error <= a.tolerance { "ok" } else { "MISS" };
        writeln!(
            err,
            "{:<40} target {:>7.3}  got {:>7.3}  err {:>6.1}% (tol {:.0}%)  {mark}",
            a.metric,
            a.target,
            a.value,
            100.0 * a.relative_error,
            100.0 * a.tolerance
        )?;
    }
    if !result.within_tolerance {
        return Err(Failure {
            code: 4,
            line: "calibration-error: no parameter set within tolerance; best profile emitted".into(),
        });
    }
    Ok(())
}

fn cmd_presets() -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    for p in presets() {
        let shape = if p.layers.len() == 1 {
            p.layers[0].to_string()
        } else {
            format!("{} layers", p.layers.len())
        };
        writeln!(
            out,
            "{:<18} {:<16} weights {:>11} B  slo {:>5.1} ms  {}",
            p.name,
            shape,
            p.weights_bytes,
            p.slo_latency * 1e3,
            p.description
        )?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Presets => cmd_presets(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line);
            ExitCode::from(f.code)
        }
    }
}
