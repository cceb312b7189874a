//! Replica sweeps, the results CSV, plain-text reports and profile calibration.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cost::{thread_blocks, DeviceSpec};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, slowdown_vs_exclusive, speedup_table, speedup_table_vs, RunKey, RunMetrics};
use crate::policy::PolicyKind;
use crate::sim::{run, SimConfig, SimMode};
use crate::workload::{preset, PresetKind, WorkloadPreset};

pub const SCHEMA_VERSION: u32 = 1;

/// Base config for microbenchmark sweeps.
pub const MICROBENCH_CONFIG: &str = include_str!("../configs/microbench.json");
/// Base config for whole-model sweeps.
pub const MODELS_CONFIG: &str = include_str!("../configs/models.json");
/// Calibration targets for the shipped profile.
pub const TARGETS: &str = include_str!("../configs/targets.json");

pub const CSV_HEADER: [&str; 17] = [
    "schema_version",
    "workload",
    "policy",
    "replicas",
    "batch",
    "seed",
    "status",
    "throughput_gflops",
    "utilization",
    "mean_ms",
    "p50_ms",
    "p99_ms",
    "fairness_gap",
    "slo_attainment",
    "launches",
    "peak_mem_bytes",
    "cancelled",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub r_values: Vec<u32>,
    pub policies: Vec<PolicyKind>,
    pub workload_preset: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Space-time target batch; by default one wave of the preset's kernel
    /// for microbenchmarks, and the base config's value for models.
    #[serde(default)]
    pub target_batch: Option<u32>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r_values.is_empty() || self.r_values.contains(&0) {
            return Err(Error::config("sweep.r_values", "need at least one value, each >= 1"));
        }
        if self.policies.is_empty() {
            return Err(Error::config("sweep.policies", "must be non-empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("sweep.seeds", "must be non-empty"));
        }
        preset(&self.workload_preset).map_err(|e| Error::config("sweep.workload_preset", e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Oom,
    Error,
}

/// One line of the results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub workload: String,
    pub policy: PolicyKind,
    pub replicas: u32,
    pub batch: u64,
    pub seed: u64,
    pub status: Status,
    pub metrics: Option<RunMetrics>,
    /// Bytes the run needed; reported for out-of-memory cells too.
    pub peak_mem_bytes: Option<u64>,
}

impl CsvRow {
    fn sort_key(&self) -> (String, &'static str, u32, u64) {
        (self.workload.clone(), self.policy.as_str(), self.replicas, self.seed)
    }

    fn fields(&self) -> Vec<String> {
        let mut out = vec![
            SCHEMA_VERSION.to_string(),
            self.workload.clone(),
            self.policy.to_string(),
            self.replicas.to_string(),
            self.batch.to_string(),
            self.seed.to_string(),
            match self.status {
                Status::Ok => "ok",
                Status::Oom => "oom",
                Status::Error => "error",
            }
            .to_string(),
        ];
        match &self.metrics {
            Some(m) => out.extend([
                format!("{:.3}", m.throughput_gflops),
                format!("{:.6}", m.utilization),
                format!("{:.6}", m.mean_latency * 1e3),
                format!("{:.6}", m.p50 * 1e3),
                format!("{:.6}", m.p99 * 1e3),
                format!("{:.6}", m.fairness_gap),
                format!("{:.6}", m.slo_attainment),
                m.launches.to_string(),
            ]),
            None => out.extend(std::iter::repeat_n(String::new(), 8)),
        }
        out.push(self.peak_mem_bytes.map(|b| b.to_string()).unwrap_or_default());
        out.push(self.metrics.as_ref().map(|m| m.cancelled.to_string()).unwrap_or_default());
        out
    }
}

#[derive(Deserialize)]
struct RawRow {
    schema_version: u32,
    workload: String,
    policy: String,
    replicas: u32,
    batch: u64,
    seed: u64,
    status: Status,
    throughput_gflops: Option<f64>,
    utilization: Option<f64>,
    mean_ms: Option<f64>,
    p50_ms: Option<f64>,
    p99_ms: Option<f64>,
    fairness_gap: Option<f64>,
    slo_attainment: Option<f64>,
    launches: Option<u64>,
    peak_mem_bytes: Option<u64>,
    cancelled: Option<u64>,
}

impl RawRow {
    fn into_row(self) -> Result<CsvRow> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Csv(format!("unsupported schema_version {}", self.schema_version)));
        }
        let policy: PolicyKind = self.policy.parse().map_err(|_| Error::Csv(format!("unknown policy `{}`", self.policy)))?;
        let metrics = match (self.status, self.throughput_gflops) {
            (Status::Ok, Some(tp)) => {
                let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::Csv(format!("ok row without {name}")));
                Some(RunMetrics {
                    throughput_gflops: tp,
                    utilization: need(self.utilization, "utilization")?,
                    mean_latency: need(self.mean_ms, "mean_ms")? * 1e-3,
                    p50: need(self.p50_ms, "p50_ms")? * 1e-3,
                    p99: need(self.p99_ms, "p99_ms")? * 1e-3,
                    fairness_gap: need(self.fairness_gap, "fairness_gap")?,
                    slo_attainment: need(self.slo_attainment, "slo_attainment")?,
                    peak_memory: self.peak_mem_bytes.unwrap_or(0),
                    launches: self.launches.unwrap_or(0),
                    cancelled: self.cancelled.unwrap_or(0),
                    completed: 0,
                    tenant_means: Vec::new(),
                })
            }
            (Status::Ok, None) => return Err(Error::Csv("ok row without throughput".into())),
            _ => None,
        };
        Ok(CsvRow {
            workload: self.workload,
            policy,
            replicas: self.replicas,
            batch: self.batch,
            seed: self.seed,
            status: self.status,
            metrics,
            peak_mem_bytes: self.peak_mem_bytes,
        })
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[CsvRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Csv("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<RawRow>().enumerate() {
        let raw = rec.map_err(|e| Error::Csv(format!("line {}: {e}", i + 2)))?;
        rows.push(raw.into_row().map_err(|e| Error::Csv(format!("line {}: {e}", i + 2)))?);
    }
    Ok(rows)
}

/// Space-time target batch that fills exactly one wave with `preset`'s kernel.
pub fn one_wave_batch(preset: &WorkloadPreset, device: &DeviceSpec) -> u32 {
    let blocks = thread_blocks(preset.layers[0], device);
    (device.slots() / blocks).max(1) as u32
}

/// Configuration of one sweep cell. Exclusive cells run a single tenant that
/// batches `replicas` queries per pass.
pub fn cell_config(
    base: &SimConfig,
    preset: &WorkloadPreset,
    policy: PolicyKind,
    replicas: u32,
    seed: u64,
    target_batch: Option<u32>,
) -> SimConfig {
    let mut c = base.clone();
    c.policy = policy;
    c.seed = seed;
    c.degradations.clear();
    c.mode = match preset.kind {
        PresetKind::Microbench => SimMode::Microbench,
        PresetKind::Model => SimMode::ForwardPass,
    };
    if policy == PolicyKind::Exclusive {
        c.tenants = vec![preset.tenant(0)];
        c.policy_params.batch_size = replicas as u64;
    } else {
        c.tenants = preset.tenants(replicas);
        c.policy_params.batch_size = 1;
    }
    match (target_batch, preset.kind) {
        (Some(b), _) => c.scheduler.target_batch = b,
        (None, PresetKind::Microbench) => c.scheduler.target_batch = one_wave_batch(preset, &c.device),
        (None, PresetKind::Model) => {}
    }
    c
}

fn batch_column(c: &SimConfig) -> u64 {
    match c.policy {
        PolicyKind::Exclusive => c.policy_params.batch_size,
        PolicyKind::SpaceTime => (c.scheduler.target_batch as u64).min(c.tenants.len() as u64),
        _ => 1,
    }
}

/// Runs one configuration, recording failures in the status column.
pub fn run_row(workload: &str, replicas: u32, config: &SimConfig) -> CsvRow {
    let outcome = run(config).and_then(|t| aggregate(&t, config));
    outcome_row(workload, replicas, config, outcome)
}

/// CSV row for an already computed run outcome.
pub fn outcome_row(workload: &str, replicas: u32, config: &SimConfig, outcome: Result<RunMetrics>) -> CsvRow {
    let (status, metrics, peak) = match outcome {
        Ok(m) => {
            let peak = Some(m.peak_memory);
            (Status::Ok, Some(m), peak)
        }
        Err(Error::OutOfMemory { required, .. }) => (Status::Oom, None, Some(required)),
        Err(_) => (Status::Error, None, None),
    };
    CsvRow {
        workload: workload.to_string(),
        policy: config.policy,
        replicas,
        batch: batch_column(config),
        seed: config.seed,
        status,
        metrics,
        peak_mem_bytes: peak,
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Runs the cartesian product `(R, policy, seed)`; rows come back sorted by
/// `(workload, policy, R, seed)` whatever the execution order.
pub fn sweep(base: &SimConfig, spec: &SweepSpec) -> Result<Vec<CsvRow>> {
    spec.validate()?;
    let preset = preset(&spec.workload_preset)?;
    let mut cells = Vec::new();
    for &r in &spec.r_values {
        for &p in &spec.policies {
            for &s in &spec.seeds {
                cells.push((r, cell_config(base, &preset, p, r, s, spec.target_batch)));
            }
        }
    }
    let mut rows = par_map(&cells, |(r, c)| run_row(preset.name, *r, c));
    rows.sort_by_key(|r| r.sort_key());
    Ok(rows)
}

/// Seed-averaged metrics of every `ok` cell.
pub fn cell_means(rows: &[CsvRow]) -> BTreeMap<RunKey, RunMetrics> {
    let mut groups: BTreeMap<RunKey, Vec<&RunMetrics>> = BTreeMap::new();
    for row in rows {
        if let Some(m) = &row.metrics {
            groups
                .entry((row.workload.clone(), row.replicas, row.policy))
                .or_default()
                .push(m);
        }
    }
    groups
        .into_iter()
        .map(|(k, ms)| {
            let n = ms.len() as f64;
            let avg = |f: fn(&RunMetrics) -> f64| ms.iter().map(|m| f(m)).sum::<f64>() / n;
            let m = RunMetrics {
                throughput_gflops: avg(|m| m.throughput_gflops),
                mean_latency: avg(|m| m.mean_latency),
                p50: avg(|m| m.p50),
                p99: avg(|m| m.p99),
                fairness_gap: avg(|m| m.fairness_gap),
                utilization: avg(|m| m.utilization),
                peak_memory: ms.iter().map(|m| m.peak_memory).max().unwrap_or(0),
                launches: ms.iter().map(|m| m.launches).sum::<u64>() / ms.len() as u64,
                slo_attainment: avg(|m| m.slo_attainment),
                cancelled: ms.iter().map(|m| m.cancelled).sum::<u64>() / ms.len() as u64,
                completed: ms.iter().map(|m| m.completed).sum(),
                tenant_means: Vec::new(),
            };
            (k, m)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportKind {
    Table1,
    Fig3,
    Fig4,
    Fig6,
}

impl std::str::FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ReportKind> {
        match s {
            "table1" => Ok(ReportKind::Table1),
            "fig3" => Ok(ReportKind::Fig3),
            "fig4" => Ok(ReportKind::Fig4),
            "fig6" => Ok(ReportKind::Fig6),
            other => Err(Error::config("report", format!("unknown report `{other}`"))),
        }
    }
}

/// A rendered table: aligned text for people, CSV for tools.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub title: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("{}\n", self.title);
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(out, "{}", line(&self.header));
        let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        for row in &self.rows {
            let _ = writeln!(out, "{}", line(row));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

fn workloads(rows: &[CsvRow]) -> Vec<String> {
    rows.iter().map(|r| r.workload.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Table-1 style speedups of space-time over the best competitor for every
/// workload in the CSV.
pub fn table1(rows: &[CsvRow]) -> Result<Report> {
    let means = cell_means(rows);
    let mut header = vec!["metric".to_string()];
    let mut cols = Vec::new();
    let mut missing = Vec::new();
    for w in workloads(rows) {
        let r_range: Vec<u32> = rows
            .iter()
            .filter(|r| r.workload == w && (2..=120).contains(&r.replicas))
            .map(|r| r.replicas)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        match speedup_table(&means, &w, &r_range) {
            Ok(t) => {
                header.push(w.clone());
                cols.push((t, r_range));
            }
            Err(Error::MissingCell(c)) => missing.push(c),
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCell(missing.join("; ")));
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}x"));
    let mut out = Vec::new();
    for r in [10, 20] {
        let mut row = vec![format!("R = {r}")];
        row.extend(cols.iter().map(|(t, _)| fmt(t.ratio_at(r))));
        out.push(row);
    }
    let mut row = vec!["geomean (2 <= R <= 120)".to_string()];
    row.extend(cols.iter().map(|(t, _)| fmt(Some(t.geomean))));
    out.push(row);
    let mut row = vec!["next best".to_string()];
    row.extend(cols.iter().map(|(t, _)| t.next_best.to_string()));
    out.push(row);
    Ok(Report {
        title: "Space-time throughput over the next best policy".into(),
        header,
        rows: out,
    })
}

fn per_policy(rows: &[CsvRow], title: &str, value: fn(&RunMetrics) -> String) -> Result<Vec<Report>> {
    let means = cell_means(rows);
    let mut reports = Vec::new();
    for w in workloads(rows) {
        let policies: BTreeSet<PolicyKind> = rows.iter().filter(|r| r.workload == w).map(|r| r.policy).collect();
        let rs: BTreeSet<u32> = rows.iter().filter(|r| r.workload == w).map(|r| r.replicas).collect();
        let mut header = vec!["replicas".to_string()];
        header.extend(policies.iter().map(|p| p.to_string()));
        let mut out = Vec::new();
        for r in rs {
            let mut row = vec![r.to_string()];
            for &p in &policies {
                let key = (w.clone(), r, p);
                let cell = match means.get(&key) {
                    Some(m) => value(m),
                    None => rows
                        .iter()
                        .find(|x| x.workload == w && x.replicas == r && x.policy == p)
                        .map_or("-".to_string(), |x| match x.status {
                            Status::Oom => "oom".into(),
                            _ => "error".into(),
                        }),
                };
                row.push(cell);
            }
            out.push(row);
        }
        reports.push(Report {
            title: format!("{title}: {w}"),
            header,
            rows: out,
        });
    }
    Ok(reports)
}

pub fn report(rows: &[CsvRow], kind: ReportKind) -> Result<Vec<Report>> {
    if rows.is_empty() {
        return Err(Error::Csv("no rows".into()));
    }
    match kind {
        ReportKind::Table1 => Ok(vec![table1(rows)?]),
        ReportKind::Fig3 => per_policy(rows, "Mean latency (ms) vs replicas", |m| format!("{:.3}", m.mean_latency * 1e3)),
        ReportKind::Fig4 => per_policy(rows, "Per-tenant latency gap vs replicas", |m| format!("{:.4}", m.fairness_gap)),
        ReportKind::Fig6 => per_policy(rows, "Throughput (GFLOP/s) vs replicas", |m| format!("{:.1}", m.throughput_gflops)),
    }
}

/// One calibration objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    /// `table1_geomean:<preset>`, `table1_spot:<preset>:<R>`,
    /// `st_vs_time_geomean:<preset>` or `slowdown:<policy>`.
    pub metric: String,
    pub target: f64,
    /// Relative.
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsFile {
    pub targets: Vec<Target>,
}

impl TargetsFile {
    pub fn parse(text: &str) -> Result<TargetsFile> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: TargetsFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(format!("targets.{key}"), e.into_inner().to_string())
        })?;
        for t in &file.targets {
            parse_metric(&t.metric)?;
            if !(t.target > 0.0 && t.tolerance > 0.0) {
                return Err(Error::config(format!("targets.{}", t.metric), "target and tolerance must be > 0"));
            }
        }
        Ok(file)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Metric {
    Table1Geomean(String),
    Table1Spot(String, u32),
    StVsTime(String),
    Slowdown(PolicyKind),
}

fn parse_metric(s: &str) -> Result<Metric> {
    let bad = || Error::config("targets.metric", format!("unknown metric `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let known = |p: &str| preset(p).map(|_| p.to_string()).map_err(|_| bad());
    match parts.as_slice() {
        ["table1_geomean", p] => Ok(Metric::Table1Geomean(known(p)?)),
        ["table1_spot", p, r] => Ok(Metric::Table1Spot(known(p)?, r.parse().map_err(|_| bad())?)),
        ["st_vs_time_geomean", p] => Ok(Metric::StVsTime(known(p)?)),
        ["slowdown", p] => Ok(Metric::Slowdown(p.parse().map_err(|_| bad())?)),
        _ => Err(bad()),
    }
}

/// Sweep settings used when evaluating calibration metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSetup {
    /// Base for microbenchmark sweeps (its device is replaced per evaluation).
    pub micro_base: SimConfig,
    pub model_base: SimConfig,
    pub r_values: Vec<u32>,
    pub slowdown_cells: Vec<(String, u32)>,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        let micro = crate::config::parse_config(MICROBENCH_CONFIG, &[], None).expect("shipped config is valid");
        let models = crate::config::parse_config(MODELS_CONFIG, &[], None).expect("shipped config is valid");
        CalibrationSetup::new(micro, models)
    }
}

impl CalibrationSetup {
    pub fn new(micro_base: SimConfig, model_base: SimConfig) -> CalibrationSetup {
        CalibrationSetup {
            micro_base,
            model_base,
            r_values: (2..=120).collect(),
            slowdown_cells: ["mobilenetv2", "resnet50"]
                .iter()
                .flat_map(|m| [2, 4, 6, 8, 10].map(|n| (m.to_string(), n)))
                .collect(),
        }
    }
}

/// Evaluates calibration metrics for device profiles, memoizing runs whose
/// configuration does not change between profiles.
pub struct Evaluator {
    setup: CalibrationSetup,
    memo: HashMap<String, CsvRow>,
}

impl Evaluator {
    pub fn new(setup: CalibrationSetup) -> Evaluator {
        Evaluator {
            setup,
            memo: HashMap::new(),
        }
    }

    fn rows(&mut self, cells: Vec<(String, u32, SimConfig)>) -> Vec<CsvRow> {
        let keys: Vec<String> = cells
            .iter()
            .map(|(_, _, c)| serde_json::to_string(c).expect("config serializes"))
            .collect();
        let todo: Vec<(usize, &(String, u32, SimConfig))> = cells
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.memo.contains_key(&keys[*i]))
            .collect();
        let fresh = par_map(&todo, |(_, (w, r, c))| run_row(w, *r, c));
        for ((i, _), row) in todo.iter().zip(fresh) {
            self.memo.insert(keys[*i].clone(), row);
        }
        keys.iter().map(|k| self.memo[k].clone()).collect()
    }

    /// Metric values under `device`, keyed by metric name.
    pub fn evaluate(&mut self, device: &DeviceSpec, metrics: &[String]) -> Result<BTreeMap<String, f64>> {
        let parsed = metrics.iter().map(|m| parse_metric(m)).collect::<Result<Vec<_>>>()?;
        let mut micro_presets = BTreeSet::new();
        let mut need_slowdown = false;
        for m in &parsed {
            match m {
                Metric::Table1Geomean(p) | Metric::Table1Spot(p, _) | Metric::StVsTime(p) => {
                    micro_presets.insert(p.clone());
                }
                Metric::Slowdown(_) => need_slowdown = true,
            }
        }
        let mut cells = Vec::new();
        for name in &micro_presets {
            let p = preset(name)?;
            let mut base = self.setup.micro_base.clone();
            base.device = device.clone();
            for &r in &self.setup.r_values {
                for policy in [PolicyKind::TimeMux, PolicyKind::SpaceImplicit, PolicyKind::SpaceExplicit, PolicyKind::SpaceTime] {
                    cells.push((name.clone(), r, cell_config(&base, &p, policy, r, base.seed, None)));
                }
            }
        }
        if need_slowdown {
            let mut base = self.setup.model_base.clone();
            base.device = device.clone();
            for (model, n) in &self.setup.slowdown_cells {
                let p = preset(model)?;
                for policy in PolicyKind::ALL {
                    cells.push((model.clone(), *n, cell_config(&base, &p, policy, *n, base.seed, None)));
                }
            }
        }
        let rows = self.rows(cells);
        let means = cell_means(&rows);
        let slowdowns = if need_slowdown {
            slowdown_vs_exclusive(&means, &self.setup.slowdown_cells)?
        } else {
            BTreeMap::new()
        };
        let mut out = BTreeMap::new();
        for (name, m) in metrics.iter().zip(&parsed) {
            let v = match m {
                Metric::Table1Geomean(p) => speedup_table(&means, p, &self.setup.r_values)?.geomean,
                Metric::Table1Spot(p, r) => speedup_table(&means, p, &[*r])?.geomean,
                Metric::StVsTime(p) => speedup_table_vs(&means, p, &self.setup.r_values, &[PolicyKind::TimeMux])?.geomean,
                Metric::Slowdown(p) => *slowdowns
                    .get(p)
                    .ok_or_else(|| Error::MissingCell(format!("slowdown cells for {p}")))?,
            };
            out.insert(name.clone(), v);
        }
        Ok(out)
    }
}

/// Parameters the calibration may move, with their search brackets.
pub const FREE_PARAMS: [(&str, f64, f64); 3] = [
    ("space_sched_penalty", 1.0, 4.0),
    ("launch_serialization", 0.0, 1.0),
    ("context_switch_overhead", 0.0, 5e-3),
];

fn param_mut<'a>(d: &'a mut DeviceSpec, name: &str) -> &'a mut f64 {
    match name {
        "space_sched_penalty" => &mut d.space_sched_penalty,
        "launch_serialization" => &mut d.launch_serialization,
        "context_switch_overhead" => &mut d.context_switch_overhead,
        _ => unreachable!("validated parameter name"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Achieved {
    pub metric: String,
    pub target: f64,
    pub tolerance: f64,
    pub value: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub device: DeviceSpec,
    pub achieved: Vec<Achieved>,
    pub evaluations: u32,
    pub within_tolerance: bool,
}

fn score(targets: &[Target], values: &BTreeMap<String, f64>) -> (f64, Vec<Achieved>) {
    let achieved: Vec<Achieved> = targets
        .iter()
        .map(|t| {
            let value = values[&t.metric];
            Achieved {
                metric: t.metric.clone(),
                target: t.target,
                tolerance: t.tolerance,
                value,
                relative_error: (value / t.target - 1.0).abs(),
            }
        })
        .collect();
    let norm: Vec<f64> = achieved.iter().map(|a| a.relative_error / a.tolerance).collect();
    let worst = norm.iter().copied().fold(0.0, f64::max);
    let mean = norm.iter().sum::<f64>() / norm.len().max(1) as f64;
    (worst + 0.01 * mean, achieved)
}

/// Coordinate descent with a golden-section line search along each free
/// parameter's bracket. Stops as soon as every target is within tolerance or
/// `budget` evaluations have been spent, and returns the best profile seen.
pub fn calibrate(
    start: &DeviceSpec,
    targets: &[Target],
    free: &[String],
    budget: u32,
    evaluator: &mut Evaluator,
) -> Result<Calibration> {
    for f in free {
        if !FREE_PARAMS.iter().any(|(n, _, _)| n == f) {
            return Err(Error::config("calibrate.params", format!("`{f}` is not a free parameter")));
        }
    }
    let metrics: Vec<String> = targets.iter().map(|t| t.metric.clone()).collect();
    let mut evaluations = 0u32;
    let mut eval = |d: &DeviceSpec, evaluations: &mut u32| -> Result<(f64, Vec<Achieved>)> {
        *evaluations += 1;
        Ok(score(targets, &evaluator.evaluate(d, &metrics)?))
    };
    let within = |a: &[Achieved]| a.iter().all(|x| x.relative_error <= x.tolerance);

    let (mut best_score, mut best_achieved) = eval(start, &mut evaluations)?;
    let mut best = start.clone();
    const PHI: f64 = 0.618_033_988_749_895;
    'outer: while evaluations < budget && !within(&best_achieved) {
        let before = best_score;
        for name in free {
            let &(_, lo0, hi0) = FREE_PARAMS.iter().find(|(n, _, _)| n == name).expect("validated");
            let (mut lo, mut hi) = (lo0, hi0);
            let anchor = best.clone();
            let mut probe = |x: f64, evaluations: &mut u32| -> Result<(f64, Vec<Achieved>, DeviceSpec)> {
                let mut d = anchor.clone();
                *param_mut(&mut d, name) = x;
                let (s, a) = eval(&d, evaluations)?;
                Ok((s, a, d))
            };
            let mut x1 = hi - PHI * (hi - lo);
            let mut x2 = lo + PHI * (hi - lo);
            let mut f1 = probe(x1, &mut evaluations)?;
            let mut f2 = probe(x2, &mut evaluations)?;
            loop {
                for f in [&f1, &f2] {
                    if f.0 < best_score {
                        best_score = f.0;
                        best_achieved = f.1.clone();
                        best = f.2.clone();
                    }
                }
                if within(&best_achieved) || evaluations >= budget {
                    break 'outer;
                }
                if (hi - lo) <= 1e-3 * (hi0 - lo0) {
                    break;
                }
                if f1.0 <= f2.0 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - PHI * (hi - lo);
                    f1 = probe(x1, &mut evaluations)?;
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + PHI * (hi - lo);
                    f2 = probe(x2, &mut evaluations)?;
                }
            }
        }
        if best_score >= before {
            break;
        }
    }
    Ok(Calibration {
        device: best,
        within_tolerance: within(&best_achieved),
        achieved: best_achieved,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::preset;

    fn micro_base() -> SimConfig {
        let mut c = SimConfig::new(DeviceSpec::v100(), PolicyKind::SpaceTime, preset("square-256").unwrap().tenants(1), 0.01);
        c.mode = SimMode::Microbench;
        c
    }

    fn spec(r: Vec<u32>, policies: Vec<PolicyKind>) -> SweepSpec {
        SweepSpec {
            r_values: r,
            policies,
            workload_preset: "resnet18-conv2_2".into(),
            seeds: vec![0],
            target_batch: None,
        }
    }

    #[test]
    fn sweep_rows_are_sorted_and_counted() {
        let rows = sweep(&micro_base(), &spec(vec![3, 2], vec![PolicyKind::SpaceTime, PolicyKind::TimeMux])).unwrap();
        assert_eq!(rows.len(), 4);
        let keys: Vec<_> = rows.iter().map(|r| (r.policy.as_str(), r.replicas)).collect();
        assert_eq!(keys, vec![("space-time", 2), ("space-time", 3), ("time-mux", 2), ("time-mux", 3)]);
        assert!(rows.iter().all(|r| r.status == Status::Ok));
    }

    #[test]
    fn single_cell_sweep_matches_direct_run() {
        let base = micro_base();
        let rows = sweep(&base, &spec(vec![5], vec![PolicyKind::SpaceImplicit])).unwrap();
        let p = preset("resnet18-conv2_2").unwrap();
        let direct = run_row(p.name, 5, &cell_config(&base, &p, PolicyKind::SpaceImplicit, 5, 0, None));
        assert_eq!(rows, vec![direct]);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = sweep(&micro_base(), &spec(vec![2], vec![PolicyKind::SpaceTime])).unwrap();
        let text = csv_string(&rows);
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        let back = read_csv(text.as_bytes()).unwrap();
        assert_eq!(csv_string(&back), text);
        assert!(read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn oom_cells_are_marked() {
        let mut base = micro_base();
        base.duration = 0.05;
        let spec = SweepSpec {
            r_values: vec![18],
            policies: vec![PolicyKind::SpaceImplicit, PolicyKind::SpaceExplicit],
            workload_preset: "resnet50".into(),
            seeds: vec![0],
            target_batch: None,
        };
        let rows = sweep(&base, &spec).unwrap();
        assert_eq!(rows[0].policy, PolicyKind::SpaceExplicit);
        assert_eq!(rows[0].status, Status::Ok);
        assert_eq!(rows[1].status, Status::Oom);
        let line = csv_string(&rows[1..]);
        assert!(line.lines().nth(1).unwrap().contains(",oom,"));
    }

    #[test]
    fn table1_report_layout() {
        let rows = sweep(&micro_base(), &spec(vec![2, 10, 20], COMPETITORS_AND_ST.to_vec())).unwrap();
        let r = report(&rows, ReportKind::Table1).unwrap();
        let labels: Vec<&str> = r[0].rows.iter().map(|row| row[0].as_str()).collect();
        assert_eq!(labels, vec!["R = 10", "R = 20", "geomean (2 <= R <= 120)", "next best"]);
        assert!(r[0].render_text().contains("resnet18-conv2_2"));
        let missing = rows.iter().filter(|r| r.policy != PolicyKind::TimeMux || r.replicas != 10).cloned().collect::<Vec<_>>();
        assert!(matches!(report(&missing, ReportKind::Table1), Err(Error::MissingCell(_))));
        assert!(report(&[], ReportKind::Fig6).is_err());
    }

    const COMPETITORS_AND_ST: [PolicyKind; 4] = [
        PolicyKind::TimeMux,
        PolicyKind::SpaceImplicit,
        PolicyKind::SpaceExplicit,
        PolicyKind::SpaceTime,
    ];

    #[test]
    fn metric_names() {
        assert_eq!(parse_metric("table1_spot:square-256:10").unwrap(), Metric::Table1Spot("square-256".into(), 10));
        assert!(parse_metric("table1_geomean:vgg").is_err());
        assert!(parse_metric("slowdown:time-mux").is_ok());
        assert!(parse_metric("bogus").is_err());
    }

    #[test]
    fn calibration_stops_when_already_met() {
        let setup = CalibrationSetup {
            r_values: vec![2, 4],
            ..CalibrationSetup::new(micro_base(), micro_base())
        };
        let mut ev = Evaluator::new(setup);
        let d = DeviceSpec::v100();
        let now = ev.evaluate(&d, &["st_vs_time_geomean:square-256".to_string()]).unwrap();
        let target = Target {
            metric: "st_vs_time_geomean:square-256".into(),
            target: now["st_vs_time_geomean:square-256"],
            tolerance: 0.01,
        };
        let cal = calibrate(&d, &[target], &["context_switch_overhead".into()], 50, &mut ev).unwrap();
        assert_eq!(cal.evaluations, 1);
        assert_eq!(cal.device, d);
        assert!(cal.within_tolerance);
    }

    #[test]
    fn calibration_single_monotone_parameter() {
        let setup = CalibrationSetup {
            r_values: vec![2, 4],
            ..CalibrationSetup::new(micro_base(), micro_base())
        };
        let mut ev = Evaluator::new(setup);
        let metric = "st_vs_time_geomean:square-256".to_string();
        let mut probe = DeviceSpec::v100();
        probe.context_switch_overhead = 2e-4;
        let goal = ev.evaluate(&probe, std::slice::from_ref(&metric)).unwrap()[&metric];
        let target = Target { metric, target: goal, tolerance: 0.02 };
        let cal = calibrate(&DeviceSpec::v100(), &[target], &["context_switch_overhead".into()], 40, &mut ev).unwrap();
        assert!(cal.within_tolerance, "{:?}", cal.achieved);
    }
}
