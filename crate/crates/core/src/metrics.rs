//! Aggregation of traces into throughput, latency, fairness and speedup figures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyKind;
use crate::sim::{SimConfig, Trace};
use crate::time::SimTime;
use crate::workload::TenantId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub throughput_gflops: f64,
    /// Seconds.
    pub mean_latency: f64,
    pub p50: f64,
    pub p99: f64,
    pub fairness_gap: f64,
    pub utilization: f64,
    pub peak_memory: u64,
    pub launches: u64,
    pub slo_attainment: f64,
    pub cancelled: u64,
    pub completed: u64,
    /// Mean latency of each non-evicted tenant with completions, by id.
    pub tenant_means: Vec<(TenantId, f64)>,
}

/// Nearest-rank percentile of an ascending slice; `p` in percent.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `exp(mean(ln x))`; NaN for an empty slice.
pub fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// `(max - min) / min` of per-tenant means; 0 with fewer than two tenants.
pub fn fairness_gap(means: &[f64]) -> f64 {
    let Some(lo) = means.iter().copied().reduce(f64::min) else {
        return 0.0;
    };
    let hi = means.iter().copied().fold(lo, f64::max);
    if lo > 0.0 {
        (hi - lo) / lo
    } else {
        0.0
    }
}

fn mean_ns(sum: u128, n: u64) -> f64 {
    sum as f64 / n as f64 * 1e-9
}

/// Metrics over forward passes that complete inside `[warmup, duration]`.
pub fn aggregate(trace: &Trace, config: &SimConfig) -> Result<RunMetrics> {
    let lo = SimTime::from_secs_f64(config.warmup);
    let hi = SimTime::from_secs_f64(config.duration);
    let window: Vec<_> = trace
        .completions
        .iter()
        .filter(|c| c.complete_time >= lo && c.complete_time <= hi)
        .collect();
    if window.is_empty() {
        return Err(Error::NoCompletions);
    }
    let n = window.len() as u64;
    let flops: u128 = window.iter().map(|c| c.flops as u128).sum();
    let span = (hi - lo).as_secs_f64();
    let throughput = flops as f64 / span;

    let mut lat_ns: Vec<u64> = window.iter().map(|c| c.latency().0).collect();
    lat_ns.sort_unstable();
    let total: u128 = lat_ns.iter().map(|&l| l as u128).sum();
    let lat: Vec<f64> = lat_ns.iter().map(|&l| l as f64 * 1e-9).collect();

    let evicted: Vec<TenantId> = trace.evictions.iter().map(|e| e.tenant_id).collect();
    let mut per_tenant: BTreeMap<TenantId, (u128, u64)> = BTreeMap::new();
    for c in &window {
        if evicted.contains(&c.tenant_id) {
            continue;
        }
        let e = per_tenant.entry(c.tenant_id).or_default();
        e.0 += c.latency().0 as u128;
        e.1 += 1;
    }
    let tenant_means: Vec<(TenantId, f64)> = per_tenant
        .iter()
        .map(|(t, (sum, k))| (*t, mean_ns(*sum, *k)))
        .collect();
    let means: Vec<f64> = tenant_means.iter().map(|m| m.1).collect();

    let launches = trace
        .events
        .iter()
        .filter(|e| e.start >= lo && e.start < hi)
        .map(|e| e.launches as u64)
        .sum();
    let met = window.iter().filter(|c| c.slo_met).count();

    Ok(RunMetrics {
        throughput_gflops: throughput / 1e9,
        mean_latency: mean_ns(total, n),
        p50: percentile(&lat, 50.0),
        p99: percentile(&lat, 99.0),
        fairness_gap: fairness_gap(&means),
        utilization: throughput / config.device.peak_flops,
        peak_memory: trace.peak_memory,
        launches,
        slo_attainment: met as f64 / n as f64,
        cancelled: trace.cancellations.len() as u64,
        completed: n,
        tenant_means,
    })
}

/// `(workload, replicas, policy)`.
pub type RunKey = (String, u32, PolicyKind);

/// Policies space-time is compared against.
pub const COMPETITORS: [PolicyKind; 3] = [PolicyKind::TimeMux, PolicyKind::SpaceImplicit, PolicyKind::SpaceExplicit];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub replicas: u32,
    pub ratio: f64,
    pub best_competitor: PolicyKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpeedupTable {
    pub workload: String,
    pub rows: Vec<SpeedupRow>,
    pub geomean: f64,
    /// Family of the competitor that is best most often.
    pub next_best: &'static str,
}

impl SpeedupTable {
    pub fn ratio_at(&self, replicas: u32) -> Option<f64> {
        self.rows.iter().find(|r| r.replicas == replicas).map(|r| r.ratio)
    }
}

fn cell<'a>(runs: &'a BTreeMap<RunKey, RunMetrics>, workload: &str, r: u32, p: PolicyKind) -> Result<&'a RunMetrics> {
    runs.get(&(workload.to_string(), r, p))
        .ok_or_else(|| Error::MissingCell(format!("workload={workload} replicas={r} policy={p}")))
}

/// Space-time throughput over the best competitor, per replica count.
pub fn speedup_table(runs: &BTreeMap<RunKey, RunMetrics>, workload: &str, r_range: &[u32]) -> Result<SpeedupTable> {
    speedup_table_vs(runs, workload, r_range, &COMPETITORS)
}

/// As [`speedup_table`], against an explicit competitor set.
pub fn speedup_table_vs(
    runs: &BTreeMap<RunKey, RunMetrics>,
    workload: &str,
    r_range: &[u32],
    competitors: &[PolicyKind],
) -> Result<SpeedupTable> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for &r in r_range {
        let mut best: Option<(PolicyKind, f64)> = None;
        let mut st = None;
        for &p in competitors.iter().chain([&PolicyKind::SpaceTime]) {
            match cell(runs, workload, r, p) {
                Ok(m) if p == PolicyKind::SpaceTime => st = Some(m.throughput_gflops),
                Ok(m) => {
                    if best.is_none_or(|(_, b)| m.throughput_gflops > b) {
                        best = Some((p, m.throughput_gflops));
                    }
                }
                Err(Error::MissingCell(c)) => missing.push(c),
                Err(e) => return Err(e),
            }
        }
        if let (Some(st), Some((p, b))) = (st, best) {
            rows.push(SpeedupRow {
                replicas: r,
                ratio: st / b,
                best_competitor: p,
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCell(missing.join("; ")));
    }
    let mut tally: BTreeMap<&'static str, usize> = BTreeMap::new();
    for row in &rows {
        *tally.entry(row.best_competitor.family()).or_default() += 1;
    }
    let next_best = tally
        .iter()
        .max_by_key(|(_, n)| **n)
        .map_or("none", |(f, _)| *f);
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    Ok(SpeedupTable {
        workload: workload.to_string(),
        geomean: geomean(&ratios),
        rows,
        next_best,
    })
}

/// Geomean, per policy, of mean forward-pass latency with `n` tenants over
/// exclusive latency at batch `n`, across the `(model, n)` cells.
pub fn slowdown_vs_exclusive(
    runs: &BTreeMap<RunKey, RunMetrics>,
    cells: &[(String, u32)],
) -> Result<BTreeMap<PolicyKind, f64>> {
    let mut out = BTreeMap::new();
    for p in COMPETITORS.into_iter().chain([PolicyKind::SpaceTime]) {
        let mut ratios = Vec::new();
        for (model, n) in cells {
            let base = runs
                .get(&(model.clone(), *n, PolicyKind::Exclusive))
                .ok_or_else(|| Error::MissingBaseline(format!("workload={model} batch={n}")))?;
            let Some(m) = runs.get(&(model.clone(), *n, p)) else {
                continue;
            };
            ratios.push(m.mean_latency / base.mean_latency);
        }
        if !ratios.is_empty() {
            out.insert(p, geomean(&ratios));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::DeviceSpec;
    use crate::sim::{run, SimMode};
    use crate::workload::preset;

    fn metrics(tp: f64, lat: f64) -> RunMetrics {
        RunMetrics {
            throughput_gflops: tp,
            mean_latency: lat,
            p50: lat,
            p99: lat,
            fairness_gap: 0.0,
            utilization: 0.0,
            peak_memory: 0,
            launches: 0,
            slo_attainment: 1.0,
            cancelled: 0,
            completed: 1,
            tenant_means: Vec::new(),
        }
    }

    #[test]
    fn nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 50.0), 50.0);
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0), 2.0);
    }

    #[test]
    fn geomean_and_gap_arithmetic() {
        assert!((geomean(&[2.0, 8.0]) - 4.0).abs() < 1e-12);
        assert!(geomean(&[]).is_nan());
        assert!((fairness_gap(&[8e-3, 10e-3]) - 0.25).abs() < 1e-12);
        assert_eq!(fairness_gap(&[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn single_kernel_throughput() {
        let tenants = preset("resnet18-conv2_2").unwrap().tenants(1);
        let mut cfg = SimConfig::new(DeviceSpec::v100(), PolicyKind::Exclusive, tenants, 0.05);
        cfg.mode = SimMode::Microbench;
        let m = aggregate(&run(&cfg).unwrap(), &cfg).unwrap();
        assert!((m.throughput_gflops - 669.0).abs() < 3.0, "{}", m.throughput_gflops);
        assert!((m.utilization - 0.048).abs() < 0.001);
        assert_eq!(m.fairness_gap, 0.0);
        assert!(m.p50 <= m.p99);
    }

    #[test]
    fn empty_window_errors() {
        let tenants = preset("resnet50").unwrap().tenants(1);
        let mut cfg = SimConfig::new(DeviceSpec::v100(), PolicyKind::Exclusive, tenants, 1e-4);
        cfg.warmup = 0.0;
        let trace = run(&cfg).unwrap();
        assert!(matches!(aggregate(&trace, &cfg), Err(Error::NoCompletions)));
    }

    fn table_runs(vals: &[(u32, PolicyKind, f64)]) -> BTreeMap<RunKey, RunMetrics> {
        vals.iter()
            .map(|(r, p, tp)| (("w".to_string(), *r, *p), metrics(*tp, 1.0)))
            .collect()
    }

    #[test]
    fn speedup_equal_policies() {
        let mut v = Vec::new();
        for r in [2, 3] {
            for p in PolicyKind::ALL {
                v.push((r, p, 10.0));
            }
        }
        let t = speedup_table(&table_runs(&v), "w", &[2, 3]).unwrap();
        assert!(t.rows.iter().all(|r| r.ratio == 1.0));
        assert_eq!(t.geomean, 1.0);
    }

    #[test]
    fn speedup_next_best_and_missing() {
        let v = [
            (2, PolicyKind::TimeMux, 1.0),
            (2, PolicyKind::SpaceImplicit, 2.0),
            (2, PolicyKind::SpaceExplicit, 1.5),
            (2, PolicyKind::SpaceTime, 4.0),
            (4, PolicyKind::TimeMux, 1.0),
            (4, PolicyKind::SpaceImplicit, 2.0),
            (4, PolicyKind::SpaceExplicit, 0.5),
            (4, PolicyKind::SpaceTime, 8.0),
        ];
        let t = speedup_table(&table_runs(&v), "w", &[2, 4]).unwrap();
        assert_eq!(t.rows[0].ratio, 2.0);
        assert_eq!(t.rows[1].ratio, 4.0);
        assert!((t.geomean - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.next_best, "space-only");
        let err = speedup_table(&table_runs(&v), "w", &[2, 5]).unwrap_err();
        assert!(err.to_string().contains("replicas=5"));
    }

    #[test]
    fn slowdown_geomean() {
        let mut runs = BTreeMap::new();
        let key = |m: &str, n, p| (m.to_string(), n, p);
        runs.insert(key("a", 2, PolicyKind::Exclusive), metrics(1.0, 1.0));
        runs.insert(key("a", 4, PolicyKind::Exclusive), metrics(1.0, 1.0));
        runs.insert(key("a", 2, PolicyKind::TimeMux), metrics(1.0, 2.0));
        runs.insert(key("a", 4, PolicyKind::TimeMux), metrics(1.0, 8.0));
        let cells = vec![("a".to_string(), 2), ("a".to_string(), 4)];
        let s = slowdown_vs_exclusive(&runs, &cells).unwrap();
        assert!((s[&PolicyKind::TimeMux] - 4.0).abs() < 1e-12);
        runs.remove(&key("a", 4, PolicyKind::Exclusive));
        assert!(matches!(slowdown_vs_exclusive(&runs, &cells), Err(Error::MissingBaseline(_))));
    }
}
