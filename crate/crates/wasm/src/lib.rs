//! Browser bindings. Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use stmux::experiment::{cell_config, run_row, Status, MICROBENCH_CONFIG};
use stmux::{config, dispatch_duration, memory_footprint, preset, DeviceSpec, GemmShape, PolicyKind, SharingMode};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct SweepPoint {
    policy: &'static str,
    replicas: u32,
    throughput_gflops: Option<f64>,
    p99_latency: Option<f64>,
    status: Status,
}

/// Throughput of each policy for `R` in `1..=max_replicas` (every `step`).
#[wasm_bindgen]
pub fn policy_sweep(workload: &str, max_replicas: u32, step: u32, duration: f64) -> Result<String, JsError> {
    let preset = preset(workload).map_err(js)?;
    let mut base = config::parse_config(MICROBENCH_CONFIG, &[], None).map_err(js)?;
    base.duration = duration;
    base.warmup = 0.1 * duration;
    let policies = [
        PolicyKind::TimeMux,
        PolicyKind::SpaceImplicit,
        PolicyKind::SpaceExplicit,
        PolicyKind::SpaceTime,
    ];
    let mut points = Vec::new();
    for r in (1..=max_replicas.max(1)).step_by(step.max(1) as usize) {
        for p in policies {
            let cell = cell_config(&base, &preset, p, r, 0, None);
            let row = run_row(preset.name, r, &cell);
            points.push(SweepPoint {
                policy: p.as_str(),
                replicas: r,
                throughput_gflops: row.metrics.as_ref().map(|m| m.throughput_gflops),
                p99_latency: row.metrics.as_ref().map(|m| m.p99),
                status: row.status,
            });
        }
    }
    serde_json::to_string(&points).map_err(js)
}

#[derive(Serialize)]
struct Footprint {
    replicas: u32,
    process_per_tenant: u64,
    shared_context: u64,
    capacity: u64,
}

/// Device memory needed by `1..=max_replicas` tenants under each sharing mode.
#[wasm_bindgen]
pub fn memory_curve(workload: &str, max_replicas: u32) -> Result<String, JsError> {
    let preset = preset(workload).map_err(js)?;
    let device = DeviceSpec::v100();
    let curve: Vec<Footprint> = (1..=max_replicas.max(1))
        .map(|r| {
            let tenants = preset.tenants(r);
            Footprint {
                replicas: r,
                process_per_tenant: memory_footprint(&tenants, SharingMode::ProcessPerTenant, &device),
                shared_context: memory_footprint(&tenants, SharingMode::SharedContext, &device),
                capacity: device.mem_capacity,
            }
        })
        .collect();
    serde_json::to_string(&curve).map_err(js)
}

/// Roofline cost of `count` copies of an `m x n x k` GEMM fused into one launch.
#[wasm_bindgen]
pub fn dispatch_cost(m: u32, n: u32, k: u32, count: u32, slot_budget: u32) -> Result<String, JsError> {
    let device = DeviceSpec::v100();
    let shape = GemmShape::new(m as u64, n as u64, k as u64).map_err(js)?;
    let budget = if slot_budget == 0 { device.slots() } else { slot_budget as u64 };
    let cost = dispatch_duration(&[(shape, count.max(1) as u64)], &device, budget, 1).map_err(js)?;
    serde_json::to_string(&cost).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_curve_grows_linearly_per_process() {
        let v: serde_json::Value = serde_json::from_str(&memory_curve("resnet50", 3).unwrap()).unwrap();
        let a = v[0]["process_per_tenant"].as_u64().unwrap();
        let b = v[1]["process_per_tenant"].as_u64().unwrap();
        let c = v[2]["process_per_tenant"].as_u64().unwrap();
        assert_eq!(b - a, c - b);
        assert!(v[2]["shared_context"].as_u64().unwrap() < c);
    }

    #[test]
    fn dispatch_cost_reports_blocks() {
        let v: serde_json::Value = serde_json::from_str(&dispatch_cost(3136, 64, 576, 2, 0).unwrap()).unwrap();
        assert_eq!(v["blocks"], 2 * 49);
        assert_eq!(v["waves"], 1);
    }

    #[test]
    fn sweep_has_every_policy() {
        let v: serde_json::Value = serde_json::from_str(&policy_sweep("square-256", 3, 2, 0.005).unwrap()).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 8);
        assert!(v.as_array().unwrap().iter().all(|p| p["status"] == "ok"));
    }
}
