//! Run configuration documents.
//!
//! A config is one JSON object with the sections `device`, `policy`,
//! `scheduler`, `tenants` and `sim`:
//!
//! ```json
//! {
//!   "device": "v100",
//!   "policy": { "kind": "space-time" },
//!   "scheduler": { "max_wait": 0.001 },
//!   "tenants": { "preset": "resnet50", "count": 4 },
//!   "sim": { "duration": 1.0, "seed": 7 }
//! }
//! ```
//!
//! `device` is a built-in profile name, a path to a profile file, or an
//! inline profile object. `tenants` is either a preset reference or an
//! explicit list. Overrides address any value by dotted path
//! (`sim.seed=7`, `device.space_sched_penalty=1.5`).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::cost::DeviceSpec;
use crate::error::{Error, Result};
use crate::policy::{PolicyKind, PolicyParams};
use crate::scheduler::SchedulerConfig;
use crate::sim::{Degradation, SimConfig, SimMode};
use crate::workload::{preset, Tenant};

const SECTIONS: [&str; 5] = ["device", "policy", "scheduler", "tenants", "sim"];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PresetTenants {
    preset: String,
    count: u32,
    #[serde(default)]
    concurrency: Option<u32>,
    #[serde(default)]
    slo_latency: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    duration: f64,
    #[serde(default)]
    warmup: Option<f64>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    mode: SimMode,
    #[serde(default)]
    degradations: Vec<Degradation>,
}

fn typed<T: DeserializeOwned>(section: &str, value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { section.to_string() } else { format!("{section}.{path}") };
        Error::config(key, e.into_inner().to_string())
    })
}

/// Parses a `key=value` override. The value is read as JSON when possible and
/// as a bare string otherwise.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(spec, "empty override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn device_value(v: &Value, base: Option<&Path>) -> Result<Value> {
    let spec = resolve_device(v, base)?;
    Ok(serde_json::to_value(spec)?)
}

/// Writes `value` at dotted `key`, creating objects as needed. A device given
/// by name is expanded to its full profile before being edited.
pub fn apply_override(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if !SECTIONS.contains(&parts[0]) {
        return Err(Error::config(key, "unknown section"));
    }
    if parts[0] == "device" && parts.len() > 1 {
        if let Some(d @ Value::String(_)) = doc.get("device") {
            let expanded = device_value(d, None)?;
            doc["device"] = expanded;
        }
    }
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::config(key, format!("`{part}` is not an index")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::config(key, format!("index {idx} out of range")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::config(key, format!("`{part}` is not inside an object"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

fn resolve_device(v: &Value, base: Option<&Path>) -> Result<DeviceSpec> {
    match v {
        Value::String(name) => {
            if let Some(spec) = DeviceSpec::builtin(name) {
                return Ok(spec);
            }
            let path = match base {
                Some(dir) => dir.join(name),
                None => name.into(),
            };
            if path.is_file() {
                DeviceSpec::load(&path)
            } else {
                Err(Error::config("device", format!("unknown device profile `{name}`")))
            }
        }
        Value::Object(_) => {
            let spec: DeviceSpec = typed("device", v.clone())?;
            spec.validate()?;
            Ok(spec)
        }
        _ => Err(Error::config("device", "expected a profile name or object")),
    }
}

fn resolve_tenants(v: Value) -> Result<Vec<Tenant>> {
    match v {
        Value::Array(_) => typed("tenants", v),
        Value::Object(_) => {
            let p: PresetTenants = typed("tenants", v)?;
            let preset = preset(&p.preset).map_err(|e| Error::config("tenants.preset", e.to_string()))?;
            let mut tenants = preset.tenants(p.count);
            for t in &mut tenants {
                if let Some(c) = p.concurrency {
                    t.concurrency = c;
                }
                if let Some(s) = p.slo_latency {
                    t.slo_latency = s;
                }
            }
            Ok(tenants)
        }
        _ => Err(Error::config("tenants", "expected a preset object or a list")),
    }
}

/// Builds a [`SimConfig`] from a parsed document. Relative device profile
/// paths resolve against `base`.
pub fn from_value(mut doc: Value, base: Option<&Path>) -> Result<SimConfig> {
    let Value::Object(map) = &mut doc else {
        return Err(Error::config("", "config must be a JSON object"));
    };
    if let Some(unknown) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
        return Err(Error::config(unknown.clone(), "unknown section"));
    }
    let device = match map.remove("device") {
        Some(v) => resolve_device(&v, base)?,
        None => DeviceSpec::v100(),
    };

    let mut policy = match map.remove("policy") {
        Some(Value::Object(p)) => p,
        Some(_) => return Err(Error::config("policy", "expected an object")),
        None => return Err(Error::config("policy", "missing section")),
    };
    let kind: PolicyKind = match policy.remove("kind") {
        Some(Value::String(s)) => s.parse()?,
        Some(_) => return Err(Error::config("policy.kind", "expected a string")),
        None => return Err(Error::config("policy.kind", "missing")),
    };
    let policy_params: PolicyParams = typed("policy", Value::Object(policy))?;

    let scheduler: SchedulerConfig = match map.remove("scheduler") {
        Some(v) => typed("scheduler", v)?,
        None => SchedulerConfig::default(),
    };
    let tenants = resolve_tenants(
        map.remove("tenants")
            .ok_or_else(|| Error::config("tenants", "missing section"))?,
    )?;
    let sim: SimSection = typed(
        "sim",
        map.remove("sim").ok_or_else(|| Error::config("sim", "missing section"))?,
    )?;

    let config = SimConfig {
        device,
        policy: kind,
        policy_params,
        scheduler,
        tenants,
        duration: sim.duration,
        warmup: sim.warmup.unwrap_or(0.1 * sim.duration),
        seed: sim.seed,
        mode: sim.mode,
        degradations: sim.degradations,
    };
    config.validate()?;
    Ok(config)
}

/// Parses a config document and applies `overrides` in order.
pub fn parse_config(text: &str, overrides: &[(String, Value)], base: Option<&Path>) -> Result<SimConfig> {
    let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::config("", format!("invalid JSON: {e}")))?;
    for (key, value) in overrides {
        apply_override(&mut doc, key, value.clone())?;
    }
    from_value(doc, base)
}

pub fn load_config(path: &Path, overrides: &[(String, Value)]) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, overrides, path.parent())
}
