//! Baseline GPU sharing strategies: exclusive access, time multiplexing and
//! the two spatial multiplexing flavours.
//!
//! Each policy turns the set of ready kernel requests at a device-idle instant
//! into timed [`DispatchEvent`]s. The space-time scheduler lives in
//! [`crate::scheduler`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{batch_inputs, dispatch_duration, memory_footprint, DeviceSpec, GemmShape, SharingMode};
use crate::error::{Error, Result};
use crate::time::SimTime;
use crate::workload::{Tenant, TenantId};

pub type RequestId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "exclusive")]
    Exclusive,
    #[serde(rename = "time-mux")]
    TimeMux,
    #[serde(rename = "space-implicit")]
    SpaceImplicit,
    #[serde(rename = "space-explicit")]
    SpaceExplicit,
    #[serde(rename = "space-time")]
    SpaceTime,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Exclusive,
        PolicyKind::TimeMux,
        PolicyKind::SpaceImplicit,
        PolicyKind::SpaceExplicit,
        PolicyKind::SpaceTime,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Exclusive => "exclusive",
            PolicyKind::TimeMux => "time-mux",
            PolicyKind::SpaceImplicit => "space-implicit",
            PolicyKind::SpaceExplicit => "space-explicit",
            PolicyKind::SpaceTime => "space-time",
        }
    }

    /// How device memory is accounted for this policy.
    pub fn sharing_mode(self) -> SharingMode {
        match self {
            PolicyKind::Exclusive | PolicyKind::TimeMux | PolicyKind::SpaceImplicit => {
                SharingMode::ProcessPerTenant
            }
            PolicyKind::SpaceExplicit | PolicyKind::SpaceTime => SharingMode::SharedContext,
        }
    }

    /// Coarse family used when naming the runner-up in speedup tables.
    pub fn family(self) -> &'static str {
        match self {
            PolicyKind::Exclusive => "exclusive",
            PolicyKind::TimeMux => "time-only",
            PolicyKind::SpaceImplicit | PolicyKind::SpaceExplicit => "space-only",
            PolicyKind::SpaceTime => "space-time",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<PolicyKind> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("policy.kind", format!("unknown policy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyParams {
    /// Round-robin slice for time multiplexing, seconds.
    pub quantum: f64,
    /// Queries per forward pass under exclusive access.
    pub batch_size: u64,
    pub fairness_gap_even: f64,
    pub fairness_gap_odd: f64,
    /// Jitter generator seed; falls back to the simulation seed.
    pub rng_seed: Option<u64>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            quantum: 5e-3,
            batch_size: 1,
            fairness_gap_even: 0.10,
            fairness_gap_odd: 0.25,
            rng_seed: None,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantum > 0.0 && self.quantum.is_finite()) {
            return Err(Error::config("policy.quantum", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("policy.batch_size", "must be >= 1"));
        }
        if !(self.fairness_gap_even >= 0.0 && self.fairness_gap_even <= self.fairness_gap_odd)
            || !self.fairness_gap_odd.is_finite()
        {
            return Err(Error::config(
                "policy.fairness_gap_even",
                "need 0 <= fairness_gap_even <= fairness_gap_odd",
            ));
        }
        Ok(())
    }

    /// Jitter ceiling for `n` concurrently active tenants.
    pub fn jitter_ceiling(&self, kind: PolicyKind, n: usize) -> f64 {
        match kind {
            PolicyKind::SpaceImplicit if n % 2 == 1 => self.fairness_gap_odd,
            PolicyKind::SpaceImplicit | PolicyKind::SpaceExplicit => self.fairness_gap_even,
            _ => 0.0,
        }
    }
}

/// One device-level dispatch: a single outer kernel invocation, or one
/// tenant's share of a spatial round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchEvent {
    pub start: SimTime,
    pub end: SimTime,
    pub launches: u32,
    pub member_requests: Vec<RequestId>,
    pub policy: PolicyKind,
    pub occupancy: f64,
    pub context_switches: u32,
    pub flops: u64,
}

/// A kernel request that is ready to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadyKernel {
    pub request_id: RequestId,
    pub tenant_id: TenantId,
    /// Forward pass this kernel belongs to.
    pub pass_id: u64,
    pub layer_index: u32,
    pub shape: GemmShape,
    pub enqueue_time: SimTime,
}

/// Fails with [`Error::OutOfMemory`] when the tenants cannot all be resident
/// under `mode`. Returns the footprint otherwise.
pub fn admit(tenants: &[Tenant], mode: SharingMode, device: &DeviceSpec) -> Result<u64> {
    let required = memory_footprint(tenants, mode, device);
    if required > device.mem_capacity {
        return Err(Error::OutOfMemory {
            mode,
            required,
            capacity: device.mem_capacity,
        });
    }
    Ok(required)
}

fn exclusive_event(
    shapes: &[GemmShape],
    members: Vec<RequestId>,
    params: &PolicyParams,
    device: &DeviceSpec,
    start: SimTime,
) -> Result<DispatchEvent> {
    let mut end = start;
    let mut flops = 0;
    let mut occupancy: f64 = 0.0;
    for &shape in shapes {
        let cost = dispatch_duration(&[(batch_inputs(shape, params.batch_size), 1)], device, device.slots(), 1)?;
        end = end + SimTime::from_secs_f64(cost.duration);
        flops += cost.flops;
        occupancy = occupancy.max(cost.occupancy);
    }
    Ok(DispatchEvent {
        start,
        end,
        launches: shapes.len() as u32,
        member_requests: members,
        policy: PolicyKind::Exclusive,
        occupancy,
        context_switches: 0,
        flops,
    })
}

/// One batched forward pass of the only tenant, one launch per layer.
pub fn exclusive_round(
    tenants: &[Tenant],
    params: &PolicyParams,
    device: &DeviceSpec,
    start: SimTime,
    request_id: RequestId,
) -> Result<DispatchEvent> {
    let [tenant] = tenants else {
        return Err(Error::ExclusiveRequiresSingleTenant(tenants.len()));
    };
    exclusive_event(&tenant.layers, vec![request_id], params, device, start)
}

/// One batched layer of the only tenant.
pub fn exclusive_dispatch(
    kernel: &ReadyKernel,
    params: &PolicyParams,
    device: &DeviceSpec,
    start: SimTime,
) -> Result<DispatchEvent> {
    exclusive_event(&[kernel.shape], vec![kernel.request_id], params, device, start)
}

/// Round-robin cursor and the current turn.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundRobin {
    last_tenant: Option<TenantId>,
    turn: Option<Turn>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Turn {
    tenant: TenantId,
    pass_id: u64,
    started: SimTime,
}

impl RoundRobin {
    pub fn last_tenant(&self) -> Option<TenantId> {
        self.last_tenant
    }
}

/// A time-multiplexing decision: which ready kernel runs next.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMuxStep {
    pub request_id: RequestId,
    pub event: DispatchEvent,
}

/// Picks the next kernel at a device-idle instant.
///
/// A turn keeps the device on one tenant's forward pass until the pass
/// finishes or the quantum has elapsed (checked between kernels). Moving to a
/// different tenant charges a context switch before the kernel starts.
pub fn time_mux_step(
    state: &mut RoundRobin,
    ready: &[ReadyKernel],
    now: SimTime,
    params: &PolicyParams,
    device: &DeviceSpec,
) -> Result<Option<TimeMuxStep>> {
    if ready.is_empty() {
        return Ok(None);
    }
    let quantum = SimTime::from_secs_f64(params.quantum);
    let oldest_of = |pred: &dyn Fn(&ReadyKernel) -> bool| {
        ready
            .iter()
            .filter(|k| pred(k))
            .min_by_key(|k| (k.enqueue_time, k.request_id))
            .copied()
    };

    let continued = state.turn.and_then(|turn| {
        if now.saturating_sub(turn.started) >= quantum {
            return None;
        }
        oldest_of(&|k| k.tenant_id == turn.tenant && k.pass_id == turn.pass_id)
    });

    let (kernel, switched) = match continued {
        Some(k) => (k, false),
        None => {
            let mut tenants: Vec<TenantId> = ready.iter().map(|k| k.tenant_id).collect();
            tenants.sort_unstable();
            tenants.dedup();
            let next = match state.last_tenant {
                Some(last) => tenants.iter().copied().find(|&t| t > last).unwrap_or(tenants[0]),
                None => tenants[0],
            };
            let k = oldest_of(&|k| k.tenant_id == next).expect("tenant has ready work");
            // a cold device with a single tenant has nothing to switch from
            let cold_alone = state.last_tenant.is_none() && tenants.len() == 1;
            (k, state.last_tenant != Some(next) && !cold_alone)
        }
    };

    let switch = if switched {
        SimTime::from_secs_f64(device.context_switch_overhead)
    } else {
        SimTime::ZERO
    };
    let start = now + switch;
    if !continued.is_some_and(|c| c.request_id == kernel.request_id) {
        state.turn = Some(Turn {
            tenant: kernel.tenant_id,
            pass_id: kernel.pass_id,
            started: start,
        });
    }
    state.last_tenant = Some(kernel.tenant_id);

    let cost = dispatch_duration(&[(kernel.shape, 1)], device, device.slots(), 1)?;
    Ok(Some(TimeMuxStep {
        request_id: kernel.request_id,
        event: DispatchEvent {
            start,
            end: start + SimTime::from_secs_f64(cost.duration),
            launches: 1,
            member_requests: vec![kernel.request_id],
            policy: PolicyKind::TimeMux,
            occupancy: cost.occupancy,
            context_switches: switched as u32,
            flops: cost.flops,
        },
    }))
}

/// Plans one full round-robin cycle in which every tenant runs one forward
/// pass, with no interference from other events. Request ids are assigned
/// as `tenant_index * layers + layer`.
pub fn time_mux_round(
    tenants: &[Tenant],
    params: &PolicyParams,
    device: &DeviceSpec,
    state: &mut RoundRobin,
    start: SimTime,
) -> Result<Vec<DispatchEvent>> {
    let mut cursors: Vec<(usize, SimTime)> = vec![(0, start); tenants.len()];
    let mut events = Vec::new();
    let mut now = start;
    loop {
        let ready: Vec<ReadyKernel> = tenants
            .iter()
            .enumerate()
            .filter(|(i, t)| cursors[*i].0 < t.layers.len() && cursors[*i].1 <= now)
            .map(|(i, t)| {
                let layer = cursors[i].0;
                ReadyKernel {
                    request_id: (i * t.layers.len() + layer) as RequestId,
                    tenant_id: t.tenant_id,
                    pass_id: i as u64,
                    layer_index: layer as u32,
                    shape: t.layers[layer],
                    enqueue_time: cursors[i].1,
                }
            })
            .collect();
        let Some(step) = time_mux_step(state, &ready, now, params, device)? else {
            break;
        };
        let idx = ready
            .iter()
            .find(|k| k.request_id == step.request_id)
            .expect("chosen kernel was ready")
            .pass_id as usize;
        cursors[idx] = (cursors[idx].0 + 1, step.event.end);
        now = step.event.end;
        events.push(step.event);
    }
    Ok(events)
}

/// Outcome of one spatial round: every participating kernel shares the
/// `[start, end)` window, tenants observe individually jittered completions.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialRound {
    pub events: Vec<DispatchEvent>,
    pub completions: Vec<(RequestId, SimTime)>,
    pub end: SimTime,
}

fn space_round(
    kind: PolicyKind,
    ready: &[ReadyKernel],
    params: &PolicyParams,
    device: &DeviceSpec,
    rng: &mut ChaCha8Rng,
    start: SimTime,
) -> Result<SpatialRound> {
    if ready.is_empty() {
        return Err(Error::EmptyDispatch);
    }
    let mut kernels: Vec<&ReadyKernel> = ready.iter().collect();
    kernels.sort_by_key(|k| (k.tenant_id, k.enqueue_time, k.request_id));
    kernels.truncate(device.slots() as usize);
    let n = kernels.len();
    let budget = (device.slots() / n as u64).max(1);

    let costs = kernels
        .iter()
        .map(|k| dispatch_duration(&[(k.shape, 1)], device, budget, 1))
        .collect::<Result<Vec<_>>>()?;
    let slowest = costs.iter().map(|c| c.duration).fold(0.0, f64::max);
    let serialized = n as f64 * device.launch_overhead * device.launch_serialization;
    let round = device.space_sched_penalty * (slowest + serialized);

    let gap = params.jitter_ceiling(kind, n);
    let completions: Vec<(RequestId, SimTime)> = kernels
        .iter()
        .map(|k| {
            let jitter = if gap > 0.0 { 1.0 + gap * rng.gen::<f64>() } else { 1.0 };
            (k.request_id, start + SimTime::from_secs_f64(round * jitter))
        })
        .collect();
    let end = completions.iter().map(|c| c.1).max().expect("non-empty round");
    let events = kernels
        .iter()
        .zip(&costs)
        .map(|(k, c)| DispatchEvent {
            start,
            end,
            launches: 1,
            member_requests: vec![k.request_id],
            policy: kind,
            occupancy: c.occupancy,
            context_switches: 0,
            flops: c.flops,
        })
        .collect();
    Ok(SpatialRound {
        events,
        completions,
        end,
    })
}

/// Device-arbitrated concurrent processes (MPS-like): static equal slot
/// partitions, a scheduling penalty, partly serialized launches, and a jitter
/// ceiling that is larger for odd tenant counts.
pub fn space_implicit_round(
    ready: &[ReadyKernel],
    params: &PolicyParams,
    device: &DeviceSpec,
    rng: &mut ChaCha8Rng,
    start: SimTime,
) -> Result<SpatialRound> {
    space_round(PolicyKind::SpaceImplicit, ready, params, device, rng, start)
}

/// Streams inside a single process: same structure as the implicit flavour,
/// without the odd-count anomaly.
pub fn space_explicit_round(
    ready: &[ReadyKernel],
    params: &PolicyParams,
    device: &DeviceSpec,
    rng: &mut ChaCha8Rng,
    start: SimTime,
) -> Result<SpatialRound> {
    space_round(PolicyKind::SpaceExplicit, ready, params, device, rng, start)
}
