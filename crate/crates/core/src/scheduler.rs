//! Dynamic space-time scheduler.
//!
//! Pending kernel requests from all tenants are grouped by GEMM shape (or
//! into a single heterogeneous group when variable-size batching is on) and
//! fused into super-kernels: one launch that runs every member problem.
//! A group is emitted once it reaches the target size, once its oldest member
//! has waited `max_wait`, or as soon as any member has run out of SLO headroom.
//!
//! The scheduler also keeps an exponentially weighted per-tenant kernel
//! latency, flags tenants that drift far above the peer median, and evicts
//! them.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::cost::{dispatch_duration, single_kernel_cost, DeviceSpec, GemmShape, KernelCost};
use crate::error::{Error, Result};
use crate::policy::{DispatchEvent, PolicyKind, RequestId};
use crate::time::SimTime;
use crate::workload::TenantId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRequest {
    pub request_id: RequestId,
    pub tenant_id: TenantId,
    pub shape: GemmShape,
    pub enqueue_time: SimTime,
    /// Absolute virtual time.
    pub slo_deadline: SimTime,
    pub layer_index: u32,
    #[serde(default)]
    pub pass_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchPolicy {
    /// Seconds.
    pub max_wait: f64,
    pub target_batch: u32,
    pub allow_variable_size: bool,
    pub slo_safety_margin: f64,
    /// Duration multiplier for non-uniform (variable-size) super-kernels.
    pub variable_size_inefficiency: f64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        BatchPolicy {
            max_wait: 1e-3,
            target_batch: 20,
            allow_variable_size: false,
            slo_safety_margin: 0.0,
            variable_size_inefficiency: 1.10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub ewma_alpha: f64,
    pub threshold_ratio: f64,
    pub min_observations: u32,
    pub evict_stragglers: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            ewma_alpha: 0.2,
            threshold_ratio: 1.5,
            min_observations: 10,
            evict_stragglers: true,
        }
    }
}

/// The `scheduler` section of a run config: batching and detector knobs side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub max_wait: f64,
    pub target_batch: u32,
    pub allow_variable_size: bool,
    pub slo_safety_margin: f64,
    pub variable_size_inefficiency: f64,
    pub ewma_alpha: f64,
    pub threshold_ratio: f64,
    pub min_observations: u32,
    pub evict_stragglers: bool,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig::from_parts(&BatchPolicy::default(), &DetectorParams::default())
    }
}

impl SchedulerConfig {
    pub fn from_parts(batch: &BatchPolicy, detector: &DetectorParams) -> SchedulerConfig {
        SchedulerConfig {
            max_wait: batch.max_wait,
            target_batch: batch.target_batch,
            allow_variable_size: batch.allow_variable_size,
            slo_safety_margin: batch.slo_safety_margin,
            variable_size_inefficiency: batch.variable_size_inefficiency,
            ewma_alpha: detector.ewma_alpha,
            threshold_ratio: detector.threshold_ratio,
            min_observations: detector.min_observations,
            evict_stragglers: detector.evict_stragglers,
        }
    }

    pub fn batch_policy(&self) -> BatchPolicy {
        BatchPolicy {
            max_wait: self.max_wait,
            target_batch: self.target_batch,
            allow_variable_size: self.allow_variable_size,
            slo_safety_margin: self.slo_safety_margin,
            variable_size_inefficiency: self.variable_size_inefficiency,
        }
    }

    pub fn detector(&self) -> DetectorParams {
        DetectorParams {
            ewma_alpha: self.ewma_alpha,
            threshold_ratio: self.threshold_ratio,
            min_observations: self.min_observations,
            evict_stragglers: self.evict_stragglers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, r: &str| Err(Error::config(format!("scheduler.{k}"), r));
        if !(self.max_wait > 0.0 && self.max_wait.is_finite()) {
            return err("max_wait", "must be > 0");
        }
        if self.target_batch == 0 {
            return err("target_batch", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.slo_safety_margin) {
            return err("slo_safety_margin", "must be in [0, 1)");
        }
        if !(self.variable_size_inefficiency >= 1.0 && self.variable_size_inefficiency.is_finite()) {
            return err("variable_size_inefficiency", "must be >= 1");
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return err("ewma_alpha", "must be in (0, 1]");
        }
        if !(self.threshold_ratio > 1.0 && self.threshold_ratio.is_finite()) {
            return err("threshold_ratio", "must be > 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperKernel {
    pub shape_signature: String,
    pub members: Vec<KernelRequest>,
    pub uniform: bool,
    pub planned_cost: KernelCost,
}

impl SuperKernel {
    pub fn member_ids(&self) -> Vec<RequestId> {
        self.members.iter().map(|m| m.request_id).collect()
    }

    pub(crate) fn plan(mut members: Vec<KernelRequest>, policy: &BatchPolicy, device: &DeviceSpec) -> Result<SuperKernel> {
        members.sort_by_key(|m| (m.enqueue_time, m.request_id));
        let mut counts: BTreeMap<GemmShape, u64> = BTreeMap::new();
        for m in &members {
            *counts.entry(m.shape).or_default() += 1;
        }
        let grouped: Vec<(GemmShape, u64)> = counts.into_iter().collect();
        let uniform = grouped.len() == 1;
        let mut planned_cost = dispatch_duration(&grouped, device, device.slots(), 1)?;
        if !uniform {
            let body = planned_cost.duration - device.launch_overhead;
            planned_cost.duration = device.launch_overhead + body * policy.variable_size_inefficiency;
        }
        Ok(SuperKernel {
            shape_signature: shape_signature(&grouped),
            members,
            uniform,
            planned_cost,
        })
    }
}

/// Canonical `MxNxK*count` terms, sorted by shape, joined with `+`.
pub fn shape_signature(grouped: &[(GemmShape, u64)]) -> String {
    let mut terms: Vec<(GemmShape, u64)> = grouped.to_vec();
    terms.sort();
    terms
        .iter()
        .map(|(s, c)| format!("{s}*{c}"))
        .collect::<Vec<_>>()
        .join("+")
}

/// Pending requests, kept in arrival order.
#[derive(Clone, Debug, Default)]
pub struct RequestQueue {
    pending: Vec<KernelRequest>,
    seen: HashSet<RequestId>,
}

impl RequestQueue {
    pub fn new() -> RequestQueue {
        RequestQueue::default()
    }

    pub fn enqueue(&mut self, request: KernelRequest) -> Result<()> {
        if !self.seen.insert(request.request_id) {
            return Err(Error::DuplicateRequest(request.request_id));
        }
        let key = (request.enqueue_time, request.request_id);
        let at = self
            .pending
            .partition_point(|r| (r.enqueue_time, r.request_id) <= key);
        self.pending.insert(at, request);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> &[KernelRequest] {
        &self.pending
    }

    /// Pending requests grouped by shape; each group oldest-first.
    pub fn groups(&self) -> BTreeMap<GemmShape, Vec<&KernelRequest>> {
        let mut groups: BTreeMap<GemmShape, Vec<&KernelRequest>> = BTreeMap::new();
        for r in &self.pending {
            groups.entry(r.shape).or_default().push(r);
        }
        groups
    }

    fn remove_ids(&mut self, ids: &BTreeSet<RequestId>) {
        self.pending.retain(|r| !ids.contains(&r.request_id));
    }

    /// Drops every pending request of `tenant`, returning them.
    pub fn drain_tenant(&mut self, tenant: TenantId) -> Vec<KernelRequest> {
        let (gone, keep) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|r| r.tenant_id == tenant);
        self.pending = keep;
        gone
    }
}

/// Remaining SLO slack after running for `predicted_duration` (inflated by
/// the safety margin), in seconds. Negative once the deadline is unreachable.
pub fn slo_headroom(request: &KernelRequest, now: SimTime, predicted_duration: f64, policy: &BatchPolicy) -> f64 {
    headroom_ns(request, now, inflated_prediction(predicted_duration, policy)) as f64 * 1e-9
}

fn inflated_prediction(predicted: f64, policy: &BatchPolicy) -> SimTime {
    SimTime::from_secs_f64(predicted * (1.0 + policy.slo_safety_margin))
}

fn headroom_ns(request: &KernelRequest, now: SimTime, predicted: SimTime) -> i128 {
    request.slo_deadline.0 as i128 - now.0 as i128 - predicted.0 as i128
}

/// Predicted stand-alone duration per shape.
#[derive(Clone, Debug, Default)]
pub struct Predictor {
    cache: BTreeMap<GemmShape, f64>,
}

impl Predictor {
    pub fn predict(&mut self, shape: GemmShape, device: &DeviceSpec) -> f64 {
        *self
            .cache
            .entry(shape)
            .or_insert_with(|| single_kernel_cost(shape, device).duration)
    }
}

/// Forms super-kernels from the queue at time `now`.
///
/// `capacity` caps the size trigger at the number of requests that can be
/// outstanding at once (a group can never grow past it).
pub fn form_batches(
    queue: &mut RequestQueue,
    now: SimTime,
    policy: &BatchPolicy,
    device: &DeviceSpec,
    capacity: Option<u32>,
) -> Result<Vec<SuperKernel>> {
    form_batches_with(queue, now, policy, device, capacity, &mut Predictor::default())
}

pub(crate) fn form_batches_with(
    queue: &mut RequestQueue,
    now: SimTime,
    policy: &BatchPolicy,
    device: &DeviceSpec,
    capacity: Option<u32>,
    predictor: &mut Predictor,
) -> Result<Vec<SuperKernel>> {
    if queue.is_empty() {
        return Ok(Vec::new());
    }
    let target = capacity
        .map_or(policy.target_batch, |c| policy.target_batch.min(c))
        .max(1) as usize;
    let max_wait = SimTime::from_secs_f64(policy.max_wait);

    let groups: Vec<Vec<&KernelRequest>> = if policy.allow_variable_size {
        vec![queue.pending.iter().collect()]
    } else {
        queue.groups().into_values().collect()
    };

    let mut chosen: Vec<Vec<KernelRequest>> = Vec::new();
    for group in groups {
        let mut chunks = group.chunks(target);
        let mut rest: &[&KernelRequest] = &[];
        for chunk in chunks.by_ref() {
            if chunk.len() == target {
                chosen.push(chunk.iter().map(|r| (*r).clone()).collect());
            } else {
                rest = chunk;
            }
        }
        if rest.is_empty() {
            continue;
        }
        let aged = now.saturating_sub(rest[0].enqueue_time) >= max_wait;
        let mut urgent = || {
            rest.iter().any(|r| {
                let predicted = inflated_prediction(predictor.predict(r.shape, device), policy);
                headroom_ns(r, now, predicted) <= 0
            })
        };
        if aged || urgent() {
            chosen.push(rest.iter().map(|r| (*r).clone()).collect());
        }
    }

    let mut emitted = chosen
        .into_iter()
        .map(|members| SuperKernel::plan(members, policy, device))
        .collect::<Result<Vec<_>>>()?;
    emitted.sort_by_key(|sk| (sk.members[0].enqueue_time, sk.members[0].request_id));
    let taken: BTreeSet<RequestId> = emitted.iter().flat_map(|sk| sk.member_ids()).collect();
    queue.remove_ids(&taken);
    Ok(emitted)
}

/// Earliest instant after `now` at which [`form_batches`] could emit
/// without a new arrival.
pub(crate) fn next_wakeup(
    queue: &RequestQueue,
    now: SimTime,
    policy: &BatchPolicy,
    device: &DeviceSpec,
    predictor: &mut Predictor,
) -> Option<SimTime> {
    let max_wait = SimTime::from_secs_f64(policy.max_wait);
    let mut oldest: BTreeMap<Option<GemmShape>, SimTime> = BTreeMap::new();
    let mut wake: Option<SimTime> = None;
    for r in &queue.pending {
        let key = (!policy.allow_variable_size).then_some(r.shape);
        oldest.entry(key).or_insert(r.enqueue_time);
        let predicted = inflated_prediction(predictor.predict(r.shape, device), policy);
        let critical = r.slo_deadline.saturating_sub(predicted);
        if critical > now {
            wake = Some(wake.map_or(critical, |w| w.min(critical)));
        }
    }
    for t in oldest.values() {
        let due = *t + max_wait;
        if due > now {
            wake = Some(wake.map_or(due, |w| w.min(due)));
        }
    }
    wake
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Planned super-kernel templates keyed by shape signature.
#[derive(Clone, Debug, Default)]
pub struct SuperKernelCache {
    entries: BTreeMap<String, KernelCost>,
    stats: CacheStats,
}

impl SuperKernelCache {
    pub fn new() -> SuperKernelCache {
        SuperKernelCache::default()
    }

    /// Returns `true` on a hit; inserts the template on a miss.
    pub fn lookup(&mut self, sk: &SuperKernel) -> bool {
        if self.entries.contains_key(&sk.shape_signature) {
            self.stats.hits += 1;
            true
        } else {
            self.entries.insert(sk.shape_signature.clone(), sk.planned_cost);
            self.stats.misses += 1;
            false
        }
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Launches a super-kernel as a single device invocation starting at `start`.
/// A cache miss pays the planning overhead.
pub fn dispatch(sk: &SuperKernel, cache: &mut SuperKernelCache, device: &DeviceSpec, start: SimTime) -> DispatchEvent {
    let hit = cache.lookup(sk);
    let planning = if hit { 0.0 } else { device.planning_overhead };
    DispatchEvent {
        start,
        end: start + SimTime::from_secs_f64(sk.planned_cost.duration + planning),
        launches: 1,
        member_requests: sk.member_ids(),
        policy: PolicyKind::SpaceTime,
        occupancy: sk.planned_cost.occupancy,
        context_switches: 0,
        flops: sk.planned_cost.flops,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TenantHealth {
    pub tenant_id: TenantId,
    /// Seconds.
    pub ewma_latency: f64,
    pub ewma_alpha: f64,
    pub observed_count: u32,
    pub evicted: bool,
}

impl TenantHealth {
    pub fn new(tenant_id: TenantId, ewma_alpha: f64) -> TenantHealth {
        TenantHealth {
            tenant_id,
            ewma_latency: 0.0,
            ewma_alpha,
            observed_count: 0,
            evicted: false,
        }
    }
}

pub fn record_latency(health: &mut TenantHealth, observed: f64) {
    debug_assert!(observed >= 0.0);
    health.ewma_latency = if health.observed_count == 0 {
        observed
    } else {
        health.ewma_alpha * observed + (1.0 - health.ewma_alpha) * health.ewma_latency
    };
    health.observed_count += 1;
}

/// Tenants whose latency EWMA exceeds `threshold_ratio` times the median of
/// their non-evicted peers.
pub fn detect_stragglers(healths: &[TenantHealth], threshold_ratio: f64, min_observations: u32) -> Vec<TenantId> {
    let mut live: Vec<f64> = healths
        .iter()
        .filter(|h| !h.evicted && h.observed_count > 0)
        .map(|h| h.ewma_latency)
        .collect();
    if live.len() < 2 {
        return Vec::new();
    }
    live.sort_by(f64::total_cmp);
    let mid = live.len() / 2;
    let median = if live.len().is_multiple_of(2) {
        0.5 * (live[mid - 1] + live[mid])
    } else {
        live[mid]
    };
    healths
        .iter()
        .filter(|h| !h.evicted && h.observed_count >= min_observations)
        .filter(|h| h.ewma_latency > threshold_ratio * median)
        .map(|h| h.tenant_id)
        .collect()
}

/// Scheduler state for one simulation: queue, cache, health and admission.
#[derive(Clone, Debug)]
pub struct SpaceTimeScheduler {
    pub policy: BatchPolicy,
    pub detector: DetectorParams,
    queue: RequestQueue,
    cache: SuperKernelCache,
    health: BTreeMap<TenantId, TenantHealth>,
    concurrency: BTreeMap<TenantId, u32>,
    predictor: Predictor,
}

impl SpaceTimeScheduler {
    /// `tenants` lists `(tenant_id, concurrency)`.
    pub fn new(config: &SchedulerConfig, tenants: impl IntoIterator<Item = (TenantId, u32)>) -> SpaceTimeScheduler {
        let detector = config.detector();
        let concurrency: BTreeMap<TenantId, u32> = tenants.into_iter().collect();
        let health = concurrency
            .keys()
            .map(|&t| (t, TenantHealth::new(t, detector.ewma_alpha)))
            .collect();
        SpaceTimeScheduler {
            policy: config.batch_policy(),
            detector,
            queue: RequestQueue::new(),
            cache: SuperKernelCache::new(),
            health,
            concurrency,
            predictor: Predictor::default(),
        }
    }

    pub fn is_evicted(&self, tenant: TenantId) -> bool {
        self.health.get(&tenant).is_some_and(|h| h.evicted)
    }

    pub fn enqueue(&mut self, request: KernelRequest) -> Result<()> {
        match self.health.get(&request.tenant_id) {
            None => Err(Error::UnknownTenant(request.tenant_id)),
            Some(h) if h.evicted => Err(Error::AlreadyEvicted(request.tenant_id)),
            Some(_) => self.queue.enqueue(request),
        }
    }

    pub fn queue(&self) -> &RequestQueue {
        &self.queue
    }

    fn capacity(&self) -> u32 {
        self.concurrency
            .iter()
            .filter(|(t, _)| !self.is_evicted(**t))
            .map(|(_, c)| *c)
            .sum()
    }

    pub fn form_batches(&mut self, now: SimTime, device: &DeviceSpec) -> Result<Vec<SuperKernel>> {
        let capacity = Some(self.capacity());
        form_batches_with(&mut self.queue, now, &self.policy, device, capacity, &mut self.predictor)
    }

    pub fn next_wakeup(&mut self, now: SimTime, device: &DeviceSpec) -> Option<SimTime> {
        next_wakeup(&self.queue, now, &self.policy, device, &mut self.predictor)
    }

    pub fn dispatch(&mut self, sk: &SuperKernel, device: &DeviceSpec, start: SimTime) -> DispatchEvent {
        dispatch(sk, &mut self.cache, device, start)
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats()
    }

    pub fn record_latency(&mut self, tenant: TenantId, observed: f64) {
        if let Some(h) = self.health.get_mut(&tenant) {
            record_latency(h, observed);
        }
    }

    pub fn health(&self) -> Vec<TenantHealth> {
        self.health.values().cloned().collect()
    }

    pub fn stragglers(&self) -> Vec<TenantId> {
        detect_stragglers(&self.health(), self.detector.threshold_ratio, self.detector.min_observations)
    }

    /// Marks `tenant` evicted and returns its cancelled pending requests.
    pub fn evict(&mut self, tenant: TenantId) -> Result<Vec<KernelRequest>> {
        let h = self.health.get_mut(&tenant).ok_or(Error::UnknownTenant(tenant))?;
        if h.evicted {
            return Err(Error::AlreadyEvicted(tenant));
        }
        h.evicted = true;
        Ok(self.queue.drain_tenant(tenant))
    }
}
