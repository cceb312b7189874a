//! Deterministic discrete-event simulation of closed-loop tenants sharing one
//! device under a chosen policy.
//!
//! Virtual time is an integer nanosecond count. Every event that falls on the
//! same instant is applied before the policy is asked to schedule, and ties in
//! the event queue break by `(time, tenant_id, request_id)`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{batch_inputs, dispatch_duration, single_kernel_cost, DeviceSpec, SharingMode};
use crate::error::{Error, Result};
use crate::policy::{
    admit, exclusive_dispatch, space_explicit_round, space_implicit_round, time_mux_step, DispatchEvent,
    PolicyKind, PolicyParams, ReadyKernel, RequestId, RoundRobin, SpatialRound,
};
use crate::scheduler::{CacheStats, KernelRequest, SchedulerConfig, SpaceTimeScheduler, SuperKernel};
use crate::time::SimTime;
use crate::workload::{Tenant, TenantId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Each tenant runs whole forward passes, layer by layer.
    #[default]
    ForwardPass,
    /// Each tenant repeatedly issues one SGEMM whose operands already sit in
    /// a shared device allocation.
    Microbench,
}

/// Tenant-local slowdown of observed kernel completions from `start` on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Degradation {
    pub tenant_id: TenantId,
    pub slowdown: f64,
    /// Seconds.
    pub start: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub device: DeviceSpec,
    pub policy: PolicyKind,
    pub policy_params: PolicyParams,
    pub scheduler: SchedulerConfig,
    pub tenants: Vec<Tenant>,
    /// Seconds.
    pub duration: f64,
    /// Seconds excluded from metric windows.
    pub warmup: f64,
    pub seed: u64,
    pub mode: SimMode,
    pub degradations: Vec<Degradation>,
}

impl SimConfig {
    /// Defaults everywhere else; warmup is 10% of `duration`.
    pub fn new(device: DeviceSpec, policy: PolicyKind, tenants: Vec<Tenant>, duration: f64) -> SimConfig {
        SimConfig {
            device,
            policy,
            policy_params: PolicyParams::default(),
            scheduler: SchedulerConfig::default(),
            tenants,
            duration,
            warmup: 0.1 * duration,
            seed: 0,
            mode: SimMode::ForwardPass,
            degradations: Vec::new(),
        }
    }

    pub fn sharing_mode(&self) -> SharingMode {
        match self.mode {
            SimMode::Microbench => SharingMode::SharedContext,
            SimMode::ForwardPass => self.policy.sharing_mode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.policy_params.validate()?;
        self.scheduler.validate()?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("sim.duration", "must be > 0"));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.duration) {
            return Err(Error::config("sim.warmup", "need 0 <= warmup < duration"));
        }
        let Some(first) = self.tenants.first() else {
            return Err(Error::config("tenants", "must be non-empty"));
        };
        let mut ids = BTreeSet::new();
        for t in &self.tenants {
            t.validate()?;
            if !ids.insert(t.tenant_id) {
                return Err(Error::config(format!("tenants[{}].tenant_id", t.tenant_id), "duplicate id"));
            }
            if t.layers != first.layers {
                return Err(Error::config(
                    format!("tenants[{}].layers", t.tenant_id),
                    "all tenants must share the same layers",
                ));
            }
        }
        if self.policy == PolicyKind::Exclusive && self.tenants.len() != 1 {
            return Err(Error::ExclusiveRequiresSingleTenant(self.tenants.len()));
        }
        for d in &self.degradations {
            if !ids.contains(&d.tenant_id) {
                return Err(Error::UnknownTenant(d.tenant_id));
            }
            if !(d.slowdown >= 1.0 && d.slowdown.is_finite()) {
                return Err(Error::config("sim.degradations.slowdown", "must be >= 1"));
            }
            if d.start.is_nan() || d.start < 0.0 {
                return Err(Error::config("sim.degradations.start", "must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub request_id: RequestId,
    pub tenant_id: TenantId,
    pub pass_id: u64,
    pub layer_index: u32,
    pub flops: u64,
    pub enqueue: SimTime,
    /// When the request left the queue (formed into a batch, or dispatched).
    pub batched: SimTime,
    pub dispatch: SimTime,
    /// Completion as observed by the tenant.
    pub complete: SimTime,
}

/// One forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestLifecycle {
    pub request_id: u64,
    pub tenant_id: TenantId,
    pub enqueue_time: SimTime,
    pub dispatch_time: SimTime,
    pub complete_time: SimTime,
    pub slo_met: bool,
    pub flops: u64,
}

impl RequestLifecycle {
    pub fn latency(&self) -> SimTime {
        self.complete_time - self.enqueue_time
    }
}

/// A forward pass abandoned because its tenant was evicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cancellation {
    pub request_id: u64,
    pub tenant_id: TenantId,
    pub time: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eviction {
    pub tenant_id: TenantId,
    pub time: SimTime,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config_echo: SimConfig,
    pub events: Vec<DispatchEvent>,
    pub kernels: Vec<KernelRecord>,
    pub completions: Vec<RequestLifecycle>,
    pub cancellations: Vec<Cancellation>,
    pub evictions: Vec<Eviction>,
    pub peak_memory: u64,
    pub cache_stats: CacheStats,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line<'a> {
    Config(&'a SimConfig),
    Dispatch(&'a DispatchEvent),
    Kernel(&'a KernelRecord),
    Complete(&'a RequestLifecycle),
    Cancel(&'a Cancellation),
    Evict(&'a Eviction),
    Summary { peak_memory: u64, cache_hits: u64, cache_misses: u64 },
}

impl Trace {
    /// One JSON object per line.
    pub fn write_ndjson<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = |l: Line| -> Result<()> {
            serde_json::to_writer(&mut out, &l)?;
            out.write_all(b"\n")?;
            Ok(())
        };
        line(Line::Config(&self.config_echo))?;
        for e in &self.events {
            line(Line::Dispatch(e))?;
        }
        for k in &self.kernels {
            line(Line::Kernel(k))?;
        }
        for c in &self.completions {
            line(Line::Complete(c))?;
        }
        for c in &self.cancellations {
            line(Line::Cancel(c))?;
        }
        for e in &self.evictions {
            line(Line::Evict(e))?;
        }
        line(Line::Summary {
            peak_memory: self.peak_memory,
            cache_hits: self.cache_stats.hits,
            cache_misses: self.cache_stats.misses,
        })
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save_ndjson(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ndjson(file)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EvKind {
    KernelDone,
    DeviceFree,
    Wakeup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Ev {
    time: SimTime,
    tenant: TenantId,
    request: RequestId,
    seq: u64,
    kind: EvKind,
}

struct Kernel {
    tenant_id: TenantId,
    pass_id: u64,
    layer_index: u32,
    enqueue: SimTime,
    batched: SimTime,
    dispatch: SimTime,
    flops: u64,
}

struct Pass {
    tenant_id: TenantId,
    start: SimTime,
    first_dispatch: Option<SimTime>,
    flops: u64,
}

struct TenantState {
    tenant: Tenant,
    evicted: bool,
    /// Per-layer share of the pass SLO.
    layer_budget: Vec<SimTime>,
    slo: SimTime,
    degradations: Vec<(SimTime, f64)>,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    end: SimTime,
    now: SimTime,
    heap: BinaryHeap<Reverse<Ev>>,
    seq: u64,
    next_request: RequestId,
    next_pass: u64,
    tenants: Vec<TenantState>,
    index: BTreeMap<TenantId, usize>,
    inflight: HashMap<RequestId, Kernel>,
    passes: BTreeMap<u64, Pass>,
    ready: Vec<ReadyKernel>,
    busy: bool,
    rr: RoundRobin,
    rng: ChaCha8Rng,
    st: Option<SpaceTimeScheduler>,
    fifo: VecDeque<SuperKernel>,
    wakeups: BTreeSet<SimTime>,
    trace: Trace,
}

/// Runs one simulation to completion.
pub fn run(config: &SimConfig) -> Result<Trace> {
    config.validate()?;
    let peak_memory = admit(&config.tenants, config.sharing_mode(), &config.device)?;
    let mut engine = Engine::new(config, peak_memory);
    engine.run()?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig, peak_memory: u64) -> Engine<'a> {
        let device = &cfg.device;
        let tenants: Vec<TenantState> = cfg
            .tenants
            .iter()
            .map(|t| {
                let predicted: Vec<f64> = t.layers.iter().map(|s| single_kernel_cost(*s, device).duration).collect();
                let total: f64 = predicted.iter().sum();
                let layer_budget = predicted
                    .iter()
                    .map(|p| SimTime::from_secs_f64(t.slo_latency * p / total))
                    .collect();
                let degradations = cfg
                    .degradations
                    .iter()
                    .filter(|d| d.tenant_id == t.tenant_id)
                    .map(|d| (SimTime::from_secs_f64(d.start), d.slowdown))
                    .collect();
                TenantState {
                    tenant: t.clone(),
                    evicted: false,
                    layer_budget,
                    slo: SimTime::from_secs_f64(t.slo_latency),
                    degradations,
                }
            })
            .collect();
        let index = tenants
            .iter()
            .enumerate()
            .map(|(i, t)| (t.tenant.tenant_id, i))
            .collect();
        let st = (cfg.policy == PolicyKind::SpaceTime).then(|| {
            SpaceTimeScheduler::new(
                &cfg.scheduler,
                cfg.tenants.iter().map(|t| (t.tenant_id, t.concurrency)),
            )
        });
        Engine {
            cfg,
            end: SimTime::from_secs_f64(cfg.duration),
            now: SimTime::ZERO,
            heap: BinaryHeap::new(),
            seq: 0,
            next_request: 0,
            next_pass: 0,
            tenants,
            index,
            inflight: HashMap::new(),
            passes: BTreeMap::new(),
            ready: Vec::new(),
            busy: false,
            rr: RoundRobin::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.policy_params.rng_seed.unwrap_or(cfg.seed)),
            st,
            fifo: VecDeque::new(),
            wakeups: BTreeSet::new(),
            trace: Trace {
                config_echo: cfg.clone(),
                events: Vec::new(),
                kernels: Vec::new(),
                completions: Vec::new(),
                cancellations: Vec::new(),
                evictions: Vec::new(),
                peak_memory,
                cache_stats: CacheStats::default(),
            },
        }
    }

    fn finish(mut self) -> Trace {
        if let Some(st) = &self.st {
            self.trace.cache_stats = st.cache_stats();
        }
        self.trace
    }

    fn push(&mut self, time: SimTime, tenant: TenantId, request: RequestId, kind: EvKind) {
        self.seq += 1;
        self.heap.push(Reverse(Ev {
            time,
            tenant,
            request,
            seq: self.seq,
            kind,
        }));
    }

    fn run(&mut self) -> Result<()> {
        for i in 0..self.tenants.len() {
            for _ in 0..self.tenants[i].tenant.concurrency {
                self.start_pass(i)?;
            }
        }
        self.after_instant()?;
        while let Some(Reverse(ev)) = self.heap.pop() {
            self.now = ev.time;
            self.handle(ev)?;
            while let Some(Reverse(next)) = self.heap.peek().copied() {
                if next.time != self.now {
                    break;
                }
                self.heap.pop();
                self.handle(next)?;
            }
            self.after_instant()?;
        }
        Ok(())
    }

    fn start_pass(&mut self, idx: usize) -> Result<()> {
        let pass_id = self.next_pass;
        self.next_pass += 1;
        let tenant_id = self.tenants[idx].tenant.tenant_id;
        self.passes.insert(
            pass_id,
            Pass {
                tenant_id,
                start: self.now,
                first_dispatch: None,
                flops: 0,
            },
        );
        self.enqueue_kernel(idx, pass_id, 0)
    }

    fn enqueue_kernel(&mut self, idx: usize, pass_id: u64, layer: usize) -> Result<()> {
        let request_id = self.next_request;
        self.next_request += 1;
        let ts = &self.tenants[idx];
        let shape = ts.tenant.layers[layer];
        let tenant_id = ts.tenant.tenant_id;
        self.inflight.insert(
            request_id,
            Kernel {
                tenant_id,
                pass_id,
                layer_index: layer as u32,
                enqueue: self.now,
                batched: SimTime::MAX,
                dispatch: SimTime::MAX,
                flops: 0,
            },
        );
        match &mut self.st {
            Some(st) => st.enqueue(KernelRequest {
                request_id,
                tenant_id,
                shape,
                enqueue_time: self.now,
                slo_deadline: self.now + ts.layer_budget[layer],
                layer_index: layer as u32,
                pass_id,
            })?,
            None => self.ready.push(ReadyKernel {
                request_id,
                tenant_id,
                pass_id,
                layer_index: layer as u32,
                shape,
                enqueue_time: self.now,
            }),
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev.kind {
            EvKind::DeviceFree => self.busy = false,
            EvKind::Wakeup => {
                self.wakeups.remove(&ev.time);
            }
            EvKind::KernelDone => self.kernel_done(ev.request)?,
        }
        Ok(())
    }

    fn kernel_done(&mut self, request_id: RequestId) -> Result<()> {
        let k = self.inflight.remove(&request_id).expect("completed kernel is in flight");
        self.trace.kernels.push(KernelRecord {
            request_id,
            tenant_id: k.tenant_id,
            pass_id: k.pass_id,
            layer_index: k.layer_index,
            flops: k.flops,
            enqueue: k.enqueue,
            batched: k.batched,
            dispatch: k.dispatch,
            complete: self.now,
        });
        if let Some(st) = &mut self.st {
            st.record_latency(k.tenant_id, (self.now - k.dispatch).as_secs_f64());
        }
        let idx = self.index[&k.tenant_id];
        if self.tenants[idx].evicted {
            return Ok(());
        }
        let pass = self.passes.get_mut(&k.pass_id).expect("live pass");
        pass.flops += k.flops;
        let next = k.layer_index as usize + 1;
        if next < self.tenants[idx].tenant.layers.len() {
            return self.enqueue_kernel(idx, k.pass_id, next);
        }
        let pass = self.passes.remove(&k.pass_id).expect("live pass");
        let latency = self.now - pass.start;
        self.trace.completions.push(RequestLifecycle {
            request_id: k.pass_id,
            tenant_id: pass.tenant_id,
            enqueue_time: pass.start,
            dispatch_time: pass.first_dispatch.expect("dispatched"),
            complete_time: self.now,
            slo_met: latency <= self.tenants[idx].slo,
            flops: pass.flops,
        });
        if self.now < self.end {
            self.start_pass(idx)?;
        }
        Ok(())
    }

    fn after_instant(&mut self) -> Result<()> {
        if let Some(st) = &self.st {
            if st.detector.evict_stragglers {
                for t in st.stragglers() {
                    self.evict(t)?;
                }
            }
        }
        if self.now < self.end {
            self.schedule()?;
        }
        Ok(())
    }

    /// Completion time seen by the tenant, stretched if it is degraded.
    fn observed(&self, tenant: TenantId, start: SimTime, done: SimTime) -> SimTime {
        let ts = &self.tenants[self.index[&tenant]];
        let factor: f64 = ts
            .degradations
            .iter()
            .filter(|(from, _)| start >= *from)
            .map(|(_, s)| *s)
            .product();
        if factor == 1.0 {
            return done;
        }
        start + SimTime(((done - start).0 as f64 * factor).round() as u64)
    }

    fn mark_dispatched(&mut self, request_id: RequestId, start: SimTime, flops: u64) {
        let k = self.inflight.get_mut(&request_id).expect("dispatched kernel is in flight");
        if k.batched == SimTime::MAX {
            k.batched = self.now;
        }
        k.dispatch = start;
        k.flops = flops;
        let pass = self.passes.get_mut(&k.pass_id).expect("live pass");
        pass.first_dispatch.get_or_insert(start);
    }

    fn take_ready(&mut self, ids: &BTreeSet<RequestId>) {
        self.ready.retain(|k| !ids.contains(&k.request_id));
    }

    fn commit_single(&mut self, kernel: ReadyKernel, ev: DispatchEvent) {
        self.take_ready(&BTreeSet::from([kernel.request_id]));
        self.mark_dispatched(kernel.request_id, ev.start, ev.flops);
        let seen = self.observed(kernel.tenant_id, ev.start, ev.end);
        self.push(seen, kernel.tenant_id, kernel.request_id, EvKind::KernelDone);
        self.push(ev.end, TenantId::MAX, RequestId::MAX, EvKind::DeviceFree);
        self.busy = true;
        self.trace.events.push(ev);
    }

    fn schedule(&mut self) -> Result<()> {
        let device = &self.cfg.device;
        let params = &self.cfg.policy_params;
        match self.cfg.policy {
            PolicyKind::Exclusive => {
                if self.busy {
                    return Ok(());
                }
                let Some(kernel) = self.ready.iter().min_by_key(|k| (k.enqueue_time, k.request_id)).copied() else {
                    return Ok(());
                };
                let ev = exclusive_dispatch(&kernel, params, device, self.now)?;
                self.commit_single(kernel, ev);
            }
            PolicyKind::TimeMux => {
                if self.busy {
                    return Ok(());
                }
                let Some(step) = time_mux_step(&mut self.rr, &self.ready, self.now, params, device)? else {
                    return Ok(());
                };
                let kernel = *self
                    .ready
                    .iter()
                    .find(|k| k.request_id == step.request_id)
                    .expect("chosen kernel is ready");
                self.commit_single(kernel, step.event);
            }
            kind @ (PolicyKind::SpaceImplicit | PolicyKind::SpaceExplicit) => {
                if self.busy || self.ready.is_empty() {
                    return Ok(());
                }
                let round: SpatialRound = if kind == PolicyKind::SpaceImplicit {
                    space_implicit_round(&self.ready, params, device, &mut self.rng, self.now)?
                } else {
                    space_explicit_round(&self.ready, params, device, &mut self.rng, self.now)?
                };
                let ids: BTreeSet<RequestId> = round.completions.iter().map(|c| c.0).collect();
                for (ev, (request_id, done)) in round.events.iter().zip(&round.completions) {
                    self.mark_dispatched(*request_id, ev.start, ev.flops);
                    let tenant = self.inflight[request_id].tenant_id;
                    let seen = self.observed(tenant, ev.start, *done);
                    self.push(seen, tenant, *request_id, EvKind::KernelDone);
                }
                self.take_ready(&ids);
                self.push(round.end, TenantId::MAX, RequestId::MAX, EvKind::DeviceFree);
                self.busy = true;
                self.trace.events.extend(round.events);
            }
            PolicyKind::SpaceTime => self.schedule_space_time()?,
        }
        Ok(())
    }

    fn schedule_space_time(&mut self) -> Result<()> {
        let device = &self.cfg.device;
        let now = self.now;
        let st = self.st.as_mut().expect("space-time scheduler");
        let formed = st.form_batches(now, device)?;
        for sk in &formed {
            for m in &sk.members {
                self.inflight.get_mut(&m.request_id).expect("queued kernel").batched = now;
            }
        }
        self.fifo.extend(formed);
        if !self.busy {
            if let Some(sk) = self.fifo.pop_front() {
                let st = self.st.as_mut().expect("space-time scheduler");
                let ev = st.dispatch(&sk, device, now);
                for m in &sk.members {
                    let flops = crate::cost::gemm_flops(m.shape);
                    self.mark_dispatched(m.request_id, ev.start, flops);
                    let seen = self.observed(m.tenant_id, ev.start, ev.end);
                    self.push(seen, m.tenant_id, m.request_id, EvKind::KernelDone);
                }
                self.push(ev.end, TenantId::MAX, RequestId::MAX, EvKind::DeviceFree);
                self.busy = true;
                self.trace.events.push(ev);
            }
        }
        let st = self.st.as_mut().expect("space-time scheduler");
        if let Some(wake) = st.next_wakeup(now, device) {
            if self.wakeups.insert(wake) {
                self.push(wake, TenantId::MAX, RequestId::MAX, EvKind::Wakeup);
            }
        }
        Ok(())
    }

    fn evict(&mut self, tenant: TenantId) -> Result<()> {
        let st = self.st.as_mut().expect("space-time scheduler");
        if st.is_evicted(tenant) {
            return Ok(());
        }
        let mut dropped: Vec<RequestId> = st.evict(tenant)?.iter().map(|r| r.request_id).collect();
        let policy = st.policy.clone();
        let mut fifo = VecDeque::new();
        for sk in std::mem::take(&mut self.fifo) {
            if sk.members.iter().all(|m| m.tenant_id != tenant) {
                fifo.push_back(sk);
                continue;
            }
            let (gone, keep): (Vec<_>, Vec<_>) = sk.members.into_iter().partition(|m| m.tenant_id == tenant);
            dropped.extend(gone.iter().map(|m| m.request_id));
            if !keep.is_empty() {
                fifo.push_back(SuperKernel::plan(keep, &policy, &self.cfg.device)?);
            }
        }
        self.fifo = fifo;
        for id in dropped {
            self.inflight.remove(&id);
        }
        let idx = self.index[&tenant];
        self.tenants[idx].evicted = true;
        let now = self.now;
        let cancelled: Vec<u64> = self
            .passes
            .iter()
            .filter(|(_, p)| p.tenant_id == tenant)
            .map(|(id, _)| *id)
            .collect();
        for pass_id in cancelled {
            self.passes.remove(&pass_id);
            self.trace.cancellations.push(Cancellation {
                request_id: pass_id,
                tenant_id: tenant,
                time: now,
            });
        }
        self.trace.evictions.push(Eviction { tenant_id: tenant, time: now });
        Ok(())
    }
}

/// Closed-form steady-state prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OraclePrediction {
    /// Forward-pass latency, seconds.
    pub latency: f64,
    /// FLOP/s across all tenants.
    pub throughput: f64,
}

/// Steady-state latency and throughput without running the event loop.
///
/// Supported: every tenant runs one identical single-layer pass with
/// concurrency 1, no degradations, under exclusive access, time multiplexing,
/// or space-time scheduling with a target batch covering all tenants.
pub fn analytic_oracle(config: &SimConfig) -> Result<OraclePrediction> {
    let unsupported = |why: &str| Err(Error::UnsupportedOracle(why.to_string()));
    let Some(first) = config.tenants.first() else {
        return unsupported("no tenants");
    };
    if first.layers.len() != 1 {
        return unsupported("tenants must run a single layer");
    }
    if config.tenants.iter().any(|t| t.layers != first.layers || t.concurrency != 1) {
        return unsupported("tenants must be identical with concurrency 1");
    }
    if !config.degradations.is_empty() {
        return unsupported("degradations");
    }
    let shape = first.layers[0];
    let r = config.tenants.len() as u64;
    let device = &config.device;
    let ns = SimTime::from_secs_f64;
    let flops = crate::cost::gemm_flops(shape) as f64;
    let (latency, passes_per_cycle, flops_per_pass) = match config.policy {
        PolicyKind::Exclusive => {
            if r != 1 {
                return unsupported("exclusive needs one tenant");
            }
            let b = config.policy_params.batch_size;
            let cost = dispatch_duration(&[(batch_inputs(shape, b), 1)], device, device.slots(), 1)?;
            (ns(cost.duration), 1.0, cost.flops as f64)
        }
        PolicyKind::TimeMux => {
            let t = ns(single_kernel_cost(shape, device).duration);
            if r == 1 {
                (t, 1.0, flops)
            } else {
                let c = ns(device.context_switch_overhead);
                (SimTime(r * (t.0 + c.0)), r as f64, flops)
            }
        }
        PolicyKind::SpaceTime => {
            if (config.scheduler.target_batch as u64) < r {
                return unsupported("target batch smaller than tenant count");
            }
            let cost = dispatch_duration(&[(shape, r)], device, device.slots(), 1)?;
            (ns(cost.duration), r as f64, flops)
        }
        other => return unsupported(&format!("policy {other}")),
    };
    let latency = latency.as_secs_f64();
    Ok(OraclePrediction {
        latency,
        throughput: passes_per_cycle * flops_per_pass / latency,
    })
}

/// Returns `config` with `tenant`'s observed kernel completions stretched by
/// `slowdown` from `start` seconds on.
pub fn inject_degradation(config: &SimConfig, tenant: TenantId, slowdown: f64, start: f64) -> Result<SimConfig> {
    if !config.tenants.iter().any(|t| t.tenant_id == tenant) {
        return Err(Error::UnknownTenant(tenant));
    }
    if !(slowdown >= 1.0 && slowdown.is_finite()) {
        return Err(Error::config("sim.degradations.slowdown", "must be >= 1"));
    }
    let mut out = config.clone();
    out.degradations.push(Degradation {
        tenant_id: tenant,
        slowdown,
        start,
    });
    Ok(out)
}
