use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use stmux::experiment::{cell_config, MICROBENCH_CONFIG, MODELS_CONFIG};
use stmux::metrics::fairness_gap;
use stmux::scheduler::{form_batches, RequestQueue, SuperKernelCache};
use stmux::{
    aggregate, batch_inputs, config, dispatch_duration, gemm_bytes, gemm_flops, geomean, inject_degradation,
    memory_footprint, preset, run, thread_blocks, BatchPolicy, DeviceSpec, GemmShape, KernelRequest, PolicyKind,
    SharingMode, SimConfig, SimTime, Tenant, Trace,
};

fn shape() -> impl Strategy<Value = GemmShape> {
    (1u64..2048, 1u64..1024, 1u64..2048).prop_map(|(m, n, k)| GemmShape { m, n, k })
}

const MICRO: [&str; 3] = ["rnn-matvec", "resnet18-conv2_2", "square-256"];
const ALL_PRESETS: [&str; 5] = ["rnn-matvec", "resnet18-conv2_2", "square-256", "mobilenetv2", "resnet50"];

fn cell(workload: &str, policy: PolicyKind, r: u32, seed: u64, duration: f64) -> SimConfig {
    let p = preset(workload).unwrap();
    let text = if p.layers.len() == 1 { MICROBENCH_CONFIG } else { MODELS_CONFIG };
    let mut base = config::parse_config(text, &[], None).unwrap();
    base.duration = duration;
    base.warmup = 0.1 * duration;
    cell_config(&base, &p, policy, r, seed, None)
}

fn policy() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(PolicyKind::ALL.to_vec())
}

fn sharing() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(vec![
        PolicyKind::TimeMux,
        PolicyKind::SpaceImplicit,
        PolicyKind::SpaceExplicit,
        PolicyKind::SpaceTime,
    ])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn duration_exceeds_launch_overhead(s in shape(), count in 1u64..64, launches in 1u32..8) {
        let d = DeviceSpec::v100();
        let c = dispatch_duration(&[(s, count)], &d, d.slots(), launches).unwrap();
        prop_assert!(c.duration > launches as f64 * d.launch_overhead);
        prop_assert_eq!(c.waves, c.blocks.div_ceil(d.slots()));
    }

    #[test]
    fn wave_quantization(s in shape(), budget in 1u64..=160) {
        let d = DeviceSpec::v100();
        let b = thread_blocks(s, &d);
        let mut prev = 0.0;
        for r in 1..=64u64 {
            let c = dispatch_duration(&[(s, r)], &d, budget, 1).unwrap();
            let full = (r * b).is_multiple_of(budget);
            let eff = c.blocks as f64 / (c.waves * budget) as f64;
            prop_assert_eq!(eff == 1.0, full);
            prop_assert!(c.duration >= prev * (1.0 - 1e-12));
            prev = c.duration;
        }
    }

    #[test]
    fn super_kernel_throughput_saturates(s in shape()) {
        let d = DeviceSpec::v100();
        let b = thread_blocks(s, &d);
        let knee = (d.slots() / b).max(1);
        let mut prev = 0.0;
        for r in 1..=knee {
            let c = dispatch_duration(&[(s, r)], &d, d.slots(), 1).unwrap();
            let tp = c.flops as f64 / c.duration;
            prop_assert!(tp >= prev * (1.0 - 1e-12));
            prop_assert!(tp <= d.peak_flops);
            prev = tp;
        }
    }

    #[test]
    fn flops_linear_under_batching(s in shape(), b in 1u64..64) {
        prop_assert_eq!(gemm_flops(batch_inputs(s, b)), b * gemm_flops(s));
        let weights = 4 * s.k * s.n;
        prop_assert_eq!(gemm_bytes(batch_inputs(s, b), 4) - weights, b * (gemm_bytes(s, 4) - weights));
    }

    #[test]
    fn process_mode_costs_more_memory(n in 2u32..80, w in 0usize..5) {
        let d = DeviceSpec::v100();
        let tenants = preset(ALL_PRESETS[w]).unwrap().tenants(n);
        prop_assert!(
            memory_footprint(&tenants, SharingMode::ProcessPerTenant, &d)
                > memory_footprint(&tenants, SharingMode::SharedContext, &d)
        );
    }

    #[test]
    fn geomean_scales(xs in prop::collection::vec(1e-6f64..1e6, 1..40), scale in 1e-3f64..1e3) {
        let scaled: Vec<f64> = xs.iter().map(|x| x * scale).collect();
        let g = geomean(&xs);
        prop_assert!((geomean(&scaled) / (scale * g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fairness_ignores_labels(means in prop::collection::vec(1e-4f64..1.0, 1..30), seed in any::<u64>()) {
        let mut shuffled = means.clone();
        let mut state = seed;
        for i in (1..shuffled.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(fairness_gap(&means), fairness_gap(&shuffled));
    }

    #[test]
    fn fifo_within_group(
        arrivals in prop::collection::vec((0u64..5_000_000, 0usize..3, 0u32..4, 0u64..8_000_000), 1..60),
        target in 1u32..12,
        now_offset in 0u64..3_000_000,
    ) {
        let d = DeviceSpec::v100();
        let shapes = [
            GemmShape { m: 256, n: 128, k: 1152 },
            GemmShape { m: 512, n: 1, k: 512 },
            GemmShape { m: 256, n: 256, k: 256 },
        ];
        let mut q = RequestQueue::new();
        let mut last = 0;
        for (i, (t, s, tenant, slo)) in arrivals.iter().enumerate() {
            q.enqueue(KernelRequest {
                request_id: i as u64,
                tenant_id: *tenant,
                shape: shapes[*s],
                enqueue_time: SimTime(*t),
                slo_deadline: SimTime(t + slo + 1),
                layer_index: 0,
                pass_id: i as u64,
            }).unwrap();
            last = last.max(*t);
        }
        let policy = BatchPolicy { target_batch: target, ..BatchPolicy::default() };
        let formed = form_batches(&mut q, SimTime(last + now_offset), &policy, &d, None).unwrap();
        for sk in &formed {
            prop_assert!(!sk.members.is_empty() && sk.members.len() <= target as usize);
            prop_assert_eq!(sk.planned_cost.launches, 1);
            let newest = sk.members.iter().map(|m| m.enqueue_time).max().unwrap();
            for left in q.pending().iter().filter(|r| r.shape == sk.members[0].shape) {
                prop_assert!(newest <= left.enqueue_time);
            }
        }
    }

    #[test]
    fn cache_hit_rate_is_monotone(signatures in prop::collection::vec(0usize..4, 1..200)) {
        let d = DeviceSpec::v100();
        let shapes = [
            GemmShape { m: 256, n: 128, k: 1152 },
            GemmShape { m: 512, n: 1, k: 512 },
            GemmShape { m: 256, n: 256, k: 256 },
            GemmShape { m: 64, n: 64, k: 64 },
        ];
        let mut cache = SuperKernelCache::default();
        let policy = BatchPolicy { target_batch: 1, ..BatchPolicy::default() };
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in signatures.iter().enumerate() {
            let mut q = RequestQueue::new();
            q.enqueue(KernelRequest {
                request_id: i as u64,
                tenant_id: 0,
                shape: shapes[*s],
                enqueue_time: SimTime::ZERO,
                slo_deadline: SimTime(1_000_000_000),
                layer_index: 0,
                pass_id: i as u64,
            }).unwrap();
            let sk = form_batches(&mut q, SimTime::ZERO, &policy, &d, None).unwrap().remove(0);
            let hit = cache.lookup(&sk);
            prop_assert_eq!(hit, !seen.insert(*s));
            let st = cache.stats();
            prop_assert_eq!(st.hits + st.misses, i as u64 + 1);
        }
        prop_assert_eq!(cache.stats().misses, seen.len() as u64);
    }
}

fn check_trace(cfg: &SimConfig, t: &Trace) -> Result<(), TestCaseError> {
    let end = SimTime::from_secs_f64(cfg.duration);
    for w in t.events.windows(2) {
        prop_assert!(w[0].start <= w[1].start, "events out of order");
    }
    for e in &t.events {
        prop_assert!(e.end > e.start && e.launches >= 1 && !e.member_requests.is_empty());
        prop_assert!(e.occupancy > 0.0 && e.occupancy <= 1.0);
        let switch = SimTime::from_secs_f64(cfg.device.context_switch_overhead).nanos() * e.context_switches as u64;
        prop_assert!(e.start.nanos() - switch < end.nanos(), "dispatch after duration");
    }
    let event_flops: u64 = t.events.iter().map(|e| e.flops).sum();
    let kernel_flops: u64 = t.kernels.iter().map(|k| k.flops).sum();
    prop_assert_eq!(event_flops, kernel_flops);

    let mut by_pass: BTreeMap<u64, Vec<_>> = BTreeMap::new();
    for k in &t.kernels {
        prop_assert!(k.enqueue <= k.batched && k.batched <= k.dispatch && k.dispatch < k.complete);
        by_pass.entry(k.pass_id).or_default().push(k);
    }
    for ks in by_pass.values_mut() {
        ks.sort_by_key(|k| k.layer_index);
        for w in ks.windows(2) {
            prop_assert_eq!(w[1].layer_index, w[0].layer_index + 1);
            prop_assert!(w[1].enqueue >= w[0].complete, "layer dispatched before its predecessor completed");
        }
    }
    let slo: HashMap<u32, f64> = cfg.tenants.iter().map(|t| (t.tenant_id, t.slo_latency)).collect();
    let mut ids = std::collections::BTreeSet::new();
    for c in &t.completions {
        prop_assert!(ids.insert(c.request_id), "pass completed twice");
        prop_assert!(c.enqueue_time <= c.dispatch_time && c.dispatch_time < c.complete_time);
        prop_assert_eq!(c.slo_met, c.latency() <= SimTime::from_secs_f64(slo[&c.tenant_id]));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn traces_are_causal_and_conserve_work(
        w in 0usize..5, p in policy(), r in 1u32..10, seed in any::<u64>(), duration in 0.004f64..0.03,
    ) {
        let cfg = cell(ALL_PRESETS[w], p, r, seed, duration);
        let t = run(&cfg).unwrap();
        check_trace(&cfg, &t)?;
    }

    #[test]
    fn closed_loop_keeps_passes_in_flight(
        w in 0usize..3, p in sharing(), r in 1u32..8, conc in 1u32..4, seed in any::<u64>(),
    ) {
        let mut cfg = cell(MICRO[w], p, r, seed, 0.01);
        for t in &mut cfg.tenants {
            t.concurrency = conc;
        }
        let t = run(&cfg).unwrap();
        for tenant in &cfg.tenants {
            let id = tenant.tenant_id;
            let mut completions: Vec<SimTime> = t.completions.iter().filter(|c| c.tenant_id == id).map(|c| c.complete_time).collect();
            completions.sort();
            let mut starts: Vec<SimTime> = t.completions.iter().filter(|c| c.tenant_id == id).map(|c| c.enqueue_time).collect();
            starts.sort();
            let initial = starts.iter().take_while(|s| **s == SimTime::ZERO).count();
            prop_assert!(initial <= conc as usize);
            let mut pool = completions.clone();
            for s in &starts[initial..] {
                let pos = pool.iter().position(|c| c == s);
                prop_assert!(pos.is_some(), "pass started without a completion");
                pool.remove(pos.unwrap());
            }
            let started = conc as usize + completions.iter().filter(|c| **c < SimTime::from_secs_f64(cfg.duration)).count();
            prop_assert!(starts.len() <= started);
        }
    }

    #[test]
    fn serial_policies_never_idle(w in 0usize..5, exclusive in any::<bool>(), r in 1u32..8, seed in any::<u64>()) {
        let p = if exclusive { PolicyKind::Exclusive } else { PolicyKind::TimeMux };
        let cfg = cell(ALL_PRESETS[w], p, r, seed, 0.02);
        let t = run(&cfg).unwrap();
        let switch = SimTime::from_secs_f64(cfg.device.context_switch_overhead).nanos();
        for pair in t.events.windows(2) {
            prop_assert_eq!(pair[1].start.nanos(), pair[0].end.nanos() + switch * pair[1].context_switches as u64);
        }
    }

    #[test]
    fn spatial_rounds_share_a_window(w in 0usize..3, explicit in any::<bool>(), r in 1u32..12, seed in any::<u64>()) {
        let p = if explicit { PolicyKind::SpaceExplicit } else { PolicyKind::SpaceImplicit };
        let cfg = cell(MICRO[w], p, r, seed, 0.01);
        let t = run(&cfg).unwrap();
        let mut rounds: BTreeMap<SimTime, Vec<SimTime>> = BTreeMap::new();
        for e in &t.events {
            rounds.entry(e.start).or_default().push(e.end);
        }
        let mut prev_end = SimTime::ZERO;
        for (start, ends) in &rounds {
            prop_assert!(*start >= prev_end, "rounds overlap");
            prev_end = *ends.iter().max().unwrap();
        }
        if p == PolicyKind::SpaceImplicit {
            for ends in rounds.values() {
                prop_assert_eq!(ends.len(), r as usize);
            }
        }
    }

    #[test]
    fn runs_are_deterministic(w in 0usize..5, p in policy(), r in 1u32..6, seed in any::<u64>()) {
        let cfg = cell(ALL_PRESETS[w], p, r, seed, 0.01);
        prop_assert_eq!(run(&cfg).unwrap().to_ndjson(), run(&cfg).unwrap().to_ndjson());
    }

    #[test]
    fn equal_tenants_are_treated_equally(w in 0usize..5, p in sharing(), r in 2u32..8, seed in any::<u64>()) {
        let mut cfg = cell(ALL_PRESETS[w], p, r, seed, 0.2);
        cfg.warmup = 0.1;
        cfg.policy_params.fairness_gap_even = 0.0;
        cfg.policy_params.fairness_gap_odd = 0.0;
        cfg.scheduler.target_batch = r;
        let m = aggregate(&run(&cfg).unwrap(), &cfg).unwrap();
        let means: Vec<f64> = m.tenant_means.iter().map(|t| t.1).collect();
        prop_assert_eq!(means.len(), r as usize);
        prop_assert!(m.fairness_gap < 1e-3, "gap {}", m.fairness_gap);
    }

    #[test]
    fn exclusive_bounds_throughput(w in 0usize..3, p in policy(), r in 1u32..60, seed in any::<u64>()) {
        let d = DeviceSpec::v100();
        let layer = preset(MICRO[w]).unwrap().layers[0];
        let per = thread_blocks(layer, &d);
        let first_wave = d.slots().div_ceil(per);
        let best = (first_wave..=4 * first_wave)
            .map(|b| {
                let c = dispatch_duration(&[(batch_inputs(layer, b), 1)], &d, d.slots(), 1).unwrap();
                c.flops as f64 / c.duration
            })
            .fold(0.0, f64::max);
        let cfg = cell(MICRO[w], p, r, seed, 0.01);
        let t = run(&cfg).unwrap();
        let flops: u64 = t.events.iter().map(|e| e.flops).sum();
        let span = (t.events.iter().map(|e| e.end).max().unwrap() - t.events[0].start).as_secs_f64();
        prop_assert!(flops as f64 / span <= best * (1.0 + 1e-9), "{} > {}", flops as f64 / span, best);
    }

    #[test]
    fn aggregate_ignores_record_order(w in 0usize..5, p in policy(), r in 1u32..6, seed in any::<u64>()) {
        let cfg = cell(ALL_PRESETS[w], p, r, seed, 0.02);
        let t = run(&cfg).unwrap();
        let mut shuffled = t.clone();
        shuffled.completions.reverse();
        shuffled.events.reverse();
        let n = shuffled.completions.len();
        shuffled.completions.rotate_left((seed % n.max(1) as u64) as usize);
        prop_assert_eq!(aggregate(&t, &cfg).unwrap(), aggregate(&shuffled, &cfg).unwrap());
    }

    #[test]
    fn throughput_is_additive_over_windows(w in 0usize..3, p in sharing(), r in 1u32..10, seed in any::<u64>()) {
        let mut cfg = cell(MICRO[w], p, r, seed, 0.02);
        cfg.warmup = 0.0;
        let t = run(&cfg).unwrap();
        let (a, mid, c) = (2_000_000u64, 11_000_000u64, 20_000_000u64);
        prop_assume!(t.completions.iter().all(|x| x.complete_time != SimTime(mid)));
        let at = |lo: u64, hi: u64| {
            let mut k = cfg.clone();
            k.warmup = lo as f64 * 1e-9;
            k.duration = hi as f64 * 1e-9;
            aggregate(&t, &k).map(|m| m.throughput_gflops)
        };
        if let (Ok(x), Ok(y), Ok(both)) = (at(a, mid), at(mid, c), at(a, c)) {
            prop_assert!((both / ((x + y) / 2.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eviction_stops_dispatch(r in 3u32..10, victim in 0u32..3, seed in any::<u64>()) {
        let cfg = cell("resnet18-conv2_2", PolicyKind::SpaceTime, r, seed, 0.03);
        let cfg = inject_degradation(&cfg, victim, 3.0, 0.002).unwrap();
        let t = run(&cfg).unwrap();
        prop_assert_eq!(t.evictions.len(), 1);
        let at = t.evictions[0].time;
        let enqueued: HashMap<u64, (u32, SimTime)> = t.kernels.iter().map(|k| (k.request_id, (k.tenant_id, k.enqueue))).collect();
        for e in &t.events {
            for id in &e.member_requests {
                let (tenant, enq) = enqueued[id];
                prop_assert!(!(tenant == victim && enq > at));
            }
        }
    }
}

#[test]
fn memory_admission_matches_footprint() {
    let d = DeviceSpec::v100();
    let p = preset("resnet50").unwrap();
    for n in 1..=80u32 {
        let tenants: Vec<Tenant> = p.tenants(n);
        for policy in [PolicyKind::SpaceImplicit, PolicyKind::SpaceExplicit] {
            let need = memory_footprint(&tenants, policy.sharing_mode(), &d);
            let cfg = cell("resnet50", policy, n, 0, 0.001);
            let refused = matches!(run(&cfg), Err(stmux::Error::OutOfMemory { .. }));
            assert_eq!(refused, need > d.mem_capacity, "{policy} n={n}");
        }
    }
}
