//! Analytic GPU cost model.
//!
//! Kernels are tiled GEMMs. A dispatch of one or more GEMM problems occupies
//! `ceil(m / tile_m) * ceil(n / tile_n)` thread blocks per problem, executed in
//! waves over a slot budget of `sm_count * blocks_per_sm` concurrent blocks.
//! Duration follows a roofline: compute throughput is discounted by the
//! fraction of slots left empty in the quantized waves, memory traffic is not.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::Tenant;

/// Single precision everywhere.
pub const ELEMENT_SIZE: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub n: u64,
    pub k: u64,
}

impl GemmShape {
    pub fn new(m: u64, n: u64, k: u64) -> Result<GemmShape> {
        let shape = GemmShape { m, n, k };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::InvalidShape(format!(
                "{self} has a zero dimension"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for GemmShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.n, self.k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub image_h: u64,
    pub image_w: u64,
    pub kernel_h: u64,
    pub kernel_w: u64,
    pub in_channels: u64,
    pub out_channels: u64,
    pub stride: u64,
    pub padding: u64,
}

impl ConvSpec {
    /// Square image, square filter.
    pub fn square(image: u64, kernel: u64, in_channels: u64, out_channels: u64, stride: u64, padding: u64) -> ConvSpec {
        ConvSpec {
            image_h: image,
            image_w: image,
            kernel_h: kernel,
            kernel_w: kernel,
            in_channels,
            out_channels,
            stride,
            padding,
        }
    }

    /// Output spatial size `(out_h, out_w)`.
    pub fn output_dims(&self) -> Result<(u64, u64)> {
        let fields = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("stride", self.stride),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConv(format!("{name} must be >= 1")));
        }
        let out = |image: u64, kernel: u64| -> Result<u64> {
            let padded = image + 2 * self.padding;
            if padded < kernel {
                return Err(Error::InvalidConv(format!(
                    "filter {kernel} larger than padded input {padded}"
                )));
            }
            Ok((padded - kernel) / self.stride + 1)
        };
        Ok((out(self.image_h, self.kernel_h)?, out(self.image_w, self.kernel_w)?))
    }
}

/// Calibrated analytic device. Loaded from JSON with exactly these keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub peak_flops: f64,
    pub mem_bandwidth: f64,
    pub sm_count: u32,
    pub blocks_per_sm: u32,
    pub launch_overhead: f64,
    pub context_switch_overhead: f64,
    pub planning_overhead: f64,
    pub mem_capacity: u64,
    pub process_context_bytes: u64,
    pub tile_m: u64,
    pub tile_n: u64,
    pub space_sched_penalty: f64,
    pub launch_serialization: f64,
}

/// The shipped `v100` profile.
const V100_JSON: &str = include_str!("../profiles/v100.json");

impl DeviceSpec {
    /// Default calibrated profile.
    pub fn v100() -> DeviceSpec {
        DeviceSpec::from_json(V100_JSON).expect("shipped v100 profile is valid")
    }

    /// Resolves a built-in profile by name.
    pub fn builtin(name: &str) -> Option<DeviceSpec> {
        match name {
            "v100" => Some(DeviceSpec::v100()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<DeviceSpec> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: DeviceSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::config(format!("device.{key}"), e.into_inner().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<DeviceSpec> {
        DeviceSpec::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("device spec serializes")
    }

    pub fn slots(&self) -> u64 {
        self.sm_count as u64 * self.blocks_per_sm as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidDevice(what.to_string()));
        if !(self.peak_flops > 0.0 && self.peak_flops.is_finite()) {
            return bad("peak_flops must be > 0");
        }
        if !(self.mem_bandwidth > 0.0 && self.mem_bandwidth.is_finite()) {
            return bad("mem_bandwidth must be > 0");
        }
        if self.slots() == 0 {
            return bad("sm_count * blocks_per_sm must be >= 1");
        }
        if self.tile_m == 0 || self.tile_n == 0 {
            return bad("tile dimensions must be >= 1");
        }
        for (name, v) in [
            ("launch_overhead", self.launch_overhead),
            ("context_switch_overhead", self.context_switch_overhead),
            ("planning_overhead", self.planning_overhead),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidDevice(format!("{name} must be >= 0")));
            }
        }
        if !(self.space_sched_penalty >= 1.0 && self.space_sched_penalty.is_finite()) {
            return bad("space_sched_penalty must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.launch_serialization) {
            return bad("launch_serialization must be in [0, 1]");
        }
        Ok(())
    }
}

/// Cost of one dispatch (one or more launches covering a set of GEMMs).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCost {
    pub flops: u64,
    pub bytes: u64,
    pub blocks: u64,
    pub waves: u64,
    pub launches: u32,
    /// Seconds.
    pub duration: f64,
    /// Resident blocks over the whole device's slots, in (0, 1].
    pub occupancy: f64,
}

pub fn gemm_flops(shape: GemmShape) -> u64 {
    2 * shape.m * shape.n * shape.k
}

pub fn gemm_bytes(shape: GemmShape, element_size: u64) -> u64 {
    element_size * (shape.m * shape.k + shape.k * shape.n + shape.m * shape.n)
}

pub fn thread_blocks(shape: GemmShape, device: &DeviceSpec) -> u64 {
    shape.m.div_ceil(device.tile_m) * shape.n.div_ceil(device.tile_n)
}

/// Roofline duration of `kernels` (shape, multiplicity) sharing one slot budget.
///
/// With `slot_budget` below the device total the dispatch runs inside a
/// static partition and sees that fraction of peak compute and bandwidth.
/// At the full budget this is exactly
/// `launches * launch_overhead + max(F / (peak * eff), Y / bandwidth)`.
pub fn dispatch_duration(
    kernels: &[(GemmShape, u64)],
    device: &DeviceSpec,
    slot_budget: u64,
    launches: u32,
) -> Result<KernelCost> {
    let total_slots = device.slots();
    if slot_budget == 0 || slot_budget > total_slots {
        return Err(Error::InvalidDevice(format!(
            "slot budget {slot_budget} outside 1..={total_slots}"
        )));
    }
    if launches == 0 {
        return Err(Error::InvalidDevice("launches must be >= 1".into()));
    }
    let (mut blocks, mut flops, mut bytes) = (0u64, 0u64, 0u64);
    for &(shape, count) in kernels.iter().filter(|(_, c)| *c > 0) {
        blocks += count * thread_blocks(shape, device);
        flops += count * gemm_flops(shape);
        bytes += count * gemm_bytes(shape, ELEMENT_SIZE);
    }
    if blocks == 0 {
        return Err(Error::EmptyDispatch);
    }
    let waves = blocks.div_ceil(slot_budget);
    let efficiency = blocks as f64 / (waves * slot_budget) as f64;
    let share = slot_budget as f64 / total_slots as f64;
    let compute = flops as f64 / (device.peak_flops * share * efficiency);
    let memory = bytes as f64 / (device.mem_bandwidth * share);
    let duration = launches as f64 * device.launch_overhead + compute.max(memory);
    Ok(KernelCost {
        flops,
        bytes,
        blocks,
        waves,
        launches,
        duration,
        occupancy: blocks.min(slot_budget) as f64 / total_slots as f64,
    })
}

/// Convenience for one GEMM at the full slot budget.
pub fn single_kernel_cost(shape: GemmShape, device: &DeviceSpec) -> KernelCost {
    dispatch_duration(&[(shape, 1)], device, device.slots(), 1).expect("non-empty single dispatch")
}

/// GEMM dimensions of an im2col-lowered convolution.
pub fn im2col_gemm_dims(conv: &ConvSpec) -> Result<GemmShape> {
    let (out_h, out_w) = conv.output_dims()?;
    GemmShape::new(
        out_h * out_w,
        conv.out_channels,
        conv.kernel_h * conv.kernel_w * conv.in_channels,
    )
    .map_err(|e| Error::InvalidConv(e.to_string()))
}

/// Input batching stacks im2col rows.
pub fn batch_inputs(shape: GemmShape, batch: u64) -> GemmShape {
    assert!(batch >= 1, "batch must be >= 1");
    GemmShape {
        m: shape.m * batch,
        ..shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One process (and CUDA context) per tenant.
    ProcessPerTenant,
    /// All tenants inside one process.
    SharedContext,
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharingMode::ProcessPerTenant => "process_per_tenant",
            SharingMode::SharedContext => "shared_context",
        })
    }
}

pub fn memory_footprint(tenants: &[Tenant], mode: SharingMode, device: &DeviceSpec) -> u64 {
    let resident: u64 = tenants
        .iter()
        .map(|t| t.weights_bytes + t.activation_bytes)
        .sum();
    match mode {
        SharingMode::ProcessPerTenant => {
            tenants.len() as u64 * device.process_context_bytes + resident
        }
        SharingMode::SharedContext => device.process_context_bytes + resident,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Tenant;

    fn conv2_2() -> GemmShape {
        GemmShape::new(256, 128, 1152).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() <= rel
    }

    #[test]
    fn flops_and_bytes() {
        assert_eq!(gemm_flops(conv2_2()), 75_497_472);
        assert_eq!(gemm_flops(GemmShape::new(1, 1, 1).unwrap()), 2);
        assert_eq!(gemm_flops(GemmShape::new(512, 1, 512).unwrap()), 524_288);
        assert_eq!(gemm_bytes(GemmShape::new(1, 1, 1).unwrap(), 4), 12);
        assert_eq!(gemm_bytes(conv2_2(), 4), 1_900_544);
        assert_eq!(gemm_bytes(GemmShape::new(512, 1, 512).unwrap(), 4), 1_052_672);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(GemmShape::new(0, 1, 1).is_err());
        assert!(GemmShape::new(1, 1, 0).is_err());
    }

    #[test]
    fn tiling() {
        let d = DeviceSpec::v100();
        assert_eq!(thread_blocks(conv2_2(), &d), 8);
        assert_eq!(thread_blocks(GemmShape::new(64, 64, 7).unwrap(), &d), 1);
        assert_eq!(thread_blocks(GemmShape::new(65, 64, 7).unwrap(), &d), 2);
    }

    #[test]
    fn single_conv_dispatch() {
        let d = DeviceSpec::v100();
        let c = dispatch_duration(&[(conv2_2(), 1)], &d, 160, 1).unwrap();
        assert_eq!((c.blocks, c.waves), (8, 1));
        let compute = 75_497_472.0 / (14e12 * 0.05);
        assert!(close(compute, 1.0785e-4, 1e-4));
        assert!(close(c.duration, compute + d.launch_overhead, 1e-12));
        assert!(close(c.occupancy, 0.05, 1e-12));
    }

    #[test]
    fn twenty_way_dispatch_fills_one_wave() {
        let d = DeviceSpec::v100();
        let one = dispatch_duration(&[(conv2_2(), 1)], &d, 160, 1).unwrap();
        let twenty = dispatch_duration(&[(conv2_2(), 20)], &d, 160, 1).unwrap();
        assert_eq!((twenty.blocks, twenty.waves), (160, 1));
        assert_eq!(twenty.occupancy, 1.0);
        assert!(close(twenty.duration, one.duration, 1e-12));
        assert_eq!(twenty.flops, 20 * one.flops);
    }

    #[test]
    fn launches_add_overhead() {
        let d = DeviceSpec::v100();
        let one = dispatch_duration(&[(conv2_2(), 3)], &d, 160, 1).unwrap();
        let three = dispatch_duration(&[(conv2_2(), 3)], &d, 160, 3).unwrap();
        assert!(close(three.duration - one.duration, 2.0 * d.launch_overhead, 1e-9));
    }

    #[test]
    fn empty_dispatch_is_error() {
        let d = DeviceSpec::v100();
        assert!(matches!(dispatch_duration(&[], &d, 160, 1), Err(Error::EmptyDispatch)));
        assert!(matches!(
            dispatch_duration(&[(conv2_2(), 0)], &d, 160, 1),
            Err(Error::EmptyDispatch)
        ));
    }

    #[test]
    fn partition_matches_full_device_when_kernel_fits() {
        let d = DeviceSpec::v100();
        let full = dispatch_duration(&[(conv2_2(), 1)], &d, 160, 1).unwrap();
        let part = dispatch_duration(&[(conv2_2(), 1)], &d, 16, 1).unwrap();
        assert!(close(part.duration, full.duration, 1e-12));
        let tight = dispatch_duration(&[(conv2_2(), 1)], &d, 4, 1).unwrap();
        assert_eq!(tight.waves, 2);
    }

    #[test]
    fn im2col() {
        let g = im2col_gemm_dims(&ConvSpec::square(3, 3, 1, 1, 1, 0)).unwrap();
        assert_eq!((g.m, g.n, g.k), (1, 1, 9));
        let g = im2col_gemm_dims(&ConvSpec::square(16, 3, 128, 128, 1, 1)).unwrap();
        assert_eq!((g.m, g.n, g.k), (256, 128, 1152));
        let g = im2col_gemm_dims(&ConvSpec::square(56, 3, 128, 64, 1, 1)).unwrap();
        assert_eq!(g.k, 1152);
        assert!(im2col_gemm_dims(&ConvSpec::square(2, 3, 1, 1, 1, 0)).is_err());
        assert!(im2col_gemm_dims(&ConvSpec::square(8, 3, 1, 1, 0, 0)).is_err());
    }

    #[test]
    fn batching_rows() {
        assert_eq!(batch_inputs(conv2_2(), 1), conv2_2());
        assert_eq!(batch_inputs(conv2_2(), 26), GemmShape::new(6656, 128, 1152).unwrap());
        assert_eq!(batch_inputs(GemmShape::new(1, 1, 1).unwrap(), 4), GemmShape::new(4, 1, 1).unwrap());
    }

    fn resnet50_like(id: u32) -> Tenant {
        Tenant {
            tenant_id: id,
            layers: vec![conv2_2()],
            weights_bytes: 102_400_000,
            activation_bytes: 0,
            slo_latency: 0.1,
            concurrency: 1,
        }
    }

    #[test]
    fn memory_walls() {
        let d = DeviceSpec::v100();
        let t18: Vec<_> = (0..18).map(resnet50_like).collect();
        let proc18 = memory_footprint(&t18, SharingMode::ProcessPerTenant, &d);
        assert_eq!(proc18, 18 * 800_000_000 + 18 * 102_400_000);
        assert!(proc18 > d.mem_capacity);
        let t60: Vec<_> = (0..60).map(resnet50_like).collect();
        let shared60 = memory_footprint(&t60, SharingMode::SharedContext, &d);
        assert_eq!(shared60, 800_000_000 + 60 * 102_400_000);
        assert!(shared60 < d.mem_capacity);
        assert_eq!(memory_footprint(&[], SharingMode::SharedContext, &d), d.process_context_bytes);
    }

    #[test]
    fn device_json_rejects_unknown_keys() {
        let mut v: serde_json::Value = serde_json::from_str(V100_JSON).unwrap();
        v["peak_flop"] = serde_json::json!(1.0);
        let err = DeviceSpec::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("peak_flop"), "{err}");
        let mut v: serde_json::Value = serde_json::from_str(V100_JSON).unwrap();
        v.as_object_mut().unwrap().remove("tile_m");
        assert!(DeviceSpec::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn shipped_profile_fixed_values() {
        let d = DeviceSpec::v100();
        assert_eq!(d.peak_flops, 14e12);
        assert_eq!(d.mem_capacity, 16_000_000_000);
        assert_eq!(d.slots(), 160);
        assert_eq!((d.tile_m, d.tile_n), (64, 64));
        assert_eq!(d.launch_overhead, 5e-6);
        assert_eq!(d.planning_overhead, 50e-6);
        assert_eq!(d.process_context_bytes, 800_000_000);
    }
}
