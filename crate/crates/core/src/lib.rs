//! Discrete-event simulator of GPU multi-tenancy for DNN inference.
//!
//! Several tenants (model replicas) share one analytically modelled device.
//! Sharing strategies range from exclusive access through time and spatial
//! multiplexing to a space-time scheduler that fuses kernels from different
//! tenants into single super-kernel launches.
//!
//! ```
//! use stmux::{aggregate, preset, run, DeviceSpec, PolicyKind, SimConfig};
//!
//! let tenants = preset("resnet50").unwrap().tenants(4);
//! let config = SimConfig::new(DeviceSpec::v100(), PolicyKind::SpaceTime, tenants, 0.5);
//! let trace = run(&config).unwrap();
//! let m = aggregate(&trace, &config).unwrap();
//! assert!(m.throughput_gflops > 0.0);
//! ```

pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod policy;
pub mod scheduler;
pub mod sim;
pub mod time;
pub mod workload;

pub use cost::{
    batch_inputs, dispatch_duration, gemm_bytes, gemm_flops, im2col_gemm_dims, memory_footprint, single_kernel_cost,
    thread_blocks, ConvSpec, DeviceSpec, GemmShape, KernelCost, SharingMode,
};
pub use error::{Error, Result};
pub use metrics::{aggregate, geomean, percentile, slowdown_vs_exclusive, speedup_table, RunMetrics, SpeedupTable};
pub use policy::{DispatchEvent, PolicyKind, PolicyParams};
pub use scheduler::{BatchPolicy, DetectorParams, KernelRequest, SchedulerConfig, SuperKernel};
pub use sim::{analytic_oracle, inject_degradation, run, SimConfig, SimMode, Trace};
pub use time::SimTime;
pub use workload::{preset, presets, Tenant, TenantId, WorkloadPreset};
