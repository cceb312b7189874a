//! Tenants and the workload preset registry.

use serde::{Deserialize, Serialize};

use crate::cost::{gemm_bytes, im2col_gemm_dims, ConvSpec, GemmShape, ELEMENT_SIZE};
use crate::error::{Error, Result};

pub type TenantId = u32;

/// One model replica sharing the device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tenant {
    pub tenant_id: TenantId,
    pub layers: Vec<GemmShape>,
    pub weights_bytes: u64,
    #[serde(default)]
    pub activation_bytes: u64,
    /// Seconds per forward pass.
    pub slo_latency: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: u32,
}

fn default_concurrency() -> u32 {
    1
}

impl Tenant {
    pub fn validate(&self) -> Result<()> {
        let key = |f: &str| format!("tenants[{}].{f}", self.tenant_id);
        if self.layers.is_empty() {
            return Err(Error::config(key("layers"), "must be non-empty"));
        }
        for shape in &self.layers {
            shape
                .validate()
                .map_err(|e| Error::config(key("layers"), e.to_string()))?;
        }
        if self.concurrency == 0 {
            return Err(Error::config(key("concurrency"), "must be >= 1"));
        }
        if !(self.slo_latency > 0.0 && self.slo_latency.is_finite()) {
            return Err(Error::config(key("slo_latency"), "must be > 0"));
        }
        Ok(())
    }

    pub fn pass_flops(&self) -> u64 {
        self.layers.iter().map(|s| crate::cost::gemm_flops(*s)).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetKind {
    /// A single SGEMM issued repeatedly.
    Microbench,
    /// A full layer-by-layer forward pass.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WorkloadPreset {
    pub name: &'static str,
    pub kind: PresetKind,
    pub layers: Vec<GemmShape>,
    pub weights_bytes: u64,
    pub slo_latency: f64,
    pub description: &'static str,
}

impl WorkloadPreset {
    pub fn tenant(&self, tenant_id: TenantId) -> Tenant {
        Tenant {
            tenant_id,
            layers: self.layers.clone(),
            weights_bytes: self.weights_bytes,
            activation_bytes: 0,
            slo_latency: self.slo_latency,
            concurrency: 1,
        }
    }

    pub fn tenants(&self, count: u32) -> Vec<Tenant> {
        (0..count).map(|id| self.tenant(id)).collect()
    }
}

pub const PRESET_NAMES: [&str; 5] = [
    "rnn-matvec",
    "resnet18-conv2_2",
    "square-256",
    "resnet50",
    "mobilenetv2",
];

pub fn presets() -> Vec<WorkloadPreset> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n).expect("registry name resolves"))
        .collect()
}

pub fn preset(name: &str) -> Result<WorkloadPreset> {
    let gemm = |m, n, k| GemmShape { m, n, k };
    let micro = |name, shape: GemmShape, description| WorkloadPreset {
        name,
        kind: PresetKind::Microbench,
        layers: vec![shape],
        // operands preallocated on the device
        weights_bytes: gemm_bytes(shape, ELEMENT_SIZE),
        slo_latency: 0.010,
        description,
    };
    Ok(match name {
        "rnn-matvec" => micro(
            "rnn-matvec",
            gemm(512, 1, 512),
            "RNN matrix-vector SGEMM (512,1,512)",
        ),
        "resnet18-conv2_2" => micro(
            "resnet18-conv2_2",
            gemm(256, 128, 1152),
            "ResNet-18 conv2_2 im2col SGEMM (256,128,1152)",
        ),
        "square-256" => micro(
            "square-256",
            gemm(256, 256, 256),
            "square SGEMM (256,256,256)",
        ),
        "resnet50" => WorkloadPreset {
            name: "resnet50",
            kind: PresetKind::Model,
            layers: resnet50_layers(),
            weights_bytes: 102_400_000,
            slo_latency: 0.100,
            description: "ResNet-50 at 224x224, one GEMM per conv/fc layer",
        },
        "mobilenetv2" => WorkloadPreset {
            name: "mobilenetv2",
            kind: PresetKind::Model,
            layers: mobilenetv2_layers(),
            weights_bytes: 14_000_000,
            slo_latency: 0.100,
            description: "MobileNetV2 at 224x224, one GEMM per conv/fc layer",
        },
        other => return Err(Error::UnknownPreset(other.to_string())),
    })
}

/// Name of the preset whose layers are exactly `layers`, if any.
pub fn preset_for_layers(layers: &[GemmShape]) -> Option<&'static str> {
    presets().into_iter().find(|p| p.layers == layers).map(|p| p.name)
}

fn conv(image: u64, kernel: u64, cin: u64, cout: u64, stride: u64, pad: u64) -> (GemmShape, u64) {
    let spec = ConvSpec::square(image, kernel, cin, cout, stride, pad);
    let shape = im2col_gemm_dims(&spec).expect("preset convolution is valid");
    (shape, spec.output_dims().expect("valid").0)
}

/// Bottleneck ResNet-50 (stride on the 3x3 conv), 224x224 input.
pub fn resnet50_layers() -> Vec<GemmShape> {
    let mut layers = Vec::new();
    let (stem, mut hw) = conv(224, 7, 3, 64, 2, 3);
    layers.push(stem);
    hw = (hw + 2 - 3) / 2 + 1; // 3x3/2 max pool
    let mut cin = 64;
    for (width, blocks, stride) in [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)] {
        for b in 0..blocks {
            let s = if b == 0 { stride } else { 1 };
            layers.push(conv(hw, 1, cin, width, 1, 0).0);
            let (mid, out_hw) = conv(hw, 3, width, width, s, 1);
            layers.push(mid);
            layers.push(conv(out_hw, 1, width, 4 * width, 1, 0).0);
            if b == 0 {
                layers.push(conv(hw, 1, cin, 4 * width, s, 0).0);
            }
            hw = out_hw;
            cin = 4 * width;
        }
    }
    layers.push(GemmShape { m: 1, n: 1000, k: 2048 });
    layers
}

/// MobileNetV2 (width 1.0), 224x224 input. Depthwise 3x3 convs are lowered
/// as one GEMM with `k = 9` per channel column.
pub fn mobilenetv2_layers() -> Vec<GemmShape> {
    let mut layers = Vec::new();
    let (stem, mut hw) = conv(224, 3, 3, 32, 2, 1);
    layers.push(stem);
    let mut cin = 32;
    for (expand, cout, repeats, stride) in [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ] {
        for r in 0..repeats {
            let s = if r == 0 { stride } else { 1 };
            let hidden = cin * expand;
            if expand != 1 {
                layers.push(conv(hw, 1, cin, hidden, 1, 0).0);
            }
            let out_hw = (hw + 2 - 3) / s + 1;
            layers.push(GemmShape { m: out_hw * out_hw, n: hidden, k: 9 });
            hw = out_hw;
            layers.push(conv(hw, 1, hidden, cout, 1, 0).0);
            cin = cout;
        }
    }
    layers.push(conv(hw, 1, 320, 1280, 1, 0).0);
    layers.push(GemmShape { m: 1, n: 1000, k: 1280 });
    layers
}
