//! Decode pipeline: architecture registry, MAC/pixel accounting, the
//! float training-path pipeline and the deterministic fixed-point
//! decode path.

pub mod fixed;
pub mod pipeline;

use serde::Serialize;

use crate::arm::ContextTemplate;
use crate::error::{CodecError, Result};
use crate::tensor::layers::{count_params, upsample_kernel_2d, init_stack, LayerSpec};
use crate::tensor::{Parameters, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ArchId {
    A300,
    A545,
    A1079,
    A2300,
}

pub const ARCH_IDS: [ArchId; 4] = [ArchId::A300, ArchId::A545, ArchId::A1079, ArchId::A2300];

impl ArchId {
    pub fn from_u8(v: u8) -> Result<Self> {
        ARCH_IDS
            .get(v as usize)
            .copied()
            .ok_or_else(|| CodecError::Bitstream(format!("unknown arch id {v}")))
    }

    pub fn to_u8(self) -> u8 {
        ARCH_IDS.iter().position(|&a| a == self).unwrap() as u8
    }

    pub fn from_mac(mac: u32) -> Result<Self> {
        match mac {
            300 => Ok(ArchId::A300),
            545 => Ok(ArchId::A545),
            1079 => Ok(ArchId::A1079),
            2300 => Ok(ArchId::A2300),
            _ => Err(CodecError::Invalid(format!("no architecture with {mac} MAC/pixel"))),
        }
    }

    pub fn nominal_mac(self) -> u32 {
        match self {
            ArchId::A300 => 300,
            ArchId::A545 => 545,
            ArchId::A1079 => 1079,
            ArchId::A2300 => 2300,
        }
    }
}

/// One decoder architecture: ARM, upsampling and synthesis stacks.
#[derive(Debug, Clone)]
pub struct DecoderArch {
    pub id: ArchId,
    pub arm: Vec<LayerSpec>,
    pub ups: Vec<LayerSpec>,
    pub synth: Vec<LayerSpec>,
    pub context_size: usize,
}

/// Registry architecture. The synthesis input width equals the grid
/// count, 7 in the nominal configuration.
pub fn arch(id: ArchId, l_grids: usize) -> DecoderArch {
    use LayerSpec as L;
    let (arm, ups_k, synth): (Vec<LayerSpec>, usize, Vec<LayerSpec>) = match id {
        ArchId::A300 => (
            vec![L::linear_res(8), L::linear(8, 2)],
            4,
            vec![L::conv(l_grids, 8, 1), L::conv(8, 3, 1), L::conv_res(3, 3)],
        ),
        ArchId::A545 => (
            vec![L::linear_res(8), L::linear_res(8), L::linear(8, 2)],
            4,
            vec![L::conv(l_grids, 16, 1), L::conv(16, 3, 1), L::conv_res(3, 3), L::conv_res(3, 3)],
        ),
        ArchId::A1079 => (
            vec![L::linear_res(16), L::linear_res(16), L::linear(16, 2)],
            4,
            vec![L::conv(l_grids, 16, 1), L::conv(16, 3, 1), L::conv_res(3, 3), L::conv_res(3, 3)],
        ),
        ArchId::A2300 => (
            vec![L::linear_res(24), L::linear_res(24), L::linear(24, 2)],
            8,
            vec![L::conv(l_grids, 40, 1), L::conv(40, 3, 1), L::conv_res(3, 3), L::conv_res(3, 3)],
        ),
    };
    let context_size = arm[0].in_feat;
    DecoderArch { id, arm, ups: vec![L::tconv(ups_k)], synth, context_size }
}

impl DecoderArch {
    pub fn context_template(&self) -> ContextTemplate {
        ContextTemplate::new(self.context_size).expect("registry context size")
    }

    pub fn total_params(&self) -> usize {
        count_params(&self.arm) + count_params(&self.ups) + count_params(&self.synth)
    }

    pub fn ups_kernel(&self) -> usize {
        self.ups[0].kernel
    }

    /// Scalar counts per module, needed to slice the parameter sections.
    pub fn module_counts(&self) -> [usize; 3] {
        [count_params(&self.arm), count_params(&self.ups), count_params(&self.synth)]
    }
}

/// Decoder parameters: ARM (psi), upsampling (upsilon), synthesis (theta)
/// in one deterministic collection keyed by `arm.`, `ups.`, `syn.`
/// prefixes.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub arch: DecoderArch,
    pub params: Parameters,
}

impl DecoderParams {
    /// Seeded initialization: ARM/synthesis uniform by fan-in, the
    /// upsampling kernel starts as a classical interpolator.
    pub fn init(arch: &DecoderArch, seed: u64) -> Self {
        let mut params = Parameters::new();
        init_stack(&mut params, "arm", &arch.arm, seed ^ 0xA51);
        let k = arch.ups_kernel();
        let kern = Tensor {
            shape: vec![k, k],
            data: upsample_kernel_2d(k),
            requires_grad: true,
            grad: None,
        };
        params.insert("ups.kernel", kern);
        init_stack(&mut params, "syn", &arch.synth, seed ^ 0x57E);
        DecoderParams { arch: arch.clone(), params }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ModuleShares {
    pub arm: f64,
    pub upsampling: f64,
    pub synthesis: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTimings {
    pub arm_ms: f64,
    pub upsample_ms: f64,
    pub synthesis_ms: f64,
    pub total_ms: f64,
}

/// Complexity accounting: MAC/pixel of the decoder, per-module shares,
/// and (when produced by the encoder) the 3N-kappa encoding cost.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ComplexityReport {
    pub kappa_dec: f64,
    pub shares: ModuleShares,
    pub kappa_enc: f64,
    pub n_iters: u64,
    pub timings: StageTimings,
}

/// Forward-pass multiply-accumulates per decoded pixel. Biases are free;
/// each latent level contributes with its 4^-l resolution weight.
pub fn mac_per_pixel(arch: &DecoderArch, l_grids: usize) -> ComplexityReport {
    let arm_per_sample: f64 = arch.arm.iter().map(|s| (s.in_feat * s.out_feat) as f64).sum();
    let latent_samples_pp: f64 = (0..l_grids).map(|l| 0.25f64.powi(l as i32)).sum();
    let arm_pp = arm_per_sample * latent_samples_pp;

    let k = arch.ups_kernel() as f64;
    let produced_pp: f64 = (1..l_grids)
        .map(|l| (0..l).map(|j| 0.25f64.powi(j as i32)).sum::<f64>())
        .sum();
    let ups_pp = (k * k / 4.0) * produced_pp;

    let synth_pp: f64 = arch
        .synth
        .iter()
        .map(|s| (s.in_feat * s.out_feat * s.kernel * s.kernel) as f64)
        .sum();

    let kappa = arm_pp + ups_pp + synth_pp;
    ComplexityReport {
        kappa_dec: kappa,
        shares: ModuleShares {
            arm: arm_pp / kappa,
            upsampling: ups_pp / kappa,
            synthesis: synth_pp / kappa,
        },
        kappa_enc: 0.0,
        n_iters: 0,
        timings: StageTimings::default(),
    }
}
