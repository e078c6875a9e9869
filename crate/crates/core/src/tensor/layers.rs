//! Layer descriptors, parameter counting and initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_core::RngCore;

use super::{Parameters, Tape, Tensor, Var};
use crate::error::{CodecError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    LinearResidual,
    Conv,
    ConvResidual,
    TConv,
}

/// One layer of an ARM / upsampling / synthesis stack.
/// Denoted in-feat / out-feat / kind / kernel, stride 2 for TConv.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_feat: usize,
    pub out_feat: usize,
    pub kernel: usize,
    pub stride: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn linear(in_feat: usize, out_feat: usize) -> Self {
        LayerSpec { kind: LayerKind::Linear, in_feat, out_feat, kernel: 1, stride: 1, has_bias: true }
    }

    pub fn linear_res(feat: usize) -> Self {
        LayerSpec {
            kind: LayerKind::LinearResidual,
            in_feat: feat,
            out_feat: feat,
            kernel: 1,
            stride: 1,
            has_bias: true,
        }
    }

    pub fn conv(in_feat: usize, out_feat: usize, kernel: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv, in_feat, out_feat, kernel, stride: 1, has_bias: true }
    }

    pub fn conv_res(feat: usize, kernel: usize) -> Self {
        LayerSpec {
            kind: LayerKind::ConvResidual,
            in_feat: feat,
            out_feat: feat,
            kernel,
            stride: 1,
            has_bias: true,
        }
    }

    /// Upsampling transpose conv: stride 2, bias-free.
    pub fn tconv(kernel: usize) -> Self {
        LayerSpec { kind: LayerKind::TConv, in_feat: 1, out_feat: 1, kernel, stride: 2, has_bias: false }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, LayerKind::LinearResidual | LayerKind::ConvResidual)
            && self.in_feat != self.out_feat
        {
            return Err(CodecError::Invalid(format!(
                "residual layer requires in == out, got {}x{}",
                self.in_feat, self.out_feat
            )));
        }
        if self.kind == LayerKind::TConv && self.stride != 2 {
            return Err(CodecError::Invalid("TConv stride must be 2".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.in_feat * self.out_feat * self.kernel * self.kernel
            + if self.has_bias { self.out_feat } else { 0 }
    }
}

/// Total parameter count of a layer stack.
pub fn count_params(arch: &[LayerSpec]) -> usize {
    arch.iter().map(LayerSpec::param_count).sum()
}

/// Run one layer on the tape. `final_layer` suppresses the trailing ReLU.
///
/// Linear layers operate on (n, in_feat) batches; conv layers on
/// (in_feat, h, w) maps. TConv layers are driven by the decoder's
/// upsampler directly and are rejected here.
pub fn forward_layer(
    tape: &mut Tape,
    spec: &LayerSpec,
    weight: Var,
    bias: Option<Var>,
    input: Var,
    final_layer: bool,
) -> Result<Var> {
    spec.validate()?;
    let pre = match spec.kind {
        LayerKind::Linear | LayerKind::LinearResidual => {
            if tape.shape(input)[1] != spec.in_feat {
                return Err(CodecError::ShapeMismatch(format!(
                    "linear layer expects {} inputs, got {}",
                    spec.in_feat,
                    tape.shape(input)[1]
                )));
            }
            let mut y = tape.matmul(input, weight);
            if let Some(b) = bias {
                y = tape.add_row_bias(y, b);
            }
            if spec.kind == LayerKind::LinearResidual {
                y = tape.add(y, input);
            }
            y
        }
        LayerKind::Conv | LayerKind::ConvResidual => {
            if tape.shape(input)[0] != spec.in_feat {
                return Err(CodecError::ShapeMismatch(format!(
                    "conv layer expects {} channels, got {}",
                    spec.in_feat,
                    tape.shape(input)[0]
                )));
            }
            let b = bias.ok_or_else(|| CodecError::MissingParameter("conv bias".into()))?;
            let mut y = tape.conv2d(input, weight, b);
            if spec.kind == LayerKind::ConvResidual {
                y = tape.add(y, input);
            }
            y
        }
        LayerKind::TConv => {
            return Err(CodecError::Invalid("TConv layers run through the upsampler".into()))
        }
    };
    Ok(if final_layer { pre } else { tape.relu(pre) })
}

/// Uniform(-a, a) with a = 1/sqrt(fan_in).
pub fn init_uniform(rng: &mut ChaCha20Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let a = 1.0 / (fan_in as f32).sqrt();
    (0..n)
        .map(|_| ((rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0) * a)
        .collect()
}

/// Fresh weights for a linear/conv stack under `prefix`, seeded.
pub fn init_stack(params: &mut Parameters, prefix: &str, arch: &[LayerSpec], seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for (i, spec) in arch.iter().enumerate() {
        let fan_in = spec.in_feat * spec.kernel * spec.kernel;
        let wshape = match spec.kind {
            LayerKind::Linear | LayerKind::LinearResidual => vec![spec.in_feat, spec.out_feat],
            _ => vec![spec.out_feat, spec.in_feat, spec.kernel, spec.kernel],
        };
        let n: usize = wshape.iter().product();
        let w = Tensor { shape: wshape, data: init_uniform(&mut rng, fan_in, n), requires_grad: true, grad: None };
        params.insert(&format!("{prefix}.{i}.w"), w);
        if spec.has_bias {
            let b = Tensor::zeros(vec![spec.out_feat]).with_grad();
            params.insert(&format!("{prefix}.{i}.b"), b);
        }
    }
}

/// 1-D half-pel interpolation taps for the stride-2 upsampling kernel.
///
/// Tap t sits at sample distance (t - (k/2 - 1)) / 2 from the produced
/// sample. k = 4 yields exact bilinear taps; k = 8 a Lanczos-2 windowed
/// sinc with each polyphase renormalized to sum 1.
pub fn upsample_kernel_1d(k: usize) -> Vec<f32> {
    let c = (k / 2) as f64 - 1.0;
    let raw: Vec<f64> = (0..k)
        .map(|t| {
            let x = (t as f64 - c) / 2.0;
            if k == 4 {
                (1.0 - x.abs()).max(0.0)
            } else {
                lanczos2(x)
            }
        })
        .collect();
    // per-phase renormalization keeps constants constant
    let mut sums = [0.0f64; 2];
    for (t, v) in raw.iter().enumerate() {
        sums[t & 1] += v;
    }
    raw.iter()
        .enumerate()
        .map(|(t, v)| (v / sums[t & 1]) as f32)
        .collect()
}

fn lanczos2(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= 2.0 {
        return 0.0;
    }
    let px = std::f64::consts::PI * x;
    (px.sin() / px) * ((px / 2.0).sin() / (px / 2.0))
}

/// Separable 2-D upsampling kernel (outer product of the 1-D taps).
pub fn upsample_kernel_2d(k: usize) -> Vec<f32> {
    let k1 = upsample_kernel_1d(k);
    let mut out = vec![0.0f32; k * k];
    for y in 0..k {
        for x in 0..k {
            out[y * k + x] = k1[y] * k1[x];
        }
    }
    out
}
