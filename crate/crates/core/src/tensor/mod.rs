//! Minimal dense-tensor engine with tape-based reverse-mode autodiff.
//!
//! The tape records whole-tensor operations (matmul, conv, relu, ...) during
//! the forward pass; [`Tape::backward`] replays them in reverse to populate
//! gradients. One backward per forward: the tape is consumed.

pub mod adam;
pub mod layers;

use crate::error::{CodecError, Result};
use rand_core::RngCore;

/// Dense tensor: shape plus row-major f32 data, with an optional gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CodecError::ShapeMismatch(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::NonFinite("tensor construction"));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered parameter collection. Iteration order is insertion order and
/// therefore deterministic across runs, which the bitstream relies on.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    entries: Vec<(String, Tensor)>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        debug_assert!(self.index_of(name).is_none(), "duplicate parameter {name}");
        self.entries.push((name.to_string(), t));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| CodecError::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].1),
            None => Err(CodecError::MissingParameter(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), &mut *t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every parameter as a tape leaf; returns vars parallel to
    /// the entry order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf_grad(t.shape.clone(), t.data.clone()))
            .collect()
    }

    /// Copy gradients produced by `backward` back into the parameter slots.
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            t.grad = Some(tape.grad(vars[i]).to_vec());
        }
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.grad = None;
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// (n,k) x (k,m) -> (n,m)
    MatMul { a: Var, b: Var, n: usize, k: usize, m: usize },
    /// (n,m) + row vector (m)
    AddRowBias { x: Var, b: Var, n: usize, m: usize },
    Add { a: Var, b: Var },
    Relu { x: Var },
    Clamp01 { x: Var },
    Scale { x: Var, c: f32 },
    Sum { x: Var },
    MseLoss { a: Var, b: Var },
    /// stride-1 conv, replicate padding, kernel k (odd), w: (cout,cin,k,k);
    /// optionally with a fused ReLU on the output
    Conv2d { x: Var, w: Var, b: Var, cin: usize, cout: usize, k: usize, h: usize, wd: usize, relu: bool },
    /// depthwise conv, replicate padding, stride 1 or 2, w: (c,k,k)
    DwConv2d { x: Var, w: Var, b: Var, c: usize, k: usize, stride: usize, h: usize, wd: usize },
    /// 2x2 average pool, stride 2, ceil output dims
    AvgPool2 { x: Var, c: usize, h: usize, wd: usize },
    /// stride-2 transpose conv, single channel, replicate edge clamp, crop to target
    TConv2x { x: Var, kern: Var, k: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize },
    /// causal context gather over a 2-D grid; out (h*w, ctx)
    GatherCtx { grid: Var, offsets: Vec<(i32, i32)>, h: usize, wd: usize },
    /// total rate in bits of `v` under per-sample Laplace(mu, exp(clamp(braw)))
    LaplaceRate { v: Var, mu: Var, braw: Var },
    /// column j of (n,m)
    Col { x: Var, j: usize, m: usize },
    /// stack single-channel (h,w) maps into (l,h,w)
    StackChannels { xs: Vec<Var> },
    /// same data, new shape
    Reshape { x: Var },
    /// value = x + pre-drawn noise; gradient passes through unchanged
    AddNoise { x: Var },
    SoftRound { x: Var, temp: f32 },
    /// nearest-integer ties-to-even; straight-through gradient
    RoundSte { x: Var },
}

/// Recording tape. Values live on the tape; `Var` indexes them.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f32>>,
    done: bool,
}

pub const LAPLACE_LN_B_MIN: f32 = -6.907_755; // ln 1e-3
pub const LAPLACE_LN_B_MAX: f32 = 5.545_177; // ln 256
/// pmf floor used both by the rate estimate and the entropy coder.
pub const PMF_FLOOR: f64 = 1.0 / 65536.0;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), done: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { shape, data, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn leaf_grad(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(shape, data, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient of a node after `backward`. Empty slice if untouched.
    pub fn grad(&self, v: Var) -> &[f32] {
        &self.grads[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, m) = (self.shape(b)[0], self.shape(b)[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0f32; n * m];
        sgemm(
            n, k, m,
            1.0,
            self.value(a), k as isize, 1,
            self.value(b), m as isize, 1,
            0.0,
            &mut out, m as isize, 1,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![n, m], out, ng, Op::MatMul { a, b, n, k, m })
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        assert_eq!(self.value(b).len(), m);
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..n {
            for c in 0..m {
                out[r * m + c] += bv[c];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(vec![n, m], out, ng, Op::AddRowBias { x, b, n, m })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len());
        let out: Vec<f32> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(shape, out, ng, Op::Add { a, b })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::Relu { x })
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::Clamp01 { x })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Sum { x })
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len());
        let n = self.value(a).len();
        let s: f32 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        self.push(vec![1], vec![s / n as f32], ng, Op::MseLoss { a, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.conv2d_impl(x, w, b, false)
    }

    /// conv2d with the ReLU fused into the same tape node.
    pub fn conv2d_relu(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.conv2d_impl(x, w, b, true)
    }

    fn conv2d_impl(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let (cin, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (cout, cin2, k) = (self.shape(w)[0], self.shape(w)[1], self.shape(w)[2]);
        assert_eq!(cin, cin2, "conv2d channel mismatch");
        let mut out = if k == 1 {
            // 1x1 conv is a (cout,cin) x (cin,hw) matmul
            let mut out = vec![0.0f32; cout * h * wd];
            sgemm(
                cout, cin, h * wd,
                1.0,
                self.value(w), cin as isize, 1,
                self.value(x), (h * wd) as isize, 1,
                0.0,
                &mut out, (h * wd) as isize, 1,
            );
            let bv = self.value(b);
            for co in 0..cout {
                let base = co * h * wd;
                let bias = bv[co];
                for p in 0..h * wd {
                    out[base + p] += bias;
                }
            }
            out
        } else {
            conv2d_fwd(self.value(x), self.value(w), self.value(b), cin, cout, k, h, wd)
        };
        if relu {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(vec![cout, h, wd], out, ng, Op::Conv2d { x, w, b, cin, cout, k, h, wd, relu })
    }

    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (c, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let k = self.shape(w)[1];
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let out = dwconv2d_fwd(self.value(x), self.value(w), self.value(b), c, k, stride, h, wd);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(vec![c, oh, ow], out, ng, Op::DwConv2d { x, w, b, c, k, stride, h, wd })
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let (c, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
        let xv = self.value(x);
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * 2, ox * 2);
                    let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(wd));
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += xv[ch * h * wd + y * wd + xx];
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let ng = self.needs(x);
        self.push(vec![c, oh, ow], out, ng, Op::AvgPool2 { x, c, h, wd })
    }

    /// Stride-2 transpose convolution of a single-channel grid, cropped to
    /// `(out_h, out_w)`. Edge reads clamp to the grid (replicate).
    pub fn tconv2x(&mut self, x: Var, kern: Var, out_h: usize, out_w: usize) -> Var {
        let (in_h, in_w) = (self.shape(x)[0], self.shape(x)[1]);
        let k = self.shape(kern)[0];
        assert!(out_h <= 2 * in_h && out_w <= 2 * in_w);
        let out = tconv2x_fwd(self.value(x), self.value(kern), k, in_h, in_w, out_h, out_w);
        let ng = self.needs(x) || self.needs(kern);
        self.push(vec![out_h, out_w], out, ng, Op::TConv2x { x, kern, k, in_h, in_w, out_h, out_w })
    }

    /// Gather the causal context vector for every raster position of a grid.
    /// Out-of-bounds neighbours read as zero.
    pub fn gather_ctx(&mut self, grid: Var, offsets: &[(i32, i32)]) -> Var {
        let (h, wd) = (self.shape(grid)[0], self.shape(grid)[1]);
        let c = offsets.len();
        let gv = self.value(grid);
        let mut out = vec![0.0f32; h * wd * c];
        for y in 0..h as i32 {
            for x in 0..wd as i32 {
                let base = (y as usize * wd + x as usize) * c;
                for (j, &(dy, dx)) in offsets.iter().enumerate() {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && nx < wd as i32 {
                        out[base + j] = gv[ny as usize * wd + nx as usize];
                    }
                }
            }
        }
        let ng = self.needs(grid);
        self.push(
            vec![h * wd, c],
            out,
            ng,
            Op::GatherCtx { grid, offsets: offsets.to_vec(), h, wd },
        )
    }

    /// Total rate in bits: sum over samples of -log2 P(v_i) under a discrete
    /// Laplace with location mu_i and scale exp(clamp(braw_i)).
    pub fn laplace_rate(&mut self, v: Var, mu: Var, braw: Var) -> Var {
        let n = self.value(v).len();
        assert_eq!(self.value(mu).len(), n);
        assert_eq!(self.value(braw).len(), n);
        let (vv, mv, rv) = (self.value(v), self.value(mu), self.value(braw));
        let mut total = 0.0f64;
        for i in 0..n {
            let b = rv[i].clamp(LAPLACE_LN_B_MIN, LAPLACE_LN_B_MAX).exp() as f64;
            let d = (vv[i] - mv[i]) as f64;
            let p = laplace_prob(d, b).max(PMF_FLOOR);
            total -= p.log2();
        }
        let ng = self.needs(v) || self.needs(mu) || self.needs(braw);
        self.push(vec![1], vec![total as f32], ng, Op::LaplaceRate { v, mu, braw })
    }

    pub fn col(&mut self, x: Var, j: usize) -> Var {
        let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
        let out: Vec<f32> = (0..n).map(|r| self.value(x)[r * m + j]).collect();
        let ng = self.needs(x);
        self.push(vec![n], out, ng, Op::Col { x, j, m })
    }

    /// View with a different shape; element count must match.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(x).len());
        let data = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, data, ng, Op::Reshape { x })
    }

    pub fn stack_channels(&mut self, xs: &[Var]) -> Var {
        let (h, wd) = (self.shape(xs[0])[0], self.shape(xs[0])[1]);
        let mut out = Vec::with_capacity(xs.len() * h * wd);
        for &v in xs {
            assert_eq!(self.shape(v), [h, wd]);
            out.extend_from_slice(self.value(v));
        }
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(vec![xs.len(), h, wd], out, ng, Op::StackChannels { xs: xs.to_vec() })
    }

    /// Add per-element uniform(-0.5, 0.5) noise drawn from `rng`; the
    /// gradient passes through unchanged.
    pub fn add_noise<R: RngCore>(&mut self, x: Var, rng: &mut R) -> Var {
        let out: Vec<f32> = self
            .value(x)
            .iter()
            .map(|v| v + (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32 - 0.5)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::AddNoise { x })
    }

    pub fn soft_round(&mut self, x: Var, temp: f32) -> Var {
        assert!(temp > 0.0);
        let out: Vec<f32> = self.value(x).iter().map(|&v| soft_round_val(v, temp)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::SoftRound { x, temp })
    }

    pub fn round_ste(&mut self, x: Var) -> Var {
        let out: Vec<f32> = self.value(x).iter().map(|&v| round_ties_even(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(shape, out, ng, Op::RoundSte { x })
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(CodecError::Invalid("backward called twice on one tape".into()));
        }
        let lv = &self.nodes[loss.0];
        if lv.data.len() != 1 {
            return Err(CodecError::NonScalarLoss(lv.data.len()));
        }
        if !lv.data[0].is_finite() {
            return Err(CodecError::NonFinite("loss"));
        }
        self.done = true;
        self.grads = self.nodes.iter().map(|n| vec![0.0f32; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.backprop_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        // Split borrows: values are read-only, grads are written.
        macro_rules! gd {
            ($v:expr) => {
                &mut self.grads[$v.0]
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, n, k, m } => {
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                if self.nodes[a.0].needs_grad {
                    // gA += g * B^T : (n,m)x(m,k)
                    let mut tmp = vec![0.0f32; n * k];
                    sgemm(n, m, k, 1.0, g, m as isize, 1, bv, 1, m as isize, 0.0, &mut tmp, k as isize, 1);
                    axpy(&mut self.grads[a.0], &tmp);
                }
                if self.nodes[b.0].needs_grad {
                    // gB += A^T * g : (k,n)x(n,m)
                    let mut tmp = vec![0.0f32; k * m];
                    sgemm(k, n, m, 1.0, av, 1, k as isize, g, m as isize, 1, 0.0, &mut tmp, m as isize, 1);
                    axpy(&mut self.grads[b.0], &tmp);
                }
            }
            &Op::AddRowBias { x, b, n, m } => {
                if self.nodes[x.0].needs_grad {
                    axpy(gd!(x), g);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = gd!(b);
                    for r in 0..n {
                        for c in 0..m {
                            gb[c] += g[r * m + c];
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.nodes[a.0].needs_grad {
                    axpy(gd!(a), g);
                }
                if self.nodes[b.0].needs_grad {
                    axpy(gd!(b), g);
                }
            }
            &Op::Reshape { x } => {
                if self.nodes[x.0].needs_grad {
                    axpy(gd!(x), g);
                }
            }
            &Op::Relu { x } => {
                if self.nodes[x.0].needs_grad {
                    let out = &self.nodes[i].data;
                    let gx = &mut self.grads[x.0];
                    for j in 0..g.len() {
                        if out[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Clamp01 { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = &self.nodes[x.0].data;
                    let gx = &mut self.grads[x.0];
                    for j in 0..g.len() {
                        if xv[j] > 0.0 && xv[j] < 1.0 {
                            gx[j] += g[j];
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let gx = &mut self.grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += g[j] * c;
                    }
                }
            }
            &Op::Sum { x } => {
                if self.nodes[x.0].needs_grad {
                    let gx = &mut self.grads[x.0];
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            &Op::MseLoss { a, b } => {
                let n = self.nodes[a.0].data.len() as f32;
                let scale = 2.0 * g[0] / n;
                let (av, bv) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if self.nodes[a.0].needs_grad {
                    let diffs: Vec<f32> =
                        av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                    axpy(&mut self.grads[a.0], &diffs);
                }
                if self.nodes[b.0].needs_grad {
                    let diffs: Vec<f32> =
                        av.iter().zip(bv).map(|(x, y)| -scale * (x - y)).collect();
                    axpy(&mut self.grads[b.0], &diffs);
                }
            }
            Op::Conv2d { x, w, b, cin, cout, k, h, wd, relu } => {
                let (x, w, b) = (*x, *w, *b);
                let (cin, cout, k, h, wd, relu) = (*cin, *cout, *k, *h, *wd, *relu);
                let masked: Vec<f32>;
                let g = if relu {
                    let out = &self.nodes[i].data;
                    masked = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &ov)| if ov > 0.0 { gv } else { 0.0 })
                        .collect();
                    &masked[..]
                } else {
                    g
                };
                let xv = self.nodes[x.0].data.clone();
                let wv = self.nodes[w.0].data.clone();
                if self.nodes[x.0].needs_grad {
                    conv2d_bwd_input(&mut self.grads[x.0], g, &wv, cin, cout, k, h, wd);
                }
                if self.nodes[w.0].needs_grad {
                    conv2d_bwd_weight(&mut self.grads[w.0], g, &xv, cin, cout, k, h, wd);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = &mut self.grads[b.0];
                    for co in 0..cout {
                        let mut s = 0.0;
                        for p in 0..h * wd {
                            s += g[co * h * wd + p];
                        }
                        gb[co] += s;
                    }
                }
            }
            Op::DwConv2d { x, w, b, c, k, stride, h, wd } => {
                let (x, w, b) = (*x, *w, *b);
                let (c, k, stride, h, wd) = (*c, *k, *stride, *h, *wd);
                let xv = self.nodes[x.0].data.clone();
                let wv = self.nodes[w.0].data.clone();
                let mut gxv = std::mem::take(&mut self.grads[x.0]);
                let mut gwv = std::mem::take(&mut self.grads[w.0]);
                let mut gbv = std::mem::take(&mut self.grads[b.0]);
                dwconv2d_bwd(
                    self.nodes[x.0].needs_grad.then_some(&mut gxv[..]),
                    self.nodes[w.0].needs_grad.then_some(&mut gwv[..]),
                    self.nodes[b.0].needs_grad.then_some(&mut gbv[..]),
                    g, &xv, &wv, c, k, stride, h, wd,
                );
                self.grads[x.0] = gxv;
                self.grads[w.0] = gwv;
                self.grads[b.0] = gbv;
            }
            &Op::AvgPool2 { x, c, h, wd } => {
                if self.nodes[x.0].needs_grad {
                    let (oh, ow) = (h.div_ceil(2), wd.div_ceil(2));
                    let gx = &mut self.grads[x.0];
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let (y0, x0) = (oy * 2, ox * 2);
                                let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(wd));
                                let share = g[ch * oh * ow + oy * ow + ox]
                                    / ((y1 - y0) * (x1 - x0)) as f32;
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[ch * h * wd + y * wd + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::TConv2x { x, kern, k, in_h, in_w, out_h, out_w } => {
                let (x, kern) = (*x, *kern);
                let (k, in_h, in_w, out_h, out_w) = (*k, *in_h, *in_w, *out_h, *out_w);
                let xv = self.nodes[x.0].data.clone();
                let kv = self.nodes[kern.0].data.clone();
                if self.nodes[x.0].needs_grad {
                    tconv2x_bwd_input(&mut self.grads[x.0], g, &kv, k, in_h, in_w, out_h, out_w);
                }
                if self.nodes[kern.0].needs_grad {
                    tconv2x_bwd_kernel(&mut self.grads[kern.0], g, &xv, k, in_h, in_w, out_h, out_w);
                }
            }
            Op::GatherCtx { grid, offsets, h, wd } => {
                let grid = *grid;
                if self.nodes[grid.0].needs_grad {
                    let offsets = offsets.clone();
                    let (h, wd) = (*h, *wd);
                    let c = offsets.len();
                    let gg = &mut self.grads[grid.0];
                    for y in 0..h as i32 {
                        for x in 0..wd as i32 {
                            let base = (y as usize * wd + x as usize) * c;
                            for (j, &(dy, dx)) in offsets.iter().enumerate() {
                                let (ny, nx) = (y + dy, x + dx);
                                if ny >= 0 && nx >= 0 && nx < wd as i32 {
                                    gg[ny as usize * wd + nx as usize] += g[base + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::LaplaceRate { v, mu, braw } => {
                let n = self.nodes[v.0].data.len();
                let vv = self.nodes[v.0].data.clone();
                let mv = self.nodes[mu.0].data.clone();
                let rv = self.nodes[braw.0].data.clone();
                let ln2 = std::f64::consts::LN_2;
                for j in 0..n {
                    let raw = rv[j];
                    let clamped = raw.clamp(LAPLACE_LN_B_MIN, LAPLACE_LN_B_MAX);
                    let b = clamped.exp() as f64;
                    let d = (vv[j] - mv[j]) as f64;
                    let p = laplace_prob(d, b);
                    if p <= PMF_FLOOR {
                        continue; // floored: no gradient
                    }
                    let dldp = -(g[0] as f64) / (p * ln2);
                    let dp_dd = laplace_pdf(d + 0.5, b) - laplace_pdf(d - 0.5, b);
                    let dp_db = laplace_dcdf_db(d + 0.5, b) - laplace_dcdf_db(d - 0.5, b);
                    if self.nodes[v.0].needs_grad {
                        self.grads[v.0][j] += (dldp * dp_dd) as f32;
                    }
                    if self.nodes[mu.0].needs_grad {
                        self.grads[mu.0][j] -= (dldp * dp_dd) as f32;
                    }
                    if self.nodes[braw.0].needs_grad && raw > LAPLACE_LN_B_MIN && raw < LAPLACE_LN_B_MAX
                    {
                        self.grads[braw.0][j] += (dldp * dp_db * b) as f32;
                    }
                }
            }
            &Op::Col { x, j, m } => {
                if self.nodes[x.0].needs_grad {
                    let gx = &mut self.grads[x.0];
                    for (r, gv) in g.iter().enumerate() {
                        gx[r * m + j] += gv;
                    }
                }
            }
            Op::StackChannels { xs } => {
                let xs = xs.clone();
                let mut off = 0;
                for v in xs {
                    let len = self.nodes[v.0].data.len();
                    if self.nodes[v.0].needs_grad {
                        let gx = &mut self.grads[v.0];
                        for j in 0..len {
                            gx[j] += g[off + j];
                        }
                    }
                    off += len;
                }
            }
            &Op::AddNoise { x } | &Op::RoundSte { x } => {
                if self.nodes[x.0].needs_grad {
                    axpy(gd!(x), g);
                }
            }
            &Op::SoftRound { x, temp } => {
                if self.nodes[x.0].needs_grad {
                    let xv = &self.nodes[x.0].data;
                    let gx = &mut self.grads[x.0];
                    let denom = (0.5 / temp).tanh();
                    for j in 0..g.len() {
                        let frac = xv[j] - xv[j].floor();
                        let t = ((frac - 0.5) / temp).tanh();
                        let deriv = 0.5 * (1.0 - t * t) / (temp * denom);
                        gx[j] += g[j] * deriv;
                    }
                }
            }
        }
    }
}

/// Laplace(0, b) CDF.
pub fn laplace_cdf(t: f64, b: f64) -> f64 {
    if t < 0.0 {
        0.5 * (t / b).exp()
    } else {
        1.0 - 0.5 * (-t / b).exp()
    }
}

fn laplace_pdf(t: f64, b: f64) -> f64 {
    (-(t.abs()) / b).exp() / (2.0 * b)
}

/// d/db of the Laplace(0, b) CDF at t.
fn laplace_dcdf_db(t: f64, b: f64) -> f64 {
    if t < 0.0 {
        -laplace_cdf(t, b) * t / (b * b)
    } else {
        -(1.0 - laplace_cdf(t, b)) * t / (b * b)
    }
}

/// P(round(X) = v) for X ~ Laplace(0, b), v at signed distance d from mu.
pub fn laplace_prob(d: f64, b: f64) -> f64 {
    laplace_cdf(d + 0.5, b) - laplace_cdf(d - 0.5, b)
}

pub fn round_ties_even(v: f32) -> f32 {
    let r = v.round();
    if (v - v.trunc()).abs() == 0.5 {
        // round() rounds half away from zero; adjust to even
        if r as i64 % 2 != 0 {
            return r - (r - v).signum();
        }
    }
    r
}

fn soft_round_val(v: f32, temp: f32) -> f32 {
    let fl = v.floor();
    let frac = v - fl;
    fl + 0.5 + 0.5 * (((frac - 0.5) / temp).tanh() / (0.5 / temp).tanh())
}

fn axpy(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize, k: usize, n: usize,
    alpha: f32,
    a: &[f32], rsa: isize, csa: isize,
    b: &[f32], rsb: isize, csb: isize,
    beta: f32,
    c: &mut [f32], rsc: isize, csc: isize,
) {
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

#[inline]
fn clampi(v: i64, max: usize) -> usize {
    v.clamp(0, max as i64 - 1) as usize
}

fn conv2d_fwd(
    x: &[f32], w: &[f32], b: &[f32],
    cin: usize, cout: usize, k: usize, h: usize, wd: usize,
) -> Vec<f32> {
    let p = (k / 2) as i64;
    let mut out = vec![0.0f32; cout * h * wd];
    for co in 0..cout {
        for y in 0..h {
            for x_ in 0..wd {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        let sy = clampi(y as i64 + ky as i64 - p, h);
                        for kx in 0..k {
                            let sx = clampi(x_ as i64 + kx as i64 - p, wd);
                            acc += w[((co * cin + ci) * k + ky) * k + kx]
                                * x[ci * h * wd + sy * wd + sx];
                        }
                    }
                }
                out[co * h * wd + y * wd + x_] = acc;
            }
        }
    }
    out
}

fn conv2d_bwd_input(
    gx: &mut [f32], g: &[f32], w: &[f32],
    cin: usize, cout: usize, k: usize, h: usize, wd: usize,
) {
    let p = (k / 2) as i64;
    for co in 0..cout {
        for y in 0..h {
            for x_ in 0..wd {
                let go = g[co * h * wd + y * wd + x_];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        let sy = clampi(y as i64 + ky as i64 - p, h);
                        for kx in 0..k {
                            let sx = clampi(x_ as i64 + kx as i64 - p, wd);
                            gx[ci * h * wd + sy * wd + sx] +=
                                go * w[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_weight(
    gw: &mut [f32], g: &[f32], x: &[f32],
    cin: usize, cout: usize, k: usize, h: usize, wd: usize,
) {
    let p = (k / 2) as i64;
    for co in 0..cout {
        for y in 0..h {
            for x_ in 0..wd {
                let go = g[co * h * wd + y * wd + x_];
                if go == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..k {
                        let sy = clampi(y as i64 + ky as i64 - p, h);
                        for kx in 0..k {
                            let sx = clampi(x_ as i64 + kx as i64 - p, wd);
                            gw[((co * cin + ci) * k + ky) * k + kx] +=
                                go * x[ci * h * wd + sy * wd + sx];
                        }
                    }
                }
            }
        }
    }
}

fn dwconv2d_fwd(
    x: &[f32], w: &[f32], b: &[f32],
    c: usize, k: usize, stride: usize, h: usize, wd: usize,
) -> Vec<f32> {
    let p = (k / 2) as i64;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let orow = &mut out[ch * oh * ow + oy * ow..ch * oh * ow + oy * ow + ow];
            orow.fill(b[ch]);
            for ky in 0..k {
                let sy = clampi((oy * stride) as i64 + ky as i64 - p, h);
                let xrow = &x[ch * h * wd + sy * wd..ch * h * wd + sy * wd + wd];
                for kx in 0..k {
                    let wv = w[(ch * k + ky) * k + kx];
                    let dx = kx as i64 - p;
                    if stride == 1 {
                        // interior: contiguous shifted row, vectorizable
                        let lo = (-dx).max(0) as usize;
                        let hi = (wd as i64 - dx).clamp(0, ow as i64) as usize;
                        for ox in 0..lo.min(ow) {
                            orow[ox] += wv * xrow[clampi(ox as i64 + dx, wd)];
                        }
                        let (od, xs) = (&mut orow[lo..hi], &xrow[(lo as i64 + dx) as usize..]);
                        for (o, &xv) in od.iter_mut().zip(xs) {
                            *o += wv * xv;
                        }
                        for ox in hi.max(lo)..ow {
                            orow[ox] += wv * xrow[clampi(ox as i64 + dx, wd)];
                        }
                    } else {
                        for ox in 0..ow {
                            let sx = clampi((ox * stride) as i64 + dx, wd);
                            orow[ox] += wv * xrow[sx];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dwconv2d_bwd(
    gx: Option<&mut [f32]>, gw: Option<&mut [f32]>, gb: Option<&mut [f32]>,
    g: &[f32], x: &[f32], w: &[f32],
    c: usize, k: usize, stride: usize, h: usize, wd: usize,
) {
    let p = (k / 2) as i64;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut gx = gx;
    let mut gw = gw;
    let mut gb = gb;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[ch * oh * ow + oy * ow + ox];
                if go == 0.0 {
                    continue;
                }
                if let Some(gb) = gb.as_deref_mut() {
                    gb[ch] += go;
                }
                for ky in 0..k {
                    let sy = clampi((oy * stride) as i64 + ky as i64 - p, h);
                    for kx in 0..k {
                        let sx = clampi((ox * stride) as i64 + kx as i64 - p, wd);
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[ch * h * wd + sy * wd + sx] += go * w[(ch * k + ky) * k + kx];
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[(ch * k + ky) * k + kx] += go * x[ch * h * wd + sy * wd + sx];
                        }
                    }
                }
            }
        }
    }
}

/// Kernel phase alignment constant: tap t at output o reads input
/// (o + c - t) / 2 when that quantity is an even integer, c = k/2 - 1.
#[inline]
fn tconv_center(k: usize) -> i64 {
    (k / 2) as i64 - 1
}

pub(crate) fn tconv2x_fwd(
    x: &[f32], kern: &[f32], k: usize,
    in_h: usize, in_w: usize, out_h: usize, out_w: usize,
) -> Vec<f32> {
    let c = tconv_center(k);
    let mut out = vec![0.0f32; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let mut acc = 0.0;
            for ty in 0..k {
                let ny = oy as i64 + c - ty as i64;
                if ny & 1 != 0 {
                    continue;
                }
                let sy = clampi(ny >> 1, in_h);
                for tx in 0..k {
                    let nx = ox as i64 + c - tx as i64;
                    if nx & 1 != 0 {
                        continue;
                    }
                    let sx = clampi(nx >> 1, in_w);
                    acc += kern[ty * k + tx] * x[sy * in_w + sx];
                }
            }
            out[oy * out_w + ox] = acc;
        }
    }
    out
}

fn tconv2x_bwd_input(
    gx: &mut [f32], g: &[f32], kern: &[f32], k: usize,
    in_h: usize, in_w: usize, out_h: usize, out_w: usize,
) {
    let c = tconv_center(k);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let go = g[oy * out_w + ox];
            if go == 0.0 {
                continue;
            }
            for ty in 0..k {
                let ny = oy as i64 + c - ty as i64;
                if ny & 1 != 0 {
                    continue;
                }
                let sy = clampi(ny >> 1, in_h);
                for tx in 0..k {
                    let nx = ox as i64 + c - tx as i64;
                    if nx & 1 != 0 {
                        continue;
                    }
                    let sx = clampi(nx >> 1, in_w);
                    gx[sy * in_w + sx] += go * kern[ty * k + tx];
                }
            }
        }
    }
}

fn tconv2x_bwd_kernel(
    gk: &mut [f32], g: &[f32], x: &[f32], k: usize,
    in_h: usize, in_w: usize, out_h: usize, out_w: usize,
) {
    let c = tconv_center(k);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let go = g[oy * out_w + ox];
            if go == 0.0 {
                continue;
            }
            for ty in 0..k {
                let ny = oy as i64 + c - ty as i64;
                if ny & 1 != 0 {
                    continue;
                }
                let sy = clampi(ny >> 1, in_h);
                for tx in 0..k {
                    let nx = ox as i64 + c - tx as i64;
                    if nx & 1 != 0 {
                        continue;
                    }
                    let sx = clampi(nx >> 1, in_w);
                    gk[ty * k + tx] += go * x[sy * in_w + sx];
                }
            }
        }
    }
}
