//! Operation recording and reverse-mode gradient computation.

use std::sync::Arc;

use super::kernels as kn;
use super::{check_same_shape, Tensor};
use crate::error::{Error, Result};

/// One recorded operation. Inputs are node ids of earlier records.
#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f32 },
    MulScalarT { x: usize, s: usize },
    AddBias { x: usize, b: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Arc<Vec<f32>>, inv_std: Arc<Vec<f32>> },
    Gelu { x: usize },
    Upsample { x: usize, factor: usize },
    Conv2d { x: usize, w: usize, b: Option<usize> },
    Unfold { x: usize, stride: usize },
    TokensToGrid { x: usize },
    GridToTokens { x: usize },
    MeanAll { x: usize },
    SumAll { x: usize },
    MeanRows { x: usize },
    BceWithLogits { logits: usize, targets: Arc<Vec<f32>> },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { xs: Vec<usize> },
    ConcatRows { xs: Vec<usize> },
    GatherRows { x: usize, idx: Arc<Vec<usize>> },
    Reshape { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulScalarT { .. } => "mul_scalar_t",
            Op::AddBias { .. } => "add_bias",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Conv2d { .. } => "conv2d",
            Op::Unfold { .. } => "unfold_patches",
            Op::TokensToGrid { .. } => "tokens_to_grid",
            Op::GridToTokens { .. } => "grid_to_tokens",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
            Op::MeanRows { .. } => "mean_rows",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape { .. } => "reshape",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    requires_grad: bool,
}

/// Records a forward pass and replays it in reverse for gradients.
///
/// Records are appended in execution order, so every input id precedes its
/// consumer and a single reverse sweep visits each record exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

/// Per-node gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given tensor (zeros if unreached).
    pub fn wrt(&self, t: &Tensor) -> Vec<f32> {
        match t.node().and_then(|id| self.grads[id].clone()) {
            Some(g) => g,
            None => vec![0.0; t.numel()],
        }
    }

    pub(crate) fn take(&mut self, node: usize) -> Option<Vec<f32>> {
        self.grads[node].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Flip the sign of the named op's input gradients during backward.
    /// Test fixture for gradient-check mutation tests; not for normal use.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    /// Register a trainable leaf. Gradients accumulate at this node.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec().into(), true);
        t.clone().with_node(id)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Arc<Vec<f32>>, requires_grad: bool) -> usize {
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Node id of `t`, interning constants as no-grad leaves.
    fn intern(&mut self, t: &Tensor) -> usize {
        match t.node() {
            Some(id) => id,
            None => self.push(
                Op::Leaf,
                t.shape().to_vec(),
                Arc::new(t.data().to_vec()),
                false,
            ),
        }
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[usize], shape: Vec<usize>, value: Vec<f32>) -> Tensor {
        let rg = self.needs_grad(inputs);
        let value: Arc<Vec<f32>> = Arc::new(value);
        let id = self.push(op, shape.clone(), value.clone(), rg);
        Tensor {
            shape,
            data: value,
            node: Some(id),
        }
    }

    // ── elementwise and linear ops ──────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("add", a, b)?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (ai, bi) = (self.intern(a), self.intern(b));
        Ok(self.record(Op::Add { a: ai, b: bi }, &[ai, bi], a.shape().to_vec(), v))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", a, b)?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (ai, bi) = (self.intern(a), self.intern(b));
        Ok(self.record(Op::Sub { a: ai, b: bi }, &[ai, bi], a.shape().to_vec(), v))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", a, b)?;
        let v = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (ai, bi) = (self.intern(a), self.intern(b));
        Ok(self.record(Op::Mul { a: ai, b: bi }, &[ai, bi], a.shape().to_vec(), v))
    }

    pub fn scale(&mut self, x: &Tensor, c: f32) -> Tensor {
        let v = x.data().iter().map(|v| v * c).collect();
        let xi = self.intern(x);
        self.record(Op::Scale { x: xi, c }, &[xi], x.shape().to_vec(), v)
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn mul_scalar_t(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar_t: scale must have one element, got {:?}",
                s.shape()
            )));
        }
        let sv = s.data()[0];
        let v = x.data().iter().map(|v| v * sv).collect();
        let (xi, si) = (self.intern(x), self.intern(s));
        Ok(self.record(Op::MulScalarT { x: xi, s: si }, &[xi, si], x.shape().to_vec(), v))
    }

    /// Add a length-d bias vector to each row of an [r, d] tensor.
    pub fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = *x.shape().last().ok_or_else(|| Error::Shape("add_bias: scalar input".into()))?;
        if b.shape() != [d] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let bd = b.data();
        let v = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &xv)| xv + bd[i % d])
            .collect();
        let (xi, bi) = (self.intern(x), self.intern(b));
        Ok(self.record(Op::AddBias { x: xi, b: bi }, &[xi, bi], x.shape().to_vec(), v))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2("matmul lhs", a)?;
        let (k2, n) = dims2("matmul rhs", b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: inner dimensions disagree, {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut v = vec![0.0f32; m * n];
        kn::mm(a.data(), b.data(), m, k, n, &mut v);
        let (ai, bi) = (self.intern(a), self.intern(b));
        Ok(self.record(Op::Matmul { a: ai, b: bi }, &[ai, bi], vec![m, n], v))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2("transpose", x)?;
        let xd = x.data();
        let mut v = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = xd[i * c + j];
            }
        }
        let xi = self.intern(x);
        Ok(self.record(Op::Transpose { x: xi }, &[xi], vec![c, r], v))
    }

    /// Softmax over the last axis. `additive_mask`, when given, must contain
    /// only 0 or -inf and marks entries to exclude; fully masked rows yield
    /// all-zero rows rather than an error.
    pub fn softmax_lastdim(&mut self, x: &Tensor, additive_mask: Option<&Tensor>) -> Result<Tensor> {
        let _ = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("softmax_lastdim: scalar input".into()))?;
        let allow = match additive_mask {
            None => None,
            Some(m) => {
                check_same_shape("softmax_lastdim mask", x, m)?;
                let mut allow = Vec::with_capacity(m.numel());
                for &v in m.data() {
                    if v == 0.0 {
                        allow.push(true);
                    } else if v == f32::NEG_INFINITY {
                        allow.push(false);
                    } else {
                        return Err(Error::Value(format!(
                            "softmax_lastdim: mask entries must be 0 or -inf, got {v}"
                        )));
                    }
                }
                Some(Arc::new(allow))
            }
        };
        self.softmax_allow(x, allow)
    }

    /// Softmax over the last axis with a boolean allow mask.
    pub fn softmax_allow_mask(&mut self, x: &Tensor, allow: &[bool]) -> Result<Tensor> {
        if allow.len() != x.numel() {
            return Err(Error::Shape(format!(
                "softmax mask length {} does not match tensor {:?}",
                allow.len(),
                x.shape()
            )));
        }
        self.softmax_allow(x, Some(Arc::new(allow.to_vec())))
    }

    fn softmax_allow(&mut self, x: &Tensor, allow: Option<Arc<Vec<bool>>>) -> Result<Tensor> {
        let width = *x.shape().last().unwrap();
        let rows = x.numel() / width;
        let mut v = vec![0.0f32; x.numel()];
        kn::softmax_rows(x.data(), rows, width, allow.as_ref().map(|a| a.as_slice()), &mut v);
        let xi = self.intern(x);
        Ok(self.record(Op::Softmax { x: xi }, &[xi], x.shape().to_vec(), v))
    }

    /// Per-last-axis normalization to zero mean / unit variance, then affine.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::Shape("layer_norm: scalar input".into()))?;
        if d == 0 {
            return Err(Error::Shape("layer_norm: zero feature dimension".into()));
        }
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} do not match feature dim {d}",
                gain.shape(),
                bias.shape()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Value(format!("layer_norm: eps must be > 0, got {eps}")));
        }
        let rows = x.numel() / d;
        let (xd, gd, bd) = (x.data(), gain.data(), bias.data());
        let mut out = vec![0.0f32; x.numel()];
        let mut xhat = vec![0.0f32; x.numel()];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let xs = &xd[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f32>() / d as f32;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (xs[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gd[j] + bd[j];
            }
        }
        let (xi, gi, bi) = (self.intern(x), self.intern(gain), self.intern(bias));
        Ok(self.record(
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat: Arc::new(xhat),
                inv_std: Arc::new(inv_std),
            },
            &[xi, gi, bi],
            x.shape().to_vec(),
            out,
        ))
    }

    pub fn gelu(&mut self, x: &Tensor) -> Tensor {
        let v = x.data().iter().map(|&v| kn::gelu(v)).collect();
        let xi = self.intern(x);
        self.record(Op::Gelu { x: xi }, &[xi], x.shape().to_vec(), v)
    }

    /// Align-corners-false bilinear upsampling of a [c, h, w] map.
    pub fn bilinear_upsample(&mut self, x: &Tensor, factor: usize) -> Result<Tensor> {
        let (c, h, w) = dims3("bilinear_upsample", x)?;
        if factor < 1 {
            return Err(Error::Value("bilinear_upsample: factor must be >= 1".into()));
        }
        if factor == 1 {
            // Identity; still recorded so gradients flow through.
            let xi = self.intern(x);
            let v = x.data().to_vec();
            return Ok(self.record(Op::Reshape { x: xi }, &[xi], x.shape().to_vec(), v));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xd = x.data();
        let mut v = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            let src = &xd[ch * h * w..(ch + 1) * h * w];
            let dst = &mut v[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, wy) = kn::bilerp_coords(oy, factor, h);
                for ox in 0..ow {
                    let (x0, x1, wx) = kn::bilerp_coords(ox, factor, w);
                    let v00 = src[y0 * w + x0];
                    let v01 = src[y0 * w + x1];
                    let v10 = src[y1 * w + x0];
                    let v11 = src[y1 * w + x1];
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    dst[oy * ow + ox] = top + (bot - top) * wy;
                }
            }
        }
        let xi = self.intern(x);
        Ok(self.record(Op::Upsample { x: xi, factor }, &[xi], vec![c, oh, ow], v))
    }

    /// 3x3-style same-padding convolution, stride 1, odd kernel.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (ci, h, wd) = dims3("conv2d input", x)?;
        if w.rank() != 4 {
            return Err(Error::Shape(format!("conv2d: weight must be rank 4, got {:?}", w.shape())));
        }
        let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv2d: weight in-channels {wci} do not match input channels {ci}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape("conv2d: kernel dims must be odd".into()));
        }
        if let Some(bt) = b {
            if bt.shape() != [co] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match out-channels {co}",
                    bt.shape()
                )));
            }
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = x.data();
        let wdt = w.data();
        let mut v = vec![0.0f32; co * h * wd];
        for oc in 0..co {
            let bias = b.map_or(0.0, |bt| bt.data()[oc]);
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = bias;
                    for ic in 0..ci {
                        for ky in 0..kh {
                            let iy = oy as isize + ky as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox as isize + kx as isize - pw as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xd[ic * h * wd + iy as usize * wd + ix as usize]
                                    * wdt[((oc * ci + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    v[oc * h * wd + oy * wd + ox] = acc;
                }
            }
        }
        let xi = self.intern(x);
        let wi = self.intern(w);
        let bi = b.map(|bt| self.intern(bt));
        let mut inputs = vec![xi, wi];
        if let Some(id) = bi {
            inputs.push(id);
        }
        Ok(self.record(Op::Conv2d { x: xi, w: wi, b: bi }, &inputs, vec![co, h, wd], v))
    }

    /// Split a [c, h, w] map into non-overlapping s x s patches, flattened to
    /// rows: output is [(h/s)*(w/s), c*s*s].
    pub fn unfold_patches(&mut self, x: &Tensor, stride: usize) -> Result<Tensor> {
        let (c, h, w) = dims3("unfold_patches", x)?;
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "unfold_patches: grid {h}x{w} not divisible by stride {stride}"
            )));
        }
        let (gh, gw) = (h / stride, w / stride);
        let cols = c * stride * stride;
        let xd = x.data();
        let mut v = vec![0.0f32; gh * gw * cols];
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                for ch in 0..c {
                    for py in 0..stride {
                        for px in 0..stride {
                            let col = (ch * stride + py) * stride + px;
                            v[row * cols + col] =
                                xd[ch * h * w + (gy * stride + py) * w + (gx * stride + px)];
                        }
                    }
                }
            }
        }
        let xi = self.intern(x);
        Ok(self.record(Op::Unfold { x: xi, stride }, &[xi], vec![gh * gw, cols], v))
    }

    /// Reinterpret [h*w, c] row-major tokens as a [c, h, w] map.
    pub fn tokens_to_grid(&mut self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (n, c) = dims2("tokens_to_grid", x)?;
        if n != h * w {
            return Err(Error::Shape(format!(
                "tokens_to_grid: {n} tokens cannot fill a {h}x{w} grid"
            )));
        }
        let xd = x.data();
        let mut v = vec![0.0f32; x.numel()];
        for t in 0..n {
            for ch in 0..c {
                v[ch * n + t] = xd[t * c + ch];
            }
        }
        let xi = self.intern(x);
        Ok(self.record(Op::TokensToGrid { x: xi }, &[xi], vec![c, h, w], v))
    }

    /// Reinterpret a [c, h, w] map as [h*w, c] row-major tokens.
    pub fn grid_to_tokens(&mut self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3("grid_to_tokens", x)?;
        let n = h * w;
        let xd = x.data();
        let mut v = vec![0.0f32; x.numel()];
        for t in 0..n {
            for ch in 0..c {
                v[t * c + ch] = xd[ch * n + t];
            }
        }
        let xi = self.intern(x);
        Ok(self.record(Op::GridToTokens { x: xi }, &[xi], vec![n, c], v))
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let v = kahan_sum(x.data()) / x.numel() as f32;
        let xi = self.intern(x);
        self.record(Op::MeanAll { x: xi }, &[xi], vec![1], vec![v])
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let v = kahan_sum(x.data());
        let xi = self.intern(x);
        self.record(Op::SumAll { x: xi }, &[xi], vec![1], vec![v])
    }

    /// Column means of an [r, c] tensor (average pooling over rows).
    pub fn mean_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = dims2("mean_rows", x)?;
        let xd = x.data();
        let mut v = vec![0.0f32; c];
        for i in 0..r {
            for j in 0..c {
                v[j] += xd[i * c + j];
            }
        }
        for j in 0..c {
            v[j] /= r as f32;
        }
        let xi = self.intern(x);
        Ok(self.record(Op::MeanRows { x: xi }, &[xi], vec![1, c], v))
    }

    /// Numerically stable mean binary cross-entropy from logits.
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        check_same_shape("bce_with_logits", logits, targets)?;
        for &t in targets.data() {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Value(format!(
                    "bce_with_logits: target {t} outside [0, 1]"
                )));
            }
        }
        let n = logits.numel() as f32;
        // Compensated summation keeps the loss accurate enough for
        // finite-difference gradient verification.
        let mut acc = 0.0f32;
        let mut comp = 0.0f32;
        for (&z, &t) in logits.data().iter().zip(targets.data()) {
            // max(z,0) - z*t + ln(1 + exp(-|z|))
            let term = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            let y = term - comp;
            let s = acc + y;
            comp = (s - acc) - y;
            acc = s;
        }
        let xi = self.intern(logits);
        let targets = Arc::new(targets.data().to_vec());
        Ok(self.record(
            Op::BceWithLogits { logits: xi, targets },
            &[xi],
            vec![1],
            vec![acc / n],
        ))
    }

    /// Columns [start, start+len) of an [r, c] tensor.
    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2("slice_cols", x)?;
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{} out of width {c}",
                start + len
            )));
        }
        let xd = x.data();
        let mut v = vec![0.0f32; r * len];
        for i in 0..r {
            v[i * len..(i + 1) * len].copy_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let xi = self.intern(x);
        Ok(self.record(Op::SliceCols { x: xi, start, len }, &[xi], vec![r, len], v))
    }

    /// Horizontal concatenation of same-height rank-2 tensors.
    pub fn concat_cols(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_cols: empty input list".into()));
        }
        let (r, _) = dims2("concat_cols", &xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let (ri, ci) = dims2("concat_cols", x)?;
            if ri != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({r} vs {ri})"
                )));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut v = vec![0.0f32; r * total];
        for i in 0..r {
            let mut off = 0;
            for (x, &w) in xs.iter().zip(&widths) {
                v[i * total + off..i * total + off + w]
                    .copy_from_slice(&x.data()[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let ids: Vec<usize> = xs.iter().map(|x| self.intern(x)).collect();
        Ok(self.record(Op::ConcatCols { xs: ids.clone() }, &ids, vec![r, total], v))
    }

    /// Vertical concatenation of same-width rank-2 tensors.
    pub fn concat_rows(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_rows: empty input list".into()));
        }
        let (_, c) = dims2("concat_rows", &xs[0])?;
        let mut rows = 0usize;
        for x in xs {
            let (ri, ci) = dims2("concat_rows", x)?;
            if ci != c {
                return Err(Error::Shape(format!(
                    "concat_rows: widths differ ({c} vs {ci})"
                )));
            }
            rows += ri;
        }
        let mut v = Vec::with_capacity(rows * c);
        for x in xs {
            v.extend_from_slice(x.data());
        }
        let ids: Vec<usize> = xs.iter().map(|x| self.intern(x)).collect();
        Ok(self.record(Op::ConcatRows { xs: ids.clone() }, &ids, vec![rows, c], v))
    }

    /// Select rows of an [r, c] tensor by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = dims2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of {r} rows"
            )));
        }
        let xd = x.data();
        let mut v = vec![0.0f32; idx.len() * c];
        for (o, &i) in idx.iter().enumerate() {
            v[o * c..(o + 1) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let xi = self.intern(x);
        Ok(self.record(
            Op::GatherRows { x: xi, idx: Arc::new(idx.to_vec()) },
            &[xi],
            vec![idx.len(), c],
            v,
        ))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::Shape(format!(
                "reshape: cannot view {:?} as {:?}",
                x.shape(),
                shape
            )));
        }
        let xi = self.intern(x);
        let v = x.data().to_vec();
        Ok(self.record(Op::Reshape { x: xi }, &[xi], shape, v))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients; nodes
    /// not on a path from the loss keep `None` (treated as zeros).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let lid = loss
            .node()
            .ok_or_else(|| Error::Shape("backward: loss is not on this tape".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[lid] = Some(vec![1.0]);

        for id in (0..=lid).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(id, &dy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy); // keep leaf grads for readout
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f32>>], id: usize, contrib: impl FnOnce(&mut [f32])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        contrib(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, dy: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        let node = &self.nodes[id];
        let flip = self.fault == Some(node.op.name());
        let sgn: f32 = if flip { -1.0 } else { 1.0 };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accum(grads, *a, |g| axpy(g, dy, sgn));
                self.accum(grads, *b, |g| axpy(g, dy, sgn));
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |g| axpy(g, dy, sgn));
                self.accum(grads, *b, |g| axpy(g, dy, -sgn));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.accum(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += sgn * dy[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += sgn * dy[i] * av[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accum(grads, *x, |g| axpy(g, dy, sgn * c));
            }
            Op::MulScalarT { x, s } => {
                let (xv, sv) = (&self.nodes[*x].value, self.nodes[*s].value[0]);
                self.accum(grads, *x, |g| axpy(g, dy, sgn * sv));
                self.accum(grads, *s, |g| {
                    let mut acc = 0.0f32;
                    for i in 0..dy.len() {
                        acc += dy[i] * xv[i];
                    }
                    g[0] += sgn * acc;
                });
            }
            Op::AddBias { x, b } => {
                let d = self.nodes[*b].value.len();
                self.accum(grads, *x, |g| axpy(g, dy, sgn));
                self.accum(grads, *b, |g| {
                    for (i, &dv) in dy.iter().enumerate() {
                        g[i % d] += sgn * dv;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let dy_eff: std::borrow::Cow<[f32]> = if flip {
                    dy.iter().map(|x| -x).collect::<Vec<f32>>().into()
                } else {
                    dy.into()
                };
                self.accum(grads, *a, |g| kn::mm_nt_acc(&dy_eff, bv, m, n, k, g));
                self.accum(grads, *b, |g| kn::mm_tn_acc(av, &dy_eff, m, k, n, g));
            }
            Op::Transpose { x } => {
                let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                self.accum(grads, *x, |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += sgn * dy[j * r + i];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let width = *node.shape.last().unwrap();
                let rows = y.len() / width;
                self.accum(grads, *x, |g| {
                    if flip {
                        let mut tmp = vec![0.0f32; g.len()];
                        kn::softmax_rows_grad(y, dy, rows, width, &mut tmp);
                        axpy(g, &tmp, -1.0);
                    } else {
                        kn::softmax_rows_grad(y, dy, rows, width, g);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = *node.shape.last().unwrap();
                let rows = node.value.len() / d;
                let gv = &self.nodes[*gain].value;
                self.accum(grads, *x, |g| {
                    for r in 0..rows {
                        let dys = &dy[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let istd = inv_std[r];
                        let mut sum_dg = 0.0f32;
                        let mut sum_dgx = 0.0f32;
                        for j in 0..d {
                            let dg = dys[j] * gv[j];
                            sum_dg += dg;
                            sum_dgx += dg * xh[j];
                        }
                        let inv_d = 1.0 / d as f32;
                        for j in 0..d {
                            let dg = dys[j] * gv[j];
                            g[r * d + j] +=
                                sgn * istd * (dg - sum_dg * inv_d - xh[j] * sum_dgx * inv_d);
                        }
                    }
                });
                self.accum(grads, *gain, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += sgn * dy[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accum(grads, *bias, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += sgn * dy[r * d + j];
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let xv = &self.nodes[*x].value;
                self.accum(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += sgn * dy[i] * kn::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Upsample { x, factor } => {
                let (c, h, w) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let (oh, ow) = (h * factor, w * factor);
                let factor = *factor;
                self.accum(grads, *x, |g| {
                    for ch in 0..c {
                        let dst = &dy[ch * oh * ow..(ch + 1) * oh * ow];
                        let src = &mut g[ch * h * w..(ch + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, wy) = kn::bilerp_coords(oy, factor, h);
                            for ox in 0..ow {
                                let (x0, x1, wx) = kn::bilerp_coords(ox, factor, w);
                                let dv = sgn * dst[oy * ow + ox];
                                src[y0 * w + x0] += dv * (1.0 - wy) * (1.0 - wx);
                                src[y0 * w + x1] += dv * (1.0 - wy) * wx;
                                src[y1 * w + x0] += dv * wy * (1.0 - wx);
                                src[y1 * w + x1] += dv * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (ci, h, wd) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let ws = &self.nodes[*w].shape;
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (ph, pw) = (kh / 2, kw / 2);
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                self.accum(grads, *x, |g| {
                    for oc in 0..co {
                        for oy in 0..h {
                            for ox in 0..wd {
                                let dv = sgn * dy[oc * h * wd + oy * wd + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = oy as isize + ky as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox as isize + kx as isize - pw as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            g[ic * h * wd + iy as usize * wd + ix as usize] +=
                                                dv * wv[((oc * ci + ic) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *w, |g| {
                    for oc in 0..co {
                        for oy in 0..h {
                            for ox in 0..wd {
                                let dv = sgn * dy[oc * h * wd + oy * wd + ox];
                                if dv == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..kh {
                                        let iy = oy as isize + ky as isize - ph as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = ox as isize + kx as isize - pw as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            g[((oc * ci + ic) * kh + ky) * kw + kx] += dv
                                                * xv[ic * h * wd + iy as usize * wd + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(bid) = b {
                    self.accum(grads, *bid, |g| {
                        for oc in 0..co {
                            let mut acc = 0.0f32;
                            for i in 0..h * wd {
                                acc += dy[oc * h * wd + i];
                            }
                            g[oc] += sgn * acc;
                        }
                    });
                }
            }
            Op::Unfold { x, stride } => {
                let (c, h, w) = (
                    self.nodes[*x].shape[0],
                    self.nodes[*x].shape[1],
                    self.nodes[*x].shape[2],
                );
                let stride = *stride;
                let (gh, gw) = (h / stride, w / stride);
                let cols = c * stride * stride;
                self.accum(grads, *x, |g| {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            let row = gy * gw + gx;
                            for ch in 0..c {
                                for py in 0..stride {
                                    for px in 0..stride {
                                        let col = (ch * stride + py) * stride + px;
                                        g[ch * h * w
                                            + (gy * stride + py) * w
                                            + (gx * stride + px)] += sgn * dy[row * cols + col];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::TokensToGrid { x } => {
                let (n, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                self.accum(grads, *x, |g| {
                    for t in 0..n {
                        for ch in 0..c {
                            g[t * c + ch] += sgn * dy[ch * n + t];
                        }
                    }
                });
            }
            Op::GridToTokens { x } => {
                let sh = &self.nodes[*x].shape;
                let (c, n) = (sh[0], sh[1] * sh[2]);
                self.accum(grads, *x, |g| {
                    for t in 0..n {
                        for ch in 0..c {
                            g[ch * n + t] += sgn * dy[t * c + ch];
                        }
                    }
                });
            }
            Op::MeanAll { x } => {
                let n = self.nodes[*x].value.len() as f32;
                self.accum(grads, *x, |g| {
                    let dv = sgn * dy[0] / n;
                    for gv in g.iter_mut() {
                        *gv += dv;
                    }
                });
            }
            Op::SumAll { x } => {
                self.accum(grads, *x, |g| {
                    let dv = sgn * dy[0];
                    for gv in g.iter_mut() {
                        *gv += dv;
                    }
                });
            }
            Op::MeanRows { x } => {
                let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                self.accum(grads, *x, |g| {
                    let inv_r = 1.0 / r as f32;
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += sgn * dy[j] * inv_r;
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let zv = &self.nodes[*logits].value;
                let n = zv.len() as f32;
                self.accum(grads, *logits, |g| {
                    let dv = sgn * dy[0] / n;
                    for i in 0..g.len() {
                        let sig = 1.0 / (1.0 + (-zv[i]).exp());
                        g[i] += dv * (sig - targets[i]);
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let c = self.nodes[*x].shape[1];
                let r = self.nodes[*x].shape[0];
                let (start, len) = (*start, *len);
                self.accum(grads, *x, |g| {
                    for i in 0..r {
                        for j in 0..len {
                            g[i * c + start + j] += sgn * dy[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let total = *node.shape.last().unwrap();
                let r = node.shape[0];
                let mut off = 0;
                for &xid in xs {
                    let w = self.nodes[xid].shape[1];
                    let o = off;
                    self.accum(grads, xid, |g| {
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += sgn * dy[i * total + o + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &xid in xs {
                    let sz = self.nodes[xid].value.len();
                    let o = off;
                    self.accum(grads, xid, |g| axpy(g, &dy[o..o + sz], sgn));
                    off += sz;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.nodes[*x].shape[1];
                self.accum(grads, *x, |g| {
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += sgn * dy[o * c + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |g| axpy(g, dy, sgn));
            }
        }
    }
}

fn axpy(acc: &mut [f32], v: &[f32], a: f32) {
    for (o, &x) in acc.iter_mut().zip(v) {
        *o += a * x;
    }
}

/// Compensated (Kahan) summation in 32-bit arithmetic.
fn kahan_sum(values: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    let mut comp = 0.0f32;
    for &v in values {
        let y = v - comp;
        let s = acc + y;
        comp = (s - acc) - y;
        acc = s;
    }
    acc
}

fn dims2(ctx: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!(
            "{ctx}: expected rank-2 tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn dims3(ctx: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.rank() != 3 {
        return Err(Error::Shape(format!(
            "{ctx}: expected rank-3 tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}
