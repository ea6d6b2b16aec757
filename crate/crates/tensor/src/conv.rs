//! 2-D convolution (cross-correlation convention) over NCHW tensors.
//!
//! Three execution paths share one contract:
//! - pointwise (1×1, stride 1, no padding, dense) as a single GEMM per sample,
//! - depthwise with stride 1 as direct per-tap row sweeps,
//! - everything else through im2col + GEMM per group.
//!
//! [`conv2d_reference`] is a naive direct sum over every tap, padded taps
//! included, that counts the multiplies it performs. It backs the
//! instrumented execution mode of the tape.

use crate::error::{Result, TensorError};
use crate::gemm::gemm;
use crate::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Dense, stride 1, no dilation, no padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
            groups: 1,
            has_bias: true,
        }
    }

    /// 1×1 dense convolution with bias.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, (1, 1))
    }

    /// Dense stride-1 convolution with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        Self::new(in_channels, out_channels, kernel).with_same_padding()
    }

    /// One filter per channel, "same" padding, no bias.
    pub fn depthwise(channels: usize, kernel: (usize, usize), dilation: usize) -> Self {
        Self {
            groups: channels,
            dilation: (dilation, dilation),
            has_bias: false,
            ..Self::new(channels, channels, kernel)
        }
        .with_same_padding()
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// p = d·(k−1)/2 per axis; strip kernels get zero padding along their unit axis.
    pub fn with_same_padding(mut self) -> Self {
        self.padding = (
            self.dilation.0 * (self.kernel.0 - 1) / 2,
            self.dilation.1 * (self.kernel.1 - 1) / 2,
        );
        self
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0) && self.groups == 1
    }

    /// Effective kernel span per axis, d·(k−1)+1.
    pub fn span(&self) -> (usize, usize) {
        (
            self.dilation.0 * (self.kernel.0 - 1) + 1,
            self.dilation.1 * (self.kernel.1 - 1) + 1,
        )
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Number of learnable scalars (weights plus bias).
    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.has_bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::InvalidArgument { op: "conv2d", msg });
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        for ch in [self.in_channels, self.out_channels] {
            if ch == 0 || ch % self.groups != 0 {
                return Err(TensorError::GroupDivisibility {
                    channels: ch,
                    groups: self.groups,
                });
            }
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad(format!("empty kernel {:?}", self.kernel));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 || self.dilation.0 == 0 || self.dilation.1 == 0 {
            return bad("stride and dilation must be positive".into());
        }
        Ok(())
    }

    /// Output spatial size ⌊(h+2p−d(k−1)−1)/s⌋+1 per axis.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.span();
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < sh || pw < sw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("input {h}x{w} smaller than kernel span {sh}x{sw}"),
            });
        }
        Ok(((ph - sh) / self.stride.0 + 1, (pw - sw) / self.stride.1 + 1))
    }

    /// Multiply-accumulates of a dense evaluation: n·Ho·Wo·Co·(Ci/g)·kh·kw.
    pub fn macs(&self, n: usize, h_out: usize, w_out: usize) -> u64 {
        (n * h_out * w_out * self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1)
            as u64
    }

    fn check_operands(&self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Shape> {
        self.validate()?;
        if x.shape().c != self.in_channels {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("input has {} channels, spec expects {}", x.shape().c, self.in_channels),
            });
        }
        if w.shape() != self.weight_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d weights",
                lhs: w.shape(),
                rhs: self.weight_shape(),
            });
        }
        match (b, self.has_bias) {
            (Some(b), true) if b.shape() != Shape::vector(self.out_channels) => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape(),
                    rhs: Shape::vector(self.out_channels),
                })
            }
            (Some(_), true) | (None, false) => {}
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    msg: "bias presence disagrees with spec".into(),
                })
            }
        }
        let s = x.shape();
        let (ho, wo) = self.output_hw(s.h, s.w)?;
        Ok(Shape::new(s.n, self.out_channels, ho, wo))
    }
}

/// o ∈ [lo, hi) such that 0 ≤ o + offset < in_len, clipped to o < out_len.
#[inline]
fn valid_range(offset: isize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (in_len as isize - offset).min(out_len as isize);
    if hi <= lo as isize {
        (0, 0)
    } else {
        (lo, hi as usize)
    }
}

fn fill_bias(out: &mut Tensor, b: Option<&Tensor>) {
    if let Some(b) = b {
        let s = out.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                let v = b.data()[c];
                out.plane_mut(n, c).fill(v);
            }
        }
    }
}

/// Forward convolution through the fastest applicable path.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let out_shape = spec.check_operands(x, w, b)?;
    let mut out = Tensor::zeros(out_shape);
    fill_bias(&mut out, b);
    if spec.is_pointwise() {
        pointwise_forward(x, w, &mut out);
    } else if spec.is_depthwise() && spec.stride == (1, 1) {
        depthwise_forward(x, w, spec, &mut out);
    } else {
        im2col_forward(x, w, spec, &mut out);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to the requested operands.
#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let mut grads = ConvGrads::default();
    if need_input {
        let mut dx = Tensor::zeros(x.shape());
        if spec.is_pointwise() {
            pointwise_backward_input(w, grad_out, &mut dx);
        } else if spec.is_depthwise() && spec.stride == (1, 1) {
            depthwise_backward_input(w, spec, grad_out, &mut dx);
        } else {
            im2col_backward_input(w, spec, grad_out, &mut dx);
        }
        grads.input = Some(dx);
    }
    if need_weight {
        let mut dw = Tensor::zeros(w.shape());
        if spec.is_pointwise() {
            pointwise_backward_weight(x, grad_out, &mut dw);
        } else if spec.is_depthwise() && spec.stride == (1, 1) {
            depthwise_backward_weight(x, spec, grad_out, &mut dw);
        } else {
            im2col_backward_weight(x, spec, grad_out, &mut dw);
        }
        grads.weight = Some(dw);
    }
    if need_bias {
        let s = grad_out.shape();
        let mut db = Tensor::zeros(Shape::vector(s.c));
        for n in 0..s.n {
            for c in 0..s.c {
                db.data_mut()[c] += grad_out.plane(n, c).iter().sum::<f64>();
            }
        }
        grads.bias = Some(db);
    }
    grads
}

fn pointwise_forward(x: &Tensor, w: &Tensor, out: &mut Tensor) {
    let xs = x.shape();
    let (ci, co, p) = (xs.c, out.shape().c, xs.plane());
    for n in 0..xs.n {
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        let on = &mut out.data_mut()[n * co * p..(n + 1) * co * p];
        gemm(co, ci, p, w.data(), ci, 1, xn, p, 1, 1.0, on, p, 1);
    }
}

fn pointwise_backward_input(w: &Tensor, dy: &Tensor, dx: &mut Tensor) {
    let s = dx.shape();
    let (ci, co, p) = (s.c, dy.shape().c, s.plane());
    for n in 0..s.n {
        let dyn_ = &dy.data()[n * co * p..(n + 1) * co * p];
        let dxn = &mut dx.data_mut()[n * ci * p..(n + 1) * ci * p];
        // dX = Wᵀ·dY
        gemm(ci, co, p, w.data(), 1, ci, dyn_, p, 1, 0.0, dxn, p, 1);
    }
}

fn pointwise_backward_weight(x: &Tensor, dy: &Tensor, dw: &mut Tensor) {
    let s = x.shape();
    let (ci, co, p) = (s.c, dy.shape().c, s.plane());
    for n in 0..s.n {
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        let dyn_ = &dy.data()[n * co * p..(n + 1) * co * p];
        // dW += dY·Xᵀ
        gemm(co, p, ci, dyn_, p, 1, xn, 1, p, 1.0, dw.data_mut(), ci, 1);
    }
}

/// Tap offsets (row, col) of a stride-1 kernel relative to the output position.
fn tap_offset(spec: &ConvSpec, ki: usize, kj: usize) -> (isize, isize) {
    (
        (ki * spec.dilation.0) as isize - spec.padding.0 as isize,
        (kj * spec.dilation.1) as isize - spec.padding.1 as isize,
    )
}

fn depthwise_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec, out: &mut Tensor) {
    let xs = x.shape();
    let os = out.shape();
    let (kh, kw) = spec.kernel;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let taps = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let dst = out.plane_mut(n, c);
            for ki in 0..kh {
                for kj in 0..kw {
                    let (oy, ox) = tap_offset(spec, ki, kj);
                    let (h0, h1) = valid_range(oy, os.h, xs.h);
                    let (w0, w1) = valid_range(ox, os.w, xs.w);
                    if h0 >= h1 || w0 >= w1 {
                        continue;
                    }
                    let wt = taps[ki * kw + kj];
                    let iw0 = (w0 as isize + ox) as usize;
                    for oh in h0..h1 {
                        let ih = (oh as isize + oy) as usize;
                        let s = &src[ih * xs.w + iw0..ih * xs.w + iw0 + (w1 - w0)];
                        let d = &mut dst[oh * os.w + w0..oh * os.w + w1];
                        for (d, s) in d.iter_mut().zip(s) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_input(w: &Tensor, spec: &ConvSpec, dy: &Tensor, dx: &mut Tensor) {
    let xs = dx.shape();
    let os = dy.shape();
    let (kh, kw) = spec.kernel;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = dy.plane(n, c);
            let taps = &w.data()[c * kh * kw..(c + 1) * kh * kw];
            let dst = dx.plane_mut(n, c);
            for ki in 0..kh {
                for kj in 0..kw {
                    let (oy, ox) = tap_offset(spec, ki, kj);
                    let (h0, h1) = valid_range(oy, os.h, xs.h);
                    let (w0, w1) = valid_range(ox, os.w, xs.w);
                    if h0 >= h1 || w0 >= w1 {
                        continue;
                    }
                    let wt = taps[ki * kw + kj];
                    let iw0 = (w0 as isize + ox) as usize;
                    for oh in h0..h1 {
                        let ih = (oh as isize + oy) as usize;
                        let s = &g[oh * os.w + w0..oh * os.w + w1];
                        let d = &mut dst[ih * xs.w + iw0..ih * xs.w + iw0 + (w1 - w0)];
                        for (d, s) in d.iter_mut().zip(s) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_weight(x: &Tensor, spec: &ConvSpec, dy: &Tensor, dw: &mut Tensor) {
    let xs = x.shape();
    let os = dy.shape();
    let (kh, kw) = spec.kernel;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let g = dy.plane(n, c);
            for ki in 0..kh {
                for kj in 0..kw {
                    let (oy, ox) = tap_offset(spec, ki, kj);
                    let (h0, h1) = valid_range(oy, os.h, xs.h);
                    let (w0, w1) = valid_range(ox, os.w, xs.w);
                    if h0 >= h1 || w0 >= w1 {
                        continue;
                    }
                    let iw0 = (w0 as isize + ox) as usize;
                    let mut acc = 0.0;
                    for oh in h0..h1 {
                        let ih = (oh as isize + oy) as usize;
                        let s = &src[ih * xs.w + iw0..ih * xs.w + iw0 + (w1 - w0)];
                        let d = &g[oh * os.w + w0..oh * os.w + w1];
                        acc += d.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dw.data_mut()[(c * kh + ki) * kw + kj] += acc;
                }
            }
        }
    }
}

/// Column matrix for one sample and group: rows (ci, ki, kj), columns (oh, ow).
fn im2col(x: &Tensor, n: usize, group: usize, spec: &ConvSpec, ho: usize, wo: usize, col: &mut [f64]) {
    let xs = x.shape();
    let cg = spec.in_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let p = ho * wo;
    col.fill(0.0);
    for ci in 0..cg {
        let src = x.plane(n, group * cg + ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ci * kh + ki) * kw + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * spec.stride.0 + ki * spec.dilation.0) as isize - spec.padding.0 as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..wo {
                        let iw = (ow * spec.stride.1 + kj * spec.dilation.1) as isize - spec.padding.1 as isize;
                        if iw >= 0 && iw < xs.w as isize {
                            row[oh * wo + ow] = src[ih * xs.w + iw as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(dcol: &[f64], n: usize, group: usize, spec: &ConvSpec, ho: usize, wo: usize, dx: &mut Tensor) {
    let xs = dx.shape();
    let cg = spec.in_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let p = ho * wo;
    for ci in 0..cg {
        let dst = dx.plane_mut(n, group * cg + ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &dcol[((ci * kh + ki) * kw + kj) * p..][..p];
                for oh in 0..ho {
                    let ih = (oh * spec.stride.0 + ki * spec.dilation.0) as isize - spec.padding.0 as isize;
                    if ih < 0 || ih >= xs.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for ow in 0..wo {
                        let iw = (ow * spec.stride.1 + kj * spec.dilation.1) as isize - spec.padding.1 as isize;
                        if iw >= 0 && iw < xs.w as isize {
                            dst[ih * xs.w + iw as usize] += row[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec, out: &mut Tensor) {
    let os = out.shape();
    let (ho, wo, p) = (os.h, os.w, os.plane());
    let cg = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let k = cg * spec.kernel.0 * spec.kernel.1;
    let mut col = vec![0.0; k * p];
    for n in 0..os.n {
        for g in 0..spec.groups {
            im2col(x, n, g, spec, ho, wo, &mut col);
            let wg = &w.data()[g * cog * k..(g + 1) * cog * k];
            let start = (n * os.c + g * cog) * p;
            let og = &mut out.data_mut()[start..start + cog * p];
            gemm(cog, k, p, wg, k, 1, &col, p, 1, 1.0, og, p, 1);
        }
    }
}

fn im2col_backward_input(w: &Tensor, spec: &ConvSpec, dy: &Tensor, dx: &mut Tensor) {
    let os = dy.shape();
    let (ho, wo, p) = (os.h, os.w, os.plane());
    let cg = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let k = cg * spec.kernel.0 * spec.kernel.1;
    let mut dcol = vec![0.0; k * p];
    for n in 0..os.n {
        for g in 0..spec.groups {
            let wg = &w.data()[g * cog * k..(g + 1) * cog * k];
            let start = (n * os.c + g * cog) * p;
            let dyg = &dy.data()[start..start + cog * p];
            // dcol = W_gᵀ·dY_g
            gemm(k, cog, p, wg, 1, k, dyg, p, 1, 0.0, &mut dcol, p, 1);
            col2im(&dcol, n, g, spec, ho, wo, dx);
        }
    }
}

fn im2col_backward_weight(x: &Tensor, spec: &ConvSpec, dy: &Tensor, dw: &mut Tensor) {
    let os = dy.shape();
    let (ho, wo, p) = (os.h, os.w, os.plane());
    let cg = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let k = cg * spec.kernel.0 * spec.kernel.1;
    let mut col = vec![0.0; k * p];
    for n in 0..os.n {
        for g in 0..spec.groups {
            im2col(x, n, g, spec, ho, wo, &mut col);
            let start = (n * os.c + g * cog) * p;
            let dyg = &dy.data()[start..start + cog * p];
            let dwg = &mut dw.data_mut()[g * cog * k..(g + 1) * cog * k];
            // dW_g += dY_g·colᵀ
            gemm(cog, p, k, dyg, p, 1, &col, 1, p, 1.0, dwg, k, 1);
        }
    }
}

/// Naive direct sum over every tap, padded zeros included. Adds one to
/// `multiplies` per product evaluated.
pub fn conv2d_reference(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    spec: &ConvSpec,
    multiplies: &mut u64,
) -> Result<Tensor> {
    let os = spec.check_operands(x, w, b)?;
    let xs = x.shape();
    let cg = spec.in_channels / spec.groups;
    let cog = spec.out_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let mut out = Tensor::zeros(os);
    for n in 0..os.n {
        for co in 0..os.c {
            let g = co / cog;
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cg {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * spec.stride.0 + ki * spec.dilation.0) as isize - spec.padding.0 as isize;
                                let iw = (ow * spec.stride.1 + kj * spec.dilation.1) as isize - spec.padding.1 as isize;
                                let v = if ih >= 0 && iw >= 0 && (ih as usize) < xs.h && (iw as usize) < xs.w {
                                    x.at(n, g * cg + ci, ih as usize, iw as usize)
                                } else {
                                    0.0
                                };
                                acc += w.at(co, ci, ki, kj) * v;
                                *multiplies += 1;
                            }
                        }
                    }
                    out.set(n, co, oh, ow, acc);
                }
            }
        }
    }
    Ok(out)
}
