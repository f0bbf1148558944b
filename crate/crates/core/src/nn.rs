//! Layer primitives: convolution, pooling, bilinear resampling and the
//! logistic loss, each with its backward rule.

use rand::Rng;

use crate::autodiff::{sigmoid, Backward, BackwardCtx};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamStore};
use crate::{linalg, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = (input + 2 * padding).checked_sub(kernel)?;
    (span % stride == 0).then_some(span / stride + 1)
}

/// Unfolds one image `[C×H×W]` into `[C·kh·kw × out_h·out_w]`.
fn im2col<S: Real>(img: &[S], g: &ConvGeometry) -> Vec<S> {
    let l = g.out_len();
    let mut cols = vec![S::zero(); g.patch_len() * l];
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im<S: Real>(cols: &[S], g: &ConvGeometry, img: &mut [S]) {
    let l = g.out_len();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * l;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += cols[row + oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geom: ConvGeometry,
    has_bias: bool,
}

impl<S: Real> Backward<S> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let g = &self.geom;
        let (x, w, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let n = x.shape()[0];
        let o = w.shape()[0];
        let (k, l) = (g.patch_len(), g.out_len());
        let in_len = g.channels * g.height * g.width;

        let mut dx = ctx.needs[0].then(|| vec![S::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![S::zero(); w.numel()]);
        let wt = dx.as_ref().map(|_| linalg::transpose(w.data(), o, k));

        for b in 0..n {
            let dy_b = &dy.data()[b * o * l..(b + 1) * o * l];
            if let Some(dw) = dw.as_mut() {
                let cols = im2col(&x.data()[b * in_len..(b + 1) * in_len], g);
                let cols_t = linalg::transpose(&cols, k, l);
                linalg::gemm_acc(dy_b, &cols_t, dw, o, l, k);
            }
            if let (Some(dx), Some(wt)) = (dx.as_mut(), wt.as_ref()) {
                let dcols = linalg::gemm(wt, dy_b, k, o, l);
                col2im(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }

        let db = (self.has_bias && ctx.needs[2]).then(|| {
            let mut acc = vec![S::zero(); o];
            for b in 0..n {
                for (oc, a) in acc.iter_mut().enumerate() {
                    let start = (b * o + oc) * l;
                    *a += dy.data()[start..start + l].iter().copied().sum::<S>();
                }
            }
            Tensor::from_parts(vec![o], acc)
        });

        let mut out = vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        ];
        if self.has_bias {
            out.push(db);
        }
        out
    }
}

struct PoolBackward {
    factor: usize,
    max: bool,
}

impl<S: Real> Backward<S> for PoolBackward {
    fn name(&self) -> &'static str {
        if self.max {
            "max_pool"
        } else {
            "avg_pool"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let x = ctx.inputs[0];
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let f = self.factor;
        let (oh, ow) = (h / f, w / f);
        let mut dx = vec![S::zero(); x.numel()];
        let inv = S::one() / S::of((f * f) as f64);
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = ctx.grad.data()[plane * oh * ow + oy * ow + ox];
                    if self.max {
                        let at = block_argmax(src, w, oy * f, ox * f, f);
                        dst[at] += g;
                    } else {
                        for dy in 0..f {
                            for dxx in 0..f {
                                dst[(oy * f + dy) * w + ox * f + dxx] += g * inv;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

/// Flat index of the block maximum; the first in row-major order wins ties.
fn block_argmax<S: Real>(plane: &[S], width: usize, y0: usize, x0: usize, f: usize) -> usize {
    let mut best = y0 * width + x0;
    for y in y0..y0 + f {
        for x in x0..x0 + f {
            if plane[y * width + x] > plane[best] {
                best = y * width + x;
            }
        }
    }
    best
}

/// Per-output-index source pair and weights for align-corners=false bilinear.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

fn resize_planes<S: Real>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Vec<S> {
    let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![S::zero(); nc * out_h * out_w];
    for plane in 0..nc {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = S::of(wy0 * wx0) * src[y0 * w + x0]
                    + S::of(wy0 * wx1) * src[y0 * w + x1]
                    + S::of(wy1 * wx0) * src[y1 * w + x0]
                    + S::of(wy1 * wx1) * src[y1 * w + x1];
                dst[oy * out_w + ox] = v;
            }
        }
    }
    out
}

/// Untracked align-corners=false bilinear resize in either direction.
pub fn resize_bilinear<S: Real>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    let (n, c, _, _) = x.dims4("resize_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "zero target size"));
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], resize_planes(x, out_h, out_w)))
}

struct UpsampleBackward;

impl<S: Real> Backward<S> for UpsampleBackward {
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let x = ctx.inputs[0];
        let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let (out_h, out_w) = (ctx.grad.shape()[2], ctx.grad.shape()[3]);
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut dx = vec![S::zero(); x.numel()];
        for plane in 0..nc {
            let g = &ctx.grad.data()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let gv = g[oy * out_w + ox];
                    dst[y0 * w + x0] += S::of(wy0 * wx0) * gv;
                    dst[y0 * w + x1] += S::of(wy0 * wx1) * gv;
                    dst[y1 * w + x0] += S::of(wy1 * wx0) * gv;
                    dst[y1 * w + x1] += S::of(wy1 * wx1) * gv;
                }
            }
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

struct BceBackward;

impl<S: Real> Backward<S> for BceBackward {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (z, t) = (ctx.inputs[0], ctx.inputs[1]);
        let scale = ctx.grad.data()[0] / S::of(z.numel() as f64);
        let dz = ctx.needs[0].then(|| z.zip_map(t, "bce", |z, t| (sigmoid(z) - t) * scale).expect("same shape"));
        let dt = ctx.needs[1].then(|| z.map(|z| -z * scale));
        vec![dz, dt]
    }
}

struct GlobalAvgPoolBackward;

impl<S: Real> Backward<S> for GlobalAvgPoolBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let x = ctx.inputs[0];
        let hw = x.shape()[2] * x.shape()[3];
        let inv = S::one() / S::of(hw as f64);
        let mut dx = Vec::with_capacity(x.numel());
        for &g in ctx.grad.data() {
            dx.extend(std::iter::repeat(g * inv).take(hw));
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

struct ChannelScaleBackward;

impl<S: Real> Backward<S> for ChannelScaleBackward {
    fn name(&self) -> &'static str {
        "channel_scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (x, s, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let hw = x.shape()[2] * x.shape()[3];
        let dx = ctx.needs[0].then(|| {
            let mut d = g.data().to_vec();
            for (chunk, &sv) in d.chunks_mut(hw).zip(s.data()) {
                chunk.iter_mut().for_each(|v| *v *= sv);
            }
            Tensor::from_parts(x.shape().to_vec(), d)
        });
        let ds = ctx.needs[1].then(|| {
            let d = g
                .data()
                .chunks(hw)
                .zip(x.data().chunks(hw))
                .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                .collect();
            Tensor::from_parts(s.shape().to_vec(), d)
        });
        vec![dx, ds]
    }
}

impl<S: Real> Tape<S> {
    /// Cross-correlation of `x [N×C×H×W]` with `weight [O×C×kh×kw]` plus an
    /// optional `bias [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("conv2d")?;
        let (o, wc, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wc != c {
            return Err(Error::shape("conv2d", self.shape(x), self.shape(weight)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", self.shape(weight), self.shape(b)));
            }
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) else {
            return Err(Error::invalid(
                "conv2d",
                format!("{h}×{w} input with {kh}×{kw} kernel, stride {stride}, padding {padding} has no integral output size"),
            ));
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        };

        let (k, l) = (geom.patch_len(), geom.out_len());
        let in_len = c * h * w;
        let mut out = vec![S::zero(); n * o * l];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            for b in 0..n {
                let cols = im2col(&xd[b * in_len..(b + 1) * in_len], &geom);
                let dst = &mut out[b * o * l..(b + 1) * o * l];
                if let Some(bias) = bias {
                    for (row, &bv) in dst.chunks_mut(l).zip(self.value(bias).data()) {
                        row.fill(bv);
                    }
                }
                linalg::gemm_acc(wd, &cols, dst, o, k, l);
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let value = Tensor::from_parts(vec![n, o, out_h, out_w], out);
        self.push(
            value,
            inputs,
            Conv2dBackward {
                geom,
                has_bias: bias.is_some(),
            },
        )
    }

    fn pool(&mut self, x: Var, factor: usize, max: bool) -> Result<Var> {
        let op = if max { "max_pool" } else { "avg_pool" };
        let input = self.value(x);
        let (n, c, h, w) = input.dims4(op)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(op, format!("{h}×{w} is not divisible by factor {factor}")));
        }
        let (oh, ow) = (h / factor, w / factor);
        let inv = S::one() / S::of((factor * factor) as f64);
        let mut out = vec![S::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &input.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = if max {
                        src[block_argmax(src, w, oy * factor, ox * factor, factor)]
                    } else {
                        let mut acc = S::zero();
                        for y in oy * factor..(oy + 1) * factor {
                            for v in &src[y * w + ox * factor..y * w + (ox + 1) * factor] {
                                acc += *v;
                            }
                        }
                        acc * inv
                    };
                    out[plane * oh * ow + oy * ow + ox] = v;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        self.push(value, vec![x], PoolBackward { factor, max })
    }

    /// Mean over non-overlapping `factor × factor` blocks.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.pool(x, factor, false)
    }

    /// Max over non-overlapping `factor × factor` blocks.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.pool(x, factor, true)
    }

    /// Bilinear upsampling (align-corners=false) to at least the input size.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let input = self.value(x);
        let (_, _, h, w) = input.dims4("upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear", "zero target size"));
        }
        if out_h < h || out_w < w {
            return Err(Error::invalid(
                "upsample_bilinear",
                format!("target {out_h}×{out_w} is smaller than input {h}×{w}"),
            ));
        }
        let value = resize_bilinear(input, out_h, out_w)?;
        self.push(value, vec![x], UpsampleBackward)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, in
    /// the overflow-free form `max(z,0) − z·t + log(1 + e^−|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (z, t) = (self.value(logits), self.value(target));
        if z.shape() != t.shape() {
            return Err(Error::shape("bce_with_logits", z.shape(), t.shape()));
        }
        if t.data().iter().any(|&v| !(S::zero()..=S::one()).contains(&v)) {
            return Err(Error::invalid("bce_with_logits", "targets must lie in [0, 1]"));
        }
        let total: S = z
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &t)| z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / S::of(z.numel() as f64));
        self.push(value, vec![logits, target], BceBackward)
    }

    /// Per-channel spatial mean: `[N×C×H×W] → [N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (n, c, h, w) = input.dims4("global_avg_pool")?;
        let inv = S::one() / S::of((h * w) as f64);
        let data = input.data().chunks(h * w).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        self.push(Tensor::from_parts(vec![n, c], data), vec![x], GlobalAvgPoolBackward)
    }

    /// Multiplies channel `c` of sample `n` by `scales[n, c]`.
    pub fn channel_scale(&mut self, x: Var, scales: Var) -> Result<Var> {
        let (input, s) = (self.value(x), self.value(scales));
        let (n, c, h, w) = input.dims4("channel_scale")?;
        if s.shape() != [n, c] {
            return Err(Error::shape("channel_scale", input.shape(), s.shape()));
        }
        let mut data = input.data().to_vec();
        for (chunk, &sv) in data.chunks_mut(h * w).zip(s.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        let value = Tensor::from_parts(input.shape().to_vec(), data);
        self.push(value, vec![x, scales], ChannelScaleBackward)
    }
}

/// A square-kernel convolution layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers an odd-kernel convolution with "same" padding. Weights use
    /// He-uniform initialization; the bias starts at zero.
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "only odd kernels are supported");
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, 6f64.sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<Var> {
        tape.conv2d(x, params[self.weight], Some(params[self.bias]), self.stride, self.padding)
    }
}
