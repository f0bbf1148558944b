//! Stand-alone windowed self-attention.
//!
//! Every pixel `x_ij` forms a query `W_Q x_ij` and attends over the `k × k`
//! block centred on it: keys `W_K x` and values `W_V x` of each neighbour,
//! weights `softmax(qᵀk)` over the block, output the weighted sum of values.
//! Neighbours outside the image are masked out of the softmax rather than
//! zero-padded. There is no positional term and no `1/√d` logit scaling.

use rand::Rng;

use crate::autodiff::{Backward, BackwardCtx};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamStore};
use crate::{linalg, Real, Tape, Tensor, Var};

struct ChannelMixBackward;

impl<S: Real> Backward<S> for ChannelMixBackward {
    fn name(&self) -> &'static str {
        "channel_mix"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (x, w, dy) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let o = w.shape()[0];
        let mut dx = ctx.needs[0].then(|| vec![S::zero(); x.numel()]);
        let mut dw = ctx.needs[1].then(|| vec![S::zero(); w.numel()]);
        let wt = linalg::transpose(w.data(), o, c);
        for b in 0..n {
            let xb = &x.data()[b * c * hw..(b + 1) * c * hw];
            let dyb = &dy.data()[b * o * hw..(b + 1) * o * hw];
            if let Some(dw) = dw.as_mut() {
                let xt = linalg::transpose(xb, c, hw);
                linalg::gemm_acc(dyb, &xt, dw, o, hw, c);
            }
            if let Some(dx) = dx.as_mut() {
                linalg::gemm_acc(&wt, dyb, &mut dx[b * c * hw..(b + 1) * c * hw], c, o, hw);
            }
        }
        vec![
            dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        ]
    }
}

/// Pixel-major copy `[HW × C]` of one channel-major image `[C × HW]`.
fn pixel_major<S: Real>(img: &[S], c: usize, hw: usize) -> Vec<S> {
    linalg::transpose(img, c, hw)
}

/// In-bounds neighbours of `(i, j)` in a centred `window × window` block,
/// as flat pixel indices in row-major order.
fn neighbours(i: usize, j: usize, h: usize, w: usize, window: usize) -> impl Iterator<Item = usize> {
    let r = (window / 2) as isize;
    let (i, j) = (i as isize, j as isize);
    (-r..=r).flat_map(move |di| (-r..=r).map(move |dj| (i + di, j + dj))).filter_map(move |(y, x)| {
        (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then(|| y as usize * w + x as usize)
    })
}

/// Softmax weights of one pixel over its valid neighbours.
fn window_softmax<S: Real>(q: &[S], keys: &[S], c: usize, nbrs: &[usize], out: &mut Vec<S>) {
    out.clear();
    out.extend(nbrs.iter().map(|&m| {
        let k = &keys[m * c..(m + 1) * c];
        q.iter().zip(k).map(|(&a, &b)| a * b).sum::<S>()
    }));
    let max = out.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

struct WindowAttentionBackward {
    window: usize,
}

impl<S: Real> Backward<S> for WindowAttentionBackward {
    fn name(&self) -> &'static str {
        "window_attention"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (q, k, v, g) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
        let (n, c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let hw = h * w;
        let mut dq = vec![S::zero(); q.numel()];
        let mut dk = vec![S::zero(); k.numel()];
        let mut dv = vec![S::zero(); v.numel()];
        let mut weights = Vec::new();
        let mut nbrs = Vec::new();
        let mut dlogit = Vec::new();

        for b in 0..n {
            let span = b * c * hw..(b + 1) * c * hw;
            let qt = pixel_major(&q.data()[span.clone()], c, hw);
            let kt = pixel_major(&k.data()[span.clone()], c, hw);
            let vt = pixel_major(&v.data()[span.clone()], c, hw);
            let gt = pixel_major(&g.data()[span.clone()], c, hw);
            let mut dqt = vec![S::zero(); c * hw];
            let mut dkt = vec![S::zero(); c * hw];
            let mut dvt = vec![S::zero(); c * hw];

            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    nbrs.clear();
                    nbrs.extend(neighbours(i, j, h, w, self.window));
                    let qp = &qt[p * c..(p + 1) * c];
                    window_softmax(qp, &kt, c, &nbrs, &mut weights);
                    let gp = &gt[p * c..(p + 1) * c];

                    // d(weight) = g·v, then through the softmax Jacobian.
                    dlogit.clear();
                    dlogit.extend(nbrs.iter().map(|&m| {
                        gp.iter().zip(&vt[m * c..(m + 1) * c]).map(|(&a, &b)| a * b).sum::<S>()
                    }));
                    let mean: S = weights.iter().zip(&dlogit).map(|(&a, &d)| a * d).sum();
                    for (d, &a) in dlogit.iter_mut().zip(&weights) {
                        *d = a * (*d - mean);
                    }

                    for ((&m, &a), &dl) in nbrs.iter().zip(&weights).zip(&dlogit) {
                        let (km, vm) = (m * c..(m + 1) * c, m * c..(m + 1) * c);
                        for ch in 0..c {
                            dvt[vm.start + ch] += a * gp[ch];
                            dqt[p * c + ch] += dl * kt[km.start + ch];
                            dkt[km.start + ch] += dl * qp[ch];
                        }
                    }
                }
            }
            dq[span.clone()].copy_from_slice(&linalg::transpose(&dqt, hw, c));
            dk[span.clone()].copy_from_slice(&linalg::transpose(&dkt, hw, c));
            dv[span].copy_from_slice(&linalg::transpose(&dvt, hw, c));
        }
        let shape = q.shape().to_vec();
        vec![
            ctx.needs[0].then(|| Tensor::from_parts(shape.clone(), dq)),
            ctx.needs[1].then(|| Tensor::from_parts(shape.clone(), dk)),
            ctx.needs[2].then(|| Tensor::from_parts(shape, dv)),
        ]
    }
}

fn check_window(window: usize) -> Result<()> {
    if window % 2 == 0 {
        return Err(Error::invalid("local_self_attention", format!("window {window} must be odd")));
    }
    Ok(())
}

impl<S: Real> Tape<S> {
    /// Per-pixel linear map `y[:, i, j] = W · x[:, i, j]` with `W [O×C]`.
    pub fn channel_mix(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (input, w) = (self.value(x), self.value(weight));
        let (n, c, h, wd) = input.dims4("channel_mix")?;
        let (o, wc) = w.dims2("channel_mix")?;
        if wc != c {
            return Err(Error::shape("channel_mix", input.shape(), w.shape()));
        }
        let hw = h * wd;
        let mut out = vec![S::zero(); n * o * hw];
        for b in 0..n {
            linalg::gemm_acc(
                w.data(),
                &input.data()[b * c * hw..(b + 1) * c * hw],
                &mut out[b * o * hw..(b + 1) * o * hw],
                o,
                c,
                hw,
            );
        }
        let value = Tensor::from_parts(vec![n, o, h, wd], out);
        self.push(value, vec![x, weight], ChannelMixBackward)
    }

    /// Masked `window × window` attention over precomputed queries, keys and
    /// values, all `[N×C×H×W]`.
    pub fn window_attention(&mut self, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
        check_window(window)?;
        let shape = self.shape(q).to_vec();
        for other in [k, v] {
            if self.shape(other) != shape.as_slice() {
                return Err(Error::shape("window_attention", &shape, self.shape(other)));
            }
        }
        let (n, c, h, w) = self.value(q).dims4("window_attention")?;
        let hw = h * w;
        let mut out = vec![S::zero(); n * c * hw];
        let mut weights = Vec::new();
        let mut nbrs = Vec::new();
        for b in 0..n {
            let span = b * c * hw..(b + 1) * c * hw;
            let qt = pixel_major(&self.value(q).data()[span.clone()], c, hw);
            let kt = pixel_major(&self.value(k).data()[span.clone()], c, hw);
            let vt = pixel_major(&self.value(v).data()[span.clone()], c, hw);
            let mut ot = vec![S::zero(); c * hw];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    nbrs.clear();
                    nbrs.extend(neighbours(i, j, h, w, window));
                    window_softmax(&qt[p * c..(p + 1) * c], &kt, c, &nbrs, &mut weights);
                    let dst = &mut ot[p * c..(p + 1) * c];
                    for (&m, &a) in nbrs.iter().zip(&weights) {
                        for (d, &val) in dst.iter_mut().zip(&vt[m * c..(m + 1) * c]) {
                            *d += a * val;
                        }
                    }
                }
            }
            out[span].copy_from_slice(&linalg::transpose(&ot, hw, c));
        }
        let value = Tensor::from_parts(shape, out);
        self.push(value, vec![q, k, v], WindowAttentionBackward { window })
    }
}

/// Windowed self-attention of `x [N×C×H×W]` with square projections
/// `w_q`, `w_k`, `w_v` of shape `[C×C]`.
pub fn local_self_attention<S: Real>(
    tape: &mut Tape<S>,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    window: usize,
) -> Result<Var> {
    check_window(window)?;
    let (_, c, _, _) = tape.value(x).dims4("local_self_attention")?;
    for w in [w_q, w_k, w_v] {
        if tape.shape(w) != [c, c] {
            return Err(Error::shape("local_self_attention", tape.shape(x), tape.shape(w)));
        }
    }
    let q = tape.channel_mix(x, w_q)?;
    let k = tape.channel_mix(x, w_k)?;
    let v = tape.channel_mix(x, w_v)?;
    tape.window_attention(q, k, v, window)
}

/// The softmax weights pixel `(i, j)` of image `batch` assigns to its valid
/// neighbours, in row-major neighbour order.
pub fn attention_weights<S: Real>(
    x: &Tensor<S>,
    w_q: &Tensor<S>,
    w_k: &Tensor<S>,
    window: usize,
    batch: usize,
    i: usize,
    j: usize,
) -> Result<Tensor<S>> {
    check_window(window)?;
    let (n, c, h, w) = x.dims4("attention_weights")?;
    if batch >= n || i >= h || j >= w {
        return Err(Error::invalid(
            "attention_weights",
            format!("pixel ({batch}, {i}, {j}) outside {:?}", x.shape()),
        ));
    }
    for m in [w_q, w_k] {
        if m.shape() != [c, c] {
            return Err(Error::shape("attention_weights", x.shape(), m.shape()));
        }
    }
    let hw = h * w;
    let img = pixel_major(&x.data()[batch * c * hw..(batch + 1) * c * hw], c, hw);
    let project = |m: &Tensor<S>, p: usize| -> Vec<S> {
        let px = &img[p * c..(p + 1) * c];
        m.data().chunks(c).map(|row| row.iter().zip(px).map(|(&a, &b)| a * b).sum()).collect()
    };
    let nbrs: Vec<usize> = neighbours(i, j, h, w, window).collect();
    let q = project(w_q, i * w + j);
    let mut keys = vec![S::zero(); c * hw];
    for &m in &nbrs {
        keys[m * c..(m + 1) * c].copy_from_slice(&project(w_k, m));
    }
    let mut weights = Vec::new();
    window_softmax(&q, &keys, c, &nbrs, &mut weights);
    Ok(Tensor::from_parts(vec![weights.len()], weights))
}

/// One self-attention layer: learned square query/key/value projections over
/// a centred odd window.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub channels: usize,
    pub window: usize,
}

impl LocalAttention {
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_window(window)?;
        let mut proj = |suffix: &str| store.add(format!("{name}.{suffix}"), fan_in_uniform(&[channels, channels], channels, 1.0, rng));
        let (w_q, w_k, w_v) = (proj("w_q"), proj("w_k"), proj("w_v"));
        Ok(Self {
            w_q,
            w_k,
            w_v,
            channels,
            window,
        })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<Var> {
        local_self_attention(tape, x, params[self.w_q], params[self.w_k], params[self.w_v], self.window)
    }
}
