//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use saliency_core::Tensor;

pub fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

pub fn g(t: &Tensor<f64>, index: &[usize]) -> f64 {
    t.get(index).unwrap()
}

pub fn assert_close(a: &Tensor<f64>, b: &[f64], tol: f64) {
    assert_eq!(a.numel(), b.len());
    for (i, (x, y)) in a.data().iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

pub fn conv_reference(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = x.dims4("x").unwrap();
    let (o, _, kh, kw) = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let z = (j * stride + v) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                    acc += g(&x, &[b, ic, y as usize, z as usize]) * g(&w, &[oc, ic, u, v]);
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

/// Literal per-pixel windowed attention: for every output pixel, project,
/// score every in-image neighbour, normalize, and average the values.
pub fn attention_reference(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, k: usize) -> Vec<f64> {
    let (n, c, h, w) = x.dims4("x").unwrap();
    let r = (k / 2) as isize;
    let project = |m: &Tensor<f64>, b: usize, i: usize, j: usize| -> Vec<f64> {
        (0..c)
            .map(|o| (0..c).map(|ci| g(&m, &[o, ci]) * g(&x, &[b, ci, i, j])).sum())
            .collect()
    };
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let q = project(wq, b, i, j);
                let mut scores = Vec::new();
                let mut values = Vec::new();
                for di in -r..=r {
                    for dj in -r..=r {
                        let (y, z) = (i as isize + di, j as isize + dj);
                        if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                            continue;
                        }
                        let key = project(wk, b, y as usize, z as usize);
                        scores.push(q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>());
                        values.push(project(wv, b, y as usize, z as usize));
                    }
                }
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for ch in 0..c {
                    out[((b * c + ch) * h + i) * w + j] = e.iter().zip(&values).map(|(a, v)| a / z * v[ch]).sum();
                }
            }
        }
    }
    out
}

/// Mean over non-overlapping `f×f` blocks.
pub fn avg_pool_reference(x: &Tensor<f64>, f: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("x").unwrap();
    let (oh, ow) = (h / f, w / f);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..f {
                        for v in 0..f {
                            acc += g(x, &[b, ch, i * f + u, j * f + v]);
                        }
                    }
                    out.push(acc / (f * f) as f64);
                }
            }
        }
    }
    Tensor::from_f64([n, c, oh, ow], &out).unwrap()
}

/// Bilinear sampling at `(o + 0.5)·in/out − 0.5`, edge-clamped.
pub fn bilinear_reference(x: &Tensor<f64>, oh: usize, ow: usize) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("x").unwrap();
    let coord = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(inp - 1);
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                let (y0, y1, fy) = coord(i, h, oh);
                for j in 0..ow {
                    let (x0, x1, fx) = coord(j, w, ow);
                    let top = (1.0 - fx) * g(x, &[b, ch, y0, x0]) + fx * g(x, &[b, ch, y0, x1]);
                    let bottom = (1.0 - fx) * g(x, &[b, ch, y1, x0]) + fx * g(x, &[b, ch, y1, x1]);
                    out.push((1.0 - fy) * top + fy * bottom);
                }
            }
        }
    }
    Tensor::from_f64([n, c, oh, ow], &out).unwrap()
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let (n, _, h, w) = parts[0].dims4("x").unwrap();
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            out.extend_from_slice(&p.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::from_f64([n, total, h, w], &out).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
