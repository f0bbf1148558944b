//! Tape ops against straightforward reference loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::attention::{attention_weights, local_self_attention};
use saliency_core::{Tape, Tensor};

mod common;
use common::*;

fn forward1(x: &Tensor<f64>, op: impl Fn(&mut Tape<f64>, saliency_core::Var) -> saliency_core::Result<saliency_core::Var>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = op(&mut tape, v).unwrap();
    tape.value(out).clone()
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (m, k, n) in [(1, 1, 1), (3, 5, 2), (7, 4, 9)] {
        let a = rand(&[m, k], &mut rng);
        let b = rand(&[k, n], &mut rng);
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(va, vb).unwrap();
        assert_close(tape.value(out), &expect, 1e-12);
    }
}

#[test]
fn conv2d_matches_six_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (shape, o, k, stride, pad) in [
        ([1, 1, 4, 4], 1, 3, 1, 1),
        ([2, 3, 5, 5], 4, 3, 1, 1),
        ([2, 3, 5, 5], 2, 3, 2, 1),
        ([1, 2, 6, 4], 3, 1, 1, 0),
        ([1, 2, 7, 7], 2, 5, 1, 2),
    ] {
        let x = rand(&shape, &mut rng);
        let w = rand(&[o, shape[1], k, k], &mut rng);
        let b = rand(&[o], &mut rng);
        let (eshape, expect) = conv_reference(&x, &w, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.constant(x), tape.constant(w), tape.constant(b));
        let out = tape.conv2d(vx, vw, Some(vb), stride, pad).unwrap();
        assert_eq!(tape.shape(out), &eshape[..]);
        assert_close(tape.value(out), &expect, 1e-12);
    }
}

#[test]
fn pooling_matches_block_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand(&[2, 3, 8, 4], &mut rng);
    for f in [1, 2, 4] {
        let avg = forward1(&x, |t, v| t.avg_pool(v, f));
        let max = forward1(&x, |t, v| t.max_pool(v, f));
        let (oh, ow) = (8 / f, 4 / f);
        let mut ea = Vec::new();
        let mut em = Vec::new();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..oh {
                    for j in 0..ow {
                        let block: Vec<f64> = (0..f)
                            .flat_map(|u| (0..f).map(move |v| (u, v)))
                            .map(|(u, v)| g(&x, &[b, c, i * f + u, j * f + v]))
                            .collect();
                        ea.push(block.iter().sum::<f64>() / (f * f) as f64);
                        em.push(block.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                    }
                }
            }
        }
        assert_close(&avg, &ea, 1e-14);
        assert_close(&max, &em, 0.0);
    }
}

#[test]
fn bilinear_two_to_four_by_hand() {
    // align-corners=false: output o samples input position (o + 0.5)/2 − 0.5,
    // i.e. −0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
    let x = Tensor::from_f64([1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = forward1(&x, |t, v| t.upsample_bilinear(v, 4, 4));
    let row_weights = [0.0, 0.25, 0.75, 1.0];
    let mut expect = Vec::new();
    for &ry in &row_weights {
        for &rx in &row_weights {
            // f(y, x) = 2y + x is bilinear, so interpolation reproduces it
            expect.push(2.0 * ry + rx);
        }
    }
    assert_close(&y, &expect, 1e-15);
}

#[test]
fn bce_matches_naive_formula_and_stays_finite() {
    let z = Tensor::<f64>::from_f64([6], &[-3.0, -0.5, 0.0, 0.1, 2.0, 5.0]).unwrap();
    let t = Tensor::<f64>::from_f64([6], &[0.0, 1.0, 0.5, 1.0, 0.0, 1.0]).unwrap();
    let naive: f64 = z
        .data()
        .iter()
        .zip(t.data())
        .map(|(&z, &t)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 6.0;
    let mut tape = Tape::new();
    let (vz, vt) = (tape.constant(z), tape.constant(t));
    let l = tape.bce_with_logits(vz, vt).unwrap();
    assert!((tape.value(l).item().unwrap() - naive).abs() < 1e-14);

    // |z| = 800: the naive form overflows, the loss is |z| for a wrong label
    let z = Tensor::<f64>::from_f64([2], &[800.0, -800.0]).unwrap();
    let t = Tensor::<f64>::from_f64([2], &[0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let (vz, vt) = (tape.constant(z), tape.constant(t));
    let l = tape.bce_with_logits(vz, vt).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 800.0);
}

#[test]
fn softmax_matches_direct_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand(&[3, 5], &mut rng).map(|v| 10.0 * v);
    let y = forward1(&x, |t, v| t.softmax(v, 1));
    let mut expect = Vec::new();
    for r in 0..3 {
        let row = &x.data()[r * 5..r * 5 + 5];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        expect.extend(row.iter().map(|v| v.exp() / z));
    }
    assert_close(&y, &expect, 1e-14);
}

#[test]
fn local_attention_matches_per_pixel_loop() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=4),
            rng.gen_range(1..=6),
            rng.gen_range(1..=6),
        ];
        let c = shape[1];
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = rand(&shape, &mut rng);
        let (wq, wk, wv) = (rand(&[c, c], &mut rng), rand(&[c, c], &mut rng), rand(&[c, c], &mut rng));
        let expect = attention_reference(&x, &wq, &wk, &wv, k);
        let mut tape = Tape::new();
        let vars: Vec<_> = [&x, &wq, &wk, &wv].iter().map(|t| tape.constant((*t).clone())).collect();
        let out = local_self_attention(&mut tape, vars[0], vars[1], vars[2], vars[3], k).unwrap();
        assert_eq!(tape.shape(out), &shape);
        assert_close(tape.value(out), &expect, 1e-10);
    }
}

#[test]
fn attention_weights_are_normalized_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand(&[1, 3, 5, 5], &mut rng);
    let (wq, wk) = (rand(&[3, 3], &mut rng), rand(&[3, 3], &mut rng));
    let interior = attention_weights(&x, &wq, &wk, 3, 0, 2, 2).unwrap();
    assert_eq!(interior.numel(), 9);
    assert!((interior.sum() - 1.0).abs() < 1e-9);
    let corner = attention_weights(&x, &wq, &wk, 3, 0, 0, 4).unwrap();
    assert_eq!(corner.numel(), 4);
    assert!((corner.sum() - 1.0).abs() < 1e-9);
    assert!(attention_weights(&x, &wq, &wk, 3, 0, 5, 0).is_err());
}

#[test]
fn attention_is_translation_equivariant_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (h, w, c) = (9, 9, 2);
    let mut x = Tensor::<f64>::zeros([1, c, h, w]);
    for ch in 0..c {
        for i in 1..7 {
            for j in 1..7 {
                x.set(&[0, ch, i, j], rng.gen_range(-1.0..1.0)).unwrap();
            }
        }
    }
    let mut shifted = Tensor::<f64>::zeros([1, c, h, w]);
    for ch in 0..c {
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                shifted.set(&[0, ch, i + 1, j + 1], g(&x, &[0, ch, i, j])).unwrap();
            }
        }
    }
    let ws: Vec<_> = (0..3).map(|_| rand(&[c, c], &mut rng)).collect();
    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let v: Vec<_> = std::iter::once(input).chain(ws.iter()).map(|t| tape.constant(t.clone())).collect();
        let out = local_self_attention(&mut tape, v[0], v[1], v[2], v[3], 3).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(&x), run(&shifted));
    for ch in 0..c {
        for i in 1..h - 2 {
            for j in 1..w - 2 {
                let d = g(&a, &[0, ch, i, j]) - g(&b, &[0, ch, i + 1, j + 1]);
                assert!(d.abs() < 1e-9, "({i},{j}) differs by {d}");
            }
        }
    }
}
