//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 drive the `saliency` binary end to end on the pinned
//! synthetic benchmark and take several minutes.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::attention::local_self_attention;
use saliency_core::channel_attention::{excite, squeeze, SqueezeExcite};
use saliency_core::dataio::{synthesize, Sample, SyntheticSpec};
use saliency_core::metrics::{evaluate, f_measure, mae, pr_at_threshold, EvalPair, BETA_SQ};
use saliency_core::params::ParamStore;
use saliency_core::psam::{Psam, PsamSettings};
use saliency_core::trainer::{train, TrainConfig};
use saliency_core::verify::{run_suite, SuiteOptions};
use saliency_core::{build_model, ModelConfig, Tape, Tensor, Variant};

/// Benchmark pins for the ablation.
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;
const MODEL_SEED: u64 = 0;
const TREND_MARGIN: f64 = 0.005;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn c1_gradients() -> Outcome {
    let report = run_suite(&SuiteOptions::default()).map_err(|e| e.to_string())?;
    let worst = report
        .results
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0, f64::max);
    let failed: Vec<_> = report.results.iter().filter(|r| !r.passed()).map(|r| r.component.clone()).collect();
    check(
        report.passed(),
        format!("{} components, worst error at {:.2} of its tolerance", report.results.len(), worst),
        format!("failed: {failed:?}, uncovered: {:?}", report.uncovered_ops),
    )
}

/// Literal per-pixel attention: masked softmax over the k×k window.
fn attention_loop(x: &Tensor<f64>, wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, k: usize) -> Vec<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let at = |b: usize, ch: usize, i: usize, j: usize| x.data()[((b * c + ch) * h + i) * w + j];
    let project = |m: &Tensor<f64>, b, i, j| -> Vec<f64> {
        (0..c).map(|o| (0..c).map(|q| m.data()[o * c + q] * at(b, q, i, j)).sum()).collect()
    };
    let r = (k / 2) as isize;
    let mut out = vec![0.0; x.numel()];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let q = project(wq, b, i, j);
                let mut logits = Vec::new();
                let mut values = Vec::new();
                for a in -r..=r {
                    for bb in -r..=r {
                        let (y, z) = (i as isize + a, j as isize + bb);
                        if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                            continue;
                        }
                        let key = project(wk, b, y as usize, z as usize);
                        logits.push(q.iter().zip(&key).map(|(p, s)| p * s).sum::<f64>());
                        values.push(project(wv, b, y as usize, z as usize));
                    }
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for o in 0..c {
                    out[((b * c + o) * h + i) * w + j] = e.iter().zip(&values).map(|(e, v)| e / z * v[o]).sum();
                }
            }
        }
    }
    out
}

fn c2_attention_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(1..=6)];
        let c = shape[1];
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let x = Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng);
        let w: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::uniform([c, c], -1.0, 1.0, &mut rng)).collect();
        let expect = attention_loop(&x, &w[0], &w[1], &w[2], k);
        let mut tape = Tape::new();
        let v: Vec<_> = std::iter::once(&x).chain(&w).map(|t| tape.constant(t.clone())).collect();
        let out = local_self_attention(&mut tape, v[0], v[1], v[2], v[3], k).map_err(|e| e.to_string())?;
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-10, format!("20 seeds, max deviation {worst:.1e}"), format!("max deviation {worst:.3e} > 1e-10"))
}

fn c3_metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bad_f = (0..100).map(|_| rng.gen::<f64>()).filter(|&p| f_measure(p, p, BETA_SQ) != p).count();
    let gt = Tensor::<f64>::from_f64([4, 4], &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 0., 0., 0., 0., 0., 0.]).unwrap();
    let pair = |p: &Tensor<f64>| EvalPair::new(p, &gt).map_err(|e| e.to_string());
    let perfect = evaluate(&[pair(&gt)?], 256).map_err(|e| e.to_string())?;
    let inverted = mae(&[pair(&gt.map(|v| 1.0 - v))?]).map_err(|e| e.to_string())?;
    let p = Tensor::<f64>::from_f64([2, 2], &[0.9, 0.6, 0.2, 0.1]).unwrap();
    let g = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let hand = pr_at_threshold(&[EvalPair::new(&p, &g).unwrap()], 0.5).map_err(|e| e.to_string())?;
    check(
        bad_f == 0 && perfect.max_f == 1.0 && perfect.mae == 0.0 && inverted == 1.0 && hand == (0.5, 1.0),
        "F(p,p)=p for 100 p; perfect 1/0; inverted mae 1; 2×2 case P 0.5 R 1".into(),
        format!(
            "F mismatches {bad_f}, perfect ({}, {}), inverted {inverted}, 2×2 {hand:?}",
            perfect.max_f, perfect.mae
        ),
    )
}

fn c4_channel_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let se = SqueezeExcite::new(&mut store, "se", 16, 4, &mut rng).map_err(|e| e.to_string())?;
    for t in store.tensors_mut() {
        *t = Tensor::uniform(t.shape().to_vec(), -1.0, 1.0, &mut rng);
    }
    let mut violations = 0;
    for trial in 0..100 {
        let scale = [0.1, 1.0, 10.0, 100.0][trial % 4];
        let x = Tensor::<f64>::uniform([2, 16, 5, 5], -scale, scale, &mut rng);
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let v = tape.constant(x.clone());
        let pooled = squeeze(&mut tape, v).map_err(|e| e.to_string())?;
        let s = excite(&mut tape, pooled, &se, &params).map_err(|e| e.to_string())?;
        violations += tape.value(s).data().iter().filter(|&&s| !(s > 0.0 && s < 1.0)).count();
        let out = se.forward(&mut tape, &params, v).map_err(|e| e.to_string())?;
        violations += tape.value(out).data().iter().zip(x.data()).filter(|(o, i)| o.abs() > i.abs()).count();
    }
    check(violations == 0, "100 inputs, all excitations in (0,1), no amplification".into(), format!("{violations} violations"))
}

fn c5_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    for trial in 0..10 {
        let c = rng.gen_range(1..=5);
        let mut store = ParamStore::new();
        let psam = Psam::new(&mut store, "p", c, PsamSettings::default(), &mut rng).map_err(|e| e.to_string())?;
        let side = 8 * rng.gen_range(1..=3);
        let x = Tensor::<f64>::uniform([1, c, side, side], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let v = tape.constant(x);
        let out = psam.forward(&mut tape, &params, v).map_err(|e| e.to_string())?;
        if tape.shape(out.pre_fuse)[1] != 4 * c || tape.shape(out.fused) != [1, c, side, side] {
            problems.push(format!("psam C={c}: pre-fuse {:?}", tape.shape(out.pre_fuse)));
        }

        let first_stride = [1, 2][rng.gen_range(0..2)];
        let scales = [vec![1, 2, 4], vec![2, 2, 2], vec![1, 1, 2]][rng.gen_range(0..3)].clone();
        let unit = 8 * first_stride * scales.iter().max().unwrap();
        let cfg = ModelConfig {
            input_size: (unit * rng.gen_range(1..=2), unit * rng.gen_range(1..=2)),
            in_channels: 3,
            backbone_channels: (0..4).map(|_| rng.gen_range(2..=8)).collect(),
            first_stride,
            blocks_per_stage: rng.gen_range(0..=1),
            fpn_channels: 4,
            psam: PsamSettings { scales, window: 3 },
            se_reduction: 2,
            variant: Variant::ALL[trial % 3],
        };
        let model = build_model::<f64>(&cfg, trial as u64).map_err(|e| e.to_string())?;
        let n = rng.gen_range(1..=2);
        let (h, w) = cfg.input_size;
        let logits = model
            .logits(&Tensor::uniform([n, 3, h, w], 0.0, 1.0, &mut rng))
            .map_err(|e| e.to_string())?;
        if logits.shape() != [n, 1, h, w] {
            problems.push(format!("{cfg:?} gave {:?}", logits.shape()));
        }
    }
    check(problems.is_empty(), "pre-fuse 4C and N×1×H×W logits over 10 configs".into(), problems.join("; "))
}

fn c6_overfit() -> Outcome {
    let (rgb, mask) = synthesize(&SyntheticSpec::default(), 0);
    let sample = Sample::new(rgb.to_tensor(), mask.to_tensor(), "overfit").map_err(|e| e.to_string())?;
    let mut model = build_model::<f64>(&ModelConfig::desk(), MODEL_SEED).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 1,
        phase1_epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &vec![sample; 300], &cfg, None).map_err(|e| e.to_string())?;
    let hit = report.log.iter().position(|r| r.loss < 0.05);
    let last = report.final_loss().unwrap_or(f64::NAN);
    match hit {
        Some(step) => Ok(format!("BCE < 0.05 at step {}, final {last:.4}", step + 1)),
        None => Err(format!("BCE never below 0.05 in 300 steps, final {last:.4}")),
    }
}

fn saliency(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_saliency"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn c7_ablation(root: &Path) -> Outcome {
    let seed = MODEL_SEED.to_string();
    let out = root.join("ablation");
    saliency(&[
        "ablate", "--train", s(&root.join("train")), "--test", s(&root.join("test")), "--out", s(&out), "--profile",
        "desk", "--seed", &seed, "--threads", "1",
    ])?;
    let csv = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let mut f = std::collections::HashMap::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        f.insert(cols[0].to_string(), cols[1].parse::<f64>().map_err(|e| e.to_string())?);
    }
    let (b, sa, full) = (f["baseline"], f["baseline-sa"], f["full"]);
    let summary = format!("max_f baseline {b:.4}, baseline-sa {sa:.4}, full {full:.4}");
    check(
        full - b >= TREND_MARGIN && sa >= b - TREND_MARGIN && sa <= full + TREND_MARGIN,
        summary.clone(),
        format!("{summary}; need full − baseline ≥ {TREND_MARGIN} and baseline-sa within the band"),
    )
}

fn c8_determinism(root: &Path) -> Outcome {
    let mut artifacts = Vec::new();
    for run in ["run_a", "run_b"] {
        let dir = root.join(run);
        saliency(&[
            "train", "--data", s(&root.join("train")), "--out", s(&dir.join("train")), "--profile", "desk", "--epochs",
            "1", "--seed", "0", "--threads", "1",
        ])?;
        saliency(&[
            "eval", "--checkpoint", s(&dir.join("train/final.ckpt")), "--data", s(&root.join("test")), "--out",
            s(&dir.join("eval")),
        ])?;
        let mut bytes = Vec::new();
        for f in ["train/epoch_001.ckpt", "train/final.ckpt", "eval/pr_curve.csv", "eval/summary.csv"] {
            bytes.push(fs::read(dir.join(f)).map_err(|e| e.to_string())?);
        }
        artifacts.push(bytes);
    }
    check(
        artifacts[0] == artifacts[1],
        "two 1-epoch train+eval runs are byte-identical".into(),
        "checkpoints or reports differ between runs".into(),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let bench = saliency(&["generate", "--out", s(&root.join("train")), "--n", "200", "--seed", &TRAIN_SEED.to_string()])
        .and_then(|_| saliency(&["generate", "--out", s(&root.join("test")), "--n", "50", "--seed", &TEST_SEED.to_string()]));

    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient suite", Duration::from_secs(120), Box::new(c1_gradients)),
        ("2 attention oracle", Duration::from_secs(10), Box::new(c2_attention_oracle)),
        ("3 metric identities", Duration::from_secs(1), Box::new(c3_metric_identities)),
        ("4 channel-attention bounds", Duration::from_secs(5), Box::new(c4_channel_bounds)),
        ("5 shape contracts", Duration::from_secs(30), Box::new(c5_shapes)),
        ("6 single-sample overfit", Duration::from_secs(180), Box::new(c6_overfit)),
        ("7 ablation trend", Duration::from_secs(45 * 60), Box::new(|| {
            bench.clone()?;
            c7_ablation(root)
        })),
        ("8 determinism", Duration::from_secs(300), Box::new(|| {
            bench.clone()?;
            c8_determinism(root)
        })),
    ];

    let mut failures = 0;
    for (name, budget, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > *budget => Err(format!("{msg}; took {took:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} ({took:.1?})"),
            Err(msg) => {
                failures += 1;
                println!("FAIL criterion {name}: {msg} ({took:.1?})");
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
