//! Finite-difference gradient checks for every differentiable op, the two
//! attention composites and the full model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::LocalAttention;
use crate::autodiff::{gradcheck_coords, DIFFERENTIABLE_OPS};
use crate::channel_attention::SqueezeExcite;
use crate::error::Result;
use crate::model::{build_model, ModelConfig};
use crate::params::{BoundParams, ParamStore};
use crate::psam::{Psam, PsamSettings};
use crate::{Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Central-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Op,
    Composite,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub component: String,
    pub kind: Kind,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    /// Registered ops without a check; empty when coverage is complete.
    pub uncovered_ops: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.uncovered_ops.is_empty() && self.results.iter().all(CheckResult::passed)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<20} {:<10} {:>12} {:>10}  status\n", "component", "kind", "max_rel_err", "tolerance");
        for r in &self.results {
            let kind = match r.kind {
                Kind::Op => "op",
                Kind::Composite => "composite",
                Kind::Model => "model",
            };
            out.push_str(&format!(
                "{:<20} {:<10} {:>12.3e} {:>10.0e}  {}\n",
                r.component,
                kind,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            ));
        }
        for op in &self.uncovered_ops {
            out.push_str(&format!("{op:<20} op         (no check registered)  FAIL\n"));
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Op whose backward rule is deliberately broken on every analytic tape.
    pub corrupt: Option<String>,
    /// Skip the full-model check.
    pub skip_model: bool,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    loss: Loss,
}

/// Values in `±[0.1, 1]`, away from the kinks of relu and ties of max-pool.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::<f64>::uniform(shape, 0.1, 1.0, rng);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element gets its own
/// upstream weight.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn unary(name: &'static str, x: Tensor<f64>, out_shape: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Case {
    let r = rand(out_shape, rng);
    Case {
        name,
        inputs: vec![x],
        loss: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            project(t, y, &r)
        }),
    }
}

fn binary(name: &'static str, a: Tensor<f64>, b: Tensor<f64>, out_shape: &[usize], rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Case {
    let r = rand(out_shape, rng);
    Case {
        name,
        inputs: vec![a, b],
        loss: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            project(t, y, &r)
        }),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = Vec::new();
    let s = [2, 3];
    cases.push(binary("add", rand(&s, rng), rand(&s, rng), &s, rng, |t, a, b| t.add(a, b)));
    cases.push(binary("sub", rand(&s, rng), rand(&[1], rng), &s, rng, |t, a, b| t.sub(a, b)));
    cases.push(binary("mul", rand(&s, rng), rand(&s, rng), &s, rng, |t, a, b| t.mul(a, b)));
    cases.push(unary("relu", away_from_zero(&s, rng), &s, rng, |t, x| t.relu(x)));
    cases.push(unary("sigmoid", rand(&s, rng), &s, rng, |t, x| t.sigmoid(x)));
    cases.push(unary("scale", rand(&s, rng), &s, rng, |t, x| t.scale(x, -1.7)));
    cases.push(binary("matmul", rand(&[2, 3], rng), rand(&[3, 4], rng), &[2, 4], rng, |t, a, b| t.matmul(a, b)));
    cases.push(unary("softmax", rand(&[3, 4], rng), &[3, 4], rng, |t, x| t.softmax(x, 1)));
    cases.push(binary("concat", rand(&[2, 1, 3], rng), rand(&[2, 2, 3], rng), &[2, 3, 3], rng, |t, a, b| t.concat(&[a, b], 1)));
    cases.push(unary("slice", rand(&[3, 4], rng), &[3, 2], rng, |t, x| t.slice(x, 1, 1, 2)));
    cases.push(unary("sum", rand(&s, rng), &[1], rng, |t, x| t.sum(x)));
    cases.push(unary("mean", rand(&s, rng), &[1], rng, |t, x| t.mean(x)));
    cases.push(unary("reshape", rand(&s, rng), &[3, 2], rng, |t, x| t.reshape(x, &[3, 2])));
    cases.push(binary("add_row_bias", rand(&[3, 4], rng), rand(&[4], rng), &[3, 4], rng, |t, x, b| t.add_row_bias(x, b)));

    let r1 = rand(&[2, 3, 5, 5], rng);
    let r2 = rand(&[2, 3, 3, 3], rng);
    cases.push(Case {
        name: "conv2d",
        inputs: vec![rand(&[2, 2, 5, 5], rng), rand(&[3, 2, 3, 3], rng), rand(&[3], rng)],
        loss: Box::new(move |t, v| {
            let same = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let strided = t.conv2d(v[0], v[1], None, 2, 1)?;
            let a = project(t, same, &r1)?;
            let b = project(t, strided, &r2)?;
            t.add(a, b)
        }),
    });
    cases.push(unary("avg_pool", rand(&[1, 2, 4, 4], rng), &[1, 2, 2, 2], rng, |t, x| t.avg_pool(x, 2)));
    cases.push(unary("max_pool", rand(&[1, 2, 4, 4], rng), &[1, 2, 2, 2], rng, |t, x| t.max_pool(x, 2)));
    cases.push(unary("upsample_bilinear", rand(&[1, 2, 2, 3], rng), &[1, 2, 5, 7], rng, |t, x| {
        t.upsample_bilinear(x, 5, 7)
    }));
    let target = Tensor::uniform([2, 3], 0.0, 1.0, rng);
    cases.push(Case {
        name: "bce_with_logits",
        inputs: vec![rand(&[2, 3], rng).map(|v| 4.0 * v)],
        loss: Box::new(move |t, v| {
            let y = t.constant(target.clone());
            t.bce_with_logits(v[0], y)
        }),
    });
    cases.push(unary("global_avg_pool", rand(&[2, 3, 2, 2], rng), &[2, 3], rng, |t, x| t.global_avg_pool(x)));
    cases.push(binary("channel_scale", rand(&[2, 3, 2, 2], rng), rand(&[2, 3], rng), &[2, 3, 2, 2], rng, |t, x, s| {
        t.channel_scale(x, s)
    }));
    cases.push(binary("channel_mix", rand(&[2, 3, 2, 2], rng), rand(&[4, 3], rng), &[2, 4, 2, 2], rng, |t, x, w| {
        t.channel_mix(x, w)
    }));
    let r = rand(&[2, 3, 4, 5], rng);
    cases.push(Case {
        name: "window_attention",
        inputs: (0..3).map(|_| rand(&[2, 3, 4, 5], rng)).collect(),
        loss: Box::new(move |t, v| {
            let y = t.window_attention(v[0], v[1], v[2], 3)?;
            project(t, y, &r)
        }),
    });
    cases
}

fn all_coords(inputs: &[Tensor<f64>]) -> Vec<(usize, usize)> {
    inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect()
}

fn with_corruption<'a>(loss: &'a Loss, corrupt: &Option<String>) -> impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a {
    let corrupt = corrupt.clone();
    move |tape: &mut Tape<f64>, vars: &[Var]| {
        if let Some(op) = &corrupt {
            tape.corrupt_backward(op);
        }
        loss(tape, vars)
    }
}

/// A layer checked through its input and every one of its parameters.
fn layer_case(
    name: &'static str,
    x: Tensor<f64>,
    store: ParamStore<f64>,
    r: Tensor<f64>,
    forward: impl Fn(&mut Tape<f64>, &BoundParams, Var) -> Result<Var> + 'static,
) -> Case {
    let mut inputs = vec![x];
    inputs.extend(store.tensors().iter().cloned());
    Case {
        name,
        inputs,
        loss: Box::new(move |t, v| {
            let params = BoundParams::from_vars(v[1..].to_vec());
            let y = forward(t, &params, v[0])?;
            project(t, y, &r)
        }),
    }
}

fn composite_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    let mut store = ParamStore::new();
    let c = 4;
    let psam = Psam::new(&mut store, "psam", c, PsamSettings::default(), rng)?;
    let x = rand(&[1, c, 8, 8], rng);
    let r = rand(&[1, c, 8, 8], rng);
    let psam_case = layer_case("psam", x, store, r, move |t, p, x| Ok(psam.forward(t, p, x)?.fused));

    let mut store = ParamStore::new();
    let se = SqueezeExcite::new(&mut store, "se", 8, 4, rng)?;
    // non-zero biases so their gradients are exercised at a generic point
    for t in store.tensors_mut() {
        *t = rand(t.shape(), rng);
    }
    let x = rand(&[2, 8, 3, 3], rng);
    let r = rand(&[2, 8, 3, 3], rng);
    let se_case = layer_case("channel_attention", x, store, r, move |t, p, x| se.forward(t, p, x));

    let mut store = ParamStore::new();
    let attn = LocalAttention::new(&mut store, "attn", 3, 3, rng)?;
    let x = rand(&[2, 3, 4, 4], rng);
    let r = rand(&[2, 3, 4, 4], rng);
    let attn_case = layer_case("local_attention", x, store, r, move |t, p, x| attn.forward(t, p, x));
    Ok(vec![attn_case, psam_case, se_case])
}

/// Full model on a `1×3×64×64` input: 20 randomly sampled parameter
/// coordinates plus a few input pixels, BCE against a random binary mask.
pub fn check_model(seed: u64, corrupt: &Option<String>) -> Result<CheckResult> {
    let cfg = ModelConfig::desk();
    let model = build_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (h, w) = cfg.input_size;
    let image = Tensor::uniform([1, 3, h, w], 0.0, 1.0, &mut rng);
    let mask = Tensor::uniform([1, 1, h, w], 0.0, 1.0, &mut rng).map(|v| if v < 0.3 { 1.0 } else { 0.0 });

    let mut inputs = vec![image];
    inputs.extend(model.params().tensors().iter().cloned());
    let mut coords = Vec::new();
    for _ in 0..20 {
        let which = rng.gen_range(1..inputs.len());
        coords.push((which, rng.gen_range(0..inputs[which].numel())));
    }
    for _ in 0..4 {
        coords.push((0, rng.gen_range(0..inputs[0].numel())));
    }
    let loss: Loss = Box::new(move |t, v| {
        let params = BoundParams::from_vars(v[1..].to_vec());
        let logits = model.forward(t, &params, v[0])?;
        let y = t.constant(mask.clone());
        t.bce_with_logits(logits, y)
    });
    let err = gradcheck_coords(with_corruption(&loss, corrupt), &inputs, &coords, STEP)?;
    Ok(CheckResult {
        component: "full_model".into(),
        kind: Kind::Model,
        max_rel_error: err,
        tolerance: MODEL_TOLERANCE,
        coordinates: coords.len(),
    })
}

pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results = Vec::new();
    for case in op_cases(&mut rng) {
        let coords = all_coords(&case.inputs);
        let err = gradcheck_coords(with_corruption(&case.loss, &opts.corrupt), &case.inputs, &coords, STEP)?;
        results.push(CheckResult {
            component: case.name.into(),
            kind: Kind::Op,
            max_rel_error: err,
            tolerance: OP_TOLERANCE,
            coordinates: coords.len(),
        });
    }
    for case in composite_cases(&mut rng)? {
        let coords = all_coords(&case.inputs);
        let err = gradcheck_coords(with_corruption(&case.loss, &opts.corrupt), &case.inputs, &coords, STEP)?;
        results.push(CheckResult {
            component: case.name.into(),
            kind: Kind::Composite,
            max_rel_error: err,
            tolerance: COMPOSITE_TOLERANCE,
            coordinates: coords.len(),
        });
    }
    if !opts.skip_model {
        results.push(check_model(opts.seed, &opts.corrupt)?);
    }
    let uncovered_ops = DIFFERENTIABLE_OPS
        .iter()
        .filter(|op| !results.iter().any(|r| r.kind == Kind::Op && r.component == **op))
        .map(|op| op.to_string())
        .collect();
    Ok(SuiteReport { results, uncovered_ops })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_has_a_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let names: Vec<_> = op_cases(&mut rng).iter().map(|c| c.name).collect();
        for op in DIFFERENTIABLE_OPS {
            assert!(names.contains(op), "{op} has no gradient check");
        }
    }
}
