//! Saliency evaluation: precision/recall threshold sweeps, F-measure and MAE.
//!
//! Predictions are binarized with `P ≥ t` for `t = i / (n − 1)`. Confusion
//! counts are pooled over the whole set (micro-averaging) unless
//! [`Averaging::PerImage`] is requested. An empty denominator defines the
//! corresponding precision or recall as 1.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::{Real, Tensor};

/// Default F-measure weight β².
pub const BETA_SQ: f64 = 0.3;
pub const DEFAULT_THRESHOLDS: usize = 256;
pub const PR_CSV_HEADER: &str = "# saliency-pr-curve v1";
pub const SUMMARY_CSV_HEADER: &str = "# saliency-summary v1";

/// A prediction in `[0, 1]` and its strictly binary ground truth.
#[derive(Clone, Debug)]
pub struct EvalPair {
    prediction: Vec<f64>,
    positive: Vec<bool>,
    shape: Vec<usize>,
}

impl EvalPair {
    pub fn new<S: Real>(prediction: &Tensor<S>, ground_truth: &Tensor<S>) -> Result<Self> {
        if prediction.shape() != ground_truth.shape() {
            return Err(Error::shape("eval pair", prediction.shape(), ground_truth.shape()));
        }
        let pred: Vec<f64> = prediction.data().iter().map(|v| v.as_f64()).collect();
        if pred.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("eval pair", "predictions must lie in [0, 1]"));
        }
        let positive = ground_truth
            .data()
            .iter()
            .map(|v| match v.as_f64() {
                x if x == 1.0 => Ok(true),
                x if x == 0.0 => Ok(false),
                x => Err(Error::invalid("eval pair", format!("ground truth must be binary, found {x}"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            prediction: pred,
            positive,
            shape: prediction.shape().to_vec(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn abs_error(&self) -> f64 {
        let total: f64 = self
            .prediction
            .iter()
            .zip(&self.positive)
            .map(|(&p, &g)| (p - if g { 1.0 } else { 0.0 }).abs())
            .sum();
        total / self.prediction.len() as f64
    }

    fn confusion_at(&self, t: f64) -> Confusion {
        let mut c = Confusion::default();
        for (&p, &g) in self.prediction.iter().zip(&self.positive) {
            match (p >= t, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    /// Confusion counts at every threshold `i / (n − 1)` in one pass.
    fn sweep(&self, thresholds: &[f64]) -> Vec<Confusion> {
        let n = thresholds.len();
        // hist[k] counts pixels whose highest satisfied threshold index is k
        let mut pos = vec![0u64; n + 1];
        let mut neg = vec![0u64; n + 1];
        for (&p, &g) in self.prediction.iter().zip(&self.positive) {
            let slot = satisfied_count(p, thresholds);
            if g {
                pos[slot] += 1;
            } else {
                neg[slot] += 1;
            }
        }
        let total_pos: u64 = pos.iter().sum();
        let mut out = vec![Confusion::default(); n];
        let (mut tp, mut fp) = (0u64, 0u64);
        for i in (0..n).rev() {
            // pixels with slot > i satisfy threshold i
            tp += pos[i + 1];
            fp += neg[i + 1];
            out[i] = Confusion {
                tp,
                fp,
                fn_: total_pos - tp,
            };
        }
        out
    }
}

/// Number of thresholds (a prefix of the increasing list) with `t ≤ p`.
fn satisfied_count(p: f64, thresholds: &[f64]) -> usize {
    thresholds.partition_point(|&t| t <= p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    fn merge(self, other: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

fn nonempty(pairs: &[EvalPair], op: &'static str) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::invalid(op, "no prediction/ground-truth pairs"))
    } else {
        Ok(())
    }
}

/// Mean over images of the per-image mean absolute error.
pub fn mae(pairs: &[EvalPair]) -> Result<f64> {
    nonempty(pairs, "mae")?;
    Ok(pairs.iter().map(EvalPair::abs_error).sum::<f64>() / pairs.len() as f64)
}

/// Pooled precision and recall with predictions binarized at `P ≥ t`.
pub fn pr_at_threshold(pairs: &[EvalPair], t: f64) -> Result<(f64, f64)> {
    nonempty(pairs, "pr_at_threshold")?;
    let c = pairs
        .iter()
        .map(|p| p.confusion_at(t))
        .fold(Confusion::default(), Confusion::merge);
    Ok((c.precision(), c.recall()))
}

/// Weighted harmonic mean of precision and recall; 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    // (1+β²)pr / (β²p + r) rewritten as p · r / (r + w(p − r)) with
    // w = β²/(1+β²), so that p = r yields p · 1 exactly
    let w = beta_sq / (1.0 + beta_sq);
    let denom = recall + w * (precision - recall);
    if denom == 0.0 {
        0.0
    } else {
        precision * (recall / denom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Averaging {
    /// Confusion counts summed over all images before dividing.
    #[default]
    Pooled,
    /// Precision and recall computed per image, then averaged.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_thresholds: usize,
    pub beta_sq: f64,
    pub averaging: Averaging,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_thresholds: DEFAULT_THRESHOLDS,
            beta_sq: BETA_SQ,
            averaging: Averaging::Pooled,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// One point per threshold, thresholds strictly increasing.
    pub pr_curve: Vec<PrPoint>,
    pub max_f: f64,
    pub mean_f: f64,
    pub mae: f64,
    pub beta_sq: f64,
}

pub fn thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub fn evaluate(pairs: &[EvalPair], n_thresholds: usize) -> Result<MetricsReport> {
    evaluate_with(
        pairs,
        EvalOptions {
            n_thresholds,
            ..EvalOptions::default()
        },
    )
}

pub fn evaluate_with(pairs: &[EvalPair], opts: EvalOptions) -> Result<MetricsReport> {
    nonempty(pairs, "evaluate")?;
    if opts.n_thresholds < 2 {
        return Err(Error::invalid("evaluate", "need at least two thresholds"));
    }
    let ts = thresholds(opts.n_thresholds);
    let sweeps: Vec<Vec<Confusion>> = pairs.iter().map(|p| p.sweep(&ts)).collect();

    let pr_curve: Vec<PrPoint> = ts
        .iter()
        .enumerate()
        .map(|(i, &threshold)| {
            let (precision, recall) = match opts.averaging {
                Averaging::Pooled => {
                    let c = sweeps.iter().map(|s| s[i]).fold(Confusion::default(), Confusion::merge);
                    (c.precision(), c.recall())
                }
                Averaging::PerImage => {
                    let n = sweeps.len() as f64;
                    let p = sweeps.iter().map(|s| s[i].precision()).sum::<f64>() / n;
                    let r = sweeps.iter().map(|s| s[i].recall()).sum::<f64>() / n;
                    (p, r)
                }
            };
            PrPoint {
                threshold,
                precision,
                recall,
                f: f_measure(precision, recall, opts.beta_sq),
            }
        })
        .collect();

    let max_f = pr_curve.iter().map(|p| p.f).fold(0.0, f64::max);
    let mean_f = pr_curve.iter().map(|p| p.f).sum::<f64>() / pr_curve.len() as f64;
    Ok(MetricsReport {
        pr_curve,
        max_f,
        mean_f,
        mae: mae(pairs)?,
        beta_sq: opts.beta_sq,
    })
}

impl MetricsReport {
    pub fn write_pr_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{PR_CSV_HEADER}")?;
        writeln!(w, "threshold,precision,recall,f")?;
        for p in &self.pr_curve {
            writeln!(w, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f)?;
        }
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{SUMMARY_CSV_HEADER}")?;
        writeln!(w, "max_f,mean_f,mae,beta_sq")?;
        writeln!(w, "{},{},{},{}", self.max_f, self.mean_f, self.mae, self.beta_sq)
    }

    /// `max_f=0.9123 mean_f=0.8011 mae=0.0456`
    pub fn summary_line(&self) -> String {
        format!("max_f={:.4} mean_f={:.4} mae={:.4}", self.max_f, self.mean_f, self.mae)
    }
}
