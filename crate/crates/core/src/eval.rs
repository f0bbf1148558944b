//! Model evaluation over a dataset.
//!
//! Predictions are quantized to 8 bits before scoring, the same levels that
//! [`crate::dataio::write_saliency_pgm`] stores. Scoring the in-memory maps and
//! scoring the dumped files therefore give identical numbers.

use crate::dataio::{resize_chw, to_level, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_with, EvalOptions, EvalPair, MetricsReport};
use crate::model::Model;
use crate::{Real, Tensor};

/// `round(p × 255) / 255`.
pub fn quantize<S: Real>(p: &Tensor<S>) -> Tensor<S> {
    p.map(|v| S::of(f64::from(to_level(v.as_f64())) / 255.0))
}

/// Probability map `[1×H×W]` for an image `[3×H×W]` of any size.
///
/// The image is resized to the model's input size and the prediction is
/// resized back. The result is quantized.
pub fn predict_image<S: Real>(model: &Model<S>, image: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = match *image.shape() {
        [_, h, w] => (h, w),
        _ => return Err(Error::invalid("predict", format!("expected C×H×W, got {:?}", image.shape()))),
    };
    let (ih, iw) = model.config().input_size;
    let input = resize_chw(image, ih, iw)?;
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let probs = model.predict(&input.reshape(shape)?)?.reshape(vec![1, ih, iw])?;
    let probs = resize_chw(&probs, h, w)?.map(|v| v.max(S::zero()).min(S::one()));
    Ok(quantize(&probs))
}

pub fn predict_sample<S: Real>(model: &Model<S>, sample: &Sample<S>) -> Result<Tensor<S>> {
    predict_image(model, &sample.image)
}

pub fn predict_dataset<S: Real>(model: &Model<S>, samples: &[Sample<S>]) -> Result<Vec<Tensor<S>>> {
    samples.iter().map(|s| predict_sample(model, s)).collect()
}

pub fn evaluate_predictions<S: Real>(
    predictions: &[Tensor<S>],
    samples: &[Sample<S>],
    opts: EvalOptions,
) -> Result<MetricsReport> {
    let pairs = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| EvalPair::new(p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with(&pairs, opts)
}

pub fn evaluate_model<S: Real>(model: &Model<S>, samples: &[Sample<S>], opts: EvalOptions) -> Result<MetricsReport> {
    evaluate_predictions(&predict_dataset(model, samples)?, samples, opts)
}
