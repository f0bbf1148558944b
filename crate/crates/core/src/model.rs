//! The full saliency network.
//!
//! A four-stage convolutional backbone produces `C2..C5` at strides
//! `s, 2s, 4s, 8s`. Each stage gets a 1×1 lateral projection to the pyramid
//! width. The pyramid self-attention module (when enabled) turns the `C5`
//! lateral into a global guidance map `G`, which becomes the top of the
//! top-down path and is also added, upsampled, at every merge:
//!
//! ```text
//! P5 = G                       (or lateral(C5) without PSAM)
//! Pi = smooth(CA(lateral(Ci)) + up(P(i+1)) + up(G)),  i = 4, 3, 2
//! logits = up(head(P2))
//! ```
//!
//! `CA` is squeeze-excite channel attention, present only in the full
//! variant. `smooth` is a 3×3 convolution followed by ReLU.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_attention::SqueezeExcite;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{BoundParams, ParamStore};
use crate::psam::{Psam, PsamSettings};
use crate::{Real, Tape, Tensor, Var};

/// Ablation variant, one per row of the comparison table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain FPN.
    Baseline,
    /// FPN plus pyramid self-attention.
    BaselineSa,
    /// FPN plus pyramid self-attention plus lateral channel attention.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::BaselineSa, Variant::Full];

    pub fn has_psam(self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn has_channel_attention(self) -> bool {
        matches!(self, Variant::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineSa => "baseline-sa",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "baseline-sa" | "baseline_sa" => Ok(Variant::BaselineSa),
            "full" => Ok(Variant::Full),
            other => Err(Error::invalid(
                "variant",
                format!("unknown variant {other:?}; expected one of baseline, baseline-sa, full"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `(height, width)` of the network input.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Width of each of the four backbone stages.
    pub backbone_channels: Vec<usize>,
    /// Output stride of the first stage; every later stage doubles it.
    pub first_stride: usize,
    /// Extra 3×3 conv + ReLU blocks after each stage's entry conv.
    pub blocks_per_stage: usize,
    pub fpn_channels: usize,
    pub psam: PsamSettings,
    pub se_reduction: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 inputs. The backbone runs at strides 2/4/8/16 so the top map is
    /// 4×4 and can be pooled by 1, 2 and 4.
    pub fn desk() -> Self {
        Self {
            input_size: (64, 64),
            in_channels: 3,
            backbone_channels: vec![16, 32, 64, 128],
            first_stride: 2,
            blocks_per_stage: 1,
            fpn_channels: 32,
            psam: PsamSettings {
                scales: vec![1, 2, 4],
                window: 3,
            },
            se_reduction: 4,
            variant: Variant::Full,
        }
    }

    /// ResNet-like strides 4/8/16/32 with pyramid scales 2/4/8, which needs
    /// inputs divisible by 256.
    pub fn reference() -> Self {
        Self {
            input_size: (256, 256),
            first_stride: 4,
            psam: PsamSettings::default(),
            ..Self::desk()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Stride of the top (C5) feature map.
    pub fn top_stride(&self) -> usize {
        self.first_stride << (self.backbone_channels.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("model config", msg));
        if self.backbone_channels.len() != 4 || self.backbone_channels.contains(&0) {
            return bad(format!("need four positive stage widths, got {:?}", self.backbone_channels));
        }
        if self.in_channels == 0 || self.fpn_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.first_stride == 0 || !self.first_stride.is_power_of_two() {
            return bad(format!("first stride {} must be a power of two", self.first_stride));
        }
        self.psam.validate()?;
        let (h, w) = self.input_size;
        let unit = if self.variant.has_psam() {
            self.top_stride() * self.psam.max_scale()
        } else {
            self.top_stride()
        };
        if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
            return bad(format!("input {h}×{w} must be divisible by {unit}"));
        }
        if self.variant.has_channel_attention() && (self.se_reduction == 0 || self.fpn_channels % self.se_reduction != 0) {
            return bad(format!(
                "SE reduction {} must divide {} pyramid channels",
                self.se_reduction, self.fpn_channels
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    params: ParamStore<S>,
    entries: Vec<Conv2d>,
    blocks: Vec<Vec<Conv2d>>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    head: Conv2d,
    psam: Option<Psam>,
    channel_attention: Vec<SqueezeExcite>,
}

/// Builds a model with every weight drawn from a generator seeded by `seed`.
///
/// Parameters shared by all variants are created first, so two variants
/// built from the same seed start from identical shared weights.
pub fn build_model<S: Real>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let widths = &config.backbone_channels;
    let fpn = config.fpn_channels;

    let mut entries = Vec::new();
    let mut blocks = Vec::new();
    let mut prev = config.in_channels;
    for (i, &width) in widths.iter().enumerate() {
        entries.push(Conv2d::new(&mut store, &format!("backbone.stage{i}.entry"), prev, width, 3, &mut rng));
        blocks.push(
            (0..config.blocks_per_stage)
                .map(|b| Conv2d::new(&mut store, &format!("backbone.stage{i}.block{b}"), width, width, 3, &mut rng))
                .collect(),
        );
        prev = width;
    }
    let laterals = widths
        .iter()
        .enumerate()
        .map(|(i, &width)| Conv2d::new(&mut store, &format!("lateral{i}"), width, fpn, 1, &mut rng))
        .collect();
    let smooth = (0..widths.len() - 1)
        .map(|i| Conv2d::new(&mut store, &format!("smooth{i}"), fpn, fpn, 3, &mut rng))
        .collect();
    let head = Conv2d::new(&mut store, "head", fpn, 1, 3, &mut rng);

    let psam = if config.variant.has_psam() {
        Some(Psam::new(&mut store, "psam", fpn, config.psam.clone(), &mut rng)?)
    } else {
        None
    };
    let channel_attention = if config.variant.has_channel_attention() {
        (0..widths.len() - 1)
            .map(|i| SqueezeExcite::new(&mut store, &format!("lateral{i}.se"), fpn, config.se_reduction, &mut rng))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(Model {
        config: config.clone(),
        params: store,
        entries,
        blocks,
        laterals,
        smooth,
        head,
        psam,
        channel_attention,
    })
}

impl<S: Real> Model<S> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn backbone(&self, tape: &mut Tape<S>, p: &BoundParams, images: Var) -> Result<Vec<Var>> {
        let mut x = images;
        let mut features = Vec::with_capacity(self.entries.len());
        for (i, (entry, blocks)) in self.entries.iter().zip(&self.blocks).enumerate() {
            if i == 0 {
                x = entry.forward(tape, p, x)?;
                x = tape.relu(x)?;
                if self.config.first_stride > 1 {
                    x = tape.max_pool(x, self.config.first_stride)?;
                }
            } else {
                x = tape.max_pool(x, 2)?;
                x = entry.forward(tape, p, x)?;
                x = tape.relu(x)?;
            }
            for block in blocks {
                x = block.forward(tape, p, x)?;
                x = tape.relu(x)?;
            }
            features.push(x);
        }
        Ok(features)
    }

    /// Logits `[N×1×H×W]` for images `[N×C×H×W]`, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape<S>, params: &BoundParams, images: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(images).dims4("forward")?;
        if c != self.config.in_channels || (h, w) != self.config.input_size {
            return Err(Error::ShapeMismatch {
                op: "forward",
                left: tape.shape(images).to_vec(),
                right: vec![0, self.config.in_channels, self.config.input_size.0, self.config.input_size.1],
            });
        }
        let features = self.backbone(tape, params, images)?;
        let top = features.len() - 1;
        let top_lateral = self.laterals[top].forward(tape, params, features[top])?;
        let guidance = match &self.psam {
            Some(psam) => Some(psam.forward(tape, params, top_lateral)?.fused),
            None => None,
        };

        let mut p = guidance.unwrap_or(top_lateral);
        for level in (0..top).rev() {
            let mut lateral = self.laterals[level].forward(tape, params, features[level])?;
            if let Some(se) = self.channel_attention.get(level) {
                lateral = se.forward(tape, params, lateral)?;
            }
            let (_, _, lh, lw) = tape.value(lateral).dims4("forward")?;
            let from_above = tape.upsample_bilinear(p, lh, lw)?;
            let mut merged = tape.add(lateral, from_above)?;
            if let Some(g) = guidance {
                let g_up = tape.upsample_bilinear(g, lh, lw)?;
                merged = tape.add(merged, g_up)?;
            }
            let smoothed = self.smooth[level].forward(tape, params, merged)?;
            p = tape.relu(smoothed)?;
        }
        let logits = self.head.forward(tape, params, p)?;
        tape.upsample_bilinear(logits, h, w)
    }

    /// Untracked logits for a batch of images.
    pub fn logits(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let params = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    /// Saliency probabilities in `(0, 1)`.
    pub fn predict(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.logits(images)?.map(crate::autodiff::sigmoid))
    }
}
