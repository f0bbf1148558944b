//! Pyramid self-attention over the top-most feature map.
//!
//! The input `X` is average-pooled to three scales, each scale passes through
//! its own windowed self-attention layer and is upsampled back to the input
//! resolution. The three branches are concatenated with `X` itself along the
//! channel axis (`[Y1, Y2, Y3, X]`, 4C channels) and a 1×1 convolution fuses
//! the result back to C channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LocalAttention;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{BoundParams, ParamStore};
use crate::{Real, Tape, Var};

/// Pyramid hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsamSettings {
    /// Downsampling factor of each pyramid level; exactly three.
    pub scales: Vec<usize>,
    /// Odd attention window used at every level.
    pub window: usize,
}

impl Default for PsamSettings {
    fn default() -> Self {
        Self {
            scales: vec![2, 4, 8],
            window: 3,
        }
    }
}

impl PsamSettings {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != 3 {
            return Err(Error::invalid(
                "psam",
                format!("expected exactly three scales, got {:?}", self.scales),
            ));
        }
        if self.scales.contains(&0) {
            return Err(Error::invalid("psam", "scales must be positive"));
        }
        if self.window % 2 == 0 {
            return Err(Error::invalid("psam", format!("window {} must be odd", self.window)));
        }
        Ok(())
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PsamOutput {
    /// `[N×C×H×W]` after the 1×1 fusion.
    pub fused: Var,
    /// `[N×4C×H×W]` concatenation `[Y1, Y2, Y3, X]`.
    pub pre_fuse: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Psam {
    pub settings: PsamSettings,
    pub branches: Vec<LocalAttention>,
    pub fuse: Conv2d,
    pub channels: usize,
}

impl Psam {
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        settings: PsamSettings,
        rng: &mut R,
    ) -> Result<Self> {
        settings.validate()?;
        let branches = (0..settings.scales.len())
            .map(|i| LocalAttention::new(store, &format!("{name}.branch{i}"), channels, settings.window, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), 4 * channels, channels, 1, rng);
        Ok(Self {
            settings,
            branches,
            fuse,
            channels,
        })
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<PsamOutput> {
        let (_, c, h, w) = tape.value(x).dims4("psam")?;
        if c != self.channels {
            return Err(Error::invalid("psam", format!("expected {} channels, got {c}", self.channels)));
        }
        let f = self.settings.max_scale();
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid("psam", format!("{h}×{w} is not divisible by scale {f}")));
        }
        let mut parts = Vec::with_capacity(4);
        for (&scale, branch) in self.settings.scales.iter().zip(&self.branches) {
            let pooled = tape.avg_pool(x, scale)?;
            let attended = branch.forward(tape, params, pooled)?;
            parts.push(tape.upsample_bilinear(attended, h, w)?);
        }
        parts.push(x);
        let pre_fuse = tape.concat(&parts, 1)?;
        let fused = self.fuse.forward(tape, params, pre_fuse)?;
        Ok(PsamOutput { fused, pre_fuse })
    }
}
