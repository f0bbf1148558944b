//! Squeeze-and-excitation channel attention for the lateral connections.
//!
//! squeeze: per-channel spatial mean. excite: `sigmoid(fc2(relu(fc1(p))))`.
//! rescale: every channel multiplied by its excitation in `(0, 1)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, BoundParams, ParamId, ParamStore};
use crate::{Real, Tape, Tensor, Var};

/// Parameters of one SE block: `fc1: C → C/r` and `fc2: C/r → C`, each with
/// a zero-initialized bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SqueezeExcite {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub channels: usize,
    pub reduction: usize,
}

impl SqueezeExcite {
    pub fn new<S: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "channel_attention",
                format!("reduction {reduction} must divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1_weight: store.add(format!("{name}.fc1.weight"), fan_in_uniform(&[channels, hidden], channels, 1.0, rng)),
            fc1_bias: store.add(format!("{name}.fc1.bias"), Tensor::zeros([hidden])),
            fc2_weight: store.add(format!("{name}.fc2.weight"), fan_in_uniform(&[hidden, channels], hidden, 1.0, rng)),
            fc2_bias: store.add(format!("{name}.fc2.bias"), Tensor::zeros([channels])),
            channels,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, params: &BoundParams, x: Var) -> Result<Var> {
        channel_attention(tape, x, self, params)
    }
}

/// Global average pooling: `[N×C×H×W] → [N×C]`.
pub fn squeeze<S: Real>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

/// Channel descriptors `[N×C]` to excitations in `(0, 1)`.
pub fn excite<S: Real>(tape: &mut Tape<S>, pooled: Var, se: &SqueezeExcite, params: &BoundParams) -> Result<Var> {
    let shape = tape.shape(pooled).to_vec();
    if shape.len() != 2 || shape[1] != se.channels {
        return Err(Error::shape("excite", &shape, &[shape.first().copied().unwrap_or(1), se.channels]));
    }
    let h = tape.matmul(pooled, params[se.fc1_weight])?;
    let h = tape.add_row_bias(h, params[se.fc1_bias])?;
    let h = tape.relu(h)?;
    let s = tape.matmul(h, params[se.fc2_weight])?;
    let s = tape.add_row_bias(s, params[se.fc2_bias])?;
    tape.sigmoid(s)
}

/// `x̂_c = s_c · x_c` for every channel.
pub fn rescale<S: Real>(tape: &mut Tape<S>, x: Var, scales: Var) -> Result<Var> {
    tape.channel_scale(x, scales)
}

pub fn channel_attention<S: Real>(tape: &mut Tape<S>, x: Var, se: &SqueezeExcite, params: &BoundParams) -> Result<Var> {
    let pooled = squeeze(tape, x)?;
    let scales = excite(tape, pooled, se, params)?;
    rescale(tape, x, scales)
}
