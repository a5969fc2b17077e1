//! Parameterised layers shared by the codec, denoiser and classifier.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Scalar, Tape, Var};

/// Groups for a normalisation over `channels`: 8 when possible, otherwise a
/// single group (layer normalisation).
pub fn norm_groups(channels: usize) -> usize {
    if channels >= 8 && channels % 8 == 0 {
        8
    } else {
        1
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain, rng);
        let b = store.add_const(format!("{name}.b"), &[cout], 0.0);
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d_bias(x, p[self.w], p[self.b], self.stride, self.pad)
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], fan_in, gain, rng);
        let b = store.add_const(format!("{name}.b"), &[fan_out], 0.0);
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.w], p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(format!("{name}.beta"), &[channels], 0.0);
        Self {
            gamma,
            beta,
            groups: norm_groups(channels),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.group_norm(x, p[self.gamma], p[self.beta], self.groups)
    }
}

/// Stacks `[C, H, W]` items picked by `idx` into a `[B, C, H, W]` batch.
pub fn gather_batch(items: &[crate::numerics::Tensor], idx: &[usize]) -> Result<crate::numerics::Tensor> {
    let picked: Vec<_> = idx.iter().map(|&i| items[i].unsqueeze0()).collect();
    crate::numerics::Tensor::stack0(&picked)
}

/// Cosine decay from `lr` to `lr * floor` over `total` steps.
pub fn cosine_lr(lr: f32, step: usize, total: usize, floor: f32) -> f32 {
    let p = (step as f32 / total.max(1) as f32).min(1.0);
    lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos()))
}
