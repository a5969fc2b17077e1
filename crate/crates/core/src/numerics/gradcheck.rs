//! Finite-difference verification of tape gradients.
//!
//! Both the analytic gradient and the central differences are evaluated in a
//! 64-bit shadow copy of the fragment, so the comparison measures the backward
//! rules rather than `f32` rounding. The production `f32` gradient is compared
//! against the same shadow and reported alongside.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Bound, ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// A differentiable piece of a model with a scalar loss.
pub trait Fragment {
    fn params(&self) -> &ParamStore;
    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step in the 64-bit shadow.
    pub eps: f64,
    /// Elements probed per parameter tensor (all of them when smaller).
    pub samples_per_param: usize,
    /// Gradients smaller than this count as absolute, not relative, errors.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples_per_param: 12,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub probed: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Largest relative gap between the `f32` tape gradient and the shadow.
    pub max_rel_f32: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn max_rel(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel).fold(0.0, f64::max)
    }

    pub fn mean_rel(&self) -> f64 {
        let n: usize = self.params.iter().map(|p| p.probed).sum();
        if n == 0 {
            return 0.0;
        }
        self.params.iter().map(|p| p.mean_rel * p.probed as f64).sum::<f64>() / n as f64
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn shadow_loss<F: Fragment>(frag: &F, values: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::inference();
    let bound = tape.bind_values(frag.params(), values);
    let loss = frag.loss(&mut tape, &bound)?;
    Ok(tape.value(loss).data()[0])
}

pub fn grad_check<F: Fragment>(frag: &F, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let store = frag.params();
    if !store.entries().iter().any(|e| e.trainable) {
        return Ok(GradCheckReport::default());
    }
    let mut values: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.value.cast()).collect();

    let mut tape = Tape::<f64>::new();
    let bound = tape.bind_values(store, &values);
    let loss = frag.loss(&mut tape, &bound)?;
    let analytic = tape.backward(loss)?.for_params(&tape, &bound);

    let mut tape32 = Tape::<f32>::new();
    let bound32 = tape32.bind(store);
    let loss32 = frag.loss(&mut tape32, &bound32)?;
    let analytic32 = tape32.backward(loss32)?.for_params(&tape32, &bound32);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (i, entry) in store.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let n = entry.value.len();
        let picks: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_param).into_vec()
        };
        let (mut max_rel, mut sum_rel, mut max32) = (0.0f64, 0.0f64, 0.0f64);
        let base = values[i].clone();
        let scale32 = analytic[i].max_abs().max(cfg.floor);
        for &j in &picks {
            let mut plus = base.to_vec();
            plus[j] += cfg.eps;
            values[i] = Tensor::new(base.shape(), plus)?;
            let lp = shadow_loss(frag, &values)?;
            let mut minus = base.to_vec();
            minus[j] -= cfg.eps;
            values[i] = Tensor::new(base.shape(), minus)?;
            let lm = shadow_loss(frag, &values)?;
            let fd = (lp - lm) / (2.0 * cfg.eps);
            let a = analytic[i].data()[j];
            let r = rel_err(a, fd, cfg.floor);
            max_rel = max_rel.max(r);
            sum_rel += r;
            let a32 = analytic32[i].data()[j] as f64;
            max32 = max32.max((a32 - a).abs() / a.abs().max(1e-3 * scale32));
        }
        values[i] = base;
        report.params.push(ParamCheck {
            name: entry.name.clone(),
            probed: picks.len(),
            max_rel,
            mean_rel: sum_rel / picks.len().max(1) as f64,
            max_rel_f32: max32,
        });
    }
    Ok(report)
}

/// One primitive op wired into a scalar loss, for exercising its backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveOp {
    MatMul,
    BatchedMatMul,
    Conv2d,
    StridedConv2d,
    Add,
    Sub,
    Mul,
    Scale,
    BiasAdd,
    AddPlanes,
    Silu,
    GroupNorm,
    LayerNorm,
    Softmax,
    MaskedSoftmax,
    Upsample,
    Concat,
    Permute,
    Gather,
    MeanPlanes,
    Mse,
    CrossEntropy,
}

impl PrimitiveOp {
    pub const ALL: [PrimitiveOp; 22] = [
        Self::MatMul,
        Self::BatchedMatMul,
        Self::Conv2d,
        Self::StridedConv2d,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::Scale,
        Self::BiasAdd,
        Self::AddPlanes,
        Self::Silu,
        Self::GroupNorm,
        Self::LayerNorm,
        Self::Softmax,
        Self::MaskedSoftmax,
        Self::Upsample,
        Self::Concat,
        Self::Permute,
        Self::Gather,
        Self::MeanPlanes,
        Self::Mse,
        Self::CrossEntropy,
    ];
}

/// A randomly shaped instance of a [`PrimitiveOp`]. The loss is
/// `sum(op(inputs) * r)` for a fixed random `r`, so every output element
/// contributes a distinct upstream gradient.
pub struct OpProbe {
    pub op: PrimitiveOp,
    store: ParamStore,
    weights: Tensor,
    aux: Vec<usize>,
    mask: Option<Arc<Vec<bool>>>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0f32..1.0))
}

impl OpProbe {
    pub fn random(op: PrimitiveOp, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut r = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
        let (b, c, h, w) = (r(1, 2), r(1, 3), r(2, 5), r(2, 5));
        let (m, k, n) = (r(1, 4), r(1, 4), r(1, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut aux = Vec::new();
        let mut mask = None;
        let mut add = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
            store.add(name, uniform(rng, shape), true);
        };
        let out_shape: Vec<usize> = match op {
            PrimitiveOp::MatMul => {
                add("a", &[m, k], &mut rng);
                add("b", &[k, n], &mut rng);
                vec![m, n]
            }
            PrimitiveOp::BatchedMatMul => {
                add("a", &[b, m, k], &mut rng);
                add("b", &[b, k, n], &mut rng);
                vec![b, m, n]
            }
            PrimitiveOp::Conv2d | PrimitiveOp::StridedConv2d => {
                let o = rng.gen_range(1..=3);
                let stride = if op == PrimitiveOp::Conv2d { 1 } else { 2 };
                let (kh, pad) = if rng.gen_bool(0.5) { (3, 1) } else { (1, 0) };
                add("x", &[b, c, h, w], &mut rng);
                add("w", &[o, c, kh, kh], &mut rng);
                aux = vec![stride, pad];
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kh) / stride + 1;
                vec![b, o, oh, ow]
            }
            PrimitiveOp::Add | PrimitiveOp::Sub | PrimitiveOp::Mul | PrimitiveOp::Mse => {
                add("a", &[b, c, h], &mut rng);
                add("b", &[b, c, h], &mut rng);
                if op == PrimitiveOp::Mse {
                    vec![1]
                } else {
                    vec![b, c, h]
                }
            }
            PrimitiveOp::Scale | PrimitiveOp::Silu => {
                add("x", &[b, c, h, w], &mut rng);
                vec![b, c, h, w]
            }
            PrimitiveOp::BiasAdd => {
                add("x", &[b, c, h, w], &mut rng);
                add("bias", &[c], &mut rng);
                vec![b, c, h, w]
            }
            PrimitiveOp::AddPlanes => {
                add("x", &[b, c, h, w], &mut rng);
                add("e", &[b, c], &mut rng);
                vec![b, c, h, w]
            }
            PrimitiveOp::GroupNorm | PrimitiveOp::LayerNorm => {
                let groups = if op == PrimitiveOp::GroupNorm { 2 } else { 1 };
                let ch = groups * rng.gen_range(1..=3);
                add("x", &[b, ch, h, w], &mut rng);
                add("gamma", &[ch], &mut rng);
                add("beta", &[ch], &mut rng);
                aux = vec![groups];
                vec![b, ch, h, w]
            }
            PrimitiveOp::Softmax => {
                add("x", &[b, m, k + 1], &mut rng);
                vec![b, m, k + 1]
            }
            PrimitiveOp::MaskedSoftmax => {
                let keys = k + 1;
                add("x", &[b, m, keys], &mut rng);
                let mk: Vec<bool> = (0..b * keys).map(|i| i % keys == 0 || rng.gen_bool(0.6)).collect();
                mask = Some(Arc::new(mk));
                vec![b, m, keys]
            }
            PrimitiveOp::Upsample => {
                add("x", &[b, c, h, w], &mut rng);
                vec![b, c, 2 * h, 2 * w]
            }
            PrimitiveOp::Concat => {
                let c2 = rng.gen_range(1..=3);
                add("a", &[b, c, h, w], &mut rng);
                add("b", &[b, c2, h, w], &mut rng);
                vec![b, c + c2, h, w]
            }
            PrimitiveOp::Permute => {
                add("x", &[b, c, h, w], &mut rng);
                vec![h, b, w, c]
            }
            PrimitiveOp::Gather => {
                add("table", &[k + 2, n], &mut rng);
                aux = (0..m + 2).map(|_| rng.gen_range(0..k + 2)).collect();
                vec![m + 2, n]
            }
            PrimitiveOp::MeanPlanes => {
                add("x", &[b, c, h, w], &mut rng);
                vec![b, c]
            }
            PrimitiveOp::CrossEntropy => {
                add("logits", &[m + 1, k + 1], &mut rng);
                aux = (0..m + 1).map(|_| rng.gen_range(0..k + 1)).collect();
                vec![1]
            }
        };
        let weights = uniform(&mut rng, &out_shape);
        Ok(Self {
            op,
            store,
            weights,
            aux,
            mask,
        })
    }

    fn p(&self, bound: &Bound, i: usize) -> Var {
        bound[super::params::ParamId::from_index(i)]
    }
}

impl Fragment for OpProbe {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn loss<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound) -> Result<Var> {
        let a = self.p(bound, 0);
        let y = match self.op {
            PrimitiveOp::MatMul | PrimitiveOp::BatchedMatMul => tape.matmul(a, self.p(bound, 1))?,
            PrimitiveOp::Conv2d | PrimitiveOp::StridedConv2d => {
                tape.conv2d(a, self.p(bound, 1), self.aux[0], self.aux[1])?
            }
            PrimitiveOp::Add => tape.add(a, self.p(bound, 1))?,
            PrimitiveOp::Sub => tape.sub(a, self.p(bound, 1))?,
            PrimitiveOp::Mul => tape.mul(a, self.p(bound, 1))?,
            PrimitiveOp::Mse => tape.mse(a, self.p(bound, 1))?,
            PrimitiveOp::Scale => tape.scale(a, S::of(-1.75))?,
            PrimitiveOp::Silu => tape.silu(a)?,
            PrimitiveOp::BiasAdd => tape.bias_add(a, self.p(bound, 1))?,
            PrimitiveOp::AddPlanes => tape.add_planes(a, self.p(bound, 1))?,
            PrimitiveOp::GroupNorm | PrimitiveOp::LayerNorm => {
                tape.group_norm(a, self.p(bound, 1), self.p(bound, 2), self.aux[0])?
            }
            PrimitiveOp::Softmax => tape.softmax(a, None)?,
            PrimitiveOp::MaskedSoftmax => tape.softmax(a, self.mask.clone())?,
            PrimitiveOp::Upsample => tape.upsample(a, 2)?,
            PrimitiveOp::Concat => tape.concat(&[a, self.p(bound, 1)])?,
            PrimitiveOp::Permute => tape.permute(a, &[2, 0, 3, 1])?,
            PrimitiveOp::Gather => tape.gather(a, &self.aux)?,
            PrimitiveOp::MeanPlanes => tape.mean_planes(a)?,
            PrimitiveOp::CrossEntropy => tape.cross_entropy(a, &self.aux)?,
        };
        let r = tape.constant(self.weights.cast());
        let yr = tape.mul(y, r)?;
        tape.sum(yr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear {
        store: ParamStore,
        x: Tensor,
    }

    impl Fragment for Linear {
        fn params(&self) -> &ParamStore {
            &self.store
        }

        fn loss<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound) -> Result<Var> {
            let ids: Vec<_> = (0..2).map(super::super::params::ParamId::from_index).collect();
            let x = tape.constant(self.x.cast());
            let y = tape.linear(x, bound[ids[0]], bound[ids[1]])?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        }
    }

    fn linear(seed: u64) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.add("w", uniform(&mut rng, &[4, 3]), true);
        store.add("b", uniform(&mut rng, &[3]), true);
        Linear {
            store,
            x: uniform(&mut rng, &[5, 4]),
        }
    }

    #[test]
    fn linear_layer_passes() {
        let rep = grad_check(&linear(3), &GradCheckConfig::default()).unwrap();
        assert_eq!(rep.params.len(), 2);
        assert!(rep.max_rel() < 1e-3, "{rep:?}");
    }

    #[test]
    fn frozen_fragment_gives_empty_report() {
        let mut frag = linear(4);
        frag.store.freeze_all();
        assert!(grad_check(&frag, &GradCheckConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn every_primitive_op_twenty_trials() {
        for op in PrimitiveOp::ALL {
            for trial in 0..20 {
                let probe = OpProbe::random(op, trial).unwrap();
                let rep = grad_check(&probe, &GradCheckConfig::default()).unwrap();
                assert!(rep.max_rel() < 1e-3, "{op:?} trial {trial}: {rep:?}");
            }
        }
    }
}
