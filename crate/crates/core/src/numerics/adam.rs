use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
            step: 0,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        let ts: Vec<Tensor> = store.entries().iter().map(|e| e.value.clone()).collect();
        Self::new(&ts)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }
}

/// One bias-corrected Adam update.
///
/// A parameter whose gradient is identically zero keeps its value bit for bit;
/// its moments still decay.
pub fn adam_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() || params.len() != state.shapes.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len(), state.shapes.len()],
        });
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.shapes) {
        g.expect_shape("adam_step", p.shape())?;
        p.expect_shape("adam_step", s)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut any = false;
        for ((mj, vj), &gj) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
            any |= gj != 0.0;
        }
        if !any {
            out.push(p.clone());
            continue;
        }
        let data = p
            .data()
            .iter()
            .zip(m.iter().zip(v.iter()))
            .map(|(&pj, (&mj, &vj))| {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                pj - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)
            })
            .collect();
        out.push(Tensor::new(p.shape(), data)?);
    }
    Ok(out)
}

/// Applies [`adam_step`] to the trainable entries of a store in place.
pub fn adam_update_store(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let params: Vec<Tensor> = store.entries().iter().map(|e| e.value.clone()).collect();
    let updated = adam_step(&params, grads, state, cfg)?;
    let trainable: Vec<bool> = store.entries().iter().map(|e| e.trainable).collect();
    for (i, (t, keep)) in updated.into_iter().zip(trainable).enumerate() {
        if keep {
            store.set(crate::numerics::params::ParamId::from_index(i), t)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_first_step_is_minus_lr() {
        let p = vec![Tensor::scalar(0.0f32)];
        let g = vec![Tensor::scalar(1.0f32)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let out = adam_step(&p, &g, &mut st, &cfg).unwrap();
        assert!((out[0].data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(st.step(), 1);
        adam_step(&out, &g, &mut st, &cfg).unwrap();
        assert_eq!(st.step(), 2);
    }

    #[test]
    fn zero_gradient_keeps_params_bitwise() {
        let p = vec![Tensor::from_fn(&[4], |i| i as f32 * 0.3 - 0.7)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig::default();
        // build up non-zero moments first
        let g = vec![Tensor::from_fn(&[4], |i| 1.0 - i as f32)];
        let p1 = adam_step(&p, &g, &mut st, &cfg).unwrap();
        let z = vec![Tensor::zeros(&[4])];
        let p2 = adam_step(&p1, &z, &mut st, &cfg).unwrap();
        assert!(p2[0].bitwise_eq(&p1[0]));
        assert!(st.first_moment(0).iter().any(|&m| m != 0.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::zeros(&[2])];
        assert!(adam_step(&p, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
