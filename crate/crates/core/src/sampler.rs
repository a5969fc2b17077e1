//! Classifier-free guidance, the DDIM update, the guided reverse chain and
//! deterministic DDIM inversion.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// 0 is the deterministic DDIM update, 1 is ancestral sampling.
    pub eta: f64,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eta: 0.0,
            guidance_scale: 7.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid(format!("eta {} outside [0, 1]", self.eta));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return invalid(format!("guidance scale {} must be finite and >= 0", self.guidance_scale));
        }
        Ok(())
    }
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn cfg_combine(eps_u: &Tensor, eps_c: &Tensor, s: f64) -> Result<Tensor> {
    if eps_u.shape() != eps_c.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_combine",
            left: eps_u.shape().to_vec(),
            right: eps_c.shape().to_vec(),
        });
    }
    if s == 0.0 {
        return Ok(eps_u.clone());
    }
    if s == 1.0 {
        return Ok(eps_c.clone());
    }
    let d = eps_c.sub(eps_u)?;
    eps_u.lin_comb(1.0, &d, s as f32)
}

/// One DDIM update between real times `t_from > t_to >= 0`.
///
/// `noise` is required when `eta > 0`.
pub fn ddim_step(
    z_t: &Tensor,
    t_from: f64,
    t_to: f64,
    eps_hat: &Tensor,
    eta: f64,
    sched: &NoiseSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    if !(t_to >= 0.0 && t_to < t_from && t_from <= sched.steps() as f64) {
        return invalid(format!(
            "ddim_step needs 0 <= t_to < t_from <= {}, got {t_from} -> {t_to}",
            sched.steps()
        ));
    }
    if eps_hat.shape() != z_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddim_step",
            left: z_t.shape().to_vec(),
            right: eps_hat.shape().to_vec(),
        });
    }
    let a_t = sched.alpha_bar_at(t_from)?;
    let a_to = sched.alpha_bar_at(t_to)?;
    let sigma = eta * ((1.0 - a_to) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_to).max(0.0).sqrt();
    let dir = (1.0 - a_to - sigma * sigma).max(0.0).sqrt();
    // z_to = sqrt(a_to) * z0_hat + dir * eps, with z0_hat expanded inline
    let c_z = (a_to / a_t).sqrt();
    let c_e = dir - c_z * (1.0 - a_t).sqrt();
    let mut out = z_t.lin_comb(c_z as f32, eps_hat, c_e as f32)?;
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| Error::InvalidArgument("eta > 0 needs a noise tensor".into()))?;
        out = out.lin_comb(1.0, n, sigma as f32)?;
    }
    out.ensure_finite("ddim_step")
}

/// The inverse of the deterministic update, from `t_from` up to `t_to`.
pub fn ddim_step_up(z: &Tensor, t_from: f64, t_to: f64, eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if !(t_from >= 0.0 && t_to > t_from && t_to <= sched.steps() as f64) {
        return invalid(format!(
            "inversion step needs 0 <= t_from < t_to <= {}, got {t_from} -> {t_to}",
            sched.steps()
        ));
    }
    let a_from = sched.alpha_bar_at(t_from)?;
    let a_to = sched.alpha_bar_at(t_to)?;
    let c_z = (a_to / a_from).sqrt();
    let c_e = (1.0 - a_to).sqrt() - c_z * (1.0 - a_from).sqrt();
    z.lin_comb(c_z as f32, eps_hat, c_e as f32)?.ensure_finite("ddim_invert")
}

/// Anything that predicts the noise in a latent batch.
pub trait NoisePredictor {
    /// `z: [B, c, h, w]`, one condition per sample, shared time `t` in `(0, T]`.
    fn predict(&self, z: &Tensor, t: f64, conds: &[&ConditionEmbedding], steps: usize) -> Result<Tensor>;

    fn check_ready(&self) -> Result<()> {
        Ok(())
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, z: &Tensor, t: f64, conds: &[&ConditionEmbedding], steps: usize) -> Result<Tensor> {
        let ts = vec![t; conds.len()];
        self.predict_noise_batch(z, &ts, conds, steps)
    }

    fn check_ready(&self) -> Result<()> {
        if self.is_trained() {
            Ok(())
        } else {
            Err(Error::Untrained("denoiser"))
        }
    }
}

/// Exact noise predictor for data distributed as `N(mean, var I)`; with
/// `var = 0` the data is a single point. Conditions are ignored.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mean: Tensor,
    pub var: f64,
    pub sched: NoiseSchedule,
}

impl NoisePredictor for GaussianOracle {
    fn predict(&self, z: &Tensor, t: f64, _conds: &[&ConditionEmbedding], _steps: usize) -> Result<Tensor> {
        let a = self.sched.alpha_bar_at(t)?;
        let per = self.mean.len();
        if z.len() % per != 0 {
            return invalid("oracle mean does not tile the batch");
        }
        let k = (1.0 - a).sqrt() / (a * self.var + 1.0 - a);
        let (zd, md) = (z.data(), self.mean.data());
        Ok(Tensor::from_fn(z.shape(), |i| {
            (k * (zd[i] as f64 - a.sqrt() * md[i % per] as f64)) as f32
        }))
    }
}

/// Conditions for one batch and the guidance scale applied to them.
#[derive(Clone, Debug)]
pub struct Guidance<'a> {
    pub conds: Vec<&'a ConditionEmbedding>,
    pub null: &'a ConditionEmbedding,
    pub scale: f64,
}

fn concat_batch(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = a.to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(&shape, data)
}

fn split_batch(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let per = x.len() / x.shape()[0];
    let mut sa = x.shape().to_vec();
    sa[0] = first;
    let mut sb = x.shape().to_vec();
    sb[0] -= first;
    let (da, db) = x.data().split_at(first * per);
    Ok((Tensor::new(&sa, da.to_vec())?, Tensor::new(&sb, db.to_vec())?))
}

/// Guided noise estimate. Scale 0 queries only the null condition and
/// scale 1 only the given conditions; other scales batch both passes.
pub fn guided_eps<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor,
    t: f64,
    g: &Guidance,
    steps: usize,
) -> Result<Tensor> {
    let b = g.conds.len();
    if z.shape().first() != Some(&b) {
        return invalid(format!("{b} conditions for latent batch {:?}", z.shape()));
    }
    if g.scale == 0.0 {
        return model.predict(z, t, &vec![g.null; b], steps);
    }
    if g.scale == 1.0 {
        return model.predict(z, t, &g.conds, steps);
    }
    let zz = concat_batch(z, z)?;
    let mut conds = vec![g.null; b];
    conds.extend(g.conds.iter().copied());
    let both = model.predict(&zz, t, &conds, steps)?;
    let (eu, ec) = split_batch(&both, b)?;
    cfg_combine(&eu, &ec, g.scale)
}

/// `k, k-1, ..., 0`.
pub fn integer_grid(k: usize) -> Vec<f64> {
    (0..=k).rev().map(|t| t as f64).collect()
}

/// `k` down to 0 in `k * sub` equal steps.
pub fn refined_grid(k: usize, sub: usize) -> Vec<f64> {
    let n = k * sub.max(1);
    (0..=n).map(|i| k as f64 * (n - i) as f64 / n as f64).collect()
}

fn check_grid(grid: &[f64], steps: usize, descending: bool) -> Result<()> {
    if grid.len() < 2 {
        return invalid("step grid needs at least two times");
    }
    let ordered = grid.windows(2).all(|w| if descending { w[0] > w[1] } else { w[0] < w[1] });
    if !ordered || grid.iter().any(|&t| !(0.0..=steps as f64).contains(&t)) {
        return invalid(format!("step grid is not strictly monotone within [0, {steps}]"));
    }
    Ok(())
}

/// Runs the guided reverse chain along a descending time grid. Noise for
/// sample `i` comes from stream `stream_ids[i]` of the configured seed.
pub fn reverse_on_grid<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor,
    grid: &[f64],
    g: &Guidance,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream_ids: &[u64],
) -> Result<Tensor> {
    cfg.validate()?;
    model.check_ready()?;
    check_grid(grid, sched.steps(), true)?;
    let b = z.shape()[0];
    let mut rngs: Vec<ChaCha8Rng> = (0..b)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(stream_ids.get(i).copied().unwrap_or(i as u64));
            r
        })
        .collect();
    let per = z.len() / b;
    let g = Guidance {
        scale: cfg.guidance_scale,
        ..g.clone()
    };
    let mut cur = z.clone();
    for w in grid.windows(2) {
        let eps = guided_eps(model, &cur, w[0], &g, sched.steps())?;
        let noise = if cfg.eta > 0.0 {
            let mut data = Vec::with_capacity(cur.len());
            for r in rngs.iter_mut() {
                data.extend((0..per).map(|_| -> f32 { StandardNormal.sample(r) }));
            }
            Some(Tensor::new(cur.shape(), data)?)
        } else {
            None
        };
        cur = ddim_step(&cur, w[0], w[1], &eps, cfg.eta, sched, noise.as_ref())?;
    }
    Ok(cur)
}

/// Reverse chain from integer step `k` to 0 through every integer step.
pub fn reverse<P: NoisePredictor + ?Sized>(
    model: &P,
    z_k: &Tensor,
    k: usize,
    g: &Guidance,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    stream_ids: &[u64],
) -> Result<Tensor> {
    if k == 0 || k > sched.steps() {
        return invalid(format!("reverse needs 0 < k <= {}, got {k}", sched.steps()));
    }
    reverse_on_grid(model, z_k, &integer_grid(k), g, cfg, sched, stream_ids)
}

/// Deterministic inversion along an ascending grid. Each step evaluates the
/// model on the current latent at the destination time.
pub fn invert_on_grid<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Tensor,
    grid: &[f64],
    g: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    model.check_ready()?;
    check_grid(grid, sched.steps(), false)?;
    let mut cur = z0.clone();
    for w in grid.windows(2) {
        let eps = guided_eps(model, &cur, w[1], g, sched.steps())?;
        cur = ddim_step_up(&cur, w[0], w[1], &eps, sched)?;
    }
    Ok(cur)
}

/// Inversion from 0 up to integer step `k`; `k = 0` returns the input.
pub fn ddim_invert<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Tensor,
    k: usize,
    g: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if k > sched.steps() {
        return invalid(format!("inversion step {k} beyond schedule length {}", sched.steps()));
    }
    if k == 0 {
        return Ok(z0.clone());
    }
    let mut grid = integer_grid(k);
    grid.reverse();
    invert_on_grid(model, z0, &grid, g, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserConfig, Template};
    use crate::schedule::{forward_diffuse, ScheduleConfig};

    fn sched() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    #[test]
    fn cfg_combine_examples() {
        let u = Tensor::from_fn(&[3], |i| i as f32 * 0.3 - 0.2);
        let c = Tensor::from_fn(&[3], |i| (i as f32).sin());
        assert!(cfg_combine(&u, &c, 1.0).unwrap().bitwise_eq(&c));
        assert!(cfg_combine(&u, &c, 0.0).unwrap().bitwise_eq(&u));
        let v = cfg_combine(&Tensor::scalar(0.0), &Tensor::scalar(1.0), 7.5).unwrap();
        assert_eq!(v.data()[0], 7.5);
        assert!(cfg_combine(&u, &Tensor::zeros(&[4]), 2.0).is_err());
    }

    #[test]
    fn single_step_substitution_identity() {
        let s = sched();
        let z0 = Tensor::from_fn(&[2, 4, 3, 3], |i| ((i * 7) as f32).sin());
        let eps = Tensor::from_fn(&[2, 4, 3, 3], |i| ((i * 3) as f32).cos());
        let zt = forward_diffuse(&z0, 60, &eps, &s).unwrap();
        let z_to = ddim_step(&zt, 60.0, 35.0, &eps, 0.0, &s, None).unwrap();
        let want = forward_diffuse(&z0, 35, &eps, &s).unwrap();
        assert!(z_to.sub(&want).unwrap().max_abs() < 1e-5);
        let again = ddim_step(&zt, 60.0, 35.0, &eps, 0.0, &s, None).unwrap();
        assert!(z_to.bitwise_eq(&again));
        let up = ddim_step_up(&want, 35.0, 60.0, &eps, &s).unwrap();
        assert!(up.sub(&zt).unwrap().max_abs() < 1e-5);
    }

    #[test]
    fn step_order_is_enforced() {
        let s = sched();
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(ddim_step(&z, 10.0, 10.0, &z, 0.0, &s, None).is_err());
        assert!(ddim_step(&z, 10.0, 20.0, &z, 0.0, &s, None).is_err());
        assert!(ddim_step(&z, 101.0, 20.0, &z, 0.0, &s, None).is_err());
        assert!(ddim_step(&z, 10.0, 5.0, &z, 1.0, &s, None).is_err());
        assert!(ddim_step_up(&z, 10.0, 5.0, &z, &s).is_err());
    }

    #[test]
    fn point_mass_oracle_recovers_data_from_pure_noise() {
        let s = sched();
        let z0 = Tensor::from_fn(&[1, 4, 4, 4], |i| ((i * 5) as f32 * 0.1).sin() * 1.5);
        let oracle = GaussianOracle {
            mean: z0.clone(),
            var: 0.0,
            sched: s.clone(),
        };
        let den = crate::denoiser::Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        let null = den.null_condition();
        let g = Guidance {
            conds: vec![&null],
            null: &null,
            scale: 1.0,
        };
        let eps = Tensor::from_fn(z0.shape(), |i| ((i * 11) as f32).cos());
        let zt = forward_diffuse(&z0, 100, &eps, &s).unwrap();
        let cfg = SamplerConfig {
            guidance_scale: 1.0,
            ..Default::default()
        };
        let out = reverse(&oracle, &zt, 100, &g, &cfg, &s, &[0]).unwrap();
        assert!(out.sub(&z0).unwrap().max_abs() < 1e-3);
    }

    #[test]
    fn untrained_denoiser_is_rejected() {
        let s = sched();
        let den = crate::denoiser::Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        let null = den.null_condition();
        let c = den.template_condition(Template::HeadOfClass, 0).unwrap();
        let g = Guidance {
            conds: vec![&c],
            null: &null,
            scale: 7.5,
        };
        let z = Tensor::zeros(&[1, 4, 8, 8]);
        let e = reverse(&den, &z, 10, &g, &SamplerConfig::default(), &s, &[0]);
        assert!(matches!(e, Err(Error::Untrained(_))));
        assert!(ddim_invert(&den, &z, 101, &g, &s).is_err());
        assert!(ddim_invert(&den, &z, 0, &g, &s).unwrap().bitwise_eq(&z));
    }

    #[test]
    fn grids() {
        assert_eq!(integer_grid(3), vec![3.0, 2.0, 1.0, 0.0]);
        assert_eq!(refined_grid(2, 2), vec![2.0, 1.5, 1.0, 0.5, 0.0]);
    }
}
