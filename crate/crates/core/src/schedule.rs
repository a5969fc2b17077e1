//! Noise schedules and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    /// Squared-cosine cumulative schedule; `beta_start`/`beta_end` clip the
    /// per-step variances.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Linear over 100 steps, with `beta_end` chosen so the terminal
    /// `alpha_bar` is about 4e-3.
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.1063,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

/// Variance schedule for `T` steps.
///
/// `alpha_bar` has `T + 1` entries with a clean slot at index 0, so
/// `alpha_bar(k)` is the signal level after exactly `k` forward steps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return invalid(format!("schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!(
            "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        ));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_start, beta_end))
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    /// Number of forward steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Variance increment of step `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar` at a real-valued time in `[0, T]`, interpolating
    /// `ln(alpha_bar)` linearly between integer steps. Exact at integers.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64> {
        let steps = self.steps() as f64;
        if !(0.0..=steps).contains(&t) {
            return invalid(format!("time {t} outside [0, {steps}]"));
        }
        let lo = t.floor() as usize;
        let frac = t - lo as f64;
        if frac == 0.0 {
            return Ok(self.alpha_bar[lo]);
        }
        let (a, b) = (self.alpha_bar[lo].ln(), self.alpha_bar[lo + 1].ln());
        Ok((a + frac * (b - a)).exp())
    }

    pub fn snr(&self, k: usize) -> f64 {
        let a = self.alpha_bar[k];
        a / (1.0 - a)
    }
}

/// Number of forward steps for fraction `f` of a `T`-step schedule:
/// `round(f * T)` clamped to `[1, T]`.
pub fn step_from_fraction(f: f64, steps: usize) -> Result<usize> {
    if !(f > 0.0 && f <= 1.0) {
        return invalid(format!("fraction must lie in (0, 1], got {f}"));
    }
    Ok(((f * steps as f64).round() as usize).clamp(1, steps))
}

/// `sqrt(alpha_bar_k) * z0 + sqrt(1 - alpha_bar_k) * eps`; `k = 0` returns `z0`.
pub fn forward_diffuse(z0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if eps.shape() != z0.shape() {
        return Err(Error::ShapeMismatch {
            op: "forward_diffuse",
            left: z0.shape().to_vec(),
            right: eps.shape().to_vec(),
        });
    }
    if k > sched.steps() {
        return invalid(format!("step {k} beyond schedule length {}", sched.steps()));
    }
    if k == 0 {
        return Ok(z0.clone());
    }
    let a = sched.alpha_bar(k);
    z0.lin_comb(a.sqrt() as f32, eps, (1.0 - a).sqrt() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_linear() -> NoiseSchedule {
        make_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn first_step_is_single_term() {
        assert!((reference_linear().alpha_bar(1) - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn terminal_alpha_bar_matches_direct_product() {
        // independent product, term by term
        let mut prod = 1.0f64;
        for i in 0..100 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0);
        }
        let s = reference_linear();
        assert!(((s.alpha_bar(100) - prod) / prod).abs() < 1e-6);
    }

    #[test]
    fn default_schedule_terminal_level() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 100);
        assert!((s.alpha_bar(100) - 4e-3).abs() < 2e-4, "{}", s.alpha_bar(100));
    }

    #[test]
    fn invariants_hold_for_both_kinds() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(kind, 100, 1e-4, 0.999).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(100) < 1.0);
            let mut prod = 1.0;
            for t in 1..=100 {
                prod *= 1.0 - s.beta(t);
                assert!(((s.alpha_bar(t) - prod) / prod).abs() < 1e-6);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            for t in 2..=100 {
                assert!(s.snr(t) < s.snr(t - 1));
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(make_schedule(ScheduleKind::Linear, 1, 1e-4, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.03, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(step_from_fraction(0.95, 100).unwrap(), 95);
        assert_eq!(step_from_fraction(1.0, 100).unwrap(), 100);
        assert_eq!(step_from_fraction(0.25, 100).unwrap(), 25);
        assert_eq!(step_from_fraction(0.001, 100).unwrap(), 1);
        assert!(step_from_fraction(0.0, 100).is_err());
        assert!(step_from_fraction(-0.5, 100).is_err());
        assert!(step_from_fraction(1.5, 100).is_err());
    }

    #[test]
    fn interpolated_alpha_bar_is_exact_at_integers() {
        let s = ScheduleConfig::default().build().unwrap();
        for k in 0..=100 {
            assert_eq!(s.alpha_bar_at(k as f64).unwrap(), s.alpha_bar(k));
        }
        let mid = s.alpha_bar_at(10.5).unwrap();
        assert!(mid < s.alpha_bar(10) && mid > s.alpha_bar(11));
        assert!(s.alpha_bar_at(100.5).is_err());
    }

    #[test]
    fn forward_diffuse_edge_cases() {
        let s = ScheduleConfig::default().build().unwrap();
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f32 - 2.5);
        let eps = Tensor::from_fn(&[2, 3], |i| (i as f32).sin());
        assert!(forward_diffuse(&z0, 0, &eps, &s).unwrap().bitwise_eq(&z0));
        let zk = forward_diffuse(&z0, 40, &Tensor::zeros(&[2, 3]), &s).unwrap();
        let want = z0.scale(s.alpha_bar(40).sqrt() as f32);
        assert!(zk.sub(&want).unwrap().max_abs() < 1e-6);
        assert!(forward_diffuse(&z0, 5, &Tensor::zeros(&[3, 2]), &s).is_err());
        assert!(forward_diffuse(&z0, 101, &eps, &s).is_err());
    }

    proptest! {
        #[test]
        fn fraction_mapping_is_monotone(a in 0.0001f64..1.0, b in 0.0001f64..1.0, t in 2usize..400) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(step_from_fraction(lo, t).unwrap() <= step_from_fraction(hi, t).unwrap());
        }
    }
}
