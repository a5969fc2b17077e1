//! Sampler behaviour against the closed-form Gaussian noise predictor and a
//! hand-written condition-sensitive predictor.

use r2i_core::denoiser::ConditionEmbedding;
use r2i_core::error::Result;
use r2i_core::numerics::Tensor;
use r2i_core::sampler::{ddim_invert, reverse, GaussianOracle, Guidance, NoisePredictor, SamplerConfig};
use r2i_core::schedule::{NoiseSchedule, ScheduleConfig};
use r2i_core::verify::{cfg_contracts, cycle_consistency, CYCLE_REFINED_SHARE, CYCLE_STEPS, CYCLE_TOLERANCE, CYCLE_TRIALS};

fn sched() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn embedding(value: f32, unconditional: bool) -> ConditionEmbedding {
    ConditionEmbedding {
        tokens: vec![0, 1],
        embedding: Tensor::full(&[2, 4], value),
        is_unconditional: unconditional,
    }
}

fn latents(n: usize) -> Tensor {
    Tensor::from_fn(&[n, 4, 4, 4], |i| ((i * 37 % 101) as f32 / 50.0 - 1.0) * 0.8)
}

/// Shifts the oracle's estimate by the mean of the condition embedding.
struct Biased(GaussianOracle);

impl NoisePredictor for Biased {
    fn predict(&self, z: &Tensor, t: f64, conds: &[&ConditionEmbedding], steps: usize) -> Result<Tensor> {
        let base = self.0.predict(z, t, conds, steps)?;
        let per = z.len() / conds.len();
        let shift: Vec<f32> = conds.iter().map(|c| c.embedding.data().iter().sum::<f32>() / c.embedding.len() as f32).collect();
        Ok(Tensor::from_fn(z.shape(), |i| base.data()[i] + 0.1 * shift[i / per]))
    }
}

#[test]
fn gaussian_oracle_cycle_is_consistent_and_improves_on_refinement() {
    let s = sched();
    let oracle = GaussianOracle {
        mean: Tensor::full(&[4, 4, 4], 0.2),
        var: 0.25,
        sched: s.clone(),
    };
    let z0 = latents(CYCLE_TRIALS);
    let cond = embedding(0.5, false);
    let null = embedding(0.0, true);
    let r = cycle_consistency(&oracle, &z0, &vec![&cond; CYCLE_TRIALS], &null, CYCLE_STEPS, &s).unwrap();
    assert!(r.error <= CYCLE_TOLERANCE, "cycle error {}", r.error);
    assert!(r.refined_better >= CYCLE_REFINED_SHARE, "refined better in {}", r.refined_better);
}

#[test]
fn guidance_contracts_hold_bitwise() {
    let s = sched();
    let model = Biased(GaussianOracle {
        mean: Tensor::zeros(&[4, 4, 4]),
        var: 1.0,
        sched: s.clone(),
    });
    let z = latents(3);
    let (a, b, null) = (embedding(1.0, false), embedding(-2.0, false), embedding(0.0, true));
    assert_eq!(cfg_contracts(&model, &z, &a, &b, &null, &s).unwrap(), (true, true));
}

#[test]
fn stronger_guidance_moves_further_from_the_null_branch() {
    let s = sched();
    let model = Biased(GaussianOracle {
        mean: Tensor::zeros(&[4, 4, 4]),
        var: 1.0,
        sched: s.clone(),
    });
    let zk = latents(2);
    let (cond, null) = (embedding(1.0, false), embedding(0.0, true));
    let run = |scale: f64| {
        let g = Guidance {
            conds: vec![&cond; 2],
            null: &null,
            scale,
        };
        let cfg = SamplerConfig {
            eta: 0.0,
            guidance_scale: scale,
            seed: 0,
        };
        reverse(&model, &zk, 20, &g, &cfg, &s, &[0, 1]).unwrap()
    };
    let (u, c1, c3) = (run(0.0), run(1.0), run(3.0));
    let d1 = u.mean_abs_diff(&c1).unwrap();
    let d3 = u.mean_abs_diff(&c3).unwrap();
    assert!(d3 > d1 && d1 > 0.0, "{d1} {d3}");
}

#[test]
fn stochastic_reverse_is_reproducible_per_stream() {
    let s = sched();
    let oracle = GaussianOracle {
        mean: Tensor::zeros(&[4, 4, 4]),
        var: 1.0,
        sched: s.clone(),
    };
    let null = embedding(0.0, true);
    let g = Guidance {
        conds: vec![&null; 2],
        null: &null,
        scale: 1.0,
    };
    let cfg = SamplerConfig {
        eta: 1.0,
        guidance_scale: 1.0,
        seed: 9,
    };
    let zk = latents(2);
    let a = reverse(&oracle, &zk, 30, &g, &cfg, &s, &[4, 5]).unwrap();
    let b = reverse(&oracle, &zk, 30, &g, &cfg, &s, &[4, 5]).unwrap();
    let c = reverse(&oracle, &zk, 30, &g, &cfg, &s, &[5, 4]).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(!a.bitwise_eq(&c));
}

#[test]
fn inversion_of_zero_steps_is_identity() {
    let s = sched();
    let oracle = GaussianOracle {
        mean: Tensor::zeros(&[4, 4, 4]),
        var: 1.0,
        sched: s.clone(),
    };
    let null = embedding(0.0, true);
    let g = Guidance {
        conds: vec![&null; 2],
        null: &null,
        scale: 1.0,
    };
    let z = latents(2);
    assert!(ddim_invert(&oracle, &z, 0, &g, &s).unwrap().bitwise_eq(&z));
    assert!(ddim_invert(&oracle, &z, s.steps() + 1, &g, &s).is_err());
}
