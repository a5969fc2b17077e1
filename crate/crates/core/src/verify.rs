//! The invariant suite: each check measures one property of the engine and
//! compares it against a fixed threshold. Model-free checks run anywhere;
//! the rest need trained models and the toy dataset.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::codec::{reconstruction_error, Codec, CodecConfig, CodecFragment};
use crate::data::{class_of, orientation_of, NUM_CLASSES};
use crate::denoiser::{paired_condition_errors, ConditionEmbedding, Denoiser, DenoiserConfig, DenoiserFragment, Template};
use crate::error::{invalid, Result};
use crate::eval::{fid_f64, kid_f64, top1_scores, Classifier, ClassifierFragment, REJECT};
use crate::experiment::{ToySplits, Trained};
use crate::nn::gather_batch;
use crate::numerics::{grad_check, GradCheckConfig, OpProbe, PrimitiveOp, Tensor};
use crate::pipeline::{
    encoding_noise, generate, run_sweep, translate, translate_batch, Models, SweepResult, SweepValue, TestSet,
    TranslationConfig,
};
use crate::sampler::{guided_eps, invert_on_grid, refined_grid, reverse, reverse_on_grid, Guidance, NoisePredictor, SamplerConfig};
use crate::schedule::{forward_diffuse, step_from_fraction, NoiseSchedule};

pub const GRAD_TOLERANCE: f64 = 1e-3;
pub const MARGINAL_DRAWS: usize = 10_000;
pub const CYCLE_STEPS: usize = 50;
pub const CYCLE_TOLERANCE: f64 = 1e-2;
pub const CYCLE_TRIALS: usize = 50;
pub const CYCLE_REFINED_SHARE: f64 = 0.9;
pub const FID_ORACLE_TOLERANCE: f64 = 0.05;
pub const CODEC_MAE_LIMIT: f64 = 0.05;
pub const LOCALITY_SHARE: f64 = 0.7;
pub const CLASSIFIER_ACCURACY: f64 = 0.97;
pub const CLASSIFIER_REJECT: f64 = 0.95;
pub const CONDITION_PAIRS: usize = 500;
pub const UNCONDITIONAL_CREATURE_RATE: f64 = 0.8;
pub const CONDITIONAL_CLASS_RATE: f64 = 0.7;
pub const FRACTION_SWEEP: [f64; 5] = [0.5, 0.7, 0.8, 0.95, 1.0];
pub const ALL_AT1_FLOOR: f64 = 0.9;

/// Outcome of one invariant.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<34} {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Times `f` and records its verdict. An error counts as a failure.
pub fn run_check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.to_string(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn write_checks_csv(checks: &[Check], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["check", "passed", "detail", "seconds"])?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            c.passed.to_string(),
            c.detail.clone(),
            format!("{:.3}", c.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f32, _>(StandardNormal))
}

/// Largest relative gradient error over every primitive op, per op.
pub fn grad_check_primitives(seed: u64) -> Result<Vec<(PrimitiveOp, f64)>> {
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    PrimitiveOp::ALL
        .iter()
        .map(|&op| {
            let mut worst = 0.0f64;
            for s in 0..3 {
                let probe = OpProbe::random(op, seed.wrapping_mul(31).wrapping_add(s))?;
                worst = worst.max(grad_check(&probe, &cfg)?.max_rel());
            }
            Ok((op, worst))
        })
        .collect()
}

/// Largest relative gradient error of the full UNet, codec and classifier
/// at small random shapes.
pub fn grad_check_models(seed: u64, sched: &NoiseSchedule) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig {
        seed,
        samples_per_param: 4,
        ..GradCheckConfig::default()
    };
    let dcfg = DenoiserConfig {
        base_width: 8,
        heads: 2,
        d_tau: 8,
        time_dim: 16,
        ..DenoiserConfig::default()
    };
    let den = Denoiser::new(dcfg, seed)?;
    let side = [4, 8][rng.gen_range(0..2)];
    let shape = [2, 4, side, side];
    let unet = DenoiserFragment {
        denoiser: &den,
        sched,
        z0: gaussian(&mut rng, &shape),
        eps: gaussian(&mut rng, &shape),
        ts: vec![rng.gen_range(1.0..100.0), rng.gen_range(1.0..100.0)],
        tokens: vec![Template::HeadOfClass.tokens(rng.gen_range(0..NUM_CLASSES))?, vec![0]],
    };
    let codec = Codec::new(
        CodecConfig {
            image_size: 8,
            downsample: 4,
            latent_channels: 4,
            base_width: 4,
        },
        seed,
    )?;
    let images = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(-1.0f32..1.0));
    let clf = Classifier::new(seed);
    let labels = vec![rng.gen_range(0..=REJECT), rng.gen_range(0..=REJECT)];
    Ok(vec![
        ("unet", grad_check(&unet, &cfg)?.max_rel()),
        (
            "codec",
            grad_check(
                &CodecFragment {
                    codec: &codec,
                    images: images.clone(),
                },
                &cfg,
            )?
            .max_rel(),
        ),
        (
            "classifier",
            grad_check(
                &ClassifierFragment {
                    classifier: &clf,
                    images,
                    labels,
                },
                &cfg,
            )?
            .max_rel(),
        ),
    ])
}

/// Empirical forward marginal at one `(z0, k)`, with its distance from the
/// closed form in standard errors.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Marginal {
    pub z0: f64,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_se: f64,
    pub std_se: f64,
}

pub fn forward_marginals(sched: &NoiseSchedule, cases: &[(f32, usize)], draws: usize, seed: u64) -> Result<Vec<Marginal>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases
        .iter()
        .map(|&(z0, k)| {
            let z = Tensor::full(&[draws], z0);
            let eps = gaussian(&mut rng, &[draws]);
            let x = forward_diffuse(&z, k, &eps, sched)?;
            let n = draws as f64;
            let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let a = sched.alpha_bar(k);
            let sigma = (1.0 - a).sqrt();
            Ok(Marginal {
                z0: z0 as f64,
                k,
                mean,
                std: var.sqrt(),
                mean_se: (mean - a.sqrt() * z0 as f64).abs() / (sigma / n.sqrt()),
                std_se: (var.sqrt() - sigma).abs() / (sigma / (2.0 * n).sqrt()),
            })
        })
        .collect()
}

/// Step counts for a list of fractions.
pub fn fraction_steps(fractions: &[f64], sched: &NoiseSchedule) -> Result<Vec<usize>> {
    fractions.iter().map(|&f| step_from_fraction(f, sched.steps())).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CycleReport {
    /// Mean per-element error of invert-then-reverse on the integer grid.
    pub error: f64,
    /// Share of trials whose error shrinks on the twice-refined grid.
    pub refined_better: f64,
}

fn cycle_errors<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Tensor,
    k: usize,
    sub: usize,
    g: &Guidance,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let down = refined_grid(k, sub);
    let mut up = down.clone();
    up.reverse();
    let zk = invert_on_grid(model, z0, &up, g, sched)?;
    let cfg = SamplerConfig {
        eta: 0.0,
        guidance_scale: g.scale,
        seed: 0,
    };
    let back = reverse_on_grid(model, &zk, &down, g, &cfg, sched, &[])?;
    (0..z0.shape()[0])
        .map(|i| Ok(z0.index0(i)?.mean_abs_diff(&back.index0(i)?)? as f64))
        .collect()
}

/// Deterministic round trip `reverse(invert(z0))` under one condition per
/// latent, unguided, at `k` steps and at the twice-refined grid.
pub fn cycle_consistency<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Tensor,
    conds: &[&ConditionEmbedding],
    null: &ConditionEmbedding,
    k: usize,
    sched: &NoiseSchedule,
) -> Result<CycleReport> {
    let g = Guidance {
        conds: conds.to_vec(),
        null,
        scale: 1.0,
    };
    let coarse = cycle_errors(model, z0, k, 1, &g, sched)?;
    let fine = cycle_errors(model, z0, k, 2, &g, sched)?;
    let n = coarse.len() as f64;
    Ok(CycleReport {
        error: coarse.iter().sum::<f64>() / n,
        refined_better: coarse.iter().zip(&fine).filter(|(c, f)| f < c).count() as f64 / n,
    })
}

/// Mean round-trip error when inverting under `invert_with` and reversing
/// under `reverse_with`, both at guidance `scale`.
pub fn round_trip_error<P: NoisePredictor + ?Sized>(
    model: &P,
    z0: &Tensor,
    invert_with: &[&ConditionEmbedding],
    reverse_with: &[&ConditionEmbedding],
    null: &ConditionEmbedding,
    k: usize,
    scale: f64,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let gi = Guidance {
        conds: invert_with.to_vec(),
        null,
        scale,
    };
    let gr = Guidance {
        conds: reverse_with.to_vec(),
        ..gi.clone()
    };
    let mut up = refined_grid(k, 1);
    up.reverse();
    let zk = invert_on_grid(model, z0, &up, &gi, sched)?;
    let cfg = SamplerConfig {
        eta: 0.0,
        guidance_scale: scale,
        seed: 0,
    };
    let back = reverse(model, &zk, k, &gr, &cfg, sched, &[])?;
    Ok(z0.mean_abs_diff(&back)? as f64)
}

/// `(null_only, cond_only)`: scale 0 ignores the condition and scale 1
/// reproduces the conditional branch, both bitwise, for the guided noise
/// estimate and for a full reverse chain.
pub fn cfg_contracts<P: NoisePredictor + ?Sized>(
    model: &P,
    z: &Tensor,
    a: &ConditionEmbedding,
    b: &ConditionEmbedding,
    null: &ConditionEmbedding,
    sched: &NoiseSchedule,
) -> Result<(bool, bool)> {
    let n = z.shape()[0];
    let ga = |scale| Guidance {
        conds: vec![a; n],
        null,
        scale,
    };
    let gb = |scale| Guidance {
        conds: vec![b; n],
        null,
        scale,
    };
    let t = sched.steps() as f64 * 0.6;
    let steps = sched.steps();
    let eps_a0 = guided_eps(model, z, t, &ga(0.0), steps)?;
    let eps_b0 = guided_eps(model, z, t, &gb(0.0), steps)?;
    let eps_a1 = guided_eps(model, z, t, &ga(1.0), steps)?;
    let direct = model.predict(z, t, &vec![a; n], steps)?;
    let k = steps / 5;
    let chain = |g: Guidance, scale| {
        let cfg = SamplerConfig {
            eta: 0.0,
            guidance_scale: scale,
            seed: 0,
        };
        reverse(model, z, k, &g, &cfg, sched, &[])
    };
    let null_only = eps_a0.bitwise_eq(&eps_b0) && chain(ga(0.0), 0.0)?.bitwise_eq(&chain(gb(0.0), 0.0)?);
    let mut manual = z.clone();
    for step in (1..=k).rev() {
        let eps = model.predict(&manual, step as f64, &vec![a; n], steps)?;
        manual = crate::sampler::ddim_step(&manual, step as f64, step as f64 - 1.0, &eps, 0.0, sched, None)?;
    }
    let cond_only = eps_a1.bitwise_eq(&direct) && chain(ga(1.0), 1.0)?.bitwise_eq(&manual);
    Ok((null_only, cond_only))
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MetricOracles {
    /// FID between `N(0, I)` and `N(mu, I)` samples with `|mu|^2 = 4`.
    pub fid_shifted: f64,
    /// FID of a sample against itself.
    pub fid_self: f64,
    /// Mean KID over independent same-distribution sample pairs.
    pub kid_mean: f64,
    pub kid_se: f64,
}

pub fn metric_oracles(n: usize, d: usize, seed: u64) -> Result<MetricOracles> {
    if d < 4 {
        return invalid("metric oracles need at least four dimensions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize, shift: f64| {
        DMatrix::from_fn(rows, d, |_, j| {
            rng.sample::<f64, _>(StandardNormal) + if j < 4 { shift } else { 0.0 }
        })
    };
    let a = draw(n, 0.0);
    let b = draw(n, 1.0);
    let fid_shifted = fid_f64(&a, &b)?;
    let fid_self = fid_f64(&a, &a)?;
    let trials = 30;
    let kids: Vec<f64> = (0..trials)
        .map(|_| {
            let x = draw(200, 0.0);
            let y = draw(200, 0.0);
            kid_f64(&x, &y)
        })
        .collect::<Result<_>>()?;
    let mean = kids.iter().sum::<f64>() / trials as f64;
    let sd = (kids.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt();
    Ok(MetricOracles {
        fid_shifted,
        fid_self,
        kid_mean: mean,
        kid_se: sd / (trials as f64).sqrt(),
    })
}

/// Class@1 in percent at two decimals for `correct` right out of `total`.
pub fn class_at1_percent(correct: usize, total: usize) -> Result<String> {
    let preds: Vec<usize> = (0..total).map(|i| if i < correct { 0 } else { 1 }).collect();
    let truth = vec![0; total];
    Ok(format!("{:.2}", 100.0 * top1_scores(&preds, &truth)?.1))
}

/// Checks that need no training or data.
pub fn model_free_checks(sched: &NoiseSchedule, seed: u64) -> Vec<Check> {
    let mut out = vec![
        run_check("grad check: primitive ops", || {
            let r = grad_check_primitives(seed)?;
            let (op, worst) = r.iter().copied().fold((PrimitiveOp::MatMul, 0.0), |a, b| if b.1 > a.1 { b } else { a });
            Ok((worst < GRAD_TOLERANCE, format!("{} ops, worst {worst:.2e} ({op:?})", r.len())))
        }),
        run_check("grad check: unet, codec, classifier", || {
            let r = grad_check_models(seed, sched)?;
            let worst = r.iter().map(|x| x.1).fold(0.0, f64::max);
            let detail = r.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
            Ok((worst < GRAD_TOLERANCE, detail))
        }),
        run_check("forward marginals", || {
            let k_mid = sched.steps() / 2;
            let cases = [(1.5, 1), (-0.7, k_mid), (0.3, sched.steps())];
            let r = forward_marginals(sched, &cases, MARGINAL_DRAWS, seed)?;
            let worst = r.iter().map(|m| m.mean_se.max(m.std_se)).fold(0.0, f64::max);
            Ok((worst <= 3.0, format!("3 cases x {MARGINAL_DRAWS} draws, worst {worst:.2} SE")))
        }),
        run_check("fraction grids", || {
            let long = fraction_steps(&crate::pipeline::FRACTION_GRID, sched)?;
            let short = fraction_steps(&crate::pipeline::SHORT_FRACTION_GRID, sched)?;
            let ok = sched.steps() == 100
                && long == [50, 60, 70, 80, 90, 95, 100]
                && short == [25, 50, 75, 100];
            Ok((ok, format!("{long:?} {short:?}")))
        }),
        run_check("metric oracles", || {
            let m = metric_oracles(10_000, 8, seed)?;
            let ok = (m.fid_shifted - 4.0).abs() <= FID_ORACLE_TOLERANCE * 4.0
                && m.fid_self.abs() <= 1e-6
                && m.kid_mean.abs() <= 3.0 * m.kid_se;
            Ok((
                ok,
                format!(
                    "fid {:.4} (want 4), fid(A,A) {:.1e}, kid {:.2e} +- {:.1e}",
                    m.fid_shifted, m.fid_self, m.kid_mean, m.kid_se
                ),
            ))
        }),
        run_check("top-1 bookkeeping", || {
            let s = class_at1_percent(112, 121)?;
            Ok((s == "92.56", format!("112/121 -> {s}")))
        }),
    ];
    out.shrink_to_fit();
    out
}

fn share(hits: usize, n: usize) -> f64 {
    hits as f64 / n.max(1) as f64
}

/// Fraction of latent-difference energy that falls inside the latent window
/// under a randomly replaced pixel patch of side `patch`.
pub fn latent_locality(codec: &Codec, images: &[Tensor], patch: usize, seed: u64) -> Result<f64> {
    let f = codec.config().downsample;
    let size = codec.config().image_size;
    if patch % f != 0 || patch > size {
        return invalid(format!("patch {patch} must be a multiple of {f} no larger than {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edited = Vec::with_capacity(images.len());
    let mut windows = Vec::with_capacity(images.len());
    for img in images {
        let py = rng.gen_range(0..=(size - patch) / f) * f;
        let px = rng.gen_range(0..=(size - patch) / f) * f;
        let mut d = img.to_vec();
        for c in 0..3 {
            for y in py..py + patch {
                for x in px..px + patch {
                    d[(c * size + y) * size + x] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        edited.push(Tensor::new(img.shape(), d)?);
        windows.push((py / f, px / f));
    }
    let za = codec.encode_all(images, 64)?;
    let zb = codec.encode_all(&edited, 64)?;
    let (ch, side, w) = (codec.config().latent_channels, codec.config().latent_size(), patch / f);
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for ((a, b), &(wy, wx)) in za.iter().zip(&zb).zip(&windows) {
        for c in 0..ch {
            for y in 0..side {
                for x in 0..side {
                    let i = (c * side + y) * side + x;
                    let e = (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                    total += e;
                    if (wy..wy + w).contains(&y) && (wx..wx + w).contains(&x) {
                        inside += e;
                    }
                }
            }
        }
    }
    Ok(if total > 0.0 { inside / total } else { 1.0 })
}

/// `(mean of wrong - true, standard error)` of the paired noise-prediction
/// errors over at least `min_pairs` draws.
pub fn condition_gap(
    den: &Denoiser,
    latents: &[Tensor],
    classes: &[usize],
    sched: &NoiseSchedule,
    min_pairs: usize,
) -> Result<(f64, f64, usize)> {
    let mut diffs = Vec::new();
    let mut seed = 0;
    while diffs.len() < min_pairs {
        let offset = 1 + seed as usize % (NUM_CLASSES - 1);
        let pairs = paired_condition_errors(den, latents, classes, Template::HeadOfClass, offset, sched, seed)?;
        if pairs.is_empty() {
            return invalid("no latents for the condition gap");
        }
        diffs.extend(pairs.iter().map(|(t, w)| w - t));
        seed += 1;
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    Ok((mean, sd / n.sqrt(), diffs.len()))
}

/// Sweeps shared by the trend checks.
pub struct TrendSweeps {
    pub fraction: SweepResult,
    pub cfg: SweepResult,
    pub template: SweepResult,
    pub fraction_seconds: f64,
}

pub fn run_trend_sweeps(t: &Trained, splits: &ToySplits, base: &TranslationConfig, out_dir: Option<&Path>) -> Result<TrendSweeps> {
    let models = Models {
        codec: &t.codec,
        denoiser: &t.denoiser,
        sched: &t.sched,
    };
    let reference = t.classifier.features(&splits.creature_test.images)?;
    let s = &splits.skeleton_test;
    let test = TestSet {
        sources: &s.images,
        classes: &s.classes,
        ids: &s.ids,
    };
    let sweep = |values: Vec<SweepValue>| run_sweep(&models, &t.classifier, &values, base, &test, &reference, out_dir);
    let t0 = Instant::now();
    let fraction = sweep(FRACTION_SWEEP.iter().map(|&f| SweepValue::Fraction(f)).collect())?;
    let fraction_seconds = t0.elapsed().as_secs_f64();
    let cfg = sweep(vec![SweepValue::CfgScale(1.0), SweepValue::CfgScale(7.5)])?;
    let template = sweep(vec![
        SweepValue::Template(Template::Generic),
        SweepValue::Template(Template::HeadOfClass),
    ])?;
    Ok(TrendSweeps {
        fraction,
        cfg,
        template,
        fraction_seconds,
    })
}

fn row(r: &SweepResult, key: &str) -> Result<crate::eval::MetricsReport> {
    match r.row(key) {
        Some(x) => Ok(x.metrics),
        None => invalid(format!("sweep has no row {key}")),
    }
}

/// Fraction-sweep trend: All@1 non-decreasing up to 0.95 and reaching the
/// floor there, Class@1 rising from 0.5 to 0.95, and orientation agreement
/// at 0.5 at least that at 1.0.
pub fn fraction_trend(r: &SweepResult) -> Result<(bool, String)> {
    let keys = ["0.5", "0.7", "0.8", "0.95"];
    let all: Vec<f64> = keys.iter().map(|k| row(r, k).map(|m| m.all_at1)).collect::<Result<_>>()?;
    let (lo, hi, full) = (row(r, "0.5")?, row(r, "0.95")?, row(r, "1")?);
    let monotone = all.windows(2).all(|w| w[1] >= w[0]);
    let ok = monotone
        && hi.all_at1 >= ALL_AT1_FLOOR
        && hi.class_at1 > lo.class_at1
        && lo.orient_agree >= full.orient_agree;
    Ok((
        ok,
        format!(
            "All@1 {:?}, Class@1 {:.3} -> {:.3}, orient {:.3} vs {:.3}",
            all.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            lo.class_at1,
            hi.class_at1,
            lo.orient_agree,
            full.orient_agree
        ),
    ))
}

pub fn cfg_trend(r: &SweepResult) -> Result<(bool, String)> {
    let (one, hi) = (row(r, "1")?, row(r, "7.5")?);
    Ok((
        hi.class_at1 >= one.class_at1,
        format!("Class@1 s=1 {:.3}, s=7.5 {:.3}", one.class_at1, hi.class_at1),
    ))
}

pub fn template_trend(r: &SweepResult) -> Result<(bool, String)> {
    let (g, h) = (row(r, Template::Generic.id())?, row(r, Template::HeadOfClass.id())?);
    Ok((
        g.class_at1 < h.class_at1,
        format!("Class@1 generic {:.3}, head_of_class {:.3}", g.class_at1, h.class_at1),
    ))
}

/// Checks that need trained models and the toy splits.
pub fn trained_checks(t: &Trained, splits: &ToySplits, seed: u64, out_dir: Option<&Path>) -> Vec<Check> {
    let models = Models {
        codec: &t.codec,
        denoiser: &t.denoiser,
        sched: &t.sched,
    };
    let sched = &t.sched;
    let den = &t.denoiser;
    let null = den.null_condition();
    let ct = &splits.creature_test;
    let st = &splits.skeleton_test;
    let mut out = Vec::new();

    out.push(run_check("codec held-out mae", || {
        let mut held = st.images.clone();
        held.extend(ct.images.iter().cloned());
        let (mse, mae) = reconstruction_error(&t.codec, &held)?;
        Ok((mae < CODEC_MAE_LIMIT, format!("mae {mae:.4} (mse {mse:.5}) < {CODEC_MAE_LIMIT}")))
    }));
    out.push(run_check("codec latent locality", || {
        let s = latent_locality(&t.codec, &ct.images, 8, seed)?;
        Ok((s >= LOCALITY_SHARE, format!("{s:.3} of changed energy in window >= {LOCALITY_SHARE}")))
    }));
    out.push(run_check("classifier accuracy and reject", || {
        let acc = top1_scores(&t.classifier.predict(&ct.images)?, &ct.classes)?.1;
        let rej = t.classifier.predict(&st.images)?.iter().filter(|&&p| p == REJECT).count();
        let rej = share(rej, st.len());
        Ok((
            acc >= CLASSIFIER_ACCURACY && rej >= CLASSIFIER_REJECT,
            format!("accuracy {acc:.3} >= {CLASSIFIER_ACCURACY}, reject {rej:.3} >= {CLASSIFIER_REJECT}"),
        ))
    }));
    let latents = match t.codec.encode_all(&ct.images, 64) {
        Ok(l) => l,
        Err(e) => {
            out.push(run_check("encode test latents", || Err(e)));
            return out;
        }
    };
    out.push(run_check("denoiser condition gap", || {
        let (gap, se, n) = condition_gap(den, &latents, &ct.classes, sched, CONDITION_PAIRS)?;
        Ok((gap > 1.645 * se, format!("wrong - true eps mse {gap:.4} +- {se:.4} over {n} pairs")))
    }));

    let batch = CYCLE_TRIALS.min(ct.len());
    let idx: Vec<usize> = (0..batch).collect();
    out.push(run_check("cycle consistency", || {
        let z0 = gather_batch(&latents, &idx)?;
        let conds: Vec<ConditionEmbedding> = idx
            .iter()
            .map(|&i| den.template_condition(Template::HeadOfClass, ct.classes[i]))
            .collect::<Result<_>>()?;
        let refs: Vec<&ConditionEmbedding> = conds.iter().collect();
        let r = cycle_consistency(den, &z0, &refs, &null, CYCLE_STEPS, sched)?;
        Ok((
            r.error <= CYCLE_TOLERANCE && r.refined_better >= CYCLE_REFINED_SHARE,
            format!(
                "k={CYCLE_STEPS} error {:.2e} <= {CYCLE_TOLERANCE:.0e}, refined better in {:.0}% of {batch}",
                r.error,
                100.0 * r.refined_better
            ),
        ))
    }));
    out.push(run_check("mismatched round trip", || {
        let idx: Vec<usize> = (0..16.min(ct.len())).collect();
        let z0 = gather_batch(&latents, &idx)?;
        let cond = |off: usize| -> Result<Vec<ConditionEmbedding>> {
            idx.iter()
                .map(|&i| den.template_condition(Template::HeadOfClass, (ct.classes[i] + off) % NUM_CLASSES))
                .collect()
        };
        let (a, b) = (cond(0)?, cond(3)?);
        let (ra, rb): (Vec<_>, Vec<_>) = (a.iter().collect(), b.iter().collect());
        let matched = round_trip_error(den, &z0, &ra, &ra, &null, CYCLE_STEPS, 7.5, sched)?;
        let mismatched = round_trip_error(den, &z0, &ra, &rb, &null, CYCLE_STEPS, 7.5, sched)?;
        Ok((mismatched > matched, format!("matched {matched:.4}, mismatched {mismatched:.4}")))
    }));
    out.push(run_check("cfg contracts", || {
        let z = encoding_noise(seed, 0, &t.codec.config().latent_shape()).unsqueeze0();
        let a = den.template_condition(Template::HeadOfClass, 0)?;
        let b = den.template_condition(Template::HeadOfClass, 4)?;
        let (u, c) = cfg_contracts(den, &z, &a, &b, &null, sched)?;
        Ok((u && c, format!("s=0 condition-free {u}, s=1 conditional branch {c}")))
    }));

    let base = TranslationConfig {
        seed,
        ..TranslationConfig::default()
    };
    out.push(run_check("unconditional samples", || {
        let n = 48;
        let idx: Vec<u64> = (0..n as u64).collect();
        let cfg = TranslationConfig {
            guidance_scale: 0.0,
            ..base
        };
        let imgs = generate(&models, &vec![None; n], &idx, &cfg)?;
        let hits = t.classifier.predict(&imgs)?.iter().filter(|&&p| p != REJECT).count();
        let r = share(hits, n);
        Ok((
            r >= UNCONDITIONAL_CREATURE_RATE,
            format!("{r:.3} classified as a creature >= {UNCONDITIONAL_CREATURE_RATE}"),
        ))
    }));
    out.push(run_check("class-conditional samples", || {
        let n = 8 * NUM_CLASSES;
        let classes: Vec<Option<usize>> = (0..n).map(|i| Some(i % NUM_CLASSES)).collect();
        let idx: Vec<u64> = (0..n as u64).collect();
        let imgs = generate(&models, &classes, &idx, &base)?;
        let preds = t.classifier.predict(&imgs)?;
        let hits = preds.iter().zip(&classes).filter(|(p, c)| Some(**p) == **c).count();
        let r = share(hits, n);
        Ok((r >= CONDITIONAL_CLASS_RATE, format!("{r:.3} of class at s=7.5 >= {CONDITIONAL_CLASS_RATE}")))
    }));
    out.push(run_check("translate example", || {
        let Some(i) = st.classes.iter().position(|&c| c == 2) else {
            return invalid("no 3-spike skeleton in the test split");
        };
        let y = translate(&models, &st.images[i], 2, &base)?;
        let cls = t.classifier.predict(std::slice::from_ref(&y))?[0];
        let same = orientation_of(&y).ok() == orientation_of(&st.images[i]).ok();
        Ok((
            cls == 2 && same,
            format!(
                "k={}, classified {cls} (want 2, geometric {:?}), orientation kept {same}",
                base.steps(sched)?,
                class_of(&y).ok()
            ),
        ))
    }));
    out.push(run_check("translate determinism", || {
        let n = 4.min(st.len());
        let idx: Vec<u64> = (0..n as u64).collect();
        let a = translate_batch(&models, &st.images[..n], &st.classes[..n], &idx, &base)?;
        let b = translate_batch(&models, &st.images[..n], &st.classes[..n], &idx, &base)?;
        Ok((a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)), format!("{n} images twice")))
    }));
    out.push(run_check("translate compositionality", || {
        let x = &st.images[0];
        let c = st.classes[0];
        let y = translate(&models, x, c, &base)?;
        let k = base.steps(sched)?;
        let z0 = t.codec.encode(&x.unsqueeze0())?;
        let eps = encoding_noise(base.seed, 0, &z0.index0(0)?.shape().to_vec());
        let zk = forward_diffuse(&z0.index0(0)?, k, &eps, sched)?.unsqueeze0();
        let cond = den.template_condition(base.template, c)?;
        let g = Guidance {
            conds: vec![&cond],
            null: &null,
            scale: base.guidance_scale,
        };
        let sc = SamplerConfig {
            eta: base.eta,
            guidance_scale: base.guidance_scale,
            seed: base.seed,
        };
        let z = reverse(den, &zk, k, &g, &sc, sched, &[0])?;
        let manual = t.codec.decode(&z)?.index0(0)?;
        Ok((manual.bitwise_eq(&y), "decode(reverse(forward(encode(x)))) vs translate".into()))
    }));

    match run_trend_sweeps(t, splits, &base, out_dir) {
        Ok(s) => {
            let secs = s.fraction_seconds;
            out.push(run_check("fraction sweep trend", || fraction_trend(&s.fraction)));
            out.push(run_check("fraction sweep runtime", || {
                Ok((secs < 15.0 * 60.0, format!("{:.1} min < 15", secs / 60.0)))
            }));
            out.push(run_check("cfg sweep trend", || cfg_trend(&s.cfg)));
            out.push(run_check("template ablation trend", || template_trend(&s.template)));
        }
        Err(e) => out.push(run_check("trend sweeps", || Err(e))),
    }
    out
}
