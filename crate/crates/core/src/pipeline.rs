//! End-to-end translation: encode, partially noise, guided reverse, decode.
//! Plus sweeps over the fraction, the guidance scale and the prompt template.

use std::fmt;
use std::path::Path;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::data::save_image;
use crate::denoiser::{ConditionEmbedding, Denoiser, Template};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, Classifier, MetricsReport};
use crate::nn::gather_batch;
use crate::numerics::Tensor;
use crate::sampler::{ddim_invert, reverse, Guidance, SamplerConfig};
use crate::schedule::{forward_diffuse, step_from_fraction, NoiseSchedule};

pub const FRACTION_GRID: [f64; 7] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0];
pub const SHORT_FRACTION_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const CFG_GRID: [f64; 7] = [5.0, 6.0, 7.0, 7.5, 8.0, 9.0, 10.0];

/// How the source latent is carried to step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Closed-form forward process with fresh Gaussian noise.
    Stochastic,
    /// Deterministic DDIM inversion under the null condition.
    Inversion,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslationConfig {
    pub fraction: f64,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub template: Template,
    pub encoding: Encoding,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            fraction: 0.95,
            guidance_scale: 7.5,
            eta: 0.0,
            seed: 0,
            template: Template::HeadOfClass,
            encoding: Encoding::Stochastic,
        }
    }
}

impl TranslationConfig {
    pub fn steps(&self, sched: &NoiseSchedule) -> Result<usize> {
        step_from_fraction(self.fraction, sched.steps())
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            eta: self.eta,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
        }
    }
}

/// Trained models and the schedule they were trained with.
pub struct Models<'a> {
    pub codec: &'a Codec,
    pub denoiser: &'a Denoiser,
    pub sched: &'a NoiseSchedule,
}

impl Models<'_> {
    fn check(&self) -> Result<()> {
        if !self.codec.is_trained() {
            return Err(Error::Untrained("codec"));
        }
        if !self.denoiser.is_trained() {
            return Err(Error::Untrained("denoiser"));
        }
        Ok(())
    }
}

/// Forward-process noise for image `index` under `seed`.
pub fn encoding_noise(seed: u64, index: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Translates a batch of source images `[3, H, W]`, each towards its own
/// target class. `indices` select the per-image random streams.
pub fn translate_batch(
    models: &Models,
    sources: &[Tensor],
    classes: &[usize],
    indices: &[u64],
    cfg: &TranslationConfig,
) -> Result<Vec<Tensor>> {
    models.check()?;
    if sources.len() != classes.len() || sources.len() != indices.len() {
        return invalid("sources, classes and indices differ in length");
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let k = cfg.steps(models.sched)?;
    let all: Vec<usize> = (0..sources.len()).collect();
    let z0 = models.codec.encode(&gather_batch(sources, &all)?)?;
    let null = models.denoiser.null_condition();
    let conds: Vec<ConditionEmbedding> = classes
        .iter()
        .map(|&c| models.denoiser.template_condition(cfg.template, c))
        .collect::<Result<_>>()?;
    let zk = match cfg.encoding {
        Encoding::Stochastic => {
            let per: Vec<Tensor> = (0..sources.len())
                .map(|i| {
                    let z = z0.index0(i)?;
                    let eps = encoding_noise(cfg.seed, indices[i], z.shape());
                    forward_diffuse(&z, k, &eps, models.sched).map(|t| t.unsqueeze0())
                })
                .collect::<Result<_>>()?;
            Tensor::stack0(&per)?
        }
        Encoding::Inversion => {
            let g = Guidance {
                conds: vec![&null; sources.len()],
                null: &null,
                scale: 0.0,
            };
            ddim_invert(models.denoiser, &z0, k, &g, models.sched)?
        }
    };
    let g = Guidance {
        conds: conds.iter().collect(),
        null: &null,
        scale: cfg.guidance_scale,
    };
    let z = reverse(models.denoiser, &zk, k, &g, &cfg.sampler(), models.sched, indices)?;
    let x = models.codec.decode(&z)?;
    (0..sources.len()).map(|i| x.index0(i)).collect()
}

/// Samples images from pure noise at step `T`. `classes[i] = None` draws an
/// unconditional sample, which uses the null condition with no guidance.
pub fn generate(
    models: &Models,
    classes: &[Option<usize>],
    indices: &[u64],
    cfg: &TranslationConfig,
) -> Result<Vec<Tensor>> {
    models.check()?;
    if classes.len() != indices.len() {
        return invalid("classes and indices differ in length");
    }
    if classes.is_empty() {
        return Ok(Vec::new());
    }
    let shape = models.codec.config().latent_shape();
    let per: Vec<Tensor> = indices
        .iter()
        .map(|&i| encoding_noise(cfg.seed, i, &shape).unsqueeze0())
        .collect();
    let zt = Tensor::stack0(&per)?;
    let null = models.denoiser.null_condition();
    let conds: Vec<ConditionEmbedding> = classes
        .iter()
        .map(|c| match c {
            Some(c) => models.denoiser.template_condition(cfg.template, *c),
            None => Ok(null.clone()),
        })
        .collect::<Result<_>>()?;
    let g = Guidance {
        conds: conds.iter().collect(),
        null: &null,
        scale: cfg.guidance_scale,
    };
    let steps = models.sched.steps();
    let z = reverse(models.denoiser, &zt, steps, &g, &cfg.sampler(), models.sched, indices)?;
    let x = models.codec.decode(&z)?;
    (0..classes.len()).map(|i| x.index0(i)).collect()
}

/// Translates one source image towards `class`.
pub fn translate(models: &Models, source: &Tensor, class: usize, cfg: &TranslationConfig) -> Result<Tensor> {
    let f = models.codec.config().downsample;
    let s = source.shape();
    if s.len() != 3 || s[0] != 3 || s[1] % f != 0 || s[2] % f != 0 {
        return invalid(format!("translate expects a [3, H, W] image with H, W divisible by {f}, got {s:?}"));
    }
    Ok(translate_batch(models, &[source.clone()], &[class], &[0], cfg)?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Fraction,
    CfgScale,
    Template,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fraction => "fraction",
            Self::CfgScale => "cfg",
            Self::Template => "template",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SweepValue {
    Fraction(f64),
    CfgScale(f64),
    Template(Template),
}

impl SweepValue {
    fn apply(self, base: &TranslationConfig) -> TranslationConfig {
        let mut cfg = *base;
        match self {
            Self::Fraction(f) => cfg.fraction = f,
            Self::CfgScale(s) => cfg.guidance_scale = s,
            Self::Template(t) => cfg.template = t,
        }
        cfg
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fraction(v) | Self::CfgScale(v) => write!(f, "{v}"),
            Self::Template(t) => f.write_str(t.id()),
        }
    }
}

/// Labelled source images for a sweep.
pub struct TestSet<'a> {
    pub sources: &'a [Tensor],
    pub classes: &'a [usize],
    /// Output file stems, one per source.
    pub ids: &'a [String],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub metrics: MetricsReport,
    /// Mean absolute pixel difference between source and output.
    pub pixel_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_metrics_csv(path, self.rows.iter().map(|r| (r.axis_value.as_str(), &r.metrics)))
    }

    pub fn row(&self, axis_value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.axis_value == axis_value)
    }
}

/// Writes `axis_value,fid,kid,all_at1,class_at1,orient_agree` rows.
pub fn write_metrics_csv<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis_value", "fid", "kid", "all_at1", "class_at1", "orient_agree"])?;
    for (value, m) in rows {
        w.write_record([
            value.to_string(),
            format!("{:.6}", m.fid),
            format!("{:.6}", m.kid),
            format!("{:.6}", m.all_at1),
            format!("{:.6}", m.class_at1),
            format!("{:.6}", m.orient_agree),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Translations are computed in chunks of this many images.
const CHUNK: usize = 32;

/// Translates every test image for each value and scores the outputs
/// against `reference` features of real target-domain images. When
/// `out_dir` is given, images land in `<out_dir>/<axis>/<value>/<id>.png`.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    models: &Models,
    clf: &Classifier,
    values: &[SweepValue],
    base: &TranslationConfig,
    test: &TestSet,
    reference: &Tensor,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if test.sources.is_empty() {
        return Err(Error::Dataset("sweep test set is empty".into()));
    }
    if values.is_empty() {
        return invalid("sweep needs at least one value");
    }
    if test.classes.len() != test.sources.len() || test.ids.len() != test.sources.len() {
        return invalid("test set sources, classes and ids differ in length");
    }
    let axis = match values[0] {
        SweepValue::Fraction(_) => SweepAxis::Fraction,
        SweepValue::CfgScale(_) => SweepAxis::CfgScale,
        SweepValue::Template(_) => SweepAxis::Template,
    };
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let cfg = value.apply(base);
        let mut outputs = Vec::with_capacity(test.sources.len());
        for start in (0..test.sources.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(test.sources.len());
            let idx: Vec<u64> = (start as u64..end as u64).collect();
            outputs.extend(translate_batch(
                models,
                &test.sources[start..end],
                &test.classes[start..end],
                &idx,
                &cfg,
            )?);
        }
        if let Some(dir) = out_dir {
            let d = dir.join(axis.name()).join(value.to_string());
            for (img, id) in outputs.iter().zip(test.ids) {
                save_image(&d.join(format!("{id}.png")), img)?;
            }
        }
        let metrics = evaluate(clf, &outputs, test.classes, test.sources, reference)?;
        let pixel_distance = test
            .sources
            .iter()
            .zip(&outputs)
            .map(|(a, b)| a.mean_abs_diff(b).map(f64::from))
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum::<f64>()
            / outputs.len() as f64;
        info!("{} = {value}: {metrics:?}, pixel distance {pixel_distance:.4}", axis.name());
        rows.push(SweepRow {
            axis_value: value.to_string(),
            metrics,
            pixel_distance,
        });
    }
    Ok(SweepResult { axis, rows })
}
