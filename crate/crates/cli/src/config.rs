//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use r2i_core::codec::{CodecConfig, CodecTrainConfig};
use r2i_core::data::DatasetCounts;
use r2i_core::denoiser::{vocabulary, DenoiserConfig, DenoiserTrainConfig, Template};
use r2i_core::eval::ClassifierTrainConfig;
use r2i_core::experiment::TrainPlan;
use r2i_core::pipeline::TranslationConfig;
use r2i_core::schedule::ScheduleConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            output: "out".into(),
        }
    }
}

/// Everything a command reads besides raw image files. The top-level
/// `seed` is copied into every component seed when the config resolves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Condition tokens in id order; checked against the engine on load.
    pub vocabulary: Vec<String>,
    pub paths: Paths,
    pub dataset: DatasetCounts,
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub classifier_train: ClassifierTrainConfig,
    pub translation: TranslationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = TrainPlan::default();
        Self {
            seed: 0,
            vocabulary: vocabulary(),
            paths: Paths::default(),
            dataset: DatasetCounts::default(),
            schedule: plan.schedule,
            codec: plan.codec,
            codec_train: plan.codec_train,
            denoiser: plan.denoiser,
            denoiser_train: plan.denoiser_train,
            classifier_train: plan.classifier_train,
            translation: TranslationConfig::default(),
        }
    }
}

/// Values given on the command line, applied over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub fraction: Option<f64>,
    pub cfg_scale: Option<f64>,
    pub template: Option<String>,
    pub steps: Option<usize>,
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("bad config: {e}")).into())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies `o`, propagates the seed and validates the result.
    pub fn resolve(mut self, o: &Overrides) -> anyhow::Result<Self> {
        let expected: Vec<String> = vocabulary();
        if !self.vocabulary.is_empty() && self.vocabulary != expected {
            return Err(UsageError(format!(
                "config vocabulary {:?} does not match the engine's {:?}",
                self.vocabulary, expected
            ))
            .into());
        }
        self.vocabulary = expected;
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.fraction {
            self.translation.fraction = f;
        }
        if let Some(s) = o.cfg_scale {
            self.translation.guidance_scale = s;
        }
        if let Some(t) = &o.template {
            self.translation.template = Template::parse(t).map_err(|e| UsageError(e.to_string()))?;
        }
        if let Some(k) = o.steps {
            let total = self.schedule.steps;
            if k == 0 || k > total {
                return Err(UsageError(format!("--steps must lie in 1..={total}, got {k}")).into());
            }
            self.translation.fraction = k as f64 / total as f64;
        }
        if let Some(p) = &o.data {
            self.paths.data = p.clone();
        }
        if let Some(p) = &o.checkpoints {
            self.paths.checkpoints = p.clone();
        }
        if let Some(p) = &o.output {
            self.paths.output = p.clone();
        }
        self.translation.seed = self.seed;
        self.codec_train.seed = self.seed;
        self.denoiser_train.seed = self.seed;
        self.classifier_train.seed = self.seed;
        let f = self.translation.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(UsageError(format!("fraction must lie in (0, 1], got {f}")).into());
        }
        let s = self.translation.guidance_scale;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(UsageError(format!("cfg scale must be finite and >= 0, got {s}")).into());
        }
        Ok(self)
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            schedule: self.schedule,
            codec: self.codec,
            codec_train: self.codec_train,
            denoiser: self.denoiser.clone(),
            denoiser_train: self.denoiser_train.clone(),
            classifier_train: self.classifier_train,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default().resolve(&Overrides::default()).unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 4\n[translation]\nfraction = 0.5\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.translation.fraction, 0.5);
        assert_eq!(c.translation.guidance_scale, 7.5);
        assert_eq!(c.schedule, ScheduleConfig::default());
    }

    #[test]
    fn flags_override_file_and_seed_propagates() {
        let o = Overrides {
            seed: Some(9),
            cfg_scale: Some(1.0),
            steps: Some(25),
            template: Some("generic".into()),
            ..Overrides::default()
        };
        let c = RunConfig::from_toml("seed = 4\n").unwrap().resolve(&o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.translation.seed, 9);
        assert_eq!(c.denoiser_train.seed, 9);
        assert_eq!(c.translation.fraction, 0.25);
        assert_eq!(c.translation.guidance_scale, 1.0);
        assert_eq!(c.translation.template, Template::Generic);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let bad = [
            Overrides {
                steps: Some(0),
                ..Overrides::default()
            },
            Overrides {
                fraction: Some(1.5),
                ..Overrides::default()
            },
            Overrides {
                template: Some("a dog".into()),
                ..Overrides::default()
            },
        ];
        for o in bad {
            let e = RunConfig::default().resolve(&o).unwrap_err();
            assert!(e.downcast_ref::<UsageError>().is_some(), "{e}");
        }
        let e = RunConfig::from_toml("unknown_key = 1\n").unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        let e = RunConfig::from_toml("vocabulary = [\"a\"]\n")
            .unwrap()
            .resolve(&Overrides::default())
            .unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
    }
}
