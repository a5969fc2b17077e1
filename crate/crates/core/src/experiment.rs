//! Shared workflow for the toy task: split loading, model training with
//! on-disk reuse, and content hashing of artifacts.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{train_codec, Codec, CodecConfig, CodecTrainConfig, CodecTrainReport};
use crate::data::{DatasetManifest, Domain, Split};
use crate::denoiser::{train_denoiser, Denoiser, DenoiserConfig, DenoiserTrainConfig, DenoiserTrainReport};
use crate::error::{Error, Result};
use crate::eval::{train_classifier, Classifier, ClassifierReport, ClassifierTrainConfig, LabelledSet};
use crate::numerics::Tensor;
use crate::schedule::{NoiseSchedule, ScheduleConfig};

pub const CODEC_FILE: &str = "codec.r2i";
pub const DENOISER_FILE: &str = "denoiser.r2i";
pub const CLASSIFIER_FILE: &str = "classifier.r2i";
pub const PLAN_FILE: &str = "plan.json";

/// Images of one domain and split with their labels and file stems.
#[derive(Clone, Debug, Default)]
pub struct Labelled {
    pub images: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub ids: Vec<String>,
}

impl Labelled {
    fn load(manifest: &DatasetManifest, domain: Domain, split: Split) -> Result<Self> {
        let recs = manifest.select(domain, split);
        Ok(Self {
            images: manifest.load_images(&recs)?,
            classes: recs.iter().map(|r| r.class).collect(),
            ids: recs
                .iter()
                .map(|r| {
                    Path::new(&r.path)
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| r.path.clone())
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ToySplits {
    pub skeleton_train: Labelled,
    pub skeleton_test: Labelled,
    pub creature_train: Labelled,
    pub creature_test: Labelled,
}

impl ToySplits {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let s = Self {
            skeleton_train: Labelled::load(manifest, Domain::Skeleton, Split::Train)?,
            skeleton_test: Labelled::load(manifest, Domain::Skeleton, Split::Test)?,
            creature_train: Labelled::load(manifest, Domain::Creature, Split::Train)?,
            creature_test: Labelled::load(manifest, Domain::Creature, Split::Test)?,
        };
        if s.creature_train.is_empty() || s.skeleton_train.is_empty() {
            return Err(Error::Dataset("both domains need training images".into()));
        }
        Ok(s)
    }
}

/// Every hyperparameter that shapes the trained models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub schedule: ScheduleConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub denoiser: DenoiserConfig,
    pub denoiser_train: DenoiserTrainConfig,
    pub classifier_train: ClassifierTrainConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            codec: CodecConfig::toy(),
            codec_train: CodecTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            denoiser_train: DenoiserTrainConfig::default(),
            classifier_train: ClassifierTrainConfig::default(),
        }
    }
}

/// The codec sees both domains; the held-out set is both test splits.
pub fn train_codec_stage(plan: &TrainPlan, splits: &ToySplits) -> Result<(Codec, CodecTrainReport)> {
    let mut train = splits.skeleton_train.images.clone();
    train.extend(splits.creature_train.images.iter().cloned());
    let mut held = splits.skeleton_test.images.clone();
    held.extend(splits.creature_test.images.iter().cloned());
    train_codec(plan.codec, &train, &held, &plan.codec_train)
}

/// The denoiser learns the target (creature) domain only.
pub fn train_denoiser_stage(
    plan: &TrainPlan,
    codec: &Codec,
    splits: &ToySplits,
) -> Result<(Denoiser, DenoiserTrainReport)> {
    let sched = plan.schedule.build()?;
    let c = &splits.creature_train;
    train_denoiser(plan.denoiser.clone(), codec, &c.images, &c.classes, &sched, &plan.denoiser_train)
}

pub fn train_classifier_stage(plan: &TrainPlan, splits: &ToySplits) -> Result<(Classifier, ClassifierReport)> {
    let train = LabelledSet {
        creatures: &splits.creature_train.images,
        classes: &splits.creature_train.classes,
        skeletons: &splits.skeleton_train.images,
    };
    let held = LabelledSet {
        creatures: &splits.creature_test.images,
        classes: &splits.creature_test.classes,
        skeletons: &splits.skeleton_test.images,
    };
    train_classifier(&train, &held, &plan.classifier_train)
}

pub struct Trained {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub classifier: Classifier,
    pub sched: NoiseSchedule,
}

/// Loads the three models from `dir` when they were trained under the same
/// plan, otherwise trains whatever is missing and saves it there.
pub fn load_or_train(dir: &Path, plan: &TrainPlan, splits: &ToySplits) -> Result<Trained> {
    std::fs::create_dir_all(dir)?;
    let plan_path = dir.join(PLAN_FILE);
    let same_plan = std::fs::read_to_string(&plan_path)
        .ok()
        .and_then(|s| serde_json::from_str::<TrainPlan>(&s).ok())
        .is_some_and(|p| &p == plan);
    if !same_plan {
        for f in [CODEC_FILE, DENOISER_FILE, CLASSIFIER_FILE] {
            let _ = std::fs::remove_file(dir.join(f));
        }
        std::fs::write(&plan_path, serde_json::to_string_pretty(plan)?)?;
    }
    let codec_path = dir.join(CODEC_FILE);
    let codec = if codec_path.exists() {
        Codec::load(plan.codec, &codec_path)?
    } else {
        let (c, r) = train_codec_stage(plan, splits)?;
        info!("codec trained: held-out mae {:.4}", r.heldout_mae);
        c.save(&codec_path)?;
        c
    };
    let den_path = dir.join(DENOISER_FILE);
    let denoiser = if den_path.exists() {
        Denoiser::load(plan.denoiser.clone(), &den_path)?
    } else {
        let (d, _) = train_denoiser_stage(plan, &codec, splits)?;
        d.save(&den_path)?;
        d
    };
    let clf_path = dir.join(CLASSIFIER_FILE);
    let classifier = if clf_path.exists() {
        Classifier::load(&clf_path)?
    } else {
        let (c, _) = train_classifier_stage(plan, splits)?;
        c.save(&clf_path)?;
        c
    };
    Ok(Trained {
        codec,
        denoiser,
        classifier,
        sched: plan.schedule.build()?,
    })
}

/// Loads the three trained models from `dir` without training anything.
pub fn load_trained(dir: &Path, plan: &TrainPlan) -> Result<Trained> {
    Ok(Trained {
        codec: Codec::load(plan.codec, &dir.join(CODEC_FILE))?,
        denoiser: Denoiser::load(plan.denoiser.clone(), &dir.join(DENOISER_FILE))?,
        classifier: Classifier::load(&dir.join(CLASSIFIER_FILE))?,
        sched: plan.schedule.build()?,
    })
}

/// Lower-case hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
