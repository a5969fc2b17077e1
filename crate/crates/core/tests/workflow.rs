//! Data generation, training reuse, translation and sweeps on a tiny
//! configuration that trains in seconds.

use std::fs;
use std::path::Path;

use r2i_core::codec::{CodecConfig, CodecTrainConfig};
use r2i_core::data::{class_name, gen_toy_dataset, load_manifest, DatasetCounts, Domain, NUM_CLASSES};
use r2i_core::denoiser::{DenoiserConfig, DenoiserTrainConfig, Template};
use r2i_core::eval::ClassifierTrainConfig;
use r2i_core::experiment::{load_or_train, load_trained, sha256_file, ToySplits, TrainPlan, CODEC_FILE};
use r2i_core::pipeline::{generate, run_sweep, translate, translate_batch, Encoding, Models, SweepValue, TestSet, TranslationConfig};
use r2i_core::verify::latent_locality;

const COUNTS: DatasetCounts = DatasetCounts { train: 12, test: 6 };

fn tiny_plan() -> TrainPlan {
    TrainPlan {
        codec: CodecConfig {
            base_width: 4,
            ..CodecConfig::toy()
        },
        codec_train: CodecTrainConfig {
            epochs: 1,
            batch_size: 8,
            ..CodecTrainConfig::default()
        },
        denoiser: DenoiserConfig {
            base_width: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            heads: 2,
            d_tau: 8,
            time_dim: 16,
            ..DenoiserConfig::default()
        },
        denoiser_train: DenoiserTrainConfig {
            epochs: 1,
            batch_size: 8,
            ..DenoiserTrainConfig::default()
        },
        classifier_train: ClassifierTrainConfig {
            epochs: 1,
            batch_size: 8,
            ..ClassifierTrainConfig::default()
        },
        ..TrainPlan::default()
    }
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_generation_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = gen_toy_dataset(a.path(), 3, COUNTS).unwrap();
    gen_toy_dataset(b.path(), 3, COUNTS).unwrap();
    assert_eq!(files(a.path()), files(b.path()));
    assert_eq!(m.records.len(), 2 * (COUNTS.train + COUNTS.test));
    for d in [Domain::Skeleton, Domain::Creature] {
        for c in 0..NUM_CLASSES {
            let n = m.records.iter().filter(|r| r.domain == d && r.class == c).count();
            assert!(n >= 2, "{} {} has {n} images", d.name(), class_name(c));
        }
    }
    let c = tempfile::tempdir().unwrap();
    gen_toy_dataset(c.path(), 4, COUNTS).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
    assert!(gen_toy_dataset(c.path(), 3, DatasetCounts { train: 2, test: 1 }).is_err());
}

#[test]
fn tiny_end_to_end_run() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_toy_dataset(&data, 5, COUNTS).unwrap();
    let splits = ToySplits::load(&load_manifest(&data).unwrap()).unwrap();
    let plan = tiny_plan();
    let ckpt = root.path().join("ckpt");

    let t = load_or_train(&ckpt, &plan, &splits).unwrap();
    let hash = sha256_file(&ckpt.join(CODEC_FILE)).unwrap();
    let again = load_or_train(&ckpt, &plan, &splits).unwrap();
    assert_eq!(hash, sha256_file(&ckpt.join(CODEC_FILE)).unwrap());
    let loaded = load_trained(&ckpt, &plan).unwrap();

    let x = &splits.skeleton_test.images;
    let z = t.codec.encode(&x[0].unsqueeze0()).unwrap();
    assert_eq!(z.shape(), &[1, 4, 8, 8]);
    assert!(z.bitwise_eq(&again.codec.encode(&x[0].unsqueeze0()).unwrap()));
    let share = latent_locality(&t.codec, &splits.creature_test.images, 8, 0).unwrap();
    assert!((0.0..=1.0).contains(&share));

    let models = Models {
        codec: &t.codec,
        denoiser: &t.denoiser,
        sched: &t.sched,
    };
    let reloaded = Models {
        codec: &loaded.codec,
        denoiser: &loaded.denoiser,
        sched: &loaded.sched,
    };
    let cfg = TranslationConfig {
        fraction: 0.2,
        ..TranslationConfig::default()
    };
    let y = translate(&models, &x[0], 2, &cfg).unwrap();
    assert_eq!(y.shape(), &[3, 32, 32]);
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!(y.bitwise_eq(&translate(&reloaded, &x[0], 2, &cfg).unwrap()));
    assert!(translate(&models, &x[0].index0(0).unwrap(), 2, &cfg).is_err());

    let inv = TranslationConfig {
        encoding: Encoding::Inversion,
        ..cfg
    };
    let batch = translate_batch(&models, &x[..2], &[0, 1], &[0, 1], &inv).unwrap();
    assert!(batch[0].bitwise_eq(&translate_batch(&models, &x[..1], &[0], &[0], &inv).unwrap()[0]));

    let short = TranslationConfig {
        fraction: 0.05,
        ..cfg
    };
    let samples = generate(&models, &[None, Some(3)], &[0, 1], &short).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(generate(&models, &[None], &[0, 1], &short).is_err());

    let reference = t.classifier.features(&splits.creature_test.images).unwrap();
    let s = &splits.skeleton_test;
    let test = TestSet {
        sources: &s.images,
        classes: &s.classes,
        ids: &s.ids,
    };
    let out = root.path().join("out");
    let values = [SweepValue::Template(Template::Generic), SweepValue::Template(Template::HeadOfClass)];
    let quick = TranslationConfig {
        fraction: 0.1,
        ..cfg
    };
    let r = run_sweep(&models, &t.classifier, &values, &quick, &test, &reference, Some(&out)).unwrap();
    assert_eq!(r.rows.len(), 2);
    for row in &r.rows {
        let m = row.metrics;
        assert!(m.fid >= 0.0 && (0.0..=1.0).contains(&m.class_at1) && m.class_at1 <= m.all_at1);
        for id in s.ids.iter() {
            assert!(out.join("template").join(&row.axis_value).join(format!("{id}.png")).exists());
        }
    }
    let csv = out.join("template/metrics.csv");
    r.write_csv(&csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("axis_value,fid,kid,all_at1,class_at1,orient_agree\n"));
    assert_eq!(text.lines().count(), 3);

    let changed = TrainPlan {
        codec_train: CodecTrainConfig {
            seed: 1,
            ..plan.codec_train
        },
        ..plan.clone()
    };
    let retrained = load_or_train(&ckpt, &changed, &splits).unwrap();
    assert_ne!(hash, sha256_file(&ckpt.join(CODEC_FILE)).unwrap());
    assert!(!retrained
        .codec
        .encode(&x[0].unsqueeze0())
        .unwrap()
        .bitwise_eq(&z));
}
