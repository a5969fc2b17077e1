//! One function per subcommand. Each returns `Ok(false)` when it ran to the
//! end but found failing checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;

use r2i_core::codec::Codec;
use r2i_core::data::{class_name, gen_toy_dataset, load_image, load_manifest, parse_class, save_image, MANIFEST_FILE};
use r2i_core::denoiser::{Denoiser, Template};
use r2i_core::eval::{evaluate, Classifier};
use r2i_core::experiment::{
    load_trained, sha256_file, train_classifier_stage, train_codec_stage, train_denoiser_stage, ToySplits, CLASSIFIER_FILE,
    CODEC_FILE, DENOISER_FILE,
};
use r2i_core::pipeline::{
    run_sweep, translate as translate_image, write_metrics_csv, Models, SweepValue, TestSet, CFG_GRID, FRACTION_GRID,
};
use r2i_core::verify::{
    grad_check_models, grad_check_primitives, model_free_checks, run_check, trained_checks, write_checks_csv, Check,
    GRAD_TOLERANCE,
};

use crate::config::RunConfig;
use crate::{Stage, UsageError};

/// Echoes the effective config and the SHA-256 of every artifact into `dir`
/// as `<name>.config.toml` and `<name>.hashes.json`.
fn record_run(dir: &Path, name: &str, cfg: &RunConfig, artifacts: &[PathBuf]) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{name}.config.toml")), cfg.to_toml()?)?;
    let mut hashes = BTreeMap::new();
    for p in artifacts.iter().filter(|p| p.is_file()) {
        hashes.insert(p.display().to_string(), sha256_file(p)?);
    }
    std::fs::write(dir.join(format!("{name}.hashes.json")), serde_json::to_string_pretty(&hashes)?)?;
    Ok(())
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data.join(MANIFEST_FILE)
}

fn checkpoint(cfg: &RunConfig, file: &str) -> PathBuf {
    cfg.paths.checkpoints.join(file)
}

fn load_splits(cfg: &RunConfig) -> anyhow::Result<ToySplits> {
    let m = load_manifest(&cfg.paths.data)
        .with_context(|| format!("loading dataset from {} (run `r2i gen-data` first?)", cfg.paths.data.display()))?;
    for w in &m.warnings {
        log::warn!("{w}");
    }
    Ok(ToySplits::load(&m)?)
}

fn load_codec(cfg: &RunConfig) -> anyhow::Result<Codec> {
    let p = checkpoint(cfg, CODEC_FILE);
    Codec::load(cfg.codec, &p).with_context(|| format!("loading codec {} (run `r2i train codec`?)", p.display()))
}

fn load_denoiser(cfg: &RunConfig) -> anyhow::Result<Denoiser> {
    let p = checkpoint(cfg, DENOISER_FILE);
    Denoiser::load(cfg.denoiser.clone(), &p)
        .with_context(|| format!("loading denoiser {} (run `r2i train denoiser`?)", p.display()))
}

fn load_classifier(cfg: &RunConfig) -> anyhow::Result<Classifier> {
    let p = checkpoint(cfg, CLASSIFIER_FILE);
    Classifier::load(&p).with_context(|| format!("loading classifier {} (run `r2i train classifier`?)", p.display()))
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<bool> {
    let m = gen_toy_dataset(&cfg.paths.data, cfg.seed, cfg.dataset)?;
    info!("wrote {} images to {}", m.records.len(), cfg.paths.data.display());
    record_run(&cfg.paths.output.join("gen-data"), "gen-data", cfg, &[manifest_path(cfg)])?;
    Ok(true)
}

pub fn train(cfg: &RunConfig, stage: Stage) -> anyhow::Result<bool> {
    let splits = load_splits(cfg)?;
    let plan = cfg.plan();
    let dir = &cfg.paths.checkpoints;
    std::fs::create_dir_all(dir)?;
    let mut inputs = vec![manifest_path(cfg)];
    let (name, file, report) = match stage {
        Stage::Codec => {
            let (codec, r) = train_codec_stage(&plan, &splits)?;
            info!("codec held-out mse {:.5}, mae {:.4}", r.heldout_mse, r.heldout_mae);
            codec.save(&checkpoint(cfg, CODEC_FILE))?;
            ("train-codec", CODEC_FILE, serde_json::to_value(&r)?)
        }
        Stage::Denoiser => {
            let codec = load_codec(cfg)?;
            inputs.push(checkpoint(cfg, CODEC_FILE));
            let (den, r) = train_denoiser_stage(&plan, &codec, &splits)?;
            den.save(&checkpoint(cfg, DENOISER_FILE))?;
            ("train-denoiser", DENOISER_FILE, serde_json::to_value(&r)?)
        }
        Stage::Classifier => {
            let (clf, r) = train_classifier_stage(&plan, &splits)?;
            clf.save(&checkpoint(cfg, CLASSIFIER_FILE))?;
            ("train-classifier", CLASSIFIER_FILE, serde_json::to_value(&r)?)
        }
    };
    std::fs::write(dir.join(format!("{name}.report.json")), serde_json::to_string_pretty(&report)?)?;
    inputs.push(checkpoint(cfg, file));
    record_run(dir, name, cfg, &inputs)?;
    Ok(true)
}

pub fn translate(cfg: &RunConfig, input: &Path, class: &str, output: Option<PathBuf>) -> anyhow::Result<bool> {
    let class = parse_class(class).map_err(|e| UsageError(e.to_string()))?;
    let codec = load_codec(cfg)?;
    let denoiser = load_denoiser(cfg)?;
    let sched = cfg.schedule.build()?;
    let source = load_image(input)?;
    let t = &cfg.translation;
    let k = t.steps(&sched)?;
    info!(
        "translating {} to {} with k={k} of {} forward steps, cfg scale {}, template {}",
        input.display(),
        class_name(class),
        sched.steps(),
        t.guidance_scale,
        t.template.id()
    );
    let models = Models {
        codec: &codec,
        denoiser: &denoiser,
        sched: &sched,
    };
    let y = translate_image(&models, &source, class, t)?;
    let out_dir = cfg.paths.output.join("translate");
    let path = output.unwrap_or_else(|| {
        let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        out_dir.join(format!("{stem}.png"))
    });
    save_image(&path, &y)?;
    info!("wrote {}", path.display());
    record_run(
        &out_dir,
        "translate",
        cfg,
        &[
            input.to_path_buf(),
            checkpoint(cfg, CODEC_FILE),
            checkpoint(cfg, DENOISER_FILE),
            path,
        ],
    )?;
    Ok(true)
}

fn sweep(cfg: &RunConfig, values: Vec<SweepValue>) -> anyhow::Result<bool> {
    let splits = load_splits(cfg)?;
    let codec = load_codec(cfg)?;
    let denoiser = load_denoiser(cfg)?;
    let clf = load_classifier(cfg)?;
    let sched = cfg.schedule.build()?;
    let models = Models {
        codec: &codec,
        denoiser: &denoiser,
        sched: &sched,
    };
    let reference = clf.features(&splits.creature_test.images)?;
    let s = &splits.skeleton_test;
    let test = TestSet {
        sources: &s.images,
        classes: &s.classes,
        ids: &s.ids,
    };
    let out = &cfg.paths.output;
    let result = run_sweep(&models, &clf, &values, &cfg.translation, &test, &reference, Some(out))?;
    let dir = out.join(result.axis.name());
    let csv = dir.join("metrics.csv");
    result.write_csv(&csv)?;
    println!("{}", std::fs::read_to_string(&csv)?.trim_end());
    let name = format!("sweep-{}", result.axis.name());
    record_run(
        &dir,
        &name,
        cfg,
        &[
            manifest_path(cfg),
            checkpoint(cfg, CODEC_FILE),
            checkpoint(cfg, DENOISER_FILE),
            checkpoint(cfg, CLASSIFIER_FILE),
            csv,
        ],
    )?;
    Ok(true)
}

pub fn sweep_fraction(cfg: &RunConfig, values: &[f64]) -> anyhow::Result<bool> {
    let v = if values.is_empty() { &FRACTION_GRID[..] } else { values };
    sweep(cfg, v.iter().map(|&f| SweepValue::Fraction(f)).collect())
}

pub fn sweep_cfg(cfg: &RunConfig, values: &[f64]) -> anyhow::Result<bool> {
    let v = if values.is_empty() { &CFG_GRID[..] } else { values };
    sweep(cfg, v.iter().map(|&s| SweepValue::CfgScale(s)).collect())
}

pub fn sweep_template(cfg: &RunConfig, values: &[String]) -> anyhow::Result<bool> {
    let templates: Vec<Template> = if values.is_empty() {
        Template::ALL.to_vec()
    } else {
        values
            .iter()
            .map(|v| Template::parse(v).map_err(|e| UsageError(e.to_string())))
            .collect::<Result<_, _>>()?
    };
    sweep(cfg, templates.into_iter().map(SweepValue::Template).collect())
}

pub fn eval(cfg: &RunConfig, outputs: &Path, label: Option<String>) -> anyhow::Result<bool> {
    let splits = load_splits(cfg)?;
    let clf = load_classifier(cfg)?;
    let s = &splits.skeleton_test;
    let (mut sources, mut classes, mut images) = (Vec::new(), Vec::new(), Vec::new());
    for (i, id) in s.ids.iter().enumerate() {
        let p = outputs.join(format!("{id}.png"));
        if p.is_file() {
            images.push(load_image(&p)?);
            sources.push(s.images[i].clone());
            classes.push(s.classes[i]);
        }
    }
    if images.is_empty() {
        bail!("no test images named <id>.png under {}", outputs.display());
    }
    if images.len() < s.len() {
        log::warn!("scoring {} of {} test images", images.len(), s.len());
    }
    let reference = clf.features(&splits.creature_test.images)?;
    let m = evaluate(&clf, &images, &classes, &sources, &reference)?;
    let label = label.unwrap_or_else(|| {
        outputs
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "eval".into())
    });
    let dir = cfg.paths.output.join("eval");
    let csv = dir.join("metrics.csv");
    write_metrics_csv(&csv, [(label.as_str(), &m)])?;
    println!("{}", std::fs::read_to_string(&csv)?.trim_end());
    record_run(&dir, "eval", cfg, &[manifest_path(cfg), checkpoint(cfg, CLASSIFIER_FILE), csv])?;
    Ok(true)
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {} passed, {failed} failed", checks.len(), checks.len() - failed);
    failed == 0
}

pub fn grad_check(cfg: &RunConfig) -> anyhow::Result<bool> {
    let sched = cfg.schedule.build()?;
    let mut checks: Vec<Check> = grad_check_primitives(cfg.seed)?
        .into_iter()
        .map(|(op, e)| run_check(&format!("{op:?}"), || Ok((e < GRAD_TOLERANCE, format!("max rel {e:.2e}")))))
        .collect();
    for (name, e) in grad_check_models(cfg.seed, &sched)? {
        checks.push(run_check(name, || Ok((e < GRAD_TOLERANCE, format!("max rel {e:.2e}")))));
    }
    let ok = print_checks(&checks);
    let dir = cfg.paths.output.join("grad-check");
    std::fs::create_dir_all(&dir)?;
    write_checks_csv(&checks, &dir.join("grad_check.csv"))?;
    record_run(&dir, "grad-check", cfg, &[])?;
    Ok(ok)
}

pub fn verify(cfg: &RunConfig, model_free: bool) -> anyhow::Result<bool> {
    let sched = cfg.schedule.build()?;
    let dir = cfg.paths.output.join("verify");
    std::fs::create_dir_all(&dir)?;
    let mut checks = model_free_checks(&sched, cfg.seed);
    if !model_free {
        let loaded = load_splits(cfg).and_then(|s| Ok((load_trained(&cfg.paths.checkpoints, &cfg.plan())?, s)));
        match loaded {
            Ok((trained, splits)) => checks.extend(trained_checks(&trained, &splits, cfg.seed, Some(&dir))),
            Err(e) => checks.push(run_check("load trained models", || {
                Ok((false, format!("{e:#}")))
            })),
        }
    }
    let ok = print_checks(&checks);
    write_checks_csv(&checks, &dir.join("checks.csv"))?;
    record_run(
        &dir,
        "verify",
        cfg,
        &[
            manifest_path(cfg),
            checkpoint(cfg, CODEC_FILE),
            checkpoint(cfg, DENOISER_FILE),
            checkpoint(cfg, CLASSIFIER_FILE),
        ],
    )?;
    Ok(ok)
}
