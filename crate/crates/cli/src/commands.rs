use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use shadow_defense::augment::{quadruplicate, random_polygon, training_examples};
use shadow_defense::color::{epsilon_bound, perturbation_norm, NormOrder, RgbImage};
use shadow_defense::data::{write_dataset, write_gray, Dataset, IMAGE_SIZE};
use shadow_defense::eval::{
    benign_accuracy, emit_report, pipeline_predict, pipeline_saliency, robustness_svg, run_regime, PipelineClassifier,
    ReportFormat,
};
use shadow_defense::geometry::{Polygon, SignMask};
use shadow_defense::model::{adapt_first_layer, train as fit, Checkpoint, CnnSpec};
use shadow_defense::shadow::{apply_shadow, pso_attack, QueryingClassifier, ShadowParams};

use crate::config::{RunConfig, SourceKind};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";

/// Writes `bytes` to a temporary sibling and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| {
            let _ = fs::remove_file(&tmp);
            CliError::io(path, e)
        })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn class_count(cfg: &RunConfig, ds: &Dataset) -> usize {
    match cfg.dataset.source {
        SourceKind::Synthetic => cfg.dataset.synthetic.class_count,
        SourceKind::Manifest => ds.class_count(),
    }
}

fn load_classifier(cfg: &RunConfig, path: &Path) -> CliResult<PipelineClassifier> {
    let ckpt = Checkpoint::load(path)?;
    let wanted = cfg.defense.profile();
    if let Some(trained) = ckpt.metadata.profile {
        if Some(trained) != wanted {
            return Err(CliError::Config(format!(
                "{} was trained with the {} profile but the configured defense is {}",
                path.display(),
                trained.label(),
                cfg.defense.label()
            )));
        }
    }
    Ok(PipelineClassifier::new(ckpt.to_network()?, wanted, cfg.profile)?)
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
    train_accuracy: f64,
}

#[derive(Serialize)]
struct TrainLog<'a> {
    defense: &'static str,
    classes: usize,
    source_train: usize,
    source_test: usize,
    /// Number of training examples after augmentation.
    dataset_size: usize,
    test_accuracy: f64,
    epochs: Vec<EpochRecord>,
    config: &'a RunConfig,
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let ds = cfg.dataset.load()?;
    let classes = class_count(cfg, &ds);
    let profile = cfg.defense.profile();
    let started = Instant::now();
    let augmented = quadruplicate(&ds.train, &cfg.augment_config())?;
    let examples = training_examples(&augmented, profile.is_some());
    log::info!(
        "{}: {} source images, {} training examples",
        cfg.defense.label(),
        ds.train.len(),
        examples.len()
    );
    let spec = CnnSpec::reference(if profile.is_some() { 4 } else { 3 }, classes);
    let mut ckpt = fit(&examples, spec, &cfg.train)?;
    ckpt.metadata.profile = profile;
    let clf = PipelineClassifier::new(ckpt.to_network()?, profile, cfg.profile)?;
    let test_accuracy = benign_accuracy(&clf, &ds.test);
    log::info!(
        "trained in {:.1}s, benign test accuracy {test_accuracy:.4}",
        started.elapsed().as_secs_f64()
    );

    let epochs = ckpt
        .metadata
        .losses
        .iter()
        .zip(&ckpt.metadata.train_accuracies)
        .enumerate()
        .map(|(i, (&loss, &train_accuracy))| EpochRecord {
            epoch: i + 1,
            loss,
            train_accuracy,
        })
        .collect();
    let log = TrainLog {
        defense: cfg.defense.label(),
        classes,
        source_train: ds.train.len(),
        source_test: ds.test.len(),
        dataset_size: examples.len(),
        test_accuracy,
        epochs,
        config: cfg,
    };
    create_dir(&cfg.output_dir)?;
    ckpt.save(&cfg.output_dir.join(CHECKPOINT_FILE))?;
    write_atomic(&cfg.output_dir.join(TRAIN_LOG_FILE), &to_json(&log)?)?;
    println!("checkpoint: {}", cfg.output_dir.join(CHECKPOINT_FILE).display());
    println!("test accuracy: {test_accuracy:.4}");
    Ok(())
}

pub fn attack(cfg: &RunConfig, checkpoint: &Path) -> CliResult<()> {
    cfg.validate()?;
    let clf = load_classifier(cfg, checkpoint)?;
    let ds = cfg.dataset.load()?;
    let started = Instant::now();
    let report = run_regime(&clf, clf.label(), &ds.test, &cfg.eval.k_values, cfg.eval.trials, &cfg.pso)?;
    log::info!("attack sweep took {:.1}s", started.elapsed().as_secs_f64());

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let outputs = [
        ("report.csv", emit_report(&report, ReportFormat::Csv)?),
        ("queries.csv", emit_report(&report, ReportFormat::QueriesCsv)?),
        ("report.json", emit_report(&report, ReportFormat::Json)?),
        ("robustness.svg", robustness_svg(std::slice::from_ref(&report)).into_bytes()),
    ];
    for (name, bytes) in &outputs {
        write_atomic(&dir.join(name), bytes)?;
    }
    println!(
        "{}: benign accuracy {:.4} on {} samples ({} excluded as dark)",
        report.defense, report.benign_accuracy, report.evaluated, report.excluded
    );
    for ((k, r), q) in report.k_values.iter().zip(&report.robustness).zip(&report.mean_queries) {
        println!("k={k:.2} robustness {r:.4} mean queries {q:.1}");
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Violation {
    index: usize,
    k: f64,
    norm: &'static str,
    polygon: Polygon,
    perturbation: f64,
    bound: f64,
}

#[derive(Serialize)]
struct BoundSummary {
    samples: usize,
    seed: u64,
    max_ratio_l2: f64,
    max_ratio_linf: f64,
    violations: Vec<Violation>,
}

pub fn boundcheck(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    let bc = &cfg.boundcheck;
    let ks = &cfg.eval.k_values.values;
    if ks.is_empty() {
        return Err(CliError::Config("eval.k_values must not be empty for boundcheck".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(bc.seed);
    let n = IMAGE_SIZE;
    let mask = SignMask::full(n, n);
    let mut summary = BoundSummary {
        samples: bc.samples,
        seed: bc.seed,
        max_ratio_l2: 0.0,
        max_ratio_linf: 0.0,
        violations: Vec::new(),
    };
    for index in 0..bc.samples {
        let img = RgbImage::from_fn(n, n, |_, _| [rng.random(), rng.random(), rng.random()]);
        let polygon = random_polygon(n, n, bc.vertices, cfg.augment.margin, &mut rng);
        let k = ks[rng.random_range(0..ks.len())];
        let shadowed = apply_shadow(&img, &ShadowParams::new(k, polygon.clone())?, &mask)?;
        for (p, name) in [(NormOrder::L2, "l2"), (NormOrder::Inf, "linf")] {
            let perturbation = perturbation_norm(&img, &shadowed, p)?;
            let bound = epsilon_bound(k, p)?;
            let ratio = if bound > 0.0 {
                perturbation / bound
            } else if perturbation == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            let max = match p {
                NormOrder::L2 => &mut summary.max_ratio_l2,
                NormOrder::Inf => &mut summary.max_ratio_linf,
            };
            *max = max.max(ratio);
            if perturbation > bound {
                summary.violations.push(Violation {
                    index,
                    k,
                    norm: name,
                    polygon: polygon.clone(),
                    perturbation,
                    bound,
                });
            }
        }
    }

    create_dir(&cfg.output_dir)?;
    write_atomic(&cfg.output_dir.join("boundcheck.json"), &to_json(&summary)?)?;
    println!(
        "{} triples, max ratio l2 {:.6}, linf {:.6}, {} violations",
        summary.samples,
        summary.max_ratio_l2,
        summary.max_ratio_linf,
        summary.violations.len()
    );
    if let Some(v) = summary.violations.first() {
        return Err(CliError::Violation(format!(
            "triple {} (k={}, {} norm, polygon {:?}): perturbation {} exceeds bound {}",
            v.index,
            v.k,
            v.norm,
            v.polygon.vertices(),
            v.perturbation,
            v.bound
        )));
    }
    Ok(())
}

pub fn saliency(cfg: &RunConfig, checkpoint: &Path, sample_id: &str, output: &Path, k: f64) -> CliResult<()> {
    cfg.validate()?;
    let clf = load_classifier(cfg, checkpoint)?;
    let ds = cfg.dataset.load()?;
    let sample = ds
        .train
        .iter()
        .chain(&ds.test)
        .find(|s| s.id == sample_id)
        .ok_or_else(|| CliError::Config(format!("no sample with id `{sample_id}`")))?;

    let counter = QueryingClassifier::new(&clf);
    let found = pso_attack(&sample.image, sample.label, &counter, k, &sample.mask, &cfg.pso)?;
    let shadowed = apply_shadow(&sample.image, &ShadowParams::new(k, found.best_polygon)?, &sample.mask)?;
    let benign_map = pipeline_saliency(&clf, &sample.image, sample.label)?;
    let shadow_map = pipeline_saliency(&clf, &shadowed, sample.label)?;

    let (w, h) = (benign_map.width, benign_map.height);
    let (left, right) = (benign_map.to_gray(), shadow_map.to_gray());
    let mut side_by_side = Vec::with_capacity(2 * w * h);
    for y in 0..h {
        side_by_side.extend_from_slice(&left[y * w..(y + 1) * w]);
        side_by_side.extend_from_slice(&right[y * w..(y + 1) * w]);
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_gray(2 * w, h, &side_by_side, output)?;
    println!(
        "{}: label {}, benign prediction {}, shadowed prediction {} (attack {})",
        sample.id,
        sample.label,
        pipeline_predict(&clf, &sample.image)?,
        pipeline_predict(&clf, &shadowed)?,
        if found.success { "succeeded" } else { "failed" }
    );
    println!("saliency maps: {}", output.display());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    if cfg.dataset.source != SourceKind::Synthetic {
        return Err(CliError::Config("gen-data needs dataset.source = \"synthetic\"".into()));
    }
    let ds = cfg.dataset.load()?;
    let root = cfg.output_dir.join("dataset");
    create_dir(&root)?;
    let manifest = write_dataset(&ds, &root)?;
    println!(
        "{} train and {} test samples; manifest: {}",
        ds.train.len(),
        ds.test.len(),
        manifest.display()
    );
    Ok(())
}

pub fn adapt(checkpoint: &Path, output: &Path) -> CliResult<()> {
    let adapted = adapt_first_layer(&Checkpoint::load(checkpoint)?)?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    adapted.save(output)?;
    println!("adapted checkpoint: {}", output.display());
    Ok(())
}
