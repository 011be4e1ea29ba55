//! One function per subcommand. Each takes already-parsed arguments,
//! returns a library error on failure, and prints a short stable summary on
//! success so pipelines can be scripted.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seda_core::checkpoint::{config_fingerprint, Checkpoint, ConfigBundle};
use seda_core::data::{read_dataset, write_dataset, generate_synthetic, PairedFeatureDataset, Split};
use seda_core::evalkit::{evaluate, hex_fingerprint, run_baseline_onestep, EvalMode, EvaluationReport};
use seda_core::plot::render_report;
use seda_core::sampler::{reverse_chain, SamplingOptions};
use seda_core::trainer::AblationArm;
use seda_core::{Result, SedaError, Trainer32};

use crate::config::{load_config, resolve_seed, RunConfig};

/// `<dir>/<name>` when given a directory, the path itself when given a file.
fn dataset_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn apply_ablation(config: &mut RunConfig, ablation: Option<&str>) -> Result<()> {
    if let Some(token) = ablation {
        let arm = AblationArm::parse(token)?;
        config.train.apply_ablation(arm);
    }
    Ok(())
}

/// The exact bundle `Trainer::new` fingerprints, rebuilt from a config and a
/// dataset so `eval` can refuse checkpoints trained under anything else.
fn bundle_for(config: &RunConfig, data: &PairedFeatureDataset, seed: u64) -> ConfigBundle {
    ConfigBundle {
        denoiser: config.model.to_denoiser(config.data.feature_dim),
        train: config.train.clone(),
        num_classes: data.num_classes,
        label_mode: data.label_mode(),
        feature_dim: data.feature_dim(),
        seed,
    }
}

pub fn generate(config_path: &Path, out_dir: &Path, seed_flag: Option<u64>) -> Result<()> {
    let config = load_config(config_path)?;
    let seed = resolve_seed(seed_flag, config.seed)?;
    let spec = config.data_spec(seed);
    let (train, test) = generate_synthetic(&spec)?;
    std::fs::create_dir_all(out_dir)?;
    let train_path = out_dir.join("train.emb");
    let test_path = out_dir.join("test.emb");
    write_dataset(&train, &train_path)?;
    write_dataset(&test, &test_path)?;
    println!(
        "wrote {} ({} rows) and {} ({} rows)",
        train_path.display(),
        train.len(),
        test_path.display(),
        test.len()
    );
    Ok(())
}

pub fn train(
    config_path: &Path,
    data: &Path,
    out_dir: &Path,
    ablation: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    apply_ablation(&mut config, ablation)?;
    let seed = resolve_seed(seed_flag, config.seed)?;
    let train_set = read_dataset(&dataset_file(data, "train.emb"))?;
    if train_set.split() != Split::Train {
        return Err(SedaError::invalid(
            "training needs a dataset with textual features (a train split)",
        ));
    }
    let denoiser = config.model.to_denoiser(config.data.feature_dim);
    let mut trainer = Trainer32::new(&train_set, denoiser, config.train.clone(), seed)?;
    std::fs::create_dir_all(out_dir)?;
    trainer.fit(&train_set, Some(out_dir))?;
    let last = trainer
        .history()
        .last()
        .expect("fit always records at least one epoch");
    println!(
        "trained {} epochs (final loss {:.6}), checkpoints in {}",
        trainer.epoch(),
        last.loss.total,
        out_dir.display()
    );
    Ok(())
}

pub fn eval(
    config_path: &Path,
    ckpt_path: &Path,
    data: &Path,
    report_path: &Path,
    ablation: Option<&str>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    apply_ablation(&mut config, ablation)?;
    let seed = resolve_seed(seed_flag, config.seed)?;
    let test_set = read_dataset(&dataset_file(data, "test.emb"))?;
    let checkpoint = Checkpoint::read(ckpt_path)?;
    let expected = bundle_for(&config, &test_set, seed);
    if config_fingerprint(&expected) != checkpoint.fingerprint() {
        return Err(SedaError::invalid(format!(
            "checkpoint {} was trained under a different configuration \
             (fingerprint {} does not match this config/seed)",
            ckpt_path.display(),
            hex_fingerprint(&checkpoint.fingerprint())
        )));
    }
    let snapshot = checkpoint.load_model::<f32>()?;
    let mode = if config.train.use_dst {
        EvalMode::Chain
    } else {
        EvalMode::RawVisual
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = evaluate(&snapshot, &test_set, mode, &config.sampling, &mut rng, seed)?;
    write_report(&report, report_path)?;
    Ok(())
}

pub fn baseline(
    config_path: &Path,
    data: &Path,
    report_path: Option<&Path>,
    seed_flag: Option<u64>,
) -> Result<()> {
    let config = load_config(config_path)?;
    let seed = resolve_seed(seed_flag, config.seed)?;
    if !data.is_dir() {
        return Err(SedaError::invalid(
            "baseline needs the dataset directory holding train.emb and test.emb",
        ));
    }
    let train_set = read_dataset(&data.join("train.emb"))?;
    let test_set = read_dataset(&data.join("test.emb"))?;
    let denoiser = config.model.to_denoiser(config.data.feature_dim);
    let report =
        run_baseline_onestep::<f32>(&train_set, &test_set, &denoiser, &config.train, seed)?;
    match report_path {
        Some(path) => write_report(&report, path)?,
        None => print_metrics(&report),
    }
    Ok(())
}

pub fn sample(
    ckpt_path: &Path,
    data: &Path,
    out: &Path,
    noise_scale: f64,
    stride: usize,
    seed_flag: Option<u64>,
) -> Result<()> {
    let checkpoint = Checkpoint::read(ckpt_path)?;
    let seed = resolve_seed(seed_flag, checkpoint.bundle().seed)?;
    let snapshot = checkpoint.load_model::<f32>()?;
    let input = read_dataset(&dataset_file(data, "test.emb"))?;
    let options = SamplingOptions {
        noise_scale,
        stride,
        record_trajectory: false,
    };
    let visual = input.visual.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = reverse_chain(
        &snapshot.model,
        &snapshot.schedule,
        visual.view(),
        &mut rng,
        &options,
    )?;
    let aligned = PairedFeatureDataset {
        visual: chain.aligned,
        textual: None,
        labels: input.labels.clone(),
        num_classes: input.num_classes,
    };
    write_dataset(&aligned, out)?;
    println!("wrote {} ({} rows of aligned features)", out.display(), aligned.len());
    Ok(())
}

pub fn plot(report_path: &Path, out_dir: &Path) -> Result<()> {
    let text = std::fs::read_to_string(report_path).map_err(|e| {
        SedaError::invalid(format!("cannot read report {}: {e}", report_path.display()))
    })?;
    let report = EvaluationReport::from_json(&text)?;
    let written = render_report(&report, out_dir)?;
    if written.is_empty() {
        println!("report has no drawable sections, nothing written");
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn write_report(report: &EvaluationReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, report.to_json())?;
    print_metrics(report);
    println!("wrote report {}", path.display());
    Ok(())
}

fn print_metrics(report: &EvaluationReport) {
    for (name, value) in &report.metrics {
        println!("{name} = {value:.4}");
    }
}
