//! Command implementations. Each command writes its artifacts under a
//! caller-named run directory (config echo included) and prints progress to
//! stdout; nothing written to disk contains timestamps, so reruns with the
//! same configuration and seed are byte-identical.

use std::path::Path;

use detl_core::data::{
    generate_synthetic, ingest_directory, write_dataset, LabeledDataset, TaskKind, SOURCE_CLASSES,
    TARGET_CLASSES,
};
use detl_core::eval::{run_cv, summarize, evaluate};
use detl_core::gradcam::{gradcam, write_heatmap_ppm};
use detl_core::gradcheck::{grad_check, grad_check_with_conv_fault, GradCheckReport};
use detl_core::model::{build_preset, glorot_conv, glorot_dense, LayerKind, LayerParams, LayerSpec, ModelGraph};
use detl_core::rng::rng_from;
use detl_core::transfer::{adapt, finetune, pretrain, TaskSpec, TrainRunReport};
use detl_core::Tensor;
use rand::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.detl";

fn prepare_run_dir(out: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), config.echo())?;
    Ok(())
}

fn source_class_names() -> Vec<String> {
    SOURCE_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn target_class_names() -> Vec<String> {
    TARGET_CLASSES.iter().map(|s| s.to_string()).collect()
}

fn load_dataset(dir: &Path, class_names: &[String], image_size: usize) -> Result<LabeledDataset> {
    Ok(ingest_directory(
        dir,
        &dir.join("labels.csv"),
        class_names,
        image_size,
    )?)
}

fn train_report_csv(report: &TrainRunReport) -> String {
    let mut csv = String::from("epoch,train_loss,train_accuracy,val_accuracy\n");
    for epoch in 0..report.train_loss.len() {
        let val = report
            .val_accuracy
            .get(epoch)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        csv.push_str(&format!(
            "{epoch},{:.6},{:.6},{val}\n",
            report.train_loss[epoch], report.train_accuracy[epoch]
        ));
    }
    csv
}

/// `gen-data`: write a synthetic dataset as PGM files plus labels.csv.
pub fn cmd_gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let expected = match config.task {
        TaskKind::Binary => 2,
        TaskKind::FourClass => 4,
    };
    if config.counts.len() != expected {
        return Err(CliError::Config(format!(
            "task needs {expected} class counts, got {}",
            config.counts.len()
        )));
    }
    prepare_run_dir(out, config)?;
    let dataset = generate_synthetic(config.task, &config.counts, config.image_size, config.seed)?;
    write_dataset(&dataset, out)?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    for (name, count) in dataset.class_names().iter().zip(dataset.class_counts()) {
        println!("  {name}: {count}");
    }
    Ok(())
}

/// `pretrain`: train the source model from scratch on a binary dataset and
/// keep the best-validation weights.
pub fn cmd_pretrain(config: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    prepare_run_dir(out, config)?;
    let data = load_dataset(data_dir, &source_class_names(), config.image_size)?;
    let model = build_preset(
        config.arch,
        (1, config.image_size, config.image_size),
        2,
        config.width_base,
        config.seed,
    )?;
    println!(
        "pretraining {} ({} parameters) on {} samples",
        config.arch,
        model.param_count(),
        data.len()
    );
    let (best, report) = pretrain(model, &data, &config.pretrain_config())?;
    save_checkpoint(&best, &source_class_names(), &out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join("train_report.csv"), train_report_csv(&report))?;
    println!(
        "best epoch {} with validation accuracy {:.4} ({:.1}s)",
        report.best_epoch,
        report.val_accuracy.get(report.best_epoch).copied().unwrap_or(0.0),
        report.wall_time_secs
    );
    Ok(())
}

/// `cv`: k-fold cross-validation of the transfer step.
pub fn cmd_cv(config: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    prepare_run_dir(out, config)?;
    let (source, meta) = load_checkpoint(checkpoint)?;
    if meta.preset != config.arch {
        return Err(CliError::Config(format!(
            "checkpoint architecture {} does not match requested {}",
            meta.preset, config.arch
        )));
    }
    let data = load_dataset(data_dir, &target_class_names(), config.image_size)?;
    println!(
        "{}-fold cross-validation of {} on {} samples",
        config.folds,
        meta.preset,
        data.len()
    );
    let result = run_cv(
        &source,
        &data,
        config.folds,
        config.seed,
        &config.finetune_config(),
    )?;
    for (i, matrix) in result.fold_matrices.iter().enumerate() {
        std::fs::write(out.join(format!("fold_{i}_confusion.csv")), matrix.to_csv())?;
        std::fs::write(
            out.join(format!("fold_{i}_report.csv")),
            train_report_csv(&result.fold_reports[i]),
        )?;
    }
    std::fs::write(out.join("confusion_sum.csv"), result.summed.to_csv())?;
    let summary = summarize(&result, meta.preset.as_str());
    std::fs::write(out.join("cv_accuracy.csv"), &summary.accuracy_csv)?;
    std::fs::write(out.join("summary.txt"), &summary.text)?;
    println!("{}", summary.text);
    Ok(())
}

/// `finetune`: adapt a pretrained checkpoint to the four-class task and
/// fine-tune on the full target dataset.
pub fn cmd_finetune(config: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    prepare_run_dir(out, config)?;
    let (source, meta) = load_checkpoint(checkpoint)?;
    if meta.preset != config.arch {
        return Err(CliError::Config(format!(
            "checkpoint architecture {} does not match requested {}",
            meta.preset, config.arch
        )));
    }
    let data = load_dataset(data_dir, &target_class_names(), config.image_size)?;
    let adapted = adapt(&source, &TaskSpec::target(), config.seed)?;
    println!(
        "fine-tuning {} trainable of {} parameters on {} samples",
        adapted.trainable_param_count(),
        adapted.param_count(),
        data.len()
    );
    let (tuned, report) = finetune(adapted, &data, None, &config.finetune_config())?;
    save_checkpoint(&tuned, &target_class_names(), &out.join(CHECKPOINT_FILE))?;
    std::fs::write(out.join("train_report.csv"), train_report_csv(&report))?;
    let matrix = evaluate(&tuned, &data)?;
    std::fs::write(out.join("train_confusion.csv"), matrix.to_csv())?;
    println!(
        "final training accuracy {:.4} ({:.1}s)",
        matrix.accuracy(),
        report.wall_time_secs
    );
    Ok(())
}

/// `gradcam`: render decision heatmaps for selected samples.
pub fn cmd_gradcam(
    config: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    ids: &[String],
    class: Option<usize>,
    out: &Path,
) -> Result<()> {
    prepare_run_dir(out, config)?;
    let (model, meta) = load_checkpoint(checkpoint)?;
    let data = load_dataset(data_dir, &meta.class_names, config.image_size)?;
    if let Some(c) = class {
        if c >= model.class_count() {
            return Err(CliError::Config(format!(
                "class {c} out of range for a {}-class model",
                model.class_count()
            )));
        }
    }
    let ids: Vec<String> = if ids.is_empty() {
        // Default: the first sample of every class.
        let mut picks = Vec::new();
        for c in 0..data.class_count() {
            if let Some(s) = data.samples().iter().find(|s| s.label == c) {
                picks.push(s.id.clone());
            }
        }
        picks
    } else {
        ids.to_vec()
    };

    for id in &ids {
        let sample = data
            .find(id)
            .ok_or_else(|| detl_core::Error::UnknownSampleId(id.clone()))?;
        let c = match class {
            Some(c) => c,
            None => predict(&model, &sample.image)?,
        };
        let heatmap = gradcam(&model, &sample.image, c)?;
        let path = out.join(format!("{id}_class{c}.ppm"));
        write_heatmap_ppm(&heatmap, &sample.image, &path)?;
        println!(
            "{} -> class {} ({}), score {:.4}, {}",
            id,
            c,
            meta.class_names[c],
            heatmap.class_score,
            path.display()
        );
    }
    Ok(())
}

fn predict(model: &ModelGraph, image: &Tensor) -> Result<usize> {
    let shape = image.shape();
    let batch = Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], image.data().to_vec())?;
    let logits = model.forward_logits(&batch)?;
    let row = logits.data();
    let mut arg = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[arg] {
            arg = j;
        }
    }
    Ok(arg)
}

/// `grad-check`: verify analytic gradients of two built-in toy models
/// against 64-bit central differences. With `inject_fault`, the convolution
/// backward rule is deliberately corrupted and the command succeeds only if
/// the check reports it.
pub fn cmd_grad_check(config: &RunConfig, inject_fault: bool) -> Result<()> {
    let tolerance = config.grad_tolerance;
    let mut all_pass = true;
    for (label, model) in grad_check_models(config.seed)? {
        let mut rng = rng_from(config.seed, &[0x6d]);
        let (_, h, w) = model.input_shape();
        let batch = Tensor::from_vec(
            &[2, 1, h, w],
            (0..2 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )?;
        let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(0..model.class_count())).collect();
        let report: GradCheckReport = if inject_fault {
            grad_check_with_conv_fault(&model, &batch, &labels, -0.5)?
        } else {
            grad_check(&model, &batch, &labels)?
        };
        let pass = report.passes(tolerance);
        all_pass &= pass;
        println!(
            "{label}: {} parameters checked, worst relative error {:.3e} -> {}",
            report.entries.len(),
            report.worst(),
            if pass { "pass" } else { "FAIL" }
        );
        print!("{report}");
    }
    if inject_fault {
        if all_pass {
            return Err(CliError::Config(
                "injected convolution fault was NOT detected".into(),
            ));
        }
        println!("injected convolution fault detected as expected");
        return Ok(());
    }
    if !all_pass {
        return Err(CliError::Config(format!(
            "gradient check exceeded tolerance {tolerance}"
        )));
    }
    Ok(())
}

/// Two small built-in graphs: a plain conv/pool/dense chain and a residual
/// block with global average pooling.
fn grad_check_models(seed: u64) -> Result<Vec<(String, ModelGraph)>> {
    let mut rng = rng_from(seed, &[0x6c]);
    let mut chain_layers = Vec::new();
    let mut chain_params: Vec<Option<LayerParams>> = Vec::new();
    chain_layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 3,
            stride: 1,
            padding: 1,
        },
        0,
    ));
    chain_params.push(Some(glorot_conv(1, 3, &mut rng)));
    chain_layers.push(LayerSpec::new(LayerKind::Relu, 0));
    chain_params.push(None);
    chain_layers.push(LayerSpec::new(LayerKind::MaxPool, 0));
    chain_params.push(None);
    chain_layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: 3,
            out_channels: 4,
            stride: 1,
            padding: 1,
        },
        1,
    ));
    chain_params.push(Some(glorot_conv(3, 4, &mut rng)));
    chain_layers.push(LayerSpec::new(LayerKind::Relu, 1));
    chain_params.push(None);
    chain_layers.push(LayerSpec::new(LayerKind::Flatten, 2));
    chain_params.push(None);
    chain_layers.push(LayerSpec::new(
        LayerKind::Dense {
            in_dim: 4 * 36,
            out_dim: 4,
        },
        2,
    ));
    chain_params.push(Some(glorot_dense(4 * 36, 4, &mut rng)));
    let chain = ModelGraph::new(chain_layers, chain_params, (1, 12, 12), 4)
        .map_err(CliError::Core)?;

    let mut res_layers = Vec::new();
    let mut res_params: Vec<Option<LayerParams>> = Vec::new();
    res_layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: 1,
            out_channels: 3,
            stride: 1,
            padding: 1,
        },
        0,
    ));
    res_params.push(Some(glorot_conv(1, 3, &mut rng)));
    res_layers.push(LayerSpec::new(LayerKind::Relu, 0));
    res_params.push(None);
    let entry = res_layers.len() - 1;
    res_layers.push(LayerSpec::new(
        LayerKind::Conv3x3 {
            in_channels: 3,
            out_channels: 3,
            stride: 1,
            padding: 1,
        },
        1,
    ));
    res_params.push(Some(glorot_conv(3, 3, &mut rng)));
    res_layers.push(LayerSpec::new(LayerKind::ResidualAdd { from: entry }, 1));
    res_params.push(None);
    res_layers.push(LayerSpec::new(LayerKind::Relu, 1));
    res_params.push(None);
    res_layers.push(LayerSpec::new(LayerKind::GlobalAvgPool, 2));
    res_params.push(None);
    res_layers.push(LayerSpec::new(
        LayerKind::Dense {
            in_dim: 3,
            out_dim: 2,
        },
        2,
    ));
    res_params.push(Some(glorot_dense(3, 2, &mut rng)));
    let residual = ModelGraph::new(res_layers, res_params, (1, 12, 12), 2)
        .map_err(CliError::Core)?;

    Ok(vec![
        ("conv-chain".to_string(), chain),
        ("residual-block".to_string(), residual),
    ])
}
