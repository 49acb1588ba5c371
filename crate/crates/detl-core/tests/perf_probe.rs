//! Temporary timing probe (run with --ignored).

use detl_core::data::{generate_synthetic, AugmentationPolicy, TaskKind};
use detl_core::model::{build_preset, PresetName};
use detl_core::transfer::{adapt, finetune, pretrain, FinetuneConfig, PretrainConfig, TaskSpec};
use std::time::Instant;

#[test]
#[ignore]
fn probe_pretrain_epoch_time() {
    let data = generate_synthetic(TaskKind::Binary, &[480, 480], 64, 7).unwrap();
    let model = build_preset(PresetName::MiniVgg, (1, 64, 64), 2, 4, 7).unwrap();
    let config = PretrainConfig {
        epochs: 3,
        batch_size: 32,
        val_per_class: 80,
        augment: Some(AugmentationPolicy {
            seed: 1,
            ..Default::default()
        }),
        seed: 7,
        ..Default::default()
    };
    let start = Instant::now();
    let (_m, report) = pretrain(model, &data, &config).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!(
        "pretrain: {:.2}s for 3 epochs -> {:.2}s/epoch; val acc {:?}",
        elapsed,
        elapsed / 3.0,
        report.val_accuracy
    );
}

#[test]
#[ignore]
fn probe_finetune_epoch_time() {
    let data = generate_synthetic(TaskKind::FourClass, &[280, 258, 240, 244], 64, 8).unwrap();
    let source = build_preset(PresetName::MiniVgg, (1, 64, 64), 2, 4, 7).unwrap();
    let adapted = adapt(&source, &TaskSpec::target(), 3).unwrap();
    let config = FinetuneConfig {
        epochs: 3,
        batch_size: 32,
        augment: Some(AugmentationPolicy {
            seed: 2,
            ..Default::default()
        }),
        eval_each_epoch: false,
        seed: 5,
        ..Default::default()
    };
    let start = Instant::now();
    let (_m, report) = finetune(adapted, &data, None, &config).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!(
        "finetune: {:.2}s for 3 epochs over {} samples -> {:.2}s/epoch; train acc {:?}",
        elapsed,
        data.len(),
        elapsed / 3.0,
        report.train_accuracy
    );
}

#[test]
#[ignore]
fn probe_pretrain_no_augment() {
    let data = generate_synthetic(TaskKind::Binary, &[480, 480], 64, 7).unwrap();
    let model = build_preset(PresetName::MiniVgg, (1, 64, 64), 2, 4, 7).unwrap();
    let config = PretrainConfig {
        epochs: 3,
        batch_size: 32,
        val_per_class: 80,
        augment: None,
        seed: 7,
        ..Default::default()
    };
    let start = Instant::now();
    let _ = pretrain(model, &data, &config).unwrap();
    eprintln!("pretrain-noaug: {:.2}s/epoch", start.elapsed().as_secs_f64() / 3.0);
}

#[test]
#[ignore]
fn probe_end_to_end_accuracy() {
    use detl_core::eval::run_cv;
    let data_a = generate_synthetic(TaskKind::Binary, &[480, 480], 64, 1007).unwrap();
    let model = build_preset(PresetName::MiniVgg, (1, 64, 64), 2, 4, 7).unwrap();
    let pre_cfg = PretrainConfig {
        epochs: 10,
        batch_size: 32,
        val_per_class: 80,
        augment: Some(AugmentationPolicy { seed: 11, ..Default::default() }),
        seed: 7,
        ..Default::default()
    };
    let t0 = Instant::now();
    let (source, rep) = pretrain(model, &data_a, &pre_cfg).unwrap();
    eprintln!("pretrain 10ep: {:.1}s, val acc {:?}", t0.elapsed().as_secs_f64(), &rep.val_accuracy[rep.val_accuracy.len()-3..]);

    let data_b = generate_synthetic(TaskKind::FourClass, &[350, 322, 300, 305], 64, 2007).unwrap();
    for lr in [1e-3f32, 1e-4] {
        let config = FinetuneConfig {
            epochs: 8,
            batch_size: 32,
            lr,
            augment: Some(AugmentationPolicy { seed: 12, ..Default::default() }),
            eval_each_epoch: false,
            seed: 5,
            ..Default::default()
        };
        let t = Instant::now();
        let result = run_cv(&source, &data_b, 5, 99, &config).unwrap();
        eprintln!(
            "cv lr={lr:.0e}: mean {:.4} +/- {:.4}, folds {:?}, {:.1}s",
            result.mean_accuracy, result.std_accuracy,
            result.fold_accuracies.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            t.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn probe_tuned_accuracy() {
    use detl_core::eval::run_cv;
    for seed in [101u64, 202] {
        let data_a = generate_synthetic(TaskKind::Binary, &[480, 480], 64, seed).unwrap();
        let model = build_preset(PresetName::MiniVgg, (1, 64, 64), 2, 4, seed).unwrap();
        let pre_cfg = PretrainConfig {
            epochs: 8,
            batch_size: 32,
            val_per_class: 80,
            augment: Some(AugmentationPolicy { seed, ..Default::default() }),
            seed,
            ..Default::default()
        };
        let (source, _rep) = pretrain(model, &data_a, &pre_cfg).unwrap();
        let data_b = generate_synthetic(TaskKind::FourClass, &[350, 322, 300, 305], 64, seed + 1).unwrap();
        for (lr, ep) in [(1e-3f32, 8usize), (1e-3, 12)] {
            let config = FinetuneConfig {
                epochs: ep,
                batch_size: 32,
                lr,
                augment: Some(AugmentationPolicy { seed: seed + 2, ..Default::default() }),
                eval_each_epoch: false,
                seed: seed + 3,
                ..Default::default()
            };
            let t = Instant::now();
            let result = run_cv(&source, &data_b, 5, seed + 4, &config).unwrap();
            eprintln!(
                "seed {seed} lr={lr:.0e} ep={ep}: mean {:.4}, folds {:?}, {:.0}s",
                result.mean_accuracy,
                result.fold_accuracies.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                t.elapsed().as_secs_f64()
            );
        }
    }
}
