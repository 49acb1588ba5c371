//! Evaluation: confusion matrices, the stratified cross-validation driver,
//! and accuracy reporting.

use crate::data::{stratified_folds, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::transfer::{adapt, finetune, fold_seed, FinetuneConfig, TaskSpec, TrainRunReport};

/// Square count table: rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[String]) -> Self {
        let c = class_names.len();
        ConfusionMatrix {
            class_names: class_names.to_vec(),
            counts: vec![0; c * c],
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        let c = self.class_names.len();
        self.counts[true_class * c + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_names.len() + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        let c = self.class_names.len();
        self.counts[true_class * c..(true_class + 1) * c].iter().sum()
    }

    pub fn trace(&self) -> u64 {
        let c = self.class_names.len();
        (0..c).map(|i| self.counts[i * c + i]).sum()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Diagonal over row sum, when the class has samples.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let row = self.row_sum(class);
        if row == 0 {
            None
        } else {
            Some(self.count(class, class) as f64 / row as f64)
        }
    }

    /// Elementwise sum; class names must agree.
    pub fn add_assign(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.class_names != other.class_names {
            return Err(Error::Config(
                "cannot sum confusion matrices over different class sets".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// CSV with a header row and column of class names.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(",{}\n", self.class_names.join(",")));
        let c = self.class_names.len();
        for (i, name) in self.class_names.iter().enumerate() {
            let row: Vec<String> = self.counts[i * c..(i + 1) * c]
                .iter()
                .map(|v| v.to_string())
                .collect();
            out.push_str(&format!("{},{}\n", name, row.join(",")));
        }
        out
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .chain(self.counts.iter().map(|v| v.to_string().len()))
            .max()
            .unwrap_or(1)
            + 2;
        write!(f, "{:>width$}", "")?;
        for name in &self.class_names {
            write!(f, "{name:>width$}")?;
        }
        writeln!(f)?;
        let c = self.class_names.len();
        for (i, name) in self.class_names.iter().enumerate() {
            write!(f, "{name:>width$}")?;
            for j in 0..c {
                write!(f, "{:>width$}", self.counts[i * c + j])?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Predictions over a dataset. Prediction is the argmax logit; ties go to
/// the lowest class index. No augmentation is applied.
pub fn evaluate(model: &ModelGraph, data: &LabeledDataset) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.class_count() != data.class_count() {
        return Err(Error::shape(
            "evaluate",
            format!("{} classes", data.class_count()),
            format!("model with {} classes", model.class_count()),
        ));
    }
    let mut matrix = ConfusionMatrix::new(data.class_names());
    let shape = data.samples()[0].image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    for chunk in data.samples().chunks(64) {
        let mut pixels = Vec::with_capacity(chunk.len() * h * w);
        for s in chunk {
            pixels.extend_from_slice(s.image.data());
        }
        let batch = Tensor::from_vec(&[chunk.len(), 1, h, w], pixels)?;
        let logits = model.forward_logits(&batch)?;
        let classes = model.class_count();
        for (b, sample) in chunk.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            matrix.record(sample.label, arg);
        }
    }
    Ok(matrix)
}

/// Outcome of a k-fold cross-validation run.
#[derive(Debug, Clone)]
pub struct CvResult {
    pub fold_matrices: Vec<ConfusionMatrix>,
    pub fold_accuracies: Vec<f64>,
    pub fold_reports: Vec<TrainRunReport>,
    /// Elementwise sum of the per-fold matrices.
    pub summed: ConfusionMatrix,
    pub mean_accuracy: f64,
    /// Population standard deviation over fold accuracies.
    pub std_accuracy: f64,
}

/// Stratified k-fold cross-validation of the transfer step: each fold
/// adapts the same source model, fine-tunes on the other folds, and is
/// evaluated on the held-out fold. Folds run on separate threads; results
/// are aggregated in fold order, so scheduling cannot change the outcome.
pub fn run_cv(
    source: &ModelGraph,
    data: &LabeledDataset,
    k: usize,
    seed: u64,
    config: &FinetuneConfig,
) -> Result<CvResult> {
    let plan = stratified_folds(data, k, seed)?;
    let task = if data.class_names() == crate::data::TARGET_CLASSES {
        TaskSpec::target()
    } else {
        TaskSpec::target_for(data)
    };

    let outcomes: Vec<Result<(ConfusionMatrix, f64, TrainRunReport)>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..k)
                .map(|fold| {
                    let plan = &plan;
                    let task = &task;
                    scope.spawn(move || -> Result<(ConfusionMatrix, f64, TrainRunReport)> {
                        let fs = fold_seed(seed, fold);
                        let train = data.subset(&plan.train_indices(fold));
                        let held_out = data.subset(&plan.fold_indices(fold));
                        let adapted = adapt(source, task, derive_seed(fs, &[stream::HEAD]))?;
                        let mut fold_config = config.clone();
                        fold_config.seed = fs;
                        if let Some(p) = &mut fold_config.augment {
                            p.seed = derive_seed(fs, &[stream::AUGMENT]);
                        }
                        let val = if fold_config.eval_each_epoch {
                            Some(&held_out)
                        } else {
                            None
                        };
                        let (model, report) = finetune(adapted, &train, val, &fold_config)?;
                        let matrix = evaluate(&model, &held_out)?;
                        let accuracy = matrix.accuracy();
                        Ok((matrix, accuracy, report))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Config("fold thread panicked".into())))
                })
                .collect()
        });

    let mut fold_matrices = Vec::with_capacity(k);
    let mut fold_accuracies = Vec::with_capacity(k);
    let mut fold_reports = Vec::with_capacity(k);
    let mut summed = ConfusionMatrix::new(data.class_names());
    for (fold, outcome) in outcomes.into_iter().enumerate() {
        let (matrix, accuracy, report) = outcome.map_err(|e| Error::FoldFailed {
            fold,
            source: Box::new(e),
        })?;
        summed.add_assign(&matrix)?;
        fold_matrices.push(matrix);
        fold_accuracies.push(accuracy);
        fold_reports.push(report);
    }

    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    let variance = fold_accuracies
        .iter()
        .map(|a| (a - mean_accuracy).powi(2))
        .sum::<f64>()
        / k as f64;
    Ok(CvResult {
        fold_matrices,
        fold_accuracies,
        fold_reports,
        summed,
        mean_accuracy,
        std_accuracy: variance.sqrt(),
    })
}

/// Human-readable text plus CSV payloads for a cross-validation result.
#[derive(Debug, Clone)]
pub struct Summary {
    pub text: String,
    /// `fold,accuracy` rows plus a trailing `summary,<mean>,<std>` row.
    pub accuracy_csv: String,
}

/// Render the per-fold accuracies, the mean +/- population std (in percent,
/// two decimals), the fold-summed confusion matrix, and per-class recall.
pub fn summarize(result: &CvResult, label: &str) -> Summary {
    let mut text = String::new();
    text.push_str(&format!("{label}: {}-fold cross-validation\n", result.fold_accuracies.len()));
    for (i, acc) in result.fold_accuracies.iter().enumerate() {
        text.push_str(&format!("fold {i}: accuracy {:.4}\n", acc));
    }
    text.push_str(&format!(
        "accuracy: {:.2}% \u{00b1} {:.2}\n",
        100.0 * result.mean_accuracy,
        100.0 * result.std_accuracy
    ));
    text.push_str("\nsummed confusion matrix (rows = true class):\n");
    text.push_str(&result.summed.to_string());
    text.push_str("\nper-class recall:\n");
    for (c, name) in result.summed.class_names().iter().enumerate() {
        match result.summed.recall(c) {
            Some(r) => text.push_str(&format!("{name}: {:.4}\n", r)),
            None => text.push_str(&format!("{name}: n/a (no samples)\n")),
        }
    }

    let mut accuracy_csv = String::from("fold,accuracy\n");
    for (i, acc) in result.fold_accuracies.iter().enumerate() {
        accuracy_csv.push_str(&format!("{i},{acc:.6}\n"));
    }
    accuracy_csv.push_str(&format!(
        "summary,{:.6},{:.6}\n",
        result.mean_accuracy, result.std_accuracy
    ));

    Summary { text, accuracy_csv }
}
