//! Datasets: in-memory representation, on-disk format, synthetic generation,
//! augmentation, and split construction.
//!
//! On disk a dataset is a directory of 8-bit binary PGM files plus a
//! `labels.csv` with header `id,path,class`.

mod augment;
mod folds;
mod synthetic;

pub use augment::{augment, AugmentDraw, AugmentationPolicy};
pub use folds::{balanced_holdout, stratified_folds, FoldPlan};
pub use synthetic::{generate_synthetic, TaskKind};

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

/// Class names of the binary source task.
pub const SOURCE_CLASSES: [&str; 2] = ["normal", "diseased"];
/// Class names of the four-class target task, in fixed order.
pub const TARGET_CLASSES: [&str; 4] = ["normal", "pneumonia", "other_disease", "covid19"];

/// One grayscale image with its class label and a stable id.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Shape `[1, H, W]`, pixel values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Ingested,
}

/// An immutable collection of labeled samples.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<Sample>,
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes: class_names.len(),
                });
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id `{}`", s.id)));
            }
            let data = s.image.data();
            if !data.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(Error::Config(format!(
                    "sample `{}` has pixels outside [0, 1]",
                    s.id
                )));
            }
        }
        Ok(LabeledDataset {
            samples,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Number of samples per class, in class-name order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// New dataset holding clones of the selected samples, in the given
    /// index order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: self.provenance,
        }
    }

    /// Spatial extent of the (square) images.
    pub fn image_size(&self) -> Option<usize> {
        self.samples.first().map(|s| s.image.shape()[1])
    }
}

/// Quantize a `[0, 1]` pixel to the 8-bit grid.
pub(crate) fn pixel_to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Convert a sample image to 8-bit pixels (row-major).
pub fn sample_to_bytes(sample: &Sample) -> (usize, usize, Vec<u8>) {
    let shape = sample.image.shape();
    let (h, w) = (shape[1], shape[2]);
    let bytes = sample.image.data().iter().map(|&v| pixel_to_u8(v)).collect();
    (w, h, bytes)
}

/// Write a dataset to `dir` as PGM files plus `labels.csv`.
pub fn write_dataset(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut csv = String::from("id,path,class\n");
    for sample in dataset.samples() {
        let rel = format!("images/{}.pgm", sample.id);
        let (w, h, bytes) = sample_to_bytes(sample);
        pnm::write_pgm(&dir.join(&rel), w, h, &bytes)?;
        csv.push_str(&format!(
            "{},{},{}\n",
            sample.id,
            rel,
            dataset.class_names()[sample.label]
        ));
    }
    std::fs::write(dir.join("labels.csv"), csv)?;
    Ok(())
}

/// Load a dataset from a directory. `labels_file` is a CSV with header
/// `id,path,class`; paths are relative to `root`. Images are rescaled to
/// `[0, 1]` and resized (nearest neighbor) to `image_size` when necessary.
pub fn ingest_directory(
    root: &Path,
    labels_file: &Path,
    class_names: &[String],
    image_size: usize,
) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(labels_file)
        .map_err(|_| Error::MissingFile(labels_file.to_path_buf()))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,path,class" => {}
        Some((_, header)) => {
            return Err(Error::LabelsFile {
                line: 1,
                message: format!("expected header `id,path,class`, got `{header}`"),
            })
        }
        None => {
            return Err(Error::LabelsFile {
                line: 1,
                message: "empty labels file".into(),
            })
        }
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::LabelsFile {
                line: line_no,
                message: format!("expected `id,path,class`, got `{line}`"),
            });
        }
        let (id, rel, class) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        let label = class_names
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::LabelsFile {
                line: line_no,
                message: format!("unknown class name `{class}`"),
            })?;
        let path = root.join(rel);
        let (w, h, pixels) = pnm::read_pgm(&path)?;
        let float: Vec<f32> = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
        let resized = if (w, h) == (image_size, image_size) {
            float
        } else {
            resize_nearest(&float, w, h, image_size)
        };
        samples.push(Sample {
            image: Tensor::from_vec(&[1, image_size, image_size], resized)?,
            label,
            id: id.to_string(),
        });
    }
    LabeledDataset::new(
        samples,
        class_names.to_vec(),
        Provenance::Ingested,
    )
}

fn resize_nearest(src: &[f32], w: usize, h: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = ((y as f64 + 0.5) * h as f64 / size as f64) as usize;
        let sy = sy.min(h - 1);
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * w as f64 / size as f64) as usize;
            let sx = sx.min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: usize, v: f32) -> Sample {
        Sample {
            image: Tensor::from_vec(&[1, 2, 2], vec![v; 4]).unwrap(),
            label,
            id: id.to_string(),
        }
    }

    fn names() -> Vec<String> {
        SOURCE_CLASSES.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = LabeledDataset::new(
            vec![sample("a", 0, 0.5), sample("a", 1, 0.5)],
            names(),
            Provenance::Synthetic,
        );
        assert!(err.is_err());
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let err = LabeledDataset::new(vec![sample("a", 2, 0.5)], names(), Provenance::Synthetic);
        assert!(matches!(err, Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn ingest_roundtrips_a_written_dataset() {
        let ds = generate_synthetic(TaskKind::FourClass, &[3, 2, 2, 1], 32, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = ingest_directory(
            dir.path(),
            &dir.path().join("labels.csv"),
            ds.class_names(),
            32,
        )
        .unwrap();
        assert_eq!(back.len(), ds.len());
        for (a, b) in ds.samples().iter().zip(back.samples()) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            assert_eq!(a.image.data(), b.image.data(), "pixels must round-trip");
        }
    }

    #[test]
    fn ingest_reports_missing_file_and_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.csv");
        std::fs::write(&labels, "id,path,class\nx,images/x.pgm,normal\n").unwrap();
        let err = ingest_directory(dir.path(), &labels, &names(), 32);
        assert!(matches!(err, Err(Error::MissingFile(_))));

        std::fs::write(&labels, "id,path,class\nbad row here\n").unwrap();
        match ingest_directory(dir.path(), &labels, &names(), 32) {
            Err(Error::LabelsFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected LabelsFile error, got {other:?}"),
        }

        std::fs::write(&labels, "id,path,class\nx,images/x.pgm,unknownclass\n").unwrap();
        assert!(matches!(
            ingest_directory(dir.path(), &labels, &names(), 32),
            Err(Error::LabelsFile { line: 2, .. })
        ));
    }

    #[test]
    fn full_byte_maps_to_exactly_one() {
        let dir = tempfile::tempdir().unwrap();
        crate::pnm::write_pgm(&dir.path().join("p.pgm"), 32, 32, &[255u8; 1024]).unwrap();
        std::fs::write(
            dir.path().join("labels.csv"),
            "id,path,class\np,p.pgm,normal\n",
        )
        .unwrap();
        let ds = ingest_directory(dir.path(), &dir.path().join("labels.csv"), &names(), 32).unwrap();
        assert!(ds.samples()[0].image.data().iter().all(|&v| v == 1.0));
    }
}
