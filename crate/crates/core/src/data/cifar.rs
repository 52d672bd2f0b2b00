//! CIFAR binary batches: one label byte (CIFAR-10) or coarse + fine label
//! bytes (CIFAR-100) followed by 3072 bytes of a 3×32×32 image.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    fn normalization(self) -> (Vec<f64>, Vec<f64>) {
        match self {
            CifarVariant::Cifar10 => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
            CifarVariant::Cifar100 => (vec![0.5071, 0.4865, 0.4409], vec![0.2673, 0.2564, 0.2762]),
        }
    }

    fn class_names(self) -> Vec<String> {
        match self {
            CifarVariant::Cifar10 => [
                "airplane",
                "automobile",
                "bird",
                "cat",
                "deer",
                "dog",
                "frog",
                "horse",
                "ship",
                "truck",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            CifarVariant::Cifar100 => (0..100).map(|i| format!("fine_{i}")).collect(),
        }
    }

    /// Directory name of the extracted binary archive.
    pub fn dir_name(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            CifarVariant::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            CifarVariant::Cifar100 => (vec!["train.bin"], "test.bin"),
        }
    }
}

/// Parses CIFAR records from memory. For CIFAR-100 the fine label is used.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_bytes();
    if bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(rec) {
        labels.push(record[variant.label_bytes() - 1] as usize);
        images.extend_from_slice(&record[variant.label_bytes()..]);
    }
    let (mean, std) = variant.normalization();
    Dataset::new([3, 32, 32], images, labels, variant.class_names(), mean, std)
}

/// Loads one CIFAR binary batch file.
pub fn load_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::DataMissing(path.display().to_string()),
        _ => e.into(),
    })?;
    parse_cifar(&bytes, variant)
}

/// Loads the train and test splits from `root/<archive dir>/`.
pub fn load_cifar_split(root: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let dir = root.join(variant.dir_name());
    let (train_files, test_file) = variant.files();
    let mut train: Option<Dataset> = None;
    for f in train_files {
        let part = load_cifar(&dir.join(f), variant)?;
        train = Some(match train {
            None => part,
            Some(acc) => acc.concat(&part)?,
        });
    }
    let test = load_cifar(&dir.join(test_file), variant)?;
    Ok((train.expect("at least one training file"), test))
}
