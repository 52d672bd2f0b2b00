//! Datasets, task splits and on-disk formats.

mod checkpoint;
mod cifar;
mod maskstore;
mod split;
mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use cifar::{load_cifar, parse_cifar, load_cifar_split, CifarVariant, CIFAR_IMAGE_BYTES};
pub use maskstore::{
    artifact_from_store, load_mask, mask_section_size, save_mask, store_from_artifact, Companion, MaskStore,
    StoredLayer, MASK_HEADER_BYTES, MASK_MAGIC, MASK_VERSION,
};
pub use split::{split_tasks, TaskDescriptor, TaskSequence};
pub use synthetic::{synthetic_tasks, SyntheticSpec};

/// Environment variable naming the dataset root directory.
pub const DATA_DIR_ENV: &str = "KSM_DATA_DIR";

/// Labelled `u8` images with per-channel normalization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(channels, height, width)` of each image.
    pub dims: [usize; 3],
    /// Row-major `C×H×W` bytes of every image, concatenated.
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Per-channel mean and standard deviation on the `[0, 1]` scale.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        dims: [usize; 3],
        images: Vec<u8>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Format(format!(
                "{} image bytes for {} records of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Format(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if mean.len() != dims[0] || std.len() != dims[0] || std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("normalization constants do not match channels".into()));
        }
        Ok(Dataset {
            dims,
            images,
            labels,
            class_names,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_bytes(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_bytes();
        &self.images[i * n..(i + 1) * n]
    }

    /// Normalized `[B, C, H, W]` batch of the given records and their labels.
    pub fn batch<F: Real>(&self, indices: &[usize]) -> (Tensor<F>, Vec<usize>) {
        let [c, h, w] = self.dims;
        let area = h * w;
        let scale: Vec<(f64, f64)> = self
            .mean
            .iter()
            .zip(&self.std)
            .map(|(&m, &s)| (1.0 / (255.0 * s), m / s))
            .collect();
        let mut data = Vec::with_capacity(indices.len() * c * area);
        for &i in indices {
            for (ch, px) in self.image(i).chunks(area).enumerate() {
                let (a, b) = scale[ch];
                data.extend(px.iter().map(|&v| F::from_f64_lossy(v as f64 * a - b)));
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new([indices.len(), c, h, w], data).expect("sized from dims"),
            labels,
        )
    }

    /// Records whose label is in `classes`, relabelled to their position in
    /// `classes`.
    pub fn subset_by_classes(&self, classes: &[usize]) -> Dataset {
        let n = self.image_bytes();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(local) = classes.iter().position(|&c| c == l) {
                images.extend_from_slice(&self.images[i * n..(i + 1) * n]);
                labels.push(local);
            }
        }
        Dataset {
            dims: self.dims,
            images,
            labels,
            class_names: classes.iter().map(|&c| self.class_names[c].clone()).collect(),
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Concatenates two datasets with identical layout and classes.
    pub fn concat(mut self, other: &Dataset) -> Result<Dataset> {
        if self.dims != other.dims || self.class_names != other.class_names {
            return Err(Error::Format("cannot concatenate datasets with different layouts".into()));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(self)
    }
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Little-endian cursor over a byte slice with truncation errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

/// Writes a tensor as `rank u32, dims u32×rank, f32 data`.
pub(crate) fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn get_tensor(r: &mut Reader<'_>) -> Result<Tensor<f32>> {
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    if n.saturating_mul(4) > r.remaining() {
        return Err(Error::Truncated {
            offset: r.position(),
            needed: n * 4 - r.remaining(),
        });
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()?);
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new(
            [1, 1, 2],
            vec![0, 255, 10, 20, 30, 40],
            vec![0, 2, 1],
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.5],
            vec![0.25],
        )
        .unwrap()
    }

    #[test]
    fn batch_normalizes() {
        let d = tiny();
        let (x, y) = d.batch::<f64>(&[0]);
        assert_eq!(x.shape(), &[1, 1, 1, 2]);
        assert!((x.data()[0] - (-2.0)).abs() < 1e-12);
        assert!((x.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(y, vec![0]);
    }

    #[test]
    fn subset_relabels() {
        let s = tiny().subset_by_classes(&[2, 1]);
        assert_eq!(s.labels, vec![0, 1]);
        assert_eq!(s.images, vec![10, 20, 30, 40]);
        assert_eq!(s.class_names, vec!["c", "b"]);
    }

    #[test]
    fn rejects_bad_labels() {
        assert!(Dataset::new([1, 1, 1], vec![0], vec![3], vec!["a".into()], vec![0.5], vec![0.2]).is_err());
    }

    #[test]
    fn reader_reports_truncation() {
        let mut r = Reader::new(&[1, 2, 3]);
        assert_eq!(r.u16().unwrap(), 0x0201);
        assert!(matches!(r.u32(), Err(Error::Truncated { offset: 2, needed: 3 })));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
