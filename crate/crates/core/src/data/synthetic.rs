//! Gaussian-blob image tasks for desk-scale runs.
//!
//! Each class has a random prototype image; a sample is
//! `128 + 32·(separation·prototype + noise)` quantized to bytes, and the
//! dataset's normalization maps it back to `separation·prototype + noise`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{split_tasks, Dataset, TaskSequence};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    /// `(channels, height, width)`.
    pub dims: [usize; 3],
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Prototype scale relative to unit noise; 0 makes classes identical.
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_tasks: usize, classes_per_task: usize, dims: [usize; 3], seed: u64) -> Self {
        SyntheticSpec {
            n_tasks,
            classes_per_task,
            dims,
            train_per_class: 64,
            test_per_class: 32,
            separation: 1.0,
            seed,
        }
    }
}

const CENTER: f64 = 128.0;
const SPREAD: f64 = 32.0;

fn sample_split(
    protos: &[Vec<f64>],
    per_class: usize,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let classes = protos.len();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * classes {
        // interleave classes so prefixes stay balanced
        let c = i % classes;
        for &p in &protos[c] {
            let noise: f64 = StandardNormal.sample(rng);
            let v = CENTER + SPREAD * (spec.separation * p + noise);
            images.push(v.round().clamp(0.0, 255.0) as u8);
        }
        labels.push(c);
    }
    let ch = spec.dims[0];
    Dataset::new(
        spec.dims,
        images,
        labels,
        (0..classes).map(|c| format!("blob_{c}")).collect(),
        vec![CENTER / 255.0; ch],
        vec![SPREAD / 255.0; ch],
    )
}

/// Deterministic in `spec.seed`; different seeds give different data of the
/// same shapes.
pub fn synthetic_tasks(spec: &SyntheticSpec) -> Result<TaskSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.n_tasks * spec.classes_per_task;
    let pixels: usize = spec.dims.iter().product();
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..pixels).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let train = sample_split(&protos, spec.train_per_class, spec, &mut rng)?;
    let test = sample_split(&protos, spec.test_per_class, spec, &mut rng)?;
    split_tasks(&train, &test, spec.n_tasks, spec.classes_per_task, spec.seed)
}
