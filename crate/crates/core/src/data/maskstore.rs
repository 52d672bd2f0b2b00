//! Per-task mask files.
//!
//! Mask section (little-endian):
//!
//! ```text
//! "KSM1" | version u16 | k f64 | tau f64 | T f64 | layers u32
//! per layer: id u32 | c_out u32 | c_in u32
//!            | ceil(c_out*c_in / 8) bytes of bits, row-major, MSB first
//!            | one f32 scale per zero bit, ascending bit index
//! ```
//!
//! An optional companion section follows with everything else a task needs
//! at test time (head, normalization state, provenance):
//!
//! ```text
//! "TASK" | task id u32 | backbone hash [32] | init value f64 | gumbel u8
//! | tensors u32 | per tensor: name len u8 | name | rank u32 | dims u32.. | f32..
//! ```
//!
//! Element-wise masks are stored with `c_in` covering `c_in·kh·kw` and are
//! reshaped against the backbone config on load.

use std::fs;
use std::path::Path;

use super::{get_tensor, put_tensor, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskHyperparams, SoftMask};
use crate::model::{BackboneConfig, Head, NormState, TaskArtifact};
use crate::tensor::{Param, Real, Tensor};

pub const MASK_MAGIC: [u8; 4] = *b"KSM1";
pub const MASK_VERSION: u16 = 1;
/// Magic, version, three hyperparameters and the layer count.
pub const MASK_HEADER_BYTES: usize = 4 + 2 + 3 * 8 + 4;
const COMPANION_MAGIC: [u8; 4] = *b"TASK";

#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub id: u32,
    pub c_out: u32,
    pub c_in: u32,
    /// `c_out·c_in` bits, row-major.
    pub bits: Vec<bool>,
    /// Scale of every zero bit in ascending index order.
    pub scales: Vec<f32>,
}

impl StoredLayer {
    pub fn zeros(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    /// Bytes this layer occupies in the mask section.
    pub fn encoded_len(&self) -> usize {
        12 + self.bits.len().div_ceil(8) + 4 * self.scales.len()
    }

    fn from_soft_mask<F: Real>(id: usize, m: &SoftMask<F>) -> Self {
        let shape = m.shape();
        let c_out = shape[0];
        let c_in = shape[1..].iter().product::<usize>();
        StoredLayer {
            id: id as u32,
            c_out: c_out as u32,
            c_in: c_in as u32,
            bits: m.binary().bits().to_vec(),
            scales: m.zero_scales().iter().map(|s| s.as_f64() as f32).collect(),
        }
    }

    /// Rebuilds the soft mask with the given shape, which must hold exactly
    /// `c_out·c_in` entries.
    pub fn to_soft_mask<F: Real>(&self, shape: &[usize]) -> Result<SoftMask<F>> {
        if shape.iter().product::<usize>() != self.bits.len() || shape.first() != Some(&(self.c_out as usize)) {
            return Err(Error::CountMismatch(format!(
                "layer {} holds {}×{} entries, expected shape {shape:?}",
                self.id, self.c_out, self.c_in
            )));
        }
        let binary = BinaryMask::new(shape.to_vec(), self.bits.clone())?;
        let scales: Vec<F> = self.scales.iter().map(|&s| F::from_f64_lossy(s as f64)).collect();
        SoftMask::from_parts(binary, &scales)
    }
}

/// Task-private state stored next to the masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Companion {
    pub task_id: u32,
    pub backbone_hash: [u8; 32],
    pub init_value: f64,
    pub gumbel: bool,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Companion {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("companion section has no tensor {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskStore {
    pub k: f64,
    pub tau: f64,
    pub temperature: f64,
    pub layers: Vec<StoredLayer>,
    pub companion: Option<Companion>,
}

/// Size of the mask section: header plus
/// `12 + ceil(c_out·c_in/8) + 4·zeros` per layer.
pub fn mask_section_size(store: &MaskStore) -> usize {
    MASK_HEADER_BYTES + store.layers.iter().map(StoredLayer::encoded_len).sum::<usize>()
}

fn pack_bits(bits: &[bool], out: &mut Vec<u8>) {
    for chunk in bits.chunks(8) {
        let mut byte = 0u8;
        for (i, &b) in chunk.iter().enumerate() {
            if b {
                byte |= 0x80 >> i;
            }
        }
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], n: usize, layer: u32) -> Result<Vec<bool>> {
    let bits: Vec<bool> = (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    if n % 8 != 0 {
        let pad = bytes[n / 8] & (0xFFu8 >> (n % 8));
        if pad != 0 {
            return Err(Error::Format(format!("layer {layer}: nonzero padding bits")));
        }
    }
    Ok(bits)
}

impl MaskStore {
    pub fn hyperparams(&self) -> MaskHyperparams {
        let companion = self.companion.as_ref();
        MaskHyperparams {
            k: self.k,
            tau: self.tau,
            temperature: self.temperature,
            init_value: companion.map_or(MaskHyperparams::default().init_value, |c| c.init_value),
            gumbel: companion.is_some_and(|c| c.gumbel),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(mask_section_size(self));
        out.extend_from_slice(&MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        for v in [self.k, self.tau, self.temperature] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            if l.bits.len() != l.c_out as usize * l.c_in as usize {
                return Err(Error::CountMismatch(format!(
                    "layer {}: {} bits for {}×{}",
                    l.id,
                    l.bits.len(),
                    l.c_out,
                    l.c_in
                )));
            }
            if l.scales.len() != l.zeros() {
                return Err(Error::CountMismatch(format!(
                    "layer {}: {} scales for {} zero bits",
                    l.id,
                    l.scales.len(),
                    l.zeros()
                )));
            }
            for v in [l.id, l.c_out, l.c_in] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            pack_bits(&l.bits, &mut out);
            for s in &l.scales {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        if let Some(c) = &self.companion {
            out.extend_from_slice(&COMPANION_MAGIC);
            out.extend_from_slice(&c.task_id.to_le_bytes());
            out.extend_from_slice(&c.backbone_hash);
            out.extend_from_slice(&c.init_value.to_le_bytes());
            out.push(c.gumbel as u8);
            out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
            for (name, t) in &c.tensors {
                let len = u8::try_from(name.len())
                    .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
                out.push(len);
                out.extend_from_slice(name.as_bytes());
                put_tensor(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if magic != MASK_MAGIC {
            return Err(Error::BadMagic {
                expected: MASK_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != MASK_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (k, tau, temperature) = (r.f64()?, r.f64()?, r.f64()?);
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(4096));
        for _ in 0..n_layers {
            let (id, c_out, c_in) = (r.u32()?, r.u32()?, r.u32()?);
            let n = (c_out as usize)
                .checked_mul(c_in as usize)
                .ok_or_else(|| Error::Format(format!("layer {id}: size overflows")))?;
            let bits = unpack_bits(r.take(n.div_ceil(8))?, n, id)?;
            let zeros = bits.iter().filter(|&&b| !b).count();
            let mut scales = Vec::with_capacity(zeros);
            for _ in 0..zeros {
                scales.push(r.f32()?);
            }
            layers.push(StoredLayer {
                id,
                c_out,
                c_in,
                bits,
                scales,
            });
        }
        let companion = match r.remaining() {
            0 => None,
            n if n < COMPANION_MAGIC.len() || !bytes[r.position()..].starts_with(&COMPANION_MAGIC) => {
                return Err(Error::CountMismatch(format!(
                    "{n} bytes after the {n_layers} declared layers"
                )))
            }
            _ => Some(decode_companion(&mut r)?),
        };
        if r.remaining() != 0 {
            return Err(Error::CountMismatch(format!(
                "{} bytes after the declared content",
                r.remaining()
            )));
        }
        Ok(MaskStore {
            k,
            tau,
            temperature,
            layers,
            companion,
        })
    }
}

fn decode_companion(r: &mut Reader<'_>) -> Result<Companion> {
    let magic: [u8; 4] = r.array()?;
    if magic != COMPANION_MAGIC {
        return Err(Error::BadMagic {
            expected: COMPANION_MAGIC,
            found: magic,
        });
    }
    let task_id = r.u32()?;
    let backbone_hash = r.array()?;
    let init_value = r.f64()?;
    let gumbel = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("gumbel flag {b}"))),
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u8()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        tensors.push((name, get_tensor(r)?));
    }
    Ok(Companion {
        task_id,
        backbone_hash,
        init_value,
        gumbel,
        tensors,
    })
}

pub fn save_mask(path: &Path, store: &MaskStore) -> Result<()> {
    write_atomic(path, &store.encode()?)
}

pub fn load_mask(path: &Path) -> Result<MaskStore> {
    MaskStore::decode(&fs::read(path)?)
}

fn to_f32<F: Real>(t: &Tensor<F>) -> Tensor<f32> {
    t.cast()
}

fn vec_tensor<F: Real>(v: &[F]) -> Tensor<f32> {
    Tensor::new([v.len()], v.iter().map(|x| x.as_f64() as f32).collect()).expect("1-D")
}

/// Serializable form of a task artifact.
pub fn store_from_artifact<F: Real>(a: &TaskArtifact<F>) -> MaskStore {
    let layers = a
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| StoredLayer::from_soft_mask(i, m))
        .collect();
    let mut tensors = vec![
        ("head.weight".to_string(), to_f32(&a.head.weight.value)),
        ("head.bias".to_string(), to_f32(&a.head.bias.value)),
    ];
    for (i, n) in a.norms.iter().enumerate() {
        tensors.push((format!("norm{i}.gamma"), to_f32(&n.gamma.value)));
        tensors.push((format!("norm{i}.beta"), to_f32(&n.beta.value)));
        tensors.push((format!("norm{i}.running_mean"), vec_tensor(&n.running_mean)));
        tensors.push((format!("norm{i}.running_var"), vec_tensor(&n.running_var)));
    }
    if let Some(real) = &a.real_masks {
        for (i, t) in real.iter().enumerate() {
            tensors.push((format!("real{i}"), to_f32(t)));
        }
    }
    MaskStore {
        k: a.hp.k,
        tau: a.hp.tau,
        temperature: a.hp.temperature,
        layers,
        companion: Some(Companion {
            task_id: a.task_id as u32,
            backbone_hash: a.backbone_hash,
            init_value: a.hp.init_value,
            gumbel: a.hp.gumbel,
            tensors,
        }),
    }
}

/// Rebuilds a task artifact against the backbone layout in `config`.
pub fn artifact_from_store<F: Real>(store: &MaskStore, config: &BackboneConfig) -> Result<TaskArtifact<F>> {
    let companion = store
        .companion
        .as_ref()
        .ok_or_else(|| Error::Format("mask file has no companion section".into()))?;
    let shapes = config.conv_shapes();
    if shapes.len() != store.layers.len() {
        return Err(Error::CountMismatch(format!(
            "{} stored mask layers for {} conv layers",
            store.layers.len(),
            shapes.len()
        )));
    }
    let mut masks = Vec::with_capacity(shapes.len());
    for (i, (l, s)) in store.layers.iter().zip(&shapes).enumerate() {
        if l.id as usize != i {
            return Err(Error::Format(format!("layer id {} at position {i}", l.id)));
        }
        let shape: &[usize] = if l.bits.len() == s[0] * s[1] { &s[..2] } else { &s[..] };
        masks.push(l.to_soft_mask(shape)?);
    }
    let get = |name: &str| -> Result<Tensor<F>> { Ok(companion.tensor(name)?.cast()) };
    let head = Head {
        weight: Param::new(get("head.weight")?),
        bias: Param::new(get("head.bias")?),
    };
    let channels = config.norm_channels();
    let mut norms = Vec::with_capacity(channels.len());
    for (i, &c) in channels.iter().enumerate() {
        let n = NormState {
            gamma: Param::new(get(&format!("norm{i}.gamma"))?),
            beta: Param::new(get(&format!("norm{i}.beta"))?),
            running_mean: get(&format!("norm{i}.running_mean"))?.into_data(),
            running_var: get(&format!("norm{i}.running_var"))?.into_data(),
        };
        let lens = [
            n.gamma.value.len(),
            n.beta.value.len(),
            n.running_mean.len(),
            n.running_var.len(),
        ];
        if lens.iter().any(|&l| l != c) {
            return Err(Error::CountMismatch(format!("norm{i} holds {lens:?} for {c} channels")));
        }
        norms.push(n);
    }
    let features = config.feature_dim()?;
    if head.weight.value.shape().len() != 2
        || head.weight.value.shape()[1] != features
        || head.bias.value.shape() != [head.weight.value.shape()[0]]
    {
        return Err(Error::dim("head", format!("{:?} for {features} features", head.weight.value.shape())));
    }
    let real_masks = if companion.tensors.iter().any(|(n, _)| n.starts_with("real")) {
        Some((0..shapes.len()).map(|i| get(&format!("real{i}"))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok(TaskArtifact {
        task_id: companion.task_id as usize,
        hp: store.hyperparams(),
        masks,
        real_masks,
        head,
        norms,
        backbone_hash: companion.backbone_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer(bits: &[bool], scales: &[f32]) -> MaskStore {
        MaskStore {
            k: 20.0,
            tau: 0.0,
            temperature: 0.5,
            layers: vec![StoredLayer {
                id: 0,
                c_out: 2,
                c_in: (bits.len() / 2) as u32,
                bits: bits.to_vec(),
                scales: scales.to_vec(),
            }],
            companion: None,
        }
    }

    #[test]
    fn packs_msb_first() {
        let mut out = Vec::new();
        pack_bits(&[true, false, true, false], &mut out);
        assert_eq!(out, vec![0xA0]);
        assert_eq!(unpack_bits(&out, 4, 0).unwrap(), vec![true, false, true, false]);
        assert!(unpack_bits(&[0xA1], 4, 0).is_err());
    }

    #[test]
    fn round_trip_without_companion() {
        let s = one_layer(&[true, false, true, false], &[0.25, 0.75]);
        let bytes = s.encode().unwrap();
        assert_eq!(bytes.len(), mask_section_size(&s));
        assert_eq!(MaskStore::decode(&bytes).unwrap(), s);
    }

    #[test]
    fn encode_checks_scale_count() {
        let s = one_layer(&[true, false, true, false], &[0.25]);
        assert!(matches!(s.encode(), Err(Error::CountMismatch(_))));
    }

    #[test]
    fn trailing_garbage_rejected() {
        let mut bytes = one_layer(&[true; 4], &[]).encode().unwrap();
        bytes.extend_from_slice(b"TAS");
        assert!(matches!(MaskStore::decode(&bytes), Err(Error::CountMismatch(_))));
        bytes.push(b'K');
        assert!(matches!(MaskStore::decode(&bytes), Err(Error::Truncated { .. })));
    }
}
