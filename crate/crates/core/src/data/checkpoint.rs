//! Backbone checkpoints:
//!
//! ```text
//! "KSMC" | version u16 | config len u32 | config JSON
//! | tensors u32 | per tensor: rank u32 | dims u32.. | f32..
//! | content hash [32]
//! ```
//!
//! Tensors are the conv weights followed by each dense `(weight, bias)`.
//! The trailing hash is the backbone's content hash and is recomputed on
//! load.

use std::fs;
use std::path::Path;

use super::{get_tensor, put_tensor, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"KSMC";
const CHECKPOINT_VERSION: u16 = 1;

fn hex(h: &[u8]) -> String {
    h.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint<F: Real>(backbone: &Backbone<F>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&backbone.config)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let tensors: Vec<Tensor<f32>> = backbone
        .conv
        .iter()
        .map(|p| p.value.cast())
        .chain(backbone.dense.iter().flat_map(|(w, b)| [w.value.cast(), b.value.cast()]))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        put_tensor(&mut out, t);
    }
    out.extend_from_slice(&backbone.content_hash());
    Ok(out)
}

/// Decodes a checkpoint into a frozen backbone after verifying its hash.
pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<Backbone<F>> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.array()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = r.u32()? as usize;
    let config: BackboneConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let n_conv = config.conv_shapes().len();
    let n_dense = config.dense_shapes().len();
    if count != n_conv + 2 * n_dense {
        return Err(Error::CountMismatch(format!(
            "{count} tensors for {n_conv} conv and {n_dense} dense layers"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(get_tensor(&mut r)?.cast::<F>());
    }
    let stored: [u8; 32] = r.array()?;
    if r.remaining() != 0 {
        return Err(Error::CountMismatch(format!("{} trailing bytes", r.remaining())));
    }
    let mut it = tensors.into_iter();
    let conv = it.by_ref().take(n_conv).collect();
    let mut dense = Vec::with_capacity(n_dense);
    while let (Some(w), Some(b)) = (it.next(), it.next()) {
        dense.push((w, b));
    }
    let backbone = Backbone::from_weights(config, conv, dense, true)?;
    let actual = backbone.content_hash();
    if actual != stored {
        return Err(Error::HashMismatch(format!(
            "checkpoint records {}, weights hash to {}",
            hex(&stored),
            hex(&actual)
        )));
    }
    Ok(backbone)
}

pub fn save_checkpoint<F: Real>(path: &Path, backbone: &Backbone<F>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(backbone)?)
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Backbone<F>> {
    decode_checkpoint(&fs::read(path)?)
}
