//! Per-layer mask statistics, storage overhead and ledger output.

use serde::Serialize;

use crate::data::{mask_section_size, MaskStore, StoredLayer, MASK_HEADER_BYTES};
use crate::error::Result;
use crate::trainer::RunLedger;

/// Share of kept kernels versus scaled kernels in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerMaskStats {
    pub layer_id: u32,
    pub entries: usize,
    /// Fraction of bits equal to 1.
    pub ones_ratio: f64,
    /// Fraction of entries carrying a scaling factor; `1 - ones_ratio`.
    pub scale_ratio: f64,
    /// Mean stored scale, 0 when there are none.
    pub mean_scale: f64,
}

impl LayerMaskStats {
    pub fn of(layer: &StoredLayer) -> Self {
        let entries = layer.bits.len();
        let ones = entries - layer.zeros();
        let ones_ratio = if entries == 0 { 1.0 } else { ones as f64 / entries as f64 };
        let mean_scale = if layer.scales.is_empty() {
            0.0
        } else {
            layer.scales.iter().map(|&s| s as f64).sum::<f64>() / layer.scales.len() as f64
        };
        LayerMaskStats {
            layer_id: layer.id,
            entries,
            ones_ratio,
            scale_ratio: 1.0 - ones_ratio,
            mean_scale,
        }
    }
}

pub fn layer_stats(store: &MaskStore) -> Vec<LayerMaskStats> {
    store.layers.iter().map(LayerMaskStats::of).collect()
}

/// Storage accounting of one mask file against binary-only alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadReport {
    /// Mask bits actually stored (one per kernel for kernel-wise masks).
    pub stored_bits: usize,
    /// Bits an element-wise binary mask over the same weights would need.
    pub element_bits: usize,
    pub scale_count: usize,
    /// Bytes of the mask section (header, bits, scales).
    pub mask_bytes: usize,
    /// Bytes of a file with the same layers and no scales.
    pub binary_bytes: usize,
    /// Bytes of an element-wise binary file over the same weights.
    pub element_binary_bytes: usize,
}

fn binary_layer_bytes(bits: usize) -> usize {
    12 + bits.div_ceil(8)
}

impl OverheadReport {
    /// `kernel_areas[i]` is `kh·kw` of layer `i` when that layer is stored
    /// kernel-wise, and 1 when it is already element-wise.
    pub fn new(store: &MaskStore, kernel_areas: &[usize]) -> Self {
        let mut r = OverheadReport {
            stored_bits: 0,
            element_bits: 0,
            scale_count: 0,
            mask_bytes: mask_section_size(store),
            binary_bytes: MASK_HEADER_BYTES,
            element_binary_bytes: MASK_HEADER_BYTES,
        };
        for (l, &area) in store.layers.iter().zip(kernel_areas.iter().chain(std::iter::repeat(&1))) {
            let bits = l.bits.len();
            r.stored_bits += bits;
            r.element_bits += bits * area;
            r.scale_count += l.scales.len();
            r.binary_bytes += binary_layer_bytes(bits);
            r.element_binary_bytes += binary_layer_bytes(bits * area);
        }
        r
    }

    /// Element-wise bits per stored bit.
    pub fn bit_reduction(&self) -> f64 {
        self.element_bits as f64 / self.stored_bits.max(1) as f64
    }

    /// Mask section size relative to the binary-only file.
    pub fn vs_binary(&self) -> f64 {
        self.mask_bytes as f64 / self.binary_bytes as f64
    }

    pub fn vs_element_binary(&self) -> f64 {
        self.mask_bytes as f64 / self.element_binary_bytes as f64
    }
}

/// `file,layer,entries,ones_ratio,scale_ratio,mean_scale` rows, one block
/// per mask file.
pub fn stats_csv(files: &[(&str, &[LayerMaskStats])]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["file", "layer", "entries", "ones_ratio", "scale_ratio", "mean_scale"])?;
    for (file, stats) in files {
        for s in *stats {
            w.write_record([
                file.to_string(),
                s.layer_id.to_string(),
                s.entries.to_string(),
                format!("{:.6}", s.ones_ratio),
                format!("{:.6}", s.scale_ratio),
                format!("{:.6}", s.mean_scale),
            ])?;
        }
    }
    finish(w)
}

/// `task,acc,seconds` rows in training order; `acc` is the final accuracy
/// in percent.
pub fn ledger_csv(ledger: &RunLedger) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "acc", "seconds"])?;
    for ((id, acc), secs) in ledger.task_ids.iter().zip(&ledger.final_accuracy).zip(&ledger.seconds) {
        w.write_record([id.to_string(), format!("{:.4}", acc * 100.0), format!("{secs:.3}")])?;
    }
    finish(w)
}

pub fn ledger_json(ledger: &RunLedger) -> Result<String> {
    let mut s = serde_json::to_string_pretty(ledger)?;
    s.push('\n');
    Ok(s)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
