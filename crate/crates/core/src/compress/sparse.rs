use std::cmp::Ordering;

use crate::compress::truncate::{truncate_bits, PayloadWidth};
use crate::error::{Error, Result};
use crate::grad::GradientVector;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseLayer {
    /// Sorted, unique positions within the layer.
    pub indices: Vec<u32>,
    /// Truncated values, parallel to `indices`.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMessage {
    pub layers: Vec<SparseLayer>,
    pub width: PayloadWidth,
}

impl SparseMessage {
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    /// A message carrying no coordinates for `layer_count` layers.
    pub fn empty(layer_count: usize, width: PayloadWidth) -> Self {
        Self {
            layers: vec![SparseLayer::default(); layer_count],
            width,
        }
    }
}

/// Number of coordinates kept per layer at compression rate `rate`.
pub fn kept_per_layer(layer_size: usize, rate: f64) -> usize {
    ((layer_size as f64 / rate).floor() as usize).clamp(1, layer_size)
}

/// Keeps the `max(1, floor(size / rate))` largest-magnitude coordinates of
/// each layer; magnitude ties go to the lower index.
///
/// The residual holds every dropped coordinate, measured against the
/// untruncated values, so only mantissa truncation separates
/// `decompress(message) + residual` from `v`.
pub fn topk_sparsify(
    v: &GradientVector,
    rate: f64,
    width: PayloadWidth,
) -> Result<(SparseMessage, GradientVector)> {
    if !(rate >= 1.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "compression rate must be a finite value >= 1, got {rate}"
        )));
    }
    let layout = v.layout().clone();
    let mut residual = v.values().to_vec();
    let mut layers = Vec::with_capacity(layout.layers().len());
    for (li, spec) in layout.layers().iter().enumerate() {
        let slice = v.layer(li);
        let k = kept_per_layer(spec.size, rate);
        let mut order: Vec<u32> = (0..spec.size as u32).collect();
        let by_magnitude = |a: &u32, b: &u32| -> Ordering {
            let (x, y) = (slice[*a as usize].abs(), slice[*b as usize].abs());
            y.total_cmp(&x).then(a.cmp(b))
        };
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, by_magnitude);
            order.truncate(k);
        }
        order.sort_unstable();
        let values = order
            .iter()
            .map(|&i| {
                residual[spec.offset + i as usize] = 0.0;
                truncate_bits(slice[i as usize], width)
            })
            .collect();
        layers.push(SparseLayer {
            indices: order,
            values,
        });
    }
    Ok((
        SparseMessage { layers, width },
        GradientVector::from_parts_unchecked(residual, layout),
    ))
}
