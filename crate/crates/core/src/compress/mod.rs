//! Gradient compressors: layer-wise top-k sparsification with mantissa
//! truncation, and PowerSGD-style low-rank factorization. Both support
//! error feedback and report their upstream size in the COO byte model.

mod lowrank;
mod sparse;
mod truncate;
pub mod wire;

use std::sync::Arc;

pub use lowrank::{
    decompress_lowrank, dematricize, lowrank_factorize, matricize, matrix_shape, orthonormalize,
    powersgd_compress, CompressorState, LowRankLayer, LowRankMessage, Matrix,
};
pub use sparse::{kept_per_layer, topk_sparsify, SparseLayer, SparseMessage};
pub use truncate::{truncate_bits, PayloadWidth};

use crate::error::{Error, Result};
use crate::grad::{GradientVector, Layout};
use crate::rng::RngStream;

/// Per-layer header: layer id (u32) + nnz or rank (u32).
pub const LAYER_HEADER_BYTES: usize = 8;
/// COO index width.
pub const INDEX_BYTES: usize = 4;
/// Low-rank factor entries travel as f32.
pub const FACTOR_BYTES: usize = 4;
/// Uncompressed vectors travel as f32 values in COO form.
pub const DENSE_VALUE_BYTES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Uncompressed vector.
    Dense(GradientVector),
    Sparse(SparseMessage),
    LowRank(LowRankMessage),
}

pub fn decompress_sparse(msg: &SparseMessage, layout: &Arc<Layout>) -> Result<GradientVector> {
    if msg.layers.len() != layout.layers().len() {
        return Err(Error::CorruptMessage(format!(
            "{} sparse layers for a layout of {}",
            msg.layers.len(),
            layout.layers().len()
        )));
    }
    let mut values = vec![0.0; layout.len()];
    for (layer, spec) in msg.layers.iter().zip(layout.layers()) {
        if layer.indices.len() != layer.values.len() {
            return Err(Error::CorruptMessage(format!(
                "layer {} has {} indices but {} values",
                spec.name,
                layer.indices.len(),
                layer.values.len()
            )));
        }
        for (&i, &x) in layer.indices.iter().zip(&layer.values) {
            let i = i as usize;
            if i >= spec.size {
                return Err(Error::CorruptMessage(format!(
                    "index {i} out of range for layer {} of size {}",
                    spec.name, spec.size
                )));
            }
            if !x.is_finite() {
                return Err(Error::CorruptMessage(format!(
                    "non-finite value in layer {}",
                    spec.name
                )));
            }
            values[spec.offset + i] = x;
        }
    }
    Ok(GradientVector::from_parts_unchecked(values, layout.clone()))
}

/// Receiver-side reconstruction; coordinates absent from a sparse message
/// are zero.
pub fn decompress(msg: &Message, layout: &Arc<Layout>) -> Result<GradientVector> {
    match msg {
        Message::Dense(v) => {
            if **v.layout() != **layout {
                return Err(Error::CorruptMessage("dense message layout differs".into()));
            }
            Ok(v.clone())
        }
        Message::Sparse(s) => decompress_sparse(s, layout),
        Message::LowRank(l) => decompress_lowrank(l, layout),
    }
}

/// Upstream size of `msg` in the COO byte model.
///
/// Sparse: `nnz * (4 + payload) + 8` per layer. Low-rank:
/// `(n1 + n2) * r * 4 + 8` per layer. Dense: every coordinate as a COO
/// entry with a 4-byte value.
pub fn coo_bytes(msg: &Message) -> u64 {
    match msg {
        Message::Dense(v) => {
            (v.len() * (INDEX_BYTES + DENSE_VALUE_BYTES)
                + v.layout().layers().len() * LAYER_HEADER_BYTES) as u64
        }
        Message::Sparse(s) => s
            .layers
            .iter()
            .map(|l| {
                (l.indices.len() * (INDEX_BYTES + s.width.bytes()) + LAYER_HEADER_BYTES) as u64
            })
            .sum(),
        Message::LowRank(l) => l
            .layers
            .iter()
            .map(|layer| {
                let (n1, n2) = layer.shape();
                ((n1 + n2) * layer.rank() * FACTOR_BYTES + LAYER_HEADER_BYTES) as u64
            })
            .sum(),
    }
}

/// Which compressor a pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressorKind {
    None,
    TopK { rate: f64, width: PayloadWidth },
    PowerSgd { rank: usize, iterations: usize },
}

impl CompressorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorKind::None => Ok(()),
            CompressorKind::TopK { rate, .. } if !(rate >= 1.0) || !rate.is_finite() => Err(
                Error::InvalidParameter(format!("compression rate must be >= 1, got {rate}")),
            ),
            CompressorKind::PowerSgd { rank: 0, .. } => {
                Err(Error::InvalidParameter("rank must be at least 1".into()))
            }
            CompressorKind::PowerSgd { iterations: 0, .. } => Err(Error::InvalidParameter(
                "power iterations must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// A compressor that leaves its input untouched.
    pub fn is_lossless(&self) -> bool {
        matches!(
            self,
            CompressorKind::None
                | CompressorKind::TopK {
                    rate: 1.0,
                    width: PayloadWidth::Bits64
                }
        )
    }
}

/// Output of one compression: the message, the receiver's reconstruction
/// and the sender-side residual `input - reconstruction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    pub message: Message,
    pub reconstruction: GradientVector,
    pub residual: GradientVector,
}

impl Compressed {
    pub fn bytes(&self) -> u64 {
        coo_bytes(&self.message)
    }
}

/// A compressor together with the state owned by one sending replica.
#[derive(Debug, Clone)]
pub struct Compressor {
    kind: CompressorKind,
    state: CompressorState,
}

impl Compressor {
    pub fn new(kind: CompressorKind, layout: Arc<Layout>) -> Result<Self> {
        kind.validate()?;
        Ok(Self {
            kind,
            state: CompressorState::new(layout),
        })
    }

    pub fn kind(&self) -> CompressorKind {
        self.kind
    }

    pub fn state(&self) -> &CompressorState {
        &self.state
    }

    /// Compresses `input` without touching any state. Low-rank compression
    /// starts from the current warm start when one exists.
    pub fn compress_once(&self, input: &GradientVector, rng: &mut RngStream) -> Result<Compressed> {
        self.state.residual.check_layout(input)?;
        let (message, residual) = match self.kind {
            CompressorKind::None => (Message::Dense(input.clone()), None),
            CompressorKind::TopK { rate, width } => {
                // residual is taken against the untruncated kept values
                let (msg, residual) = topk_sparsify(input, rate, width)?;
                (Message::Sparse(msg), Some(residual))
            }
            CompressorKind::PowerSgd { rank, iterations } => {
                let msg = lowrank_factorize(
                    input,
                    rank,
                    iterations,
                    self.state.warm_start.as_deref(),
                    rng,
                )?;
                (Message::LowRank(msg), None)
            }
        };
        let reconstruction = decompress(&message, input.layout())?;
        let residual = match residual {
            Some(r) => r,
            None => input.sub(&reconstruction)?,
        };
        Ok(Compressed {
            message,
            reconstruction,
            residual,
        })
    }

    /// Records the warm start carried by `compressed`.
    pub fn commit_warm_start(&mut self, compressed: &Compressed) {
        if let Message::LowRank(l) = &compressed.message {
            self.state.warm_start = Some(l.warm_start());
        }
    }

    /// Error-feedback compression: compresses `v + residual` and keeps the
    /// new residual for the next call.
    pub fn compress_with_feedback(
        &mut self,
        v: &GradientVector,
        rng: &mut RngStream,
    ) -> Result<Compressed> {
        let input = v.add(&self.state.residual)?;
        let out = self.compress_once(&input, rng)?;
        self.state.residual = out.residual.clone();
        self.commit_warm_start(&out);
        Ok(out)
    }

    pub fn reset(&mut self) {
        self.state = CompressorState::new(self.state.residual.layout().clone());
    }
}
