//! Little-endian wire encoding whose length matches [`coo_bytes`].
//!
//! Per layer: `layer id: u32`, `nnz or rank: u32`, then either
//! `(index: u32, value)` pairs at the payload width, or the `P` factor
//! followed by the `Q` factor as dense row-major `f32`s.
//!
//! 16-bit values are the upper half of the `f32` encoding (bfloat16);
//! magnitudes beyond the `f32` range saturate.
//!
//! [`coo_bytes`]: super::coo_bytes

use std::sync::Arc;

use super::{
    matrix_shape, LowRankLayer, LowRankMessage, Matrix, Message, PayloadWidth, SparseLayer,
    SparseMessage,
};
use crate::error::{Error, Result};
use crate::grad::Layout;

fn to_f32(x: f64) -> f32 {
    x.clamp(-(f32::MAX as f64), f32::MAX as f64) as f32
}

fn push_value(out: &mut Vec<u8>, x: f64, width: PayloadWidth) {
    match width {
        PayloadWidth::Bits16 => {
            let bits = (to_f32(x).to_bits() >> 16) as u16;
            out.extend_from_slice(&bits.to_le_bytes());
        }
        PayloadWidth::Bits32 => out.extend_from_slice(&to_f32(x).to_le_bytes()),
        PayloadWidth::Bits64 => out.extend_from_slice(&x.to_le_bytes()),
    }
}

fn push_header(out: &mut Vec<u8>, layer: usize, count: usize) {
    out.extend_from_slice(&(layer as u32).to_le_bytes());
    out.extend_from_slice(&(count as u32).to_le_bytes());
}

pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Dense(v) => {
            for (li, spec) in v.layout().layers().iter().enumerate() {
                push_header(&mut out, li, spec.size);
                for (i, &x) in v.layer(li).iter().enumerate() {
                    out.extend_from_slice(&(i as u32).to_le_bytes());
                    push_value(&mut out, x, PayloadWidth::Bits32);
                }
            }
        }
        Message::Sparse(s) => {
            for (li, layer) in s.layers.iter().enumerate() {
                push_header(&mut out, li, layer.indices.len());
                for (&i, &x) in layer.indices.iter().zip(&layer.values) {
                    out.extend_from_slice(&i.to_le_bytes());
                    push_value(&mut out, x, s.width);
                }
            }
        }
        Message::LowRank(l) => {
            for (li, layer) in l.layers.iter().enumerate() {
                push_header(&mut out, li, layer.rank());
                for &x in layer.p.data().iter().chain(layer.q.data()) {
                    out.extend_from_slice(&to_f32(x).to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::CorruptMessage(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }

    fn value(&mut self, width: PayloadWidth) -> Result<f64> {
        match width {
            PayloadWidth::Bits16 => {
                let half = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes"));
                Ok(f32::from_bits((half as u32) << 16) as f64)
            }
            PayloadWidth::Bits32 => self.f32(),
            PayloadWidth::Bits64 => Ok(f64::from_le_bytes(
                self.take(8)?.try_into().expect("8 bytes"),
            )),
        }
    }

    fn header(&mut self, expected_layer: usize) -> Result<usize> {
        let id = self.u32()? as usize;
        if id != expected_layer {
            return Err(Error::CorruptMessage(format!(
                "layer id {id} where {expected_layer} was expected"
            )));
        }
        Ok(self.u32()? as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::CorruptMessage(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_sparse(
    bytes: &[u8],
    layout: &Arc<Layout>,
    width: PayloadWidth,
) -> Result<SparseMessage> {
    let mut r = Reader { bytes, pos: 0 };
    let mut layers = Vec::with_capacity(layout.layers().len());
    for (li, spec) in layout.layers().iter().enumerate() {
        let nnz = r.header(li)?;
        if nnz > spec.size {
            return Err(Error::CorruptMessage(format!(
                "nnz {nnz} exceeds layer size {}",
                spec.size
            )));
        }
        let mut layer = SparseLayer::default();
        for _ in 0..nnz {
            let i = r.u32()?;
            if i as usize >= spec.size {
                return Err(Error::CorruptMessage(format!("index {i} out of range")));
            }
            layer.indices.push(i);
            layer.values.push(r.value(width)?);
        }
        layers.push(layer);
    }
    r.finish()?;
    Ok(SparseMessage { layers, width })
}

pub fn decode_lowrank(bytes: &[u8], layout: &Arc<Layout>) -> Result<LowRankMessage> {
    let mut r = Reader { bytes, pos: 0 };
    let mut layers = Vec::with_capacity(layout.layers().len());
    for (li, spec) in layout.layers().iter().enumerate() {
        let rank = r.header(li)?;
        let (n1, n2) = matrix_shape(spec.size);
        if rank == 0 || rank > n1.min(n2) {
            return Err(Error::CorruptMessage(format!(
                "rank {rank} invalid for {n1}x{n2} layer"
            )));
        }
        let mut read = |rows: usize| -> Result<Matrix> {
            let data = (0..rows * rank)
                .map(|_| r.f32())
                .collect::<Result<Vec<_>>>()?;
            Matrix::from_rows(rows, rank, data)
        };
        let p = read(n1)?;
        let q = read(n2)?;
        layers.push(LowRankLayer {
            p,
            q,
            requested_rank: rank,
        });
    }
    r.finish()?;
    Ok(LowRankMessage { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{coo_bytes, lowrank_factorize, topk_sparsify};
    use crate::grad::GradientVector;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn layered(values: Vec<f64>) -> GradientVector {
        let n = values.len();
        let layout = Arc::new(Layout::new([("w", n - n / 3), ("b", n / 3)]).unwrap());
        GradientVector::new(values, layout).unwrap()
    }

    proptest! {
        #[test]
        fn sparse_encoding_length_and_decode(values in prop::collection::vec(-100.0f64..100.0, 3..80),
                                             rate in 1.0f64..20.0,
                                             bits in prop_oneof![Just(16u32), Just(32), Just(64)]) {
            let v = layered(values);
            let width = PayloadWidth::from_bits(bits).unwrap();
            let (msg, _) = topk_sparsify(&v, rate, width).unwrap();
            let bytes = encode(&Message::Sparse(msg.clone()));
            prop_assert_eq!(bytes.len() as u64, coo_bytes(&Message::Sparse(msg.clone())));
            let back = decode_sparse(&bytes, v.layout(), width).unwrap();
            prop_assert_eq!(&back.layers.iter().map(|l| l.indices.clone()).collect::<Vec<_>>(),
                            &msg.layers.iter().map(|l| l.indices.clone()).collect::<Vec<_>>());
            if width != PayloadWidth::Bits32 {
                // truncated values are exactly representable at their width
                prop_assert_eq!(back, msg);
            }
        }

        #[test]
        fn lowrank_encoding_length(values in prop::collection::vec(-10.0f64..10.0, 3..90), rank in 1usize..4) {
            let v = layered(values);
            let msg = Message::LowRank(lowrank_factorize(&v, rank, 1, None, &mut RngStream::new(0, 0)).unwrap());
            let bytes = encode(&msg);
            prop_assert_eq!(bytes.len() as u64, coo_bytes(&msg));
            let Message::LowRank(inner) = &msg else { unreachable!() };
            let back = decode_lowrank(&bytes, v.layout()).unwrap();
            for (a, b) in back.layers.iter().zip(&inner.layers) {
                prop_assert_eq!(a.shape(), b.shape());
                for (x, y) in a.p.data().iter().zip(b.p.data()) {
                    prop_assert!((x - y).abs() <= 1e-6 * y.abs().max(1e-30));
                }
            }
        }
    }

    #[test]
    fn dense_encoding_length() {
        let v = layered((0..12).map(|i| i as f64).collect());
        let msg = Message::Dense(v);
        assert_eq!(encode(&msg).len() as u64, coo_bytes(&msg));
    }

    #[test]
    fn empty_layer_header_only() {
        let layout = Arc::new(Layout::single("all", 5).unwrap());
        let msg = SparseMessage::empty(1, PayloadWidth::Bits16);
        let bytes = encode(&Message::Sparse(msg.clone()));
        assert_eq!(bytes, vec![0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(
            decode_sparse(&bytes, &layout, PayloadWidth::Bits16).unwrap(),
            msg
        );
    }

    #[test]
    fn corrupt_inputs() {
        let layout = Arc::new(Layout::single("all", 4).unwrap());
        // index 9 in a 4-wide layer
        let mut bytes = vec![0, 0, 0, 0, 1, 0, 0, 0, 9, 0, 0, 0, 0, 0];
        assert!(decode_sparse(&bytes, &layout, PayloadWidth::Bits16).is_err());
        bytes[8] = 1;
        assert!(decode_sparse(&bytes, &layout, PayloadWidth::Bits16).is_ok());
        bytes.push(0);
        assert!(decode_sparse(&bytes, &layout, PayloadWidth::Bits16).is_err());
        assert!(decode_sparse(&[0, 0, 0], &layout, PayloadWidth::Bits16).is_err());
    }
}
