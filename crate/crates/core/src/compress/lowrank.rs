//! Power-iteration low-rank factorization of matricized layers.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::{GradientVector, Layout};
use crate::rng::RngStream;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidParameter(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// `self * other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(k, i);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.get(i, k) * other.get(j, k);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// `max |(self^T self - I)_{ij}|`
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.t_matmul(self);
        let mut worst = 0.0f64;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }
}

/// Near-square shape for a layer of `len` coordinates:
/// `n1 = ceil(sqrt(len))`, `n2 = ceil(len / n1)`.
pub fn matrix_shape(len: usize) -> (usize, usize) {
    let mut n1 = (len as f64).sqrt().ceil() as usize;
    while n1 * n1 < len {
        n1 += 1;
    }
    while n1 > 1 && (n1 - 1) * (n1 - 1) >= len {
        n1 -= 1;
    }
    let n2 = len.div_ceil(n1).max(1);
    (n1.max(1), n2)
}

/// Row-major fill with zero padding at the tail.
pub fn matricize(values: &[f64]) -> Matrix {
    let (n1, n2) = matrix_shape(values.len());
    let mut data = values.to_vec();
    data.resize(n1 * n2, 0.0);
    Matrix {
        rows: n1,
        cols: n2,
        data,
    }
}

/// Inverse of [`matricize`]: the first `len` entries in row-major order.
pub fn dematricize(m: &Matrix, len: usize) -> Vec<f64> {
    m.data[..len].to_vec()
}

/// Modified Gram-Schmidt, two passes, in place on the columns of `p`.
///
/// Columns that vanish after projection are replaced by the first standard
/// basis vector not yet spanned, so `p^T p = I` holds for every input.
pub fn orthonormalize(p: &mut Matrix) {
    let (n, r) = (p.rows, p.cols);
    for j in 0..r {
        let original: f64 = (0..n).map(|i| p.get(i, j).powi(2)).sum::<f64>().sqrt();
        for _ in 0..2 {
            project_out(p, j);
        }
        let norm = column_norm(p, j);
        if original > 0.0 && norm > 1e-10 * original {
            for i in 0..n {
                p.set(i, j, p.get(i, j) / norm);
            }
            continue;
        }
        for e in 0..n {
            for i in 0..n {
                p.set(i, j, if i == e { 1.0 } else { 0.0 });
            }
            for _ in 0..2 {
                project_out(p, j);
            }
            let norm = column_norm(p, j);
            if norm > 0.5 {
                for i in 0..n {
                    p.set(i, j, p.get(i, j) / norm);
                }
                break;
            }
        }
    }
}

fn column_norm(p: &Matrix, j: usize) -> f64 {
    (0..p.rows).map(|i| p.get(i, j).powi(2)).sum::<f64>().sqrt()
}

fn project_out(p: &mut Matrix, j: usize) {
    for k in 0..j {
        let dot: f64 = (0..p.rows).map(|i| p.get(i, j) * p.get(i, k)).sum();
        for i in 0..p.rows {
            let v = p.get(i, j) - dot * p.get(i, k);
            p.set(i, j, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLayer {
    /// `n1 x r`, orthonormal columns.
    pub p: Matrix,
    /// `n2 x r`
    pub q: Matrix,
    /// Rank asked for before clamping to `min(n1, n2)`.
    pub requested_rank: usize,
}

impl LowRankLayer {
    pub fn rank(&self) -> usize {
        self.p.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p.rows, self.q.rows)
    }

    pub fn rank_clamped(&self) -> bool {
        self.requested_rank > self.rank()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.p.matmul_t(&self.q)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankMessage {
    pub layers: Vec<LowRankLayer>,
}

impl LowRankMessage {
    pub fn any_rank_clamped(&self) -> bool {
        self.layers.iter().any(LowRankLayer::rank_clamped)
    }

    /// Right factors, usable as the next call's warm start.
    pub fn warm_start(&self) -> Vec<Matrix> {
        self.layers.iter().map(|l| l.q.clone()).collect()
    }
}

/// Error-feedback state owned by one compressing replica.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorState {
    pub residual: GradientVector,
    pub warm_start: Option<Vec<Matrix>>,
}

impl CompressorState {
    pub fn new(layout: Arc<Layout>) -> Self {
        Self {
            residual: GradientVector::zeros(layout),
            warm_start: None,
        }
    }
}

/// Factorizes every layer of `input` at rank `rank`.
///
/// Each iteration computes `P = M Q`, orthonormalizes `P`, then
/// `Q = M^T P`. `Q` starts from `warm_start` when its shape matches,
/// otherwise from i.i.d. standard Gaussians drawn from `rng`.
pub fn lowrank_factorize(
    input: &GradientVector,
    rank: usize,
    iterations: usize,
    warm_start: Option<&[Matrix]>,
    rng: &mut RngStream,
) -> Result<LowRankMessage> {
    if rank == 0 {
        return Err(Error::InvalidParameter("rank must be at least 1".into()));
    }
    if iterations == 0 {
        return Err(Error::InvalidParameter(
            "power iterations must be at least 1".into(),
        ));
    }
    let mut layers = Vec::with_capacity(input.layout().layers().len());
    for li in 0..input.layout().layers().len() {
        let m = matricize(input.layer(li));
        let r = rank.min(m.rows).min(m.cols);
        if r < rank {
            log::warn!(
                "rank {rank} exceeds min dimension of {}x{} layer {li}; clamped to {r}",
                m.rows,
                m.cols
            );
        }
        let mut q = match warm_start.and_then(|w| w.get(li)) {
            Some(prev) if prev.rows == m.cols && prev.cols == r => prev.clone(),
            _ => {
                let data = (0..m.cols * r).map(|_| rng.gaussian()).collect();
                Matrix {
                    rows: m.cols,
                    cols: r,
                    data,
                }
            }
        };
        let mut p = Matrix::zeros(m.rows, r);
        for _ in 0..iterations {
            p = m.matmul(&q);
            orthonormalize(&mut p);
            q = m.t_matmul(&p);
        }
        layers.push(LowRankLayer {
            p,
            q,
            requested_rank: rank,
        });
    }
    Ok(LowRankMessage { layers })
}

pub fn decompress_lowrank(msg: &LowRankMessage, layout: &Arc<Layout>) -> Result<GradientVector> {
    if msg.layers.len() != layout.layers().len() {
        return Err(Error::CorruptMessage(format!(
            "{} low-rank layers for a layout of {}",
            msg.layers.len(),
            layout.layers().len()
        )));
    }
    let mut values = Vec::with_capacity(layout.len());
    for (layer, spec) in msg.layers.iter().zip(layout.layers()) {
        let expected = matrix_shape(spec.size);
        if layer.shape() != expected || layer.q.cols != layer.p.cols {
            return Err(Error::CorruptMessage(format!(
                "layer {} factors have shape {:?}, expected {:?}",
                spec.name,
                layer.shape(),
                expected
            )));
        }
        values.extend(dematricize(&layer.reconstruct(), spec.size));
    }
    GradientVector::new(values, layout.clone()).map_err(|e| Error::CorruptMessage(e.to_string()))
}

/// PowerSGD step with error feedback: factorizes `v + state.residual`,
/// stores the new residual and the right factors as the next warm start.
pub fn powersgd_compress(
    v: &GradientVector,
    rank: usize,
    iterations: usize,
    state: &mut CompressorState,
    rng: &mut RngStream,
) -> Result<(LowRankMessage, GradientVector)> {
    let input = v.add(&state.residual)?;
    let msg = lowrank_factorize(&input, rank, iterations, state.warm_start.as_deref(), rng)?;
    let residual = input.sub(&decompress_lowrank(&msg, input.layout())?)?;
    state.residual = residual.clone();
    state.warm_start = Some(msg.warm_start());
    Ok((msg, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(values: Vec<f64>) -> GradientVector {
        GradientVector::from_values(values).unwrap()
    }

    #[test]
    fn shapes() {
        assert_eq!(matrix_shape(4), (2, 2));
        assert_eq!(matrix_shape(5), (3, 2));
        assert_eq!(matrix_shape(1), (1, 1));
        assert_eq!(matrix_shape(10), (4, 3));
        assert_eq!(matrix_shape(64), (8, 8));
        let m = matricize(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((m.rows(), m.cols()), (3, 2));
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
    }

    proptest! {
        #[test]
        fn matricize_round_trip(values in prop::collection::vec(-1e3f64..1e3, 1..200)) {
            let m = matricize(&values);
            prop_assert!(m.rows() * m.cols() >= values.len());
            prop_assert!(m.rows() * m.cols() - values.len() < m.cols());
            prop_assert_eq!(dematricize(&m, values.len()), values);
        }

        #[test]
        fn p_is_orthonormal(values in prop::collection::vec(-5.0f64..5.0, 4..120), rank in 1usize..6, seed in 0u64..1000) {
            let v = single(values);
            let mut state = CompressorState::new(v.layout().clone());
            let mut rng = RngStream::new(seed, 0);
            for _ in 0..3 {
                let (msg, _) = powersgd_compress(&v, rank, 1, &mut state, &mut rng).unwrap();
                for layer in &msg.layers {
                    prop_assert!(layer.p.orthonormality_error() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn rank_one_input_is_recovered() {
        let p = [1.0, -2.0, 0.5, 3.0];
        let q = [0.25, 1.0, -1.5, 2.0];
        let values: Vec<f64> = p
            .iter()
            .flat_map(|a| q.iter().map(move |b| a * b))
            .collect();
        let v = single(values);
        let mut rng = RngStream::new(1, 1);
        let msg = lowrank_factorize(&v, 1, 2, None, &mut rng).unwrap();
        let back = decompress_lowrank(&msg, v.layout()).unwrap();
        let err = back.distance_sq(&v).unwrap().sqrt();
        assert!(err <= 1e-8 * v.norm());
    }

    #[test]
    fn zero_input_gives_zero_message() {
        let v = single(vec![0.0; 9]);
        let mut state = CompressorState::new(v.layout().clone());
        let (msg, residual) =
            powersgd_compress(&v, 2, 1, &mut state, &mut RngStream::new(0, 0)).unwrap();
        assert!(decompress_lowrank(&msg, v.layout())
            .unwrap()
            .values()
            .iter()
            .all(|&x| x == 0.0));
        assert!(residual.values().iter().all(|&x| x == 0.0));
        assert!(msg.layers[0].p.orthonormality_error() <= 1e-12);
    }

    #[test]
    fn rank_is_clamped() {
        let v = single(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let msg = lowrank_factorize(&v, 5, 1, None, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(msg.layers[0].rank(), 2);
        assert!(msg.any_rank_clamped());
        // full rank on the padded 3x2 matrix is lossless
        let back = decompress_lowrank(&msg, v.layout()).unwrap();
        assert!(back.distance_sq(&v).unwrap() < 1e-20);
    }

    #[test]
    fn feedback_conserves_input() {
        let v = single((0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect());
        let mut state = CompressorState::new(v.layout().clone());
        let mut rng = RngStream::new(4, 2);
        let mut residual_in = state.residual.clone();
        for _ in 0..4 {
            let (msg, residual) = powersgd_compress(&v, 1, 1, &mut state, &mut rng).unwrap();
            let sum = decompress_lowrank(&msg, v.layout())
                .unwrap()
                .add(&residual)
                .unwrap();
            let expected = v.add(&residual_in).unwrap();
            assert!(sum.distance_sq(&expected).unwrap() < 1e-20);
            residual_in = residual;
        }
    }

    #[test]
    fn rejects_zero_rank() {
        let v = single(vec![1.0; 4]);
        assert!(lowrank_factorize(&v, 0, 1, None, &mut RngStream::new(0, 0)).is_err());
    }
}
