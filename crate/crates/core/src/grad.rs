//! Layered gradient vectors and the geometric primitives used throughout:
//! L2 norm, projection onto the ball of radius `C`, and batch averaging.
//!
//! A [`GradientVector`] is a flat `f64` array partitioned into named layers.
//! Clipping always acts on the whole concatenated vector; the per-layer
//! partition is only consulted by the compressors.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub size: usize,
    pub offset: usize,
}

/// Ordered, contiguous partition of `0..len` into layers.
///
/// Equality is structural: two layouts with the same names, sizes and
/// offsets compare equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    layers: Vec<LayerSpec>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(layers: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut specs = Vec::new();
        let mut offset = 0;
        for (name, size) in layers {
            let name = name.into();
            if size == 0 {
                return Err(Error::InvalidParameter(format!(
                    "layer {name:?} has size 0"
                )));
            }
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidParameter(format!(
                    "layer name {name:?} must be a non-empty identifier"
                )));
            }
            specs.push(LayerSpec { name, size, offset });
            offset += size;
        }
        if specs.is_empty() {
            return Err(Error::InvalidParameter(
                "layout needs at least one layer".into(),
            ));
        }
        Ok(Self {
            layers: specs,
            len: offset,
        })
    }

    /// A layout with one layer holding all `len` coordinates.
    pub fn single(name: &str, len: usize) -> Result<Self> {
        Self::new([(name, len)])
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Total coordinate count `m`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {} coordinates",
                values.len(),
                layout.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("coordinate {i} is not finite")));
        }
        Ok(Self { values, layout })
    }

    /// Convenience constructor with a single layer named `"all"`.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let layout = Arc::new(Layout::single("all", values.len())?);
        Self::new(values, layout)
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub(crate) fn from_parts_unchecked(values: Vec<f64>, layout: Arc<Layout>) -> Self {
        debug_assert_eq!(values.len(), layout.len());
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, index: usize) -> &[f64] {
        let spec = &self.layout.layers()[index];
        &self.values[spec.offset..spec.offset + spec.size]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        norm_of(&self.values)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum()
    }

    pub fn check_layout(&self, other: &GradientVector) -> Result<()> {
        if Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout {
            Ok(())
        } else {
            Err(Error::Layout("gradient layouts differ".into()))
        }
    }

    pub fn scale(&self, factor: f64) -> GradientVector {
        let values = self.values.iter().map(|x| x * factor).collect();
        Self::from_parts_unchecked(values, self.layout.clone())
    }

    pub fn add(&self, other: &GradientVector) -> Result<GradientVector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GradientVector) -> Result<GradientVector> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + factor * other`
    pub fn add_scaled(&self, other: &GradientVector, factor: f64) -> Result<GradientVector> {
        self.zip_with(other, |a, b| a + factor * b)
    }

    pub fn distance_sq(&self, other: &GradientVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn zip_with(
        &self,
        other: &GradientVector,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<GradientVector> {
        self.check_layout(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts_unchecked(values, self.layout.clone()))
    }
}

fn norm_of(values: &[f64]) -> f64 {
    values.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Euclidean norm, rejecting vectors that picked up non-finite coordinates.
pub fn l2_norm(v: &GradientVector) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::InvalidInput(
            "non-finite coordinate in l2_norm".into(),
        ));
    }
    Ok(v.norm())
}

/// Projects `v` onto the closed ball of radius `radius` centred at the origin.
///
/// The scale factor is stepped down by single ulps until the computed norm
/// of the result is at most `radius`, which makes the projection exactly
/// idempotent under floating point.
pub fn sphere_project(v: &GradientVector, radius: f64) -> Result<GradientVector> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "clip radius must be positive and finite, got {radius}"
        )));
    }
    Ok(project_values(&v.values, radius)
        .map(|values| GradientVector::from_parts_unchecked(values, v.layout.clone()))
        .unwrap_or_else(|| v.clone()))
}

/// `None` when `values` already lies inside the ball.
pub(crate) fn project_values(values: &[f64], radius: f64) -> Option<Vec<f64>> {
    let norm = norm_of(values);
    if norm <= radius {
        return None;
    }
    let mut factor = radius / norm;
    loop {
        let scaled: Vec<f64> = values.iter().map(|x| x * factor).collect();
        if norm_of(&scaled) <= radius {
            return Some(scaled);
        }
        factor = f64::from_bits(factor.to_bits() - 1);
    }
}

/// B per-sample gradients sharing a single layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatchGradients {
    rows: Vec<GradientVector>,
}

impl SampleBatchGradients {
    pub fn new(rows: Vec<GradientVector>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidParameter("batch needs at least one row".into()))?;
        for (i, row) in rows.iter().enumerate().skip(1) {
            first
                .check_layout(row)
                .map_err(|_| Error::Layout(format!("row {i} layout differs from row 0")))?;
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[GradientVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.rows[0].layout()
    }

    pub fn dim(&self) -> usize {
        self.layout().len()
    }

    /// Per-row Euclidean norms.
    pub fn row_norms(&self) -> Vec<f64> {
        self.rows.iter().map(GradientVector::norm).collect()
    }

    pub fn map_rows(&self, f: impl FnMut(&GradientVector) -> GradientVector) -> Self {
        Self {
            rows: self.rows.iter().map(f).collect(),
        }
    }
}

/// Coordinate-wise mean of the rows.
pub fn mean_gradient(batch: &SampleBatchGradients) -> GradientVector {
    mean_of(batch.rows())
}

pub(crate) fn mean_of(rows: &[GradientVector]) -> GradientVector {
    let layout = rows[0].layout().clone();
    let mut acc = vec![0.0; layout.len()];
    for row in rows {
        for (a, x) in acc.iter_mut().zip(row.values()) {
            *a += x;
        }
    }
    let n = rows.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    GradientVector::from_parts_unchecked(acc, layout)
}
