use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::{GradientVector, Layout, SampleBatchGradients};
use crate::rng::RngStream;

/// Ground-truth gradient fixture: every row is the prescribed `g` plus an
/// independent Gaussian perturbation of per-coordinate std `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSpec {
    pub g: GradientVector,
    pub scale: f64,
    pub batch: usize,
}

impl OracleSpec {
    pub fn new(g: GradientVector, scale: f64, batch: usize) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "perturbation scale must be >= 0, got {scale}"
            )));
        }
        if batch == 0 {
            return Err(Error::InvalidParameter(
                "oracle batch size must be >= 1".into(),
            ));
        }
        Ok(Self { g, scale, batch })
    }

    /// `g` with a random direction and norm `g_norm` over `layers` roughly
    /// equal layers of `m` total coordinates.
    pub fn random_direction(
        m: usize,
        layers: usize,
        g_norm: f64,
        scale: f64,
        batch: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let layout = Arc::new(split_layout(m, layers)?);
        let dir: Vec<f64> = (0..m).map(|_| rng.gaussian()).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let g = GradientVector::new(dir.into_iter().map(|x| x / norm * g_norm).collect(), layout)?;
        Self::new(g, scale, batch)
    }

    pub fn layout(&self) -> &Arc<Layout> {
        self.g.layout()
    }
}

/// `layers` contiguous layers named `layer0`, `layer1`, ... whose sizes
/// differ by at most one.
pub fn split_layout(m: usize, layers: usize) -> Result<Layout> {
    if layers == 0 || layers > m {
        return Err(Error::InvalidParameter(format!(
            "cannot split {m} coordinates into {layers} layers"
        )));
    }
    Layout::new((0..layers).map(|i| {
        (
            format!("layer{i}"),
            m / layers + usize::from(i < m % layers),
        )
    }))
}

#[derive(Debug, Clone)]
pub struct OracleStream {
    spec: OracleSpec,
    rng: RngStream,
}

impl OracleStream {
    pub fn new(spec: OracleSpec, rng: RngStream) -> Self {
        Self { spec, rng }
    }

    pub fn true_gradient(&self) -> &GradientVector {
        &self.spec.g
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn next_batch(&mut self) -> SampleBatchGradients {
        let g = &self.spec.g;
        let rows = (0..self.spec.batch)
            .map(|_| {
                let values = g
                    .values()
                    .iter()
                    .map(|x| {
                        if self.spec.scale == 0.0 {
                            *x
                        } else {
                            x + self.spec.scale * self.rng.gaussian()
                        }
                    })
                    .collect();
                GradientVector::from_parts_unchecked(values, g.layout().clone())
            })
            .collect();
        SampleBatchGradients::new(rows).expect("rows share the oracle layout")
    }
}

impl Iterator for OracleStream {
    type Item = SampleBatchGradients;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

pub fn oracle_stream(spec: &OracleSpec, steps: usize, rng: RngStream) -> Vec<SampleBatchGradients> {
    OracleStream::new(spec.clone(), rng).take(steps).collect()
}
