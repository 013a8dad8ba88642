//! Monte Carlo gradient-error estimation.
//!
//! For an estimator `F` of the batch-average gradient `g`, `n` independent
//! draws `g_i = F(batch)` give
//!
//! - `mse      = 1/n sum |g_i - g|^2`
//! - `bias_sq  = |mean(g_i) - g|^2`
//! - `variance = 1/n sum |g_i - mean(g_i)|^2`
//!
//! All three moments use the same draws and the `1/n` normalization, so
//! `mse = bias_sq + variance` is an algebraic identity rather than a
//! large-`n` approximation.

use std::fmt;

use rayon::prelude::*;

use crate::compress::{Compressor, CompressorKind};
use crate::dp::{privatize_batch, NoisePlacement, PrivacyParams};
use crate::error::{Error, Result};
use crate::grad::{mean_gradient, sphere_project, GradientVector, SampleBatchGradients};
use crate::rng::RngStream;

type EstimatorFn<'a> =
    dyn Fn(&SampleBatchGradients, &mut RngStream) -> Result<GradientVector> + Sync + 'a;

/// A (possibly stochastic) estimator of the batch-average gradient.
/// Stochastic estimators must draw only from the stream they are handed.
pub struct EstimatorMechanism<'a> {
    label: String,
    f: Box<EstimatorFn<'a>>,
}

impl<'a> EstimatorMechanism<'a> {
    pub fn new(
        label: impl Into<String>,
        f: impl Fn(&SampleBatchGradients, &mut RngStream) -> Result<GradientVector> + Sync + 'a,
    ) -> Self {
        Self {
            label: label.into(),
            f: Box::new(f),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn apply(
        &self,
        batch: &SampleBatchGradients,
        rng: &mut RngStream,
    ) -> Result<GradientVector> {
        (self.f)(batch, rng)
    }
}

impl fmt::Debug for EstimatorMechanism<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatorMechanism")
            .field("label", &self.label)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorReport {
    pub mse: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub n: usize,
}

impl ErrorReport {
    /// `|mse - (bias_sq + variance)|` relative to `mse`.
    pub fn identity_gap(&self) -> f64 {
        let gap = (self.mse - (self.bias_sq + self.variance)).abs();
        if self.mse == 0.0 {
            gap
        } else {
            gap / self.mse
        }
    }
}

/// Moments of `estimates` around `target`.
pub fn summarize(estimates: &[GradientVector], target: &GradientVector) -> Result<ErrorReport> {
    let n = estimates.len();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 trials, got {n}"
        )));
    }
    for e in estimates {
        target.check_layout(e)?;
    }
    let m = target.len();
    let nf = n as f64;
    // mean as an offset from the first draw, so identical draws give a
    // mean equal to that draw and a variance of exactly zero
    let anchor = estimates[0].values();
    let mut offset = vec![0.0; m];
    for e in estimates {
        for ((acc, x), a) in offset.iter_mut().zip(e.values()).zip(anchor) {
            *acc += x - a;
        }
    }
    let mean: Vec<f64> = offset.iter().zip(anchor).map(|(d, a)| a + d / nf).collect();
    let mut mse = 0.0;
    let mut variance = 0.0;
    for e in estimates {
        let (mut to_target, mut to_mean) = (0.0, 0.0);
        for ((x, t), mu) in e.values().iter().zip(target.values()).zip(&mean) {
            to_target += (x - t) * (x - t);
            to_mean += (x - mu) * (x - mu);
        }
        mse += to_target;
        variance += to_mean;
    }
    let bias_sq = mean
        .iter()
        .zip(target.values())
        .map(|(mu, t)| (mu - t) * (mu - t))
        .sum();
    Ok(ErrorReport {
        mse: mse / nf,
        bias_sq,
        variance: variance / nf,
        n,
    })
}

/// Draws `n` estimates, trial `i` on `rng.fork(i)`, and returns them in
/// trial order. Trials run in parallel; the result does not depend on
/// scheduling.
pub fn draw_estimates(
    mechanism: &EstimatorMechanism<'_>,
    batch: &SampleBatchGradients,
    n: usize,
    rng: &RngStream,
) -> Result<Vec<GradientVector>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| mechanism.apply(batch, &mut rng.fork(i)))
        .collect()
}

/// MSE of `mechanism` against the clean batch mean, split into squared
/// bias and variance.
pub fn estimate_mse(
    mechanism: &EstimatorMechanism<'_>,
    batch: &SampleBatchGradients,
    n: usize,
    rng: &RngStream,
) -> Result<ErrorReport> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 trials, got {n}"
        )));
    }
    let target = mean_gradient(batch);
    summarize(&draw_estimates(mechanism, batch, n, rng)?, &target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Clip,
    ClipNoise,
    ClipNoiseCompress,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Clip, Stage::ClipNoise, Stage::ClipNoiseCompress];

    pub fn label(self) -> &'static str {
        match self {
            Stage::Clip => "clip",
            Stage::ClipNoise => "clip+noise",
            Stage::ClipNoiseCompress => "clip+noise+compress",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageBreakdown {
    pub stages: Vec<(Stage, ErrorReport)>,
}

impl StageBreakdown {
    pub fn get(&self, stage: Stage) -> &ErrorReport {
        &self
            .stages
            .iter()
            .find(|(s, _)| *s == stage)
            .expect("every stage is present")
            .1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,mse,bias_sq,variance,n\n");
        for (stage, r) in &self.stages {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{}\n",
                stage, r.mse, r.bias_sq, r.variance, r.n
            ));
        }
        out
    }
}

/// Gradient error after clipping, after noising and after compression.
///
/// Every stage is measured against the clean batch mean. Trial `i` uses
/// the same stream for stages 2 and 3, so stage 3 compresses exactly the
/// privatized estimate seen by stage 2; each trial's compressor starts with
/// a zero residual and no warm start.
pub fn stage_breakdown(
    params: &PrivacyParams,
    placement: NoisePlacement,
    compressor: CompressorKind,
    batch: &SampleBatchGradients,
    n: usize,
    rng: &RngStream,
) -> Result<StageBreakdown> {
    compressor.validate()?;
    let radius = params.clip_radius();
    let layout = batch.layout().clone();
    let clip = EstimatorMechanism::new(Stage::Clip.label(), move |b, _| {
        Ok(mean_gradient(&b.map_rows(|r| {
            sphere_project(r, radius).expect("radius validated")
        })))
    });
    let noise = EstimatorMechanism::new(Stage::ClipNoise.label(), |b, rng| {
        Ok(privatize_batch(b, params, placement, rng))
    });
    let compress = EstimatorMechanism::new(Stage::ClipNoiseCompress.label(), move |b, rng| {
        let private = privatize_batch(b, params, placement, rng);
        let fresh = Compressor::new(compressor, layout.clone())?;
        Ok(fresh.compress_once(&private, rng)?.reconstruction)
    });
    let stages = [
        (Stage::Clip, clip),
        (Stage::ClipNoise, noise),
        (Stage::ClipNoiseCompress, compress),
    ]
    .into_iter()
    .map(|(stage, mech)| Ok((stage, estimate_mse(&mech, batch, n, rng)?)))
    .collect::<Result<Vec<_>>>()?;
    Ok(StageBreakdown { stages })
}
