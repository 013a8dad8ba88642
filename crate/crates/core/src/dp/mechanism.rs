use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grad::{mean_of, project_values, GradientVector, SampleBatchGradients};
use crate::rng::RngStream;

/// Clip radius `C`, noise multiplier `sigma` and target `delta`.
///
/// Noise is Gaussian with per-coordinate standard deviation `sigma * C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    clip_radius: f64,
    noise_multiplier: f64,
    delta: f64,
}

impl PrivacyParams {
    pub fn new(clip_radius: f64, noise_multiplier: f64, delta: f64) -> Result<Self> {
        if !(clip_radius > 0.0) || !clip_radius.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "clip radius must be positive and finite, got {clip_radius}"
            )));
        }
        if !(noise_multiplier >= 0.0) || !noise_multiplier.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise multiplier must be nonnegative, got {noise_multiplier}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        Ok(Self {
            clip_radius,
            noise_multiplier,
            delta,
        })
    }

    pub fn clip_radius(&self) -> f64 {
        self.clip_radius
    }

    pub fn noise_multiplier(&self) -> f64 {
        self.noise_multiplier
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_radius
    }

    pub fn with_clip_radius(&self, clip_radius: f64) -> Result<Self> {
        Self::new(clip_radius, self.noise_multiplier, self.delta)
    }
}

/// Where Gaussian noise enters the batch average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoisePlacement {
    /// Every clipped row gets its own noise draw, then rows are averaged.
    #[default]
    PerSample,
    /// One noise draw on the sum of clipped rows (classic DPSGD).
    OnSum,
}

impl FromStr for NoisePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(Self::PerSample),
            "on_sum" => Ok(Self::OnSum),
            other => Err(Error::Config(format!(
                "noise placement must be per_sample or on_sum, got {other:?}"
            ))),
        }
    }
}

fn add_noise(values: &mut [f64], std: f64, rng: &mut RngStream) {
    for x in values {
        *x += std * rng.gaussian();
    }
}

/// Clips each row to the ball of radius `C` and adds independent noise to
/// each clipped row. With `sigma = 0` no draws are taken.
pub fn clip_and_noise_rows(
    batch: &SampleBatchGradients,
    params: &PrivacyParams,
    rng: &mut RngStream,
) -> Vec<GradientVector> {
    let std = params.noise_std();
    batch
        .rows()
        .iter()
        .map(|row| {
            let mut values = project_values(row.values(), params.clip_radius)
                .unwrap_or_else(|| row.values().to_vec());
            if std > 0.0 {
                add_noise(&mut values, std, rng);
            }
            GradientVector::from_parts_unchecked(values, row.layout().clone())
        })
        .collect()
}

/// Gaussian mechanism applied to a batch of per-sample gradients, returning
/// the privatized batch average.
pub fn privatize_batch(
    batch: &SampleBatchGradients,
    params: &PrivacyParams,
    placement: NoisePlacement,
    rng: &mut RngStream,
) -> GradientVector {
    match placement {
        NoisePlacement::PerSample => mean_of(&clip_and_noise_rows(batch, params, rng)),
        NoisePlacement::OnSum => {
            let noiseless = PrivacyParams {
                noise_multiplier: 0.0,
                ..*params
            };
            let clipped = clip_and_noise_rows(batch, &noiseless, rng);
            let mean = mean_of(&clipped);
            let std = params.noise_std();
            if std == 0.0 {
                return mean;
            }
            // noise of std sigma*C on the sum is std sigma*C/B on the mean
            let b = batch.len() as f64;
            let mut values = mean.into_values();
            add_noise(&mut values, std / b, rng);
            GradientVector::from_parts_unchecked(values, batch.layout().clone())
        }
    }
}
