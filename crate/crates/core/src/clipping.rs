//! The approximate gradient-error model as a function of the clip radius,
//! its closed-form minimizer, and empirical sweeps to compare against.
//!
//! With `g = |grad|`, `m` parameters and noise multiplier `sigma`:
//!
//! ```text
//! approx_error(C)      = max(0, g - C)^2 + m C^2 sigma^2
//! differentiable(C)    = (g - C)^2       + m C^2 sigma^2
//! C*                   = g / (1 + m sigma^2)
//! ```

use std::fmt;
use std::str::FromStr;

use crate::compress::{Compressor, CompressorKind};
use crate::dp::{privatize_batch, NoisePlacement, PrivacyParams};
use crate::error::{Error, Result};
use crate::error_analysis::{estimate_mse, ErrorReport, EstimatorMechanism};
use crate::grad::{mean_gradient, SampleBatchGradients};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippingModelInputs {
    pub g_norm: f64,
    pub m: usize,
    pub sigma: f64,
}

impl ClippingModelInputs {
    pub fn new(g_norm: f64, m: usize, sigma: f64) -> Result<Self> {
        if !(g_norm >= 0.0) || !g_norm.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gradient norm must be >= 0, got {g_norm}"
            )));
        }
        if m == 0 {
            return Err(Error::InvalidParameter(
                "parameter count must be >= 1".into(),
            ));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        Ok(Self { g_norm, m, sigma })
    }

    fn noise_coefficient(&self) -> f64 {
        self.m as f64 * self.sigma * self.sigma
    }
}

pub fn approx_error(c: f64, inputs: &ClippingModelInputs) -> f64 {
    let shortfall = (inputs.g_norm - c).max(0.0);
    shortfall * shortfall + inputs.noise_coefficient() * c * c
}

pub fn differentiable_approx_error(c: f64, inputs: &ClippingModelInputs) -> f64 {
    let d = inputs.g_norm - c;
    d * d + inputs.noise_coefficient() * c * c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalClipping {
    pub c_star: f64,
    /// Set when `g_norm = 0`, where the model has no meaningful radius.
    pub degenerate: bool,
}

pub fn optimal_clipping(inputs: &ClippingModelInputs) -> OptimalClipping {
    if inputs.g_norm == 0.0 {
        return OptimalClipping {
            c_star: 0.0,
            degenerate: true,
        };
    }
    OptimalClipping {
        c_star: inputs.g_norm / (1.0 + inputs.noise_coefficient()),
        degenerate: false,
    }
}

/// How `g_norm` is estimated from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormEstimator {
    /// Median of the per-sample gradient norms.
    #[default]
    Median,
    /// Norm of the batch-average gradient.
    MeanNorm,
}

impl NormEstimator {
    pub fn estimate(self, batch: &SampleBatchGradients) -> f64 {
        match self {
            NormEstimator::Median => median(&batch.row_norms()),
            NormEstimator::MeanNorm => mean_gradient(batch).norm(),
        }
    }
}

impl FromStr for NormEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Self::Median),
            "mean-norm" => Ok(Self::MeanNorm),
            other => Err(Error::Config(format!(
                "norm estimator must be median or mean-norm, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for NormEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormEstimator::Median => "median",
            NormEstimator::MeanNorm => "mean-norm",
        })
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || points < 2 {
        return Err(Error::InvalidParameter(format!(
            "log grid needs 0 < lo < hi and at least 2 points, got {lo}:{hi}:{points}"
        )));
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub c: f64,
    pub empirical: ErrorReport,
    pub model_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClippingSweep {
    pub points: Vec<SweepPoint>,
    pub inputs: ClippingModelInputs,
    pub optimum: OptimalClipping,
}

impl ClippingSweep {
    /// Grid radius with the smallest empirical MSE.
    pub fn empirical_argmin(&self) -> f64 {
        self.points
            .iter()
            .min_by(|a, b| a.empirical.mse.total_cmp(&b.empirical.mse))
            .map(|p| p.c)
            .expect("sweep grid is nonempty")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("C,empirical_mse,model_error\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:e},{:e},{:e}\n",
                p.c, p.empirical.mse, p.model_error
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub sigma: f64,
    pub delta: f64,
    pub placement: NoisePlacement,
    pub compressor: Option<CompressorKind>,
    pub trials: usize,
    pub g_norm: f64,
}

/// Empirical MSE of the clip+noise (optionally +compress) mechanism at
/// every radius in `grid`, alongside the model curve and its minimizer.
pub fn sweep_empirical(
    batch: &SampleBatchGradients,
    grid: &[f64],
    cfg: &SweepConfig,
    rng: &RngStream,
) -> Result<ClippingSweep> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "clip grid must be nonempty and strictly increasing".into(),
        ));
    }
    if cfg.trials < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 trials, got {}",
            cfg.trials
        )));
    }
    if let Some(kind) = cfg.compressor {
        kind.validate()?;
    }
    let inputs = ClippingModelInputs::new(cfg.g_norm, batch.dim(), cfg.sigma)?;
    let layout = batch.layout().clone();
    let mut points = Vec::with_capacity(grid.len());
    for (i, &c) in grid.iter().enumerate() {
        let params = PrivacyParams::new(c, cfg.sigma, cfg.delta)?;
        let layout = layout.clone();
        let mech = EstimatorMechanism::new("clip+noise", move |b, rng| {
            let private = privatize_batch(b, &params, cfg.placement, rng);
            match cfg.compressor {
                None => Ok(private),
                Some(kind) => Ok(Compressor::new(kind, layout.clone())?
                    .compress_once(&private, rng)?
                    .reconstruction),
            }
        });
        let empirical = estimate_mse(&mech, batch, cfg.trials, &rng.fork(i as u64))?;
        points.push(SweepPoint {
            c,
            empirical,
            model_error: approx_error(c, &inputs),
        });
    }
    Ok(ClippingSweep {
        points,
        inputs,
        optimum: optimal_clipping(&inputs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::GradientVector;
    use proptest::prelude::*;

    fn inputs(g: f64, m: usize, s: f64) -> ClippingModelInputs {
        ClippingModelInputs::new(g, m, s).unwrap()
    }

    #[test]
    fn approx_error_examples() {
        assert_eq!(approx_error(3.0, &inputs(3.0, 10, 0.0)), 0.0);
        assert_eq!(approx_error(0.0, &inputs(3.0, 10, 0.7)), 9.0);
        assert_eq!(approx_error(1.0, &inputs(3.0, 4, 0.5)), 5.0);
        // clamp: no shortfall above g_norm
        assert_eq!(approx_error(5.0, &inputs(3.0, 4, 0.0)), 0.0);
    }

    #[test]
    fn differentiable_examples() {
        let i = inputs(3.0, 4, 0.5);
        for c in [0.0, 1.0, 2.5, 3.0] {
            assert_eq!(differentiable_approx_error(c, &i), approx_error(c, &i));
        }
        assert_eq!(differentiable_approx_error(3.0, &i), 4.0 * 9.0 * 0.25);
        let (a, b, c) = (
            differentiable_approx_error(1.0, &i),
            differentiable_approx_error(2.0, &i),
            differentiable_approx_error(3.0, &i),
        );
        assert!(a - 2.0 * b + c > 0.0);
    }

    #[test]
    fn optimum_examples() {
        assert_eq!(optimal_clipping(&inputs(3.0, 100, 0.0)).c_star, 3.0);
        assert_eq!(optimal_clipping(&inputs(3.0, 4, 0.5)).c_star, 1.5);
        let degenerate = optimal_clipping(&inputs(0.0, 4, 0.5));
        assert!(degenerate.degenerate);
        assert_eq!(degenerate.c_star, 0.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.01, 100.0, 5).unwrap();
        assert!((g[0] - 0.01).abs() < 1e-15);
        assert!((g[2] - 1.0).abs() < 1e-12);
        assert!((g[4] - 100.0).abs() < 1e-9);
        assert!(log_grid(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn noiseless_sweep_above_row_norms_is_flat_zero() {
        let rows = vec![
            GradientVector::from_values(vec![1.0, 0.0]).unwrap(),
            GradientVector::from_values(vec![0.0, -2.0]).unwrap(),
        ];
        let batch = SampleBatchGradients::new(rows).unwrap();
        let cfg = SweepConfig {
            sigma: 0.0,
            delta: 1e-5,
            placement: NoisePlacement::PerSample,
            compressor: None,
            trials: 3,
            g_norm: NormEstimator::MeanNorm.estimate(&batch),
        };
        let sweep = sweep_empirical(
            &batch,
            &log_grid(2.5, 50.0, 6).unwrap(),
            &cfg,
            &RngStream::new(0, 0),
        )
        .unwrap();
        assert!(sweep.points.iter().all(|p| p.empirical.mse == 0.0));
        assert!(sweep.to_csv().starts_with("C,empirical_mse,model_error\n"));
        assert!(sweep_empirical(&batch, &[2.0, 1.0], &cfg, &RngStream::new(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn model_self_consistency(g in 0.1f64..100.0, m in 1usize..5000, s in 0.01f64..2.0, c in 0.0f64..200.0) {
            let i = inputs(g, m, s);
            let opt = optimal_clipping(&i).c_star;
            prop_assert!(opt <= g);
            prop_assert!(approx_error(opt, &i) <= approx_error(c, &i) * (1.0 + 1e-12));
            let gap = differentiable_approx_error(c, &i) - approx_error(c, &i);
            prop_assert!(gap >= 0.0);
            if c <= g { prop_assert_eq!(gap, 0.0); } else { prop_assert!(gap > 0.0); }
        }

        #[test]
        fn optimum_decreases_in_m_and_sigma(g in 0.1f64..100.0, m in 1usize..5000, s in 0.01f64..2.0) {
            let base = optimal_clipping(&inputs(g, m, s)).c_star;
            prop_assert!(optimal_clipping(&inputs(g, m + 1, s)).c_star < base);
            prop_assert!(optimal_clipping(&inputs(g, m, s * 1.01)).c_star < base);
        }
    }
}
