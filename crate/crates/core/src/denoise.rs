//! Denoise: temporal averaging between the DP mechanism and the compressor.
//!
//! Sender and receiver each keep a velocity (an exponential moving average
//! of privatized batch gradients). Every step the sender compresses both
//! its velocity and the acceleration `v_sender - v_receiver`, each with the
//! decayed residual `gamma * r` added back, and transmits whichever leaves
//! the smaller residual, tagged with a one-bit flag. Noised per-sample
//! gradients are clipped a second time before averaging.

use std::str::FromStr;

use crate::compress::{decompress, Compressed, Compressor, Message};
use crate::dp::{clip_and_noise_rows, PrivacyParams};
use crate::error::{Error, Result};
use crate::grad::{mean_of, sphere_project, GradientVector, Layout, SampleBatchGradients};
use crate::rng::RngStream;
use std::sync::Arc;

/// Which candidate wins when both residual norms are equal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    Velocity,
    Acceleration,
}

impl FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "velocity" => Ok(Self::Velocity),
            "acceleration" => Ok(Self::Acceleration),
            other => Err(Error::Config(format!(
                "tie break must be velocity or acceleration, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseConfig {
    beta: f64,
    gamma: f64,
    privacy: PrivacyParams,
    tie_break: TieBreak,
}

impl DenoiseConfig {
    pub fn new(beta: f64, gamma: f64, privacy: PrivacyParams, tie_break: TieBreak) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        Ok(Self {
            beta,
            gamma,
            privacy,
            tie_break,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn privacy(&self) -> &PrivacyParams {
        &self.privacy
    }

    pub fn tie_break(&self) -> TieBreak {
        self.tie_break
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseState {
    pub v_sender: GradientVector,
    pub v_receiver: GradientVector,
    pub residual: GradientVector,
}

impl DenoiseState {
    pub fn new(layout: Arc<Layout>) -> Self {
        Self {
            v_sender: GradientVector::zeros(layout.clone()),
            v_receiver: GradientVector::zeros(layout.clone()),
            residual: GradientVector::zeros(layout),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageFlag {
    Velocity,
    Acceleration,
}

impl MessageFlag {
    pub fn label(self) -> &'static str {
        match self {
            MessageFlag::Velocity => "velocity",
            MessageFlag::Acceleration => "acceleration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseMessage {
    pub flag: MessageFlag,
    pub payload: Message,
}

/// Everything a step produced, for logging and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseStep {
    pub message: DenoiseMessage,
    pub residual_norm_v: f64,
    pub residual_norm_a: f64,
    pub bytes: u64,
}

/// Receiver update: a velocity payload replaces the receiver's velocity,
/// an acceleration payload is added to it.
pub fn receiver_apply(msg: &DenoiseMessage, v_receiver: &GradientVector) -> Result<GradientVector> {
    let payload = decompress(&msg.payload, v_receiver.layout())?;
    v_receiver.check_layout(&payload)?;
    match msg.flag {
        MessageFlag::Velocity => Ok(payload),
        MessageFlag::Acceleration => v_receiver.add(&payload),
    }
}

/// Per-sample clip and noise, then a second clip of every noised sample to
/// the same radius.
pub fn doubly_clipped_rows(
    batch: &SampleBatchGradients,
    privacy: &PrivacyParams,
    rng: &mut RngStream,
) -> Vec<GradientVector> {
    clip_and_noise_rows(batch, privacy, rng)
        .iter()
        .map(|row| sphere_project(row, privacy.clip_radius()).expect("radius validated"))
        .collect()
}

/// One Denoise round. On error `state` and `compressor` are left as they
/// were.
pub fn denoise_step(
    batch: &SampleBatchGradients,
    cfg: &DenoiseConfig,
    state: &mut DenoiseState,
    compressor: &mut Compressor,
    rng: &mut RngStream,
) -> Result<DenoiseStep> {
    state.v_sender.check_layout(&batch.rows()[0])?;
    let rows = doubly_clipped_rows(batch, &cfg.privacy, rng);
    let mean = mean_of(&rows);

    let v_sender = state
        .v_sender
        .scale(cfg.beta)
        .add_scaled(&mean, 1.0 - cfg.beta)?;
    let acceleration = v_sender.sub(&state.v_receiver)?;

    let velocity_in = v_sender.add_scaled(&state.residual, cfg.gamma)?;
    let acceleration_in = acceleration.add_scaled(&state.residual, cfg.gamma)?;
    // both candidates see the same random initialization
    let mut rng_a = rng.clone();
    let velocity: Compressed = compressor.compress_once(&velocity_in, rng)?;
    let accel: Compressed = compressor.compress_once(&acceleration_in, &mut rng_a)?;

    let residual_norm_v = velocity.residual.norm();
    let residual_norm_a = accel.residual.norm();
    let pick_velocity = match cfg.tie_break {
        TieBreak::Velocity => residual_norm_v <= residual_norm_a,
        TieBreak::Acceleration => residual_norm_v < residual_norm_a,
    };
    let (flag, chosen) = if pick_velocity {
        (MessageFlag::Velocity, velocity)
    } else {
        (MessageFlag::Acceleration, accel)
    };
    let v_receiver = match flag {
        MessageFlag::Velocity => chosen.reconstruction.clone(),
        MessageFlag::Acceleration => state.v_receiver.add(&chosen.reconstruction)?,
    };
    if !v_receiver.is_finite() || !v_sender.is_finite() {
        return Err(Error::Numeric { sample: 0 });
    }

    compressor.commit_warm_start(&chosen);
    let bytes = chosen.bytes();
    state.v_sender = v_sender;
    state.v_receiver = v_receiver;
    state.residual = chosen.residual;
    Ok(DenoiseStep {
        message: DenoiseMessage {
            flag,
            payload: chosen.message,
        },
        residual_norm_v,
        residual_norm_a,
        bytes,
    })
}
