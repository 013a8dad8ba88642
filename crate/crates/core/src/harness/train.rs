use crate::clipping::median;
use crate::compress::{Compressor, CompressorKind};
use crate::denoise::{denoise_step, DenoiseConfig, DenoiseState, TieBreak};
use crate::dp::{
    privatize_batch, Accountant, NoisePlacement, OrderGrid, PrivacyParams, PrivacySpend,
};
use crate::error::{Error, Result};
use crate::grad::{mean_gradient, GradientVector};
use crate::harness::model::{per_sample_gradients, ModelSpec};
use crate::harness::task::TaskSpec;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipSetting {
    Fixed(f64),
    /// Median per-sample gradient norm of the first minibatch.
    MedianAtStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySettings {
    pub sigma: f64,
    pub clip: ClipSetting,
    /// `None` picks `1 / n_train`.
    pub delta: Option<f64>,
    pub placement: NoisePlacement,
    pub orders: OrderGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseSettings {
    pub beta: f64,
    pub gamma: f64,
    pub tie_break: TieBreak,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// `None` trains on the raw batch mean.
    pub privacy: Option<PrivacySettings>,
    pub compressor: CompressorKind,
    /// Requires `privacy`, whose clip radius the second clipping reuses.
    pub denoise: Option<DenoiseSettings>,
}

impl PipelineConfig {
    pub fn identity() -> Self {
        Self {
            privacy: None,
            compressor: CompressorKind::None,
            denoise: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-epoch metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epoch_accuracy: Vec<f64>,
    /// Upstream bytes sent up to the end of each epoch.
    pub cumulative_bytes: Vec<u64>,
    /// Upstream bytes of every step.
    pub step_bytes: Vec<u64>,
    pub privacy_trace: Vec<PrivacySpend>,
    pub final_accuracy: f64,
    /// Training stopped on a non-finite loss or parameter.
    pub aborted: bool,
}

impl RunRecord {
    pub fn total_bytes(&self) -> u64 {
        self.cumulative_bytes.last().copied().unwrap_or(0)
    }

    pub fn final_epsilon(&self) -> f64 {
        self.privacy_trace.last().map(|s| s.epsilon).unwrap_or(0.0)
    }
}

/// Values chosen during the run rather than configured.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub clip_radius: Option<f64>,
    pub delta: f64,
    pub param_count: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRun {
    pub record: RunRecord,
    pub meta: RunMeta,
}

/// Mean of the last `min(10, epochs)` per-epoch accuracies.
pub fn final_accuracy(epoch_accuracy: &[f64]) -> f64 {
    let tail = &epoch_accuracy[epoch_accuracy.len().saturating_sub(10)..];
    if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

enum Sender {
    Plain {
        compressor: Compressor,
    },
    Denoise {
        cfg: DenoiseConfig,
        state: DenoiseState,
        compressor: Compressor,
    },
}

/// Minibatch SGD where each step's per-sample gradients pass through the
/// configured pipeline before the update.
pub fn run_training(
    task: &TaskSpec,
    model: &ModelSpec,
    pipeline: &PipelineConfig,
    train: &TrainConfig,
) -> Result<TrainingRun> {
    if train.batch_size == 0 || !(train.lr > 0.0) {
        return Err(Error::Config(
            "batch size must be >= 1 and learning rate > 0".into(),
        ));
    }
    if pipeline.denoise.is_some() && pipeline.privacy.is_none() {
        return Err(Error::Config(
            "denoise needs privacy settings for its clip radius".into(),
        ));
    }
    pipeline.compressor.validate()?;
    let (train_set, test_set) = task.generate()?;
    if train_set.dim() != model.input_dim || train_set.classes() != model.classes {
        return Err(Error::Config("model shape does not match the task".into()));
    }

    let root = RngStream::labeled(train.seed, "train");
    let mut params = model.init_params(&mut root.derive("init"));
    let mut shuffle_rng = root.derive("shuffle");
    let pipeline_rng = root.derive("pipeline");

    let delta = pipeline
        .privacy
        .as_ref()
        .and_then(|p| p.delta)
        .unwrap_or(1.0 / train_set.len() as f64);
    let mut accountant = match &pipeline.privacy {
        Some(p) => Some(Accountant::new(p.sigma, delta, p.orders.clone())?),
        None => None,
    };
    let spend = |accountant: &Option<Accountant>, steps: u64| match accountant {
        Some(a) => a.spend(),
        None => PrivacySpend {
            steps,
            epsilon: f64::INFINITY,
            delta,
            alpha: None,
        },
    };

    let mut privacy_params: Option<PrivacyParams> = None;
    let mut sender: Option<Sender> = None;
    let mut record = RunRecord {
        epoch_accuracy: Vec::with_capacity(train.epochs),
        cumulative_bytes: Vec::with_capacity(train.epochs),
        step_bytes: Vec::new(),
        privacy_trace: Vec::with_capacity(train.epochs),
        final_accuracy: 0.0,
        aborted: false,
    };
    let mut total_bytes = 0u64;
    let mut steps = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for _epoch in 0..train.epochs {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(train.batch_size) {
            let samples: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (train_set.x(i), train_set.y(i)))
                .collect();
            let batch = match per_sample_gradients(model, &params, &samples) {
                Ok((batch, loss)) if loss.is_finite() => batch,
                Ok(_) | Err(Error::Numeric { .. }) => {
                    record.aborted = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };

            if privacy_params.is_none() {
                if let Some(p) = &pipeline.privacy {
                    let radius = match p.clip {
                        ClipSetting::Fixed(c) => c,
                        ClipSetting::MedianAtStart => {
                            median(&batch.row_norms()).max(f64::MIN_POSITIVE)
                        }
                    };
                    privacy_params = Some(PrivacyParams::new(radius, p.sigma, delta)?);
                }
            }
            let sender = match &mut sender {
                Some(s) => s,
                None => sender.insert(build_sender(pipeline, model, privacy_params.as_ref())?),
            };

            let mut step_rng = pipeline_rng.fork(steps);
            let (update, bytes) = match sender {
                Sender::Plain { compressor } => {
                    let estimate = match (&privacy_params, &pipeline.privacy) {
                        (Some(pp), Some(p)) => {
                            privatize_batch(&batch, pp, p.placement, &mut step_rng)
                        }
                        _ => mean_gradient(&batch),
                    };
                    let out = compressor.compress_with_feedback(&estimate, &mut step_rng)?;
                    let bytes = out.bytes();
                    (out.reconstruction, bytes)
                }
                Sender::Denoise {
                    cfg,
                    state,
                    compressor,
                } => {
                    let step = denoise_step(&batch, cfg, state, compressor, &mut step_rng)?;
                    (state.v_receiver.clone(), step.bytes)
                }
            };
            params = apply_update(&params, &update, train.lr)?;
            if let Some(a) = &mut accountant {
                a.step();
            }
            steps += 1;
            total_bytes += bytes;
            record.step_bytes.push(bytes);
            if !params.is_finite() {
                record.aborted = true;
                break 'epochs;
            }
        }
        record
            .epoch_accuracy
            .push(model.accuracy(&params, &test_set));
        record.cumulative_bytes.push(total_bytes);
        record.privacy_trace.push(spend(&accountant, steps));
    }
    record.final_accuracy = final_accuracy(&record.epoch_accuracy);
    Ok(TrainingRun {
        record,
        meta: RunMeta {
            clip_radius: privacy_params.map(|p| p.clip_radius()),
            delta,
            param_count: model.param_count(),
            steps,
        },
    })
}

fn build_sender(
    pipeline: &PipelineConfig,
    model: &ModelSpec,
    privacy: Option<&PrivacyParams>,
) -> Result<Sender> {
    let compressor = Compressor::new(pipeline.compressor, model.layout().clone())?;
    match (&pipeline.denoise, privacy) {
        (Some(d), Some(p)) => Ok(Sender::Denoise {
            cfg: DenoiseConfig::new(d.beta, d.gamma, *p, d.tie_break)?,
            state: DenoiseState::new(model.layout().clone()),
            compressor,
        }),
        _ => Ok(Sender::Plain { compressor }),
    }
}

fn apply_update(
    params: &GradientVector,
    update: &GradientVector,
    lr: f64,
) -> Result<GradientVector> {
    let values: Vec<f64> = params
        .values()
        .iter()
        .zip(update.values())
        .map(|(p, u)| p - lr * u)
        .collect();
    params.check_layout(update)?;
    Ok(GradientVector::from_parts_unchecked(
        values,
        params.layout().clone(),
    ))
}
