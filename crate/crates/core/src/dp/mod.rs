//! Gaussian mechanism over per-sample gradients and Renyi-DP accounting.

mod accountant;
mod mechanism;

pub use accountant::{delta_floor, rdp_epsilon, Accountant, OrderGrid, PrivacySpend};
pub use mechanism::{clip_and_noise_rows, privatize_batch, NoisePlacement, PrivacyParams};
