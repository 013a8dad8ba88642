//! Renyi-DP composition for the (unsubsampled) Gaussian mechanism.
//!
//! A Gaussian mechanism with noise multiplier `sigma` has RDP cost
//! `alpha / (2 sigma^2)` at order `alpha`; `steps` compositions add linearly
//! and the standard conversion gives
//! `epsilon = min_alpha steps * alpha / (2 sigma^2) + ln(1/delta) / (alpha - 1)`.
//!
//! Subsampling amplification is not modelled, so the reported epsilon is an
//! upper bound on what a subsampled accountant would report.

use crate::error::{Error, Result};

/// Renyi orders searched when converting to (epsilon, delta).
#[derive(Debug, Clone, PartialEq)]
pub struct OrderGrid(Vec<f64>);

impl Default for OrderGrid {
    /// `{1.5, 2, 3, ..., 64, 128, 256}`
    fn default() -> Self {
        let mut orders = vec![1.5];
        orders.extend((2..=64).map(f64::from));
        orders.extend([128.0, 256.0]);
        Self(orders)
    }
}

impl OrderGrid {
    /// The default grid plus `points` geometrically spaced orders in
    /// `[1.01, 512]`.
    pub fn dense(points: usize) -> Self {
        let mut orders = Self::default().0;
        let (lo, hi) = (1.01f64.ln(), 512f64.ln());
        for i in 0..points {
            let t = if points == 1 {
                0.0
            } else {
                i as f64 / (points - 1) as f64
            };
            orders.push((lo + t * (hi - lo)).exp());
        }
        orders.sort_by(f64::total_cmp);
        orders.dedup();
        Self(orders)
    }

    pub fn orders(&self) -> &[f64] {
        &self.0
    }
}

/// Accumulated privacy cost: `epsilon` at the configured `delta` after
/// `steps` noisy queries. `alpha` is the minimizing order, absent when
/// the bound is trivially 0 or infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacySpend {
    pub steps: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub alpha: Option<f64>,
}

pub fn rdp_epsilon(sigma: f64, steps: u64, delta: f64, grid: &OrderGrid) -> Result<PrivacySpend> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!(
            "sigma must be nonnegative, got {sigma}"
        )));
    }
    let spend = |epsilon, alpha| PrivacySpend {
        steps,
        epsilon,
        delta,
        alpha,
    };
    if steps == 0 {
        return Ok(spend(0.0, None));
    }
    if sigma == 0.0 {
        return Ok(spend(f64::INFINITY, None));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let per_order = steps as f64 / (2.0 * sigma * sigma);
    let (alpha, epsilon) = grid
        .orders()
        .iter()
        .map(|&a| (a, per_order * a + log_inv_delta / (a - 1.0)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| Error::InvalidParameter("empty order grid".into()))?;
    Ok(spend(epsilon, Some(alpha)))
}

/// Smallest `delta` for which a single Gaussian release with multiplier
/// `sigma` is `(epsilon, delta)`-DP under the classical bound
/// `delta >= 4/5 exp(-(sigma epsilon)^2 / 2)`, valid for `epsilon < 1`.
pub fn delta_floor(sigma: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    Ok(0.8 * (-(sigma * epsilon).powi(2) / 2.0).exp())
}

/// Running accountant for a fixed-sigma training run.
#[derive(Debug, Clone)]
pub struct Accountant {
    sigma: f64,
    delta: f64,
    grid: OrderGrid,
    steps: u64,
}

impl Accountant {
    pub fn new(sigma: f64, delta: f64, grid: OrderGrid) -> Result<Self> {
        rdp_epsilon(sigma, 0, delta, &grid)?;
        Ok(Self {
            sigma,
            delta,
            grid,
            steps: 0,
        })
    }

    pub fn step(&mut self) {
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn spend(&self) -> PrivacySpend {
        rdp_epsilon(self.sigma, self.steps, self.delta, &self.grid)
            .expect("validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense 1-D sweep of the continuous objective; independent of the grid.
    fn continuous_min(sigma: f64, steps: u64, delta: f64) -> f64 {
        let mut best = f64::INFINITY;
        let mut a = 1.0001;
        while a < 300.0 {
            let v = steps as f64 * a / (2.0 * sigma * sigma) + (1.0 / delta).ln() / (a - 1.0);
            best = best.min(v);
            a += 1e-4;
        }
        best
    }

    #[test]
    fn unit_sigma_single_step() {
        let s = rdp_epsilon(1.0, 1, 1e-5, &OrderGrid::default()).unwrap();
        // integer order 6: 3 + ln(1e5)/5
        let at_six = 3.0 + 1e5f64.ln() / 5.0;
        assert!((s.epsilon - at_six).abs() < 1e-12);
        assert_eq!(s.alpha, Some(6.0));
        let cont = continuous_min(1.0, 1, 1e-5);
        assert!((cont - 5.298).abs() < 1e-3);
        assert!(s.epsilon >= cont && s.epsilon - cont < 1e-2);
    }

    #[test]
    fn zero_steps_and_zero_sigma() {
        let g = OrderGrid::default();
        assert_eq!(rdp_epsilon(1.0, 0, 1e-5, &g).unwrap().epsilon, 0.0);
        assert_eq!(
            rdp_epsilon(0.0, 3, 1e-5, &g).unwrap().epsilon,
            f64::INFINITY
        );
        assert!(rdp_epsilon(1.0, 1, 0.0, &g).is_err());
    }

    #[test]
    fn composition_is_monotone() {
        let g = OrderGrid::default();
        let one = rdp_epsilon(1.0, 1, 1e-5, &g).unwrap().epsilon;
        let two = rdp_epsilon(1.0, 2, 1e-5, &g).unwrap().epsilon;
        assert!(two > one);
    }

    #[test]
    fn monotone_over_parameter_grid() {
        let g = OrderGrid::default();
        let sigmas: Vec<f64> = (0..20).map(|i| 0.3 + 0.25 * i as f64).collect();
        let steps: Vec<u64> = (0..20).map(|i| 1 + 37 * i as u64).collect();
        for (i, &s) in sigmas.iter().enumerate() {
            for (j, &t) in steps.iter().enumerate() {
                let e = rdp_epsilon(s, t, 1e-5, &g).unwrap().epsilon;
                if i > 0 {
                    assert!(rdp_epsilon(sigmas[i - 1], t, 1e-5, &g).unwrap().epsilon >= e);
                }
                if j > 0 {
                    assert!(rdp_epsilon(s, steps[j - 1], 1e-5, &g).unwrap().epsilon <= e);
                }
            }
        }
    }

    #[test]
    fn dense_grid_never_worse() {
        let dense = OrderGrid::dense(400);
        for sigma in [0.5, 1.0, 3.0] {
            let a = rdp_epsilon(sigma, 10, 1e-5, &OrderGrid::default())
                .unwrap()
                .epsilon;
            let b = rdp_epsilon(sigma, 10, 1e-5, &dense).unwrap().epsilon;
            assert!(b <= a);
            assert!(b >= continuous_min(sigma, 10, 1e-5) - 1e-9);
        }
    }

    #[test]
    fn delta_floor_values() {
        assert!((delta_floor(1.0, 1e-9).unwrap() - 0.8).abs() < 1e-12);
        let near_one = delta_floor(1.0, 1.0 - 1e-12).unwrap();
        assert!((near_one - 0.8 * (-0.5f64).exp()).abs() < 1e-9);
        assert!((near_one - 0.4852).abs() < 1e-4);
        assert!(delta_floor(2.0, 0.5).unwrap() < delta_floor(1.0, 0.5).unwrap());
        assert!(matches!(delta_floor(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(delta_floor(1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn accountant_tracks_steps() {
        let mut acc = Accountant::new(0.8, 1e-5, OrderGrid::default()).unwrap();
        let mut last = acc.spend().epsilon;
        assert_eq!(last, 0.0);
        for _ in 0..50 {
            acc.step();
            let e = acc.spend().epsilon;
            assert!(e >= last);
            last = e;
        }
        assert_eq!(
            acc.spend(),
            rdp_epsilon(0.8, 50, 1e-5, &OrderGrid::default()).unwrap()
        );
    }
}
