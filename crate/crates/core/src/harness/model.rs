use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grad::{GradientVector, Layout, SampleBatchGradients};
use crate::harness::task::Dataset;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Multinomial logistic regression.
    LogisticRegression,
    /// One tanh hidden layer followed by a softmax output layer.
    Mlp1Hidden,
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic-regression" => Ok(Self::LogisticRegression),
            "mlp-1-hidden" | "mlp" => Ok(Self::Mlp1Hidden),
            other => Err(Error::Config(format!(
                "unknown model architecture {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LogisticRegression => "logistic-regression",
            Self::Mlp1Hidden => "mlp-1-hidden",
        })
    }
}

/// Architecture plus the parameter layout it implies. Weight matrices are
/// stored row-major with one row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_dim: usize,
    pub classes: usize,
    pub hidden: usize,
    layout: Arc<Layout>,
}

impl ModelSpec {
    pub fn new(
        arch: Architecture,
        input_dim: usize,
        classes: usize,
        hidden: usize,
    ) -> Result<Self> {
        if input_dim == 0 || classes < 2 {
            return Err(Error::Config(
                "model needs input_dim >= 1 and >= 2 classes".into(),
            ));
        }
        let layout = match arch {
            Architecture::LogisticRegression => {
                Layout::new([("weight", classes * input_dim), ("bias", classes)])?
            }
            Architecture::Mlp1Hidden => {
                if hidden == 0 {
                    return Err(Error::Config("mlp hidden width must be >= 1".into()));
                }
                Layout::new([
                    ("hidden.weight", hidden * input_dim),
                    ("hidden.bias", hidden),
                    ("output.weight", classes * hidden),
                    ("output.bias", classes),
                ])?
            }
        };
        Ok(Self {
            arch,
            input_dim,
            classes,
            hidden,
            layout: Arc::new(layout),
        })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// Logistic regression starts at zero; the MLP hidden layer gets
    /// Gaussian weights with variance `1 / input_dim` and the output layer
    /// starts small.
    pub fn init_params(&self, rng: &mut RngStream) -> GradientVector {
        let mut values = vec![0.0; self.layout.len()];
        if self.arch == Architecture::Mlp1Hidden {
            let (d, h) = (self.input_dim, self.hidden);
            let scale_in = 1.0 / (d as f64).sqrt();
            for w in &mut values[..h * d] {
                *w = scale_in * rng.gaussian();
            }
            let out = &self.layout.layers()[2];
            let scale_out = 0.1 / (h as f64).sqrt();
            for w in &mut values[out.offset..out.offset + out.size] {
                *w = scale_out * rng.gaussian();
            }
        }
        GradientVector::from_parts_unchecked(values, self.layout.clone())
    }

    fn forward(&self, params: &[f64], x: &[f64], hidden: &mut Vec<f64>) -> Vec<f64> {
        let (d, c) = (self.input_dim, self.classes);
        match self.arch {
            Architecture::LogisticRegression => {
                let (w, b) = params.split_at(c * d);
                (0..c)
                    .map(|k| b[k] + dot(&w[k * d..(k + 1) * d], x))
                    .collect()
            }
            Architecture::Mlp1Hidden => {
                let h = self.hidden;
                let (w1, rest) = params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                hidden.clear();
                hidden.extend((0..h).map(|j| (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh()));
                (0..c)
                    .map(|k| b2[k] + dot(&w2[k * h..(k + 1) * h], hidden))
                    .collect()
            }
        }
    }

    /// Cross-entropy loss of one sample and its gradient.
    pub fn loss_and_grad(&self, params: &GradientVector, x: &[f64], y: usize) -> (f64, Vec<f64>) {
        let p = params.values();
        let (d, c) = (self.input_dim, self.classes);
        let mut hidden = Vec::new();
        let logits = self.forward(p, x, &mut hidden);
        let (probs, loss) = softmax_xent(&logits, y);
        // dL/dlogit_k = p_k - [k == y]
        let delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, pk)| pk - if k == y { 1.0 } else { 0.0 })
            .collect();
        let mut grad = vec![0.0; p.len()];
        match self.arch {
            Architecture::LogisticRegression => {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g = delta[k] * xi;
                    }
                    gb[k] = delta[k];
                }
            }
            Architecture::Mlp1Hidden => {
                let h = self.hidden;
                let w2 = &p[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                for k in 0..c {
                    for j in 0..h {
                        gw2[k * h + j] = delta[k] * hidden[j];
                    }
                    gb2[k] = delta[k];
                }
                for j in 0..h {
                    let back: f64 = (0..c).map(|k| delta[k] * w2[k * h + j]).sum();
                    let dz = back * (1.0 - hidden[j] * hidden[j]);
                    for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *g = dz * xi;
                    }
                    gb1[j] = dz;
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, params: &GradientVector, x: &[f64], y: usize) -> f64 {
        let mut hidden = Vec::new();
        softmax_xent(&self.forward(params.values(), x, &mut hidden), y).1
    }

    pub fn predict(&self, params: &GradientVector, x: &[f64]) -> usize {
        let mut hidden = Vec::new();
        let logits = self.forward(params.values(), x, &mut hidden);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }

    pub fn accuracy(&self, params: &GradientVector, data: &Dataset) -> f64 {
        let correct = (0..data.len())
            .filter(|&i| self.predict(params, data.x(i)) == data.y(i))
            .count();
        correct as f64 / data.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_xent(logits: &[f64], y: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[y];
    (exps.into_iter().map(|e| e / total).collect(), loss)
}

/// One gradient row per `(x, y)` sample, with the mean loss of the batch.
pub fn per_sample_gradients(
    model: &ModelSpec,
    params: &GradientVector,
    samples: &[(&[f64], usize)],
) -> Result<(SampleBatchGradients, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("minibatch is empty".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    let mut total = 0.0;
    for (i, &(x, y)) in samples.iter().enumerate() {
        if x.len() != model.input_dim || y >= model.classes {
            return Err(Error::InvalidInput(format!(
                "sample {i} does not fit the model"
            )));
        }
        let (loss, grad) = model.loss_and_grad(params, x, y);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric { sample: i });
        }
        total += loss;
        rows.push(GradientVector::from_parts_unchecked(
            grad,
            model.layout.clone(),
        ));
    }
    Ok((
        SampleBatchGradients::new(rows)?,
        total / samples.len() as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences at step `h`, independent of the analytic path.
    fn finite_difference(
        model: &ModelSpec,
        params: &GradientVector,
        x: &[f64],
        y: usize,
        h: f64,
    ) -> Vec<f64> {
        (0..params.len())
            .map(|i| {
                let mut plus = params.values().to_vec();
                let mut minus = params.values().to_vec();
                plus[i] += h;
                minus[i] -= h;
                let lp = model.loss(
                    &GradientVector::new(plus, params.layout().clone()).unwrap(),
                    x,
                    y,
                );
                let lm = model.loss(
                    &GradientVector::new(minus, params.layout().clone()).unwrap(),
                    x,
                    y,
                );
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    fn random_params(model: &ModelSpec, seed: u64) -> GradientVector {
        let mut rng = RngStream::new(seed, 0);
        let values = (0..model.param_count())
            .map(|_| 0.5 * rng.gaussian())
            .collect();
        GradientVector::new(values, model.layout().clone()).unwrap()
    }

    fn max_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let model = ModelSpec::new(Architecture::LogisticRegression, 4, 3, 0).unwrap();
        let params = random_params(&model, 1);
        let x = [0.3, -1.2, 0.8, 2.0];
        let (_, grad) = model.loss_and_grad(&params, &x, 2);
        let numeric = finite_difference(&model, &params, &x, 2, 1e-5);
        assert!(max_relative(&grad, &numeric) <= 1e-4);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let model = ModelSpec::new(Architecture::Mlp1Hidden, 3, 2, 5).unwrap();
        let params = random_params(&model, 2);
        let x = [1.0, -0.5, 0.25];
        let (_, grad) = model.loss_and_grad(&params, &x, 1);
        let numeric = finite_difference(&model, &params, &x, 1, 1e-5);
        assert!(max_relative(&grad, &numeric) <= 1e-4);
    }

    #[test]
    fn duplicated_sample_gives_identical_rows() {
        let model = ModelSpec::new(Architecture::Mlp1Hidden, 2, 2, 3).unwrap();
        let params = random_params(&model, 3);
        let x = [0.1, 0.2];
        let (batch, _) = per_sample_gradients(&model, &params, &[(&x, 0), (&x, 0)]).unwrap();
        assert_eq!(batch.rows()[0], batch.rows()[1]);
    }

    #[test]
    fn zero_input_gives_bias_only_gradient() {
        let model = ModelSpec::new(Architecture::LogisticRegression, 3, 2, 0).unwrap();
        let params = random_params(&model, 4);
        let (_, grad) = model.loss_and_grad(&params, &[0.0; 3], 0);
        assert!(grad[..6].iter().all(|&g| g == 0.0));
        assert!(grad[6..].iter().all(|&g| g != 0.0));
    }

    #[test]
    fn layouts_and_errors() {
        let model = ModelSpec::new(Architecture::Mlp1Hidden, 16, 2, 32).unwrap();
        assert_eq!(model.param_count(), 16 * 32 + 32 + 64 + 2);
        assert_eq!(model.layout().layers().len(), 4);
        let params = model.init_params(&mut RngStream::new(0, 0));
        assert!(per_sample_gradients(&model, &params, &[]).is_err());
        let bad = [f64::NAN; 16];
        assert!(matches!(
            per_sample_gradients(&model, &params, &[(&[0.0; 16], 0), (&bad, 1)]),
            Err(Error::Numeric { sample: 1 })
        ));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let model = ModelSpec::new(Architecture::LogisticRegression, 1, 2, 0).unwrap();
        let params =
            GradientVector::new(vec![1000.0, -1000.0, 0.0, 0.0], model.layout().clone()).unwrap();
        let (loss, grad) = model.loss_and_grad(&params, &[5.0], 1);
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
        assert!((loss - 10_000.0).abs() < 1e-9);
    }
}
