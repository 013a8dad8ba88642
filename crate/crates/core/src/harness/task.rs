use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Generator {
    /// One isotropic Gaussian per class around a random center.
    GaussianBlobs,
    /// Concentric rings in the first two coordinates, noise elsewhere.
    TwoRings,
    /// Prescribed-gradient fixture; drives [`super::OracleStream`], not training.
    SyntheticGradientOracle,
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "two-rings" => Ok(Self::TwoRings),
            "synthetic-gradient-oracle" => Ok(Self::SyntheticGradientOracle),
            other => Err(Error::Config(format!("unknown task generator {other:?}"))),
        }
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian-blobs",
            Self::TwoRings => "two-rings",
            Self::SyntheticGradientOracle => "synthetic-gradient-oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub generator: Generator,
    pub classes: usize,
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Distance scale between class centers (blobs) or rings.
    pub separation: f64,
    /// Within-class noise standard deviation.
    pub noise: f64,
}

impl TaskSpec {
    pub fn blobs(classes: usize, dim: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            classes,
            dim,
            train,
            test,
            seed,
            separation: 3.0,
            noise: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.train == 0 || self.test == 0 {
            return Err(Error::Config(
                "task needs >= 2 classes, dim >= 1 and nonempty train/test splits".into(),
            ));
        }
        if self.generator == Generator::TwoRings && self.dim < 2 {
            return Err(Error::Config("two-rings needs dim >= 2".into()));
        }
        if !(self.noise >= 0.0) || !(self.separation > 0.0) {
            return Err(Error::Config(
                "task noise must be >= 0 and separation > 0".into(),
            ));
        }
        Ok(())
    }

    /// Deterministic (train, test) split. The splits come from distinct
    /// streams and never share a sample.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let root = RngStream::labeled(self.seed, "task");
        match self.generator {
            Generator::GaussianBlobs => {
                let mut center_rng = root.derive("centers");
                let centers: Vec<Vec<f64>> = (0..self.classes)
                    .map(|_| {
                        let dir: Vec<f64> = (0..self.dim).map(|_| center_rng.gaussian()).collect();
                        let norm = dir
                            .iter()
                            .map(|x| x * x)
                            .sum::<f64>()
                            .sqrt()
                            .max(f64::MIN_POSITIVE);
                        dir.into_iter()
                            .map(|x| x / norm * self.separation)
                            .collect()
                    })
                    .collect();
                let sample = |n: usize, rng: &mut RngStream| {
                    let mut data = Dataset::with_capacity(self.dim, self.classes, n);
                    for i in 0..n {
                        let label = i % self.classes;
                        let x: Vec<f64> = centers[label]
                            .iter()
                            .map(|c| c + self.noise * rng.gaussian())
                            .collect();
                        data.push(&x, label);
                    }
                    data
                };
                Ok((
                    sample(self.train, &mut root.derive("train")),
                    sample(self.test, &mut root.derive("test")),
                ))
            }
            Generator::TwoRings => {
                let sample = |n: usize, rng: &mut RngStream| {
                    let mut data = Dataset::with_capacity(self.dim, self.classes, n);
                    for i in 0..n {
                        let label = i % self.classes;
                        let radius = self.separation * (label + 1) as f64
                            + 0.25 * self.noise * rng.gaussian();
                        let angle = std::f64::consts::TAU * rng.uniform();
                        let mut x = vec![radius * angle.cos(), radius * angle.sin()];
                        x.extend((2..self.dim).map(|_| 0.25 * self.noise * rng.gaussian()));
                        data.push(&x, label);
                    }
                    data
                };
                Ok((
                    sample(self.train, &mut root.derive("train")),
                    sample(self.test, &mut root.derive("test")),
                ))
            }
            Generator::SyntheticGradientOracle => Err(Error::Config(
                "synthetic-gradient-oracle produces gradient batches, not a labelled dataset"
                    .into(),
            )),
        }
    }
}

/// Row-major feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn with_capacity(dim: usize, classes: usize, n: usize) -> Self {
        Self {
            dim,
            classes,
            features: Vec::with_capacity(n * dim),
            labels: Vec::with_capacity(n),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        assert_eq!(x.len(), self.dim);
        assert!(label < self.classes);
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_deterministic() {
        let spec = TaskSpec::blobs(3, 5, 60, 30, 11);
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let other = TaskSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(spec.generate().unwrap().0, other.generate().unwrap().0);
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let spec = TaskSpec::blobs(2, 4, 100, 50, 3);
        let (train, test) = spec.generate().unwrap();
        assert_eq!((train.len(), test.len()), (100, 50));
        for i in 0..train.len() {
            for j in 0..test.len() {
                assert_ne!(train.x(i), test.x(j));
            }
        }
        assert_eq!((0..100).filter(|&i| train.y(i) == 1).count(), 50);
    }

    #[test]
    fn rings_radii_grow_with_label() {
        let spec = TaskSpec {
            generator: Generator::TwoRings,
            ..TaskSpec::blobs(2, 3, 200, 10, 1)
        };
        let (train, _) = spec.generate().unwrap();
        let mean_radius = |label| {
            let idx: Vec<usize> = (0..train.len()).filter(|&i| train.y(i) == label).collect();
            idx.iter()
                .map(|&i| train.x(i)[0].hypot(train.x(i)[1]))
                .sum::<f64>()
                / idx.len() as f64
        };
        assert!(mean_radius(1) > mean_radius(0) + 2.0);
    }

    #[test]
    fn oracle_generator_is_not_a_dataset() {
        let spec = TaskSpec {
            generator: Generator::SyntheticGradientOracle,
            ..TaskSpec::blobs(2, 3, 10, 10, 1)
        };
        assert!(spec.generate().is_err());
    }
}
