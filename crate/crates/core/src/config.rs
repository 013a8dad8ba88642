//! Flat `key = value` experiment files.
//!
//! Keys are namespaced (`privacy.sigma`, `compress.rate`, ...). Unknown keys
//! are rejected at parse time, and every key the parser knows is listed in
//! [`KEYS`] so the CLI help can print them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::compress::{CompressorKind, PayloadWidth};
use crate::denoise::TieBreak;
use crate::dp::{NoisePlacement, OrderGrid};
use crate::error::{Error, Result};
use crate::harness::{
    Architecture, ClipSetting, DenoiseSettings, Generator, ModelSpec, OracleSpec, PipelineConfig,
    PrivacySettings, TaskSpec, TrainConfig,
};
use crate::rng::RngStream;

pub struct KeyDoc {
    pub key: &'static str,
    /// Value used when the key is absent; `None` means required when the
    /// section is used.
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(key: &'static str, default: Option<&'static str>, help: &'static str) -> KeyDoc {
    KeyDoc { key, default, help }
}

pub const KEYS: &[KeyDoc] = &[
    key("task.generator", None, "gaussian-blobs | two-rings"),
    key("task.classes", Some("2"), "number of classes"),
    key("task.dim", Some("16"), "input dimension"),
    key("task.train", Some("2000"), "training examples"),
    key("task.test", Some("500"), "held-out test examples"),
    key(
        "task.seed",
        Some("0"),
        "dataset seed, independent of the run seed",
    ),
    key(
        "task.separation",
        Some("3.0"),
        "class center / ring spacing",
    ),
    key("task.noise", Some("1.0"), "within-class noise std"),
    key("model.arch", None, "logistic-regression | mlp-1-hidden"),
    key("model.hidden", Some("16"), "hidden width of mlp-1-hidden"),
    key("train.epochs", None, "training epochs"),
    key("train.lr", None, "SGD learning rate"),
    key("train.batch_size", None, "minibatch size"),
    key(
        "train.seeds",
        Some("1"),
        "seeds per grid cell (root seed + 0, 1, ...)",
    ),
    key(
        "privacy.enabled",
        Some("true"),
        "clip (and noise) per-sample gradients",
    ),
    key("privacy.sigma", Some("0.0"), "noise multiplier"),
    key(
        "privacy.clip",
        Some("median"),
        "clip radius, or median = median row norm of the first batch",
    ),
    key(
        "privacy.delta",
        Some("auto"),
        "target delta, or auto = 1 / train size",
    ),
    key(
        "privacy.placement",
        Some("per_sample"),
        "per_sample | on_sum",
    ),
    key(
        "privacy.dense_orders",
        Some("0"),
        "extra RDP orders added to the default grid",
    ),
    key("compress.kind", Some("none"), "none | topk | powersgd"),
    key(
        "compress.rate",
        Some("16"),
        "top-k compression rate (k = layer size / rate)",
    ),
    key(
        "compress.width",
        Some("16"),
        "top-k payload bits: 16 | 32 | 64",
    ),
    key("compress.rank", Some("1"), "powersgd rank"),
    key(
        "compress.iterations",
        Some("1"),
        "powersgd power iterations per step",
    ),
    key(
        "denoise.enabled",
        Some("false"),
        "apply the velocity/acceleration sender",
    ),
    key("denoise.beta", None, "velocity decay"),
    key("denoise.gamma", None, "residual decay"),
    key(
        "denoise.tie_break",
        Some("velocity"),
        "velocity | acceleration on equal residual norms",
    ),
    key("grid.sigmas", None, "comma list overriding privacy.sigma"),
    key(
        "grid.rates",
        None,
        "comma list of top-k rates; 1 sends dense",
    ),
    key(
        "grid.ranks",
        None,
        "comma list of powersgd ranks (instead of grid.rates)",
    ),
    key("grid.modes", None, "comma list of plain | denoise"),
    key("oracle.m", Some("256"), "oracle gradient dimension"),
    key("oracle.layers", Some("4"), "oracle layer count"),
    key(
        "oracle.g_norm",
        Some("1.0"),
        "norm of the prescribed gradient",
    ),
    key(
        "oracle.scale",
        Some("1.0"),
        "per-coordinate perturbation std",
    ),
    key("oracle.batch", Some("16"), "rows per oracle batch"),
    key(
        "oracle.steps",
        Some("200"),
        "oracle batches for denoise-run",
    ),
];

/// The key table as aligned text for `--help`.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (`key = value`, `#` comments):\n");
    for k in KEYS {
        let default = match k.default {
            Some(d) => format!(" [default: {d}]"),
            None => String::new(),
        };
        let _ = writeln!(out, "  {:width$}  {}{}", k.key, k.help, default);
    }
    out
}

fn doc(key: &str) -> Option<&'static KeyDoc> {
    KEYS.iter().find(|k| k.key == key)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if doc(k).is_none() {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key {k:?}"),
                });
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {k:?}"),
                });
            }
        }
        Ok(Self { values })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Sets a key, rejecting names outside [`KEYS`].
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if doc(key).is_none() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Explicit value, or the documented default.
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| doc(key).and_then(|d| d.default))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{key} = {raw:?} has the wrong type")))
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(raw) = self.values.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse list item {item:?}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Hex SHA-256 over the sorted explicit entries; independent of the
    /// order keys appear in the file.
    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in &self.values {
            hasher.update(k.as_bytes());
            hasher.update(b"=");
            hasher.update(v.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let generator: Generator = self.get("task.generator")?;
        if generator == Generator::SyntheticGradientOracle {
            return Err(Error::Config(
                "the oracle generator is configured through oracle.* keys".into(),
            ));
        }
        Ok(TaskSpec {
            generator,
            classes: self.get("task.classes")?,
            dim: self.get("task.dim")?,
            train: self.get("task.train")?,
            test: self.get("task.test")?,
            seed: self.get("task.seed")?,
            separation: self.get("task.separation")?,
            noise: self.get("task.noise")?,
        })
    }

    pub fn model_spec(&self, task: &TaskSpec) -> Result<ModelSpec> {
        let arch: Architecture = self.get("model.arch")?;
        ModelSpec::new(arch, task.dim, task.classes, self.get("model.hidden")?)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get("train.epochs")?,
            lr: self.get("train.lr")?,
            batch_size: self.get("train.batch_size")?,
            seed,
        })
    }

    pub fn privacy(&self) -> Result<Option<PrivacySettings>> {
        if !self.get::<bool>("privacy.enabled")? {
            return Ok(None);
        }
        let clip = match self.raw("privacy.clip") {
            Some("median") => ClipSetting::MedianAtStart,
            _ => ClipSetting::Fixed(self.get("privacy.clip")?),
        };
        let delta = match self.raw("privacy.delta") {
            Some("auto") => None,
            _ => Some(self.get("privacy.delta")?),
        };
        let dense: usize = self.get("privacy.dense_orders")?;
        Ok(Some(PrivacySettings {
            sigma: self.get("privacy.sigma")?,
            clip,
            delta,
            placement: self.get::<NoisePlacement>("privacy.placement")?,
            orders: if dense == 0 {
                OrderGrid::default()
            } else {
                OrderGrid::dense(dense)
            },
        }))
    }

    pub fn compressor(&self) -> Result<CompressorKind> {
        let kind = match self.raw("compress.kind") {
            Some("none") => CompressorKind::None,
            Some("topk") => CompressorKind::TopK {
                rate: self.get("compress.rate")?,
                width: self.get::<PayloadWidth>("compress.width")?,
            },
            Some("powersgd") => CompressorKind::PowerSgd {
                rank: self.get("compress.rank")?,
                iterations: self.get("compress.iterations")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "compress.kind must be none, topk or powersgd, got {other:?}"
                )))
            }
        };
        kind.validate()?;
        Ok(kind)
    }

    /// `denoise.beta` and `denoise.gamma` have no defaults: they must be
    /// written out whenever denoise is enabled.
    pub fn denoise(&self) -> Result<Option<DenoiseSettings>> {
        if !self.get::<bool>("denoise.enabled")? {
            return Ok(None);
        }
        Ok(Some(DenoiseSettings {
            beta: self.get("denoise.beta")?,
            gamma: self.get("denoise.gamma")?,
            tie_break: self.get::<TieBreak>("denoise.tie_break")?,
        }))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            privacy: self.privacy()?,
            compressor: self.compressor()?,
            denoise: self.denoise()?,
        })
    }

    /// Oracle fixture with a random direction drawn from `rng`.
    pub fn oracle_spec(&self, rng: &mut RngStream) -> Result<OracleSpec> {
        OracleSpec::random_direction(
            self.get("oracle.m")?,
            self.get("oracle.layers")?,
            self.get("oracle.g_norm")?,
            self.get("oracle.scale")?,
            self.get("oracle.batch")?,
            rng,
        )
    }

    /// Expands `grid.*` into one config per cell, in lexicographic
    /// (sigma, compressor, mode) order. Without grid keys the config itself
    /// is the single cell.
    pub fn grid_cells(&self) -> Result<Vec<GridCell>> {
        let sigmas: Option<Vec<String>> = self.get_list("grid.sigmas")?;
        let rates: Option<Vec<String>> = self.get_list("grid.rates")?;
        let ranks: Option<Vec<String>> = self.get_list("grid.ranks")?;
        let modes: Option<Vec<String>> = self.get_list("grid.modes")?;
        if rates.is_some() && ranks.is_some() {
            return Err(Error::Config(
                "grid.rates and grid.ranks are mutually exclusive".into(),
            ));
        }

        let mut base = self.clone();
        for k in ["grid.sigmas", "grid.rates", "grid.ranks", "grid.modes"] {
            base.values.remove(k);
        }
        let axis = |list: Option<Vec<String>>| {
            list.map(|l| l.into_iter().map(Some).collect())
                .unwrap_or(vec![None])
        };
        let sigma_axis: Vec<Option<String>> = axis(sigmas);
        let compress_axis: Vec<Option<(bool, String)>> = match (rates, ranks) {
            (Some(r), _) => r.into_iter().map(|v| Some((true, v))).collect(),
            (_, Some(r)) => r.into_iter().map(|v| Some((false, v))).collect(),
            _ => vec![None],
        };
        let mode_axis: Vec<Option<String>> = axis(modes);

        let mut cells = Vec::new();
        for sigma in &sigma_axis {
            for comp in &compress_axis {
                for mode in &mode_axis {
                    let mut cfg = base.clone();
                    let mut label = Vec::new();
                    if let Some(s) = sigma {
                        cfg.set("privacy.sigma", s.clone())?;
                        label.push(format!("sigma={s}"));
                    }
                    match comp {
                        Some((true, rate)) => {
                            if rate.parse::<f64>().ok() == Some(1.0) {
                                cfg.set("compress.kind", "none")?;
                                cfg.values.remove("compress.rate");
                            } else {
                                cfg.set("compress.kind", "topk")?;
                                cfg.set("compress.rate", rate.clone())?;
                            }
                            label.push(format!("rate={rate}"));
                        }
                        Some((false, rank)) => {
                            cfg.set("compress.kind", "powersgd")?;
                            cfg.set("compress.rank", rank.clone())?;
                            label.push(format!("rank={rank}"));
                        }
                        None => {}
                    }
                    if let Some(m) = mode {
                        let enabled = match m.as_str() {
                            "plain" => "false",
                            "denoise" => "true",
                            other => {
                                return Err(Error::Config(format!(
                                    "grid.modes: unknown mode {other:?}"
                                )))
                            }
                        };
                        cfg.set("denoise.enabled", enabled)?;
                        label.push(format!("mode={m}"));
                    }
                    // fail early on cells that cannot run
                    cfg.pipeline()?;
                    let label = if label.is_empty() {
                        "default".to_string()
                    } else {
                        label.join(",")
                    };
                    cells.push(GridCell { label, config: cfg });
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: ExperimentConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "\
# comment line
task.generator = gaussian-blobs
model.arch = logistic-regression   # trailing comment
train.epochs = 3
train.lr = 0.5
train.batch_size = 32
";

    #[test]
    fn parses_and_applies_defaults() {
        let cfg: ExperimentConfig = BASE.parse().unwrap();
        assert_eq!(cfg.get::<usize>("train.epochs").unwrap(), 3);
        assert_eq!(cfg.get::<f64>("privacy.sigma").unwrap(), 0.0);
        let task = cfg.task_spec().unwrap();
        assert_eq!((task.classes, task.dim, task.train), (2, 16, 2000));
        let p = cfg.pipeline().unwrap();
        assert_eq!(p.privacy.unwrap().clip, ClipSetting::MedianAtStart);
        assert_eq!(p.compressor, CompressorKind::None);
        assert!(p.denoise.is_none());
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = format!("{BASE}privacy.sgima = 0.4\n")
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        let err = format!("{BASE}train.lr = 0.1\n")
            .parse::<ExperimentConfig>()
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 7, .. }), "{err}");
        assert!("no equals sign".parse::<ExperimentConfig>().is_err());
    }

    #[test]
    fn hash_ignores_key_order_and_comments() {
        let a: ExperimentConfig = "train.lr = 0.5\ntrain.epochs = 3\n".parse().unwrap();
        let b: ExperimentConfig = "# x\ntrain.epochs=3\n\ntrain.lr =0.5 # y\n"
            .parse()
            .unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let c: ExperimentConfig = "train.lr = 0.25\ntrain.epochs = 3\n".parse().unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn denoise_requires_explicit_beta_gamma() {
        let cfg: ExperimentConfig = format!("{BASE}denoise.enabled = true\ndenoise.beta = 0.9\n")
            .parse()
            .unwrap();
        let err = cfg.denoise().unwrap_err();
        assert!(err.to_string().contains("denoise.gamma"), "{err}");
    }

    #[test]
    fn type_errors_name_the_key() {
        let cfg: ExperimentConfig = format!("{BASE}privacy.sigma = lots\n").parse().unwrap();
        assert!(cfg
            .privacy()
            .unwrap_err()
            .to_string()
            .contains("privacy.sigma"));
    }

    #[test]
    fn grid_expansion() {
        let text = format!(
            "{BASE}grid.sigmas = 0, 0.8\ngrid.rates = 1, 16\ngrid.modes = plain, denoise\ndenoise.beta = 0.9\ndenoise.gamma = 0.9\n"
        );
        let cfg: ExperimentConfig = text.parse().unwrap();
        let cells = cfg.grid_cells().unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].label, "sigma=0,rate=1,mode=plain");
        assert_eq!(cells[7].label, "sigma=0.8,rate=16,mode=denoise");
        assert_eq!(cells[0].config.compressor().unwrap(), CompressorKind::None);
        assert!(
            matches!(cells[3].config.compressor().unwrap(), CompressorKind::TopK { rate, .. } if rate == 16.0)
        );
        assert!(cells[1].config.denoise().unwrap().is_some());
        let hashes: std::collections::BTreeSet<_> =
            cells.iter().map(|c| c.config.config_hash()).collect();
        assert_eq!(hashes.len(), 8);
    }

    #[test]
    fn no_grid_is_one_cell() {
        let cfg: ExperimentConfig = BASE.parse().unwrap();
        let cells = cfg.grid_cells().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].config, cfg);
    }

    #[test]
    fn help_lists_every_key() {
        let help = keys_help();
        for k in KEYS {
            assert!(help.contains(k.key));
        }
    }
}
