//! Resolved per-command configurations. Each one is echoed to
//! `<out>/config.json` and accepted back through `--config`.

use std::path::{Path, PathBuf};

use orthoproto::data::{SyntheticConfig, DEFAULT_STRIDE, DEFAULT_WINDOW};
use orthoproto::scoring::ScoreRule;
use orthoproto::training::Experiment;
use orthoproto::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Common, Failure};

/// Reads a JSON config file; malformed files are usage errors.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", p.display())).into())
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn required(v: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    v.ok_or_else(|| Failure::usage(format!("missing --{flag} (or `{}` in --config)", flag.replace('-', "_"))))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub synthetic: SyntheticConfig,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            out: default_out(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl GenDataConfig {
    pub fn resolve(c: &Common) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.synthetic.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

/// How a dataset CSV is turned into samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSource {
    pub path: Option<PathBuf>,
    /// Used only for signal CSVs.
    pub window: usize,
    pub stride: usize,
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource {
            path: None,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
        }
    }
}

impl DatasetSource {
    fn apply(&mut self, path: Option<PathBuf>, window: Option<usize>, stride: Option<usize>) {
        if path.is_some() {
            self.path = path;
        }
        if let Some(w) = window {
            self.window = w;
        }
        if let Some(s) = stride {
            self.stride = s;
        }
    }
}

pub struct SplitFlags {
    pub dataset: Option<PathBuf>,
    pub n_known: Option<usize>,
    pub test_fraction: Option<f64>,
    pub include_background_in_test: bool,
    pub window: Option<usize>,
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub n_known: usize,
    pub test_fraction: f64,
    pub include_background_in_test: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            out: default_out(),
            seed: 0,
            dataset: DatasetSource::default(),
            n_known: 8,
            test_fraction: 0.3,
            include_background_in_test: false,
        }
    }
}

impl SplitConfig {
    pub fn resolve(c: &Common, f: SplitFlags) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        cfg.dataset.apply(f.dataset, f.window, f.stride);
        if let Some(n) = f.n_known {
            cfg.n_known = n;
        }
        if let Some(t) = f.test_fraction {
            cfg.test_fraction = t;
        }
        cfg.include_background_in_test |= f.include_background_in_test;
        required(cfg.dataset.path.clone(), "dataset")?;
        Ok(cfg)
    }
}

/// A training run. `seed` overrides the data, split and training seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub out: PathBuf,
    pub seed: u64,
    /// External dataset; the synthetic config in `experiment` is used when
    /// absent.
    pub dataset: DatasetSource,
    pub split: Option<PathBuf>,
    pub experiment: Experiment,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            out: default_out(),
            seed: 0,
            dataset: DatasetSource::default(),
            split: None,
            experiment: Experiment::default(),
        }
    }
}

impl TrainRunConfig {
    pub fn resolve(c: &Common, dataset: Option<PathBuf>, split: Option<PathBuf>) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        cfg.dataset.apply(dataset, None, None);
        if split.is_some() {
            cfg.split = split;
        }
        cfg.experiment.data.seed = cfg.seed;
        cfg.experiment.train.seed = cfg.seed;
        Ok(cfg)
    }
}

pub struct EvalFlags {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub rule: Option<String>,
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub split: Option<PathBuf>,
    pub threshold: Option<f64>,
    pub rule: ScoreRule,
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            out: default_out(),
            checkpoint: None,
            dataset: DatasetSource::default(),
            split: None,
            threshold: None,
            rule: ScoreRule::Combined,
            bins: orthoproto::metrics::DEFAULT_BINS,
        }
    }
}

impl EvalConfig {
    pub fn resolve(c: &Common, f: EvalFlags) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        if f.checkpoint.is_some() {
            cfg.checkpoint = f.checkpoint;
        }
        cfg.dataset.apply(f.dataset, None, None);
        if f.split.is_some() {
            cfg.split = f.split;
        }
        if f.threshold.is_some() {
            cfg.threshold = f.threshold;
        }
        if let Some(r) = f.rule {
            cfg.rule = r.parse()?;
        }
        if let Some(b) = f.bins {
            cfg.bins = b;
        }
        required(cfg.checkpoint.clone(), "checkpoint")?;
        required(cfg.dataset.path.clone(), "dataset")?;
        required(cfg.split.clone(), "split")?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub out: PathBuf,
    /// First seed; trials use `seed, seed + 1, ...`.
    pub seed: u64,
    pub seeds: usize,
    pub suite: String,
    pub experiment: Experiment,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            out: default_out(),
            seed: 0,
            seeds: 5,
            suite: "table3".into(),
            experiment: Experiment::default(),
        }
    }
}

impl AblateConfig {
    pub fn resolve(c: &Common, suite: Option<String>, seeds: Option<usize>) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        if let Some(s) = suite {
            cfg.suite = s;
        }
        if let Some(n) = seeds {
            cfg.seeds = n;
        }
        if cfg.seeds == 0 {
            return Err(Failure::usage("--seeds must be at least 1"));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Written only when given.
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub points: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            out: None,
            seed: 0,
            points: 10,
        }
    }
}

impl GradcheckConfig {
    pub fn resolve(c: &Common, points: Option<usize>) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        if c.out.is_some() {
            cfg.out = c.out.clone();
        }
        if let Some(p) = points {
            cfg.points = p;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub split: Option<PathBuf>,
    pub threshold: Option<f64>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            out: default_out(),
            checkpoint: None,
            dataset: DatasetSource::default(),
            split: None,
            threshold: None,
        }
    }
}

impl ScoreConfig {
    pub fn resolve(
        c: &Common,
        checkpoint: Option<PathBuf>,
        dataset: Option<PathBuf>,
        split: Option<PathBuf>,
        threshold: Option<f64>,
    ) -> Result<Self, Failure> {
        let mut cfg: Self = load(c.config.as_deref())?;
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        if checkpoint.is_some() {
            cfg.checkpoint = checkpoint;
        }
        cfg.dataset.apply(dataset, None, None);
        if split.is_some() {
            cfg.split = split;
        }
        if threshold.is_some() {
            cfg.threshold = threshold;
        }
        required(cfg.checkpoint.clone(), "checkpoint")?;
        required(cfg.dataset.path.clone(), "dataset")?;
        Ok(cfg)
    }
}
