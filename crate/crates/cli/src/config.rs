//! Experiment configuration: one JSON file, validated before any work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ltlab::dataset::{
    assign_groups, load_idx, subsample_longtailed, synth_gaussian_lt, GaussianSpec, GroupAssignment, GroupThresholds,
    LabeledSet, LongTailProfile, Splits,
};
use ltlab::network::{Arch, NetSpec};
use ltlab::rng::keys;
use ltlab::theory::{NcSynthConfig, SolverConfig};
use ltlab::trainer::{MethodPreset, PresetParams, SgdConfig};
use ltlab::RngStream;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub groups: GroupsConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub method: Option<MethodConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub lemma1: Lemma1Config,
    #[serde(default)]
    pub theorem1: Theorem1Config,
    #[serde(default)]
    pub theorem2: Theorem2Config,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Idx(IdxConfig),
    /// Splits previously written by `ltlab synth`.
    Files { dir: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub head_count: usize,
    pub rho: f64,
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "one")]
    pub cov_scale: f64,
    #[serde(default = "default_val")]
    pub val_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
}

fn default_separation() -> f64 {
    3.0
}
fn one() -> f64 {
    1.0
}
fn default_val() -> usize {
    20
}
fn default_test() -> usize {
    100
}

/// Balanced IDX files subsampled to a long-tailed profile. A seeded
/// validation split is carved out of the training file first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub rho: f64,
    /// Defaults to the smallest class size left after the validation split.
    #[serde(default)]
    pub head_count: Option<usize>,
    #[serde(default = "default_idx_val")]
    pub val_per_class: usize,
}

fn default_idx_val() -> usize {
    10
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupsConfig {
    #[default]
    Tertiles,
    Cifar10,
    Cifar100,
    Thresholds { many_min: usize, few_max: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_arch")]
    pub arch: Arch,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default)]
    pub head_bias: bool,
}

fn default_arch() -> Arch {
    Arch::Mlp
}
fn default_depth() -> usize {
    3
}
fn default_width() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    /// A base preset name, optionally suffixed `+add` or `+mult`.
    pub preset: String,
    #[serde(default)]
    pub params: PresetParams,
    /// One optimizer setting per stage; defaults to `lr0 0.05, batch 64, 30 epochs` each.
    #[serde(default)]
    pub stages: Option<Vec<SgdConfig>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub probes: usize,
    pub max_pairs: usize,
    pub jitter: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            probes: 3,
            max_pairs: 10_000,
            jitter: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lemma1Config {
    pub rhos: Vec<f64>,
    pub classes: Vec<usize>,
    pub tol: f64,
}

impl Default for Lemma1Config {
    fn default() -> Self {
        Self {
            rhos: vec![2.0, 10.0, 100.0, 1000.0],
            classes: vec![2, 3, 10, 50, 100],
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem1Config {
    /// `None` checks every inter-class pair.
    pub max_pairs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Theorem2Config {
    pub base: NcSynthConfig,
    /// `(ρ, C)` cells; the other fields come from `base`.
    pub cells: Vec<(f64, usize)>,
    pub offset_constant: Option<f64>,
    pub solver: SolverConfig,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Self {
            base: NcSynthConfig::new(50, 64, 50.0, 0.1),
            cells: vec![(50.0, 50), (100.0, 50), (200.0, 50)],
            offset_constant: None,
            solver: SolverConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config; relative data paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: schema error: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            Some(DatasetConfig::Idx(c)) => {
                fix(&mut c.train_images);
                fix(&mut c.train_labels);
                fix(&mut c.test_images);
                fix(&mut c.test_labels);
            }
            Some(DatasetConfig::Files { dir }) => fix(dir),
            _ => {}
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::usage("seeds must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(CliError::usage("seeds must be distinct"));
        }
        match &self.dataset {
            Some(DatasetConfig::Synthetic(s)) => {
                LongTailProfile::new(s.classes, s.head_count, s.rho)?;
                if s.dim == 0 {
                    return Err(CliError::usage("dataset.synthetic.dim must be positive"));
                }
            }
            Some(DatasetConfig::Idx(c)) if !(c.rho >= 1.0) => {
                return Err(CliError::usage("dataset.idx.rho must be >= 1"));
            }
            _ => {}
        }
        if let Some(m) = &self.method {
            let preset = MethodPreset::named(&m.preset, &m.params, 2)?;
            if let Some(stages) = &m.stages {
                if stages.len() != preset.stages.len() {
                    return Err(CliError::usage(format!(
                        "preset '{}' has {} stages but method.stages has {}",
                        m.preset,
                        preset.stages.len(),
                        stages.len()
                    )));
                }
                stages.iter().try_for_each(SgdConfig::validate)?;
            }
        }
        if self.metrics.probes == 0 {
            return Err(CliError::usage("metrics.probes must be positive"));
        }
        self.theorem2.base.validate()?;
        Ok(())
    }

    pub fn dataset(&self) -> CliResult<&DatasetConfig> {
        self.dataset.as_ref().ok_or_else(|| CliError::usage("config has no 'dataset' section"))
    }

    pub fn method(&self) -> CliResult<&MethodConfig> {
        self.method.as_ref().ok_or_else(|| CliError::usage("config has no 'method' section"))
    }

    pub fn model(&self) -> ModelConfig {
        self.model.clone().unwrap_or(ModelConfig {
            arch: default_arch(),
            depth: default_depth(),
            width: default_width(),
            head_bias: false,
        })
    }

    pub fn preset(&self, classes: usize) -> CliResult<(MethodPreset, Vec<SgdConfig>)> {
        let m = self.method()?;
        let preset = MethodPreset::named(&m.preset, &m.params, classes)?;
        let sgd = m
            .stages
            .clone()
            .unwrap_or_else(|| vec![SgdConfig::new(0.05, 64, 30); preset.stages.len()]);
        Ok((preset, sgd))
    }

    pub fn net_spec(&self, input_dim: usize, classes: usize) -> NetSpec {
        let m = self.model();
        NetSpec {
            arch: m.arch,
            input_dim,
            width: m.width,
            depth: m.depth,
            classes,
            head_bias: m.head_bias,
        }
    }

    pub fn groups(&self, counts: &[usize]) -> CliResult<GroupAssignment> {
        let t = match self.groups {
            GroupsConfig::Tertiles => GroupThresholds::tertiles(counts),
            GroupsConfig::Cifar10 => GroupThresholds::cifar10(),
            GroupsConfig::Cifar100 => GroupThresholds::cifar100(),
            GroupsConfig::Thresholds { many_min, few_max } => GroupThresholds { many_min, few_max },
        };
        Ok(assign_groups(counts, t)?)
    }

    /// The splits for one seed; synthetic data comes from the seed's data substream.
    pub fn splits(&self, seed: u64) -> CliResult<Splits> {
        let mut rng = RngStream::new(seed).substream(keys::DATA);
        match self.dataset()? {
            DatasetConfig::Synthetic(s) => {
                let profile = LongTailProfile::new(s.classes, s.head_count, s.rho)?;
                let spec = GaussianSpec {
                    val_per_class: s.val_per_class,
                    test_per_class: s.test_per_class,
                    ..GaussianSpec::new(s.dim, s.separation, s.cov_scale)
                };
                Ok(synth_gaussian_lt(&profile, &spec, &mut rng)?)
            }
            DatasetConfig::Idx(c) => {
                let full = load_idx(&c.train_images, &c.train_labels)?;
                let test = load_idx(&c.test_images, &c.test_labels)?;
                let (val, rest) = split_validation(&full, c.val_per_class, &mut rng)?;
                let head = match c.head_count {
                    Some(h) => h,
                    None => rest.class_counts.iter().copied().min().unwrap_or(0),
                };
                let profile = LongTailProfile::new(full.classes, head, c.rho)?;
                let train = subsample_longtailed(&rest, &profile, &mut RngStream::new(seed).substream(keys::SUBSAMPLE))?;
                let test = LabeledSet::new(test.x, test.y, full.classes)?;
                Ok(Splits { train, val, test })
            }
            DatasetConfig::Files { dir } => Ok(Splits {
                train: LabeledSet::load(dir, "train")?,
                val: LabeledSet::load(dir, "val")?,
                test: LabeledSet::load(dir, "test")?,
            }),
        }
    }
}

/// `per_class` random samples of every class become the validation set.
fn split_validation(set: &LabeledSet, per_class: usize, rng: &mut RngStream) -> CliResult<(LabeledSet, LabeledSet)> {
    let mut val = Vec::new();
    let mut rest = Vec::new();
    for (k, idx) in set.indices_by_class().iter().enumerate() {
        if idx.len() <= per_class {
            return Err(CliError::usage(format!(
                "class {k} has {} samples; cannot hold out {per_class} for validation",
                idx.len()
            )));
        }
        let mut picked = vec![false; idx.len()];
        for p in rng.sample_without_replacement(idx.len(), per_class) {
            picked[p] = true;
        }
        for (i, &j) in idx.iter().enumerate() {
            if picked[i] {
                val.push(j);
            } else {
                rest.push(j);
            }
        }
    }
    val.sort_unstable();
    rest.sort_unstable();
    Ok((set.subset(&val), set.subset(&rest)))
}
