pub mod metrics;
pub mod report;
pub mod synth;
pub mod train;
pub mod verify;

use std::path::Path;

use ltlab::dataset::{LabeledSet, Splits};
use ltlab::network::Network;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use train::{Experiment, EXPERIMENT_FILE};

/// A trained network together with the data it is analysed on.
pub struct Loaded {
    pub net: Network,
    pub splits: Splits,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Loads `model.{bin,json}` from a seed directory written by `train` and
/// regenerates its data from the recorded config.
pub fn load_run(run: &Path) -> CliResult<Loaded> {
    let path = run.join(EXPERIMENT_FILE);
    let bytes = std::fs::read(&path).map_err(|e| {
        CliError::usage(format!(
            "{}: {e}; expected a seed directory written by `ltlab train`",
            path.display()
        ))
    })?;
    let exp: Experiment = serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    exp.config.validate()?;
    Ok(Loaded {
        net: Network::load_checkpoint(run, "model")?,
        splits: exp.config.splits(exp.seed)?,
        seed: exp.seed,
        config: exp.config,
    })
}

/// A checkpoint directory plus a dataset directory written by `synth`.
pub fn load_pair(checkpoint: &Path, data: &Path, config: ExperimentConfig, seed: u64) -> CliResult<Loaded> {
    Ok(Loaded {
        net: Network::load_checkpoint(checkpoint, "model")?,
        splits: Splits {
            train: LabeledSet::load(data, "train")?,
            val: LabeledSet::load(data, "val")?,
            test: LabeledSet::load(data, "test")?,
        },
        seed,
        config,
    })
}
