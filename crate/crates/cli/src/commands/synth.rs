use serde::Serialize;

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::CliResult;
use crate::output::OutputDir;

#[derive(Serialize)]
struct SplitCounts {
    samples: usize,
    class_counts: Vec<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    classes: usize,
    dim: usize,
    train: SplitCounts,
    val: SplitCounts,
    test: SplitCounts,
    dataset: &'a DatasetConfig,
}

/// Writes `train`, `val`, `test` (`.mat` + `.json` each) and `manifest.json`.
pub fn run(cfg: &ExperimentConfig, seed: u64, out: &OutputDir) -> CliResult<()> {
    let splits = cfg.splits(seed)?;
    for (stem, set) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        set.save(out.path(), stem)?;
    }
    let counts = |s: &ltlab::dataset::LabeledSet| SplitCounts {
        samples: s.len(),
        class_counts: s.class_counts.clone(),
    };
    out.json(
        "manifest.json",
        &Manifest {
            seed,
            classes: splits.train.classes,
            dim: splits.train.dim(),
            train: counts(&splits.train),
            val: counts(&splits.val),
            test: counts(&splits.test),
            dataset: cfg.dataset()?,
        },
    )
}
