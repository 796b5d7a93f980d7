use std::time::Instant;

use serde::{Deserialize, Serialize};

use ltlab::classifier::LaConfig;
use ltlab::dataset::GroupAssignment;
use ltlab::metrics::forgetting_scores;
use ltlab::table::{fmt_opt, Table};
use ltlab::trainer::{run_preset, to_jsonl, EvalReport, GammaTrial, RunOutput};
use ltlab::RngStream;

use crate::aggregate::{methods_csv, methods_markdown, Aggregate};
use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::output::OutputDir;
use crate::pool::parallel_map;

/// Enough to rebuild the run's data and network for later commands.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Experiment {
    pub seed: u64,
    pub config: ExperimentConfig,
}

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const AGGREGATE_FILE: &str = "aggregate.json";

#[derive(Serialize)]
struct SeedReport<'a> {
    preset: &'a str,
    seed: u64,
    la: LaConfig,
    report: &'a EvalReport,
    gamma_search: &'a Option<Vec<GammaTrial>>,
}

struct SeedRun {
    seed: u64,
    out: RunOutput,
    groups: GroupAssignment,
    counts: Vec<usize>,
    forgetting: Option<Vec<Option<f64>>>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> CliResult<SeedRun> {
    let start = Instant::now();
    let splits = cfg.splits(seed)?;
    let classes = splits.train.classes;
    let groups = cfg.groups(&splits.train.class_counts)?;
    let (preset, sgd) = cfg.preset(classes)?;
    let net_spec = cfg.net_spec(splits.train.dim(), classes);
    let out = run_preset(&preset, &net_spec, &splits, &sgd, &groups, &RngStream::new(seed))?;
    let history = out.logs.first().map(|l| l.history()).unwrap_or_default();
    let forgetting = if history.len() >= 2 {
        Some(forgetting_scores(&history, &splits.train.y, classes)?.per_class_mean)
    } else {
        None
    };
    eprintln!(
        "seed {seed}: {} average accuracy {:.4} ({:.1}s)",
        preset.name,
        out.report.accuracy.average,
        start.elapsed().as_secs_f64()
    );
    Ok(SeedRun {
        seed,
        out,
        groups,
        counts: splits.train.class_counts,
        forgetting,
    })
}

fn forgetting_table(run: &SeedRun, per_class: &[Option<f64>]) -> Table {
    let mut t = Table::new(["class", "count", "group", "mean_forgetting"]);
    for (k, f) in per_class.iter().enumerate() {
        t.push(vec![
            k.to_string(),
            run.counts[k].to_string(),
            format!("{:?}", run.groups.groups[k]).to_lowercase(),
            fmt_opt(*f),
        ]);
    }
    t
}

/// Trains every seed, then writes per-seed artifacts and the aggregate.
pub fn run(cfg: &ExperimentConfig, seeds: &[u64], workers: usize, out: &OutputDir) -> CliResult<Aggregate> {
    let preset_name = cfg.method()?.preset.clone();
    let results = parallel_map(seeds, workers, |&s| run_seed(cfg, s));
    let runs = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    out.json("config.json", cfg)?;
    for run in &runs {
        let dir = out.subdir(&format!("seed-{}", run.seed))?;
        run.out.net.save_checkpoint(dir.path(), "model")?;
        dir.bytes("run.jsonl", to_jsonl(&run.out.logs)?.as_bytes())?;
        dir.json(
            "report.json",
            &SeedReport {
                preset: &preset_name,
                seed: run.seed,
                la: run.out.la,
                report: &run.out.report,
                gamma_search: &run.out.gamma_search,
            },
        )?;
        dir.json(EXPERIMENT_FILE, &Experiment { seed: run.seed, config: cfg.clone() })?;
        if let Some(search) = &run.out.la_search {
            dir.table("la_search.csv", &search.table())?;
        }
        if let Some(f) = &run.forgetting {
            dir.table("forgetting.csv", &forgetting_table(run, f))?;
        }
    }
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.out.report.clone()).collect();
    let agg = Aggregate::from_reports(&preset_name, seeds, &reports);
    out.json(AGGREGATE_FILE, &agg)?;
    out.bytes("aggregate.md", methods_markdown(std::slice::from_ref(&agg)).as_bytes())?;
    out.table("aggregate.csv", &methods_csv(std::slice::from_ref(&agg)))?;
    Ok(agg)
}
