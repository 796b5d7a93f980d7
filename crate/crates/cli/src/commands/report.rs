use std::path::{Path, PathBuf};

use crate::aggregate::{methods_csv, methods_markdown, Aggregate};
use crate::commands::train::AGGREGATE_FILE;
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;

/// `aggregate.json` in `dir` itself and in each immediate subdirectory.
fn find_aggregates(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut found = Vec::new();
    let own = dir.join(AGGREGATE_FILE);
    if own.is_file() {
        found.push(own);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    found.extend(subdirs.into_iter().map(|d| d.join(AGGREGATE_FILE)).filter(|p| p.is_file()));
    Ok(found)
}

pub fn collect(dir: &Path) -> CliResult<Vec<Aggregate>> {
    let paths = find_aggregates(dir)?;
    if paths.is_empty() {
        return Err(CliError::usage(format!(
            "no completed runs under {}; expected artifacts written by `ltlab train`:\n  \
             <dir>/{AGGREGATE_FILE} or <dir>/<run>/{AGGREGATE_FILE}\n  \
             <run>/config.json, <run>/aggregate.md, <run>/aggregate.csv\n  \
             <run>/seed-<s>/{{model.bin, model.json, run.jsonl, report.json, experiment.json}}",
            dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        rows.push(serde_json::from_slice::<Aggregate>(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?);
    }
    rows.sort_by_key(Aggregate::sort_key);
    Ok(rows)
}

/// Writes `methods.md` and `methods.csv`.
pub fn run(dir: &Path, out: &OutputDir) -> CliResult<Vec<Aggregate>> {
    let rows = collect(dir)?;
    out.bytes("methods.md", methods_markdown(&rows).as_bytes())?;
    out.table("methods.csv", &methods_csv(&rows))?;
    Ok(rows)
}
