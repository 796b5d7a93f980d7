use serde::Serialize;

use ltlab::rng::keys;
use ltlab::theory::{
    check_lemma1, check_theorem1, check_theorem2, implicit_la_equivalence, nc_synth, sweep_table, NcSynthConfig, SweepRow,
    TheoremReport, Verdict,
};
use ltlab::RngStream;

use super::Loaded;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;
use crate::pool::parallel_map;

/// Folds several verdicts: any violation wins, then any inapplicable premise.
pub fn combine(verdicts: impl IntoIterator<Item = Verdict>) -> Verdict {
    let mut out = Verdict::Holds;
    for v in verdicts {
        match v {
            Verdict::Violated => return Verdict::Violated,
            Verdict::NotApplicable => out = Verdict::NotApplicable,
            Verdict::Holds => {}
        }
    }
    out
}

/// Exit-code mapping: holds is success, violation is a runtime failure.
pub fn verdict_result(name: &str, v: Verdict, detail: &str) -> CliResult<()> {
    match v {
        Verdict::Holds => Ok(()),
        Verdict::NotApplicable => Err(CliError::NotApplicable(format!("{name}: {detail}"))),
        Verdict::Violated => Err(CliError::Runtime(format!("{name} violated: {detail}"))),
    }
}

fn premise_detail(r: &TheoremReport) -> String {
    let bad: Vec<String> = r
        .violated_premises()
        .iter()
        .map(|p| format!("{} (value {:.6e}, threshold {:.6e})", p.name, p.value, p.threshold))
        .collect();
    if bad.is_empty() {
        format!("{:?}", r.verdict)
    } else {
        format!("premises not met: {}", bad.join("; "))
    }
}

pub fn lemma1(cfg: &ExperimentConfig, out: &OutputDir) -> CliResult<()> {
    let l = &cfg.lemma1;
    let (report, table) = check_lemma1(&l.rhos, &l.classes, l.tol)?;
    out.table("lemma1.csv", &table)?;
    out.json("lemma1.json", &report)?;
    let detail = format!("max relative error {:.3e} (tol {:e})", report.measured["max_relative_error"], l.tol);
    eprintln!("lemma1: {:?}, {detail}", report.verdict);
    verdict_result("lemma1", report.verdict, &detail)
}

pub fn theorem1(loaded: &Loaded, out: &OutputDir) -> CliResult<()> {
    let max_pairs = loaded.config.theorem1.max_pairs.unwrap_or(usize::MAX);
    let mut rng = RngStream::new(loaded.seed).substream(keys::THEOREM);
    let report = check_theorem1(&loaded.net, &loaded.splits.train, max_pairs, &mut rng)?;
    out.json("theorem1.json", &report)?;
    let detail = match report.verdict {
        Verdict::NotApplicable => premise_detail(&report),
        _ => format!(
            "max inter-class cosine {:.6e}, bound {:.6e}",
            report.measured.get("max_inter_class_cosine").copied().unwrap_or(f64::NAN),
            report.bound.unwrap_or(f64::NAN)
        ),
    };
    eprintln!("theorem1: {:?}, {detail}", report.verdict);
    verdict_result("theorem1", report.verdict, &detail)
}

#[derive(Serialize)]
struct CellReport {
    rho: f64,
    classes: usize,
    report: TheoremReport,
    min_alignment: Option<f64>,
    fitted_exponent: Option<f64>,
}

/// One stationary-point analysis per `(ρ, C)` cell, each with its own
/// substream, run on `workers` threads and assembled in cell order.
pub fn theorem2(cfg: &ExperimentConfig, workers: usize, out: &OutputDir) -> CliResult<()> {
    let t = &cfg.theorem2;
    let root = RngStream::new(cfg.seeds[0]).substream(keys::THEOREM);
    let cells: Vec<(usize, (f64, usize))> = t.cells.iter().copied().enumerate().collect();
    let results = parallel_map(&cells, workers, |&(i, (rho, classes))| -> CliResult<(SweepRow, CellReport)> {
        let c = NcSynthConfig { rho, classes, ..t.base.clone() };
        c.validate()?;
        let s = nc_synth(&c, &mut root.substream(i as u64))?;
        let (report, a) = check_theorem2(&s.means, &s.counts, c.lambda, t.solver, t.offset_constant)?;
        let la = implicit_la_equivalence(&a.w_star, &s.means, &s.priors)?;
        let row = SweepRow {
            rho,
            classes,
            max_residual: a.max_residual,
            scaled_residual: a.max_residual * (c.lambda * a.rho * classes as f64).powi(2),
            offset_term: a.offset_term,
            scaled_weight_norm: a.scaled_weight_norm,
            grad_norm: a.grad_norm,
            iterations: a.iterations,
        };
        let min_alignment = la.alignment.iter().flatten().copied().reduce(f64::min);
        Ok((row, CellReport { rho, classes, report, min_alignment, fitted_exponent: la.fitted_exponent }))
    });
    let (rows, reports): (Vec<_>, Vec<_>) = results.into_iter().collect::<CliResult<Vec<_>>>()?.into_iter().unzip();
    out.table("theorem2_sweep.csv", &sweep_table(&rows))?;
    out.json("theorem2.json", &reports)?;
    for w in rows.windows(2) {
        eprintln!(
            "theorem2: rho {} -> {}: residual ratio {:.4}",
            w[0].rho,
            w[1].rho,
            w[1].max_residual / w[0].max_residual
        );
    }
    let verdict = combine(reports.iter().map(|r| r.report.verdict));
    let detail = format!("{} cells, worst gradient norm {:.3e}", rows.len(), rows.iter().map(|r| r.grad_norm).fold(0.0, f64::max));
    eprintln!("theorem2: {verdict:?}, {detail}");
    verdict_result("theorem2", verdict, &detail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdicts_fold_with_violation_first() {
        use Verdict::*;
        assert_eq!(combine([Holds, Holds]), Holds);
        assert_eq!(combine([Holds, NotApplicable]), NotApplicable);
        assert_eq!(combine([NotApplicable, Violated, Holds]), Violated);
        assert_eq!(combine([]), Holds);
        assert_eq!(verdict_result("x", NotApplicable, "").unwrap_err().exit_code(), 3);
        assert_eq!(verdict_result("x", Violated, "").unwrap_err().exit_code(), 2);
    }
}
