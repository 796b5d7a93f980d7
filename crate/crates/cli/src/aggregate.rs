//! Multi-seed mean ± std summaries and method comparison tables.

use serde::{Deserialize, Serialize};

use ltlab::table::{fmt_opt, Table};
use ltlab::trainer::{EvalReport, PRESET_NAMES};

/// Mean and sample standard deviation over the defined values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: Option<f64>,
    /// `n − 1` denominator; 0 for a single value.
    pub std: Option<f64>,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    let n = v.len();
    if n == 0 {
        return Summary { n, mean: None, std: None };
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n == 1 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Summary {
        n,
        mean: Some(mean),
        std: Some(std),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaColumn {
    None,
    Add,
    Mult,
}

impl LaColumn {
    fn label(self) -> &'static str {
        match self {
            LaColumn::None => "N/A",
            LaColumn::Add => "Add",
            LaColumn::Mult => "Mult",
        }
    }
}

/// Splits `wd+mult` into `("wd", Mult)`.
pub fn split_preset(name: &str) -> (&str, LaColumn) {
    match name.split_once('+') {
        Some((b, "add")) => (b, LaColumn::Add),
        Some((b, "mult")) => (b, LaColumn::Mult),
        _ => (name, LaColumn::None),
    }
}

pub fn display_name(base: &str) -> String {
    match base {
        "ce" => "CE",
        "cb" => "CB",
        "wd" => "WD",
        "wb" => "WB",
        "wb-renorm" => "WB (renorm)",
        "wd-etf" => "WD&ETF",
        "wd-fr-etf" => "WD&FR&ETF",
        "wd-no-bn" => "WD w/o BN",
        "wd-fixed-bn" => "WD fixed BN",
        other => other,
    }
    .to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub fdr_train: Summary,
    pub fdr_test: Summary,
    pub many: Summary,
    pub medium: Summary,
    pub few: Summary,
    pub average: Summary,
}

impl Aggregate {
    pub fn from_reports(preset: &str, seeds: &[u64], reports: &[EvalReport]) -> Self {
        let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| summarize(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            preset: preset.to_string(),
            seeds: seeds.to_vec(),
            fdr_train: col(&|r| r.fdr_train),
            fdr_test: col(&|r| r.fdr_test),
            many: col(&|r| r.accuracy.many),
            medium: col(&|r| r.accuracy.medium),
            few: col(&|r| r.accuracy.few),
            average: col(&|r| Some(r.accuracy.average)),
        }
    }

    /// Reporting order: base presets in their canonical order, unknown names
    /// last, then no adjustment, additive, multiplicative.
    pub fn sort_key(&self) -> (usize, String, LaColumn) {
        let (base, la) = split_preset(&self.preset);
        let rank = PRESET_NAMES.iter().position(|p| *p == base).unwrap_or(PRESET_NAMES.len());
        (rank, base.to_string(), la)
    }

    fn columns(&self) -> [&Summary; 6] {
        [&self.fdr_train, &self.fdr_test, &self.many, &self.medium, &self.few, &self.average]
    }
}

const COLUMNS: [&str; 6] = ["fdr_train", "fdr_test", "many", "medium", "few", "average"];

/// `1.28e2 ± 9.0e0`, the scale FDRs span.
fn fmt_fdr(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.2e} ± {sd:.1e}"),
        _ => "n/a".into(),
    }
}

/// Accuracy in percent with one decimal.
fn fmt_acc(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd),
        _ => "n/a".into(),
    }
}

pub fn methods_markdown(rows: &[Aggregate]) -> String {
    let mut out = String::from("| Method | LA | FDR train | FDR test | Many | Medium | Few | Average |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    for a in rows {
        let (base, la) = split_preset(&a.preset);
        let c = a.columns();
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            display_name(base),
            la.label(),
            fmt_fdr(c[0]),
            fmt_fdr(c[1]),
            fmt_acc(c[2]),
            fmt_acc(c[3]),
            fmt_acc(c[4]),
            fmt_acc(c[5]),
        ));
    }
    out
}

pub fn methods_csv(rows: &[Aggregate]) -> Table {
    let mut header = vec!["preset".to_string(), "la".to_string(), "seeds".to_string()];
    for c in COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    let mut t = Table::new(header);
    for a in rows {
        let (base, la) = split_preset(&a.preset);
        let mut row = vec![base.to_string(), la.label().to_string(), a.seeds.len().to_string()];
        for s in a.columns() {
            row.push(fmt_opt(s.mean));
            row.push(fmt_opt(s.std));
        }
        t.push(row);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use ltlab::classifier::AccuracySummary;

    fn report(avg: f64, few: Option<f64>) -> EvalReport {
        EvalReport {
            accuracy: AccuracySummary {
                per_class: vec![],
                many: Some(1.0),
                medium: None,
                few,
                average: avg,
            },
            fdr_train: Some(120.0),
            fdr_test: None,
        }
    }

    #[test]
    fn sample_std_matches_hand_computation() {
        // values 1, 2, 4: mean 7/3, squared deviations sum 14/3, /2 → 7/3
        let s = summarize(&[Some(1.0), Some(2.0), None, Some(4.0)]);
        assert_eq!(s.n, 3);
        assert!((s.mean.unwrap() - 7.0 / 3.0).abs() < 1e-15);
        assert!((s.std.unwrap() - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(summarize(&[Some(5.0)]).std, Some(0.0));
        assert_eq!(summarize(&[None]).mean, None);
    }

    #[test]
    fn rows_follow_method_then_adjustment_order() {
        let mut rows: Vec<Aggregate> = ["zzz", "wd+mult", "wd-fr-etf", "ce", "wd", "wd+add"]
            .iter()
            .map(|p| Aggregate::from_reports(p, &[0], &[report(0.5, Some(0.25))]))
            .collect();
        rows.sort_by_key(Aggregate::sort_key);
        let order: Vec<&str> = rows.iter().map(|a| a.preset.as_str()).collect();
        assert_eq!(order, ["ce", "wd", "wd+add", "wd+mult", "wd-fr-etf", "zzz"]);
    }

    #[test]
    fn markdown_formats_percent_and_missing_values() {
        let a = Aggregate::from_reports("wd+mult", &[0, 1], &[report(0.5, Some(0.25)), report(0.7, Some(0.35))]);
        let md = methods_markdown(&[a.clone()]);
        let line = md.lines().nth(2).unwrap();
        assert!(line.starts_with("| WD | Mult | 1.20e2 ± 0.0e0 | n/a | 100.0 ± 0.0 | n/a | 30.0 ± 7.1 | 60.0 ± 14.1 |"), "{line}");
        let csv = methods_csv(&[a]).to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("wd,Mult,2,"));
    }
}
