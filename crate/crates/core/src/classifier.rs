//! Fixed simplex-ETF heads, additive and multiplicative logit adjustment,
//! accuracy summaries and the validation grid search over adjustment
//! strength.

use serde::{Deserialize, Serialize};

use crate::dataset::{Group, GroupAssignment};
use crate::error::{Error, Result};
use crate::linalg::{matmul_nt, qr_thin, Matrix};
use crate::network::{LinearLayer, Network};
use crate::rng::{keys, RngStream};
use crate::table::{fmt_num, fmt_opt, Table};

/// How the orthonormal basis `U` of an ETF is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtfBasis {
    /// QR of a seeded Gaussian `d × C` matrix.
    #[default]
    RandomQr,
    /// The first `C` standard basis vectors.
    Canonical,
    /// Column `k` spreads evenly over the `k`-th of `C` disjoint blocks of
    /// `⌊d/C⌋` coordinates. Like `Canonical` it is nonnegative, so ReLU
    /// features can align with it, but no class hangs on a single unit.
    Blocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtfSpec {
    pub dim: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub energy: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub basis: EtfBasis,
}

fn one() -> f64 {
    1.0
}

impl EtfSpec {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            dim,
            classes,
            energy: 1.0,
            seed: 0,
            basis: EtfBasis::RandomQr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("an ETF needs at least 2 classes".into()));
        }
        if self.classes > self.dim {
            return Err(Error::Config(format!(
                "ETF needs classes <= dim, got {} > {}",
                self.classes, self.dim
            )));
        }
        if !(self.energy > 0.0) {
            return Err(Error::Config("ETF energy must be positive".into()));
        }
        Ok(())
    }
}

/// Simplex ETF `W = √(E·C/(C−1)) · U (I − 11ᵀ/C)` as a `d × C` matrix.
pub fn make_etf(spec: &EtfSpec) -> Result<Matrix> {
    spec.validate()?;
    let (d, c) = (spec.dim, spec.classes);
    let u = match spec.basis {
        EtfBasis::RandomQr => {
            let mut rng = RngStream::new(spec.seed).substream(keys::ETF);
            qr_thin(&rng.gaussian_matrix(d, c, 0.0, 1.0))?.0
        }
        EtfBasis::Canonical => Matrix::from_fn(d, c, |i, j| if i == j { 1.0 } else { 0.0 }),
        EtfBasis::Blocks => {
            let b = d / c;
            let v = 1.0 / (b as f64).sqrt();
            Matrix::from_fn(d, c, |i, j| if i / b == j { v } else { 0.0 })
        }
    };
    let scale = (spec.energy * c as f64 / (c as f64 - 1.0)).sqrt();
    let mut w = Matrix::zeros(d, c);
    for i in 0..d {
        let row = u.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        for (k, v) in row.iter().enumerate() {
            w[(i, k)] = scale * (v - mean);
        }
    }
    Ok(w)
}

/// Largest deviation of `WᵀW` from `E·C/(C−1)·(I − 11ᵀ/C)`.
pub fn etf_gram_error(w: &Matrix, energy: f64) -> f64 {
    let c = w.cols() as f64;
    let gram = crate::linalg::matmul_tn(w, w).expect("square gram");
    let s = energy * c / (c - 1.0);
    let mut worst = 0.0f64;
    for i in 0..w.cols() {
        for j in 0..w.cols() {
            let target = s * (if i == j { 1.0 } else { 0.0 } - 1.0 / c);
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

/// Training-set class priors `N_k / N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub probs: Vec<f64>,
}

impl ClassPriors {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Config("priors need positive counts for every class".into()));
        }
        let n: usize = counts.iter().sum();
        Ok(Self {
            probs: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        })
    }

    pub fn uniform(classes: usize) -> Self {
        Self {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LaConfig {
    #[default]
    None,
    Additive {
        tau: f64,
    },
    Multiplicative {
        gamma: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaKind {
    Additive,
    Multiplicative,
}

impl LaKind {
    pub fn config(self, value: f64) -> LaConfig {
        match self {
            LaKind::Additive => LaConfig::Additive { tau: value },
            LaKind::Multiplicative => LaConfig::Multiplicative { gamma: value },
        }
    }

    /// Search grid: `τ ∈ {1.00, 1.05, …, 2.00}` or `γ ∈ {0.00, 0.05, …, 1.00}`.
    pub fn default_grid(self) -> Vec<f64> {
        let base = match self {
            LaKind::Additive => 100,
            LaKind::Multiplicative => 0,
        };
        (0..=20).map(|i| (base + 5 * i) as f64 / 100.0).collect()
    }
}

/// Column `k` becomes `P_k^{−γ} · w_k / ‖w_k‖` (`w` is `d × C`).
pub fn multiplicative_la(w: &Matrix, priors: &ClassPriors, gamma: f64) -> Result<Matrix> {
    if priors.len() != w.cols() {
        return Err(Error::contract("one prior per head column required"));
    }
    let mut out = w.clone();
    for (k, n) in w.column_norms().into_iter().enumerate() {
        if n == 0.0 {
            return Err(Error::contract(format!("head column {k} has zero norm")));
        }
        out.scale_column(k, priors.probs[k].powf(-gamma) / n);
    }
    Ok(out)
}

/// `−τ · log P_k` per class.
pub fn additive_offsets(priors: &ClassPriors, tau: f64) -> Vec<f64> {
    priors.probs.iter().map(|p| -tau * p.ln()).collect()
}

/// `z'_k = z_k − τ · log P_k`.
pub fn additive_la(logits: &Matrix, priors: &ClassPriors, tau: f64) -> Matrix {
    let off = additive_offsets(priors, tau);
    Matrix::from_fn(logits.rows(), logits.cols(), |r, c| logits[(r, c)] + off[c])
}

/// Applies an adjustment to a trained network in place.
pub fn apply_la(net: &mut Network, priors: &ClassPriors, config: LaConfig) -> Result<()> {
    match config {
        LaConfig::None => Ok(()),
        LaConfig::Additive { tau } => net.set_logit_offset(Some(additive_offsets(priors, tau))),
        LaConfig::Multiplicative { gamma } => {
            let w = multiplicative_la(&net.head().columns(), priors, gamma)?;
            net.head_mut().set_columns(&w)
        }
    }
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Per-class, per-group and class-averaged accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    /// Unweighted mean of the per-class accuracies.
    pub average: f64,
}

impl AccuracySummary {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn summarize_accuracy(pred: &[usize], labels: &[usize], groups: &GroupAssignment) -> AccuracySummary {
    let c = groups.groups.len();
    let mut hit = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&p, &y) in pred.iter().zip(labels) {
        total[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let group_mean = |g: Group| mean_present(groups.members(g).into_iter().map(|k| per_class[k]));
    AccuracySummary {
        many: group_mean(Group::Many),
        medium: group_mean(Group::Medium),
        few: group_mean(Group::Few),
        average: mean_present(per_class.iter().copied()).unwrap_or(0.0),
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaGridRow {
    pub parameter: f64,
    pub accuracy: AccuracySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaSearch {
    pub kind: LaKind,
    pub best: f64,
    pub rows: Vec<LaGridRow>,
}

impl LaSearch {
    pub fn best_config(&self) -> LaConfig {
        self.kind.config(self.best)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["parameter", "many", "medium", "few", "average"]);
        for r in &self.rows {
            t.push(vec![
                fmt_num(r.parameter),
                fmt_opt(r.accuracy.many),
                fmt_opt(r.accuracy.medium),
                fmt_opt(r.accuracy.few),
                fmt_num(r.accuracy.average),
            ]);
        }
        t
    }
}

/// Logits of `head` on `features` under an adjustment.
pub fn adjusted_logits(
    features: &Matrix,
    head: &LinearLayer,
    priors: &ClassPriors,
    config: LaConfig,
) -> Result<Matrix> {
    match config {
        LaConfig::None => head.forward(features),
        LaConfig::Additive { tau } => Ok(additive_la(&head.forward(features)?, priors, tau)),
        LaConfig::Multiplicative { gamma } => {
            let w = multiplicative_la(&head.columns(), priors, gamma)?;
            let mut z = matmul_nt(features, &w.transpose())?;
            if let Some(b) = &head.bias {
                for r in 0..z.rows() {
                    z.row_mut(r).iter_mut().zip(b).for_each(|(v, b)| *v += b);
                }
            }
            Ok(z)
        }
    }
}

/// Evaluates every grid value on validation features and returns the one
/// with the highest class-averaged accuracy, preferring the smaller value on
/// ties.
pub fn grid_search_la(
    features: &Matrix,
    labels: &[usize],
    head: &LinearLayer,
    priors: &ClassPriors,
    groups: &GroupAssignment,
    kind: LaKind,
    grid: &[f64],
) -> Result<LaSearch> {
    if grid.is_empty() {
        return Err(Error::Config("logit-adjustment grid is empty".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &v in grid {
        if !(v >= 0.0) {
            return Err(Error::Config(format!("adjustment strength must be >= 0, got {v}")));
        }
        let z = adjusted_logits(features, head, priors, kind.config(v))?;
        rows.push(LaGridRow {
            parameter: v,
            accuracy: summarize_accuracy(&argmax_rows(&z), labels, groups),
        });
    }
    let best = rows
        .iter()
        .fold(None::<&LaGridRow>, |acc, r| match acc {
            None => Some(r),
            Some(b) => {
                let better = r.accuracy.average > b.accuracy.average
                    || (r.accuracy.average == b.accuracy.average && r.parameter < b.parameter);
                Some(if better { r } else { b })
            }
        })
        .unwrap()
        .parameter;
    Ok(LaSearch { kind, best, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assign_groups, GroupThresholds};
    use crate::linalg::{cosine, matmul};
    use crate::losses::softmax_rows;
    use proptest::prelude::*;

    #[test]
    fn block_basis_is_an_etf() {
        for (d, c) in [(64, 10), (10, 10), (7, 3)] {
            let w = make_etf(&EtfSpec {
                basis: EtfBasis::Blocks,
                ..EtfSpec::new(d, c)
            })
            .unwrap();
            assert!(etf_gram_error(&w, 1.0) <= 1e-12);
            // coordinates past the last full block stay unused
            for i in (d / c) * c..d {
                assert!(w.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn etf_two_classes_are_antipodal() {
        let w = make_etf(&EtfSpec::new(5, 2)).unwrap();
        let norms = w.column_norms();
        assert!((norms[0] - 1.0).abs() < 1e-12 && (norms[1] - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((w[(i, 0)] + w[(i, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn etf_geometry_and_errors() {
        for (d, c, e) in [(8, 4, 1.0), (64, 10, 2.5), (128, 100, 1.0)] {
            let spec = EtfSpec {
                energy: e,
                ..EtfSpec::new(d, c)
            };
            let w = make_etf(&spec).unwrap();
            assert!(etf_gram_error(&w, e) <= 1e-9);
            for n in w.column_norms() {
                assert!((n - e.sqrt()).abs() <= 1e-9);
            }
            let target = -1.0 / (c as f64 - 1.0);
            for i in 0..c {
                for j in i + 1..c {
                    assert!((cosine(&w.column(i), &w.column(j)).unwrap() - target).abs() <= 1e-9);
                }
            }
        }
        assert!(make_etf(&EtfSpec::new(3, 4)).is_err());
        let canon = EtfSpec {
            basis: EtfBasis::Canonical,
            ..EtfSpec::new(6, 4)
        };
        assert!(etf_gram_error(&make_etf(&canon).unwrap(), 1.0) < 1e-12);
        assert_eq!(make_etf(&EtfSpec::new(6, 4)).unwrap(), make_etf(&EtfSpec::new(6, 4)).unwrap());
    }

    #[test]
    fn multiplicative_examples() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0, 1.0], vec![4.0, 2.0, 1.0]]).unwrap();
        let unit = multiplicative_la(&w, &ClassPriors::uniform(3), 0.0).unwrap();
        for n in unit.column_norms() {
            assert!((n - 1.0).abs() < 1e-15);
        }
        let p = ClassPriors {
            probs: vec![0.9, 0.09, 0.01],
        };
        let m = multiplicative_la(&w, &p, 1.0).unwrap();
        for (n, q) in m.column_norms().iter().zip(&p.probs) {
            assert!((n - 1.0 / q).abs() < 1e-12 * (1.0 / q));
        }
        assert!(multiplicative_la(&Matrix::zeros(2, 3), &p, 1.0).is_err());
    }

    #[test]
    fn uniform_priors_keep_predictions() {
        let mut rng = RngStream::new(3);
        let f = rng.gaussian_matrix(20, 4, 0.0, 1.0);
        let w = renormalized(rng.gaussian_matrix(4, 3, 0.0, 1.0));
        let z = matmul(&f, &w).unwrap();
        let p = ClassPriors::uniform(3);
        let zm = matmul(&f, &multiplicative_la(&w, &p, 0.7).unwrap()).unwrap();
        assert_eq!(argmax_rows(&z), argmax_rows(&zm));
        assert_eq!(argmax_rows(&z), argmax_rows(&additive_la(&z, &p, 1.7)));
    }

    fn renormalized(w: Matrix) -> Matrix {
        crate::losses::renormalize_columns(&w, 1.0).unwrap()
    }

    #[test]
    fn additive_examples() {
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let even = ClassPriors {
            probs: vec![0.5, 0.5],
        };
        let skew = ClassPriors {
            probs: vec![0.9, 0.1],
        };
        assert_eq!(additive_la(&z, &even, 0.0), z);
        assert_eq!(argmax_rows(&additive_la(&z, &even, 1.0)), vec![0]);
        assert_eq!(argmax_rows(&additive_la(&z, &skew, 1.0)), vec![1]);
    }

    #[test]
    fn argmax_ties_go_low() {
        let z = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&z), vec![0, 1]);
    }

    fn toy_problem() -> (Matrix, Vec<usize>, LinearLayer, GroupAssignment) {
        let mut rng = RngStream::new(21);
        let n = 30;
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let f = Matrix::from_fn(n, 3, |r, c| if c == y[r] { 1.0 } else { 0.0 } + 0.8 * rng.standard_normal());
        let head = LinearLayer::new(Matrix::identity(3), None).unwrap();
        let groups = assign_groups(&[10, 10, 10], GroupThresholds { many_min: 0, few_max: 0 }).unwrap();
        (f, y, head, groups)
    }

    #[test]
    fn grid_search_single_point_and_tie_break() {
        let (f, y, head, groups) = toy_problem();
        let p = ClassPriors::uniform(3);
        let one = grid_search_la(&f, &y, &head, &p, &groups, LaKind::Additive, &[1.35]).unwrap();
        assert_eq!(one.best, 1.35);
        let g = LaKind::Multiplicative.default_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[1], 0.05);
        let s = grid_search_la(&f, &y, &head, &p, &groups, LaKind::Multiplicative, &g).unwrap();
        assert!(s.rows.iter().all(|r| r.accuracy.average == s.rows[0].accuracy.average));
        assert_eq!(s.best, 0.0);
        assert!(grid_search_la(&f, &y, &head, &p, &groups, LaKind::Additive, &[]).is_err());
        let csv = s.table().to_csv();
        assert!(csv.starts_with("parameter,many,medium,few,average\n"));
        assert_eq!(csv.lines().count(), 22);
    }

    #[test]
    fn grid_search_best_dominates_every_point() {
        let (f, y, head, groups) = toy_problem();
        let p = ClassPriors {
            probs: vec![0.7, 0.2, 0.1],
        };
        let s = grid_search_la(&f, &y, &head, &p, &groups, LaKind::Additive, &LaKind::Additive.default_grid()).unwrap();
        let best = s.rows.iter().find(|r| r.parameter == s.best).unwrap();
        assert!(s.rows.iter().all(|r| r.accuracy.average <= best.accuracy.average));
    }

    #[test]
    fn accuracy_summary_recomputes_average() {
        let groups = assign_groups(&[50, 20, 5], GroupThresholds { many_min: 30, few_max: 10 }).unwrap();
        let labels = [0, 0, 1, 1, 2, 2, 2, 2];
        let pred = [0, 1, 1, 1, 0, 2, 0, 0];
        let s = summarize_accuracy(&pred, &labels, &groups);
        assert_eq!(s.per_class, vec![Some(0.5), Some(1.0), Some(0.25)]);
        assert_eq!(s.average, (0.5 + 1.0 + 0.25) / 3.0);
        assert_eq!((s.many, s.medium, s.few), (Some(0.5), Some(1.0), Some(0.25)));
    }

    proptest! {
        #[test]
        fn etf_gram_identity(seed in 0u64..200, c in 2usize..12, extra in 0usize..10, e in 0.1f64..5.0) {
            let spec = EtfSpec { dim: c + extra, classes: c, energy: e, seed, basis: EtfBasis::RandomQr };
            prop_assert!(etf_gram_error(&make_etf(&spec).unwrap(), e) <= 1e-9);
        }

        #[test]
        fn unit_normalization_is_idempotent(seed in 0u64..200) {
            let mut rng = RngStream::new(seed);
            let w = rng.gaussian_matrix(4, 3, 0.0, 2.0);
            let p = ClassPriors { probs: vec![0.5, 0.3, 0.2] };
            let once = multiplicative_la(&w, &p, 0.0).unwrap();
            let twice = multiplicative_la(&once, &p, 0.0).unwrap();
            prop_assert!(once.sub(&twice).unwrap().max_abs() <= 1e-15);
        }

        #[test]
        fn additive_softmax_reweights_by_prior_power(seed in 0u64..200, tau in 0.0f64..2.0) {
            let mut rng = RngStream::new(seed);
            let z = rng.gaussian_matrix(3, 4, 0.0, 1.0);
            let p = ClassPriors { probs: vec![0.4, 0.3, 0.2, 0.1] };
            let adj = softmax_rows(&additive_la(&z, &p, tau));
            let base = softmax_rows(&z);
            for r in 0..3 {
                let w: Vec<f64> = (0..4).map(|k| base[(r, k)] * p.probs[k].powf(-tau)).collect();
                let s: f64 = w.iter().sum();
                for k in 0..4 {
                    prop_assert!((adj[(r, k)] - w[k] / s).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn uniform_priors_never_change_argmax(seed in 0u64..200, v in 0.0f64..3.0) {
            let mut rng = RngStream::new(seed);
            let z = rng.gaussian_matrix(5, 4, 0.0, 1.0);
            prop_assert_eq!(argmax_rows(&additive_la(&z, &ClassPriors::uniform(4), v)), argmax_rows(&z));
        }
    }
}
