//! Feature-space diagnostics: Fisher's discriminant ratio, pairwise cosine
//! heatmaps, class-mean norms, BN parameter statistics, forgetting scores and
//! FDR after random ReLU probes.

use serde::{Deserialize, Serialize};

use crate::dataset::{Group, GroupAssignment};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, solve_spd, Matrix};
use crate::network::{LinearLayer, Mode, Network};
use crate::rng::RngStream;
use crate::table::{fmt_num, fmt_opt, Table};

/// Class means and their norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    /// `C × d`.
    pub class_means: Matrix,
    /// Unweighted mean of the class means.
    pub global_mean: Vec<f64>,
    pub mean_norms: Vec<f64>,
    pub counts: Vec<usize>,
}

fn check_labels(features: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::contract(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

impl FeatureStats {
    /// Every class must have at least one sample.
    pub fn compute(features: &Matrix, labels: &[usize], classes: usize) -> Result<Self> {
        check_labels(features, labels, classes)?;
        let d = features.cols();
        let mut sums = Matrix::zeros(classes, d);
        let mut counts = vec![0usize; classes];
        for (i, &y) in labels.iter().enumerate() {
            counts[y] += 1;
            for (s, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("class {k} has no samples")));
        }
        for (k, &n) in counts.iter().enumerate() {
            sums.row_mut(k).iter_mut().for_each(|v| *v /= n as f64);
        }
        let global_mean = sums.column_means();
        let mean_norms = (0..classes).map(|k| norm(sums.row(k))).collect();
        Ok(Self {
            class_means: sums,
            global_mean,
            mean_norms,
            counts,
        })
    }

    pub fn norms_table(&self) -> Table {
        let mut t = Table::new(["class", "count", "mean_norm"]);
        for (k, (n, c)) in self.mean_norms.iter().zip(&self.counts).enumerate() {
            t.push(vec![k.to_string(), c.to_string(), fmt_num(*n)]);
        }
        t
    }
}

/// `‖μ_k‖` per class.
pub fn mean_norms(features: &Matrix, labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    Ok(FeatureStats::compute(features, labels, classes)?.mean_norms)
}

/// `1e-8 · tr(S_W) / d`.
pub fn default_jitter(within_trace: f64, dim: usize) -> f64 {
    1e-8 * within_trace / dim as f64
}

/// Between- and within-class scatter `(S_B, S_W)` over the classes present.
pub fn scatter_matrices(features: &Matrix, labels: &[usize], classes: usize) -> Result<(Matrix, Matrix)> {
    check_labels(features, labels, classes)?;
    let d = features.cols();
    let mut sums = Matrix::zeros(classes, d);
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let present: Vec<usize> = (0..classes).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return Err(Error::contract("FDR needs at least two classes with samples"));
    }
    if features.rows() <= present.len() {
        return Err(Error::contract("FDR needs more samples than classes"));
    }
    for &k in &present {
        let n = counts[k] as f64;
        sums.row_mut(k).iter_mut().for_each(|v| *v /= n);
    }
    let mut mu = vec![0.0; d];
    for &k in &present {
        mu.iter_mut().zip(sums.row(k)).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= present.len() as f64);

    let mut sb = Matrix::zeros(d, d);
    for &k in &present {
        let diff: Vec<f64> = sums.row(k).iter().zip(&mu).map(|(a, b)| a - b).collect();
        let n = counts[k] as f64;
        for i in 0..d {
            for j in 0..d {
                sb[(i, j)] += n * diff[i] * diff[j];
            }
        }
    }
    let mut sw = Matrix::zeros(d, d);
    for (r, &y) in labels.iter().enumerate() {
        let diff: Vec<f64> = features.row(r).iter().zip(sums.row(y)).map(|(a, b)| a - b).collect();
        for i in 0..d {
            if diff[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                sw[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    Ok((sb, sw))
}

/// `Tr(S_W⁻¹ S_B)` with `jitter` added to the diagonal of `S_W`; `None`
/// selects [`default_jitter`].
pub fn fdr(features: &Matrix, labels: &[usize], classes: usize, jitter: Option<f64>) -> Result<f64> {
    let (sb, sw) = scatter_matrices(features, labels, classes)?;
    let j = jitter.unwrap_or_else(|| default_jitter(sw.trace(), features.cols()));
    Ok(solve_spd(&sw, &sb, j)?.trace())
}

/// Average pairwise cosine similarity between the features of two classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    /// `values[j][k]`; `None` where no pair exists.
    pub values: Vec<Vec<Option<f64>>>,
    /// Pairs averaged per cell.
    pub pairs: Vec<Vec<usize>>,
    /// Features with zero norm, left out of every pair.
    pub zero_norm_excluded: usize,
}

impl CosineMatrix {
    /// Mean over defined off-diagonal cells.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let mut vals = Vec::new();
        for (j, row) in self.values.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                if j != k {
                    vals.extend(*v);
                }
            }
        }
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn diagonal_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.values.len()).filter_map(|k| self.values[k][k]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// `C × C` grid; empty cells are undefined.
    pub fn table(&self) -> Table {
        let c = self.values.len();
        let mut t = Table::new(std::iter::once("class".to_string()).chain((0..c).map(|k| k.to_string())));
        for (j, row) in self.values.iter().enumerate() {
            let mut r = vec![j.to_string()];
            r.extend(row.iter().map(|v| fmt_opt(*v)));
            t.push(r);
        }
        t
    }
}

/// Pairwise-sample cosine heatmap. A cell with more than `max_pairs` pairs
/// is estimated from `max_pairs` uniformly drawn pairs; diagonal cells use
/// distinct samples only.
pub fn cosine_matrix(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    max_pairs: usize,
    rng: &mut RngStream,
) -> Result<CosineMatrix> {
    check_labels(features, labels, classes)?;
    if max_pairs == 0 {
        return Err(Error::Config("max_pairs must be positive".into()));
    }
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); classes];
    let mut zero = 0;
    for (i, &y) in labels.iter().enumerate() {
        let row = features.row(i);
        let n = norm(row);
        if n == 0.0 {
            zero += 1;
            continue;
        }
        members[y].push(row.iter().map(|v| v / n).collect());
    }
    let cos = |a: &[f64], b: &[f64]| dot(a, b).clamp(-1.0, 1.0);
    let mut values = vec![vec![None; classes]; classes];
    let mut pairs = vec![vec![0usize; classes]; classes];
    for j in 0..classes {
        for k in j..classes {
            let (a, b) = (&members[j], &members[k]);
            let total = if j == k {
                a.len() * a.len().saturating_sub(1) / 2
            } else {
                a.len() * b.len()
            };
            if total == 0 {
                continue;
            }
            let mut sum = 0.0;
            let used;
            if total <= max_pairs {
                if j == k {
                    for p in 0..a.len() {
                        for q in p + 1..a.len() {
                            sum += cos(&a[p], &a[q]);
                        }
                    }
                } else {
                    for u in a {
                        for v in b {
                            sum += cos(u, v);
                        }
                    }
                }
                used = total;
            } else {
                for _ in 0..max_pairs {
                    if j == k {
                        let p = rng.below(a.len());
                        let mut q = rng.below(a.len() - 1);
                        if q >= p {
                            q += 1;
                        }
                        sum += cos(&a[p], &a[q]);
                    } else {
                        sum += cos(&a[rng.below(a.len())], &b[rng.below(b.len())]);
                    }
                }
                used = max_pairs;
            }
            let mean = sum / used as f64;
            values[j][k] = Some(mean);
            values[k][j] = Some(mean);
            pairs[j][k] = used;
            pairs[k][j] = used;
        }
    }
    Ok(CosineMatrix {
        values,
        pairs,
        zero_norm_excluded: zero,
    })
}

/// Cosines between class-mean features.
pub fn class_mean_cosines(stats: &FeatureStats) -> Vec<Vec<Option<f64>>> {
    let c = stats.class_means.rows();
    (0..c)
        .map(|j| {
            (0..c)
                .map(|k| crate::linalg::cosine(stats.class_means.row(j), stats.class_means.row(k)))
                .collect()
        })
        .collect()
}

/// Pooled statistics of all BN scales and shifts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub gamma_mean: f64,
    pub gamma_std: f64,
    pub beta_mean: f64,
    pub beta_std: f64,
    pub count: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn bn_stats(net: &Network) -> Result<BnStats> {
    let layers = net.bn_layers();
    if layers.is_empty() {
        return Err(Error::contract("network has no batch-normalization layers"));
    }
    let gammas: Vec<f64> = layers.iter().flat_map(|b| b.gamma.iter().copied()).collect();
    let betas: Vec<f64> = layers.iter().flat_map(|b| b.beta.iter().copied()).collect();
    let (gamma_mean, gamma_std) = mean_std(&gammas);
    let (beta_mean, beta_std) = mean_std(&betas);
    Ok(BnStats {
        gamma_mean,
        gamma_std,
        beta_mean,
        beta_std,
        count: gammas.len(),
    })
}

/// Correct-to-incorrect transition counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRecord {
    pub per_sample: Vec<usize>,
    /// `None` for classes without samples.
    pub per_class_mean: Vec<Option<f64>>,
}

impl ForgettingRecord {
    pub fn group_mean(&self, groups: &GroupAssignment, g: Group) -> Option<f64> {
        let v: Vec<f64> = groups
            .members(g)
            .into_iter()
            .filter_map(|k| self.per_class_mean.get(k).copied().flatten())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// `history[e][i]` is whether sample `i` was classified correctly at epoch
/// `e`. A forgetting event is correct at `e`, incorrect at `e + 1`.
pub fn forgetting_scores(history: &[Vec<bool>], labels: &[usize], classes: usize) -> Result<ForgettingRecord> {
    if history.len() < 2 {
        return Err(Error::contract("forgetting scores need at least two epochs"));
    }
    let n = labels.len();
    if history.iter().any(|h| h.len() != n) {
        return Err(Error::contract("every epoch bitmap must cover all samples"));
    }
    let mut per_sample = vec![0usize; n];
    for w in history.windows(2) {
        for (i, s) in per_sample.iter_mut().enumerate() {
            if w[0][i] && !w[1][i] {
                *s += 1;
            }
        }
    }
    let mut sums = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&y, &s) in labels.iter().zip(&per_sample) {
        if y >= classes {
            return Err(Error::contract(format!("label {y} out of range")));
        }
        sums[y] += s;
        counts[y] += 1;
    }
    let per_class_mean = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s as f64 / c as f64))
        .collect();
    Ok(ForgettingRecord {
        per_sample,
        per_class_mean,
    })
}

/// FDR before and after each successive random ReLU layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeFdr {
    /// Entry 0 is the input features; entry `i` follows probe `i`.
    pub fdr: Vec<Option<f64>>,
    /// Depths at which every activation was zero.
    pub dead: Vec<bool>,
}

impl ProbeFdr {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["probes", "fdr", "dead"]);
        for (i, (f, d)) in self.fdr.iter().zip(&self.dead).enumerate() {
            t.push(vec![i.to_string(), fmt_opt(*f), d.to_string()]);
        }
        t
    }
}

/// A `d × d` layer with weights and bias uniform in `±1/√d`.
pub fn random_probe_layer(dim: usize, rng: &mut RngStream) -> LinearLayer {
    let b = 1.0 / (dim as f64).sqrt();
    let weight = rng.uniform_matrix(dim, dim, -b, b);
    let bias = (0..dim).map(|_| rng.uniform_range(-b, b)).collect();
    LinearLayer {
        weight,
        bias: Some(bias),
        trainable: false,
    }
}

/// Passes features through the given layers, applying ReLU after each and
/// recording FDR.
pub fn probe_fdr_with_layers(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    layers: &[LinearLayer],
    jitter: Option<f64>,
) -> Result<ProbeFdr> {
    let mut out = ProbeFdr {
        fdr: vec![fdr(features, labels, classes, jitter).ok()],
        dead: vec![features.max_abs() == 0.0],
    };
    let mut h = features.clone();
    for layer in layers {
        h = layer.forward(&h)?.map(|v| v.max(0.0));
        let dead = h.max_abs() == 0.0;
        out.dead.push(dead);
        out.fdr.push(if dead {
            None
        } else {
            fdr(&h, labels, classes, jitter).ok()
        });
    }
    Ok(out)
}

pub fn random_probe_fdr(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    probes: usize,
    rng: &mut RngStream,
    jitter: Option<f64>,
) -> Result<ProbeFdr> {
    if probes == 0 {
        return Err(Error::Config("at least one probe is required".into()));
    }
    let layers: Vec<LinearLayer> = (0..probes).map(|_| random_probe_layer(features.cols(), rng)).collect();
    probe_fdr_with_layers(features, labels, classes, &layers, jitter)
}

/// FDR of `ReLU(output)` after every extractor sub-layer.
pub fn relu_fdr_profile(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
    classes: usize,
    mode: Mode,
    jitter: Option<f64>,
) -> Result<Vec<Option<f64>>> {
    (0..=net.sublayer_count())
        .map(|i| {
            let h = net.extract_intermediate(x, i, mode)?.map(|v| v.max(0.0));
            Ok(fdr(&h, labels, classes, jitter).ok())
        })
        .collect()
}

/// Everything the metrics command reports for one feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub fdr: Option<f64>,
    pub cosine_off_diagonal: Option<f64>,
    pub cosine_diagonal: Option<f64>,
    pub mean_norms: Vec<f64>,
    pub bn: Option<BnStats>,
    pub probe_fdr: Vec<Option<f64>>,
}
