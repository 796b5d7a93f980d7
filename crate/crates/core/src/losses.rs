//! Cross entropy, class-balanced cross entropy, weight decay, feature
//! regularization and per-class norm constraints on the head.

use serde::{Deserialize, Serialize};

use crate::dataset::harmonic_mean;
use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::network::{Network, ParamInfo, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WeightSource {
    Balanced,
    /// `N̄ / N_k` with `N̄` the harmonic mean of the counts.
    Harmonic,
    /// `(1 − β) / (1 − β^{N_k})`, rescaled to sum to `C`.
    EffectiveNumber { beta: f64 },
}

/// Per-class loss multipliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub source: WeightSource,
}

impl ClassWeights {
    pub fn balanced(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            source: WeightSource::Balanced,
        }
    }

    pub fn harmonic(counts: &[usize]) -> Result<Self> {
        check_counts(counts)?;
        // equal counts give weight 1 exactly rather than n·(1/n)-style rounding
        let weights = if counts.iter().all(|&c| c == counts[0]) {
            vec![1.0; counts.len()]
        } else {
            let hm = harmonic_mean(counts);
            counts.iter().map(|&n| hm / n as f64).collect()
        };
        Ok(Self {
            weights,
            source: WeightSource::Harmonic,
        })
    }

    /// Effective-number weights; `beta` in `[0, 1)`. The `beta → 1` limit is
    /// [`ClassWeights::harmonic`].
    pub fn effective_number(beta: f64, counts: &[usize]) -> Result<Self> {
        check_counts(counts)?;
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!("effective-number beta must be in [0, 1), got {beta}")));
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| (1.0 - beta) / (1.0 - beta.powf(n as f64)))
            .collect();
        let total: f64 = raw.iter().sum();
        let c = counts.len() as f64;
        Ok(Self {
            weights: raw.iter().map(|w| w * c / total).collect(),
            source: WeightSource::EffectiveNumber { beta },
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_counts(counts: &[usize]) -> Result<()> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Config("class counts must be non-empty and positive".into()));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Per-sample `−log softmax(z)_y`.
pub fn ce_per_sample(logits: &Matrix, y: &[usize]) -> Result<Vec<f64>> {
    check_labels(logits, y)?;
    Ok(y.iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[label]
        })
        .collect())
}

fn check_labels(logits: &Matrix, y: &[usize]) -> Result<()> {
    if logits.rows() != y.len() {
        return Err(Error::contract(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn weighted_ce(logits: &Matrix, y: &[usize], weights: Option<&[f64]>) -> Result<(f64, Matrix)> {
    let losses = ce_per_sample(logits, y)?;
    let n = y.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut total = 0.0;
    for (i, (&label, l)) in y.iter().zip(&losses).enumerate() {
        let w = weights.map_or(1.0, |w| w[label]);
        total += w * l;
        let row = grad.row_mut(i);
        row[label] -= 1.0;
        row.iter_mut().for_each(|g| *g = w * *g / n);
    }
    Ok((total / n, grad))
}

/// Mean cross entropy and `∂loss/∂logits = (softmax − onehot) / N`.
pub fn ce_loss(logits: &Matrix, y: &[usize]) -> Result<(f64, Matrix)> {
    weighted_ce(logits, y, None)
}

/// Cross entropy with each sample scaled by its class weight, averaged over
/// the batch.
pub fn cb_loss(logits: &Matrix, y: &[usize], weights: &ClassWeights) -> Result<(f64, Matrix)> {
    if weights.len() != logits.cols() {
        return Err(Error::contract(format!(
            "{} class weights for {} classes",
            weights.len(),
            logits.cols()
        )));
    }
    weighted_ce(logits, y, Some(&weights.weights))
}

/// Which parameters weight decay touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WdSubset {
    #[default]
    All,
    /// Linear weights and biases only.
    ExcludeBn,
    /// Everything except BN shifts.
    ExcludeBnShift,
}

impl WdSubset {
    pub fn includes(self, info: &ParamInfo) -> bool {
        match self {
            WdSubset::All => true,
            WdSubset::ExcludeBn => !info.is_bn(),
            WdSubset::ExcludeBnShift => info.kind != ParamKind::Beta,
        }
    }
}

/// `(λ/2) Σ ‖v‖²` over the given vectors and its gradient `λ v`.
pub fn wd_penalty_vectors(params: &[&[f64]], lambda: f64) -> (f64, Vec<Vec<f64>>) {
    let mut penalty = 0.0;
    let grads = params
        .iter()
        .map(|p| {
            penalty += p.iter().map(|v| v * v).sum::<f64>();
            p.iter().map(|v| lambda * v).collect()
        })
        .collect();
    (0.5 * lambda * penalty, grads)
}

/// Weight decay over the network parameters selected by `subset`. Gradients
/// are aligned with [`Network::param_infos`]; excluded entries are zero.
pub fn wd_penalty(net: &Network, lambda: f64, subset: WdSubset) -> (f64, Vec<Vec<f64>>) {
    let mut penalty = 0.0;
    let grads = net
        .param_infos()
        .iter()
        .zip(net.params())
        .map(|(info, p)| {
            if subset.includes(info) {
                let (pen, mut g) = wd_penalty_vectors(&[p], lambda);
                penalty += pen;
                g.pop().unwrap()
            } else {
                vec![0.0; p.len()]
            }
        })
        .collect();
    (penalty, grads)
}

/// `(ζ/2) · (1/N) Σ_i ‖g(x_i)‖²` and its gradient `(ζ/N) g(x_i)`.
pub fn fr_penalty(features: &Matrix, zeta: f64) -> (f64, Matrix) {
    let n = features.rows().max(1) as f64;
    let sq: f64 = features.as_slice().iter().map(|v| v * v).sum();
    (0.5 * zeta * sq / n, features.scale(zeta / n))
}

/// Projects column `k` of `w` (`d × C`) onto the ball of radius `eta[k]`.
/// Columns already inside are returned bit-exactly.
pub fn maxnorm_project(w: &Matrix, eta: &[f64]) -> Result<Matrix> {
    if eta.len() != w.cols() {
        return Err(Error::contract(format!("{} caps for {} columns", eta.len(), w.cols())));
    }
    if let Some(bad) = eta.iter().find(|&&e| !(e > 0.0)) {
        return Err(Error::Config(format!("MaxNorm caps must be positive, got {bad}")));
    }
    let mut out = w.clone();
    for (k, (n, &cap)) in w.column_norms().iter().zip(eta).enumerate() {
        if *n > cap {
            // shrink until rounding leaves the column inside the ball, so a
            // second projection is a no-op
            let mut s = cap / n;
            loop {
                let col: Vec<f64> = w.column(k).iter().map(|v| v * s).collect();
                if norm(&col) <= cap {
                    out.set_column(k, &col);
                    break;
                }
                s *= 1.0 - f64::EPSILON;
            }
        }
    }
    Ok(out)
}

/// Scales every column of `w` to norm `target`.
pub fn renormalize_columns(w: &Matrix, target: f64) -> Result<Matrix> {
    let mut out = w.clone();
    for (k, n) in w.column_norms().iter().enumerate() {
        if *n == 0.0 {
            return Err(Error::contract(format!("column {k} has zero norm")));
        }
        out.scale_column(k, target / n);
    }
    Ok(out)
}

/// Regularization settings of one training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    #[serde(default)]
    pub lambda_wd: f64,
    #[serde(default)]
    pub zeta_fr: f64,
    #[serde(default)]
    pub maxnorm_eta: Option<Vec<f64>>,
    #[serde(default)]
    pub wd_subset: WdSubset,
}

impl RegConfig {
    pub fn wd(lambda: f64) -> Self {
        Self {
            lambda_wd: lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_wd >= 0.0) || !(self.zeta_fr >= 0.0) {
            return Err(Error::Config("lambda_wd and zeta_fr must be >= 0".into()));
        }
        if let Some(eta) = &self.maxnorm_eta {
            if eta.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config("MaxNorm caps must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Euclidean norms of the per-class head vectors.
pub fn head_norms(net: &Network) -> Vec<f64> {
    (0..net.classes()).map(|k| norm(net.head().weight.row(k))).collect()
}
