//! Numerical checks of the cone-effect bound, the harmonic-to-total count
//! ratio, and the stationary point of the class-balanced head objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{etf_gram_error, make_etf, EtfBasis, EtfSpec};
use crate::dataset::{harmonic_mean_real, LabeledSet};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_tn, norm, Matrix};
use crate::losses::softmax_rows;
use crate::network::{Mode, Network};
use crate::rng::RngStream;
use crate::table::{fmt_num, Table};

/// One checked premise: `value` compared against `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Premise {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

impl Premise {
    fn less(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            satisfied: value < threshold,
        }
    }

    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            satisfied: value <= threshold,
        }
    }

    fn greater(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            satisfied: value > threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Violated,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub name: String,
    pub premises: Vec<Premise>,
    pub measured: BTreeMap<String, f64>,
    pub bound: Option<f64>,
    pub verdict: Verdict,
    /// All premises satisfied and the inequality satisfied.
    pub holds: bool,
}

impl TheoremReport {
    fn new(
        name: &str,
        premises: Vec<Premise>,
        measured: BTreeMap<String, f64>,
        bound: Option<f64>,
        inequality: bool,
    ) -> Self {
        let applicable = premises.iter().all(|p| p.satisfied);
        let verdict = match (applicable, inequality) {
            (false, _) => Verdict::NotApplicable,
            (true, true) => Verdict::Holds,
            (true, false) => Verdict::Violated,
        };
        Self {
            name: name.into(),
            premises,
            measured,
            bound,
            verdict,
            holds: verdict == Verdict::Holds,
        }
    }

    pub fn violated_premises(&self) -> Vec<&Premise> {
        self.premises.iter().filter(|p| !p.satisfied).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBoundInput {
    pub classes: usize,
    /// Largest per-sample norm of the loss gradient on a feature.
    pub epsilon: f64,
    /// Largest feature norm.
    pub feature_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeBound {
    pub delta: f64,
    pub bound: f64,
}

/// `δ = (1/L)·((C−1)/C)·log((C−1)(1−ε)/ε)`.
pub fn cone_delta(input: &ConeBoundInput) -> f64 {
    let c = input.classes as f64;
    let eps = input.epsilon;
    ((c - 1.0) / c) * ((c - 1.0) * (1.0 - eps) / eps).ln() / input.feature_bound
}

/// `2δ√(1−δ²)`.
pub fn cone_bound_from_delta(delta: f64) -> f64 {
    2.0 * delta * (1.0 - delta * delta).sqrt()
}

pub fn cone_premises(input: &ConeBoundInput) -> Vec<Premise> {
    let c = input.classes as f64;
    let delta = cone_delta(input);
    vec![
        Premise::greater("classes > 2", c, 2.0),
        Premise::greater("epsilon > 0", input.epsilon, 0.0),
        Premise::less("epsilon < 1/C", input.epsilon, 1.0 / c),
        Premise::at_most(
            "L <= 2*sqrt(2)*ln(C-1)",
            input.feature_bound,
            2.0 * 2f64.sqrt() * (c - 1.0).ln(),
        ),
        Premise::greater("delta > 1/sqrt(2)", delta, std::f64::consts::FRAC_1_SQRT_2),
        Premise::at_most("delta <= 1", delta, 1.0),
    ]
}

/// `(δ, 2δ√(1−δ²))`, refusing inputs outside the bound's premises.
pub fn cone_bound(input: &ConeBoundInput) -> Result<ConeBound> {
    let bad: Vec<String> = cone_premises(input)
        .into_iter()
        .filter(|p| !p.satisfied)
        .map(|p| format!("{} (value {:e}, threshold {:e})", p.name, p.value, p.threshold))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Premise(bad.join("; ")));
    }
    let delta = cone_delta(input);
    Ok(ConeBound {
        delta,
        bound: cone_bound_from_delta(delta),
    })
}

/// Checks every inter-class pair of eval-mode training features against the
/// cone bound. Above `max_pairs` pairs a uniform sample of `max_pairs` pairs
/// is checked instead.
pub fn check_theorem1(net: &Network, data: &LabeledSet, max_pairs: usize, rng: &mut RngStream) -> Result<TheoremReport> {
    let c = net.classes();
    if data.classes != c || data.dim() != net.input_dim() {
        return Err(Error::contract("data does not match the network"));
    }
    let w = net.head().columns();
    let energy = w.column_norms().iter().map(|n| n * n).sum::<f64>() / c as f64;
    let gram_error = etf_gram_error(&w, energy);
    let bias_max = net.head().bias.as_ref().map_or(0.0, |b| b.iter().fold(0.0f64, |m, v| m.max(v.abs())));

    let cache = net.forward_pass(&data.x, Mode::Eval)?;
    // per-sample (unaveraged) loss gradient on the logits
    let mut dlogits = softmax_rows(&cache.logits);
    for (i, &y) in data.y.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    let grads = net.backward(&cache, &dlogits, None)?.features;
    let epsilon = grads.row_norms().into_iter().fold(0.0, f64::max);
    let norms = cache.features.row_norms();
    let feature_bound = norms.iter().copied().fold(0.0, f64::max);

    let input = ConeBoundInput {
        classes: c,
        epsilon,
        feature_bound,
    };
    let mut premises = vec![
        Premise::at_most("head ETF Gram error <= 1e-9", gram_error, 1e-9),
        Premise::at_most("head bias max |b| == 0", bias_max, 0.0),
    ];
    premises.extend(cone_premises(&input));
    let delta = cone_delta(&input);
    let mut measured = BTreeMap::from([
        ("epsilon".to_string(), epsilon),
        ("feature_bound".to_string(), feature_bound),
        ("delta".to_string(), delta),
        ("etf_energy".to_string(), energy),
    ]);
    if !premises.iter().all(|p| p.satisfied) {
        return Ok(TheoremReport::new("theorem1", premises, measured, None, false));
    }
    let bound = cone_bound_from_delta(delta);

    let n = data.len();
    let unit: Vec<Option<Vec<f64>>> = (0..n)
        .map(|i| (norms[i] > 0.0).then(|| cache.features.row(i).iter().map(|v| v / norms[i]).collect()))
        .collect();
    let cos = |i: usize, j: usize| -> Option<f64> {
        Some(crate::linalg::dot(unit[i].as_ref()?, unit[j].as_ref()?))
    };
    let by_class = data.indices_by_class();
    let total: usize = {
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let s: usize = sizes.iter().sum();
        (s * s - sizes.iter().map(|k| k * k).sum::<usize>()) / 2
    };
    let (mut worst, mut checked, mut violations) = (f64::NEG_INFINITY, 0usize, 0usize);
    let mut visit = |v: Option<f64>| {
        if let Some(v) = v {
            checked += 1;
            worst = worst.max(v);
            if v > bound + 1e-9 {
                violations += 1;
            }
        }
    };
    if total <= max_pairs {
        for i in 0..n {
            for j in i + 1..n {
                if data.y[i] != data.y[j] {
                    visit(cos(i, j));
                }
            }
        }
    } else {
        let mut drawn = 0;
        while drawn < max_pairs {
            let (i, j) = (rng.below(n), rng.below(n));
            if data.y[i] != data.y[j] {
                visit(cos(i, j));
                drawn += 1;
            }
        }
    }
    measured.insert("pairs_total".into(), total as f64);
    measured.insert("pairs_checked".into(), checked as f64);
    measured.insert("violations".into(), violations as f64);
    if checked > 0 {
        measured.insert("max_inter_class_cosine".into(), worst);
    }
    Ok(TheoremReport::new("theorem1", premises, measured, Some(bound), violations == 0))
}

/// `ρC(ρ^{1/(C−1)}−1)² / (ρ^{C/(C−1)}−1)²`, equal to `1/C` at `ρ = 1`.
pub fn amhm_ratio(rho: f64, classes: usize) -> f64 {
    let c = classes as f64;
    if rho == 1.0 {
        return 1.0 / c;
    }
    if classes == 2 {
        // the general form reduces to this; evaluating it directly is exact
        return 2.0 * rho / ((1.0 + rho) * (1.0 + rho));
    }
    let a = rho.ln() / (c - 1.0);
    let num = a.exp_m1();
    let den = (c * a).exp_m1();
    rho * c * (num / den) * (num / den)
}

/// Harmonic mean over total of the unrounded sizes `ρ^{−(k−1)/(C−1)}`.
pub fn amhm_ratio_direct(rho: f64, classes: usize) -> f64 {
    let sizes: Vec<f64> = (0..classes)
        .map(|k| rho.powf(-(k as f64) / (classes as f64 - 1.0)))
        .collect();
    harmonic_mean_real(&sizes) / sizes.iter().sum::<f64>()
}

pub fn validate_ratio_args(rho: f64, classes: usize) -> Result<()> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::Config(format!("rho must be >= 1, got {rho}")));
    }
    if classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    Ok(())
}

/// Closed form against direct evaluation over a grid; holds when every
/// relative error is at most `tol`.
pub fn check_lemma1(rhos: &[f64], classes: &[usize], tol: f64) -> Result<(TheoremReport, Table)> {
    let mut table = Table::new(["rho", "classes", "closed", "direct", "relerr"]);
    let mut worst: f64 = 0.0;
    for &rho in rhos {
        for &c in classes {
            validate_ratio_args(rho, c)?;
            let closed = amhm_ratio(rho, c);
            let direct = amhm_ratio_direct(rho, c);
            let rel = ((closed - direct) / direct).abs();
            worst = worst.max(rel);
            table.push(vec![fmt_num(rho), c.to_string(), fmt_num(closed), fmt_num(direct), fmt_num(rel)]);
        }
    }
    let measured = BTreeMap::from([("max_relative_error".to_string(), worst)]);
    let report = TheoremReport::new("lemma1", Vec::new(), measured, Some(tol), worst <= tol);
    Ok((report, table))
}

/// Idealized collapsed features for the head objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcSynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub rho: f64,
    pub lambda: f64,
    /// Norm scale of the class means.
    pub c0: f64,
    /// `‖μ_k‖ = c0 · P(Y=k)^{−gamma0}`, so positive values make tail means longer.
    #[serde(default)]
    pub gamma0: f64,
    /// Added to every class mean.
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    #[serde(default = "default_head")]
    pub head_count: f64,
    /// Round sizes to integers instead of using `ρ^{−(k−1)/(C−1)}` exactly.
    #[serde(default)]
    pub rounded: bool,
    #[serde(default)]
    pub basis: EtfBasis,
}

fn default_head() -> f64 {
    1000.0
}

impl NcSynthConfig {
    pub fn new(classes: usize, dim: usize, rho: f64, lambda: f64) -> Self {
        Self {
            classes,
            dim,
            rho,
            lambda,
            c0: 1.0,
            gamma0: 0.0,
            offset: None,
            head_count: default_head(),
            rounded: false,
            basis: EtfBasis::RandomQr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_ratio_args(self.rho, self.classes)?;
        if self.classes > self.dim {
            return Err(Error::Config("classes must not exceed dim".into()));
        }
        if !(self.lambda > 0.0) || !(self.c0 > 0.0) || !(self.head_count > 0.0) {
            return Err(Error::Config("lambda, c0 and head_count must be positive".into()));
        }
        if let Some(v) = &self.offset {
            if v.len() != self.dim {
                return Err(Error::Config(format!("offset has length {} but dim is {}", v.len(), self.dim)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcSynth {
    /// `C × d`, row `k` is `μ_k`.
    pub means: Matrix,
    pub counts: Vec<f64>,
    pub priors: Vec<f64>,
}

/// Class means `c0 · P_k^{−γ0} · e_k (+ offset)` with `e_k` the columns of a
/// unit-energy ETF, and long-tailed class sizes.
pub fn nc_synth(config: &NcSynthConfig, rng: &mut RngStream) -> Result<NcSynth> {
    config.validate()?;
    let c = config.classes;
    let counts: Vec<f64> = (0..c)
        .map(|k| {
            let n = config.head_count * config.rho.powf(-(k as f64) / (c as f64 - 1.0));
            if config.rounded {
                n.round_ties_even().max(1.0)
            } else {
                n
            }
        })
        .collect();
    let total: f64 = counts.iter().sum();
    let priors: Vec<f64> = counts.iter().map(|n| n / total).collect();
    let etf = make_etf(&EtfSpec {
        dim: config.dim,
        classes: c,
        energy: 1.0,
        seed: rng.next_u64(),
        basis: config.basis,
    })?;
    let means = Matrix::from_fn(c, config.dim, |k, j| {
        let base = config.c0 * priors[k].powf(-config.gamma0) * etf[(j, k)];
        base + config.offset.as_ref().map_or(0.0, |v| v[j])
    });
    Ok(NcSynth { means, counts, priors })
}

/// `F(W) = (N̄/N) Σ_k CE(Wᵀμ_k, k) + (λ/2)‖W‖²` and its gradient, `W` being
/// `d × C`.
pub fn head_objective(means: &Matrix, scale: f64, lambda: f64, w: &Matrix) -> Result<(f64, Matrix)> {
    let logits = matmul(means, w)?;
    let mut p = softmax_rows(&logits);
    let mut loss = 0.0;
    for k in 0..logits.rows() {
        let row = logits.row(k);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[k];
        p[(k, k)] -= 1.0;
    }
    let mut grad = matmul_tn(means, &p)?.scale(scale);
    grad.axpy(lambda, w)?;
    let reg = 0.5 * lambda * w.as_slice().iter().map(|v| v * v).sum::<f64>();
    Ok((scale * loss + reg, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimizer {
    pub w: Matrix,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Gradient descent from `W = 0` with Barzilai–Borwein trial steps and
/// backtracking. While the predicted decrease is above rounding noise the
/// step must pass the Armijo test; below it, the step must reduce the
/// gradient norm.
pub fn minimize_head_objective(means: &Matrix, scale: f64, lambda: f64, solver: SolverConfig) -> Result<Minimizer> {
    let (c, d) = means.shape();
    let mut w = Matrix::zeros(d, c);
    let (mut f, mut g) = head_objective(means, scale, lambda, &w)?;
    let mut gn = g.frobenius_norm();
    let smooth = lambda + scale * means.as_slice().iter().map(|v| v * v).sum::<f64>();
    let mut step = 1.0 / smooth;
    let mut iterations = 0;
    while gn > solver.tol {
        if iterations >= solver.max_iter {
            return Err(Error::NotConverged {
                iterations,
                grad_norm: gn,
            });
        }
        iterations += 1;
        let mut alpha = step;
        let accepted = loop {
            let mut trial = w.clone();
            trial.axpy(-alpha, &g)?;
            let (ft, gt) = head_objective(means, scale, lambda, &trial)?;
            let decrease = alpha * gn * gn;
            let ok = if decrease > 1e-12 * f.abs().max(1.0) {
                ft <= f - 1e-4 * decrease
            } else {
                gt.frobenius_norm() < gn
            };
            if ok {
                break Some((trial, ft, gt));
            }
            alpha *= 0.5;
            if alpha < 1e-30 {
                break None;
            }
        };
        let Some((wn, fnew, gnew)) = accepted else {
            return Err(Error::NotConverged {
                iterations,
                grad_norm: gn,
            });
        };
        let s = wn.sub(&w)?;
        let y = gnew.sub(&g)?;
        let sy = crate::linalg::dot(s.as_slice(), y.as_slice());
        let ss = crate::linalg::dot(s.as_slice(), s.as_slice());
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { 1.0 / smooth };
        w = wn;
        f = fnew;
        g = gnew;
        gn = g.frobenius_norm();
    }
    Ok(Minimizer {
        w,
        objective: f,
        grad_norm: gn,
        iterations,
    })
}

/// Everything measured at the stationary point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryAnalysis {
    /// `d × C`.
    pub w_star: Matrix,
    pub grad_norm: f64,
    pub iterations: usize,
    /// `N̄ / (λN)`.
    pub scale: f64,
    /// `‖w_k* − (N̄/(λN))μ_k‖` per class.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `(N̄/(λN))‖μ‖`, `μ` the mean of the class means.
    pub offset_term: f64,
    pub objective_at_minimizer: f64,
    pub objective_at_candidate: f64,
    /// `max_k ‖w_k*‖ · λρC`, with `ρ` the count ratio.
    pub scaled_weight_norm: f64,
    pub rho: f64,
}

pub fn analyze_stationary_point(
    means: &Matrix,
    counts: &[f64],
    lambda: f64,
    solver: SolverConfig,
) -> Result<StationaryAnalysis> {
    let c = means.rows();
    if counts.len() != c || c < 2 {
        return Err(Error::contract("one count per class and at least two classes are required"));
    }
    if !(lambda > 0.0) || counts.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Config("lambda and all counts must be positive".into()));
    }
    let ratio = harmonic_mean_real(counts) / counts.iter().sum::<f64>();
    let m = minimize_head_objective(means, ratio, lambda, solver)?;
    let scale = ratio / lambda;
    let residuals: Vec<f64> = (0..c)
        .map(|k| {
            let wk = m.w.column(k);
            norm(&wk.iter().zip(means.row(k)).map(|(a, b)| a - scale * b).collect::<Vec<_>>())
        })
        .collect();
    let mu = means.column_means();
    let candidate = means.transpose().scale(scale);
    let (objective_at_candidate, _) = head_objective(means, ratio, lambda, &candidate)?;
    let max_c = counts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_c = counts.iter().cloned().fold(f64::INFINITY, f64::min);
    let rho = max_c / min_c;
    let max_w = m.w.column_norms().into_iter().fold(0.0, f64::max);
    Ok(StationaryAnalysis {
        grad_norm: m.grad_norm,
        iterations: m.iterations,
        scale,
        max_residual: residuals.iter().cloned().fold(0.0, f64::max),
        residuals,
        offset_term: scale * norm(&mu),
        objective_at_minimizer: m.objective,
        objective_at_candidate,
        scaled_weight_norm: max_w * lambda * rho * c as f64,
        rho,
        w_star: m.w,
    })
}

/// Stationary-point report. With `o_constant = Some(c)` the inequality
/// `residual ≤ (N̄/(λN))‖μ‖ + c/(λρC)²` is checked for every class;
/// otherwise only convergence is required.
pub fn check_theorem2(
    means: &Matrix,
    counts: &[f64],
    lambda: f64,
    solver: SolverConfig,
    o_constant: Option<f64>,
) -> Result<(TheoremReport, StationaryAnalysis)> {
    let a = analyze_stationary_point(means, counts, lambda, solver)?;
    let c = means.rows() as f64;
    let slack = o_constant.map(|k| k / (lambda * a.rho * c).powi(2));
    let rhs = a.offset_term + slack.unwrap_or(0.0);
    let mut measured = BTreeMap::from([
        ("grad_norm".to_string(), a.grad_norm),
        ("iterations".to_string(), a.iterations as f64),
        ("max_residual".to_string(), a.max_residual),
        ("offset_term".to_string(), a.offset_term),
        ("scaled_weight_norm".to_string(), a.scaled_weight_norm),
        ("scaled_residual".to_string(), a.max_residual * (lambda * a.rho * c).powi(2)),
        ("objective_at_minimizer".to_string(), a.objective_at_minimizer),
        ("objective_at_candidate".to_string(), a.objective_at_candidate),
    ]);
    if let Some(k) = o_constant {
        measured.insert("o_constant".into(), k);
    }
    let premises = vec![Premise::at_most("gradient norm <= tol", a.grad_norm, solver.tol)];
    let ok = slack.is_none() || a.max_residual <= rhs;
    let report = TheoremReport::new("theorem2", premises, measured, slack.map(|_| rhs), ok);
    Ok((report, a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub classes: usize,
    pub max_residual: f64,
    pub scaled_residual: f64,
    pub offset_term: f64,
    pub scaled_weight_norm: f64,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Runs the stationary-point analysis for every `(ρ, C)` cell, keeping the
/// other fields of `base`. Each cell draws its ETF from its own substream.
pub fn theorem2_sweep(
    base: &NcSynthConfig,
    cells: &[(f64, usize)],
    solver: SolverConfig,
    rng: &RngStream,
) -> Result<Vec<SweepRow>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, &(rho, classes))| {
            let cfg = NcSynthConfig {
                rho,
                classes,
                ..base.clone()
            };
            let s = nc_synth(&cfg, &mut rng.substream(i as u64))?;
            let a = analyze_stationary_point(&s.means, &s.counts, cfg.lambda, solver)?;
            Ok(SweepRow {
                rho,
                classes,
                max_residual: a.max_residual,
                scaled_residual: a.max_residual * (cfg.lambda * a.rho * classes as f64).powi(2),
                offset_term: a.offset_term,
                scaled_weight_norm: a.scaled_weight_norm,
                grad_norm: a.grad_norm,
                iterations: a.iterations,
            })
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new([
        "rho",
        "classes",
        "max_residual",
        "scaled_residual",
        "offset_term",
        "scaled_weight_norm",
        "grad_norm",
        "iterations",
    ]);
    for r in rows {
        t.push(vec![
            fmt_num(r.rho),
            r.classes.to_string(),
            fmt_num(r.max_residual),
            fmt_num(r.scaled_residual),
            fmt_num(r.offset_term),
            fmt_num(r.scaled_weight_norm),
            fmt_num(r.grad_norm),
            r.iterations.to_string(),
        ]);
    }
    t
}

/// How closely the head behaves like a multiplicative adjustment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImplicitLa {
    /// `‖w_k‖ / ‖μ_k‖`; `None` where `μ_k = 0`.
    pub ratios: Vec<Option<f64>>,
    pub alignment: Vec<Option<f64>>,
    /// Slope of `ln‖w_k‖` against `ln P(Y=k)`; `None` if the priors are all
    /// equal.
    pub fitted_exponent: Option<f64>,
    /// `exp(intercept)` of the same fit.
    pub fitted_scale: Option<f64>,
}

pub fn implicit_la_equivalence(w_star: &Matrix, means: &Matrix, priors: &[f64]) -> Result<ImplicitLa> {
    let c = w_star.cols();
    if means.rows() != c || priors.len() != c || means.cols() != w_star.rows() {
        return Err(Error::contract("head, means and priors disagree on shape"));
    }
    let mut ratios = Vec::with_capacity(c);
    let mut alignment = Vec::with_capacity(c);
    for k in 0..c {
        let wk = w_star.column(k);
        let mk = means.row(k);
        let nm = norm(mk);
        ratios.push((nm > 0.0).then(|| norm(&wk) / nm));
        alignment.push(crate::linalg::cosine(&wk, mk));
    }
    let pts: Vec<(f64, f64)> = (0..c)
        .filter_map(|k| {
            let n = norm(&w_star.column(k));
            (n > 0.0 && priors[k] > 0.0).then(|| (priors[k].ln(), n.ln()))
        })
        .collect();
    let (fitted_exponent, fitted_scale) = match least_squares_line(&pts) {
        Some((slope, intercept)) => (Some(slope), Some(intercept.exp())),
        None => (None, None),
    };
    Ok(ImplicitLa {
        ratios,
        alignment,
        fitted_exponent,
        fitted_scale,
    })
}

fn least_squares_line(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::finite_diff_grad;
    use crate::network::LinearLayer;
    use proptest::prelude::*;

    #[test]
    fn cone_bound_reference_point() {
        let r = cone_bound(&ConeBoundInput {
            classes: 10,
            epsilon: 0.05,
            feature_bound: 5.0,
        })
        .unwrap();
        // 0.18 · ln(171), evaluated independently
        let delta = 0.18 * 171f64.ln();
        assert!((r.delta - delta).abs() < 1e-15);
        assert!((r.delta - 0.925_499_440_170_478_8).abs() < 1e-12);
        assert!((r.bound - 0.701_063_929_096_544_4).abs() < 1e-12, "{}", r.bound);
    }

    #[test]
    fn cone_bound_edges() {
        assert_eq!(cone_bound_from_delta(1.0), 0.0);
        let near = cone_bound_from_delta(std::f64::consts::FRAC_1_SQRT_2 + 1e-9);
        assert!((near - 1.0).abs() < 1e-8);
        let err = cone_bound(&ConeBoundInput {
            classes: 10,
            epsilon: 0.2,
            feature_bound: 5.0,
        })
        .unwrap_err();
        assert!(err.to_string().contains("epsilon < 1/C"));
        // premises on ε and L alone do not place δ in range
        let c = 10usize;
        let input = ConeBoundInput {
            classes: c,
            epsilon: 0.099,
            feature_bound: 2.0 * 2f64.sqrt() * 9f64.ln(),
        };
        assert!(cone_bound(&input).unwrap_err().to_string().contains("delta > 1/sqrt(2)"));
    }

    #[test]
    fn cone_bound_is_monotone() {
        let lo = std::f64::consts::FRAC_1_SQRT_2;
        let grid: Vec<f64> = (1..=200).map(|i| lo + (1.0 - lo) * i as f64 / 200.0).collect();
        for w in grid.windows(2) {
            assert!(cone_bound_from_delta(w[1]) < cone_bound_from_delta(w[0]));
        }
    }

    #[test]
    fn amhm_ratio_examples() {
        for c in [2, 3, 10, 50, 100] {
            assert_eq!(amhm_ratio(1.0, c), 1.0 / c as f64);
            assert!((amhm_ratio_direct(1.0, c) - 1.0 / c as f64).abs() < 1e-15);
        }
        for rho in [2.0, 10.0, 100.0, 1000.0] {
            let exact = 2.0 * rho / ((1.0 + rho) * (1.0 + rho));
            assert_eq!(amhm_ratio(rho, 2), exact);
            assert!(((amhm_ratio_direct(rho, 2) - exact) / exact).abs() < 1e-14);
        }
        let exact = 300.0 / (111.0 * 111.0);
        assert!(((amhm_ratio(100.0, 3) - exact) / exact).abs() < 1e-12);
        assert!(((amhm_ratio_direct(100.0, 3) - exact) / exact).abs() < 1e-12);
        // near-balanced ratios stay accurate thanks to expm1
        let r = 1.0 + 1e-9;
        assert!(((amhm_ratio(r, 10) - amhm_ratio_direct(r, 10)) / 0.1).abs() < 1e-12);
    }

    #[test]
    fn harmonic_ratio_closed_form_matches_direct() {
        let (report, table) =
            check_lemma1(&[2.0, 10.0, 100.0, 1000.0], &[2, 3, 10, 50, 100], 1e-12).unwrap();
        assert!(report.holds, "{:?}", report.measured);
        assert_eq!(table.rows.len(), 20);
        assert!(check_lemma1(&[0.5], &[3], 1e-12).is_err());
    }

    #[test]
    fn nc_synth_examples() {
        let mut cfg = NcSynthConfig::new(5, 8, 10.0, 0.1);
        cfg.c0 = 2.0;
        let s = nc_synth(&cfg, &mut RngStream::new(1)).unwrap();
        for k in 0..5 {
            assert!((norm(s.means.row(k)) - 2.0).abs() < 1e-12);
        }
        assert!(s.means.column_means().iter().all(|v| v.abs() < 1e-12));
        assert!((s.priors.iter().sum::<f64>() - 1.0).abs() < 1e-15);

        cfg.gamma0 = 0.5;
        let s = nc_synth(&cfg, &mut RngStream::new(1)).unwrap();
        let norms = s.means.row_norms();
        assert!(norms.windows(2).all(|w| w[1] > w[0]));

        cfg.gamma0 = 0.0;
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        cfg.offset = Some(v.clone());
        let s = nc_synth(&cfg, &mut RngStream::new(1)).unwrap();
        for (a, b) in s.means.column_means().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
        cfg.rounded = true;
        cfg.head_count = 100.0;
        cfg.rho = 100.0;
        cfg.classes = 3;
        cfg.offset = None;
        assert_eq!(nc_synth(&cfg, &mut RngStream::new(1)).unwrap().counts, vec![100.0, 10.0, 1.0]);
    }

    #[test]
    fn head_objective_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(3);
        let means = rng.gaussian_matrix(4, 6, 0.0, 1.0);
        let w = rng.gaussian_matrix(6, 4, 0.0, 0.5);
        let (_, g) = head_objective(&means, 0.3, 0.2, &w).unwrap();
        let fd = finite_diff_grad(|p| Ok(head_objective(&means, 0.3, 0.2, p)?.0), &w, 1e-6).unwrap();
        for (a, b) in g.as_slice().iter().zip(fd.as_slice()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn antipodal_pair_gives_antipodal_weights() {
        let means = Matrix::from_rows(&[vec![1.0, 0.5, 0.0], vec![-1.0, -0.5, 0.0]]).unwrap();
        let (report, a) = check_theorem2(&means, &[10.0, 10.0], 0.5, SolverConfig::default(), None).unwrap();
        assert!(report.holds);
        assert!(a.grad_norm <= 1e-10);
        for j in 0..3 {
            assert!((a.w_star[(j, 0)] + a.w_star[(j, 1)]).abs() < 1e-9);
        }
        assert!(a.objective_at_minimizer <= a.objective_at_candidate);
    }

    #[test]
    fn minimizer_beats_candidate_and_implicit_la_is_exact_for_scaled_means() {
        let cfg = NcSynthConfig {
            gamma0: 0.3,
            ..NcSynthConfig::new(6, 8, 20.0, 0.5)
        };
        let s = nc_synth(&cfg, &mut RngStream::new(2)).unwrap();
        let (_, a) = check_theorem2(&s.means, &s.counts, cfg.lambda, SolverConfig::default(), None).unwrap();
        assert!(a.objective_at_minimizer <= a.objective_at_candidate);

        let w = s.means.transpose().scale(3.0);
        let la = implicit_la_equivalence(&w, &s.means, &s.priors).unwrap();
        for (r, al) in la.ratios.iter().zip(&la.alignment) {
            assert!((r.unwrap() - 3.0).abs() < 1e-12);
            assert!((al.unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((la.fitted_exponent.unwrap() + 0.3).abs() < 1e-10);

        let random = RngStream::new(5).gaussian_matrix(8, 6, 0.0, 1.0);
        let neg = implicit_la_equivalence(&random, &s.means, &s.priors).unwrap();
        let mean_align: f64 = neg.alignment.iter().map(|v| v.unwrap()).sum::<f64>() / 6.0;
        assert!(mean_align.abs() < 0.5);
    }

    #[test]
    fn solver_reports_non_convergence() {
        let means = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let err = minimize_head_objective(&means, 0.5, 0.1, SolverConfig { tol: 1e-10, max_iter: 1 }).unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 1, .. }));
    }

    fn etf_head_net(c: usize) -> Network {
        let w = make_etf(&EtfSpec {
            basis: EtfBasis::Canonical,
            ..EtfSpec::new(c, c)
        })
        .unwrap();
        let mut head = LinearLayer::new(Matrix::zeros(c, c), None).unwrap();
        head.set_columns(&w).unwrap();
        Network::from_parts(c, Vec::new(), head).unwrap()
    }

    #[test]
    fn cone_bound_on_hand_built_features() {
        // features along ETF directions, norm 3.5 < 2√2·ln 4; ε ≈ 0.0599
        let c = 5;
        let net = etf_head_net(c);
        let w = net.head().columns();
        let x = Matrix::from_fn(c, c, |i, j| 3.5 * w[(j, i)]);
        let data = LabeledSet::new(x, (0..c).collect(), c).unwrap();
        let r = check_theorem1(&net, &data, usize::MAX, &mut RngStream::new(0)).unwrap();
        assert_eq!(r.verdict, Verdict::Holds, "{:?}", r.violated_premises());
        assert_eq!(r.measured["pairs_checked"], 10.0);
        assert!((r.measured["epsilon"] - 0.059_923_413_405_755_15).abs() < 1e-12);
        assert!((r.bound.unwrap() - 0.612_834_607_024_263).abs() < 1e-12);
        assert!((r.measured["max_inter_class_cosine"] + 0.25).abs() < 1e-12);

        // same-label pair: nothing to check
        let x = Matrix::from_fn(2, c, |_, j| 3.5 * w[(j, 0)]);
        let data = LabeledSet::new(x, vec![0, 0], c).unwrap();
        let r = check_theorem1(&net, &data, usize::MAX, &mut RngStream::new(0)).unwrap();
        assert!(r.holds);
        assert_eq!(r.measured["pairs_checked"], 0.0);

        // tiny features give large gradients: premise fails, no violation claimed
        let x = Matrix::from_fn(c, c, |i, j| 0.01 * w[(j, i)]);
        let data = LabeledSet::new(x, (0..c).collect(), c).unwrap();
        let r = check_theorem1(&net, &data, usize::MAX, &mut RngStream::new(0)).unwrap();
        assert_eq!(r.verdict, Verdict::NotApplicable);
        assert!(!r.holds);
    }

    #[test]
    fn cone_check_rejects_non_etf_head() {
        let head = LinearLayer::new(Matrix::identity(3), None).unwrap();
        let net = Network::from_parts(3, Vec::new(), head).unwrap();
        let data = LabeledSet::new(Matrix::identity(3), vec![0, 1, 2], 3).unwrap();
        let r = check_theorem1(&net, &data, usize::MAX, &mut RngStream::new(0)).unwrap();
        assert_eq!(r.verdict, Verdict::NotApplicable);
        assert!(!r.premises[0].satisfied);
    }

    proptest! {
        #[test]
        fn amhm_closed_form_matches_direct(rho in 1.0f64..5000.0, c in 2usize..200) {
            let a = amhm_ratio(rho, c);
            let b = amhm_ratio_direct(rho, c);
            prop_assert!(((a - b) / b).abs() <= 1e-11);
            prop_assert!(a <= 1.0 / c as f64 + 1e-15);
        }

        #[test]
        fn cone_bound_within_unit_interval(delta in 0.7072f64..=1.0) {
            let b = cone_bound_from_delta(delta);
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }
}
