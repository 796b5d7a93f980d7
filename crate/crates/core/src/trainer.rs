//! Mini-batch SGD with momentum, the cosine schedule, and the method presets
//! (one- and two-stage recipes).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{apply_la, argmax_rows, grid_search_la, make_etf, summarize_accuracy};
use crate::classifier::{AccuracySummary, ClassPriors, EtfBasis, EtfSpec, LaConfig, LaKind, LaSearch};
use crate::dataset::{GroupAssignment, LabeledSet, Splits};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{cb_loss, ce_loss, fr_penalty, maxnorm_project, renormalize_columns, wd_penalty};
use crate::losses::{ClassWeights, RegConfig, WdSubset};
use crate::metrics::fdr;
use crate::network::{init, Mode, NetSpec, Network, Part};
use crate::rng::{keys, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl SgdConfig {
    pub fn new(lr0: f64, batch_size: usize, epochs: usize) -> Self {
        Self {
            lr0,
            momentum: 0.9,
            batch_size,
            epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// `lr0 · (1 + cos(π t / T)) / 2`; a zero-length schedule stays at `lr0`.
pub fn cosine_lr(lr0: f64, t: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return lr0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * t / total).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Whole,
    HeadOnly,
    ExtractorOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Ce,
    /// Per-sample weight `N̄ / N_y`.
    Cb,
    /// Effective-number weights with the given `beta`.
    CbEffective { beta: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BnPolicy {
    Normal,
    /// Weight decay skips BN scales and shifts.
    NoWdOnBn,
    /// Every BN scale pinned to `value`, shifts frozen at zero.
    FixedGamma { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadPolicy {
    Learned,
    /// Head replaced by a fixed ETF (bias zeroed) for the stage.
    Etf { energy: f64, basis: EtfBasis, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub scope: Scope,
    pub loss: LossKind,
    #[serde(default)]
    pub reg: RegConfig,
    pub bn: BnPolicy,
    pub head: HeadPolicy,
    /// Rescale every head column to this norm before the stage starts.
    #[serde(default)]
    pub renormalize_head: Option<f64>,
}

impl StageSpec {
    pub fn whole(loss: LossKind, reg: RegConfig) -> Self {
        Self {
            scope: Scope::Whole,
            loss,
            reg,
            bn: BnPolicy::Normal,
            head: HeadPolicy::Learned,
            renormalize_head: None,
        }
    }

    pub fn head_only(loss: LossKind, reg: RegConfig) -> Self {
        Self {
            scope: Scope::HeadOnly,
            ..Self::whole(loss, reg)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        if let BnPolicy::FixedGamma { value } = self.bn {
            if !value.is_finite() {
                return Err(Error::Config("fixed gamma must be finite".into()));
            }
        }
        if let Some(t) = self.renormalize_head {
            if !(t > 0.0) {
                return Err(Error::Config("renormalization target must be positive".into()));
            }
        }
        if let LossKind::CbEffective { beta } = self.loss {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("beta must lie in [0, 1), got {beta}")));
            }
        }
        Ok(())
    }
}

/// One epoch of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean over batches of the full objective (loss plus penalties).
    pub train_loss: f64,
    /// Eval-mode accuracy on the whole training set after the epoch.
    pub train_acc: f64,
    /// Wall-clock time; kept out of serialized logs so reruns are byte-identical.
    #[serde(skip)]
    pub wall_ms: f64,
    /// Per-sample eval-mode correctness after the epoch.
    #[serde(skip)]
    pub correct: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageLog {
    pub epochs: Vec<EpochLog>,
}

impl StageLog {
    /// Correctness history for forgetting scores.
    pub fn history(&self) -> Vec<Vec<bool>> {
        self.epochs.iter().map(|e| e.correct.clone()).collect()
    }
}

/// One JSON object per epoch.
pub fn to_jsonl(logs: &[StageLog]) -> Result<String> {
    let mut out = String::new();
    for e in logs.iter().flat_map(|l| &l.epochs) {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Contiguous batch boundaries; a trailing batch of one sample joins the
/// previous batch so batch statistics are always defined.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(batch_size.max(1))
        .map(|s| s..(s + batch_size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

fn prepare_stage(net: &mut Network, stage: &StageSpec) -> Result<()> {
    if let BnPolicy::FixedGamma { value } = stage.bn {
        for bn in net.bn_layers_mut() {
            bn.fix_gamma(value);
            bn.freeze_beta_at_zero();
        }
    }
    if let HeadPolicy::Etf { energy, basis, seed } = stage.head {
        let w = make_etf(&EtfSpec {
            dim: net.feature_dim(),
            classes: net.classes(),
            energy,
            seed,
            basis,
        })?;
        let head = net.head_mut();
        head.set_columns(&w)?;
        if let Some(b) = &mut head.bias {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        head.trainable = false;
    }
    if let Some(t) = stage.renormalize_head {
        let w = renormalize_columns(&net.head().columns(), t)?;
        net.head_mut().set_columns(&w)?;
    }
    if let Some(eta) = &stage.reg.maxnorm_eta {
        if eta.len() != net.classes() {
            return Err(Error::Config(format!(
                "{} MaxNorm caps for {} classes",
                eta.len(),
                net.classes()
            )));
        }
    }
    Ok(())
}

fn trainable_mask(net: &Network, scope: Scope) -> Vec<bool> {
    net.param_infos()
        .iter()
        .map(|i| {
            i.trainable
                && match scope {
                    Scope::Whole => true,
                    Scope::HeadOnly => i.part == Part::Head,
                    Scope::ExtractorOnly => i.part == Part::Extractor,
                }
        })
        .collect()
}

fn stage_loss(kind: LossKind, logits: &Matrix, y: &[usize], weights: &Option<ClassWeights>) -> Result<(f64, Matrix)> {
    match (kind, weights) {
        (LossKind::Ce, _) => ce_loss(logits, y),
        (_, Some(w)) => cb_loss(logits, y, w),
        (_, None) => unreachable!("class weights are built for every balanced loss"),
    }
}

/// Trains `net` in place for one stage. `shuffle` drives the data order only.
///
/// Each step adds the loss gradient, the weight-decay gradient and (for
/// stages that touch the extractor) the feature-penalty gradient, takes a
/// momentum step `v ← μv + g, p ← p − lr·v` on trainable parameters and then
/// projects the head onto its MaxNorm caps. Head-only stages run on
/// eval-mode features computed once, so the extractor and BN running
/// statistics are untouched.
pub fn train_stage(
    net: &mut Network,
    data: &LabeledSet,
    stage: &StageSpec,
    sgd: &SgdConfig,
    shuffle: &mut RngStream,
    stage_index: usize,
) -> Result<StageLog> {
    stage.validate()?;
    sgd.validate()?;
    if data.dim() != net.input_dim() || data.classes != net.classes() {
        return Err(Error::contract(format!(
            "data is {}-dimensional with {} classes, network expects {} and {}",
            data.dim(),
            data.classes,
            net.input_dim(),
            net.classes()
        )));
    }
    prepare_stage(net, stage)?;
    let mask = trainable_mask(net, stage.scope);
    let subset = match stage.bn {
        BnPolicy::NoWdOnBn => WdSubset::ExcludeBn,
        _ => stage.reg.wd_subset,
    };
    let weights = match stage.loss {
        LossKind::Ce => None,
        LossKind::Cb => Some(ClassWeights::harmonic(&data.class_counts)?),
        LossKind::CbEffective { beta } => Some(ClassWeights::effective_number(beta, &data.class_counts)?),
    };
    let head_only = stage.scope == Scope::HeadOnly;
    let frozen_features = if head_only { Some(net.features(&data.x)?) } else { None };
    let head_trainable = mask.iter().zip(net.param_infos()).any(|(&m, i)| m && i.part == Part::Head);

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut log = StageLog::default();

    for epoch in 0..sgd.epochs {
        let start = Instant::now();
        let lr = cosine_lr(sgd.lr0, epoch as f64, sgd.epochs as f64);
        shuffle.shuffle(&mut order);
        let batches = batch_ranges(n, sgd.batch_size);
        let mut loss_sum = 0.0;
        for (b, range) in batches.iter().enumerate() {
            let idx = &order[range.clone()];
            let yb: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let (mut objective, mut grads) = if let Some(feats) = &frozen_features {
                let fb = feats.select_rows(idx);
                let logits = net.logits_from_features(&fb)?;
                let (loss, dlogits) = stage_loss(stage.loss, &logits, &yb, &weights)?;
                let (dw, db, _) = net.head().backward(&fb, &dlogits)?;
                let mut grads: Vec<Vec<f64>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
                let last = grads.len() - 1;
                if net.head().bias.is_some() {
                    grads[last] = db;
                    grads[last - 1] = dw.into_vec();
                } else {
                    grads[last] = dw.into_vec();
                }
                (loss, grads)
            } else {
                let xb = data.x.select_rows(idx);
                let cache = net.forward(&xb, Mode::Train)?;
                let (loss, dlogits) = stage_loss(stage.loss, &cache.logits, &yb, &weights)?;
                let (fr, dfeat) = if stage.reg.zeta_fr > 0.0 {
                    let (v, g) = fr_penalty(&cache.features, stage.reg.zeta_fr);
                    (v, Some(g))
                } else {
                    (0.0, None)
                };
                let g = net.backward(&cache, &dlogits, dfeat.as_ref())?;
                (loss + fr, g.params)
            };
            if stage.reg.lambda_wd > 0.0 {
                let (wd, wd_grads) = wd_penalty(net, stage.reg.lambda_wd, subset);
                objective += wd;
                for (g, w) in grads.iter_mut().zip(&wd_grads) {
                    g.iter_mut().zip(w).for_each(|(a, b)| *a += b);
                }
            }
            if !objective.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, lr });
            }
            loss_sum += objective;
            for (((p, v), g), &m) in net.params_mut().into_iter().zip(&mut velocity).zip(&grads).zip(&mask) {
                if !m {
                    continue;
                }
                for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = sgd.momentum * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
            if let (Some(eta), true) = (&stage.reg.maxnorm_eta, head_trainable) {
                let w = maxnorm_project(&net.head().columns(), eta)?;
                net.head_mut().set_columns(&w)?;
            }
        }
        let logits = match &frozen_features {
            Some(f) => net.logits_from_features(f)?,
            None => net.forward_pass(&data.x, Mode::Eval)?.logits,
        };
        let correct: Vec<bool> = argmax_rows(&logits).iter().zip(&data.y).map(|(p, y)| p == y).collect();
        let train_acc = correct.iter().filter(|&&c| c).count() as f64 / n.max(1) as f64;
        log.epochs.push(EpochLog {
            stage: stage_index,
            epoch,
            lr,
            train_loss: loss_sum / batches.len().max(1) as f64,
            train_acc,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            correct,
        });
    }
    Ok(log)
}

/// Evaluation on a (typically balanced) set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracySummary,
    pub fdr_train: Option<f64>,
    pub fdr_test: Option<f64>,
}

/// Eval-mode argmax accuracy on `test`, plus FDR of eval-mode features on
/// `test` and, if given, `train`. An undefined FDR is reported as `None`.
pub fn evaluate(
    net: &Network,
    test: &LabeledSet,
    groups: &GroupAssignment,
    train: Option<&LabeledSet>,
) -> Result<EvalReport> {
    let cache = net.forward_pass(&test.x, Mode::Eval)?;
    let accuracy = summarize_accuracy(&argmax_rows(&cache.logits), &test.y, groups);
    let fdr_of = |set: &LabeledSet, feats: &Matrix| fdr(feats, &set.y, set.classes, None).ok();
    let fdr_test = fdr_of(test, &cache.features);
    let fdr_train = match train {
        Some(t) => fdr_of(t, &net.features(&t.x)?),
        None => None,
    };
    Ok(EvalReport {
        accuracy,
        fdr_train,
        fdr_test,
    })
}

/// Hyperparameters shared by the named presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PresetParams {
    pub wd_stage1: f64,
    pub wd_stage2: f64,
    pub fr: f64,
    /// MaxNorm cap for every class in the second WB stage.
    pub maxnorm: f64,
    pub etf_energy: f64,
    pub etf_basis: EtfBasis,
    pub etf_seed: u64,
    /// Candidate BN scales for the fixed-BN preset.
    pub fixed_gamma_grid: Vec<f64>,
    /// Grid for the post-hoc adjustment; `None` uses the default grid.
    pub la_grid: Option<Vec<f64>>,
}

impl Default for PresetParams {
    fn default() -> Self {
        Self {
            wd_stage1: 5e-3,
            wd_stage2: 0.1,
            fr: 0.01,
            maxnorm: 1.0,
            etf_energy: 1.0,
            etf_basis: EtfBasis::RandomQr,
            etf_seed: 0,
            fixed_gamma_grid: vec![0.05, 0.1, 0.15, 0.2],
            la_grid: None,
        }
    }
}

/// Base preset names in reporting order.
pub const PRESET_NAMES: [&str; 9] = [
    "ce",
    "cb",
    "wd",
    "wb",
    "wb-renorm",
    "wd-etf",
    "wd-fr-etf",
    "wd-no-bn",
    "wd-fixed-bn",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodPreset {
    pub name: String,
    pub stages: Vec<StageSpec>,
    /// Adjustment searched on validation after training.
    pub post_hoc: Option<LaKind>,
    pub la_grid: Vec<f64>,
    /// When non-empty, the BN scale is chosen from this grid on validation.
    pub fixed_gamma_grid: Vec<f64>,
}

impl MethodPreset {
    /// Builds a preset from `<base>` or `<base>+add` / `<base>+mult`.
    pub fn named(name: &str, params: &PresetParams, classes: usize) -> Result<Self> {
        let (base, post_hoc) = match name.split_once('+') {
            None => (name, None),
            Some((b, "add")) => (b, Some(LaKind::Additive)),
            Some((b, "mult")) => (b, Some(LaKind::Multiplicative)),
            Some((_, s)) => return Err(Error::Config(format!("unknown adjustment suffix '+{s}'"))),
        };
        let wd1 = RegConfig::wd(params.wd_stage1);
        let etf = HeadPolicy::Etf {
            energy: params.etf_energy,
            basis: params.etf_basis,
            seed: params.etf_seed,
        };
        let extractor_etf = |reg: RegConfig| StageSpec {
            scope: Scope::ExtractorOnly,
            head: etf.clone(),
            ..StageSpec::whole(LossKind::Ce, reg)
        };
        let wb_stage2 = |renorm: bool| {
            let mut reg = RegConfig::wd(params.wd_stage2);
            if !renorm {
                reg.maxnorm_eta = Some(vec![params.maxnorm; classes]);
            }
            StageSpec {
                renormalize_head: renorm.then_some(1.0),
                ..StageSpec::head_only(LossKind::Cb, reg)
            }
        };
        let mut fixed_gamma_grid = Vec::new();
        let stages = match base {
            "ce" => vec![StageSpec::whole(LossKind::Ce, RegConfig::default())],
            "cb" => vec![StageSpec::whole(LossKind::Cb, RegConfig::default())],
            "wd" => vec![StageSpec::whole(LossKind::Ce, wd1)],
            "wb" => vec![StageSpec::whole(LossKind::Ce, wd1), wb_stage2(false)],
            "wb-renorm" => vec![StageSpec::whole(LossKind::Ce, wd1), wb_stage2(true)],
            "wd-etf" => vec![extractor_etf(wd1)],
            "wd-fr-etf" => vec![extractor_etf(RegConfig {
                zeta_fr: params.fr,
                ..wd1
            })],
            "wd-no-bn" => vec![StageSpec {
                bn: BnPolicy::NoWdOnBn,
                ..StageSpec::whole(LossKind::Ce, wd1)
            }],
            "wd-fixed-bn" => {
                let first = *params
                    .fixed_gamma_grid
                    .first()
                    .ok_or_else(|| Error::Config("fixed_gamma_grid is empty".into()))?;
                fixed_gamma_grid = params.fixed_gamma_grid.clone();
                vec![StageSpec {
                    bn: BnPolicy::FixedGamma { value: first },
                    ..StageSpec::whole(LossKind::Ce, wd1)
                }]
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}'; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let la_grid = match (&params.la_grid, post_hoc) {
            (Some(g), _) => g.clone(),
            (None, Some(k)) => k.default_grid(),
            (None, None) => Vec::new(),
        };
        Ok(Self {
            name: name.to_string(),
            stages,
            post_hoc,
            la_grid,
            fixed_gamma_grid,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("preset '{}' has no stages", self.name)));
        }
        self.stages.iter().try_for_each(StageSpec::validate)
    }

    fn with_fixed_gamma(&self, value: f64) -> Self {
        let mut p = self.clone();
        for s in &mut p.stages {
            if let BnPolicy::FixedGamma { value: v } = &mut s.bn {
                *v = value;
            }
        }
        p.fixed_gamma_grid.clear();
        p
    }
}

/// Validation average for one candidate BN scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaTrial {
    pub gamma: f64,
    pub val_average: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub net: Network,
    pub report: EvalReport,
    pub logs: Vec<StageLog>,
    pub la: LaConfig,
    pub la_search: Option<LaSearch>,
    pub gamma_search: Option<Vec<GammaTrial>>,
}

/// Runs every stage, then the post-hoc search, and evaluates on the test
/// split. `rng` is the run's root stream: initialization uses its `INIT`
/// substream and stage `i` shuffles with `SHUFFLE` then `i`.
pub fn run_preset(
    preset: &MethodPreset,
    net_spec: &NetSpec,
    splits: &Splits,
    sgd: &[SgdConfig],
    groups: &GroupAssignment,
    rng: &RngStream,
) -> Result<RunOutput> {
    preset.validate()?;
    if sgd.len() != preset.stages.len() {
        return Err(Error::Config(format!(
            "preset '{}' has {} stages but {} optimizer settings were given",
            preset.name,
            preset.stages.len(),
            sgd.len()
        )));
    }
    if !preset.fixed_gamma_grid.is_empty() {
        let mut best: Option<RunOutput> = None;
        let mut best_val = f64::NEG_INFINITY;
        let mut trials = Vec::new();
        for &g in &preset.fixed_gamma_grid {
            let out = run_preset(&preset.with_fixed_gamma(g), net_spec, splits, sgd, groups, rng)?;
            let val = evaluate(&out.net, &splits.val, groups, None)?.accuracy.average;
            trials.push(GammaTrial { gamma: g, val_average: val });
            // strict comparison keeps the earliest grid value on ties
            if val > best_val {
                best_val = val;
                best = Some(out);
            }
        }
        let mut out = best.expect("grid is non-empty");
        out.gamma_search = Some(trials);
        return Ok(out);
    }

    let mut net = init(net_spec, &mut rng.substream(keys::INIT))?;
    let shuffle_root = rng.substream(keys::SHUFFLE);
    let mut logs = Vec::new();
    for (i, (stage, cfg)) in preset.stages.iter().zip(sgd).enumerate() {
        let mut shuffle = shuffle_root.substream(i as u64);
        logs.push(train_stage(&mut net, &splits.train, stage, cfg, &mut shuffle, i)?);
    }
    let priors = ClassPriors::from_counts(&splits.train.class_counts)?;
    let (la, la_search) = match preset.post_hoc {
        None => (LaConfig::None, None),
        Some(kind) => {
            let feats = net.features(&splits.val.x)?;
            let search = grid_search_la(&feats, &splits.val.y, net.head(), &priors, groups, kind, &preset.la_grid)?;
            (search.best_config(), Some(search))
        }
    };
    apply_la(&mut net, &priors, la)?;
    let report = evaluate(&net, &splits.test, groups, Some(&splits.train))?;
    Ok(RunOutput {
        net,
        report,
        logs,
        la,
        la_search,
        gamma_search: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{assign_groups, synth_gaussian_lt, GaussianSpec, GroupThresholds, LongTailProfile};
    use crate::losses::softmax_rows;
    use crate::network::{Block, LinearLayer};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0.0, 10.0), 0.1);
        assert!(cosine_lr(0.1, 10.0, 10.0).abs() < 1e-17);
        assert!((cosine_lr(0.1, 5.0, 10.0) - 0.05).abs() < 1e-16);
        assert_eq!(cosine_lr(0.1, 0.0, 0.0), 0.1);
    }

    #[test]
    fn batches_merge_single_trailing_sample() {
        assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
        assert_eq!(batch_ranges(1, 4), vec![0..1]);
        assert_eq!(batch_ranges(0, 4), vec![]);
    }

    fn head_net(w: Vec<f64>) -> Network {
        let head = LinearLayer::new(Matrix::from_vec(2, 2, w).unwrap(), None).unwrap();
        Network::from_parts(2, Vec::new(), head).unwrap()
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // one sample x = (1, 0), label 0, W = 0 → p = (1/2, 1/2)
        // ∂/∂W = (p − e_0) xᵀ = [[−1/2, 0], [1/2, 0]]
        let mut net = head_net(vec![0.0; 4]);
        let data = LabeledSet::new(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(), vec![0], 2).unwrap();
        let stage = StageSpec::whole(LossKind::Ce, RegConfig::default());
        let sgd = SgdConfig::new(0.5, 1, 1);
        train_stage(&mut net, &data, &stage, &sgd, &mut RngStream::new(0), 0).unwrap();
        assert_eq!(net.head().weight.as_slice(), &[0.25, 0.0, -0.25, 0.0]);

        // second epoch adds momentum: lr(1) = 0.5·(1 + cos(π/2))/2 = 0.25
        let mut net = head_net(vec![0.0; 4]);
        let sgd = SgdConfig::new(0.5, 1, 2);
        let log = train_stage(&mut net, &data, &stage, &sgd, &mut RngStream::new(0), 0).unwrap();
        let p = softmax_rows(&Matrix::from_rows(&[vec![0.25, -0.25]]).unwrap());
        let g = p[(0, 0)] - 1.0;
        let v = 0.9 * -0.5 + g;
        let expected = 0.25 - 0.25 * v;
        assert!((net.head().weight[(0, 0)] - expected).abs() < 1e-15);
        assert!((net.head().weight[(1, 0)] + expected).abs() < 1e-15);
        assert_eq!(log.epochs.len(), 2);
        assert_eq!(log.epochs[1].lr, 0.25);
    }

    #[test]
    fn zero_epochs_leave_network_unchanged() {
        let (splits, _) = small_problem(1);
        let mut net = init(&NetSpec::mlp(4, 8, 2, 3), &mut RngStream::new(2)).unwrap();
        let before = net.clone();
        let stage = StageSpec::whole(LossKind::Ce, RegConfig::wd(0.01));
        let log = train_stage(&mut net, &splits.train, &stage, &SgdConfig::new(0.1, 8, 0), &mut RngStream::new(3), 0)
            .unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(net.params(), before.params());
    }

    fn small_problem(seed: u64) -> (Splits, GroupAssignment) {
        let profile = LongTailProfile::new(3, 40, 4.0).unwrap();
        let spec = GaussianSpec {
            val_per_class: 10,
            test_per_class: 20,
            ..GaussianSpec::new(4, 3.0, 1.0)
        };
        let splits = synth_gaussian_lt(&profile, &spec, &mut RngStream::new(seed)).unwrap();
        let groups = assign_groups(&splits.train.class_counts, GroupThresholds::tertiles(&splits.train.class_counts)).unwrap();
        (splits, groups)
    }

    /// Independent plain SGD: full recomputation of every step with explicit
    /// loops over a head-only network.
    #[test]
    fn matches_plain_sgd_without_regularization() {
        let (splits, _) = small_problem(4);
        let data = &splits.train;
        let w0: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let mut net = Network::from_parts(4, Vec::new(), LinearLayer::new(Matrix::from_vec(3, 4, w0.clone()).unwrap(), None).unwrap()).unwrap();
        let sgd = SgdConfig::new(0.2, 16, 3);
        let stage = StageSpec::whole(LossKind::Ce, RegConfig::default());
        train_stage(&mut net, data, &stage, &sgd, &mut RngStream::new(9), 0).unwrap();

        let mut w = w0;
        let mut v = vec![0.0; 12];
        let mut rng = RngStream::new(9);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..3 {
            let lr = 0.2 * (1.0 + (std::f64::consts::PI * epoch as f64 / 3.0).cos()) / 2.0;
            rng.shuffle(&mut order);
            for r in batch_ranges(data.len(), 16) {
                let idx = &order[r];
                let mut g = vec![0.0; 12];
                for &i in idx {
                    let x = data.x.row(i);
                    let z: Vec<f64> = (0..3).map(|k| (0..4).map(|j| w[k * 4 + j] * x[j]).sum()).collect();
                    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = z.iter().map(|t| (t - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for k in 0..3 {
                        let d = e[k] / s - if k == data.y[i] { 1.0 } else { 0.0 };
                        for j in 0..4 {
                            g[k * 4 + j] += d * x[j] / idx.len() as f64;
                        }
                    }
                }
                for t in 0..12 {
                    v[t] = 0.9 * v[t] + g[t];
                    w[t] -= lr * v[t];
                }
            }
        }
        for (a, b) in net.head().weight.as_slice().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convex_head_stage_reaches_stationarity() {
        let feats = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.8, 0.2], vec![-1.0, 0.3], vec![-0.2, -1.0]]).unwrap();
        let data = LabeledSet::new(feats, vec![0, 0, 1, 1], 2).unwrap();
        let mut net = head_net(vec![0.1, -0.2, 0.3, 0.0]);
        let lambda = 0.1;
        let stage = StageSpec::head_only(LossKind::Cb, RegConfig::wd(lambda));
        let sgd = SgdConfig {
            momentum: 0.5,
            ..SgdConfig::new(1.0, 4, 3000)
        };
        train_stage(&mut net, &data, &stage, &sgd, &mut RngStream::new(1), 0).unwrap();
        let logits = net.logits_from_features(&data.x).unwrap();
        let w = ClassWeights::harmonic(&data.class_counts).unwrap();
        let (_, dl) = cb_loss(&logits, &data.y, &w).unwrap();
        let (dw, _, _) = net.head().backward(&data.x, &dl).unwrap();
        let grad: f64 = dw
            .as_slice()
            .iter()
            .zip(net.head().weight.as_slice())
            .map(|(g, p)| (g + lambda * p).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(grad <= 1e-8, "gradient norm {grad}");
    }

    #[test]
    fn head_only_stage_isolates_extractor() {
        let (splits, _) = small_problem(5);
        let mut net = init(&NetSpec::mlp(4, 8, 2, 3), &mut RngStream::new(6)).unwrap();
        let stage1 = StageSpec::whole(LossKind::Ce, RegConfig::wd(5e-3));
        train_stage(&mut net, &splits.train, &stage1, &SgdConfig::new(0.05, 16, 3), &mut RngStream::new(7), 0).unwrap();
        let before = net.clone();
        let mut reg = RegConfig::wd(0.1);
        reg.maxnorm_eta = Some(vec![1.0; 3]);
        let stage2 = StageSpec::head_only(LossKind::Cb, reg);
        train_stage(&mut net, &splits.train, &stage2, &SgdConfig::new(0.05, 16, 3), &mut RngStream::new(8), 1).unwrap();
        assert_eq!(net.blocks(), before.blocks());
        assert_ne!(net.head(), before.head());
        assert!(net.head().columns().column_norms().iter().all(|&n| n <= 1.0));
    }

    #[test]
    fn etf_head_is_never_updated() {
        let (splits, _) = small_problem(10);
        let mut net = init(&NetSpec::mlp(4, 8, 2, 3), &mut RngStream::new(6)).unwrap();
        let stage = StageSpec {
            scope: Scope::Whole,
            head: HeadPolicy::Etf {
                energy: 1.0,
                basis: EtfBasis::RandomQr,
                seed: 3,
            },
            ..StageSpec::whole(LossKind::Ce, RegConfig { zeta_fr: 0.01, ..RegConfig::wd(5e-3) })
        };
        train_stage(&mut net, &splits.train, &stage, &SgdConfig::new(0.05, 16, 2), &mut RngStream::new(7), 0).unwrap();
        let etf = make_etf(&EtfSpec { seed: 3, ..EtfSpec::new(8, 3) }).unwrap();
        assert_eq!(net.head().columns(), etf);
    }

    #[test]
    fn fixed_gamma_policy_pins_scales() {
        let (splits, _) = small_problem(11);
        let mut net = init(&NetSpec::res(4, 8, 1, 3), &mut RngStream::new(6)).unwrap();
        let stage = StageSpec {
            bn: BnPolicy::FixedGamma { value: 0.05 },
            ..StageSpec::whole(LossKind::Ce, RegConfig::wd(5e-3))
        };
        train_stage(&mut net, &splits.train, &stage, &SgdConfig::new(0.05, 16, 2), &mut RngStream::new(7), 0).unwrap();
        for bn in net.bn_layers() {
            assert!(bn.gamma.iter().all(|&g| g == 0.05));
            assert!(bn.beta.iter().all(|&b| b == 0.0));
        }
        assert!(matches!(net.blocks()[1], Block::Res { .. }));
    }

    #[test]
    fn nan_loss_reports_location() {
        let (splits, _) = small_problem(12);
        let mut net = init(&NetSpec::mlp(4, 8, 1, 3), &mut RngStream::new(6)).unwrap();
        net.head_mut().weight[(0, 0)] = f64::NAN;
        let err = train_stage(
            &mut net,
            &splits.train,
            &StageSpec::whole(LossKind::Ce, RegConfig::default()),
            &SgdConfig::new(0.1, 16, 1),
            &mut RngStream::new(7),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 0, .. }));
    }

    #[test]
    fn evaluate_constant_logits_and_average() {
        let (splits, groups) = small_problem(13);
        let head = LinearLayer::new(Matrix::zeros(3, 4), None).unwrap();
        let net = Network::from_parts(4, Vec::new(), head).unwrap();
        let r = evaluate(&net, &splits.test, &groups, None).unwrap();
        assert_eq!(r.accuracy.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
        assert!((r.accuracy.average - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn preset_names_parse() {
        let p = PresetParams::default();
        for name in PRESET_NAMES {
            for suffix in ["", "+add", "+mult"] {
                let preset = MethodPreset::named(&format!("{name}{suffix}"), &p, 3).unwrap();
                preset.validate().unwrap();
                assert_eq!(preset.la_grid.len(), if suffix.is_empty() { 0 } else { 21 });
            }
        }
        assert_eq!(MethodPreset::named("wb", &p, 3).unwrap().stages.len(), 2);
        assert!(MethodPreset::named("nope", &p, 3).is_err());
        assert!(MethodPreset::named("wd+both", &p, 3).is_err());
    }

    #[test]
    fn presets_are_deterministic_and_compose() {
        let (splits, groups) = small_problem(14);
        let spec = NetSpec::mlp(4, 8, 2, 3);
        let sgd = SgdConfig::new(0.05, 16, 3);
        let p = PresetParams::default();
        let rng = RngStream::new(21);

        let ce = MethodPreset::named("ce", &p, 3).unwrap();
        let a = run_preset(&ce, &spec, &splits, &[sgd.clone()], &groups, &rng).unwrap();
        let b = run_preset(&ce, &spec, &splits, &[sgd.clone()], &groups, &rng).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.report, b.report);

        // preset ce equals a direct stage run
        let mut net = init(&spec, &mut rng.substream(keys::INIT)).unwrap();
        let mut sh = rng.substream(keys::SHUFFLE).substream(0);
        train_stage(&mut net, &splits.train, &ce.stages[0], &sgd, &mut sh, 0).unwrap();
        assert_eq!(net.params(), a.net.params());

        let wb = MethodPreset::named("wb+mult", &p, 3).unwrap();
        let out = run_preset(&wb, &spec, &splits, &[sgd.clone(), sgd.clone()], &groups, &rng).unwrap();
        assert!(out.la_search.is_some());
        assert_eq!(out.logs.len(), 2);
        assert!(run_preset(&wb, &spec, &splits, &[sgd.clone()], &groups, &rng).is_err());

        let fixed = MethodPreset::named("wd-fixed-bn", &p, 3).unwrap();
        let out = run_preset(&fixed, &spec, &splits, &[sgd], &groups, &rng).unwrap();
        assert_eq!(out.gamma_search.unwrap().len(), 4);
    }

    #[test]
    fn run_log_is_json_lines() {
        let (splits, _) = small_problem(15);
        let mut net = init(&NetSpec::mlp(4, 8, 1, 3), &mut RngStream::new(6)).unwrap();
        let log = train_stage(
            &mut net,
            &splits.train,
            &StageSpec::whole(LossKind::Ce, RegConfig::default()),
            &SgdConfig::new(0.1, 16, 2),
            &mut RngStream::new(7),
            0,
        )
        .unwrap();
        let text = to_jsonl(&[log.clone()]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        for key in ["epoch", "lr", "train_loss", "train_acc"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("wall_ms").is_none());
        assert_eq!(log.history()[0].len(), splits.train.len());
    }
}
