//! Long-tailed class-size profiles, synthetic data, IDX loading and
//! Many/Medium/Few grouping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{io, Matrix};
use crate::rng::RngStream;

/// Exponential class-size profile `N_k = N_1 · ρ^{-(k-1)/(C-1)}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailProfile {
    pub classes: usize,
    pub head_count: usize,
    pub rho: f64,
}

impl LongTailProfile {
    pub fn new(classes: usize, head_count: usize, rho: f64) -> Result<Self> {
        let p = Self {
            classes,
            head_count,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("profile needs at least 2 classes".into()));
        }
        if self.head_count < 1 {
            return Err(Error::Config("head-class count must be >= 1".into()));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("imbalance factor must be >= 1, got {}", self.rho)));
        }
        Ok(())
    }

    /// Real-valued (unrounded) sizes.
    pub fn real_sizes(&self) -> Vec<f64> {
        let c = self.classes as f64;
        (0..self.classes)
            .map(|k| self.head_count as f64 * self.rho.powf(-(k as f64) / (c - 1.0)))
            .collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        class_sizes(self)
    }
}

/// Per-class counts, rounded half-to-even with a floor of one sample.
pub fn class_sizes(profile: &LongTailProfile) -> Vec<usize> {
    profile
        .real_sizes()
        .into_iter()
        .map(|v| (v.round_ties_even() as usize).max(1))
        .collect()
}

/// `C / Σ 1/N_k`.
pub fn harmonic_mean(counts: &[usize]) -> f64 {
    let real: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    harmonic_mean_real(&real)
}

pub fn harmonic_mean_real(counts: &[f64]) -> f64 {
    counts.len() as f64 / counts.iter().map(|c| 1.0 / c).sum::<f64>()
}

/// Features with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub classes: usize,
    pub class_counts: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct LabelSidecar {
    classes: usize,
    class_counts: Vec<usize>,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Matrix, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::contract(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        let mut class_counts = vec![0usize; classes];
        for &label in &y {
            if label >= classes {
                return Err(Error::contract(format!(
                    "label {label} out of range for {classes} classes"
                )));
            }
            class_counts[label] += 1;
        }
        Ok(Self {
            x,
            y,
            classes,
            class_counts,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Sample indices grouped by class, in input order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &label) in self.y.iter().enumerate() {
            out[label].push(i);
        }
        out
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        let x = self.x.select_rows(idx);
        let y = idx.iter().map(|&i| self.y[i]).collect();
        LabeledSet::new(x, y, self.classes).expect("subset of a valid set is valid")
    }

    /// Training priors `N_k / N`.
    pub fn priors(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.class_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Writes `<stem>.mat` (binary matrix) and `<stem>.json` (labels).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        io::save_matrix(&dir.join(format!("{stem}.mat")), &self.x)?;
        let sidecar = LabelSidecar {
            classes: self.classes,
            class_counts: self.class_counts.clone(),
            labels: self.y.clone(),
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let x = io::load_matrix(&dir.join(format!("{stem}.mat")))?;
        let path = dir.join(format!("{stem}.json"));
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: LabelSidecar = serde_json::from_slice(&bytes)?;
        let set = LabeledSet::new(x, sidecar.labels, sidecar.classes)?;
        if set.class_counts != sidecar.class_counts {
            return Err(Error::Format {
                offset: 0,
                message: format!("class counts in {} disagree with labels", path.display()),
            });
        }
        Ok(set)
    }
}

/// Parameters for Gaussian-blob data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    /// Isotropic per-coordinate standard deviation.
    pub cov_scale: f64,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl GaussianSpec {
    pub fn new(dim: usize, separation: f64, cov_scale: f64) -> Self {
        Self {
            dim,
            separation,
            cov_scale,
            val_per_class: 20,
            test_per_class: 100,
        }
    }
}

/// Train/validation/test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

/// Gaussian blobs: class means uniform on a sphere of radius `separation`,
/// samples `mean + cov_scale · N(0, I)`. Train follows the profile;
/// validation and test are balanced.
pub fn synth_gaussian_lt(
    profile: &LongTailProfile,
    spec: &GaussianSpec,
    rng: &mut RngStream,
) -> Result<Splits> {
    profile.validate()?;
    if !(spec.separation > 0.0) {
        return Err(Error::Config("separation must be positive".into()));
    }
    if spec.cov_scale < 0.0 {
        return Err(Error::Config("cov_scale must be non-negative".into()));
    }
    let c = profile.classes;
    let mut means = Matrix::zeros(c, spec.dim);
    for k in 0..c {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
        let n = crate::linalg::norm(&v);
        for x in v.iter_mut() {
            *x *= spec.separation / n;
        }
        means.row_mut(k).copy_from_slice(&v);
    }
    let draw = |counts: &[usize], rng: &mut RngStream| -> Result<LabeledSet> {
        let total: usize = counts.iter().sum();
        let mut x = Matrix::zeros(total, spec.dim);
        let mut y = Vec::with_capacity(total);
        let mut row = 0;
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let out = x.row_mut(row);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = means[(k, j)] + spec.cov_scale * rng.standard_normal();
                }
                y.push(k);
                row += 1;
            }
        }
        LabeledSet::new(x, y, c)
    };
    let train = draw(&class_sizes(profile), rng)?;
    let val = draw(&vec![spec.val_per_class; c], rng)?;
    let test = draw(&vec![spec.test_per_class; c], rng)?;
    Ok(Splits { train, val, test })
}

/// Uniform per-class subsample of a (typically balanced) set down to the
/// profile's class sizes.
pub fn subsample_longtailed(
    source: &LabeledSet,
    profile: &LongTailProfile,
    rng: &mut RngStream,
) -> Result<LabeledSet> {
    profile.validate()?;
    if profile.classes != source.classes {
        return Err(Error::Config(format!(
            "profile has {} classes, data has {}",
            profile.classes, source.classes
        )));
    }
    let sizes = class_sizes(profile);
    let by_class = source.indices_by_class();
    let mut chosen = Vec::with_capacity(sizes.iter().sum());
    for (k, (&need, pool)) in sizes.iter().zip(&by_class).enumerate() {
        if pool.len() < need {
            return Err(Error::InsufficientSamples {
                class: k,
                available: pool.len(),
                required: need,
            });
        }
        for pick in rng.sample_without_replacement(pool.len(), need) {
            chosen.push(pool[pick]);
        }
    }
    Ok(source.subset(&chosen))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Header of an unsigned-byte IDX file: `(dims, payload offset)`.
fn idx_header(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated IDX magic".into(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("wrong IDX magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: "truncated IDX dimension header".into(),
        });
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!(
                "truncated IDX payload: need {} bytes, file has {}",
                header + payload,
                bytes.len()
            ),
        });
    }
    Ok((dims, header))
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    let (idims, ioff) = idx_header(&img, IDX_IMAGES)?;
    let (ldims, loff) = idx_header(&lab, IDX_LABELS)?;
    let n = idims[0];
    if ldims[0] != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{n} images but {} labels", ldims[0]),
        });
    }
    let p: usize = idims[1..].iter().product();
    let data = img[ioff..ioff + n * p]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let x = Matrix::from_vec(n, p, data)?;
    let y: Vec<usize> = lab[loff..loff + n].iter().map(|&b| b as usize).collect();
    let classes = y.iter().max().map_or(0, |m| m + 1);
    LabeledSet::new(x, y, classes)
}

/// Writes an IDX pair; images become `rows × cols` with `rows·cols = dim`
/// given by `image_shape`. Values must lie in `[0, 1]`.
pub fn write_idx(
    set: &LabeledSet,
    image_shape: (usize, usize),
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if image_shape.0 * image_shape.1 != set.dim() {
        return Err(Error::contract("image shape does not match feature dimension"));
    }
    let mut img = Vec::with_capacity(16 + set.x.as_slice().len());
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for d in [set.len(), image_shape.0, image_shape.1] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in set.x.as_slice() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + set.len());
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for &y in &set.y {
        lab.push(u8::try_from(y).map_err(|_| Error::contract("label exceeds 255"))?);
    }
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];
}

/// Class `k` is Many if `N_k > many_min`, Few if `N_k < few_max`, else Medium.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub many_min: usize,
    pub few_max: usize,
}

impl GroupThresholds {
    /// CIFAR10-LT: Many `1000 < N_k`, Medium `200 <= N_k <= 1000`.
    pub fn cifar10() -> Self {
        Self {
            many_min: 1000,
            few_max: 200,
        }
    }

    /// CIFAR100-LT (also mini-ImageNet-LT / ImageNet-LT).
    pub fn cifar100() -> Self {
        Self {
            many_min: 100,
            few_max: 20,
        }
    }

    /// Relative tertiles: roughly the largest third Many, smallest third Few.
    pub fn tertiles(counts: &[usize]) -> Self {
        let mut desc = counts.to_vec();
        desc.sort_unstable_by(|a, b| b.cmp(a));
        let c = desc.len();
        let third = (c / 3).max(1);
        if c < 3 {
            return Self {
                many_min: desc.last().copied().unwrap_or(0).saturating_sub(1),
                few_max: 0,
            };
        }
        Self {
            many_min: desc[third],
            few_max: desc[c - third - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub thresholds: GroupThresholds,
    pub groups: Vec<Group>,
}

impl GroupAssignment {
    pub fn members(&self, group: Group) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == group)
            .map(|(k, _)| k)
            .collect()
    }
}

pub fn assign_groups(counts: &[usize], thresholds: GroupThresholds) -> Result<GroupAssignment> {
    if thresholds.many_min < thresholds.few_max {
        return Err(Error::Config(format!(
            "thresholds out of order: many_min {} < few_max {}",
            thresholds.many_min, thresholds.few_max
        )));
    }
    let groups = counts
        .iter()
        .map(|&n| {
            if n > thresholds.many_min {
                Group::Many
            } else if n < thresholds.few_max {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect();
    Ok(GroupAssignment { thresholds, groups })
}
