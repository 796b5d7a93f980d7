//! Feature extractors built from MLP and residual blocks with batch
//! normalization, plus a linear classifier head.
//!
//! Activations are row-major `N × width` matrices. Linear weights are stored
//! `out × in`, so the head weight is `C × d` and its rows are the per-class
//! vectors `w_k`; [`LinearLayer::columns`] gives the `d × C` view.
//!
//! Every mutation of parameters or running statistics bumps a generation
//! counter. A [`ForwardCache`] remembers the generation it was computed at and
//! [`Network::backward`] refuses caches from an older generation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{io, matmul, matmul_nt, matmul_tn, Matrix};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
    pub trainable: bool,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::contract(format!(
                    "bias length {} does not match {} outputs",
                    b.len(),
                    weight.rows()
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            trainable: true,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x · Wᵀ + b`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul_nt(x, &self.weight)?;
        if let Some(b) = &self.bias {
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        Ok(out)
    }

    /// Weight as `in × out`: column `k` is the vector of output `k`.
    pub fn columns(&self) -> Matrix {
        self.weight.transpose()
    }

    pub fn set_columns(&mut self, w: &Matrix) -> Result<()> {
        if w.shape() != (self.in_dim(), self.out_dim()) {
            return Err(Error::Shape {
                op: "set_columns",
                left: (self.in_dim(), self.out_dim()),
                right: w.shape(),
            });
        }
        self.weight = w.transpose();
        Ok(())
    }

    pub(crate) fn backward(&self, input: &Matrix, dy: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
        let dw = matmul_tn(dy, input)?;
        let db = column_sums(dy);
        let dx = matmul(dy, &self.weight)?;
        Ok((dw, db, dx))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub gamma_trainable: bool,
    pub beta_trainable: bool,
    /// When set, every gamma entry equals this value and gamma is frozen.
    pub gamma_fixed: Option<f64>,
}

/// Per-column quantities of one normalization pass.
#[derive(Clone, Debug)]
struct BnTrace {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: 1e-5,
            momentum: 0.1,
            gamma_trainable: true,
            beta_trainable: true,
            gamma_fixed: None,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn fix_gamma(&mut self, value: f64) {
        self.gamma.iter_mut().for_each(|g| *g = value);
        self.gamma_fixed = Some(value);
        self.gamma_trainable = false;
    }

    /// Sets beta to zero and stops training it.
    pub fn freeze_beta_at_zero(&mut self) {
        self.beta.iter_mut().for_each(|b| *b = 0.0);
        self.beta_trainable = false;
    }

    pub fn gamma_is_trainable(&self) -> bool {
        self.gamma_trainable && self.gamma_fixed.is_none()
    }

    fn normalize(&self, x: &Matrix, mode: Mode) -> Result<BnTrace> {
        let (n, w) = x.shape();
        if w != self.width() {
            return Err(Error::Shape {
                op: "batch_norm",
                left: x.shape(),
                right: (1, self.width()),
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::contract(
                        "batch normalization in train mode needs a batch of at least 2",
                    ));
                }
                let mean = x.column_means();
                let mut var = vec![0.0; w];
                for r in 0..n {
                    for ((v, xv), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *v += (xv - m) * (xv - m);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat = Matrix::from_fn(n, w, |r, c| (x[(r, c)] - mean[c]) * inv_std[c]);
        Ok(BnTrace {
            xhat,
            inv_std,
            mean,
            var,
        })
    }

    fn affine(&self, xhat: &Matrix) -> Matrix {
        Matrix::from_fn(xhat.rows(), xhat.cols(), |r, c| {
            self.gamma[c] * xhat[(r, c)] + self.beta[c]
        })
    }

    fn update_running(&mut self, trace: &BnTrace, n: usize) {
        let m = self.momentum;
        let unbias = n as f64 / (n as f64 - 1.0);
        for j in 0..self.width() {
            self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * trace.mean[j];
            self.running_var[j] = (1.0 - m) * self.running_var[j] + m * trace.var[j] * unbias;
        }
    }

    /// Returns `(dx, dgamma, dbeta)`.
    fn backward(&self, trace: &BnTrace, dy: &Matrix, mode: Mode) -> (Matrix, Vec<f64>, Vec<f64>) {
        let (n, w) = dy.shape();
        let mut dgamma = vec![0.0; w];
        let mut dbeta = vec![0.0; w];
        let mut s1 = vec![0.0; w];
        let mut s2 = vec![0.0; w];
        for r in 0..n {
            for c in 0..w {
                let g = dy[(r, c)];
                let xh = trace.xhat[(r, c)];
                dgamma[c] += g * xh;
                dbeta[c] += g;
                let dxh = g * self.gamma[c];
                s1[c] += dxh;
                s2[c] += dxh * xh;
            }
        }
        let dx = match mode {
            Mode::Eval => {
                Matrix::from_fn(n, w, |r, c| dy[(r, c)] * self.gamma[c] * trace.inv_std[c])
            }
            Mode::Train => {
                let nf = n as f64;
                Matrix::from_fn(n, w, |r, c| {
                    let dxh = dy[(r, c)] * self.gamma[c];
                    trace.inv_std[c] / nf * (nf * dxh - s1[c] - trace.xhat[(r, c)] * s2[c])
                })
            }
        };
        (dx, dgamma, dbeta)
    }
}

/// One feature-extractor block.
///
/// `Mlp`: linear, BN, ReLU.
/// `Res`: linear, BN, ReLU, linear, BN, add the block input, ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Block {
    Mlp {
        linear: LinearLayer,
        bn: BatchNormLayer,
    },
    Res {
        lin1: LinearLayer,
        bn1: BatchNormLayer,
        lin2: LinearLayer,
        bn2: BatchNormLayer,
    },
}

impl Block {
    /// Number of individually addressable sub-layer outputs.
    pub fn sublayers(&self) -> usize {
        match self {
            Block::Mlp { .. } => 4,
            Block::Res { .. } => 9,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Block::Mlp { linear, .. } => linear.in_dim(),
            Block::Res { lin1, .. } => lin1.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Block::Mlp { linear, .. } => linear.out_dim(),
            Block::Res { lin2, .. } => lin2.out_dim(),
        }
    }

    pub fn norms(&self) -> Vec<&BatchNormLayer> {
        match self {
            Block::Mlp { bn, .. } => vec![bn],
            Block::Res { bn1, bn2, .. } => vec![bn1, bn2],
        }
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        match self {
            Block::Mlp { bn, .. } => vec![bn],
            Block::Res { bn1, bn2, .. } => vec![bn1, bn2],
        }
    }
}

#[derive(Clone, Debug)]
enum BlockCache {
    Mlp {
        input: Matrix,
        bn: BnTrace,
        pre: Matrix,
    },
    Res {
        input: Matrix,
        bn1: BnTrace,
        pre1: Matrix,
        hidden: Matrix,
        bn2: BnTrace,
        sum: Matrix,
    },
}

/// Everything a backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    mode: Mode,
    blocks: Vec<BlockCache>,
    pub features: Matrix,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Extractor,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub part: Part,
    pub trainable: bool,
    pub shape: (usize, usize),
}

impl ParamInfo {
    pub fn is_bn(&self) -> bool {
        matches!(self.kind, ParamKind::Gamma | ParamKind::Beta)
    }
}

/// Gradients aligned with [`Network::param_infos`], plus the gradient with
/// respect to the extracted features.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Vec<Vec<f64>>,
    pub features: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Res,
}

/// Architecture description used by [`init`].
///
/// `Mlp` stacks `depth` MLP blocks of `width`. `Res` puts one MLP block
/// (input to `width`) in front of `depth` residual blocks of `width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub arch: Arch,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    #[serde(default)]
    pub head_bias: bool,
}

impl NetSpec {
    pub fn mlp(input_dim: usize, width: usize, depth: usize, classes: usize) -> Self {
        Self {
            arch: Arch::Mlp,
            input_dim,
            width,
            depth,
            classes,
            head_bias: false,
        }
    }

    pub fn res(input_dim: usize, width: usize, depth: usize, classes: usize) -> Self {
        Self {
            arch: Arch::Res,
            ..Self::mlp(input_dim, width, depth, classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::Config("input_dim and classes must be positive".into()));
        }
        if self.width == 0 && (self.depth > 0 || self.arch == Arch::Res) {
            return Err(Error::Config("width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_dim: usize,
    blocks: Vec<Block>,
    head: LinearLayer,
    logit_offset: Option<Vec<f64>>,
    generation: u64,
}

fn uniform_linear(rng: &mut RngStream, input: usize, output: usize, bias: bool) -> LinearLayer {
    let bound = 1.0 / (input as f64).sqrt();
    let weight = rng.uniform_matrix(output, input, -bound, bound);
    LinearLayer {
        weight,
        bias: bias.then(|| vec![0.0; output]),
        trainable: true,
    }
}

/// Random network: linear weights uniform in `±1/√fan_in`, biases 0,
/// gamma 1, beta 0. Weights are drawn block by block, head last.
pub fn init(spec: &NetSpec, rng: &mut RngStream) -> Result<Network> {
    spec.validate()?;
    let mut blocks = Vec::new();
    let mut dim = spec.input_dim;
    let mlp_block = |rng: &mut RngStream, dim: usize| Block::Mlp {
        linear: uniform_linear(rng, dim, spec.width, false),
        bn: BatchNormLayer::new(spec.width),
    };
    match spec.arch {
        Arch::Mlp => {
            for _ in 0..spec.depth {
                blocks.push(mlp_block(rng, dim));
                dim = spec.width;
            }
        }
        Arch::Res => {
            blocks.push(mlp_block(rng, dim));
            dim = spec.width;
            for _ in 0..spec.depth {
                blocks.push(Block::Res {
                    lin1: uniform_linear(rng, dim, dim, false),
                    bn1: BatchNormLayer::new(dim),
                    lin2: uniform_linear(rng, dim, dim, false),
                    bn2: BatchNormLayer::new(dim),
                });
            }
        }
    }
    let head = uniform_linear(rng, dim, spec.classes, spec.head_bias);
    Network::from_parts(spec.input_dim, blocks, head)
}

fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

fn relu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    pre.zip_with(dy, "relu_backward", |p, g| if p > 0.0 { g } else { 0.0 })
        .expect("relu shapes agree")
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn tap(taps: &mut Option<&mut Vec<Matrix>>, m: &Matrix) {
    if let Some(t) = taps.as_deref_mut() {
        t.push(m.clone());
    }
}

impl Network {
    /// Assembles a network, checking that dimensions chain.
    pub fn from_parts(input_dim: usize, blocks: Vec<Block>, head: LinearLayer) -> Result<Self> {
        let mut dim = input_dim;
        for (i, b) in blocks.iter().enumerate() {
            if b.in_dim() != dim {
                return Err(Error::contract(format!(
                    "block {i} expects input width {} but receives {dim}",
                    b.in_dim()
                )));
            }
            if let Block::Res { lin1, lin2, .. } = b {
                if lin1.out_dim() != dim || lin2.out_dim() != dim || lin2.in_dim() != dim {
                    return Err(Error::contract(format!(
                        "residual block {i} must keep width {dim}"
                    )));
                }
            }
            for bn in b.norms() {
                if bn.width() != b.out_dim() {
                    return Err(Error::contract(format!("block {i} batch-norm width mismatch")));
                }
            }
            dim = b.out_dim();
        }
        if head.in_dim() != dim {
            return Err(Error::contract(format!(
                "head expects {} features but extractor yields {dim}",
                head.in_dim()
            )));
        }
        Ok(Self {
            input_dim,
            blocks,
            head,
            logit_offset: None,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Marks all outstanding caches stale.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        self.touch();
        &mut self.blocks
    }

    pub fn head(&self) -> &LinearLayer {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut LinearLayer {
        self.touch();
        &mut self.head
    }

    /// Constant added to every logit row (additive logit adjustment).
    pub fn logit_offset(&self) -> Option<&[f64]> {
        self.logit_offset.as_deref()
    }

    pub fn set_logit_offset(&mut self, offset: Option<Vec<f64>>) -> Result<()> {
        if let Some(o) = &offset {
            if o.len() != self.classes() {
                return Err(Error::contract("logit offset length must equal class count"));
            }
        }
        self.touch();
        self.logit_offset = offset;
        Ok(())
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        self.blocks.iter().flat_map(|b| b.norms()).collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        self.touch();
        self.blocks.iter_mut().flat_map(|b| b.norms_mut()).collect()
    }

    /// Total number of addressable sub-layer outputs of the extractor.
    pub fn sublayer_count(&self) -> usize {
        self.blocks.iter().map(Block::sublayers).sum()
    }

    /// Head logits (plus any logit offset) for given features.
    pub fn logits_from_features(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = self.head.forward(features)?;
        if let Some(off) = &self.logit_offset {
            for r in 0..z.rows() {
                for (v, o) in z.row_mut(r).iter_mut().zip(off) {
                    *v += o;
                }
            }
        }
        Ok(z)
    }

    fn run(&self, x: &Matrix, mode: Mode, mut taps: Option<&mut Vec<Matrix>>) -> Result<ForwardCache> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: x.shape(),
                right: (x.rows(), self.input_dim),
            });
        }
        tap(&mut taps, x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for block in &self.blocks {
            match block {
                Block::Mlp { linear, bn } => {
                    let lin = linear.forward(&h)?;
                    tap(&mut taps, &lin);
                    let tr = bn.normalize(&lin, mode)?;
                    tap(&mut taps, &tr.xhat);
                    let pre = bn.affine(&tr.xhat);
                    tap(&mut taps, &pre);
                    let out = relu(&pre);
                    tap(&mut taps, &out);
                    caches.push(BlockCache::Mlp {
                        input: h,
                        bn: tr,
                        pre,
                    });
                    h = out;
                }
                Block::Res { lin1, bn1, lin2, bn2 } => {
                    let l1 = lin1.forward(&h)?;
                    tap(&mut taps, &l1);
                    let t1 = bn1.normalize(&l1, mode)?;
                    tap(&mut taps, &t1.xhat);
                    let pre1 = bn1.affine(&t1.xhat);
                    tap(&mut taps, &pre1);
                    let hidden = relu(&pre1);
                    tap(&mut taps, &hidden);
                    let l2 = lin2.forward(&hidden)?;
                    tap(&mut taps, &l2);
                    let t2 = bn2.normalize(&l2, mode)?;
                    tap(&mut taps, &t2.xhat);
                    let a2 = bn2.affine(&t2.xhat);
                    tap(&mut taps, &a2);
                    let sum = a2.add(&h)?;
                    tap(&mut taps, &sum);
                    let out = relu(&sum);
                    tap(&mut taps, &out);
                    caches.push(BlockCache::Res {
                        input: h,
                        bn1: t1,
                        pre1,
                        hidden,
                        bn2: t2,
                        sum,
                    });
                    h = out;
                }
            }
        }
        let logits = self.logits_from_features(&h)?;
        Ok(ForwardCache {
            generation: self.generation,
            mode,
            blocks: caches,
            features: h,
            logits,
        })
    }

    /// Forward pass without side effects. In train mode batch statistics
    /// are used but running statistics are left untouched.
    pub fn forward_pass(&self, x: &Matrix, mode: Mode) -> Result<ForwardCache> {
        self.run(x, mode, None)
    }

    /// Forward pass; in train mode also updates BN running statistics.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<ForwardCache> {
        let mut cache = self.run(x, mode, None)?;
        if mode == Mode::Train {
            let n = x.rows();
            for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
                match (block, bc) {
                    (Block::Mlp { bn, .. }, BlockCache::Mlp { bn: t, .. }) => bn.update_running(t, n),
                    (
                        Block::Res { bn1, bn2, .. },
                        BlockCache::Res {
                            bn1: t1, bn2: t2, ..
                        },
                    ) => {
                        bn1.update_running(t1, n);
                        bn2.update_running(t2, n);
                    }
                    _ => unreachable!("cache layout follows block layout"),
                }
            }
            self.touch();
            cache.generation = self.generation;
        }
        Ok(cache)
    }

    /// Eval-mode features.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.run(x, Mode::Eval, None)?.features)
    }

    /// Output after sub-layer `index`; `0` is the input itself and the last
    /// index is the extractor output.
    pub fn extract_intermediate(&self, x: &Matrix, index: usize, mode: Mode) -> Result<Matrix> {
        let count = self.sublayer_count();
        if index > count {
            return Err(Error::contract(format!(
                "layer index {index} out of range 0..={count}"
            )));
        }
        let mut taps = Vec::with_capacity(count + 1);
        self.run(x, mode, Some(&mut taps))?;
        Ok(taps.swap_remove(index))
    }

    /// Reverse-mode gradients of a scalar loss given `∂loss/∂logits` and,
    /// optionally, an extra gradient on the features (feature penalties).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Matrix,
        extra_dfeatures: Option<&Matrix>,
    ) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache(format!(
                "cache generation {} but network is at {}",
                cache.generation, self.generation
            )));
        }
        if dlogits.shape() != cache.logits.shape() {
            return Err(Error::Shape {
                op: "backward",
                left: cache.logits.shape(),
                right: dlogits.shape(),
            });
        }
        let (dw, db, mut dfeat) = self.head.backward(&cache.features, dlogits)?;
        if let Some(extra) = extra_dfeatures {
            dfeat.axpy(1.0, extra)?;
        }
        let features_grad = dfeat.clone();

        let mut per_block: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.blocks.len());
        let mut dh = dfeat;
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut grads = Vec::new();
            match (block, bc) {
                (Block::Mlp { linear, bn }, BlockCache::Mlp { input, bn: t, pre }) => {
                    let dpre = relu_backward(pre, &dh);
                    let (dlin, dg, dbeta) = bn.backward(t, &dpre, cache.mode);
                    let (dw, db, dx) = linear.backward(input, &dlin)?;
                    grads.push(dw.into_vec());
                    if linear.bias.is_some() {
                        grads.push(db);
                    }
                    grads.push(dg);
                    grads.push(dbeta);
                    dh = dx;
                }
                (
                    Block::Res { lin1, bn1, lin2, bn2 },
                    BlockCache::Res {
                        input,
                        bn1: t1,
                        pre1,
                        hidden,
                        bn2: t2,
                        sum,
                    },
                ) => {
                    let dsum = relu_backward(sum, &dh);
                    let (dl2, dg2, dbeta2) = bn2.backward(t2, &dsum, cache.mode);
                    let (dw2, db2, dhidden) = lin2.backward(hidden, &dl2)?;
                    let dpre1 = relu_backward(pre1, &dhidden);
                    let (dl1, dg1, dbeta1) = bn1.backward(t1, &dpre1, cache.mode);
                    let (dw1, db1, mut dx) = lin1.backward(input, &dl1)?;
                    dx.axpy(1.0, &dsum)?;
                    grads.push(dw1.into_vec());
                    if lin1.bias.is_some() {
                        grads.push(db1);
                    }
                    grads.push(dg1);
                    grads.push(dbeta1);
                    grads.push(dw2.into_vec());
                    if lin2.bias.is_some() {
                        grads.push(db2);
                    }
                    grads.push(dg2);
                    grads.push(dbeta2);
                    dh = dx;
                }
                _ => unreachable!("cache layout follows block layout"),
            }
            per_block.push(grads);
        }
        let mut params: Vec<Vec<f64>> = per_block.into_iter().rev().flatten().collect();
        params.push(dw.into_vec());
        if self.head.bias.is_some() {
            params.push(db);
        }
        Ok(Gradients {
            params,
            features: features_grad,
        })
    }

    /// Parameter descriptions in canonical order: blocks first (linear
    /// weight, bias, BN gamma, beta per sub-layer), head last.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<ParamInfo>, name: String, l: &LinearLayer, part: Part| {
            out.push(ParamInfo {
                name: format!("{name}.weight"),
                kind: ParamKind::Weight,
                part,
                trainable: l.trainable,
                shape: l.weight.shape(),
            });
            if let Some(b) = &l.bias {
                out.push(ParamInfo {
                    name: format!("{name}.bias"),
                    kind: ParamKind::Bias,
                    part,
                    trainable: l.trainable,
                    shape: (1, b.len()),
                });
            }
        };
        let bn = |out: &mut Vec<ParamInfo>, name: String, b: &BatchNormLayer| {
            out.push(ParamInfo {
                name: format!("{name}.gamma"),
                kind: ParamKind::Gamma,
                part: Part::Extractor,
                trainable: b.gamma_is_trainable(),
                shape: (1, b.width()),
            });
            out.push(ParamInfo {
                name: format!("{name}.beta"),
                kind: ParamKind::Beta,
                part: Part::Extractor,
                trainable: b.beta_trainable,
                shape: (1, b.width()),
            });
        };
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Mlp { linear, bn: b } => {
                    lin(&mut out, format!("block{i}.linear"), linear, Part::Extractor);
                    bn(&mut out, format!("block{i}.bn"), b);
                }
                Block::Res { lin1, bn1, lin2, bn2 } => {
                    lin(&mut out, format!("block{i}.lin1"), lin1, Part::Extractor);
                    bn(&mut out, format!("block{i}.bn1"), bn1);
                    lin(&mut out, format!("block{i}.lin2"), lin2, Part::Extractor);
                    bn(&mut out, format!("block{i}.bn2"), bn2);
                }
            }
        }
        lin(&mut out, "head".into(), &self.head, Part::Head);
        out
    }

    /// Parameter values in [`Network::param_infos`] order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a [f64]>, l: &'a LinearLayer) {
            out.push(l.weight.as_slice());
            if let Some(b) = &l.bias {
                out.push(b);
            }
        }
        for block in &self.blocks {
            match block {
                Block::Mlp { linear, bn } => {
                    lin(&mut out, linear);
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                Block::Res { lin1, bn1, lin2, bn2 } => {
                    lin(&mut out, lin1);
                    out.push(&bn1.gamma);
                    out.push(&bn1.beta);
                    lin(&mut out, lin2);
                    out.push(&bn2.gamma);
                    out.push(&bn2.beta);
                }
            }
        }
        lin(&mut out, &self.head);
        out
    }

    /// Mutable parameter values in [`Network::param_infos`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.touch();
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut LinearLayer) {
            out.push(l.weight.as_mut_slice());
            if let Some(b) = &mut l.bias {
                out.push(b);
            }
        }
        for block in &mut self.blocks {
            match block {
                Block::Mlp { linear, bn } => {
                    lin(&mut out, linear);
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Block::Res { lin1, bn1, lin2, bn2 } => {
                    lin(&mut out, lin1);
                    out.push(&mut bn1.gamma);
                    out.push(&mut bn1.beta);
                    lin(&mut out, lin2);
                    out.push(&mut bn2.gamma);
                    out.push(&mut bn2.beta);
                }
            }
        }
        lin(&mut out, &mut self.head);
        out
    }

    /// Writes `<stem>.bin` (matrix records) and `<stem>.json` (manifest).
    pub fn save_checkpoint(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut records: Vec<Matrix> = Vec::new();
        let mut names = Vec::new();
        let mut linears = Vec::new();
        let mut norms = Vec::new();
        let mut push_lin = |records: &mut Vec<Matrix>, names: &mut Vec<RecordInfo>, name: String, l: &LinearLayer| {
            records.push(l.weight.clone());
            names.push(RecordInfo::new(format!("{name}.weight"), l.weight.shape()));
            if let Some(b) = &l.bias {
                records.push(row(b));
                names.push(RecordInfo::new(format!("{name}.bias"), (1, b.len())));
            }
            linears.push(LinearMeta {
                bias: l.bias.is_some(),
                trainable: l.trainable,
            });
        };
        let push_bn = |records: &mut Vec<Matrix>, names: &mut Vec<RecordInfo>, norms: &mut Vec<BnMeta>, name: String, b: &BatchNormLayer| {
            for (suffix, v) in [
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ] {
                records.push(row(v));
                names.push(RecordInfo::new(format!("{name}.{suffix}"), (1, v.len())));
            }
            norms.push(BnMeta {
                eps: b.eps,
                momentum: b.momentum,
                gamma_trainable: b.gamma_trainable,
                beta_trainable: b.beta_trainable,
                gamma_fixed: b.gamma_fixed,
            });
        };
        let mut layout = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                Block::Mlp { linear, bn } => {
                    layout.push(Arch::Mlp);
                    push_lin(&mut records, &mut names, format!("block{i}.linear"), linear);
                    push_bn(&mut records, &mut names, &mut norms, format!("block{i}.bn"), bn);
                }
                Block::Res { lin1, bn1, lin2, bn2 } => {
                    layout.push(Arch::Res);
                    push_lin(&mut records, &mut names, format!("block{i}.lin1"), lin1);
                    push_bn(&mut records, &mut names, &mut norms, format!("block{i}.bn1"), bn1);
                    push_lin(&mut records, &mut names, format!("block{i}.lin2"), lin2);
                    push_bn(&mut records, &mut names, &mut norms, format!("block{i}.bn2"), bn2);
                }
            }
        }
        push_lin(&mut records, &mut names, "head".into(), &self.head);
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            input_dim: self.input_dim,
            layout,
            linears,
            norms,
            logit_offset: self.logit_offset.clone(),
            records: names,
            params: self.param_infos(),
        };
        let refs: Vec<&Matrix> = records.iter().collect();
        io::save_matrices(&dir.join(format!("{stem}.bin")), &refs)?;
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Network> {
        let path = dir.join(format!("{stem}.json"));
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                offset: 0,
                message: format!("unknown checkpoint format {:?}", manifest.format),
            });
        }
        let records = io::load_matrices(&dir.join(format!("{stem}.bin")))?;
        if records.len() != manifest.records.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "manifest lists {} records, file has {}",
                    manifest.records.len(),
                    records.len()
                ),
            });
        }
        for (r, info) in records.iter().zip(&manifest.records) {
            if r.shape() != info.shape {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("record {} has shape {:?}, expected {:?}", info.name, r.shape(), info.shape),
                });
            }
        }
        let mut recs = records.into_iter();
        let mut lins = manifest.linears.iter();
        let mut bns = manifest.norms.iter();
        let bad = || Error::Format {
            offset: 0,
            message: "checkpoint manifest is inconsistent".into(),
        };
        let mut take_lin = |recs: &mut std::vec::IntoIter<Matrix>| -> Result<LinearLayer> {
            let meta = lins.next().ok_or_else(bad)?;
            let weight = recs.next().ok_or_else(bad)?;
            let bias = if meta.bias {
                Some(recs.next().ok_or_else(bad)?.into_vec())
            } else {
                None
            };
            Ok(LinearLayer {
                weight,
                bias,
                trainable: meta.trainable,
            })
        };
        let mut take_bn = |recs: &mut std::vec::IntoIter<Matrix>| -> Result<BatchNormLayer> {
            let meta = bns.next().ok_or_else(bad)?;
            let mut next = || recs.next().map(Matrix::into_vec).ok_or_else(bad);
            Ok(BatchNormLayer {
                gamma: next()?,
                beta: next()?,
                running_mean: next()?,
                running_var: next()?,
                eps: meta.eps,
                momentum: meta.momentum,
                gamma_trainable: meta.gamma_trainable,
                beta_trainable: meta.beta_trainable,
                gamma_fixed: meta.gamma_fixed,
            })
        };
        let mut blocks = Vec::new();
        for arch in &manifest.layout {
            blocks.push(match arch {
                Arch::Mlp => Block::Mlp {
                    linear: take_lin(&mut recs)?,
                    bn: take_bn(&mut recs)?,
                },
                Arch::Res => Block::Res {
                    lin1: take_lin(&mut recs)?,
                    bn1: take_bn(&mut recs)?,
                    lin2: take_lin(&mut recs)?,
                    bn2: take_bn(&mut recs)?,
                },
            });
        }
        let head = take_lin(&mut recs)?;
        let mut net = Network::from_parts(manifest.input_dim, blocks, head)?;
        net.set_logit_offset(manifest.logit_offset)?;
        Ok(net)
    }
}

fn row(v: &[f64]) -> Matrix {
    Matrix::from_vec(1, v.len(), v.to_vec()).expect("row length matches")
}

const CHECKPOINT_FORMAT: &str = "ltlab-checkpoint-v1";

#[derive(Serialize, Deserialize)]
struct RecordInfo {
    name: String,
    shape: (usize, usize),
}

impl RecordInfo {
    fn new(name: String, shape: (usize, usize)) -> Self {
        Self { name, shape }
    }
}

#[derive(Serialize, Deserialize)]
struct LinearMeta {
    bias: bool,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct BnMeta {
    eps: f64,
    momentum: f64,
    gamma_trainable: bool,
    beta_trainable: bool,
    gamma_fixed: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    input_dim: usize,
    layout: Vec<Arch>,
    linears: Vec<LinearMeta>,
    norms: Vec<BnMeta>,
    logit_offset: Option<Vec<f64>>,
    records: Vec<RecordInfo>,
    params: Vec<ParamInfo>,
}
