//! The HashCoder head: a small MLP mapping an embedding to per-bit logits.
//!
//! Hidden blocks are `Linear → BatchNorm → ReLU`; the output block is
//! `Linear → BatchNorm` with no activation. The final normalization centers
//! every logit column over the batch, which keeps each bit close to a 50/50
//! split. Backward is written out by hand against a [`ForwardCache`].

use std::fmt;

use crate::error::{config_err, shape_err, Error, Result};
use crate::numkit::{matmul_transa, matmul_transb, DenseMatrix, Rng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Hidden width of the small variant.
pub const SMALL_WIDTH: usize = 512;
/// Hidden width of the large variant.
pub const LARGE_WIDTH: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`, so a row batch maps through `x · Wᵀ + b`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    pub norm: BatchNorm,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct HashCoderModel {
    input_dim: usize,
    code_bits: usize,
    hidden_layers: usize,
    hidden_width: usize,
    layers: Vec<Layer>,
    mode: Mode,
    /// Bumped on every parameter update; caches from an older generation
    /// are rejected by `backward`.
    generation: u64,
}

impl PartialEq for HashCoderModel {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.code_bits == other.code_bits
            && self.hidden_layers == other.hidden_layers
            && self.hidden_width == other.hidden_width
            && self.layers == other.layers
            && self.mode == other.mode
    }
}

/// Which parameter of which layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl ParamId {
    /// Only linear weights are decayed.
    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParamKind::Weight => "linear.weight",
            ParamKind::Bias => "linear.bias",
            ParamKind::Gamma => "norm.gamma",
            ParamKind::Beta => "norm.beta",
        };
        write!(f, "layers.{}.{kind}", self.layer)
    }
}

/// Everything a train-mode forward pass needs to remember for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: DenseMatrix,
    normalized: DenseMatrix,
    inv_std: Vec<f64>,
    /// Output of the affine BN step, before any ReLU.
    affine: DenseMatrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    /// Gradient w.r.t. the input embeddings.
    pub input: DenseMatrix,
}

impl Gradients {
    /// Parameter gradients in the same order as
    /// [`HashCoderModel::param_slices_mut`].
    pub fn param_slices(&self) -> Vec<(ParamId, &[f64])> {
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for (layer, g) in self.layers.iter().enumerate() {
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Weight,
                },
                g.weight.as_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Bias,
                },
                g.bias.as_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Gamma,
                },
                g.gamma.as_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Beta,
                },
                g.beta.as_slice(),
            ));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.param_slices()
            .into_iter()
            .flat_map(|(_, s)| s.iter().copied())
            .collect()
    }

    /// Adds another gradient of the same model into this one. Input
    /// gradients are dropped if the batches differ in shape.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err!("gradients of different models"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            add_into(&mut a.bias, &b.bias);
            add_into(&mut a.gamma, &b.gamma);
            add_into(&mut a.beta, &b.beta);
        }
        if self.input.shape() == other.input.shape() {
            self.input.add_assign(&other.input)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl HashCoderModel {
    /// Fresh model: weights uniform in `±√(6/fan_in)`, zero biases, identity
    /// BatchNorm, running stats `(0, 1)`. Starts in train mode.
    pub fn init(
        input_dim: usize,
        code_bits: usize,
        hidden_layers: usize,
        hidden_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || code_bits == 0 || hidden_width == 0 {
            return Err(config_err!(
                "dimensions must be positive (input {input_dim}, bits {code_bits}, width {hidden_width})"
            ));
        }
        if !(2..=3).contains(&hidden_layers) {
            return Err(config_err!("hidden layers must be 2 or 3, got {hidden_layers}"));
        }
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input_dim;
        for i in 0..=hidden_layers {
            let out = if i == hidden_layers { code_bits } else { hidden_width };
            let bound = (6.0 / fan_in as f64).sqrt();
            let weights = (0..out * fan_in).map(|_| rng.uniform(-bound, bound)).collect();
            layers.push(Layer {
                linear: Linear {
                    weight: DenseMatrix::from_vec(out, fan_in, weights)?,
                    bias: vec![0.0; out],
                },
                norm: BatchNorm::new(out),
                relu: i != hidden_layers,
            });
            fan_in = out;
        }
        Ok(Self {
            input_dim,
            code_bits,
            hidden_layers,
            hidden_width,
            layers,
            mode: Mode::Train,
            generation: 0,
        })
    }

    /// Reassembles a model from stored layers, validating the architecture.
    pub fn from_layers(input_dim: usize, code_bits: usize, hidden_width: usize, layers: Vec<Layer>) -> Result<Self> {
        let hidden_layers = layers.len().saturating_sub(1);
        if !(2..=3).contains(&hidden_layers) {
            return Err(config_err!("hidden layers must be 2 or 3, got {hidden_layers}"));
        }
        let mut expected_in = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            let last = i == hidden_layers;
            let expected_out = if last { code_bits } else { hidden_width };
            let l = &layer.linear;
            let n = &layer.norm;
            if l.in_dim() != expected_in
                || l.out_dim() != expected_out
                || l.bias.len() != expected_out
                || n.gamma.len() != expected_out
                || n.beta.len() != expected_out
                || n.running_mean.len() != expected_out
                || n.running_var.len() != expected_out
            {
                return Err(shape_err!("layer {i} does not match the declared architecture"));
            }
            if layer.relu == last {
                return Err(config_err!("layer {i} has the wrong activation"));
            }
            if n.running_var.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Validation(format!(
                    "layer {i} has a non-positive running variance"
                )));
            }
            expected_in = expected_out;
        }
        Ok(Self {
            input_dim,
            code_bits,
            hidden_layers,
            hidden_width,
            layers,
            mode: Mode::Eval,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn hidden_layers(&self) -> usize {
        self.hidden_layers
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.linear.weight.as_slice().len() + l.linear.bias.len() + 2 * l.norm.gamma.len())
            .sum()
    }

    /// Mutable views of every trainable parameter. Counts as a parameter
    /// update: outstanding forward caches become stale.
    pub fn param_slices_mut(&mut self) -> Vec<(ParamId, &mut [f64])> {
        self.generation += 1;
        let mut out = Vec::with_capacity(self.layers.len() * 4);
        for (layer, l) in self.layers.iter_mut().enumerate() {
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Weight,
                },
                l.linear.weight.as_mut_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Bias,
                },
                l.linear.bias.as_mut_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Gamma,
                },
                l.norm.gamma.as_mut_slice(),
            ));
            out.push((
                ParamId {
                    layer,
                    kind: ParamKind::Beta,
                },
                l.norm.beta.as_mut_slice(),
            ));
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.linear.weight.as_slice());
            out.extend_from_slice(&l.linear.bias);
            out.extend_from_slice(&l.norm.gamma);
            out.extend_from_slice(&l.norm.beta);
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(shape_err!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            ));
        }
        let mut offset = 0;
        for (_, slot) in self.param_slices_mut() {
            slot.copy_from_slice(&values[offset..offset + slot.len()]);
            offset += slot.len();
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.linear.weight.is_finite()
                && [
                    &l.linear.bias,
                    &l.norm.gamma,
                    &l.norm.beta,
                    &l.norm.running_mean,
                    &l.norm.running_var,
                ]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
        })
    }

    fn check_input(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(shape_err!(
                "model expects {}-dimensional input, got {}",
                self.input_dim,
                x.cols()
            ));
        }
        Ok(())
    }

    /// Runs the model in its current mode. Train mode returns a cache and
    /// updates running statistics.
    pub fn forward(&mut self, x: &DenseMatrix) -> Result<(DenseMatrix, Option<ForwardCache>)> {
        match self.mode {
            Mode::Train => self.forward_train(x).map(|(z, c)| (z, Some(c))),
            Mode::Eval => self.forward_eval(x).map(|z| (z, None)),
        }
    }

    /// Batch-statistics forward pass. Normalizes with the population
    /// variance and folds the unbiased variance into the running estimate.
    pub fn forward_train(&mut self, x: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        self.check_input(x)?;
        let batch = x.rows();
        if batch < 2 {
            return Err(Error::BatchSize(format!(
                "train-mode forward needs at least 2 rows, got {batch}"
            )));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let mut pre = matmul_transb(&h, &layer.linear.weight)?;
            add_row_bias(&mut pre, &layer.linear.bias);
            let width = pre.cols();
            let mut mean = vec![0.0; width];
            for row in pre.row_iter() {
                add_into(&mut mean, row);
            }
            mean.iter_mut().for_each(|m| *m /= batch as f64);
            let mut var = vec![0.0; width];
            for row in pre.row_iter() {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
            var.iter_mut().for_each(|v| *v /= batch as f64);
            let bn = &mut layer.norm;
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut normalized = pre;
            let mut affine = DenseMatrix::zeros(batch, width);
            for r in 0..batch {
                let nrow = normalized.row_mut(r);
                for j in 0..width {
                    nrow[j] = (nrow[j] - mean[j]) * inv_std[j];
                }
                let arow = affine.row_mut(r);
                for j in 0..width {
                    arow[j] = bn.gamma[j] * nrow[j] + bn.beta[j];
                }
            }
            let unbias = batch as f64 / (batch as f64 - 1.0);
            for j in 0..width {
                bn.running_mean[j] = (1.0 - bn.momentum) * bn.running_mean[j] + bn.momentum * mean[j];
                bn.running_var[j] = (1.0 - bn.momentum) * bn.running_var[j] + bn.momentum * var[j] * unbias;
            }
            let mut out = affine.clone();
            if layer.relu {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, out),
                normalized,
                inv_std,
                affine,
            });
        }
        Ok((
            h,
            ForwardCache {
                generation: self.generation,
                batch,
                layers: caches,
            },
        ))
    }

    /// Running-statistics forward pass. Each output row depends only on the
    /// matching input row.
    pub fn forward_eval(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = matmul_transb(&h, &layer.linear.weight)?;
            add_row_bias(&mut out, &layer.linear.bias);
            let bn = &layer.norm;
            let scale: Vec<f64> = bn.running_var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for j in 0..row.len() {
                    let v = bn.gamma[j] * ((row[j] - bn.running_mean[j]) * scale[j]) + bn.beta[j];
                    row[j] = if layer.relu { v.max(0.0) } else { v };
                }
            }
            h = out;
        }
        Ok(h)
    }

    /// Reverse pass through the composition recorded in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_z: &DenseMatrix) -> Result<Gradients> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::State(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        if grad_z.shape() != (cache.batch, self.code_bits) {
            return Err(shape_err!(
                "output gradient is {:?}, expected {:?}",
                grad_z.shape(),
                (cache.batch, self.code_bits)
            ));
        }
        let batch = cache.batch as f64;
        let mut upstream = grad_z.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if layer.relu {
                for (g, a) in upstream.as_mut_slice().iter_mut().zip(lc.affine.as_slice()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let width = upstream.cols();
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for r in 0..upstream.rows() {
                let g = upstream.row(r);
                let xn = lc.normalized.row(r);
                for j in 0..width {
                    dgamma[j] += g[j] * xn[j];
                    dbeta[j] += g[j];
                }
            }
            // dxhat = g·γ; dx = inv_std/B · (B·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let gamma = &layer.norm.gamma;
            let sum_dxhat: Vec<f64> = (0..width).map(|j| dbeta[j] * gamma[j]).collect();
            let sum_dxhat_xhat: Vec<f64> = (0..width).map(|j| dgamma[j] * gamma[j]).collect();
            let mut dpre = DenseMatrix::zeros(upstream.rows(), width);
            for r in 0..upstream.rows() {
                let g = upstream.row(r);
                let xn = lc.normalized.row(r);
                let out = dpre.row_mut(r);
                for j in 0..width {
                    let dxhat = g[j] * gamma[j];
                    out[j] = lc.inv_std[j] / batch * (batch * dxhat - sum_dxhat[j] - xn[j] * sum_dxhat_xhat[j]);
                }
            }
            let dweight = matmul_transa(&dpre, &lc.input)?;
            let mut dbias = vec![0.0; width];
            for row in dpre.row_iter() {
                add_into(&mut dbias, row);
            }
            upstream = crate::numkit::matmul(&dpre, &layer.linear.weight)?;
            grads.push(LayerGrads {
                weight: dweight,
                bias: dbias,
                gamma: dgamma,
                beta: dbeta,
            });
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: upstream,
        })
    }
}

fn add_row_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for r in 0..m.rows() {
        add_into(m.row_mut(r), bias);
    }
}

/// Numerically stable logistic function; `sigmoid(0) == 0.5` exactly.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid of a logit matrix.
pub fn probabilities(z: &DenseMatrix) -> DenseMatrix {
    let data = z.as_slice().iter().map(|&v| sigmoid(v)).collect();
    DenseMatrix::from_vec(z.rows(), z.cols(), data).expect("same shape")
}

/// Hard threshold `1{p ≥ 0.5}` as a 0/1 matrix. Ties go to 1.
pub fn binarize(p: &DenseMatrix) -> DenseMatrix {
    let data = p.as_slice().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    DenseMatrix::from_vec(p.rows(), p.cols(), data).expect("same shape")
}

/// Head selector for dual-stream models. Single-head models only have head 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadId {
    First,
    Second,
}

impl HeadId {
    pub fn number(self) -> u8 {
        match self {
            HeadId::First => 1,
            HeadId::Second => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(HeadId::First),
            2 => Ok(HeadId::Second),
            _ => Err(config_err!("head must be 1 or 2, got {n}")),
        }
    }
}

/// One head shared by both views, or one head per stream.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Single(HashCoderModel),
    Dual(HashCoderModel, HashCoderModel),
}

impl Encoder {
    pub fn dual(first: HashCoderModel, second: HashCoderModel) -> Result<Self> {
        if first.code_bits() != second.code_bits() {
            return Err(config_err!(
                "dual heads must share the code length ({} vs {})",
                first.code_bits(),
                second.code_bits()
            ));
        }
        Ok(Encoder::Dual(first, second))
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Encoder::Dual(..))
    }

    pub fn code_bits(&self) -> usize {
        self.first().code_bits()
    }

    pub fn first(&self) -> &HashCoderModel {
        match self {
            Encoder::Single(m) | Encoder::Dual(m, _) => m,
        }
    }

    pub fn head(&self, id: HeadId) -> Result<&HashCoderModel> {
        match (self, id) {
            (_, HeadId::First) => Ok(self.first()),
            (Encoder::Dual(_, m), HeadId::Second) => Ok(m),
            (Encoder::Single(_), HeadId::Second) => Err(config_err!("single-head model has no second head")),
        }
    }

    pub fn heads(&self) -> Vec<&HashCoderModel> {
        match self {
            Encoder::Single(m) => vec![m],
            Encoder::Dual(a, b) => vec![a, b],
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        match self {
            Encoder::Single(m) => m.set_mode(mode),
            Encoder::Dual(a, b) => {
                a.set_mode(mode);
                b.set_mode(mode);
            }
        }
    }
}
