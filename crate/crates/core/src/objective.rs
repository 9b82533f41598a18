//! Training objective: `L_hash = L_align + λ·L_div`.
//!
//! `L_align` is the symmetrized binary cross-entropy between one view's hard
//! code (the teacher, held constant) and the other view's bit probabilities
//! (the student). `L_div = −R(C)` where `R(C) = ½ log det(I + (d/N)·C)` and
//! `C` is the second-moment matrix of the row-normalized logits.
//!
//! Gradients are returned with respect to the logits of each view; the
//! teacher codes contribute none.

use crate::error::{config_err, shape_err, Error, Result};
use crate::hashcoder::{binarize, probabilities};
use crate::numkit::{matmul, matmul_transa, Cholesky, DenseMatrix};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` inside BCE.
pub const PROB_FLOOR: f64 = 1e-7;

/// Row norms below this are floored before normalization.
pub const NORM_FLOOR: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Compensated running sum. Keeps the loss accumulation independent of the
/// rounding drift of long plain sums.
#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Cross-entropy of one code against one probability vector, summed over bits.
pub fn bce_row(target: &[f64], p: &[f64]) -> f64 {
    let mut acc = NeumaierSum::default();
    for (&y, &p) in target.iter().zip(p) {
        let p = clamp_prob(p);
        acc.add(-(y * p.ln() + (1.0 - y) * (1.0 - p).ln()));
    }
    acc.value()
}

/// Batch BCE: summed over bits, averaged over rows.
pub fn bce(target: &DenseMatrix, p: &DenseMatrix) -> Result<f64> {
    if target.shape() != p.shape() {
        return Err(shape_err!(
            "bce target {:?} vs probabilities {:?}",
            target.shape(),
            p.shape()
        ));
    }
    if target.rows() == 0 {
        return Err(shape_err!("bce of an empty batch"));
    }
    let mut acc = NeumaierSum::default();
    for r in 0..target.rows() {
        acc.add(bce_row(target.row(r), p.row(r)));
    }
    Ok(acc.value() / target.rows() as f64)
}

/// Alignment value with gradients on both views' logits.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub value: f64,
    pub grad_z1: DenseMatrix,
    pub grad_z2: DenseMatrix,
}

/// `½[BCE(y¹, p²) + BCE(y², p¹)]` with `y^v = 1{σ(z^v) ≥ ½}` held constant.
pub fn alignment_loss(z1: &DenseMatrix, z2: &DenseMatrix) -> Result<Alignment> {
    let y1 = binarize(&probabilities(z1));
    let y2 = binarize(&probabilities(z2));
    alignment_loss_with_teachers(z1, z2, &y1, &y2)
}

/// Alignment against caller-supplied teacher codes. `y1` is the teacher for
/// view 2's student and `y2` for view 1's.
pub fn alignment_loss_with_teachers(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    y1: &DenseMatrix,
    y2: &DenseMatrix,
) -> Result<Alignment> {
    let shape = z1.shape();
    if z2.shape() != shape || y1.shape() != shape || y2.shape() != shape {
        return Err(shape_err!(
            "alignment inputs disagree: z1 {:?}, z2 {:?}, y1 {:?}, y2 {:?}",
            shape,
            z2.shape(),
            y1.shape(),
            y2.shape()
        ));
    }
    if shape.0 == 0 {
        return Err(shape_err!("alignment of an empty batch"));
    }
    let p1 = probabilities(z1);
    let p2 = probabilities(z2);
    let value = 0.5 * (bce(y1, &p2)? + bce(y2, &p1)?);
    let denom = 2.0 * shape.0 as f64;
    let student_grad = |p: &DenseMatrix, teacher: &DenseMatrix| {
        let data = p
            .as_slice()
            .iter()
            .zip(teacher.as_slice())
            .map(|(p, y)| (p - y) / denom)
            .collect();
        DenseMatrix::from_vec(shape.0, shape.1, data).expect("same shape")
    };
    Ok(Alignment {
        value,
        grad_z1: student_grad(&p1, y2),
        grad_z2: student_grad(&p2, y1),
    })
}

#[derive(Debug, Clone)]
pub struct CodingRate {
    pub rate: f64,
    /// `∂R/∂z` for every pooled row.
    pub grad: DenseMatrix,
}

/// `R = ½ log det(I + (d/N)·C)` with `C = (1/N) Σ vᵢvᵢᵀ`, `vᵢ = zᵢ/‖zᵢ‖`,
/// and `N` the number of pooled rows.
pub fn coding_rate(z_pool: &DenseMatrix, d: usize) -> Result<CodingRate> {
    let (n, b) = z_pool.shape();
    if n < 2 {
        return Err(Error::BatchSize(format!(
            "coding rate needs at least 2 pooled rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(config_err!("coding-rate scale must be positive"));
    }
    if !z_pool.is_finite() {
        return Err(Error::NumericalDomain("non-finite logits in coding-rate pool".into()));
    }
    let mut v = z_pool.clone();
    let mut norms = Vec::with_capacity(n);
    for r in 0..n {
        let row = v.row_mut(r);
        let norm = crate::numkit::norm2(row).max(NORM_FLOOR);
        row.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    let nf = n as f64;
    let alpha = d as f64 / (nf * nf);
    // I + (d/N)·(VᵀV/N)
    let mut m = matmul_transa(&v, &v)?;
    m.scale(alpha);
    for i in 0..b {
        m.set(i, i, m.get(i, i) + 1.0);
    }
    let chol = Cholesky::factor(&m)?;
    let rate = 0.5 * chol.logdet();
    // ∂R/∂V = (d/N²)·V·M⁻¹
    let mut grad_v = matmul(&v, &chol.inverse())?;
    grad_v.scale(alpha);
    // through vᵢ = zᵢ/‖zᵢ‖
    let mut grad = grad_v;
    for r in 0..n {
        let vr = v.row(r);
        let proj = crate::numkit::dot(vr, grad.row(r));
        let norm = norms[r];
        let g = grad.row_mut(r);
        for (gj, vj) in g.iter_mut().zip(vr) {
            *gj = (*gj - vj * proj) / norm;
        }
    }
    Ok(CodingRate { rate, grad })
}

/// Weighting and pooling of the diversity term.
#[derive(Debug, Clone, PartialEq)]
pub struct DiversityConfig {
    pub lambda: f64,
    /// The `d` in `I + (d/N)·C`; `None` means the code length.
    pub rate_scale_d: Option<usize>,
    /// Pool both views' logits into one coding-rate estimate. When off, only
    /// view 1 is used.
    pub pool_both_views: bool,
    /// Permit `λ = 0` (alignment-only ablation).
    pub allow_zero_lambda: bool,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            rate_scale_d: None,
            pool_both_views: true,
            allow_zero_lambda: false,
        }
    }
}

impl DiversityConfig {
    pub fn ablation() -> Self {
        Self {
            lambda: 0.0,
            allow_zero_lambda: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(config_err!("lambda must be a non-negative number, got {}", self.lambda));
        }
        if self.lambda == 0.0 && !self.allow_zero_lambda {
            return Err(config_err!("lambda must be > 0 unless the ablation flag is set"));
        }
        if self.rate_scale_d == Some(0) {
            return Err(config_err!("coding-rate scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub align: f64,
    /// `−R(C)`.
    pub div: f64,
    pub total: f64,
    pub grad_z1: DenseMatrix,
    pub grad_z2: DenseMatrix,
}

/// Full objective and its gradients on both views' logits.
pub fn crovca_loss(z1: &DenseMatrix, z2: &DenseMatrix, cfg: &DiversityConfig) -> Result<LossBreakdown> {
    let y1 = binarize(&probabilities(z1));
    let y2 = binarize(&probabilities(z2));
    crovca_loss_with_teachers(z1, z2, &y1, &y2, cfg)
}

/// [`crovca_loss`] with the teacher codes supplied by the caller.
pub fn crovca_loss_with_teachers(
    z1: &DenseMatrix,
    z2: &DenseMatrix,
    y1: &DenseMatrix,
    y2: &DenseMatrix,
    cfg: &DiversityConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let Alignment {
        value: align,
        mut grad_z1,
        mut grad_z2,
    } = alignment_loss_with_teachers(z1, z2, y1, y2)?;
    let d = cfg.rate_scale_d.unwrap_or(z1.cols());
    let pool = if cfg.pool_both_views {
        z1.vstack(z2)?
    } else {
        z1.clone()
    };
    let rate = coding_rate(&pool, d)?;
    let div = -rate.rate;
    if cfg.lambda != 0.0 {
        let b = z1.rows();
        for r in 0..rate.grad.rows() {
            let target = if r < b {
                grad_z1.row_mut(r)
            } else {
                grad_z2.row_mut(r - b)
            };
            for (t, g) in target.iter_mut().zip(rate.grad.row(r)) {
                *t -= cfg.lambda * g;
            }
        }
    }
    let total = align + cfg.lambda * div;
    if !total.is_finite() || !grad_z1.is_finite() || !grad_z2.is_finite() {
        return Err(Error::NumericalDomain("non-finite loss or gradient".into()));
    }
    Ok(LossBreakdown {
        align,
        div,
        total,
        grad_z1,
        grad_z2,
    })
}
