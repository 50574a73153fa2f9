//! Cross-entropy, focal loss, and the multi-class balanced focal loss with
//! per-image class ratios, plus the weight-curve sampler.
//!
//! All three losses consume post-softmax probabilities laid out as a
//! `[N_pix, C]` matrix; probabilities are clamped to `[eps, 1 - eps]` before
//! any logarithm is taken.

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Loss hyperparameters.
///
/// `gamma` defaults to 2 by focal-loss convention (the focusing strength is
/// otherwise unspecified); `alpha` is the base of the per-class weight
/// `alpha^(-r_j)` and 3 is the best-performing sweep value.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_t: f64,
    pub clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 3.0,
            gamma: 2.0,
            alpha_t: 1.0,
            clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument {
                op: "LossConfig",
                reason: format!("alpha must be > 0, got {}", self.alpha),
            });
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "LossConfig",
                reason: format!("gamma must be >= 0, got {}", self.gamma),
            });
        }
        if !(self.alpha_t > 0.0 && self.alpha_t <= 1.0) {
            return Err(Error::InvalidArgument {
                op: "LossConfig",
                reason: format!("alpha_t must be in (0,1], got {}", self.alpha_t),
            });
        }
        Ok(())
    }
}

/// Per-image class pixel fractions r_j; sums to one for any non-empty image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRatioVector {
    pub r: Vec<f64>,
}

impl ClassRatioVector {
    pub fn classes(&self) -> usize {
        self.r.len()
    }
}

/// r_j = t_j / sum_k t_k with t_j the count of pixels labeled j in this
/// single image. Classes absent from the image get r_j = 0.
pub fn class_ratios(labels: &LabelMap, classes: usize) -> Result<ClassRatioVector> {
    if classes == 0 {
        return Err(Error::InvalidArgument {
            op: "class_ratios",
            reason: "classes must be >= 1".into(),
        });
    }
    let counts = labels.class_counts(classes)?;
    let total: u64 = counts.iter().sum();
    // LabelMap construction forbids empty grids, so total > 0.
    let r = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ClassRatioVector { r })
}

/// Ground-truth selector: one-hot rows stored compactly as class indices.
#[derive(Debug, Clone)]
pub struct OneHotLabels {
    ids: Vec<u32>,
    classes: usize,
}

impl OneHotLabels {
    pub fn from_ids(ids: Vec<u32>, classes: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("OneHotLabels"));
        }
        for &id in &ids {
            if id as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    id: id as usize,
                    classes,
                });
            }
        }
        Ok(OneHotLabels { ids, classes })
    }

    /// Row-major flattening of a label map: row y*W + x selects pixel (y, x).
    pub fn from_label_map(labels: &LabelMap, classes: usize) -> Result<Self> {
        labels.check_classes(classes)?;
        Self::from_ids(labels.ids().iter().map(|&v| v as u32).collect(), classes)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Materialize the `[N_pix, C]` 0/1 matrix.
    pub fn dense<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.ids.len() * self.classes];
        for (row, &id) in self.ids.iter().enumerate() {
            data[row * self.classes + id as usize] = T::one();
        }
        Tensor::new(&[self.ids.len(), self.classes], data).expect("non-empty one-hot")
    }
}

fn check_prob_matrix<T: Scalar>(
    op: &'static str,
    probs: &Tensor<T>,
    labels: &OneHotLabels,
) -> Result<()> {
    if probs.rank() != 2 || probs.shape()[0] != labels.rows() || probs.shape()[1] != labels.classes()
    {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![labels.rows(), labels.classes()],
            got: probs.shape().to_vec(),
        });
    }
    Ok(())
}

// Shared fused kernel: mean over pixels of -weight(y_i) * (1-q)^gamma * ln(q)
// with q the clamped ground-truth probability. `weights[j]` is the class
// weight; cross-entropy is gamma = 0 with unit weights.
fn weighted_focal<T: Scalar>(
    g: &Graph<T>,
    op: &'static str,
    probs: &Tensor<T>,
    labels: &OneHotLabels,
    weights: Vec<f64>,
    gamma: f64,
    clamp_eps: f64,
) -> Result<Tensor<T>> {
    check_prob_matrix(op, probs, labels)?;
    let classes = labels.classes();
    let n_pix = labels.rows();
    let inv_n = 1.0 / n_pix as f64;
    let lo = clamp_eps;
    let hi = 1.0 - clamp_eps;

    let pd = probs.data();
    let mut acc = 0.0f64;
    for (row, &id) in labels.ids().iter().enumerate() {
        let p = pd[row * classes + id as usize].as_f64();
        let q = p.clamp(lo, hi);
        acc -= weights[id as usize] * (1.0 - q).powf(gamma) * q.ln();
    }
    drop(pd);
    let out = Tensor::scalar(T::from_f64(acc * inv_n));

    let probs_h = probs.clone();
    let ids: Vec<u32> = labels.ids().to_vec();
    g.record(&out, Box::new(move |gy, sink| {
        let go = gy[0].as_f64() * inv_n;
        let pd = probs_h.data();
        sink.accumulate(&probs_h, |gp| {
            for (row, &id) in ids.iter().enumerate() {
                let i = row * classes + id as usize;
                let p = pd[i].as_f64();
                if p <= lo || p >= hi {
                    continue; // clamped flat: zero derivative
                }
                let one_minus = 1.0 - p;
                // d/dp [-(1-p)^g ln p] = g (1-p)^(g-1) ln p - (1-p)^g / p
                let mut d = -one_minus.powf(gamma) / p;
                if gamma > 0.0 {
                    d += gamma * one_minus.powf(gamma - 1.0) * p.ln();
                }
                gp[i] = gp[i] + T::from_f64(go * weights[id as usize] * d);
            }
        });
    }));
    Ok(out)
}

/// Categorical cross-entropy: -(1/N) sum_i sum_j phat_ij ln p_ij.
pub fn cross_entropy<T: Scalar>(
    g: &Graph<T>,
    probs: &Tensor<T>,
    labels: &OneHotLabels,
) -> Result<Tensor<T>> {
    let cfg = LossConfig::default();
    weighted_focal(
        g,
        "cross_entropy",
        probs,
        labels,
        vec![1.0; labels.classes()],
        0.0,
        cfg.clamp_eps,
    )
}

/// Focal loss: mean over pixels of -alpha_t (1-p_t)^gamma ln p_t, with p_t the
/// probability assigned to the ground-truth class.
pub fn focal_loss<T: Scalar>(
    g: &Graph<T>,
    probs: &Tensor<T>,
    labels: &OneHotLabels,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    weighted_focal(
        g,
        "focal_loss",
        probs,
        labels,
        vec![cfg.alpha_t; labels.classes()],
        cfg.gamma,
        cfg.clamp_eps,
    )
}

/// Multi-class balanced focal loss:
/// (1/N) sum_i sum_j -alpha^(-r_j) phat_ij (1-p_ij)^gamma ln p_ij.
///
/// `ratios` must come from the same image's ground truth via [`class_ratios`];
/// they are treated as constants by the backward pass.
pub fn mcb_focal_loss<T: Scalar>(
    g: &Graph<T>,
    probs: &Tensor<T>,
    labels: &OneHotLabels,
    ratios: &ClassRatioVector,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if ratios.classes() != labels.classes() {
        return Err(Error::ShapeMismatch {
            op: "mcb_focal_loss",
            expected: vec![labels.classes()],
            got: vec![ratios.classes()],
        });
    }
    let weights: Vec<f64> = ratios.r.iter().map(|&r| cfg.alpha.powf(-r)).collect();
    weighted_focal(
        g,
        "mcb_focal_loss",
        probs,
        labels,
        weights,
        cfg.gamma,
        cfg.clamp_eps,
    )
}

/// Sample the class-weight curve alpha^(-r) at `n_samples` uniform points of
/// r in [0, 1]. For alpha >= 1 the curve is non-increasing and bounded to
/// [1/alpha, 1].
pub fn weight_curve(alpha: f64, n_samples: usize) -> Result<Vec<(f64, f64)>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument {
            op: "weight_curve",
            reason: format!("alpha must be > 0, got {alpha}"),
        });
    }
    if n_samples < 2 {
        return Err(Error::InvalidArgument {
            op: "weight_curve",
            reason: "need at least 2 samples".into(),
        });
    }
    Ok((0..n_samples)
        .map(|k| {
            let r = k as f64 / (n_samples - 1) as f64;
            (r, alpha.powf(-r))
        })
        .collect())
}
