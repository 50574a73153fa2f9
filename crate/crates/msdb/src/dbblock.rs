//! Deconvolution-and-bilinear-interpolation block: per-scale dual-path
//! upsampling with learned 1x1 weighting, summed across scales.
//!
//! Each scale i runs two channel-preserving paths to the shared target size,
//! a learnable transposed convolution and a bilinear resize, applies a 1x1
//! weighting convolution to each, and adds them. The cross-scale merge is a
//! plain sum: the per-path 1x1 weights subsume both the per-path and the
//! per-scale combination factors, which are unidentifiable separately.

use crate::error::{Error, Result};
use crate::ops::{
    add, bilinear_resize, conv2d, transposed_conv2d, Conv2dParams, TransposedConv2dParams,
};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// One pyramid-pool output tagged with its scale slot.
#[derive(Clone)]
pub struct ScaleFeature<T: Scalar> {
    /// 0-based index into the block's scale parameters.
    pub index: usize,
    /// `[N, C, h_i, w_i]`
    pub tensor: Tensor<T>,
}

/// Which upsampling paths contribute. `Both` is the block proper; the single
/// path variants exist for the upsampling ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsamplePaths {
    Both,
    DeconvOnly,
    BilinearOnly,
}

/// Per-scale learnables: the deconvolution and the two 1x1 weighting
/// convolutions (which carry no bias, preserving the weighted-sum reading).
pub struct ScaleParams<T: Scalar> {
    pub deconv: TransposedConv2dParams<T>,
    pub weight_d: Conv2dParams<T>,
    pub weight_b: Conv2dParams<T>,
    /// Spatial size of this scale's input feature map.
    pub input_size: (usize, usize),
    /// What the deconv emits; differs from the target when the upscale factor
    /// is not integral, in which case a bilinear trim follows.
    pub deconv_out: (usize, usize),
}

pub struct DbBlockParams<T: Scalar> {
    pub scales: Vec<ScaleParams<T>>,
    pub target: (usize, usize),
    pub channels: usize,
    pub paths: UpsamplePaths,
}

// Deconvolution geometry for upscaling n -> target:
// integral factor u: kernel 2u (u even) or 2u - 1 (u odd), stride u,
// padding (k - u) / 2, which lands exactly on target.
// Otherwise u = round(target / n) and a bilinear resize follows.
fn deconv_geometry(n: usize, target: usize) -> (usize, usize, usize, usize) {
    let u = ((target as f64 / n as f64).round() as usize).max(1);
    let k = if u % 2 == 0 { 2 * u } else { 2 * u - 1 };
    let pad = (k - u) / 2;
    let out = (n - 1) * u + k - 2 * pad;
    debug_assert_eq!(out, n * u);
    (u, k, pad, out)
}

// One axis of the standard bilinear-upsampling kernel used to initialize
// deconvolutions; the 2-D kernel is the separable product.
fn bilinear_tap(k: usize, i: usize) -> f64 {
    let factor = (k + 1) / 2;
    let center = if k % 2 == 1 {
        factor as f64 - 1.0
    } else {
        factor as f64 - 0.5
    };
    1.0 - (i as f64 - center).abs() / factor as f64
}

fn identity_1x1<T: Scalar>(channels: usize, gain: f64) -> Conv2dParams<T> {
    let mut w = vec![T::zero(); channels * channels];
    for c in 0..channels {
        w[c * channels + c] = T::from_f64(gain);
    }
    let weight = Tensor::param(&[channels, channels, 1, 1], w).expect("1x1 weight");
    Conv2dParams::new(weight, None)
}

impl<T: Scalar> DbBlockParams<T> {
    /// Build a block for the given per-scale input sizes. Deconvolutions are
    /// initialized to bilinear-interpolation weights and the 1x1 weights to
    /// 0.5 * identity, so the fresh block averages its two paths.
    pub fn init(
        channels: usize,
        target: (usize, usize),
        input_sizes: &[(usize, usize)],
        paths: UpsamplePaths,
    ) -> Result<Self> {
        if input_sizes.is_empty() {
            return Err(Error::EmptyInput("DbBlockParams::init"));
        }
        let mut scales = Vec::with_capacity(input_sizes.len());
        for &(h, w) in input_sizes {
            if h > target.0 || w > target.1 {
                return Err(Error::InvalidArgument {
                    op: "DbBlockParams::init",
                    reason: format!("scale {h}x{w} exceeds target {}x{}", target.0, target.1),
                });
            }
            let (uh, kh, ph, out_h) = deconv_geometry(h, target.0);
            let (uw, kw, pw, out_w) = deconv_geometry(w, target.1);
            let mut kernel = vec![T::zero(); channels * channels * kh * kw];
            for c in 0..channels {
                for ky in 0..kh {
                    for kx in 0..kw {
                        kernel[((c * channels + c) * kh + ky) * kw + kx] =
                            T::from_f64(bilinear_tap(kh, ky) * bilinear_tap(kw, kx));
                    }
                }
            }
            let deconv = TransposedConv2dParams {
                weight: Tensor::param(&[channels, channels, kh, kw], kernel)?,
                bias: None,
                stride: (uh, uw),
                padding: (ph, pw),
            };
            scales.push(ScaleParams {
                deconv,
                weight_d: identity_1x1(channels, 0.5),
                weight_b: identity_1x1(channels, 0.5),
                input_size: (h, w),
                deconv_out: (out_h, out_w),
            });
        }
        Ok(DbBlockParams {
            scales,
            target,
            channels,
            paths,
        })
    }

    /// Named learnable tensors, in a stable order.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.scales.iter().enumerate() {
            out.push((format!("{prefix}.scale{i}.deconv.weight"), s.deconv.weight.clone()));
            out.push((format!("{prefix}.scale{i}.weight_d"), s.weight_d.weight.clone()));
            out.push((format!("{prefix}.scale{i}.weight_b"), s.weight_b.weight.clone()));
        }
        out
    }
}

/// One scale through its two weighted paths:
/// `h = weight_d(deconv(f)) + weight_b(bilinear(f))`.
pub fn fuse_scale<T: Scalar>(
    g: &Graph<T>,
    f: &ScaleFeature<T>,
    p: &DbBlockParams<T>,
) -> Result<Tensor<T>> {
    let Some(scale) = p.scales.get(f.index) else {
        return Err(Error::InvalidArgument {
            op: "fuse_scale",
            reason: format!("scale index {} out of {}", f.index, p.scales.len()),
        });
    };
    let shape = f.tensor.shape();
    if shape.len() != 4
        || shape[1] != p.channels
        || (shape[2], shape[3]) != scale.input_size
    {
        return Err(Error::ShapeMismatch {
            op: "fuse_scale",
            expected: vec![shape[0], p.channels, scale.input_size.0, scale.input_size.1],
            got: shape.to_vec(),
        });
    }
    let (th, tw) = p.target;

    let deconv_path = |g: &Graph<T>| -> Result<Tensor<T>> {
        let mut up = transposed_conv2d(g, &f.tensor, &scale.deconv)?;
        if scale.deconv_out != p.target {
            up = bilinear_resize(g, &up, th, tw)?;
        }
        conv2d(g, &up, &scale.weight_d)
    };
    let bilinear_path = |g: &Graph<T>| -> Result<Tensor<T>> {
        let up = bilinear_resize(g, &f.tensor, th, tw)?;
        conv2d(g, &up, &scale.weight_b)
    };

    match p.paths {
        UpsamplePaths::Both => {
            let d = deconv_path(g)?;
            let b = bilinear_path(g)?;
            add(g, &d, &b)
        }
        UpsamplePaths::DeconvOnly => deconv_path(g),
        UpsamplePaths::BilinearOnly => bilinear_path(g),
    }
}

/// Cross-scale merge: the sum of every scale's fused map.
pub fn fuse_multiscale<T: Scalar>(
    g: &Graph<T>,
    features: &[ScaleFeature<T>],
    p: &DbBlockParams<T>,
) -> Result<Tensor<T>> {
    if features.is_empty() {
        return Err(Error::EmptyInput("fuse_multiscale"));
    }
    let mut merged: Option<Tensor<T>> = None;
    for f in features {
        let h = fuse_scale(g, f, p)?;
        merged = Some(match merged {
            None => h,
            Some(m) => add(g, &m, &h)?,
        });
    }
    Ok(merged.expect("non-empty features"))
}
