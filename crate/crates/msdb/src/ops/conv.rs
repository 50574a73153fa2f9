//! Dilated 2-D convolution and its adjoint, the transposed convolution.

use crate::error::{Error, Result};
use crate::ops::expect_rank;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Parameters of a (possibly dilated) 2-D convolution. The 1x1 weighting
/// layers of the fusion block are instances with kernel 1 and no bias.
#[derive(Clone)]
pub struct Conv2dParams<T: Scalar> {
    /// `[outC, inC, kH, kW]`
    pub weight: Tensor<T>,
    /// `[outC]`
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        Conv2dParams {
            weight,
            bias,
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn out_extent(&self, input: (usize, usize)) -> (isize, isize) {
        let k = (self.weight.shape()[2], self.weight.shape()[3]);
        let oh = (input.0 as isize + 2 * self.padding.0 as isize
            - (self.dilation.0 * (k.0 - 1)) as isize
            - 1)
            / self.stride.0 as isize
            + 1;
        let ow = (input.1 as isize + 2 * self.padding.1 as isize
            - (self.dilation.1 * (k.1 - 1)) as isize
            - 1)
            / self.stride.1 as isize
            + 1;
        (oh, ow)
    }
}

/// Standard cross-correlation with dilation; differentiable with respect to
/// the input, the weight, and the bias.
pub fn conv2d<T: Scalar>(g: &Graph<T>, x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    expect_rank("conv2d", x.shape(), 4)?;
    expect_rank("conv2d weight", p.weight.shape(), 4)?;
    let (n, in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_c, w_in_c, kh, kw) = (
        p.weight.shape()[0],
        p.weight.shape()[1],
        p.weight.shape()[2],
        p.weight.shape()[3],
    );
    if w_in_c != in_c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: vec![out_c, in_c, kh, kw],
            got: p.weight.shape().to_vec(),
        });
    }
    if let Some(b) = &p.bias {
        if b.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                expected: vec![out_c],
                got: b.shape().to_vec(),
            });
        }
    }
    let (oh, ow) = p.out_extent((h, w));
    if oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: format!("non-positive output extent {oh}x{ow} for input {h}x{w}"),
        });
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (dh, dw) = p.dilation;

    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![T::zero(); n * out_c * oh * ow];
    if let Some(b) = &p.bias {
        let bd = b.data();
        for img in 0..n {
            for oc in 0..out_c {
                let base = (img * out_c + oc) * oh * ow;
                out[base..base + oh * ow].fill(bd[oc]);
            }
        }
    }
    for img in 0..n {
        for oc in 0..out_c {
            let o_base = (img * out_c + oc) * oh * ow;
            for ic in 0..in_c {
                let x_base = (img * in_c + ic) * h * w;
                let w_base = (oc * in_c + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[w_base + ky * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + ky * dh) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = x_base + iy as usize * w;
                            let o_row = o_base + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kx * dw) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[o_row + ox] = out[o_row + ox] + wv * xd[row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wd);

    let out = Tensor::new(&[n, out_c, oh, ow], out)?;
    let x = x.clone();
    let p = p.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let want_x = sink.wants(&x);
        let want_w = sink.wants(&p.weight);
        let mut gx = if want_x { Some(vec![T::zero(); x.len()]) } else { None };
        let mut gw = if want_w {
            Some(vec![T::zero(); p.weight.len()])
        } else {
            None
        };
        if want_x || want_w {
            let xd = x.data();
            let wd = p.weight.data();
            for img in 0..n {
                for oc in 0..out_c {
                    let o_base = (img * out_c + oc) * oh * ow;
                    for ic in 0..in_c {
                        let x_base = (img * in_c + ic) * h * w;
                        let w_base = (oc * in_c + ic) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wd[w_base + ky * kw + kx];
                                let mut wacc = T::zero();
                                for oy in 0..oh {
                                    let iy = (oy * sh + ky * dh) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = x_base + iy as usize * w;
                                    let o_row = o_base + oy * ow;
                                    for ox in 0..ow {
                                        let ix = (ox * sw + kx * dw) as isize - pw as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let gv = gy[o_row + ox];
                                        if let Some(gx) = gx.as_mut() {
                                            gx[row + ix as usize] =
                                                gx[row + ix as usize] + wv * gv;
                                        }
                                        if gw.is_some() {
                                            wacc = wacc + xd[row + ix as usize] * gv;
                                        }
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[w_base + ky * kw + kx] = gw[w_base + ky * kw + kx] + wacc;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            sink.add_buffer(&x, &gx);
        }
        if let Some(gw) = gw {
            sink.add_buffer(&p.weight, &gw);
        }
        if let Some(b) = &p.bias {
            sink.accumulate(b, |gb| {
                for img in 0..n {
                    for oc in 0..out_c {
                        let o_base = (img * out_c + oc) * oh * ow;
                        let mut acc = T::zero();
                        for v in &gy[o_base..o_base + oh * ow] {
                            acc = acc + *v;
                        }
                        gb[oc] = gb[oc] + acc;
                    }
                }
            });
        }
    }));
    Ok(out)
}

/// Parameters of a transposed convolution, the adjoint of `conv2d` with the
/// same geometry.
#[derive(Clone)]
pub struct TransposedConv2dParams<T: Scalar> {
    /// `[inC, outC, kH, kW]`
    pub weight: Tensor<T>,
    /// `[outC]`
    pub bias: Option<Tensor<T>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<T: Scalar> TransposedConv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        TransposedConv2dParams {
            weight,
            bias,
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `(in - 1) * stride - 2 * pad + k`
    pub fn out_extent(&self, input: (usize, usize)) -> (isize, isize) {
        let k = (self.weight.shape()[2], self.weight.shape()[3]);
        (
            (input.0 as isize - 1) * self.stride.0 as isize - 2 * self.padding.0 as isize
                + k.0 as isize,
            (input.1 as isize - 1) * self.stride.1 as isize - 2 * self.padding.1 as isize
                + k.1 as isize,
        )
    }
}

/// Transposed convolution: scatter each input value through the kernel. The
/// forward map is the adjoint of `conv2d` under the inner product.
pub fn transposed_conv2d<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    p: &TransposedConv2dParams<T>,
) -> Result<Tensor<T>> {
    expect_rank("transposed_conv2d", x.shape(), 4)?;
    expect_rank("transposed_conv2d weight", p.weight.shape(), 4)?;
    let (n, in_c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (w_in_c, out_c, kh, kw) = (
        p.weight.shape()[0],
        p.weight.shape()[1],
        p.weight.shape()[2],
        p.weight.shape()[3],
    );
    if w_in_c != in_c {
        return Err(Error::ShapeMismatch {
            op: "transposed_conv2d",
            expected: vec![in_c, out_c, kh, kw],
            got: p.weight.shape().to_vec(),
        });
    }
    let (oh, ow) = p.out_extent((h, w));
    if oh < 1 || ow < 1 {
        return Err(Error::InvalidArgument {
            op: "transposed_conv2d",
            reason: format!("non-positive output extent {oh}x{ow} for input {h}x{w}"),
        });
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;

    let xd = x.data();
    let wd = p.weight.data();
    let mut out = vec![T::zero(); n * out_c * oh * ow];
    if let Some(b) = &p.bias {
        let bd = b.data();
        for img in 0..n {
            for oc in 0..out_c {
                let base = (img * out_c + oc) * oh * ow;
                out[base..base + oh * ow].fill(bd[oc]);
            }
        }
    }
    for img in 0..n {
        for ic in 0..in_c {
            let x_base = (img * in_c + ic) * h * w;
            for oc in 0..out_c {
                let o_base = (img * out_c + oc) * oh * ow;
                let w_base = (ic * out_c + oc) * kh * kw;
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = xd[x_base + iy * w + ix];
                        if xv == T::zero() {
                            continue;
                        }
                        for ky in 0..kh {
                            let oy = (iy * sh + ky) as isize - ph as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let o_row = o_base + oy as usize * ow;
                            let w_row = w_base + ky * kw;
                            for kx in 0..kw {
                                let ox = (ix * sw + kx) as isize - pw as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[o_row + ox as usize] =
                                    out[o_row + ox as usize] + xv * wd[w_row + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wd);

    let out = Tensor::new(&[n, out_c, oh, ow], out)?;
    let x = x.clone();
    let p = p.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let want_x = sink.wants(&x);
        let want_w = sink.wants(&p.weight);
        let mut gx = if want_x { Some(vec![T::zero(); x.len()]) } else { None };
        let mut gw = if want_w {
            Some(vec![T::zero(); p.weight.len()])
        } else {
            None
        };
        if want_x || want_w {
            let xd = x.data();
            let wd = p.weight.data();
            for img in 0..n {
                for ic in 0..in_c {
                    let x_base = (img * in_c + ic) * h * w;
                    for oc in 0..out_c {
                        let o_base = (img * out_c + oc) * oh * ow;
                        let w_base = (ic * out_c + oc) * kh * kw;
                        for iy in 0..h {
                            for ix in 0..w {
                                let xv = xd[x_base + iy * w + ix];
                                let mut xacc = T::zero();
                                for ky in 0..kh {
                                    let oy = (iy * sh + ky) as isize - ph as isize;
                                    if oy < 0 || oy >= oh as isize {
                                        continue;
                                    }
                                    let o_row = o_base + oy as usize * ow;
                                    let w_row = w_base + ky * kw;
                                    for kx in 0..kw {
                                        let ox = (ix * sw + kx) as isize - pw as isize;
                                        if ox < 0 || ox >= ow as isize {
                                            continue;
                                        }
                                        let gv = gy[o_row + ox as usize];
                                        xacc = xacc + wd[w_row + kx] * gv;
                                        if let Some(gw) = gw.as_mut() {
                                            gw[w_row + kx] = gw[w_row + kx] + xv * gv;
                                        }
                                    }
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[x_base + iy * w + ix] = gx[x_base + iy * w + ix] + xacc;
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx {
            sink.add_buffer(&x, &gx);
        }
        if let Some(gw) = gw {
            sink.add_buffer(&p.weight, &gw);
        }
        if let Some(b) = &p.bias {
            sink.accumulate(b, |gb| {
                for img in 0..n {
                    for oc in 0..out_c {
                        let o_base = (img * out_c + oc) * oh * ow;
                        let mut acc = T::zero();
                        for v in &gy[o_base..o_base + oh * ow] {
                            acc = acc + *v;
                        }
                        gb[oc] = gb[oc] + acc;
                    }
                }
            });
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mean_all, relu};
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor_rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&g, &x, &Conv2dParams::new(w, None)).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut k = vec![0.0f64; 9];
        k[4] = 1.0; // center
        let w = Tensor::new(&[1, 1, 3, 3], k).unwrap();
        let y = conv2d(&g, &x, &Conv2dParams::new(w, None).with_padding(1)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn all_ones_kernel_sums_overlaps() {
        // 3x3 ones kernel on [[1,2],[3,4]] with padding 1 -> [[10,10],[10,10]]
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&g, &x, &Conv2dParams::new(w, None).with_padding(1)).unwrap();
        assert_eq!(y.to_vec(), vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 2, 2, 2], vec![0.0f64; 8]).unwrap();
        let w = Tensor::new(&[1, 3, 1, 1], vec![0.0; 3]).unwrap();
        assert!(conv2d(&g, &x, &Conv2dParams::new(w, None)).is_err());
    }

    #[test]
    fn oversized_kernel_rejected() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0f64; 4]).unwrap();
        let w = Tensor::new(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
        assert!(conv2d(&g, &x, &Conv2dParams::new(w, None)).is_err());
    }

    #[test]
    fn tconv_stamps_kernel() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 1, 1], vec![1.0f64]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = transposed_conv2d(&g, &x, &TransposedConv2dParams::new(w, None)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tconv_stride_two_corner_blocks() {
        // input [[1,0],[0,1]], stride 2, 2x2 ones kernel -> ones in the two
        // diagonal 2x2 blocks of a 4x4 map
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y =
            transposed_conv2d(&g, &x, &TransposedConv2dParams::new(w, None).with_stride(2))
                .unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = vec![
            1.0, 1.0, 0.0, 0.0,
            1.0, 1.0, 0.0, 0.0,
            0.0, 0.0, 1.0, 1.0,
            0.0, 0.0, 1.0, 1.0,
        ];
        assert_eq!(y.to_vec(), want);
    }

    #[test]
    fn adjoint_identity_random_geometries() {
        // <conv2d(x), y> == <x, transposed_conv2d(y)> with shared weights
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..10 {
            let in_c = rng.gen_range(1..3usize);
            let out_c = rng.gen_range(1..3usize);
            let k = rng.gen_range(1..4usize);
            let s = rng.gen_range(1..3usize);
            let p = rng.gen_range(0..k); // pad < k keeps output positive
            // Sizes where conv then tconv round-trips exactly:
            // in = (out - 1) * s + k - 2p.
            let oh = rng.gen_range(2..6usize);
            let ow = rng.gen_range(2..6usize);
            let h = (oh - 1) * s + k - 2 * p.min((k - 1) / 2);
            let w_sz = (ow - 1) * s + k - 2 * p.min((k - 1) / 2);
            let p = p.min((k - 1) / 2);

            let g = Graph::new();
            let x = tensor_rand(&mut rng, &[1, in_c, h, w_sz]);
            let kernel = tensor_rand(&mut rng, &[out_c, in_c, k, k]);
            let conv_p = Conv2dParams::new(kernel.clone(), None)
                .with_stride(s)
                .with_padding(p);
            let cx = conv2d(&g, &x, &conv_p).unwrap();

            let y = tensor_rand(&mut rng, cx.shape());
            // same weight buffer, read as [inC=out_c, outC=in_c, k, k]
            let t_kernel = Tensor::new(&[out_c, in_c, k, k], kernel.to_vec()).unwrap();
            let t_p = TransposedConv2dParams::new(t_kernel, None)
                .with_stride(s)
                .with_padding(p);
            let ty = transposed_conv2d(&g, &y, &t_p).unwrap();
            assert_eq!(ty.shape(), x.shape(), "trial {trial}");

            let lhs: f64 = cx.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data().iter()).map(|(a, b)| a * b).sum();
            let rel = (lhs - rhs).abs() / f64::max(1e-12, lhs.abs() + rhs.abs());
            assert!(rel < 1e-12, "trial {trial}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = tensor_rand(&mut rng, &[1, 2, 5, 5]);
        let w = tensor_rand(&mut rng, &[2, 2, 3, 3]);
        let b = tensor_rand(&mut rng, &[2]);

        // w.r.t. input, through relu and mean, with dilation 2
        let (wc, bc) = (w.clone(), b.clone());
        let err = grad_check(
            move |g, x| {
                let p = Conv2dParams::new(wc.clone(), Some(bc.clone()))
                    .with_padding(2)
                    .with_dilation(2);
                let y = conv2d(g, x, &p)?;
                let r = relu(g, &y)?;
                mean_all(g, &r)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "input grad err {err}");

        // w.r.t. weight
        let xc = x.clone();
        let err = grad_check(
            move |g, w| {
                let p = Conv2dParams::new(w.clone(), None).with_stride(2).with_padding(1);
                let y = conv2d(g, &xc, &p)?;
                mean_all(g, &y)
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "weight grad err {err}");
    }

    #[test]
    fn tconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = tensor_rand(&mut rng, &[1, 2, 3, 3]);
        let w = tensor_rand(&mut rng, &[2, 3, 4, 4]);
        let b = tensor_rand(&mut rng, &[3]);

        let (wc, bc) = (w.clone(), b.clone());
        let err = grad_check(
            move |g, x| {
                let p = TransposedConv2dParams::new(wc.clone(), Some(bc.clone()))
                    .with_stride(2)
                    .with_padding(1);
                let y = transposed_conv2d(g, x, &p)?;
                mean_all(g, &y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "input grad err {err}");

        let xc = x.clone();
        let err = grad_check(
            move |g, w| {
                let p = TransposedConv2dParams::new(w.clone(), None).with_stride(2);
                let y = transposed_conv2d(g, &xc, &p)?;
                mean_all(g, &y)
            },
            &w,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "weight grad err {err}");
    }
}
