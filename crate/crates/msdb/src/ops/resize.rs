//! Corner-aligned bilinear resampling, spatial crop/paste, and channel
//! concatenation.

use crate::error::{Error, Result};
use crate::ops::{expect_rank, BoundingBox};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

// Corner-aligned source coordinate: output corners map exactly onto input
// corners; a single output sample takes the first corner.
fn src_coord<T: Scalar>(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, T) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, T::zero());
    }
    let scale = (in_n - 1) as f64 / (out_n - 1) as f64;
    let pos = out_i as f64 * scale;
    let lo = pos.floor() as usize;
    let lo = lo.min(in_n - 1);
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, T::from_f64(pos - lo as f64))
}

/// Corner-aligned bilinear resize of a `[N,C,H,W]` tensor. Same-size calls
/// return a bit-identical copy; linear ramps are fixed points.
pub fn bilinear_resize<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    expect_rank("bilinear_resize", x.shape(), 4)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument {
            op: "bilinear_resize",
            reason: "output extents must be >= 1".into(),
        });
    }
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);

    if out_h == h && out_w == w {
        let out = Tensor::new(x.shape(), x.to_vec())?;
        let x = x.clone();
        g.record(&out, Box::new(move |gy, sink| {
            sink.add_buffer(&x, gy);
        }));
        return Ok(out);
    }

    // Per-axis interpolation tables, shared across images and channels.
    let ys: Vec<(usize, usize, T)> = (0..out_h).map(|i| src_coord(i, out_h, h)).collect();
    let xs: Vec<(usize, usize, T)> = (0..out_w).map(|i| src_coord(i, out_w, w)).collect();

    let xd = x.data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = plane * h * w;
        let dst = plane * out_h * out_w;
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            let r0 = src + y0 * w;
            let r1 = src + y1 * w;
            let o_row = dst + oy * out_w;
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let one = T::one();
                let top = xd[r0 + x0] * (one - wx) + xd[r0 + x1] * wx;
                let bot = xd[r1 + x0] * (one - wx) + xd[r1 + x1] * wx;
                out[o_row + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    drop(xd);

    let out = Tensor::new(&[n, c, out_h, out_w], out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * out_h * out_w;
                for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                    let o_row = dst + oy * out_w;
                    for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                        let gv = gy[o_row + ox];
                        let one = T::one();
                        gx[src + y0 * w + x0] =
                            gx[src + y0 * w + x0] + gv * (one - wy) * (one - wx);
                        gx[src + y0 * w + x1] = gx[src + y0 * w + x1] + gv * (one - wy) * wx;
                        gx[src + y1 * w + x0] = gx[src + y1 * w + x0] + gv * wy * (one - wx);
                        gx[src + y1 * w + x1] = gx[src + y1 * w + x1] + gv * wy * wx;
                    }
                }
            }
        });
    }));
    Ok(out)
}

/// Exact spatial sub-view copy of a `[N,C,H,W]` tensor.
pub fn crop_spatial<T: Scalar>(g: &Graph<T>, x: &Tensor<T>, box_: BoundingBox) -> Result<Tensor<T>> {
    expect_rank("crop_spatial", x.shape(), 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    box_.check_within(h, w)?;
    let (bh, bw) = (box_.height, box_.width);

    let xd = x.data();
    let mut out = vec![T::zero(); n * c * bh * bw];
    for plane in 0..n * c {
        let src = plane * h * w;
        let dst = plane * bh * bw;
        for by in 0..bh {
            let s_row = src + (box_.top + by) * w + box_.left;
            let d_row = dst + by * bw;
            out[d_row..d_row + bw].copy_from_slice(&xd[s_row..s_row + bw]);
        }
    }
    drop(xd);

    let out = Tensor::new(&[n, c, bh, bw], out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for plane in 0..n * c {
                let src = plane * h * w;
                let dst = plane * bh * bw;
                for by in 0..bh {
                    let s_row = src + (box_.top + by) * w + box_.left;
                    let d_row = dst + by * bw;
                    for bx in 0..bw {
                        gx[s_row + bx] = gx[s_row + bx] + gy[d_row + bx];
                    }
                }
            }
        });
    }));
    Ok(out)
}

/// Paste a `[N,C,bh,bw]` tensor at `box_` inside a fresh `[N,C,H,W]` map whose
/// outside-the-box logits are the constant `background` channel vector.
pub fn paste_spatial<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    box_: BoundingBox,
    full: (usize, usize),
    background: &[T],
) -> Result<Tensor<T>> {
    expect_rank("paste_spatial", x.shape(), 4)?;
    let (n, c, bh, bw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (h, w) = full;
    box_.check_within(h, w)?;
    if bh != box_.height || bw != box_.width {
        return Err(Error::ShapeMismatch {
            op: "paste_spatial",
            expected: vec![n, c, box_.height, box_.width],
            got: x.shape().to_vec(),
        });
    }
    if background.len() != c {
        return Err(Error::InvalidArgument {
            op: "paste_spatial",
            reason: format!("background has {} entries for {c} channels", background.len()),
        });
    }

    let xd = x.data();
    let mut out = vec![T::zero(); n * c * h * w];
    for img in 0..n {
        for ch in 0..c {
            let plane = img * c + ch;
            let dst = plane * h * w;
            out[dst..dst + h * w].fill(background[ch]);
            let src = plane * bh * bw;
            for by in 0..bh {
                let d_row = dst + (box_.top + by) * w + box_.left;
                let s_row = src + by * bw;
                out[d_row..d_row + bw].copy_from_slice(&xd[s_row..s_row + bw]);
            }
        }
    }
    drop(xd);

    let out = Tensor::new(&[n, c, h, w], out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for plane in 0..n * c {
                let dst = plane * h * w;
                let src = plane * bh * bw;
                for by in 0..bh {
                    let d_row = dst + (box_.top + by) * w + box_.left;
                    let s_row = src + by * bw;
                    for bx in 0..bw {
                        gx[s_row + bx] = gx[s_row + bx] + gy[d_row + bx];
                    }
                }
            }
        });
    }));
    Ok(out)
}

/// Stack `[N,Ci,H,W]` tensors along the channel axis, in argument order.
pub fn concat_channels<T: Scalar>(g: &Graph<T>, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("concat_channels"));
    }
    for x in xs {
        expect_rank("concat_channels", x.shape(), 4)?;
    }
    let (n, h, w) = (xs[0].shape()[0], xs[0].shape()[2], xs[0].shape()[3]);
    let mut total_c = 0;
    for x in xs {
        if x.shape()[0] != n || x.shape()[2] != h || x.shape()[3] != w {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: xs[0].shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        total_c += x.shape()[1];
    }

    let hw = h * w;
    let mut out = vec![T::zero(); n * total_c * hw];
    for img in 0..n {
        let mut ch_off = 0;
        for x in xs {
            let ci = x.shape()[1];
            let xd = x.data();
            let src = img * ci * hw;
            let dst = (img * total_c + ch_off) * hw;
            out[dst..dst + ci * hw].copy_from_slice(&xd[src..src + ci * hw]);
            ch_off += ci;
        }
    }

    let out = Tensor::new(&[n, total_c, h, w], out)?;
    let xs: Vec<Tensor<T>> = xs.to_vec();
    g.record(&out, Box::new(move |gy, sink| {
        let mut ch_off = 0;
        for x in &xs {
            let ci = x.shape()[1];
            sink.accumulate(x, |gx| {
                for img in 0..n {
                    let dst = img * ci * hw;
                    let src = (img * total_c + ch_off) * hw;
                    for i in 0..ci * hw {
                        gx[dst + i] = gx[dst + i] + gy[src + i];
                    }
                }
            });
            ch_off += ci;
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::mean_all;
    use crate::tensor::grad_check;

    #[test]
    fn constant_input_stays_constant() {
        let g = Graph::new();
        let x = Tensor::full(&[1, 1, 2, 3], 4.25f64);
        let y = bilinear_resize(&g, &x, 5, 7).unwrap();
        assert!(y.to_vec().iter().all(|&v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn corner_aligned_hand_example() {
        // [[0,2],[4,6]] resized 2x2 -> 3x3 gives [[0,1,2],[2,3,4],[4,5,6]]
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0f64, 2.0, 4.0, 6.0]).unwrap();
        let y = bilinear_resize(&g, &x, 3, 3).unwrap();
        let want = vec![0.0, 1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0];
        for (a, b) in y.to_vec().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_size_resize_is_bit_identical() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![-0.0f32, 1.5, f32::MIN_POSITIVE, 3.0]).unwrap();
        let y = bilinear_resize(&g, &x, 2, 2).unwrap();
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn linear_ramp_is_fixed_point_of_down_up() {
        let g = Graph::new();
        let ramp: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let x = Tensor::new(&[1, 1, 1, 7], ramp.clone()).unwrap();
        let down = bilinear_resize(&g, &x, 1, 4).unwrap();
        let up = bilinear_resize(&g, &down, 1, 7).unwrap();
        for (a, b) in up.to_vec().iter().zip(&ramp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_gradient_matches_finite_differences() {
        let x = Tensor::new(
            &[1, 2, 3, 3],
            (0..18).map(|v| (v as f64 * 0.7).sin()).collect(),
        )
        .unwrap();
        let err = grad_check(
            |g, x| {
                let y = bilinear_resize(g, x, 5, 4)?;
                mean_all(g, &y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel error {err}");
    }

    #[test]
    fn crop_full_box_is_identity() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let y = crop_spatial(&g, &x, BoundingBox::full(2, 2)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn crop_out_of_bounds_rejected() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 4, 4], vec![0.0f64; 16]).unwrap();
        assert!(crop_spatial(&g, &x, BoundingBox::new(2, 2, 3, 2)).is_err());
    }

    #[test]
    fn concat_preserves_order_and_counts() {
        let g = Graph::new();
        let a = Tensor::new(&[1, 2, 1, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[1, 3, 1, 2], (10..16).map(|v| v as f64).collect()).unwrap();
        let y = concat_channels(&g, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1, 2]);
        let mut want = a.to_vec();
        want.extend(b.to_vec());
        assert_eq!(y.to_vec(), want);
    }

    #[test]
    fn paste_then_crop_roundtrip() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 2, 2, 2], (0..8).map(|v| v as f64 + 1.0).collect()).unwrap();
        let box_ = BoundingBox::new(1, 2, 2, 2);
        let full = paste_spatial(&g, &x, box_, (5, 6), &[9.0, 0.0]).unwrap();
        let back = crop_spatial(&g, &full, box_).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
        // outside the box, channel 0 carries the background logit
        assert_eq!(full.data()[0], 9.0);
    }

    #[test]
    fn crop_and_paste_gradients() {
        let x = Tensor::new(&[1, 2, 4, 4], (0..32).map(|v| (v as f64).cos()).collect()).unwrap();
        let err = grad_check(
            |g, x| {
                let c = crop_spatial(g, x, BoundingBox::new(1, 0, 2, 3))?;
                let p = paste_spatial(g, &c, BoundingBox::new(0, 1, 2, 3), (4, 5), &[1.0, -1.0])?;
                mean_all(g, &p)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "max rel error {err}");
    }
}
