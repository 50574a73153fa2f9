//! Adaptive pooling to fixed output grids (the pyramid-pooling workhorse).

use crate::error::{Error, Result};
use crate::ops::expect_rank;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pool a `[N,C,H,W]` tensor onto a `(gh, gw)` grid. The input is partitioned
/// into near-equal windows (floor split boundaries); each window emits its
/// mean or max. Max routes the gradient to the first-found argmax in
/// row-major window order.
pub fn pool2d<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    mode: PoolMode,
    out_grid: (usize, usize),
) -> Result<Tensor<T>> {
    expect_rank("pool2d", x.shape(), 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (gh, gw) = out_grid;
    if gh == 0 || gw == 0 || gh > h || gw > w {
        return Err(Error::InvalidArgument {
            op: "pool2d",
            reason: format!("grid {gh}x{gw} invalid for input {h}x{w}"),
        });
    }

    let ybounds: Vec<(usize, usize)> = (0..gh).map(|i| (i * h / gh, (i + 1) * h / gh)).collect();
    let xbounds: Vec<(usize, usize)> = (0..gw).map(|i| (i * w / gw, (i + 1) * w / gw)).collect();

    let xd = x.data();
    let planes = n * c;
    let mut out = vec![T::zero(); planes * gh * gw];
    // For max mode, the flat input index of each window's argmax.
    let mut argmax: Vec<usize> = Vec::new();
    if mode == PoolMode::Max {
        argmax = vec![0; planes * gh * gw];
    }
    for plane in 0..planes {
        let src = plane * h * w;
        let dst = plane * gh * gw;
        for (gy_i, &(y0, y1)) in ybounds.iter().enumerate() {
            for (gx_i, &(x0, x1)) in xbounds.iter().enumerate() {
                let o = dst + gy_i * gw + gx_i;
                match mode {
                    PoolMode::Avg => {
                        let mut acc = T::zero();
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                acc = acc + xd[src + yy * w + xx];
                            }
                        }
                        let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                        out[o] = acc / count;
                    }
                    PoolMode::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_i = src + y0 * w + x0;
                        for yy in y0..y1 {
                            for xx in x0..x1 {
                                let i = src + yy * w + xx;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
    }
    drop(xd);

    let out = Tensor::new(&[n, c, gh, gw], out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gyd, sink| {
        sink.accumulate(&x, |gx| match mode {
            PoolMode::Avg => {
                for plane in 0..planes {
                    let src = plane * h * w;
                    let dst = plane * gh * gw;
                    for (gy_i, &(y0, y1)) in ybounds.iter().enumerate() {
                        for (gx_i, &(x0, x1)) in xbounds.iter().enumerate() {
                            let count = T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let gv = gyd[dst + gy_i * gw + gx_i] / count;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[src + yy * w + xx] = gx[src + yy * w + xx] + gv;
                                }
                            }
                        }
                    }
                }
            }
            PoolMode::Max => {
                for (o, &src_i) in argmax.iter().enumerate() {
                    gx[src_i] = gx[src_i] + gyd[o];
                }
            }
        });
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::mean_all;
    use crate::tensor::grad_check;

    #[test]
    fn global_avg_is_channel_mean() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 2, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, 10.0, 10.0, 20.0, 20.0])
            .unwrap();
        let y = pool2d(&g, &x, PoolMode::Avg, (1, 1)).unwrap();
        assert_eq!(y.to_vec(), vec![2.5, 15.0]);
    }

    #[test]
    fn full_grid_is_identity() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 3, 2], (0..6).map(|v| v as f64).collect()).unwrap();
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let y = pool2d(&g, &x, mode, (3, 2)).unwrap();
            assert_eq!(y.to_vec(), x.to_vec());
        }
    }

    #[test]
    fn hand_computed_window_means() {
        // 4x4 of 1..16 row-major, avg to (2,2) -> [[3.5,5.5],[11.5,13.5]]
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 4, 4], (1..=16).map(|v| v as f64).collect()).unwrap();
        let y = pool2d(&g, &x, PoolMode::Avg, (2, 2)).unwrap();
        assert_eq!(y.to_vec(), vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn grid_larger_than_input_rejected() {
        let g = Graph::new();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.0f64; 4]).unwrap();
        assert!(pool2d(&g, &x, PoolMode::Avg, (3, 1)).is_err());
    }

    #[test]
    fn avg_preserves_global_mean_on_even_partitions() {
        let g = Graph::new();
        let data: Vec<f64> = (0..36).map(|v| (v as f64 * 1.3).sin()).collect();
        let x = Tensor::new(&[1, 1, 6, 6], data.clone()).unwrap();
        let y = pool2d(&g, &x, PoolMode::Avg, (3, 3)).unwrap();
        let mean_in: f64 = data.iter().sum::<f64>() / 36.0;
        let mean_out: f64 = y.to_vec().iter().sum::<f64>() / 9.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        let x = Tensor::new(
            &[1, 2, 5, 4],
            (0..40).map(|v| ((v * 37 % 17) as f64) * 0.21 - 1.5).collect(),
        )
        .unwrap();
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let err = grad_check(
                move |g, x| {
                    let y = pool2d(g, x, mode, (2, 3))?;
                    mean_all(g, &y)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-8, "{mode:?} max rel error {err}");
        }
    }
}
