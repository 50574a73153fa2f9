//! Elementwise, reduction, and layout primitives.

use crate::error::{Error, Result};
use crate::ops::expect_rank;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

fn expect_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(g: &Graph<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_same_shape("add", a, b)?;
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    let out = Tensor::new(a.shape(), out)?;
    let (a, b) = (a.clone(), b.clone());
    g.record(&out, Box::new(move |gy, sink| {
        sink.add_buffer(&a, gy);
        sink.add_buffer(&b, gy);
    }));
    Ok(out)
}

/// Elementwise (Hadamard) product.
pub fn mul<T: Scalar>(g: &Graph<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_same_shape("mul", a, b)?;
    let out: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    let out = Tensor::new(a.shape(), out)?;
    let (a, b) = (a.clone(), b.clone());
    g.record(&out, Box::new(move |gy, sink| {
        {
            let bd = b.data();
            sink.accumulate(&a, |ga| {
                for i in 0..gy.len() {
                    ga[i] = ga[i] + gy[i] * bd[i];
                }
            });
        }
        let ad = a.data();
        sink.accumulate(&b, |gb| {
            for i in 0..gy.len() {
                gb[i] = gb[i] + gy[i] * ad[i];
            }
        });
    }));
    Ok(out)
}

/// Multiply by a compile-time constant scalar.
pub fn scale<T: Scalar>(g: &Graph<T>, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
    let out: Vec<T> = x.data().iter().map(|&v| v * c).collect();
    let out = Tensor::new(x.shape(), out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for i in 0..gy.len() {
                gx[i] = gx[i] + gy[i] * c;
            }
        });
    }));
    Ok(out)
}

/// max(0, x); the gradient at exactly zero is zero.
pub fn relu<T: Scalar>(g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let out: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let out = Tensor::new(x.shape(), out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let xd = x.data();
        sink.accumulate(&x, |gx| {
            for i in 0..gy.len() {
                if xd[i] > T::zero() {
                    gx[i] = gx[i] + gy[i];
                }
            }
        });
    }));
    Ok(out)
}

/// Numerically stable softmax along the channel axis of a `[C,H,W]` or
/// `[N,C,H,W]` tensor: at every spatial position the outputs are positive and
/// sum to one.
pub fn softmax_channelwise<T: Scalar>(g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let (n, c, hw) = match shape.len() {
        3 => (1, shape[0], shape[1] * shape[2]),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => {
            return Err(Error::InvalidArgument {
                op: "softmax_channelwise",
                reason: format!("expected rank 3 or 4, got shape {shape:?}"),
            })
        }
    };

    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for img in 0..n {
        let base = img * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xd[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (xd[base + ch * hw + p] - m).exp();
                out[base + ch * hw + p] = e;
                s = s + e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / s;
            }
        }
    }
    drop(xd);

    let out = Tensor::new(&shape, out)?;
    let x = x.clone();
    let p_out = out.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let pd = p_out.data();
        sink.accumulate(&x, |gx| {
            for img in 0..n {
                let base = img * c * hw;
                for pix in 0..hw {
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let i = base + ch * hw + pix;
                        dot = dot + gy[i] * pd[i];
                    }
                    for ch in 0..c {
                        let i = base + ch * hw + pix;
                        gx[i] = gx[i] + pd[i] * (gy[i] - dot);
                    }
                }
            }
        });
    }));
    Ok(out)
}

/// Sum of all elements, as a scalar tensor. Accumulates in f64 so the scalar
/// is insensitive to summation order and length.
pub fn sum_all<T: Scalar>(g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = T::from_f64(x.data().iter().map(|v| v.as_f64()).sum::<f64>());
    let out = Tensor::scalar(s);
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let go = gy[0];
        sink.accumulate(&x, |gx| {
            for v in gx.iter_mut() {
                *v = *v + go;
            }
        });
    }));
    Ok(out)
}

/// Mean of all elements, as a scalar tensor (f64 accumulation, as `sum_all`).
pub fn mean_all<T: Scalar>(g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = T::from_f64(x.len() as f64);
    let s = x.data().iter().map(|v| v.as_f64()).sum::<f64>();
    let out = Tensor::scalar(T::from_f64(s / x.len() as f64));
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        let go = gy[0] / n;
        sink.accumulate(&x, |gx| {
            for v in gx.iter_mut() {
                *v = *v + go;
            }
        });
    }));
    Ok(out)
}

/// Rearrange `[N,C,H,W]` into a `[(N*H*W), C]` pixel matrix; row `n*H*W + y*W + x`
/// holds the channel vector of pixel (y, x) in image n.
pub fn flatten_pixels<T: Scalar>(g: &Graph<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("flatten_pixels", x.shape(), 4)?;
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![T::zero(); n * hw * c];
    for img in 0..n {
        for ch in 0..c {
            let src = (img * c + ch) * hw;
            for p in 0..hw {
                out[(img * hw + p) * c + ch] = xd[src + p];
            }
        }
    }
    drop(xd);
    let out = Tensor::new(&[n * hw, c], out)?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for img in 0..n {
                for ch in 0..c {
                    let dst = (img * c + ch) * hw;
                    for p in 0..hw {
                        gx[dst + p] = gx[dst + p] + gy[(img * hw + p) * c + ch];
                    }
                }
            }
        });
    }));
    Ok(out)
}

/// Contiguous row slice of a 2-D matrix.
pub fn slice_rows<T: Scalar>(
    g: &Graph<T>,
    x: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    expect_rank("slice_rows", x.shape(), 2)?;
    let (rows, cols) = (x.shape()[0], x.shape()[1]);
    if len == 0 || start + len > rows {
        return Err(Error::InvalidArgument {
            op: "slice_rows",
            reason: format!("rows {start}..{} out of 0..{rows}", start + len),
        });
    }
    let out = Tensor::new(&[len, cols], x.data()[start * cols..(start + len) * cols].to_vec())?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for (i, &v) in gy.iter().enumerate() {
                gx[start * cols + i] = gx[start * cols + i] + v;
            }
        });
    }));
    Ok(out)
}

/// One item of the leading (batch) axis, keeping a batch dim of 1.
pub fn slice_batch<T: Scalar>(g: &Graph<T>, x: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    if shape.is_empty() || index >= shape[0] {
        return Err(Error::InvalidArgument {
            op: "slice_batch",
            reason: format!("index {index} out of batch {:?}", shape.first()),
        });
    }
    let item: usize = shape[1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[0] = 1;
    let out = Tensor::new(
        &out_shape,
        x.data()[index * item..(index + 1) * item].to_vec(),
    )?;
    let x = x.clone();
    g.record(&out, Box::new(move |gy, sink| {
        sink.accumulate(&x, |gx| {
            for (i, &v) in gy.iter().enumerate() {
                gx[index * item + i] = gx[index * item + i] + v;
            }
        });
    }));
    Ok(out)
}

/// Stack tensors along the leading (batch) axis; trailing dims must agree.
pub fn concat_batch<T: Scalar>(g: &Graph<T>, xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("concat_batch"));
    }
    let rest = xs[0].shape()[1..].to_vec();
    let mut total = 0;
    for x in xs {
        if x.shape()[1..] != rest[..] {
            return Err(Error::ShapeMismatch {
                op: "concat_batch",
                expected: xs[0].shape().to_vec(),
                got: x.shape().to_vec(),
            });
        }
        total += x.shape()[0];
    }
    let mut out_shape = vec![total];
    out_shape.extend_from_slice(&rest);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for x in xs {
        data.extend_from_slice(&x.data());
    }
    let out = Tensor::new(&out_shape, data)?;
    let xs: Vec<Tensor<T>> = xs.to_vec();
    g.record(&out, Box::new(move |gy, sink| {
        let mut offset = 0;
        for x in &xs {
            let n = x.len();
            sink.accumulate(x, |gx| {
                for i in 0..n {
                    gx[i] = gx[i] + gy[offset + i];
                }
            });
            offset += n;
        }
    }));
    Ok(out)
}
