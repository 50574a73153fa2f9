//! Differentiable neural-network primitives: dilated 2-D convolution,
//! transposed convolution, bilinear resampling, adaptive pooling, activation,
//! spatial crop/paste, channel concatenation, and the elementwise/reduction
//! glue the model composes them with.

mod conv;
mod elementwise;
mod pool;
mod resize;

pub use conv::{conv2d, transposed_conv2d, Conv2dParams, TransposedConv2dParams};
pub use elementwise::{
    add, concat_batch, flatten_pixels, mean_all, mul, relu, scale, slice_batch, slice_rows,
    softmax_channelwise, sum_all,
};
pub use pool::{pool2d, PoolMode};
pub use resize::{bilinear_resize, concat_channels, crop_spatial, paste_spatial};

use crate::error::{Error, Result};

/// Integer spatial rectangle in feature-map or image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        BoundingBox {
            top,
            left,
            height,
            width,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        BoundingBox {
            top: 0,
            left: 0,
            height,
            width,
        }
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || self.top + self.height > height
            || self.left + self.width > width
        {
            return Err(Error::BoxOutOfBounds {
                box_: (self.top, self.left, self.height, self.width),
                height,
                width,
            });
        }
        Ok(())
    }

    /// Rescale from a `(from_h, from_w)` grid onto a `(to_h, to_w)` grid,
    /// rounding outward so the scaled box still covers the same region.
    pub fn rescale(&self, from: (usize, usize), to: (usize, usize)) -> BoundingBox {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        let top = (self.top as f64 * sy).floor() as usize;
        let left = (self.left as f64 * sx).floor() as usize;
        let bottom = (((self.top + self.height) as f64 * sy).ceil() as usize).min(to.0);
        let right = (((self.left + self.width) as f64 * sx).ceil() as usize).min(to.1);
        BoundingBox {
            top: top.min(to.0 - 1),
            left: left.min(to.1 - 1),
            height: (bottom.max(top + 1) - top).max(1),
            width: (right.max(left + 1) - left).max(1),
        }
    }
}

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("expected rank {rank}, got shape {shape:?}"),
        });
    }
    Ok(())
}
