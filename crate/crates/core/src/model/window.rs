//! Non-overlapping window partitioning of NHWC feature maps.
//!
//! Windows are ordered image-major then raster over the window grid, and
//! tokens inside a window are in raster order, so the windows of image `b`
//! occupy a contiguous block of the batch axis.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn check(b: usize, h: usize, w: usize, k: usize) -> Result<()> {
    if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) || b == 0 {
        return Err(Error::InvalidShape {
            op: "window_partition",
            shape: vec![b, h, w],
            reason: format!("window side {k} must divide height and width"),
        });
    }
    Ok(())
}

/// `out[i] = x[index[i]]` maps `[B, h, w, d]` to `[B*h*w/k^2, k^2, d]`.
pub fn partition_index(b: usize, h: usize, w: usize, d: usize, k: usize) -> Result<Vec<usize>> {
    check(b, h, w, k)?;
    let (nh, nw) = (h / k, w / k);
    let mut idx = Vec::with_capacity(b * h * w * d);
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..k {
                    for tx in 0..k {
                        let row = wy * k + ty;
                        let col = wx * k + tx;
                        let base = ((bi * h + row) * w + col) * d;
                        idx.extend(base..base + d);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// The inverse permutation of [`partition_index`].
pub fn reverse_index(b: usize, h: usize, w: usize, d: usize, k: usize) -> Result<Vec<usize>> {
    let fwd = partition_index(b, h, w, d, k)?;
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    Ok(inv)
}

/// Cached forward and reverse maps for one feature-map geometry.
#[derive(Debug, Clone)]
pub struct WindowMaps {
    pub partition: Arc<Vec<usize>>,
    pub reverse: Arc<Vec<usize>>,
    pub windows_shape: [usize; 3],
    pub map_shape: [usize; 4],
}

impl WindowMaps {
    pub fn new(b: usize, h: usize, w: usize, d: usize, k: usize) -> Result<Self> {
        Ok(Self {
            partition: Arc::new(partition_index(b, h, w, d, k)?),
            reverse: Arc::new(reverse_index(b, h, w, d, k)?),
            windows_shape: [b * (h / k) * (w / k), k * k, d],
            map_shape: [b, h, w, d],
        })
    }
}

fn dims4(x: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [b, h, w, d] => Ok((b, h, w, d)),
        _ => Err(Error::InvalidShape {
            op: "window_partition",
            shape: x.to_vec(),
            reason: "expected [B, h, w, d]".into(),
        }),
    }
}

pub fn window_partition<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (b, h, w, d) = dims4(x.shape())?;
    let idx = partition_index(b, h, w, d, k)?;
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[b * (h / k) * (w / k), k * k, d], data)
}

/// Inverse of [`window_partition`] for a map of `b` images of `h x w`.
pub fn window_reverse<T: Real>(x: &Tensor<T>, k: usize, b: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if x.numel() != b * h * w * d || x.rank() != 3 || x.shape()[1] != k * k {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            shape: x.shape().to_vec(),
            reason: format!("cannot form [{b}, {h}, {w}, {d}] from windows of side {k}"),
        });
    }
    let idx = reverse_index(b, h, w, d, k)?;
    let data = idx.iter().map(|&i| x.data()[i]).collect();
    Tensor::new(&[b, h, w, d], data)
}
