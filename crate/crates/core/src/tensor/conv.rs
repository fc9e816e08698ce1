//! Grouped 2-D convolution over NHWC activations.
//!
//! Weights are laid out `[out_channels, kernel, kernel, in_channels / groups]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel > 0
            && self.stride > 0
            && self.groups > 0
            && self.in_channels.is_multiple_of(self.groups)
            && self.out_channels.is_multiple_of(self.groups);
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid convolution {self:?}")))
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.kernel,
            self.kernel,
            self.in_channels / self.groups,
        ]
    }

    pub fn output_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Multiply-accumulates for one image of the given input size.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let per_out = (self.kernel * self.kernel * self.in_channels / self.groups) as u64;
        per_out * (self.out_channels * self.output_side(h) * self.output_side(w)) as u64
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + self.out_channels
    }
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn geometry(spec: &Conv2dSpec, x_shape: &[usize]) -> Result<ConvGeom> {
    spec.validate()?;
    match *x_shape {
        [b, h, w, c]
            if c == spec.in_channels && h + 2 * spec.padding >= spec.kernel && w + 2 * spec.padding >= spec.kernel =>
        {
            Ok(ConvGeom {
                batch: b,
                h,
                w,
                ho: spec.output_side(h),
                wo: spec.output_side(w),
            })
        }
        _ => Err(Error::InvalidShape {
            op: "conv2d",
            shape: x_shape.to_vec(),
            reason: format!("expected [B, H, W, {}]", spec.in_channels),
        }),
    }
}

/// Calls `f(iy, ix, ky, kx)` for each in-bounds tap of output position `(oy, ox)`.
#[inline]
fn taps(spec: &Conv2dSpec, g: &ConvGeom, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ky in 0..spec.kernel {
        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
        if iy < 0 || iy >= g.h as isize {
            continue;
        }
        for kx in 0..spec.kernel {
            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
            if ix < 0 || ix >= g.w as isize {
                continue;
            }
            f(iy as usize, ix as usize, ky, kx);
        }
    }
}

pub(crate) fn forward<T: Real>(spec: &Conv2dSpec, g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let k = spec.kernel;
    let mut out = vec![T::zero(); g.batch * g.ho * g.wo * cout];
    out.par_chunks_mut(g.ho * g.wo * cout)
        .enumerate()
        .for_each(|(b, out_img)| {
            let x_img = &x[b * g.h * g.w * cin..(b + 1) * g.h * g.w * cin];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let o = &mut out_img[(oy * g.wo + ox) * cout..(oy * g.wo + ox + 1) * cout];
                    o.copy_from_slice(bias);
                    taps(spec, g, oy, ox, |iy, ix, ky, kx| {
                        let xin = &x_img[(iy * g.w + ix) * cin..(iy * g.w + ix + 1) * cin];
                        for (co, ov) in o.iter_mut().enumerate() {
                            let grp = co / cout_g;
                            let wrow = &w[((co * k + ky) * k + kx) * cin_g..((co * k + ky) * k + kx + 1) * cin_g];
                            let xs = &xin[grp * cin_g..(grp + 1) * cin_g];
                            let mut acc = T::zero();
                            for (&wv, &xv) in wrow.iter().zip(xs) {
                                acc = acc + wv * xv;
                            }
                            *ov = *ov + acc;
                        }
                    });
                }
            }
        });
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn backward<T: Real>(
    spec: &Conv2dSpec,
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin = spec.in_channels;
    let cout = spec.out_channels;
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let k = spec.kernel;
    let img_in = g.h * g.w * cin;
    let img_out = g.ho * g.wo * cout;

    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(img_in).enumerate().for_each(|(b, dx_img)| {
        let go = &gout[b * img_out..(b + 1) * img_out];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let grow = &go[(oy * g.wo + ox) * cout..(oy * g.wo + ox + 1) * cout];
                taps(spec, g, oy, ox, |iy, ix, ky, kx| {
                    let dxi = &mut dx_img[(iy * g.w + ix) * cin..(iy * g.w + ix + 1) * cin];
                    for (co, &gv) in grow.iter().enumerate() {
                        let grp = co / cout_g;
                        let wrow = &w[((co * k + ky) * k + kx) * cin_g..((co * k + ky) * k + kx + 1) * cin_g];
                        for (d, &wv) in dxi[grp * cin_g..(grp + 1) * cin_g].iter_mut().zip(wrow) {
                            *d = *d + gv * wv;
                        }
                    }
                });
            }
        }
    });

    // dw is accumulated per output channel so each chunk is owned by one worker.
    let mut dw = vec![T::zero(); w.len()];
    dw.par_chunks_mut(k * k * cin_g).enumerate().for_each(|(co, dwc)| {
        let grp = co / cout_g;
        for b in 0..g.batch {
            let x_img = &x[b * img_in..(b + 1) * img_in];
            let go = &gout[b * img_out..(b + 1) * img_out];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = go[(oy * g.wo + ox) * cout + co];
                    if gv == T::zero() {
                        continue;
                    }
                    taps(spec, g, oy, ox, |iy, ix, ky, kx| {
                        let xs = &x_img[(iy * g.w + ix) * cin + grp * cin_g..(iy * g.w + ix) * cin + (grp + 1) * cin_g];
                        let dst = &mut dwc[(ky * k + kx) * cin_g..(ky * k + kx + 1) * cin_g];
                        for (d, &xv) in dst.iter_mut().zip(xs) {
                            *d = *d + gv * xv;
                        }
                    });
                }
            }
        }
    });

    let mut db = vec![T::zero(); cout];
    for row in gout.chunks(cout) {
        for (d, &gv) in db.iter_mut().zip(row) {
            *d = *d + gv;
        }
    }
    (dx, dw, db)
}
