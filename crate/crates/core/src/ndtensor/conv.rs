//! Direct 2D/3D convolution kernels.
//!
//! Two-dimensional data is handled as three-dimensional data with a unit
//! leading axis, so a single set of loops covers both cases. Work is split
//! across output (or input) channels only; each channel is reduced in a fixed
//! order, which keeps results independent of the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` on each side; output extent `ceil(n / stride)`.
    Same,
    /// No padding; output extent `(n - k) / stride + 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub rank: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
    pub stride: usize,
}

fn lift(spatial: &[usize]) -> [usize; 3] {
    match *spatial {
        [h, w] => [1, h, w],
        [d, h, w] => [d, h, w],
        _ => unreachable!("rank checked by caller"),
    }
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let rank = input_shape.len().saturating_sub(1);
        if !(rank == 2 || rank == 3) {
            return Err(Error::invalid(
                "conv_nd",
                format!("input must be [C, spatial] with 2 or 3 spatial axes, got {input_shape:?}"),
            ));
        }
        if kernel_shape.len() != rank + 2 {
            return Err(Error::ShapeMismatch {
                op: "conv_nd",
                left: input_shape.to_vec(),
                right: kernel_shape.to_vec(),
            });
        }
        if kernel_shape[1] != input_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_nd",
                left: input_shape.to_vec(),
                right: kernel_shape.to_vec(),
            });
        }
        let k = kernel_shape[2];
        if k.is_multiple_of(2) || kernel_shape[2..].iter().any(|&e| e != k) {
            return Err(Error::invalid(
                "conv_nd",
                format!("kernel must be cubic with odd extent, got {kernel_shape:?}"),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid(
                "conv_nd",
                format!("stride must be 1 or 2, got {stride}"),
            ));
        }
        let spatial = &input_shape[1..];
        if padding == Padding::Valid && spatial.iter().any(|&n| n < k) {
            return Err(Error::invalid(
                "conv_nd",
                format!("valid padding needs every extent >= {k}, got {spatial:?}"),
            ));
        }

        let input = lift(spatial);
        let kernel = lift(&kernel_shape[2..]);
        let mut output = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            // The synthetic leading axis of 2D data is never strided.
            let s = if rank == 2 && a == 0 { 1 } else { stride };
            match padding {
                Padding::Same => {
                    pad[a] = kernel[a] / 2;
                    output[a] = input[a].div_ceil(s);
                }
                Padding::Valid => {
                    output[a] = (input[a] - kernel[a]) / s + 1;
                }
            }
        }
        Ok(Self {
            rank,
            cin: input_shape[0],
            cout: kernel_shape[0],
            input,
            kernel,
            output,
            pad,
            stride,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = vec![self.cout];
        shape.extend_from_slice(&self.output[3 - self.rank..]);
        shape
    }

    fn axis_stride(&self, axis: usize) -> usize {
        if self.rank == 2 && axis == 0 {
            1
        } else {
            self.stride
        }
    }

    /// Output positions `o` whose input index `o * s + k - pad` lies in `[0, n)`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.axis_stride(axis);
        let n = self.input[axis];
        let pad = self.pad[axis];
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if n + pad > k {
            ((n + pad - k - 1) / s + 1).min(self.output[axis])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (kernel offset, output row, input row) triple with the
    /// valid column range along the innermost axis.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let [_, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let s_z = self.axis_stride(0);
        let s = self.stride;
        for kz in 0..kd {
            let (z0, z1) = self.valid_range(0, kz);
            for ky in 0..kh {
                let (y0, y1) = self.valid_range(1, ky);
                for kx in 0..kw {
                    let (x0, x1) = self.valid_range(2, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let k_index = (kz * kh + ky) * kw + kx;
                    for oz in z0..z1 {
                        let iz = oz * s_z + kz - self.pad[0];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - self.pad[1];
                            let out_row = (oz * oh + oy) * ow;
                            let in_row = (iz * ih + iy) * iw;
                            f(k_index, out_row, in_row, x0, x1, kx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let s = g.stride;
    let px = g.pad[2];
    let mut out = vec![T::zero(); g.cout * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(oc, o)| {
        for ic in 0..g.cin {
            let xin = &x[ic * in_vol..(ic + 1) * in_vol];
            let wk = &w[(oc * g.cin + ic) * k_vol..(oc * g.cin + ic + 1) * k_vol];
            g.for_each_row(|k, out_row, in_row, x0, x1, kx| {
                let wv = wk[k];
                let orow = &mut o[out_row + x0..out_row + x1];
                if s == 1 {
                    let start = in_row + x0 + kx - px;
                    for (ov, &iv) in orow.iter_mut().zip(&xin[start..start + (x1 - x0)]) {
                        *ov += wv * iv;
                    }
                } else {
                    for (j, ov) in orow.iter_mut().enumerate() {
                        *ov += wv * xin[in_row + (x0 + j) * s + kx - px];
                    }
                }
            });
        }
    });
    out
}

pub(crate) fn backward_input<T: Scalar>(g: &ConvGeometry, w: &[T], grad_out: &[T]) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let s = g.stride;
    let px = g.pad[2];
    let mut dx = vec![T::zero(); g.cin * in_vol];
    dx.par_chunks_mut(in_vol).enumerate().for_each(|(ic, d)| {
        for oc in 0..g.cout {
            let go = &grad_out[oc * out_vol..(oc + 1) * out_vol];
            let wk = &w[(oc * g.cin + ic) * k_vol..(oc * g.cin + ic + 1) * k_vol];
            g.for_each_row(|k, out_row, in_row, x0, x1, kx| {
                let wv = wk[k];
                let grow = &go[out_row + x0..out_row + x1];
                if s == 1 {
                    let start = in_row + x0 + kx - px;
                    for (dv, &gv) in d[start..start + (x1 - x0)].iter_mut().zip(grow) {
                        *dv += wv * gv;
                    }
                } else {
                    for (j, &gv) in grow.iter().enumerate() {
                        d[in_row + (x0 + j) * s + kx - px] += wv * gv;
                    }
                }
            });
        }
    });
    dx
}

pub(crate) fn backward_kernel<T: Scalar>(g: &ConvGeometry, x: &[T], grad_out: &[T]) -> Vec<T> {
    let (in_vol, out_vol, k_vol) = (g.in_vol(), g.out_vol(), g.k_vol());
    let s = g.stride;
    let px = g.pad[2];
    let mut dw = vec![T::zero(); g.cout * g.cin * k_vol];
    dw.par_chunks_mut(g.cin * k_vol).enumerate().for_each(|(oc, dwo)| {
        let go = &grad_out[oc * out_vol..(oc + 1) * out_vol];
        for ic in 0..g.cin {
            let xin = &x[ic * in_vol..(ic + 1) * in_vol];
            let dk = &mut dwo[ic * k_vol..(ic + 1) * k_vol];
            g.for_each_row(|k, out_row, in_row, x0, x1, kx| {
                let grow = &go[out_row + x0..out_row + x1];
                let mut acc = T::zero();
                if s == 1 {
                    let start = in_row + x0 + kx - px;
                    for (&gv, &iv) in grow.iter().zip(&xin[start..start + (x1 - x0)]) {
                        acc += gv * iv;
                    }
                } else {
                    for (j, &gv) in grow.iter().enumerate() {
                        acc += gv * xin[in_row + (x0 + j) * s + kx - px];
                    }
                }
                dk[k] += acc;
            });
        }
    });
    dw
}
