//! im2col convolution kernels backing the `conv2d` primitive.

use super::gemm::gemm;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let bad = || Error::shape("conv2d", format!("input {input:?} weight {weight:?}"));
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] || stride == 0 {
            return Err(bad());
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(bad());
        }
        Ok(Self {
            n: input[0],
            c_in: input[1],
            h,
            w,
            c_out: weight[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.p();
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the im2col buffers of every batch item.
pub(crate) fn forward(
    g: &ConvGeometry,
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (k, p) = (g.k(), g.p());
    let mut cols = vec![0.0; g.n * k * p];
    let mut out = vec![0.0; g.n * g.c_out * p];
    for b in 0..g.n {
        let col = &mut cols[b * k * p..(b + 1) * k * p];
        im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], col);
        let y = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
        if let Some(bias) = bias {
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        gemm(g.c_out, k, p, weight, false, col, false, y, 1.0);
    }
    (out, cols)
}

pub(crate) fn backward_input(g: &ConvGeometry, weight: &[f64], dy: &[f64], dx: &mut [f64]) {
    let (k, p) = (g.k(), g.p());
    let mut dcols = vec![0.0; k * p];
    for b in 0..g.n {
        let dyb = &dy[b * g.c_out * p..(b + 1) * g.c_out * p];
        gemm(k, g.c_out, p, weight, true, dyb, false, &mut dcols, 0.0);
        col2im(g, &dcols, &mut dx[b * g.in_len()..(b + 1) * g.in_len()]);
    }
}

pub(crate) fn backward_weight(g: &ConvGeometry, cols: &[f64], dy: &[f64], dw: &mut [f64]) {
    let (k, p) = (g.k(), g.p());
    for b in 0..g.n {
        let dyb = &dy[b * g.c_out * p..(b + 1) * g.c_out * p];
        let col = &cols[b * k * p..(b + 1) * k * p];
        gemm(g.c_out, p, k, dyb, false, col, true, dw, 1.0);
    }
}

pub(crate) fn backward_bias(g: &ConvGeometry, dy: &[f64], db: &mut [f64]) {
    let p = g.p();
    for b in 0..g.n {
        for (co, d) in db.iter_mut().enumerate() {
            let start = (b * g.c_out + co) * p;
            *d += dy[start..start + p].iter().sum::<f64>();
        }
    }
}
