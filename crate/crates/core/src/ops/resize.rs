//! Separable bicubic upsampling (cubic convolution, a = -0.75, half-pixel
//! centres, edge-clamped taps).

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const CUBIC_A: f64 = -0.75;

/// Cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output position along one axis.
#[derive(Debug)]
struct AxisTaps {
    taps: Vec<[(usize, f64); 4]>,
}

impl AxisTaps {
    fn new(len: usize, scale: usize) -> Self {
        let taps = (0..len * scale)
            .map(|o| {
                let src = (o as f64 + 0.5) / scale as f64 - 0.5;
                let base = src.floor();
                let t = src - base;
                let clamp = |i: f64| (i.max(0.0) as usize).min(len - 1);
                [
                    (clamp(base - 1.0), cubic_weight(t + 1.0)),
                    (clamp(base), cubic_weight(t)),
                    (clamp(base + 1.0), cubic_weight(1.0 - t)),
                    (clamp(base + 2.0), cubic_weight(2.0 - t)),
                ]
            })
            .collect();
        AxisTaps { taps }
    }
}

/// Resamples axis 1 (`outer` blocks of `[len, inner]`) forward, or its transpose.
fn resample(data: &[f64], outer: usize, len_in: usize, inner: usize, taps: &AxisTaps) -> Vec<f64> {
    let len_out = taps.taps.len();
    let mut out = vec![0.0; outer * len_out * inner];
    for o in 0..outer {
        let src = &data[o * len_in * inner..(o + 1) * len_in * inner];
        let dst = &mut out[o * len_out * inner..(o + 1) * len_out * inner];
        for (row, tap) in dst.chunks_mut(inner).zip(&taps.taps) {
            for &(i, wgt) in tap {
                for (d, &s) in row.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                    *d += wgt * s;
                }
            }
        }
    }
    out
}

fn resample_transpose(grad: &[f64], outer: usize, len_in: usize, inner: usize, taps: &AxisTaps) -> Vec<f64> {
    let len_out = taps.taps.len();
    let mut out = vec![0.0; outer * len_in * inner];
    for o in 0..outer {
        let src = &grad[o * len_out * inner..(o + 1) * len_out * inner];
        let dst = &mut out[o * len_in * inner..(o + 1) * len_in * inner];
        for (row, tap) in src.chunks(inner).zip(&taps.taps) {
            for &(i, wgt) in tap {
                for (d, &s) in dst[i * inner..(i + 1) * inner].iter_mut().zip(row) {
                    *d += wgt * s;
                }
            }
        }
    }
    out
}

struct Plan {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    scale: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Plan {
    fn new(shape: &[usize], scale: usize) -> Result<Self> {
        let [n, h, w, c] = *shape else {
            return Err(dim_err!("bicubic_upsample expects NHWC, got {shape:?}"));
        };
        if scale < 2 {
            return Err(dim_err!("bicubic_upsample: scale must be >= 2, got {scale}"));
        }
        Ok(Plan { n, h, w, c, scale, rows: AxisTaps::new(h, scale), cols: AxisTaps::new(w, scale) })
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let s = self.scale;
        let tmp = resample(x, self.n, self.h, self.w * self.c, &self.rows);
        resample(&tmp, self.n * self.h * s, self.w, self.c, &self.cols)
    }

    fn backward(&self, g: &[f64]) -> Vec<f64> {
        let s = self.scale;
        let tmp = resample_transpose(g, self.n * self.h * s, self.w, self.c, &self.cols);
        resample_transpose(&tmp, self.n, self.h, self.w * self.c, &self.rows)
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.h * self.scale, self.w * self.scale, self.c]
    }
}

/// Upsamples an NHWC tensor by an integer factor.
pub fn bicubic_upsample(input: &Tensor, scale: usize) -> Result<Tensor> {
    let plan = Plan::new(input.shape(), scale)?;
    Ok(Tensor::from_parts(plan.out_shape(), plan.forward(input.data())))
}

impl<'t> Var<'t> {
    pub fn bicubic_upsample(self, scale: usize) -> Result<Var<'t>> {
        let x = self.value();
        let plan = Rc::new(Plan::new(x.shape(), scale)?);
        let out = Tensor::from_parts(plan.out_shape(), plan.forward(x.data()));
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[self], move |g, _| vec![Some(Tensor::from_parts(in_shape, plan.backward(g.data())))]))
    }
}
