//! 2-D cross-correlation on NHWC tensors via im2col and GEMM.

use std::rc::Rc;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, h, w, cin] = *input else {
            return Err(dim_err!("conv2d input must be NHWC, got {input:?}"));
        };
        let [cout, kh, kw, kcin] = *kernels else {
            return Err(dim_err!("conv2d kernels must be [Cout, kh, kw, Cin], got {kernels:?}"));
        };
        if kcin != cin {
            return Err(dim_err!("conv2d: input has {cin} channels, kernels expect {kcin}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv2d: stride must be at least 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err!("conv2d: {kh}x{kw} kernel exceeds padded {h}x{w} input"));
        }
        Ok(ConvGeometry {
            n,
            h,
            w,
            cin,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.ho, self.wo, self.cout]
    }

    /// Calls `f(row, column_offset, input_offset)` for every in-bounds
    /// `Cin`-long run of the im2col matrix.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (b * self.ho + oy) * self.wo + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = (ky * self.kw + kx) * self.cin;
                            let src = ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(row * k + col, col, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.patch_len()];
        let cin = self.cin;
        self.for_each_run(|dst, _, src| {
            cols[dst..dst + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.h * self.w * self.cin];
        let cin = self.cin;
        self.for_each_run(|dst, _, src| {
            for (o, &c) in out[src..src + cin].iter_mut().zip(&cols[dst..dst + cin]) {
                *o += c;
            }
        });
        out
    }
}

fn conv_forward(geo: &ConvGeometry, cols: &[f64], kernels: &[f64], bias: Option<&[f64]>) -> Tensor {
    let (m, k, cout) = (geo.rows(), geo.patch_len(), geo.cout);
    let mut out = vec![0.0; m * cout];
    if let Some(b) = bias {
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    gemm(m, k, cout, cols, (k, 1), kernels, (1, k), beta, &mut out);
    Tensor::from_parts(geo.out_shape(), out)
}

/// Cross-correlation of an NHWC input with `[Cout, kh, kw, Cin]` kernels.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), kernels.shape(), stride, padding)?;
    check_bias(&geo, bias.map(Tensor::shape))?;
    let cols;
    let cols_ref = if geo.is_pointwise() {
        input.data()
    } else {
        cols = geo.im2col(input.data());
        &cols
    };
    Ok(conv_forward(&geo, cols_ref, kernels.data(), bias.map(Tensor::data)))
}

fn check_bias(geo: &ConvGeometry, bias: Option<&[usize]>) -> Result<()> {
    match bias {
        Some(s) if s != [geo.cout] => {
            Err(dim_err!("conv2d bias shape {s:?} does not match {} output channels", geo.cout))
        }
        _ => Ok(()),
    }
}

impl<'t> Var<'t> {
    /// Differentiable [`conv2d`].
    pub fn conv2d(self, kernels: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), kernels.value());
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let bias_value = bias.map(|b| b.value());
        check_bias(&geo, bias_value.as_deref().map(Tensor::shape))?;

        let cols: Rc<Vec<f64>> =
            if geo.is_pointwise() { Rc::new(x.data().to_vec()) } else { Rc::new(geo.im2col(x.data())) };
        let out = conv_forward(&geo, &cols, w.data(), bias_value.as_deref().map(Tensor::data));

        let mut parents = vec![self, kernels];
        parents.extend(bias);
        Ok(self.record(out, &parents, move |g, needs| {
            let (m, k, cout) = (geo.rows(), geo.patch_len(), geo.cout);
            let gx = needs[0].then(|| {
                let mut gcols = vec![0.0; m * k];
                gemm(m, cout, k, g.data(), (cout, 1), w.data(), (k, 1), 0.0, &mut gcols);
                let data = if geo.is_pointwise() { gcols } else { geo.col2im(&gcols) };
                Tensor::from_parts(vec![geo.n, geo.h, geo.w, geo.cin], data)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; cout * k];
                gemm(cout, m, k, g.data(), (1, cout), &cols, (k, 1), 0.0, &mut gw);
                Tensor::from_parts(w.shape().to_vec(), gw)
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_parts(vec![cout], gb)
                }));
            }
            grads
        }))
    }
}
