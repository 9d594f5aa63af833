use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Tensor;

/// Pointwise and row-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu {
        slope: f64,
    },
    Gelu,
    Tanh,
    /// Softmax over the trailing axis.
    Softmax,
}

pub fn activation(kind: Activation, input: &Tensor) -> Tensor {
    let tape = crate::Tape::new();
    let y = tape.constant(input.clone()).activate(kind);
    let out = y.value();
    (*out).clone()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// Largest `f64` strictly below one.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

fn open_tanh(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

impl<'t> Var<'t> {
    pub fn activate(self, kind: Activation) -> Var<'t> {
        match kind {
            Activation::LeakyRelu { slope } => self.leaky_relu(slope),
            Activation::Gelu => self.gelu(),
            Activation::Tanh => self.tanh(),
            Activation::Softmax => self.softmax_last(),
        }
    }

    fn pointwise(self, f: fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = std::rc::Rc::new(x.map(f));
        let out = (*y).clone();
        self.record(out, &[self], move |g, _| {
            let data =
                g.data().iter().zip(x.data().iter().zip(y.data())).map(|(&gv, (&xv, &yv))| gv * df(xv, yv)).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| if v >= 0.0 { v } else { slope * v });
        self.record(out, &[self], move |g, _| {
            let data =
                g.data().iter().zip(x.data()).map(|(&gv, &xv)| if xv >= 0.0 { gv } else { slope * gv }).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t> {
        self.pointwise(gelu, |x, _| gelu_grad(x))
    }

    /// Hyperbolic tangent, kept strictly inside `(-1, 1)`: values that
    /// would round to ±1 are pinned to the nearest representable interior value.
    pub fn tanh(self) -> Var<'t> {
        self.pointwise(open_tanh, |_, y| 1.0 - y * y)
    }

    pub fn softmax_last(self) -> Var<'t> {
        let y = std::rc::Rc::new(softmax_rows(&self.value()));
        let out = (*y).clone();
        self.record(out, &[self], move |g, _| {
            let c = *y.shape().last().unwrap();
            let mut gx = vec![0.0; g.len()];
            for ((gr, yr), dst) in g.data().chunks(c).zip(y.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
        })
    }
}

pub fn softmax(input: &Tensor) -> Result<Tensor> {
    Ok(softmax_rows(input))
}
