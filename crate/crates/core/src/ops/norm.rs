//! Layer and batch normalisation over the trailing channel axis.

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Which normalisation to apply in [`normalize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormKind {
    /// Per token over channels.
    Layer,
    /// Per channel over batch and spatial positions, using batch statistics.
    BatchTrain,
    /// Per channel with stored running statistics.
    BatchEval,
}

/// Affine parameters and, for [`NormKind::BatchEval`], running statistics.
pub struct NormParams<'a> {
    pub gamma: &'a Tensor,
    pub beta: &'a Tensor,
    pub running: Option<(&'a Tensor, &'a Tensor)>,
    pub eps: f64,
}

/// Plain-tensor normalisation entry point.
pub fn normalize(kind: NormKind, input: &Tensor, params: &NormParams<'_>) -> Result<Tensor> {
    let tape = crate::Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(params.gamma.clone());
    let b = tape.constant(params.beta.clone());
    let y = match kind {
        NormKind::Layer => x.layer_norm(g, b, params.eps)?,
        NormKind::BatchTrain => x.batch_norm_train(g, b, params.eps)?.output,
        NormKind::BatchEval => {
            let (m, v) =
                params.running.ok_or_else(|| crate::Error::Usage("batch_norm eval needs running statistics".into()))?;
            x.batch_norm_eval(g, b, m, v, params.eps)?
        }
    };
    let out = y.value();
    Ok((*out).clone())
}

fn channels(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!(
            "normalisation affine shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(c)
}

/// Result of a training-mode batch norm: output plus the batch statistics
/// (mean and biased variance) used to update running averages.
pub struct BatchNormOutput<'t> {
    pub output: Var<'t>,
    pub mean: Tensor,
    pub var: Tensor,
    pub count: usize,
}

impl<'t> Var<'t> {
    /// Normalises each row of the trailing axis to zero mean and unit variance,
    /// then applies `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = channels(&x, &gm, &bt)?;
        let rows = x.len() / c;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; gd.len()];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gd[r * c + j] * gm.data()[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * c + j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gd[r * c + j] * gm.data()[j];
                        gx[r * c + j] = inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dx);
                    }
                }
                Tensor::from_parts(shape.clone(), gx)
            });
            let (ggamma, gbeta) = affine_grads(gd, &xhat, c);
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }))
    }

    /// Batch normalisation with statistics over every axis but the last.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<BatchNormOutput<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = channels(&x, &gm, &bt)?;
        let rows = x.len() / c;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in x.data().chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, &v) in x.data().iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * inv_std[j];
            xhat[i] = h;
            out[i] = h * gm.data()[j] + bt.data()[j];
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let shape = x.shape().to_vec();
        let output = self.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut mean_d = vec![0.0; c];
                let mut mean_dx = vec![0.0; c];
                for (i, &gv) in gd.iter().enumerate() {
                    let j = i % c;
                    let d = gv * gm.data()[j];
                    mean_d[j] += d;
                    mean_dx[j] += d * xhat[i];
                }
                for j in 0..c {
                    mean_d[j] /= rows as f64;
                    mean_dx[j] /= rows as f64;
                }
                let gx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let j = i % c;
                        inv_std[j] * (gv * gm.data()[j] - mean_d[j] - xhat[i] * mean_dx[j])
                    })
                    .collect();
                Tensor::from_parts(shape.clone(), gx)
            });
            let (ggamma, gbeta) = affine_grads(gd, &xhat, c);
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        });
        Ok(BatchNormOutput {
            output,
            mean: Tensor::from_parts(vec![c], mean),
            var: Tensor::from_parts(vec![c], var),
            count: rows,
        })
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var<'t>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = channels(&x, &gm, &bt)?;
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(dim_err!("running statistics do not match {c} channels"));
        }
        let inv_std: Vec<f64> = running_var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        let xhat: Vec<f64> = x.data().iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * inv_std[i % c]).collect();
        let out = xhat.iter().enumerate().map(|(i, &h)| h * gm.data()[i % c] + bt.data()[i % c]).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        let shape = x.shape().to_vec();
        Ok(self.record(out, &[self, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let data = gd.iter().enumerate().map(|(i, &v)| v * gm.data()[i % c] * inv_std[i % c]).collect();
                Tensor::from_parts(shape.clone(), data)
            });
            let (ggamma, gbeta) = affine_grads(gd, &xhat, c);
            vec![gx, needs[1].then_some(ggamma), needs[2].then_some(gbeta)]
        }))
    }
}

fn affine_grads(g: &[f64], xhat: &[f64], c: usize) -> (Tensor, Tensor) {
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
        gg[i % c] += gv * h;
        gb[i % c] += gv;
    }
    (Tensor::from_parts(vec![c], gg), Tensor::from_parts(vec![c], gb))
}
