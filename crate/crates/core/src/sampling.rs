//! Block-based compressive sampling as a strided, bias-free convolution.
//!
//! Each `B×B` block of a patch is vectorised row-major and multiplied by the
//! measurement matrix `Φ ∈ R^{m×B²}`. Storing row `r` of `Φ` as the `r`-th
//! `B×B` kernel turns this into one convolution with stride `B`.

use rand::Rng;

use crate::autograd::Var;
use crate::config::derive_measurements;
use crate::error::{dim_err, Result};
use crate::ops::conv2d;
use crate::params::{orthonormal_rows, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Learned measurement kernels `[m, B, B, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingOperator {
    block_size: usize,
    kernels: Tensor,
}

/// Stacked per-block measurements, `[N, H_p/B, W_p/B, m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementGrid(pub Tensor);

impl MeasurementGrid {
    pub fn values(&self) -> &Tensor {
        &self.0
    }

    /// Total measurements per patch.
    pub fn count_per_patch(&self) -> usize {
        self.0.shape()[1..].iter().product()
    }
}

impl SamplingOperator {
    pub fn new(block_size: usize, kernels: Tensor) -> Result<Self> {
        match *kernels.shape() {
            [m, b1, b2, 1] if b1 == block_size && b2 == block_size && m <= block_size * block_size => {
                Ok(SamplingOperator { block_size, kernels })
            }
            _ => Err(dim_err!(
                "sampling kernels must be [m <= B², B, B, 1] with B={block_size}, got {:?}",
                kernels.shape()
            )),
        }
    }

    /// Orthonormal rows scaled by `1/B`, with `m` derived from `ratio`.
    pub fn random<R: Rng + ?Sized>(ratio: f64, block_size: usize, rng: &mut R) -> Result<Self> {
        let m = derive_measurements(ratio, block_size)?;
        let phi = orthonormal_rows(m, block_size * block_size, rng).scale(1.0 / block_size as f64);
        Self::from_matrix(&phi, block_size)
    }

    /// Builds kernels from a measurement matrix `[m, B²]`.
    pub fn from_matrix(phi: &Tensor, block_size: usize) -> Result<Self> {
        let [m, n] = *phi.shape() else {
            return Err(dim_err!("measurement matrix must be 2-D, got {:?}", phi.shape()));
        };
        if n != block_size * block_size {
            return Err(dim_err!("measurement matrix has {n} columns, expected B²={}", block_size * block_size));
        }
        Self::new(block_size, phi.reshape(&[m, block_size, block_size, 1])?)
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn measurements(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn ratio(&self) -> f64 {
        self.measurements() as f64 / (self.block_size * self.block_size) as f64
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    /// `Φ` with row `r` equal to kernel `r` flattened row-major.
    pub fn phi_as_matrix(&self) -> Tensor {
        let m = self.measurements();
        Tensor::from_parts(vec![m, self.block_size * self.block_size], self.kernels.data().to_vec())
    }

    /// Samples NHWC single-channel patches by strided convolution.
    pub fn sample_patch(&self, patch: &Tensor) -> Result<MeasurementGrid> {
        check_patch(patch.shape(), self.block_size)?;
        Ok(MeasurementGrid(conv2d(patch, &self.kernels, self.block_size, 0, None)?))
    }
}

fn check_patch(shape: &[usize], block: usize) -> Result<()> {
    match *shape {
        [_, h, w, 1] if h % block == 0 && w % block == 0 => Ok(()),
        _ => Err(dim_err!("patch {shape:?} must be [N, H, W, 1] with H, W multiples of {block}")),
    }
}

/// Matrix-form sampling: vectorise every `B×B` block and multiply by `phi`.
pub fn sample_blockwise_reference(patch: &Tensor, phi: &Tensor) -> Result<MeasurementGrid> {
    let [m, n] = *phi.shape() else {
        return Err(dim_err!("measurement matrix must be 2-D, got {:?}", phi.shape()));
    };
    let block = (n as f64).sqrt().round() as usize;
    if block * block != n {
        return Err(dim_err!("measurement matrix width {n} is not a square block"));
    }
    check_patch(patch.shape(), block)?;
    let [batch, h, w, _] = *patch.shape() else { unreachable!() };
    let (gh, gw) = (h / block, w / block);
    let mut out = Vec::with_capacity(batch * gh * gw * m);
    let mut vec_block = vec![0.0; n];
    for b in 0..batch {
        for by in 0..gh {
            for bx in 0..gw {
                for dy in 0..block {
                    for dx in 0..block {
                        vec_block[dy * block + dx] = patch.at(&[b, by * block + dy, bx * block + dx, 0]);
                    }
                }
                for r in 0..m {
                    let row = &phi.data()[r * n..(r + 1) * n];
                    out.push(row.iter().zip(&vec_block).map(|(a, x)| a * x).sum());
                }
            }
        }
    }
    Ok(MeasurementGrid(Tensor::from_parts(vec![batch, gh, gw, m], out)))
}

/// The sampling layer inside the model: kernels live in the parameter store.
#[derive(Clone, Debug)]
pub struct Sampler {
    pub block_size: usize,
    pub kernels: ParamId,
}

impl Sampler {
    pub fn register(store: &mut ParamStore, op: SamplingOperator) -> Self {
        let block_size = op.block_size;
        let kernels = store.add("sampling.kernels", op.kernels);
        Sampler { block_size, kernels }
    }

    pub fn operator(&self, store: &ParamStore) -> SamplingOperator {
        SamplingOperator { block_size: self.block_size, kernels: store.get(self.kernels).clone() }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, patches: Var<'t>) -> Result<Var<'t>> {
        check_patch(&patches.shape(), self.block_size)?;
        patches.conv2d(ctx.p(self.kernels), None, self.block_size, 0)
    }
}
