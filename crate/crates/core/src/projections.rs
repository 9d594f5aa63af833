//! Measurement-space adapters: linear initial reconstruction, the input
//! projection into the first feature map, and the output projection back to
//! a residual patch.

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::params::{fan_in_normal, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

fn expect_channels(v: &Var<'_>, c: usize, what: &str) -> Result<()> {
    let s = v.shape();
    if s.len() != 4 || s[3] != c {
        return Err(dim_err!("{what} expects NHWC input with {c} channels, got {s:?}"));
    }
    Ok(())
}

/// Learned stand-in for `Φ†`: a bias-free 1×1 convolution to `B²` channels
/// followed by a pixel shuffle of factor `B`.
#[derive(Clone, Debug)]
pub struct InitializationHead {
    pub block_size: usize,
    pub measurements: usize,
    pub kernels: ParamId,
}

impl InitializationHead {
    /// `matrix` is the `[B², m]` reconstruction matrix.
    pub fn register(store: &mut ParamStore, matrix: &Tensor, block_size: usize) -> Result<Self> {
        let [n, m] = *matrix.shape() else {
            return Err(dim_err!("initialisation matrix must be 2-D, got {:?}", matrix.shape()));
        };
        if n != block_size * block_size {
            return Err(dim_err!("initialisation matrix needs B²={} rows, got {n}", block_size * block_size));
        }
        let kernels = store.add("init.kernels", matrix.reshape(&[n, 1, 1, m])?);
        Ok(InitializationHead { block_size, measurements: m, kernels })
    }

    /// The `[B², m]` matrix currently held by the head.
    pub fn matrix(&self, store: &ParamStore) -> Tensor {
        let b2 = self.block_size * self.block_size;
        Tensor::from_parts(vec![b2, self.measurements], store.get(self.kernels).data().to_vec())
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, grid: Var<'t>) -> Result<Var<'t>> {
        expect_channels(&grid, self.measurements, "initialisation")?;
        grid.conv2d(ctx.p(self.kernels), None, 1, 0)?.pixel_shuffle(self.block_size)
    }
}

/// Bias-free 1×1 convolutions `m → r²·C → … → r²·C` followed by a pixel
/// shuffle of factor `r`, with no activations (the map is linear).
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub measurements: usize,
    pub upscale: usize,
    pub layers: Vec<ParamId>,
}

impl InputProjection {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let m = cfg.measurements();
        let r = cfg.input_upscale();
        let hidden = r * r * cfg.input_feature_width();
        let layers = (0..cfg.input_proj_layers)
            .map(|i| {
                let cin = if i == 0 { m } else { hidden };
                store.add(format!("input_proj.{i}.weight"), fan_in_normal(&[hidden, 1, 1, cin], cin, rng))
            })
            .collect();
        InputProjection { measurements: m, upscale: r, layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, grid: Var<'t>) -> Result<Var<'t>> {
        expect_channels(&grid, self.measurements, "input projection")?;
        let mut x = grid;
        for &w in &self.layers {
            x = x.conv2d(ctx.p(w), None, 1, 0)?;
        }
        x.pixel_shuffle(self.upscale)
    }
}

/// Two 3×3 convolutions (`C → C → 1`) followed by `tanh`. The last
/// convolution starts at zero so an untrained model returns its initial
/// linear estimate unchanged.
#[derive(Clone, Debug)]
pub struct OutputProjection {
    pub width: usize,
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
}

impl OutputProjection {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        let fan = 9 * width;
        let conv1 = (
            store.add("output_proj.0.weight", fan_in_normal(&[width, 3, 3, width], fan, rng)),
            store.add("output_proj.0.bias", Tensor::zeros(&[width])),
        );
        let conv2 = (
            store.add("output_proj.1.weight", Tensor::zeros(&[1, 3, 3, width])),
            store.add("output_proj.1.bias", Tensor::zeros(&[1])),
        );
        OutputProjection { width, conv1, conv2 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, feature: Var<'t>) -> Result<Var<'t>> {
        expect_channels(&feature, self.width, "output projection")?;
        let h = feature.conv2d(ctx.p(self.conv1.0), Some(ctx.p(self.conv1.1)), 1, 1)?;
        let out = h.conv2d(ctx.p(self.conv2.0), Some(ctx.p(self.conv2.1)), 1, 1)?;
        Ok(out.tanh())
    }
}
