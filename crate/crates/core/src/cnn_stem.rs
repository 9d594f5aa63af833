//! Convolutional branch producing the local feature pyramid
//! `F_c^i ∈ R^{H_i × W_i × C_i}` with `H_i = 2^i·H0` and `C_i = C_0 / 2^i`.

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{dim_err, Result};
use crate::params::{fan_in_normal, BufferId, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::Tensor;

/// 3×3 convolution (padding 1) → leaky ReLU → batch norm.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: BufferId,
    running_var: BufferId,
}

impl ConvUnit {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        ConvUnit {
            weight: store.add(format!("{prefix}.weight"), fan_in_normal(&[width, 3, 3, width], 9 * width, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width])),
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::ones(&[width])),
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[width])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[width])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::ones(&[width])),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t, '_>, cfg: &NormSettings, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.conv2d(ctx.p(self.weight), Some(ctx.p(self.bias)), 1, 1)?;
        let a = h.leaky_relu(cfg.leaky_slope);
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let bn = a.batch_norm_train(gamma, beta, cfg.eps)?;
                let mom = cfg.momentum;
                let unbias = if bn.count > 1 { bn.count as f64 / (bn.count - 1) as f64 } else { 1.0 };
                let mean = ctx.buffer(self.running_mean).zip_map(&bn.mean, |r, b| (1.0 - mom) * r + mom * b)?;
                let var = ctx.buffer(self.running_var).zip_map(&bn.var, |r, b| (1.0 - mom) * r + mom * b * unbias)?;
                ctx.queue_buffer_update(self.running_mean, mean);
                ctx.queue_buffer_update(self.running_var, var);
                Ok(bn.output)
            }
            Mode::Eval => {
                a.batch_norm_eval(gamma, beta, ctx.buffer(self.running_mean), ctx.buffer(self.running_var), cfg.eps)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct NormSettings {
    leaky_slope: f64,
    eps: f64,
    momentum: f64,
}

impl From<&ModelConfig> for NormSettings {
    fn from(c: &ModelConfig) -> Self {
        NormSettings { leaky_slope: c.leaky_slope, eps: c.norm_eps, momentum: c.bn_momentum }
    }
}

/// Two [`ConvUnit`]s at constant width; shape preserving.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub width: usize,
    units: [ConvUnit; 2],
    norm: NormSettings,
}

impl ConvBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let units = [
            ConvUnit::register(store, &format!("{prefix}.0"), width, rng),
            ConvUnit::register(store, &format!("{prefix}.1"), width, rng),
        ];
        ConvBlock { width, units, norm: cfg.into() }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.width {
            return Err(dim_err!("conv block of width {} got input {s:?}", self.width));
        }
        let h = self.units[0].forward(ctx, &self.norm, x)?;
        self.units[1].forward(ctx, &self.norm, h)
    }
}

/// Bicubic ×2 upsampling then a 1×1 convolution halving the channels.
#[derive(Clone, Debug)]
pub struct UpsampleModule {
    pub width: usize,
    weight: ParamId,
    bias: ParamId,
}

impl UpsampleModule {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        UpsampleModule {
            width,
            weight: store.add(format!("{prefix}.weight"), fan_in_normal(&[width / 2, 1, 1, width], width, rng)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[width / 2])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.width || self.width % 2 != 0 {
            return Err(dim_err!("upsample module of (even) width {} got {s:?}", self.width));
        }
        x.bicubic_upsample(2)?.conv2d(ctx.p(self.weight), Some(ctx.p(self.bias)), 1, 0)
    }
}

/// `ConvBlock_0`, then `(UpsampleModule, ConvBlock)` for every later stage.
#[derive(Clone, Debug)]
pub struct CnnStem {
    blocks: Vec<ConvBlock>,
    upsamples: Vec<UpsampleModule>,
    schedule: Vec<(usize, usize)>,
}

impl CnnStem {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut upsamples = Vec::new();
        for i in 0..cfg.stages {
            if i > 0 {
                upsamples.push(UpsampleModule::register(store, &format!("cnn.up{i}"), cfg.cnn_width(i - 1), rng));
            }
            blocks.push(ConvBlock::register(store, &format!("cnn.block{i}"), cfg.cnn_width(i), cfg, rng));
        }
        let schedule = (0..cfg.stages).map(|i| (cfg.stage_resolution(i), cfg.cnn_width(i))).collect();
        CnnStem { blocks, upsamples, schedule }
    }

    /// Returns `[F_c^0, …, F_c^{stages-1}]`, checking the shape schedule.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, f_in: Var<'t>) -> Result<Vec<Var<'t>>> {
        let mut pyramid = Vec::with_capacity(self.blocks.len());
        let mut x = f_in;
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = self.upsamples[i - 1].forward(ctx, x)?;
            }
            x = block.forward(ctx, x)?;
            let (res, width) = self.schedule[i];
            let s = x.shape();
            if s[1..] != [res, res, width] {
                return Err(dim_err!("CNN stage {i} produced {s:?}, schedule says {res}x{res}x{width}"));
            }
            pyramid.push(x);
        }
        Ok(pyramid)
    }
}
