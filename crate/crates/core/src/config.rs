//! Architectural hyperparameters and the shape schedule derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How transformer and CNN features are fused at each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Channel concatenation (the default architecture).
    Concat,
    /// Element-wise addition; CNN widths are doubled so transformer widths
    /// stay unchanged.
    Add,
}

/// Where the training loss is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    /// On the merged image.
    Image,
    /// On individual patches.
    Patch,
}

/// Parametrisation of the per-head query/key/value projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionProjection {
    /// Full-width `C×C` projections whose outputs are split into heads.
    Full,
    /// Channels split into heads first, then one `d×d` projection per head.
    Split,
}

/// Every architectural hyperparameter of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch side `H_p = W_p`.
    pub patch_size: usize,
    /// Sampling block side `B`.
    pub block_size: usize,
    /// Sampling ratio `m / B²`.
    pub ratio: f64,
    /// Input projection width `C0`.
    pub base_channels: usize,
    /// First-stage resolution `H0 = W0`.
    pub base_resolution: usize,
    /// Attention window side `P`.
    pub window_size: usize,
    /// Transformer layers per stage `L`.
    pub depth: usize,
    pub stages: usize,
    /// Heads per stage are `max(1, C_j / head_dim)`.
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub norm_eps: f64,
    pub fusion_mode: FusionMode,
    pub loss_target: LossTarget,
    pub attention_projection: AttentionProjection,
    /// Number of 1×1 convolutions in the input projection.
    pub input_proj_layers: usize,
    /// Patch stride used when reconstructing whole images.
    pub eval_overlap_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 64,
            block_size: 16,
            ratio: 0.25,
            base_channels: 128,
            base_resolution: 8,
            window_size: 8,
            depth: 5,
            stages: 4,
            head_dim: 32,
            mlp_ratio: 4,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            norm_eps: 1e-5,
            fusion_mode: FusionMode::Concat,
            loss_target: LossTarget::Image,
            attention_projection: AttentionProjection::Full,
            input_proj_layers: 2,
            eval_overlap_stride: 32,
        }
    }
}

/// `m = round(ratio·B²)` clamped to `[1, B²]`.
pub fn derive_measurements(ratio: f64, block_size: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("sampling ratio {ratio} is outside (0, 1]")));
    }
    let full = block_size * block_size;
    Ok(((ratio * full as f64).round() as usize).clamp(1, full))
}

impl ModelConfig {
    /// The small configuration used for whole-model gradient checks.
    pub fn reduced() -> Self {
        ModelConfig {
            patch_size: 16,
            block_size: 4,
            base_channels: 16,
            base_resolution: 4,
            window_size: 4,
            depth: 1,
            stages: 3,
            eval_overlap_stride: 8,
            ..Self::default()
        }
    }

    /// A compact configuration that keeps the default patch geometry
    /// (64×64 patches, 16×16 blocks, 8×8 windows) but trains on one CPU core.
    pub fn desk() -> Self {
        ModelConfig { base_channels: 16, depth: 1, ..Self::default() }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = ratio;
        self
    }

    /// Measurements per block `m`.
    pub fn measurements(&self) -> usize {
        derive_measurements(self.ratio, self.block_size).unwrap_or(1)
    }

    /// Blocks per patch side, `H_p / B`.
    pub fn grid_size(&self) -> usize {
        self.patch_size / self.block_size
    }

    /// Pixel-shuffle factor of the input projection, `H0 / (H_p / B)`.
    pub fn input_upscale(&self) -> usize {
        self.base_resolution / self.grid_size()
    }

    /// Channel width of `F_in`.
    pub fn input_feature_width(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Concat => self.base_channels,
            FusionMode::Add => 2 * self.base_channels,
        }
    }

    /// `H_i = 2^i · H0`.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    /// Width of CNN stage `i`.
    pub fn cnn_width(&self, stage: usize) -> usize {
        self.input_feature_width() >> stage
    }

    /// Width `C_j = 2·C0 / 2^j` of transformer stage `j`.
    pub fn transformer_width(&self, stage: usize) -> usize {
        (2 * self.base_channels) >> stage
    }

    pub fn heads(&self, stage: usize) -> usize {
        (self.transformer_width(stage) / self.head_dim).max(1)
    }

    /// Width of the final transformer feature.
    pub fn output_width(&self) -> usize {
        self.transformer_width(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        derive_measurements(self.ratio, self.block_size)?;
        if self.block_size == 0 || self.patch_size == 0 || self.base_resolution == 0 {
            return fail("patch, block and base resolution must be positive".into());
        }
        if self.stages == 0 || self.depth == 0 || self.mlp_ratio == 0 || self.head_dim == 0 {
            return fail("stages, depth, mlp_ratio and head_dim must be positive".into());
        }
        if self.input_proj_layers == 0 {
            return fail("input projection needs at least one layer".into());
        }
        if self.patch_size % self.block_size != 0 {
            return fail(format!("patch size {} is not a multiple of block size {}", self.patch_size, self.block_size));
        }
        if self.stage_resolution(self.stages - 1) != self.patch_size {
            return fail(format!(
                "H0·2^(stages-1) = {} must equal the patch size {}",
                self.stage_resolution(self.stages - 1),
                self.patch_size
            ));
        }
        if self.base_resolution % self.grid_size() != 0 {
            return fail(format!(
                "base resolution {} is not a multiple of the block grid {}",
                self.base_resolution,
                self.grid_size()
            ));
        }
        for s in 0..self.stages {
            let res = self.stage_resolution(s);
            if self.window_size == 0 || res % self.window_size != 0 {
                return fail(format!("stage {s} resolution {res} not divisible by window {}", self.window_size));
            }
            let (cw, tw) = (self.cnn_width(s), self.transformer_width(s));
            if cw == 0 || tw == 0 || cw << s != self.input_feature_width() || tw << s != 2 * self.base_channels {
                return fail(format!("base width {} cannot be halved {} times", self.base_channels, self.stages - 1));
            }
            if tw % self.heads(s) != 0 {
                return fail(format!("stage {s} width {tw} not divisible by {} heads", self.heads(s)));
            }
            if s > 0 && self.transformer_width(s - 1) % 4 != 0 {
                return fail(format!("stage {} width not divisible by 4 for pixel shuffle", s - 1));
            }
        }
        if self.eval_overlap_stride == 0 || self.eval_overlap_stride > self.patch_size {
            return fail(format!("eval stride {} must be in 1..={}", self.eval_overlap_stride, self.patch_size));
        }
        if !(self.leaky_slope.is_finite() && self.norm_eps > 0.0) {
            return fail("leaky slope must be finite and norm epsilon positive".into());
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("batch-norm momentum {} outside [0, 1]", self.bn_momentum));
        }
        Ok(())
    }
}
