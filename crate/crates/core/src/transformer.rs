//! Global branch: window multi-head self-attention, pre-norm transformer
//! layers and the stage-wise aggregation with the CNN pyramid.
//!
//! Tokens are `[N, H·W, C]` with token `t = row·W + col`. Inside a block the
//! sequence is tiled once into windows `[N·nW, P², C]`; every layer of the
//! block works on that layout.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::Var;
use crate::config::{AttentionProjection, FusionMode, ModelConfig};
use crate::error::{dim_err, Result};
use crate::ops::{swap_middle_map, window_merge_map, window_partition_map};
use crate::params::{fan_in_normal, Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Flat index into a `(2P−1)²` offset table for every `(query, key)` pair of
/// a `P×P` window: `(r1−r2+P−1)·(2P−1) + (c1−c2+P−1)`.
pub fn relative_position_index(p: usize) -> Vec<usize> {
    let t = p * p;
    let span = 2 * p - 1;
    let mut index = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            let (r1, c1) = (q / p, q % p);
            let (r2, c2) = (k / p, k % p);
            index.push((r1 + p - 1 - r2) * span + (c1 + p - 1 - c2));
        }
    }
    index
}

/// Parameters of one window multi-head self-attention.
///
/// With [`AttentionProjection::Full`] `W_Q/W_K/W_V` are `[C, C]` and their
/// outputs are split into heads; with [`AttentionProjection::Split`] the
/// input channels are split first and each head owns a `[d, d]` projection,
/// stored as `[h, d, d]`. `W_O` is `[C, C]` with bias, and the relative
/// position table is `[h, (2P−1)²]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    pub projection: AttentionProjection,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub rel_table: ParamId,
    rel_index: Rc<Vec<usize>>,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        window: usize,
        projection: AttentionProjection,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(dim_err!("attention width {width} not divisible by {heads} heads"));
        }
        let d = width / heads;
        let mut qkv = |name: &str| {
            let t = match projection {
                AttentionProjection::Full => fan_in_normal(&[width, width], width, rng),
                AttentionProjection::Split => fan_in_normal(&[heads, d, d], d, rng),
            };
            store.add(format!("{prefix}.{name}"), t)
        };
        let (w_q, w_k, w_v) = (qkv("w_q"), qkv("w_k"), qkv("w_v"));
        let span = 2 * window - 1;
        Ok(AttentionParams {
            width,
            heads,
            window,
            projection,
            w_q,
            w_k,
            w_v,
            w_o: store.add(format!("{prefix}.w_o"), fan_in_normal(&[width, width], width, rng)),
            b_o: store.add(format!("{prefix}.b_o"), Tensor::zeros(&[width])),
            rel_table: store.add(format!("{prefix}.rel_table"), Tensor::zeros(&[heads, span * span])),
            rel_index: Rc::new(relative_position_index(window)),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// `[nW, T, C] → [nW, h, T, d]`.
    fn split_heads<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let x = x.reshape(&[s[0], s[1], self.heads, self.head_dim()])?;
        swap_middle_map(&x.shape())?.apply_var(x)
    }

    fn project<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>, w: ParamId) -> Result<Var<'t>> {
        match self.projection {
            AttentionProjection::Full => self.split_heads(x.matmul(ctx.p(w))?),
            AttentionProjection::Split => self.split_heads(x)?.matmul(ctx.p(w)),
        }
    }

    /// The `[h, P², P²]` bias gathered from the offset table.
    pub fn bias<'t>(&self, ctx: &Ctx<'t, '_>) -> Result<Var<'t>> {
        let t = self.window * self.window;
        let span = (2 * self.window - 1).pow(2);
        let index: Vec<usize> =
            (0..self.heads).flat_map(|h| self.rel_index.iter().map(move |&i| h * span + i)).collect();
        ctx.p(self.rel_table).gather(&[self.heads, t, t], Rc::new(index))
    }

    /// Attention over windows `[nW, P², C]`, returning the same shape.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, windows: Var<'t>) -> Result<Var<'t>> {
        let s = windows.shape();
        let t = self.window * self.window;
        if s.len() != 3 || s[1] != t || s[2] != self.width {
            return Err(dim_err!("attention expects [nW, {t}, {}] windows, got {s:?}", self.width));
        }
        let q = self.project(ctx, windows, self.w_q)?;
        let k = self.project(ctx, windows, self.w_k)?;
        let v = self.project(ctx, windows, self.w_v)?;
        let scores = q.matmul_t(k)?.scale(1.0 / (self.head_dim() as f64).sqrt());
        let attn = scores.add_bcast(self.bias(ctx)?)?.softmax_last();
        let heads = attn.matmul(v)?;
        let merged = swap_middle_map(&heads.shape())?.apply_var(heads)?.reshape(&s)?;
        merged.matmul(ctx.p(self.w_o))?.add_bcast(ctx.p(self.b_o))
    }
}

/// `F' = MSA(τ1(F)) + F; out = MLP(τ2(F')) + F'`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: AttentionParams,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub mlp_in: (ParamId, ParamId),
    pub mlp_out: (ParamId, ParamId),
    eps: f64,
}

impl TransformerLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let norm = |store: &mut ParamStore, name: &str| {
            (
                store.add(format!("{prefix}.{name}.gamma"), Tensor::ones(&[width])),
                store.add(format!("{prefix}.{name}.beta"), Tensor::zeros(&[width])),
            )
        };
        let norm1 = norm(store, "norm1");
        let attention = AttentionParams::register(
            store,
            &format!("{prefix}.attn"),
            width,
            heads,
            cfg.window_size,
            cfg.attention_projection,
            rng,
        )?;
        let norm2 = norm(store, "norm2");
        let hidden = cfg.mlp_ratio * width;
        let mlp_in = (
            store.add(format!("{prefix}.mlp.0.weight"), fan_in_normal(&[width, hidden], width, rng)),
            store.add(format!("{prefix}.mlp.0.bias"), Tensor::zeros(&[hidden])),
        );
        let mlp_out = (
            store.add(format!("{prefix}.mlp.1.weight"), fan_in_normal(&[hidden, width], hidden, rng)),
            store.add(format!("{prefix}.mlp.1.bias"), Tensor::zeros(&[width])),
        );
        Ok(TransformerLayer { attention, norm1, norm2, mlp_in, mlp_out, eps: cfg.norm_eps })
    }

    /// Works on windowed tokens `[nW, P², C]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let n1 = x.layer_norm(ctx.p(self.norm1.0), ctx.p(self.norm1.1), self.eps)?;
        let x = self.attention.forward(ctx, n1)?.add(x)?;
        let n2 = x.layer_norm(ctx.p(self.norm2.0), ctx.p(self.norm2.1), self.eps)?;
        let h = n2.matmul(ctx.p(self.mlp_in.0))?.add_bcast(ctx.p(self.mlp_in.1))?.gelu();
        h.matmul(ctx.p(self.mlp_out.0))?.add_bcast(ctx.p(self.mlp_out.1))?.add(x)
    }
}

/// `L` layers at one resolution; partitions into windows on entry and
/// merges back on exit.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub resolution: usize,
    pub width: usize,
    pub window: usize,
    pub layers: Vec<TransformerLayer>,
}

impl TransformerBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        stage: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let width = cfg.transformer_width(stage);
        let layers = (0..cfg.depth)
            .map(|l| {
                TransformerLayer::register(store, &format!("{prefix}.layer{l}"), width, cfg.heads(stage), cfg, rng)
            })
            .collect::<Result<_>>()?;
        Ok(TransformerBlock { resolution: cfg.stage_resolution(stage), width, window: cfg.window_size, layers })
    }

    /// Tokens `[N, H·W, C]` in, same shape out.
    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, tokens: Var<'t>) -> Result<Var<'t>> {
        let s = tokens.shape();
        let (h, c) = (self.resolution, self.width);
        if s.len() != 3 || s[1] != h * h || s[2] != c {
            return Err(dim_err!("transformer block expects [N, {}, {c}] tokens, got {s:?}", h * h));
        }
        let mut x = window_partition_map(s[0], h, h, c, self.window)?.apply_var(tokens)?;
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        window_merge_map(s[0], h, h, c, self.window)?.apply_var(x)
    }
}

fn nhwc(v: &Var<'_>, what: &str) -> Result<[usize; 4]> {
    match *v.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => Err(dim_err!("{what} expects an NHWC feature, got {s:?}")),
    }
}

/// Channel concatenation of `F_in` and `F_c^0`, flattened to tokens.
pub fn aggregate_first<'t>(f_in: Var<'t>, f_c0: Var<'t>) -> Result<Var<'t>> {
    let [n, h, w, c] = nhwc(&f_in, "aggregate_first")?;
    if f_c0.shape() != f_in.shape() {
        return Err(dim_err!("aggregate_first: {:?} vs {:?}", f_in.shape(), f_c0.shape()));
    }
    f_in.concat_last(f_c0)?.reshape(&[n, h * w, 2 * c])
}

fn unflatten_and_shuffle<'t>(prev: Var<'t>, next_hw: (usize, usize)) -> Result<Var<'t>> {
    let s = prev.shape();
    let (h2, w2) = next_hw;
    if s.len() != 3 || h2 % 2 != 0 || w2 % 2 != 0 || s[1] != (h2 / 2) * (w2 / 2) || s[2] % 4 != 0 {
        return Err(dim_err!("cannot pixel-shuffle tokens {s:?} up to {h2}x{w2}"));
    }
    prev.reshape(&[s[0], h2 / 2, w2 / 2, s[2]])?.pixel_shuffle(2)
}

/// Tokens of the previous stage are unflattened, pixel-shuffled (`C → C/4`,
/// resolution doubled) and concatenated with `F_c^j`.
pub fn aggregate_next<'t>(prev: Var<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
    let [n, h, w, c] = nhwc(&f_c, "aggregate_next")?;
    let up = unflatten_and_shuffle(prev, (h, w))?;
    if up.shape() != f_c.shape() {
        return Err(dim_err!("aggregate_next: shuffled {:?} vs CNN {:?}", up.shape(), f_c.shape()));
    }
    up.concat_last(f_c)?.reshape(&[n, h * w, 2 * c])
}

/// The per-stage transformer blocks plus, in additive fusion, the 1×1
/// lifts that bring the shuffled `C_{j−1}/4` channels to `C_j`.
#[derive(Clone, Debug)]
pub struct TransformerStem {
    pub blocks: Vec<TransformerBlock>,
    pub fusion: FusionMode,
    lifts: Vec<ParamId>,
}

impl TransformerStem {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.stages);
        let mut lifts = Vec::new();
        for j in 0..cfg.stages {
            if j > 0 && cfg.fusion_mode == FusionMode::Add {
                let (cin, cout) = (cfg.transformer_width(j - 1) / 4, cfg.transformer_width(j));
                lifts.push(
                    store.add(format!("transformer.lift{j}.weight"), fan_in_normal(&[cout, 1, 1, cin], cin, rng)),
                );
            }
            blocks.push(TransformerBlock::register(store, &format!("transformer.stage{j}"), j, cfg, rng)?);
        }
        Ok(TransformerStem { blocks, fusion: cfg.fusion_mode, lifts })
    }

    fn fuse_first<'t>(&self, f_in: Var<'t>, f_c0: Var<'t>) -> Result<Var<'t>> {
        match self.fusion {
            FusionMode::Concat => aggregate_first(f_in, f_c0),
            FusionMode::Add => {
                let [n, h, w, c] = nhwc(&f_in, "additive fusion")?;
                f_in.add(f_c0)?.reshape(&[n, h * w, c])
            }
        }
    }

    fn fuse_next<'t>(&self, ctx: &Ctx<'t, '_>, j: usize, prev: Var<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
        match self.fusion {
            FusionMode::Concat => aggregate_next(prev, f_c),
            FusionMode::Add => {
                let [n, h, w, c] = nhwc(&f_c, "additive fusion")?;
                let up = unflatten_and_shuffle(prev, (h, w))?;
                let lifted = up.conv2d(ctx.p(self.lifts[j - 1]), None, 1, 0)?;
                lifted.add(f_c)?.reshape(&[n, h * w, c])
            }
        }
    }

    /// Runs every stage and returns each stage's output tokens; the last
    /// entry is the final `[N, H_p·W_p, C_last]` feature.
    pub fn forward_trace<'t>(&self, ctx: &Ctx<'t, '_>, f_in: Var<'t>, pyramid: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if pyramid.len() != self.blocks.len() {
            return Err(dim_err!("{} CNN features for {} transformer stages", pyramid.len(), self.blocks.len()));
        }
        let mut trace: Vec<Var<'t>> = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            let tokens = match trace.last() {
                None => self.fuse_first(f_in, pyramid[0])?,
                Some(&prev) => self.fuse_next(ctx, j, prev, pyramid[j])?,
            };
            trace.push(block.forward(ctx, tokens)?);
        }
        Ok(trace)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, f_in: Var<'t>, pyramid: &[Var<'t>]) -> Result<Var<'t>> {
        Ok(*self.forward_trace(ctx, f_in, pyramid)?.last().expect("at least one stage"))
    }
}
