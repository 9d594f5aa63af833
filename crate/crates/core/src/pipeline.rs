//! Whole-image orchestration: patch split/merge, the dual-stem forward pass,
//! residual summation and the training loss.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::cnn_stem::CnnStem;
use crate::config::{LossTarget, ModelConfig};
use crate::error::{dim_err, Error, Result};
use crate::gradcheck::{grad_check_steps, Coordinates, GradCheckReport};
use crate::params::{apply_buffer_updates, Ctx, ParamStore};
use crate::projections::{InitializationHead, InputProjection, OutputProjection};
use crate::sampling::{Sampler, SamplingOperator};
use crate::tensor::Tensor;
use crate::transformer::TransformerStem;

pub use crate::params::Mode;

/// Patches evaluated per tape when reconstructing a whole image.
const EVAL_CHUNK: usize = 16;

/// Anchors along one axis: multiples of `stride` while the patch fits, plus
/// one final anchor flush with the far border.
fn axis_anchors(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut anchors: Vec<usize> = (0..).map(|k| k * stride).take_while(|a| a + patch <= len).collect();
    if anchors.last() != Some(&(len - patch)) {
        anchors.push(len - patch);
    }
    anchors
}

/// Mirror index for reflect padding (edge pixel not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Geometry of a patch decomposition of an `height×width` image.
///
/// Images smaller than the patch are reflect-padded up to it; the padded
/// canvas is `padded_height×padded_width`. `coverage` counts the patches
/// covering each canvas pixel and is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub patch: usize,
    pub stride: usize,
    /// `(top, left)` of every patch on the padded canvas, row-major.
    pub anchors: Vec<(usize, usize)>,
    pub coverage: Tensor,
}

impl PatchLayout {
    pub fn new(height: usize, width: usize, patch: usize, stride: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch == 0 || stride == 0 || stride > patch {
            return Err(Error::Usage(format!(
                "invalid patch layout: image {height}x{width}, patch {patch}, stride {stride}"
            )));
        }
        let (ph, pw) = (height.max(patch), width.max(patch));
        let rows = axis_anchors(ph, patch, stride);
        let cols = axis_anchors(pw, patch, stride);
        let anchors: Vec<_> = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
        let mut coverage = Tensor::zeros(&[ph, pw]);
        let cov = coverage.data_mut();
        for &(top, left) in &anchors {
            for y in top..top + patch {
                for x in left..left + patch {
                    cov[y * pw + x] += 1.0;
                }
            }
        }
        Ok(PatchLayout { height, width, padded_height: ph, padded_width: pw, patch, stride, anchors, coverage })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Source pixel (in the unpadded image) of every patch element, for a
    /// batch of `batch` images laid out `[batch, H, W, 1]`.
    fn split_index(&self, batch: usize) -> Vec<usize> {
        let p = self.patch;
        let mut index = Vec::with_capacity(batch * self.len() * p * p);
        for b in 0..batch {
            let base = b * self.height * self.width;
            for &(top, left) in &self.anchors {
                for y in top..top + p {
                    let sy = reflect(y, self.height);
                    for x in left..left + p {
                        index.push(base + sy * self.width + reflect(x, self.width));
                    }
                }
            }
        }
        index
    }

    /// Destination pixel and blending weight of every patch element. Canvas
    /// pixels outside the original image get weight zero.
    fn merge_map(&self, batch: usize) -> (Vec<usize>, Vec<f64>) {
        let p = self.patch;
        let n = batch * self.len() * p * p;
        let (mut index, mut weight) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for b in 0..batch {
            let base = b * self.height * self.width;
            for &(top, left) in &self.anchors {
                for y in top..top + p {
                    for x in left..left + p {
                        if y < self.height && x < self.width {
                            index.push(base + y * self.width + x);
                            weight.push(1.0 / self.coverage.data()[y * self.padded_width + x]);
                        } else {
                            index.push(0);
                            weight.push(0.0);
                        }
                    }
                }
            }
        }
        (index, weight)
    }

    fn patch_shape(&self, batch: usize) -> [usize; 4] {
        [batch * self.len(), self.patch, self.patch, 1]
    }

    /// Differentiable split of `[batch, H, W, 1]` images.
    pub fn split_var<'t>(&self, images: Var<'t>) -> Result<Var<'t>> {
        let batch = self.expect_images(&images.shape())?;
        images.gather(&self.patch_shape(batch), Rc::new(self.split_index(batch)))
    }

    /// Differentiable weighted-mean merge back to `[batch, H, W, 1]`.
    pub fn merge_var<'t>(&self, patches: Var<'t>) -> Result<Var<'t>> {
        let batch = self.expect_patches(&patches.shape())?;
        let (index, weight) = self.merge_map(batch);
        patches.scatter_weighted(&[batch, self.height, self.width, 1], Rc::new(index), Rc::new(weight))
    }

    fn expect_images(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [b, h, w, 1] if h == self.height && w == self.width => Ok(b),
            _ => Err(dim_err!("layout for {}x{} images got {shape:?}", self.height, self.width)),
        }
    }

    fn expect_patches(&self, shape: &[usize]) -> Result<usize> {
        let p = self.patch;
        match *shape {
            [n, h, w, 1] if h == p && w == p && n % self.len() == 0 => Ok(n / self.len()),
            _ => {
                Err(Error::Usage(format!("expected a multiple of {} patches of {p}x{p}x1, got {shape:?}", self.len())))
            }
        }
    }
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [h, w, 1] => image.reshape(&[1, h, w, 1]),
        [_, _, _, 1] => Ok(image.clone()),
        ref s => Err(dim_err!("expected an [H, W, 1] or [N, H, W, 1] image, got {s:?}")),
    }
}

/// Cuts `image` (`[H, W, 1]` or `[N, H, W, 1]`) into patches
/// `[N·count, H_p, W_p, 1]`.
pub fn split_patches(image: &Tensor, patch: usize, stride: usize) -> Result<(Tensor, PatchLayout)> {
    let batched = as_batch(image)?;
    let [b, h, w, _] = *batched.shape() else { unreachable!() };
    let layout = PatchLayout::new(h, w, patch, stride)?;
    let data = layout.split_index(b).iter().map(|&i| batched.data()[i]).collect();
    Ok((Tensor::from_parts(layout.patch_shape(b).to_vec(), data), layout))
}

/// Mean of overlapping patch contributions, cropped to the original extent.
/// Returns `[H, W, 1]` for a single image and `[N, H, W, 1]` otherwise.
pub fn merge_patches(patches: &Tensor, layout: &PatchLayout) -> Result<Tensor> {
    let batch = layout.expect_patches(patches.shape())?;
    let (index, _) = layout.merge_map(batch);
    let (h, w, pw) = (layout.height, layout.width, layout.padded_width);
    let mut sum = vec![0.0; batch * h * w];
    let p = layout.patch;
    for (k, (&i, &v)) in index.iter().zip(patches.data()).enumerate() {
        let (y, x) = (k / p % p, k % p);
        let (top, left) = layout.anchors[k / (p * p) % layout.len()];
        if top + y < h && left + x < w {
            sum[i] += v;
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pix = i % (h * w);
            s / layout.coverage.data()[(pix / w) * pw + pix % w]
        })
        .collect();
    let shape = if batch == 1 { vec![h, w, 1] } else { vec![batch, h, w, 1] };
    Ok(Tensor::from_parts(shape, data))
}

/// Mean squared error (mean over all elements).
pub fn mse_loss<'t>(output: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if output.shape() != target.shape() {
        return Err(Error::Usage(format!("loss shapes differ: {:?} vs {:?}", output.shape(), target.shape())));
    }
    output.mse(target)
}

fn finite<'t>(v: Var<'t>, stage: &str) -> Result<Var<'t>> {
    if v.value().is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric { stage: stage.to_string() })
    }
}

/// Intermediate tensors of one batched patch forward pass.
pub struct PatchForward<'t> {
    pub measurements: Var<'t>,
    pub initial: Var<'t>,
    pub input_feature: Var<'t>,
    pub cnn_pyramid: Vec<Var<'t>>,
    pub transformer_trace: Vec<Var<'t>>,
    pub residual: Var<'t>,
    pub output: Var<'t>,
}

/// Final clamped image plus the merged (unclamped) linear estimate and
/// network residual.
#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub image: Tensor,
    pub initial: Tensor,
    pub residual: Tensor,
}

/// The full network: sampling, linear initialisation, input projection,
/// CNN and transformer stems, output projection.
#[derive(Clone, Debug)]
pub struct CsFormer {
    config: ModelConfig,
    store: ParamStore,
    sampler: Sampler,
    init: InitializationHead,
    input_proj: InputProjection,
    cnn: CnnStem,
    transformer: TransformerStem,
    output_proj: OutputProjection,
}

impl CsFormer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Samples `Φ` with orthonormal scaled rows and initialises the
    /// initialisation head to its pseudo-inverse `B²·Φᵀ`.
    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let b = config.block_size;
        let op = SamplingOperator::random(config.ratio, b, rng)?;
        let pinv = op.phi_as_matrix().transpose2d().scale((b * b) as f64);
        let mut store = ParamStore::new();
        let sampler = Sampler::register(&mut store, op);
        let init = InitializationHead::register(&mut store, &pinv, b)?;
        let input_proj = InputProjection::register(&mut store, &config, rng);
        let cnn = CnnStem::register(&mut store, &config, rng);
        let transformer = TransformerStem::register(&mut store, &config, rng)?;
        let output_proj = OutputProjection::register(&mut store, config.output_width(), rng);
        Ok(CsFormer { config, store, sampler, init, input_proj, cnn, transformer, output_proj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sampling_operator(&self) -> SamplingOperator {
        self.sampler.operator(&self.store)
    }

    pub fn initialization_matrix(&self) -> Tensor {
        self.init.matrix(&self.store)
    }

    pub fn transformer(&self) -> &TransformerStem {
        &self.transformer
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Trainable scalars grouped by the leading component of their names.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.store.params() {
            let head = name.split('.').next().unwrap_or(name);
            match groups.iter_mut().find(|(g, _)| g == head) {
                Some(entry) => entry.1 += t.len(),
                None => groups.push((head.to_string(), t.len())),
            }
        }
        groups
    }

    /// Binds the model parameters to `tape`.
    pub fn bind<'t, 's>(&'s self, tape: &'t Tape, mode: Mode, trainable: bool) -> Ctx<'t, 's> {
        Ctx::new(tape, &self.store, mode, trainable)
    }

    /// Forward pass over a batch of patches `[N, H_p, W_p, 1]`.
    pub fn forward_patches<'t>(&self, ctx: &Ctx<'t, '_>, patches: Var<'t>) -> Result<PatchForward<'t>> {
        let p = self.config.patch_size;
        match *patches.shape() {
            [_, h, w, 1] if h == p && w == p => {}
            ref s => return Err(dim_err!("model expects [N, {p}, {p}, 1] patches, got {s:?}")),
        }
        let measurements = finite(self.sampler.forward(ctx, patches)?, "sampling")?;
        let initial = finite(self.init.forward(ctx, measurements)?, "initialization")?;
        let input_feature = finite(self.input_proj.forward(ctx, measurements)?, "input projection")?;
        let cnn_pyramid = self.cnn.forward(ctx, input_feature)?;
        for (i, f) in cnn_pyramid.iter().enumerate() {
            finite(*f, &format!("cnn stage {i}"))?;
        }
        let transformer_trace = self.transformer.forward_trace(ctx, input_feature, &cnn_pyramid)?;
        for (j, f) in transformer_trace.iter().enumerate() {
            finite(*f, &format!("transformer stage {j}"))?;
        }
        let last = *transformer_trace.last().expect("at least one stage");
        let n = last.shape()[0];
        let feature = last.reshape(&[n, p, p, self.config.output_width()])?;
        let residual = finite(self.output_proj.forward(ctx, feature)?, "output projection")?;
        let output = initial.add(residual)?;
        Ok(PatchForward { measurements, initial, input_feature, cnn_pyramid, transformer_trace, residual, output })
    }

    /// Training objective on ground-truth crops `[N, H, W, 1]`, split into
    /// non-overlapping patches (stride `H_p`). The loss is measured on the
    /// merged image or on the patches according to `loss_target`.
    pub fn training_loss<'t>(&self, ctx: &Ctx<'t, '_>, crops: &Tensor) -> Result<Var<'t>> {
        let crops = as_batch(crops)?;
        let [_, h, w, _] = *crops.shape() else { unreachable!() };
        let p = self.config.patch_size;
        let layout = PatchLayout::new(h, w, p, p)?;
        let truth = ctx.tape().constant(crops);
        let patches = layout.split_var(truth)?;
        let out = self.forward_patches(ctx, patches)?.output;
        let loss = match self.config.loss_target {
            LossTarget::Image => mse_loss(layout.merge_var(out)?, truth)?,
            LossTarget::Patch => mse_loss(out, patches)?,
        };
        finite(loss, "loss")
    }

    /// Runs one forward/backward pass in training mode and returns the loss
    /// value, the gradients in parameter order and the running-statistic
    /// updates (not yet applied).
    pub fn loss_and_grads(&self, crops: &Tensor) -> Result<(f64, Vec<Tensor>, Vec<(crate::params::BufferId, Tensor)>)> {
        let tape = Tape::new();
        let ctx = self.bind(&tape, Mode::Train, true);
        let loss = self.training_loss(&ctx, crops)?;
        let value = loss.value().data()[0];
        let mut grads = tape.backward(loss)?;
        let g = ctx.vars().iter().map(|&v| grads.take(v)).collect();
        Ok((value, g, ctx.take_buffer_updates()))
    }

    /// Applies queued running-statistic updates.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(crate::params::BufferId, Tensor)>) {
        apply_buffer_updates(&mut self.store, updates);
    }

    /// Finite-difference check of the training loss on `crops` with respect
    /// to every parameter. Tensors that are exactly zero (biases, the
    /// position tables, the last output convolution) are first replaced by
    /// small random values so every path carries gradient. Steps 1e-5 and
    /// 1e-6 are tried per coordinate because the leaky ReLUs have kinks.
    pub fn grad_check(&self, crops: &Tensor, coords: Coordinates, seed: u64) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = self
            .store
            .values()
            .into_iter()
            .map(|p| if p.max_abs() == 0.0 { Tensor::randn(p.shape(), 0.05, &mut rng) } else { p })
            .collect();
        grad_check_steps(
            |tape, vars| {
                let ctx = Ctx::with_vars(tape, &self.store, vars.to_vec(), Mode::Train);
                self.training_loss(&ctx, crops)
            },
            &params,
            &[1e-5, 1e-6],
            coords,
        )
    }

    /// Eval-mode reconstruction of an `[H, W, 1]` image using overlapping
    /// patches at `eval_overlap_stride`, clamped to `[0, 1]`.
    pub fn reconstruct(&self, image: &Tensor) -> Result<ReconstructionResult> {
        self.reconstruct_with_stride(image, self.config.eval_overlap_stride)
    }

    pub fn reconstruct_with_stride(&self, image: &Tensor, stride: usize) -> Result<ReconstructionResult> {
        let (h, w) = match *image.shape() {
            [h, w, 1] => (h, w),
            ref s => return Err(dim_err!("reconstruct expects an [H, W, 1] image, got {s:?}")),
        };
        let p = self.config.patch_size;
        let (patches, layout) = split_patches(image, p, stride)?;
        let count = layout.len();
        let per = p * p;
        let (mut init, mut resid) = (Vec::with_capacity(count * per), Vec::with_capacity(count * per));
        for start in (0..count).step_by(EVAL_CHUNK) {
            let n = EVAL_CHUNK.min(count - start);
            let chunk = Tensor::from_parts(vec![n, p, p, 1], patches.data()[start * per..(start + n) * per].to_vec());
            let tape = Tape::new();
            let ctx = self.bind(&tape, Mode::Eval, false);
            let fwd = self.forward_patches(&ctx, tape.constant(chunk))?;
            init.extend_from_slice(fwd.initial.value().data());
            resid.extend_from_slice(fwd.residual.value().data());
        }
        let shape = [count, p, p, 1];
        let initial = merge_patches(&Tensor::from_parts(shape.to_vec(), init), &layout)?;
        let residual = merge_patches(&Tensor::from_parts(shape.to_vec(), resid), &layout)?;
        let image = initial.add(&residual)?.map(|v| v.clamp(0.0, 1.0));
        debug_assert_eq!(image.shape(), &[h, w, 1]);
        Ok(ReconstructionResult { image, initial, residual })
    }
}
