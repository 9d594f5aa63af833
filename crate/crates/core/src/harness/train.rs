//! The training loop: random crops, forward/backward, Adam, cosine decay.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::image_io::{list_images, load_grayscale};
use crate::harness::optim::Adam;
use crate::harness::schedule::CosineSchedule;
use crate::pipeline::CsFormer;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            crop_size: 128,
            batch_size: 8,
            iterations: 50_000,
            lr_start: 2e-4,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.lr_start, self.lr_end, self.iterations)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.batch_size == 0 {
            return Err(Error::Config("crop size and batch size must be positive".into()));
        }
        if !(self.lr_start >= self.lr_end && self.lr_end >= 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start {} >= lr_end {} >= 0",
                self.lr_start, self.lr_end
            )));
        }
        Ok(())
    }
}

/// Every readable image in `dir` as `[H, W, 1]`.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    list_images(dir)?.iter().map(load_grayscale).collect()
}

pub struct Trainer {
    pub model: CsFormer,
    pub optimizer: Adam,
    config: TrainConfig,
    corpus: Vec<Tensor>,
    rng: ChaCha8Rng,
    iteration: u64,
}

impl Trainer {
    /// Images smaller than the crop are dropped; an empty result is a
    /// configuration error.
    pub fn new(model: CsFormer, config: TrainConfig, corpus: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let c = config.crop_size;
        let corpus: Vec<Tensor> = corpus.into_iter().filter(|t| t.shape()[0] >= c && t.shape()[1] >= c).collect();
        if corpus.is_empty() {
            return Err(Error::Config(format!("training corpus has no image of at least {c}x{c}")));
        }
        let m = &config;
        let optimizer = Adam::new(model.store(), m.beta1, m.beta2, m.adam_eps);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, optimizer, config, corpus, rng, iteration: 0 })
    }

    /// Continues from a checkpoint, restoring optimizer moments when present.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig, corpus: Vec<Tensor>) -> Result<Self> {
        let mut t = Trainer::new(ckpt.to_model()?, config, corpus)?;
        if let Some(adam) = &ckpt.optimizer {
            t.optimizer = adam.clone();
        }
        t.iteration = ckpt.iteration;
        t.rng = ChaCha8Rng::seed_from_u64(t.config.seed ^ ckpt.iteration.rotate_left(32));
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// A batch of random crops `[batch, crop, crop, 1]`.
    pub fn sample_batch(&mut self) -> Tensor {
        let (c, b) = (self.config.crop_size, self.config.batch_size);
        let mut data = Vec::with_capacity(b * c * c);
        for _ in 0..b {
            let img = &self.corpus[self.rng.random_range(0..self.corpus.len())];
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let top = self.rng.random_range(0..=h - c);
            let left = self.rng.random_range(0..=w - c);
            for y in top..top + c {
                data.extend_from_slice(&img.data()[y * w + left..y * w + left + c]);
            }
        }
        Tensor::new(&[b, c, c, 1], data).expect("crop extents")
    }

    /// One optimisation step; returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let lr = self.config.schedule().lr(self.iteration);
        let batch = self.sample_batch();
        let (loss, grads, updates) = self.model.loss_and_grads(&batch)?;
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            let name = self.model.store().params().nth(pos).map(|(n, _)| n.to_string()).unwrap_or_default();
            return Err(Error::Numeric { stage: format!("gradient of {name}") });
        }
        self.optimizer.update(self.model.store_mut(), &grads, lr)?;
        self.model.apply_buffer_updates(updates);
        self.iteration += 1;
        Ok(loss)
    }

    /// Trains until `iterations`; `on_step` sees the trainer after every step
    /// along with that step's loss.
    pub fn run(&mut self, mut on_step: impl FnMut(&Trainer, f64) -> Result<()>) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        while !self.is_done() {
            let loss = self.step()?;
            losses.push(loss);
            on_step(self, loss)?;
        }
        Ok(losses)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.iteration, Some(&self.optimizer))
    }
}
