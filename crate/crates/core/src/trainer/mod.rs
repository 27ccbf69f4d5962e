//! Supervised training: paired patch sampling, l1 objective, ADAM with a
//! step-halving learning-rate schedule, and bit-exact checkpointing.

pub mod adam;
pub mod checkpoint;

pub use adam::{adam_step, adam_update, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor};

use crate::datasets::PairedDataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::Rng;
use crate::tensor::tape::{Ops, Tape};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Patch side length on the network-input grid; the target patch is
    /// patch_size * scale.
    pub patch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub halve_every: u64,
    pub total_iters: u64,
    pub seed: u64,
    /// Emit a loss log line every this many iterations (0 = never).
    pub log_every: u64,
    /// Random horizontal flips of sampled pairs; off by default.
    pub augment_flips: bool,
}

impl TrainConfig {
    /// Desk-scale defaults sized for single-core CPU runs. The learning
    /// rate is 1e-3 so short runs converge; the full-size recipe remains
    /// expressible through [`TrainConfig::paper`].
    pub fn desk(total_iters: u64) -> Self {
        TrainConfig {
            batch_size: 4,
            patch_size: 16,
            lr0: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            halve_every: total_iters.max(1),
            total_iters,
            seed: 0,
            log_every: 0,
            augment_flips: false,
        }
    }

    /// The full-size recipe: batch 8, 96x96 patches, lr 1e-4 halved
    /// every 50k of 150k iterations.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 8,
            patch_size: 96,
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            halve_every: 50_000,
            total_iters: 150_000,
            seed: 0,
            log_every: 1000,
            augment_flips: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_patch(mut self, patch_size: usize) -> Self {
        self.patch_size = patch_size;
        self
    }

    pub fn with_batch(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config(
                "batch and patch sizes must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config("lr0 and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.halve_every == 0 || self.halve_every > self.total_iters.max(1) {
            return Err(Error::Config(
                "halve_every must be positive and <= total_iters".into(),
            ));
        }
        Ok(())
    }
}

/// lr0 * 0.5^floor(iter / halve_every): piecewise constant, halving at
/// every multiple of halve_every.
pub fn lr_at(iter: u64, config: &TrainConfig) -> f64 {
    config.lr0 * 0.5f64.powi((iter / config.halve_every) as i32)
}

/// Crop a (1,C,H,W) tensor.
fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let s = t.shape();
    debug_assert!(y0 + h <= s.h && x0 + w <= s.w);
    let out = Shape::new(s.n, s.c, h, w);
    Tensor::from_fn(out, |i| {
        let w_i = i % w;
        let h_i = (i / w) % h;
        let c_i = (i / (w * h)) % s.c;
        let n_i = i / (w * h * s.c);
        t.data()[s.idx(n_i, c_i, y0 + h_i, x0 + w_i)]
    })
}

fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    Tensor::from_fn(s, |i| {
        let x = i % s.w;
        t.data()[i - x + (s.w - 1 - x)]
    })
}

/// Pixel-aligned random patch pair: the input crop is patch_size square
/// at a uniform offset, the target crop sits at offset * scale with side
/// patch_size * scale.
pub fn sample_patch_pair(
    input: &Tensor<f32>,
    target: &Tensor<f32>,
    patch_size: usize,
    scale: usize,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let s = input.shape();
    if s.h < patch_size || s.w < patch_size {
        return Err(Error::Dataset(format!(
            "image {}x{} is smaller than the {patch_size} px patch",
            s.h, s.w
        )));
    }
    let t = target.shape();
    if t.h != s.h * scale || t.w != s.w * scale {
        return Err(Error::Dataset(format!(
            "target {}x{} is not input {}x{} times scale {scale}",
            t.h, t.w, s.h, s.w
        )));
    }
    let y0 = rng.below(s.h - patch_size + 1);
    let x0 = rng.below(s.w - patch_size + 1);
    let inp = crop(input, y0, x0, patch_size, patch_size);
    let tgt = crop(
        target,
        y0 * scale,
        x0 * scale,
        patch_size * scale,
        patch_size * scale,
    );
    Ok((inp, tgt))
}

/// Stack (1,C,h,w) tensors into a (B,C,h,w) batch.
fn stack(patches: &[Tensor<f32>]) -> Tensor<f32> {
    let s = patches[0].shape();
    let out = Shape::new(patches.len(), s.c, s.h, s.w);
    let mut data = Vec::with_capacity(out.numel());
    for p in patches {
        data.extend_from_slice(p.data());
    }
    Tensor::new(out, data).expect("stack shape")
}

/// Training state; checkpointable at any iteration boundary.
pub struct Trainer {
    model: Model<f32>,
    adam: AdamState,
    rng: Rng,
    iter: u64,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::zeros_like(&model);
        let rng = Rng::seed_from(config.seed);
        Ok(Trainer {
            model,
            adam,
            rng,
            iter: 0,
            config,
        })
    }

    /// Rebuild the exact training state saved in a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, adam) = restore_state(ck)?;
        Ok(Trainer {
            model,
            adam,
            rng: Rng::from_state(ck.rng_state),
            iter: ck.iteration,
            config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        let params = self.model.params();
        for (name, t) in &params {
            tensors.push(NamedTensor::from_tensor(format!("p:{name}"), t));
        }
        for (idx, (name, t)) in params.iter().enumerate() {
            tensors.push(NamedTensor {
                name: format!("m:{name}"),
                shape: t.shape(),
                data: self.adam.m[idx].clone(),
            });
            tensors.push(NamedTensor {
                name: format!("v:{name}"),
                shape: t.shape(),
                data: self.adam.v[idx].clone(),
            });
        }
        Checkpoint {
            model_config: self.model.config().clone(),
            iteration: self.iter,
            rng_state: self.rng.state(),
            tensors,
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iter
    }

    /// One iteration: sample a batch, forward, l1, backward, ADAM.
    /// On a non-finite loss the step aborts before the update, so the
    /// trainer still holds the last finite state.
    pub fn step(&mut self, data: &PairedDataset) -> Result<f32> {
        let mut inputs = Vec::with_capacity(self.config.batch_size);
        let mut targets = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pair = &data.pairs[self.rng.below(data.len())];
            let (mut pi, mut pt) = sample_patch_pair(
                &pair.input.pixels,
                &pair.target.pixels,
                self.config.patch_size,
                data.scale,
                &mut self.rng,
            )?;
            if self.config.augment_flips && self.rng.next_u64() & 1 == 1 {
                pi = hflip(&pi);
                pt = hflip(&pt);
            }
            inputs.push(pi);
            targets.push(pt);
        }
        let batch_in = stack(&inputs);
        let batch_tgt = stack(&targets);

        let mut tape = Tape::new();
        let pred = self.model.forward(&mut tape, &batch_in)?;
        let loss = tape.l1_loss(&pred, &batch_tgt)?;
        let loss_value = loss.scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                iteration: self.iter,
            });
        }
        let grads = tape.backward(&loss)?;
        adam_step(
            &mut self.model,
            &grads,
            &mut self.adam,
            self.iter,
            &self.config,
        )?;
        self.iter += 1;
        Ok(loss_value)
    }

    /// Run until `total_iters`, returning the loss of every executed
    /// iteration.
    pub fn run(&mut self, data: &PairedDataset) -> Result<Vec<f32>> {
        data.validate()?;
        if self.model.scale() != data.scale {
            return Err(Error::Config(format!(
                "model scale {} does not match dataset scale {}",
                self.model.scale(),
                data.scale
            )));
        }
        // fail fast, before any training side effects
        for pair in &data.pairs {
            let s = pair.input.pixels.shape();
            if s.h < self.config.patch_size || s.w < self.config.patch_size {
                return Err(Error::Dataset(format!(
                    "image {} ({}x{}) is smaller than the {} px patch",
                    pair.input.id, s.h, s.w, self.config.patch_size
                )));
            }
        }
        let mut history = Vec::new();
        while self.iter < self.config.total_iters {
            let loss = self.step(data)?;
            if self.config.log_every > 0 && self.iter.is_multiple_of(self.config.log_every) {
                eprintln!("iter {:>6}  l1 {loss:.6}", self.iter);
            }
            history.push(loss);
        }
        Ok(history)
    }
}

fn restore_state(ck: &Checkpoint) -> Result<(Model<f32>, AdamState)> {
    let mut model = Model::<f32>::build(&ck.model_config, 0)?;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, param) in model.params_mut() {
        let find = |prefix: &str| -> Result<&NamedTensor> {
            ck.tensor(&format!("{prefix}:{name}"))
                .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {prefix}:{name}")))
        };
        let p = find("p")?;
        if p.shape != param.shape() {
            return Err(Error::CheckpointFormat(format!(
                "tensor p:{name} has shape {} but the model expects {}",
                p.shape,
                param.shape()
            )));
        }
        *param = Tensor::new(p.shape, p.data.clone())?.with_requires_grad(true);
        m.push(find("m")?.data.clone());
        v.push(find("v")?.data.clone());
    }
    let expected = model.params().len() * 3;
    if ck.tensors.len() != expected {
        return Err(Error::CheckpointFormat(format!(
            "checkpoint holds {} tensors, model needs {expected}",
            ck.tensors.len()
        )));
    }
    Ok((model, AdamState { m, v }))
}

/// The trained model stored in a checkpoint (optimizer state dropped).
pub fn load_model(ck: &Checkpoint) -> Result<Model<f32>> {
    Ok(restore_state(ck)?.0)
}

/// Outcome of a full training run.
pub struct TrainRun {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub loss_history: Vec<f32>,
}

/// Train a model to `config.total_iters` and produce the final
/// checkpoint plus the per-iteration loss history.
pub fn train(model: Model<f32>, data: &PairedDataset, config: &TrainConfig) -> Result<TrainRun> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let loss_history = trainer.run(data)?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainRun {
        model: trainer.into_model(),
        checkpoint,
        loss_history,
    })
}
