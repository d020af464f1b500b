//! Optimization: the learning-rate schedule, AdamW, single steps and the
//! full training loop with checkpoints and resume.

mod config;
mod optim;
mod run;

pub use config::{lr_at, Mode, ModelShape, TrainConfig, CONFIG_KEYS};
pub use optim::{clip_global_norm, global_norm, optimizer_update, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{
    run_training, RunOptions, TrainLogRecord, TrainOutcome, BEST_CHECKPOINT, FINAL_CHECKPOINT, LAST_CHECKPOINT,
    LOG_FILE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, Noise};
use crate::numeric::{Graph, Tensor};
use crate::objective::{joint_loss, LossBreakdown, LossWeights};
use crate::scalar::Scalar;
use crate::textcodec::Batch;

const DROPOUT_SALT: u64 = 0x6472_6f70_6f75_7431;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_6531;

/// Generator for the dropout masks of step `step` (0-based).
pub fn dropout_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_SALT);
    rng.set_stream(step as u64);
    rng
}

/// Generator for the example order of epoch `epoch`.
pub fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    rng
}

/// Gradients of the joint loss with respect to every parameter, in
/// parameter order. Parameters the loss does not reach get zeros.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    weights: &LossWeights,
    noise: &mut Noise<'_>,
) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let loss = joint_loss(&mut g, &p, &model.config, batch, weights, noise)?;
    let mut grads = g.backward(loss.total)?;
    let out = p
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((out, loss.breakdown))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimization step: both forward passes, a single backward pass
/// through the joint loss, global-norm clipping and an AdamW update.
///
/// On a non-finite loss or gradient the model and optimizer state are left
/// untouched and the error names the offending term.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let weights = cfg.effective_weights();
    let mut noise = if model.config.dropout > 0.0 {
        Noise::On(rng)
    } else {
        Noise::Off
    };
    let (mut grads, loss) = compute_gradients(model, batch, &weights, &mut noise)?;
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm)?;
    optimizer_update(model.params.tensors_mut(), &grads, state, lr, cfg.weight_decay)?;
    Ok(StepReport { loss, grad_norm })
}
