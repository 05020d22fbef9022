//! Costmap regressor: model, losses, hand-written gradients, Adam and the
//! training loop.

mod adam;
mod augment;
mod checkpoint;
mod loss;
mod model;
mod train;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use augment::{allowed_turns, apply_augmentation, augment, AugmentConfig, AugmentDraw};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use loss::{huber_loss, huber_point, huber_with_grad, smoothness_loss, smoothness_with_grad};
pub use model::{
    backward, forward, forward_traced, forward_without_image, ForwardTrace, ModelConfig,
    ModelParams, TENSOR_NAMES,
};
pub use train::{fit, fit_from, history_csv, loss_and_grads, LossReport, Sample, TrainConfig};

#[cfg(test)]
mod tests;
