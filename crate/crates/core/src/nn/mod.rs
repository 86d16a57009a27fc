//! Non-convolutional layers and losses, each with an explicit backward pass.

mod batchnorm;
mod dense;
mod dropout;
mod loss;
mod pool;

pub use batchnorm::{
    batch_norm_backward, batch_norm_forward, update_running, BatchNormCache, BatchNormConfig,
    BatchNormState, BatchStats, BnView, BnViewMut,
};
pub use dense::{dense, dense_backward};
pub use dropout::{dropout, dropout_backward};
pub use loss::{sigmoid_cross_entropy, softmax_cross_entropy};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, MaxPoolCache,
};

/// Whether a forward pass is part of training (batch statistics, dropout
/// active, running statistics updated) or inference (read-only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
