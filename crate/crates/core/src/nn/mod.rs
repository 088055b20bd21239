//! Block-structured feed-forward networks: construction, forward traces,
//! backpropagation and training.

pub mod arch;
pub mod backward;
pub mod forward;
pub mod network;
pub mod train;

pub use arch::{prune_architecture, Architecture, Block, LayerPosition, Residual};
pub use backward::{apply_update, backward, input_gradient, loss_and_output_grad, Gradients, LayerGrad};
pub use forward::{batchnorm, forward, softmax, ActivationTrace, LayerInfo, LayerTrace, Mode, BN_EPSILON, BN_MOMENTUM};
pub use network::{build_network, delete_block, init_fully_conflicting, BatchNorm, DenseLayer, Network, Stage, UnitId};
pub use train::{accuracy, train_epoch, train_step, EpochStats, TrainConfig};
