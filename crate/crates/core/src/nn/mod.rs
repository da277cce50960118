//! Neural building blocks with a verified-gradient contract.
//!
//! Every layer carries a hand-derived backward pass; the contract is that
//! analytic parameter gradients agree with central finite differences in
//! 64-bit mode (see [`gradcheck`]).

pub mod activation;
pub mod attention;
pub mod block;
pub mod gradcheck;
pub mod init;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod params;
pub mod softmax;

pub use attention::{AttentionRecord, MultiHeadAttention};
pub use block::{BlockCache, TransformerBlock};
pub use linear::Linear;
pub use loss::{accuracy, cross_entropy, cross_entropy_mixed, mse_loss, mse_loss_backward, MixedLabel};
pub use norm::LayerNorm;
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamMut, ParamRef, ParamSet};
pub use softmax::{softmax, softmax_rows};
