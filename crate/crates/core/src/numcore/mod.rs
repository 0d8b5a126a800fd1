//! Dense numeric layer: matrices, seeded random streams, a reverse-mode
//! tape, and the optimizer.

pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;

pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use ops::{affine, argmax, cross_entropy, gumbel_softmax_sample, softmax, GumbelSample};
pub use optim::{cosine_lr, sgd_momentum_step, OptimState};
pub use rng::Rng;
pub use tape::{Gradients, NodeId, ParamId, ParamSet, StSample, Tape};
