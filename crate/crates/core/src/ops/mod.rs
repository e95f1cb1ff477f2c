//! Differentiable operators recorded on a [`Tape`](crate::autodiff::Tape).

mod basic;
mod conv;
mod loss;
mod norm;
mod recurrent;

pub use basic::{sigmoid, Activation};
pub use conv::ConvGeom;
pub use loss::PROB_CLAMP;
pub use norm::{Mode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use recurrent::LstmWeights;
