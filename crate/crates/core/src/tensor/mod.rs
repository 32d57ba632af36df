//! Dense vectors, fully connected networks and their optimizers.
//!
//! Everything here is a pure function of caller-owned data.

mod layer;
pub mod linalg;
mod mlp;
mod optim;
mod vector;

pub use layer::{softmax, Activation, DenseLayer};
pub use mlp::{LayerGrads, Mlp, MlpGrads, Trace};
pub use optim::{Optimizer, OptimizerKind};
pub use vector::{axpy, cosine, dot, l2_dist, norm, Vector};

pub(crate) use vector::squared_dist;
