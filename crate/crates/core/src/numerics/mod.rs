//! Dense tensors, a define-by-run gradient tape, Adam and a seeded RNG.

mod adam;
mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_difference_check, gradient_pair, relative_error, GradientPair};
pub use graph::{Axis, Gradients, Graph, LeafKind, NodeId, Op};
pub use rng::SeededRng;
pub use tensor::{cosine, dot, l2_norm, Tensor};

/// Norm floor used by every L2 normalisation.
pub const NORM_EPS: f64 = 1e-12;
