//! Learned projection from a selected representation into the retrieval space.

mod loss;
mod mining;
mod model;
mod train;
mod triplets;

pub use loss::{backward, triplet_loss, BatchGrad, Gradients, Triplet, DEFAULT_MARGIN};
pub use mining::{mine_hard_negatives, MinedNegatives, DEFAULT_HARD_NEGATIVE_FRACTION};
pub use model::{silu, ModelDims, ProjectionModel, DEFAULT_DROPOUT, MODEL_MAGIC};
pub use train::{train, Adam, TrainConfig, TrainReport};
pub use triplets::{build_triplets, resolve_triplets, TripletConfig, TripletRef, TypeSplit, DEFAULT_TRIPLETS_PER_TYPE};
