//! Binary feed-forward classifier and its conjugate-gradient trainer.

mod io;
mod network;
mod train;

pub use io::{load_network, read_network, save_network, sidecar_path, write_network, ModelMetadata, MAGIC};
pub use network::{init_network, Network, Shape, OUTPUT_DIM};
pub use train::{
    loss, loss_and_gradient, split_by_building, train, Batch, BuildingSplit, TrainOptions, TrainOutcome,
    ValidationCheck,
};
