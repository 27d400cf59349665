//! Minimal CPU convolutional network with deterministic training.
//!
//! Activations are `f64` in channel-major `C×H×W` layout. Convolutions are 3×3
//! with stride 1 and zero padding 1; pooling is 2×2 max with stride 2.

mod data;
mod network;
mod train;

pub use data::{load_cifar10, read_cifar10_batch, synth_dataset, Dataset, Split, SynthSpec, CIFAR_RECORD_BYTES};
pub use network::{backward, forward, Batch, LayerSpec, Network};
pub use train::{
    evaluate, freeze, log_to_csv, sgd_step, train, EvalRecord, TrainConfig, TrainOutcome, TrainStatus,
};
