//! The encoder-decoder segmentation network: architecture, weights, forward
//! and backward execution, tiling, base training and checkpoints.

mod checkpoint;
mod exec;
mod params;
mod spec;
mod tiling;
mod train;

pub use checkpoint::{spec_from_kv, Checkpoint, Provenance, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use exec::{backprop, run_layers, Backprop, FeatureState, Trainable};
pub use params::{ModelParams, ProbabilityMap};
pub use spec::{AxisGeometry, Geometry, LayerKind, LayerSpec, ModelSpec, Profile};
pub(crate) use tiling::crop;
pub use tiling::{argmax, predict_scene, ScenePrediction, TileGrid, TileId};
pub use train::{dataset_loss, prepare_dataset, train_base, EpochStats, TrainConfig, TrainOutcome, TrainingPatch};
