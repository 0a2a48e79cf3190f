//! Screenshot understanding toolkit: frame deduplication, synthetic context
//! generation, split-hierarchy contrastive training and embedding evaluation
//! over a software → view → context label chain.

pub mod dataset;
pub mod eval;
pub mod fixture;
pub mod label;
pub mod loss;
pub mod model;
pub mod motion;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod train;

pub use dataset::{DatasetManifest, FrameRecord, Split};
pub use eval::{ami, evaluate, kmeans, knn_retrieve, MetricsReport};
pub use label::{ChainLabel, ContextValue, LabelRegistry, Level, LevelKey};
pub use loss::{shl_loss, supcon_loss, ContrastiveBatch, ShlConfig};
pub use model::{EmbeddingSet, Model, ModelConfig, PreprocessConfig};
pub use raster::ImageBuffer;
pub use synth::{AssetDb, Placement, SynthConfig};
pub use tensor::Matrix;
pub use train::{train, train_in_memory, TrainConfig};
