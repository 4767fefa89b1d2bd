//! The two-stream StyleNet model.

mod checkpoint;
mod config;
mod layers;
mod network;

pub use checkpoint::{config_path, load_store, read_tensors, store_entries, write_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AdjacencyMode, LayerSpec, ModelConfig, Variant, DEFAULT_DROPOUT, DEFAULT_FRAMES, FULL_LAYERS};
pub use layers::{
    compute_ahat, compute_c, embed_channels, global_average_pool, graph_product, nonlocal_width, spatial_nonlocal_d,
    temporal_nonlocal, two_stream_predict, AdaptiveGraph, ConvBn, Downsampler, Layer, Residual, SpatialNonLocal,
    SpatialUnit, Subset, TemporalNonLocal, TemporalUnit,
};
pub use network::{FusedLogits, Stream, StreamKind, StyleNet};
