//! Model and capture files, datasets (IDX and synthetic) and run configuration.

mod config;
mod dataset;
pub mod idx;
mod model_file;
mod synth;

pub use config::{
    AnalysisConfig, CaptureConfig, DataConfig, DataSource, MetricName, RoutingConfig, RunConfig,
};
pub use dataset::{channel_stats, Dataset};
pub use idx::load_idx;
pub use model_file::{
    capture_from_bytes, capture_to_bytes, load_capture, load_model, model_from_bytes, model_to_bytes,
    read_manifest, save_capture, save_model, ManifestEntry, FORMAT_VERSION, MAGIC,
};
pub use synth::{synth_dataset, synth_raw, synth_split, SynthConfig};
