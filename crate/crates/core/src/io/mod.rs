//! Dataset ingestion, model files and run configuration.

mod config;
mod dataset;
mod format;

pub use config::{BenchSection, DataSection, DistillSection, ModelSection, RunConfig, TrainSection};
pub use dataset::{
    load_xyz_dataset, normalize_unit_sphere, parse_xyz_file, synth_dataset, PointCloudDataset, ShapeKind, Split,
    SynthSpec, MANIFEST,
};
pub use format::{
    load_checkpoint, load_model, model_size, read_bytes, save_checkpoint, save_model, unframe, write_bytes, FileKind,
    SizeBreakdown, FORMAT_VERSION, MAGIC,
};
