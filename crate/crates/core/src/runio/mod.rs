//! Run configuration, rendering, logs and checkpoints.

mod checkpoint;
mod config;
mod driver;
mod metrics;
mod render;

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
pub use config::{ConfigError, EmbedderConfig, EmbedderKind, RunConfig};
pub use driver::{checkpoint_filename, latest_checkpoint, make_embedder, Driver, DriverError};
pub use metrics::{
    append_json_line, read_metrics, read_summary, MetricsLog, SummaryRecord, ANALYSIS_FILE,
    METRICS_FILE, SUMMARY_FILE,
};
pub use render::{
    contact_sheet, export_frames, frame_filename, frame_from_image, palette, render_frame,
    save_png, ENV_COLOR,
};
