//! Checkpoint persistence and CSV reports.

mod checkpoint;
mod report;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_as, read_checkpoint_meta, save_checkpoint, save_checkpoint_with, AnyNetwork,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use report::{format_float, render_report, write_report, ReportKind, ReportRow};
pub(crate) use report::{header, opt};
