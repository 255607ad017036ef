//! File formats, synthetic data and report emission.

mod arch;
mod dataset;
mod report;
mod synth;

pub use arch::{load_arch, parse_json, read_json, save_arch, write_json};
pub use dataset::{Dataset, DATASET_VERSION};
pub use report::{
    memory_csv, read_report, sweep, sweep_csv, write_report, write_text, Envelope, SweepRow,
    REPORT_SCHEMA_VERSION,
};
pub use synth::{synth_dataset, SynthSpec, PATTERN_COUNT};
