//! Sequence ingestion: binary scans, pose files, synthetic scenes, and the
//! past/future sample slicing.

pub mod dataset;
pub mod poses;
pub mod scan;
pub mod synth;

pub use dataset::{Sample, ScanSource, SequenceDataset};
pub use poses::{read_poses, write_poses};
pub use scan::{read_scan_bin, write_scan_bin};
pub use synth::{make_synthetic_sequence, SceneSpec, SyntheticSequence};
