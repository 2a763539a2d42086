//! Volume files, checkpoints, normalization and the synthetic dataset.

pub mod checkpoint;
pub mod normalize;
pub mod synthetic;
pub mod volume;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use normalize::{crop_back, normalize, pad_to_multiple, PadRecord};
pub use synthetic::{generate_dataset, load_case, read_manifest, write_dataset, Manifest, Split, SyntheticCase};
pub use volume::{read_volume, write_volume, VolumeHeader, VolumeMeta};
