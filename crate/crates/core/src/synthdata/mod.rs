//! Synthetic shape datasets, augmentation and dataset files.

pub mod augment;
pub mod io;
pub mod shapes;

pub use augment::{augment, augment_recorded, uniform_rotation, AppliedAugment, AugmentParams, AugmentPolicy};
pub use io::{
    build_dataset, load_dataset, load_manifest, load_split, read_record, save_dataset, write_record, DatasetConfig,
    DatasetManifest, ManifestEntry, Split,
};
pub use shapes::{generate_shape, generate_shape_with, ShapeClass, ShapeParams, NUM_CLASSES};
