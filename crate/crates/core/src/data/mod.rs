//! Dataset registry, synthetic generation, on-disk format and augmentation.

pub mod augment;
pub mod manifest;
pub mod spec;
pub mod synthetic;

pub use augment::{augment, AugmentationConfig};
pub use manifest::{load_manifest, positive_rates, Dataset};
pub use spec::{DatasetId, DatasetSpec, SampleRecord, Split};
pub use synthetic::{generate_synthetic, SyntheticSpec};
