//! Dataset manifests, the split protocol, image decoding, augmentation and
//! batching.

mod augment;
mod batch;
mod image;
mod manifest;
mod split;

pub use augment::{augment, apply_augmentation, draw_params, AugmentParams, AugmentationConfig};
pub use batch::{load_subset, make_batches, Batch, Sample, Subset};
pub use image::{decode_bytes, decode_image, encode_png, resize_bilinear, save_png, sample_bilinear};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, GroundTruth, Record, Split};
pub use split::{assign_splits, DEFAULT_TEST_PER_GROUP, DEFAULT_VAL_FRACTION};
