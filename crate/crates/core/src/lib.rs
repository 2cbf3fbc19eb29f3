//! Keyed block-wise negative/positive image transformation for protecting
//! image classifiers, with a batch dataset pipeline and a simulator for the
//! pairwise-swap key-estimation attack.
//!
//! A model fine-tuned on images transformed with a secret [`Key`] only
//! classifies well when its inputs are transformed with the same key.

pub mod attack;
pub mod codec;
pub mod key;
pub mod pipeline;
pub mod transform;

pub use key::{
    generate_key, hamming_distance, key_space, parse_key, random_incorrect_key, serialize_key, Key, KeyError,
    KeyFingerprint,
};
pub use transform::{
    negpos_transform, negpos_transform_with, split_blocks, transform_inverse, BlockGrid, CropMode, ImageTensor,
    TransformError,
};
