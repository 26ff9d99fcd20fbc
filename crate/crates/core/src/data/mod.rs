//! Manifests, image files, batching and the synthetic dataset generator.

mod batch;
mod manifest;
mod ppm;
mod synthetic;

pub use batch::{batch_order, make_batches, Batch, Dataset};
pub use manifest::{load_manifest, parse_manifest, DatasetManifest, Sample, Split, Vocab, MANIFEST_HEADER};
pub use ppm::{decode as decode_image, encode as encode_image, read_image, resize, ResizeMode};
pub use synthetic::{
    generate_synthetic, write_synthetic, Band, CueRegion, IdentityInfo, SyntheticDataset, SyntheticImage,
    SyntheticSpec, MANIFEST_NAME, SPEC_ECHO_NAME,
};
