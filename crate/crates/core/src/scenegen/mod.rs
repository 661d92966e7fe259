//! Procedural signs, backgrounds, and composited scenes with exact ground truth.

mod background;
mod compose;
mod dataset;
mod sign;

pub use background::{background_pool, render_background, Background, SCENE_SIZE};
pub use compose::{compose_scene, compose_with_tape, ComposeTape, Pose, SceneSample};
pub use dataset::{
    from_rgb8, generate_dataset, load_dataset, save_dataset, to_rgb8, DatasetIndex, IndexEntry,
    DATASET_SCHEMA,
};
pub use sign::{
    render_canonical_sign, silhouette_contains, silhouette_mask, CanonicalTexture, SignClass,
    NUM_CLASSES, TEXTURE_SIZE,
};
