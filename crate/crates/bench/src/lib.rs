//! Fixtures shared by the criterion benches.

use occgen_core::config::Config;
use occgen_core::dataset::{prepare_clip, PreparedClip};
use occgen_core::diffusion::Model;
use occgen_core::scene::{generate_synthetic_scene, CategoryTables};

/// Default-sized config and model with one prepared clip.
pub fn fixture(seed: u64) -> (Model, PreparedClip) {
    let cfg = Config::default();
    let clip = generate_synthetic_scene(seed, &cfg.scene).expect("default scene spec is valid");
    let prepared = prepare_clip(clip, &cfg).expect("generated clips are valid");
    let model = Model::init(&cfg, &CategoryTables::default()).expect("default config is valid");
    (model, prepared)
}
