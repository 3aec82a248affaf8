//! Per-clip training records: reference video, foreground/background ray
//! features and loss masks, computed once and reused across steps.

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ors::{cast_rays, ors_project, rasterize_fgm_mask, FeatureSource};
use crate::scene::{load_scene, scene_files, split_fg_bg, SceneClip};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PreparedClip {
    pub clip: SceneClip,
    /// `[F, U, V, 3]`
    pub video: Tensor,
    /// `[F, U, V, N_sample]`
    pub ors_fg: Tensor,
    pub ors_bg: Tensor,
    /// `[F, U, V]` loss weights.
    pub mask: Tensor,
}

pub fn prepare_clip(clip: SceneClip, cfg: &Config) -> Result<PreparedClip> {
    clip.validate()?;
    let [u, v] = clip.image_size();
    let f = clip.frames.len();
    let n = cfg.ors.n_sample;
    let (mut fg, mut bg, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for frame in &clip.frames {
        let (gf, gb) = split_fg_bg(&frame.grid, &clip.categories)?;
        let rays = cast_rays(&frame.camera, cfg.ors.step, n)?;
        fg.extend(ors_project(&gf, &rays, &clip.categories, FeatureSource::Foreground).values.into_data());
        bg.extend(ors_project(&gb, &rays, &clip.categories, FeatureSource::Background).values.into_data());
        let m = rasterize_fgm_mask(&frame.boxes, &frame.camera, [u, v], cfg.ors.lambda_fg)?;
        mask.extend(m.weights.into_data());
    }
    Ok(PreparedClip {
        video: clip.video(),
        ors_fg: Tensor::new(vec![f, u, v, n], fg)?,
        ors_bg: Tensor::new(vec![f, u, v, n], bg)?,
        mask: Tensor::new(vec![f, u, v], mask)?,
        clip,
    })
}

/// Loads and prepares every scene file in `dir` (sorted by name).
pub fn load_dataset(dir: &Path, cfg: &Config) -> Result<Vec<PreparedClip>> {
    let files = scene_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid("dataset", format!("no scene files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| prepare_clip(load_scene(p)?, cfg))
        .collect()
}
