//! Run configuration: every tunable default in one JSON-serializable tree,
//! validated field by field before any work starts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::SceneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub scene: SceneSpec,
    pub ors: OrsConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub metrics: MetricsConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrsConfig {
    /// Ray sample spacing, meters.
    pub step: f64,
    pub n_sample: usize,
    pub lambda_fg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    /// Embedding-table row width.
    pub d_cat: usize,
    pub fourier_frequencies: usize,
    pub fourier_base: f64,
    /// Latent pixels per token edge.
    pub patch: usize,
    /// Per-pixel channels after the ray-feature projection.
    pub ors_channels: usize,
    /// Sampling points per query in deformable attention.
    pub deform_points: usize,
    pub gamma_init: f64,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    /// Probability of replacing the conditions by null tokens in training.
    pub cond_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Base pretraining steps run before stage 1.
    pub base_steps: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Window of the moving average used to report loss reduction.
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub updates: usize,
    pub sample_steps: usize,
    pub cfg_scale: f64,
    pub lr: f64,
    pub clips_per_update: usize,
    pub rank: usize,
    pub scale: f64,
    pub extractor_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Foreground threshold on the red channel of generated frames.
    pub iou_threshold: f64,
    pub frame_extractor_seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            scene: SceneSpec::default(),
            ors: OrsConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl Default for OrsConfig {
    fn default() -> Self {
        Self {
            step: 0.2,
            n_sample: 32,
            lambda_fg: 1.0,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_cat: 32,
            fourier_frequencies: 8,
            fourier_base: 1.0,
            patch: 4,
            ors_channels: 4,
            deform_points: 4,
            gamma_init: 0.0,
            init_seed: 1234,
        }
    }
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            sample_steps: 20,
            cfg_scale: 2.0,
            cond_dropout: 0.1,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_steps: 1000,
            steps: 2000,
            batch: 4,
            lr: 1e-3,
            smoothing: 100,
        }
    }
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            updates: 300,
            sample_steps: 10,
            cfg_scale: 2.0,
            lr: 1e-4,
            clips_per_update: 1,
            rank: 4,
            scale: 1.0,
            extractor_seed: 99,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            frame_extractor_seed: 17,
        }
    }
}

fn check(ok: bool, field: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, msg))
    }
}

fn positive(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v > 0.0, field, format!("must be > 0, got {v}"))
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        check(s.grid_dims.iter().all(|&n| n >= 1), "scene.grid_dims", "extents must be ≥ 1")?;
        positive(s.voxel_size, "scene.voxel_size")?;
        check(s.frames >= 1, "scene.frames", "must be ≥ 1")?;
        positive(s.focal, "scene.focal")?;
        let m = &self.model;
        let [u, v] = s.image_size;
        check(
            m.patch >= 1 && u % (2 * m.patch) == 0 && v % (2 * m.patch) == 0,
            "scene.image_size",
            format!("{u}×{v} must be divisible by twice the patch size {}", m.patch),
        )?;
        check(u % 8 == 0 && v % 8 == 0, "scene.image_size", "extents must be multiples of 8")?;

        let o = &self.ors;
        positive(o.step, "ors.step")?;
        check(o.n_sample >= 1, "ors.n_sample", "must be ≥ 1")?;
        check(
            o.lambda_fg.is_finite() && o.lambda_fg >= 0.0,
            "ors.lambda_fg",
            format!("must be ≥ 0, got {}", o.lambda_fg),
        )?;

        check(m.d >= 1, "model.d", "must be ≥ 1")?;
        check(m.d_cat >= 1, "model.d_cat", "must be ≥ 1")?;
        check(m.fourier_frequencies >= 1, "model.fourier_frequencies", "must be ≥ 1")?;
        positive(m.fourier_base, "model.fourier_base")?;
        check(m.ors_channels >= 1, "model.ors_channels", "must be ≥ 1")?;
        check(m.deform_points >= 1, "model.deform_points", "must be ≥ 1")?;
        check(m.gamma_init.is_finite(), "model.gamma_init", "must be finite")?;

        let d = &self.diffusion;
        check(d.steps >= 1, "diffusion.steps", "must be ≥ 1")?;
        check(
            d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0,
            "diffusion.beta_min",
            format!("need 0 < β_min ≤ β_max < 1, got [{}, {}]", d.beta_min, d.beta_max),
        )?;
        check(
            d.sample_steps >= 1 && d.sample_steps <= d.steps,
            "diffusion.sample_steps",
            format!("must lie in [1, {}]", d.steps),
        )?;
        check(d.cfg_scale.is_finite(), "diffusion.cfg_scale", "must be finite")?;
        check(
            (0.0..=1.0).contains(&d.cond_dropout),
            "diffusion.cond_dropout",
            "must lie in [0, 1]",
        )?;

        let t = &self.train;
        check(t.batch >= 1, "train.batch", "must be ≥ 1")?;
        positive(t.lr, "train.lr")?;
        check(t.smoothing >= 1, "train.smoothing", "must be ≥ 1")?;

        let r = &self.reward;
        check(
            r.sample_steps >= 1 && r.sample_steps <= d.steps,
            "reward.sample_steps",
            format!("must lie in [1, {}]", d.steps),
        )?;
        check(r.cfg_scale.is_finite(), "reward.cfg_scale", "must be finite")?;
        positive(r.lr, "reward.lr")?;
        check(r.clips_per_update >= 1, "reward.clips_per_update", "must be ≥ 1")?;
        check(
            r.rank >= 1 && r.rank <= m.d,
            "reward.rank",
            format!("must lie in [1, d = {}]", m.d),
        )?;
        check(r.scale.is_finite(), "reward.scale", "must be finite")?;

        check(
            self.metrics.iou_threshold.is_finite(),
            "metrics.iou_threshold",
            "must be finite",
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn negative_lambda_names_the_field() {
        let mut c = Config::default();
        c.ors.lambda_fg = -1.0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("ors.lambda_fg"), "{e}");
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let c = Config::default();
        let back: Config = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(c, back);
        let partial: Config = serde_json::from_str(r#"{"seed": 3, "ors": {"lambda_fg": 2.0}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.ors.lambda_fg, 2.0);
        assert_eq!(partial.ors.step, 0.2);
        assert!(serde_json::from_str::<Config>(r#"{"bogus": 1}"#).is_err());
    }
}
