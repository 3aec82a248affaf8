use super::{sample, NoiseSchedule};
use crate::config::{Config, ModelConfig};
use crate::dataset::PreparedClip;
use crate::encoders::{fourier_embed, init_encoders, ClipConditions, FourierSpec};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore, Trainable};
use crate::rng;
use crate::scene::CategoryTables;
use crate::sfa::{init_sfa, patchify, semantic_fusion, st_attention, temporal_attention, unpatchify};
use crate::tensor::{Tape, Tensor, Var};

/// Frozen base denoiser, two trainable control branches and their
/// condition/fusion front ends, all in one named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: Config,
    pub tables: CategoryTables,
    pub params: ParamStore,
}

/// Keeps the untrained base prediction at roughly unit scale.
const BASE_OUT_GAIN: f64 = 0.2;

pub const BRANCHES: [&str; 2] = ["fg", "bg"];

/// Base encoder blocks that each branch copies.
const SHARED_BLOCKS: [&str; 6] = ["in", "time", "self", "st", "temporal", "mid"];

impl Model {
    pub fn init(config: &Config, tables: &CategoryTables) -> Result<Self> {
        config.validate()?;
        tables.validate()?;
        let m = &config.model;
        let seed = m.init_seed;
        let d = m.d;
        let patch_dim = m.patch * m.patch * 3;
        let time_dim = 2 * m.fourier_frequencies;
        let mut p = ParamStore::new();

        init_encoders(&mut p, &mut rng::derive(seed, "encoders"), m, tables)?;

        let r = &mut rng::derive(seed, "base");
        p.init_linear(r, "base.in", patch_dim, d, 1.0);
        p.init_linear(r, "base.time.0", time_dim, d, 1.0);
        p.init_linear(r, "base.time.1", d, d, 1.0);
        for block in ["text", "self", "st", "temporal", "dec"] {
            p.init_attention(r, &format!("base.{block}"), d);
        }
        for mlp in ["mid", "dec_mlp"] {
            p.init_linear(r, &format!("base.{mlp}.0"), d, d, 1.0);
            p.init_linear(r, &format!("base.{mlp}.1"), d, d, 1.0);
        }
        p.init_linear(r, "base.up", d, d, 1.0);
        p.init_linear(r, "base.out", d, patch_dim, BASE_OUT_GAIN);

        for branch in BRANCHES {
            init_sfa(
                &mut p,
                &mut rng::derive(seed, &format!("sfa.{branch}")),
                &format!("sfa.{branch}"),
                m,
                config.ors.n_sample,
            );
            let prefix = format!("branches.{branch}");
            copy_base_into(&mut p, &prefix);
            p.init_linear(&mut rng::derive(seed, &prefix), &format!("{prefix}.cond_in"), d, d, 1.0);
            p.init_zero_linear(&format!("{prefix}.zero_a"), d, d);
            p.init_zero_linear(&format!("{prefix}.zero_b"), d, d);
        }
        Ok(Self {
            config: config.clone(),
            tables: tables.clone(),
            params: p,
        })
    }

    /// Re-copies the base encoder into both branches (after the base has
    /// been pretrained). Injection layers are untouched.
    pub fn sync_branches(&mut self) {
        for branch in BRANCHES {
            copy_base_into(&mut self.params, &format!("branches.{branch}"));
        }
    }

    pub fn fourier(&self) -> Result<FourierSpec> {
        FourierSpec::from_model(&self.config.model)
    }

    /// Names of the zero-initialized residual injection layers.
    pub fn injection_params() -> Vec<String> {
        BRANCHES
            .iter()
            .flat_map(|b| {
                ["zero_a.w", "zero_a.b", "zero_b.w", "zero_b.b"]
                    .into_iter()
                    .map(move |s| format!("branches.{b}.{s}"))
            })
            .collect()
    }
}

fn copy_base_into(p: &mut ParamStore, prefix: &str) {
    for block in SHARED_BLOCKS {
        p.copy_prefix(&format!("base.{block}."), &format!("{prefix}.{block}."));
    }
    p.copy_prefix("base.text.", &format!("{prefix}.cond."));
}

fn time_features(m: &ModelConfig, t: usize, total: usize) -> Result<Tensor> {
    let spec = FourierSpec::from_model(m)?;
    let f = fourier_embed(&[t as f64 / total as f64], &spec);
    Ok(Tensor::new(vec![1, f.len()], f)?)
}

struct Levels<'t> {
    a: Var<'t>,
    b: Var<'t>,
}

fn pool<'t>(h: Var<'t>, grid: [usize; 2]) -> Result<Var<'t>> {
    let s = h.shape();
    let (f, d) = (s[0], s[2]);
    let [gu, gv] = grid;
    Ok(h
        .reshape(vec![f, gu / 2, 2, gv / 2, 2, d])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![f, (gu / 2) * (gv / 2), 4, d])?
        .mean_axis(2)?)
}

fn upsample<'t>(h: Var<'t>, grid: [usize; 2]) -> Result<Var<'t>> {
    let s = h.shape();
    let (f, d) = (s[0], s[2]);
    let [gu, gv] = grid;
    Ok(h
        .reshape(vec![f, gu / 2, 1, gv / 2, 1, d])?
        .broadcast_to(&[f, gu / 2, 2, gv / 2, 2, d])?
        .reshape(vec![f, gu * gv, d])?)
}

/// Shared encoder of base and branches: patch/time embedding, optional
/// fused-condition input, cross-attention to `context`, spatial, spatio-
/// temporal and temporal attention (level A), then pooling and an MLP
/// (level B).
#[allow(clippy::too_many_arguments)]
fn encoder<'t>(
    ctx: &Ctx<'t, '_>,
    prefix: &str,
    cross: &str,
    patches: Var<'t>,
    time: &Tensor,
    extra: Option<Var<'t>>,
    context: Var<'t>,
    grid: [usize; 2],
) -> Result<Levels<'t>> {
    let mut h = ctx.linear(&format!("{prefix}.in"), patches)?;
    let temb = ctx.mlp(&format!("{prefix}.time"), ctx.constant(time)?)?;
    h = h.add(temb.broadcast_to(&h.shape())?)?;
    if let Some(x) = extra {
        h = h.add(x)?;
    }
    h = h.add(ctx.attention(&format!("{prefix}.{cross}"), h, context)?)?;
    h = h.add(ctx.attention(&format!("{prefix}.self"), h, h)?)?;
    h = st_attention(ctx, &format!("{prefix}.st"), h)?;
    let a = temporal_attention(ctx, &format!("{prefix}.temporal"), h)?;
    let b = pool(a, grid)?;
    let b = b.add(ctx.mlp(&format!("{prefix}.mid"), b)?)?;
    Ok(Levels { a, b })
}

fn decoder<'t>(
    ctx: &Ctx<'t, '_>,
    m: &ModelConfig,
    levels: Levels<'t>,
    residual: Option<Levels<'t>>,
    grid: [usize; 2],
    size: [usize; 2],
) -> Result<Var<'t>> {
    let (mut a, mut b) = (levels.a, levels.b);
    if let Some(r) = residual {
        b = b.add(r.b)?;
        a = a.add(r.a)?;
    }
    let mut h = a.add(ctx.linear("base.up", upsample(b, grid)?)?)?;
    h = h.add(ctx.attention("base.dec", h, h)?)?;
    h = h.add(ctx.mlp("base.dec_mlp", h)?)?;
    let out = ctx.linear("base.out", h)?;
    unpatchify(out, m.patch, size, 3)
}

fn geometry(z: Var<'_>, m: &ModelConfig) -> Result<([usize; 2], [usize; 2])> {
    let s = z.shape();
    if s.len() != 4 || s[3] != 3 || !s[1].is_multiple_of(2 * m.patch) || !s[2].is_multiple_of(2 * m.patch) {
        return Err(Error::invalid(
            "denoiser input",
            format!("latent shape {s:?} is not [F, U, V, 3] with U, V divisible by {}", 2 * m.patch),
        ));
    }
    Ok(([s[1] / m.patch, s[2] / m.patch], [s[1], s[2]]))
}

/// Frozen base prediction `ε_θ(z_t, t, c_text)` with no branch residuals.
pub fn predict_base<'t>(
    ctx: &Ctx<'t, '_>,
    model: &Model,
    z: Var<'t>,
    t: usize,
    conds: &ClipConditions<'t>,
) -> Result<Var<'t>> {
    let m = &model.config.model;
    let (grid, size) = geometry(z, m)?;
    let time = time_features(m, t, model.config.diffusion.steps)?;
    let patches = patchify(z, m.patch)?;
    let base = encoder(ctx, "base", "text", patches, &time, None, conds.text, grid)?;
    decoder(ctx, m, base, None, grid, size)
}

/// Dual-branch prediction: each branch encodes `(z_t, t)` plus its fused
/// ray features and attends to its condition tokens; the zero-initialized
/// projections of both branches' levels are summed into the base decoder.
///
/// `ors_fg` / `ors_bg` are `[F, U, V, N]` ray-feature volumes.
pub fn predict_noise<'t>(
    ctx: &Ctx<'t, '_>,
    model: &Model,
    z: Var<'t>,
    t: usize,
    conds: &ClipConditions<'t>,
    ors_fg: &Tensor,
    ors_bg: &Tensor,
) -> Result<Var<'t>> {
    let m = &model.config.model;
    let (grid, size) = geometry(z, m)?;
    let d = m.d;
    for (name, c) in [("foreground", conds.fg), ("background", conds.bg)] {
        if c.shape().last() != Some(&d) {
            return Err(Error::invalid(
                "conditions",
                format!("{name} tokens {:?} do not have width d = {d}", c.shape()),
            ));
        }
    }
    let zs = z.shape();
    for v in [ors_fg, ors_bg] {
        if v.ndim() != 4 || v.shape()[..3] != zs[..3] {
            return Err(Error::invalid(
                "ray features",
                format!("volume {:?} does not match latent {:?}", v.shape(), zs),
            ));
        }
    }
    let time = time_features(m, t, model.config.diffusion.steps)?;
    let patches = patchify(z, m.patch)?;
    let base = encoder(ctx, "base", "text", patches, &time, None, conds.text, grid)?;

    let mut residual: Option<Levels<'t>> = None;
    for (branch, feats, spatial, cond) in [
        ("fg", ors_fg, conds.spatial_fg, conds.fg),
        ("bg", ors_bg, conds.spatial_bg, conds.bg),
    ] {
        let fused = semantic_fusion(ctx, &format!("sfa.{branch}"), feats, spatial, conds.text, m.patch)?;
        let prefix = format!("branches.{branch}");
        let extra = ctx.linear(&format!("{prefix}.cond_in"), fused)?;
        let lv = encoder(ctx, &prefix, "cond", patches, &time, Some(extra), cond, grid)?;
        let ra = ctx.linear(&format!("{prefix}.zero_a"), lv.a)?;
        let rb = ctx.linear(&format!("{prefix}.zero_b"), lv.b)?;
        residual = Some(match residual {
            None => Levels { a: ra, b: rb },
            Some(r) => Levels {
                a: r.a.add(ra)?,
                b: r.b.add(rb)?,
            },
        });
    }
    decoder(ctx, m, base, residual, grid, size)
}

/// Pins a closure to the higher-ranked noise-prediction signature.
pub fn eps_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, Var<'t>, usize, bool) -> Result<Var<'t>>,
{
    f
}

/// Guided sample for one prepared clip (identity decoder: the final latent
/// is the video). Low-rank adapters are applied when the model has them.
pub fn generate(model: &Model, clip: &PreparedClip, steps: usize, cfg_scale: f64, seed: u64) -> Result<Tensor> {
    let schedule = NoiseSchedule::from_config(&model.config.diffusion)?;
    let spec = model.fourier()?;
    let scale = model.config.reward.scale;
    let eps = eps_fn(|tape, z, t, cond| {
        let ctx = Ctx::new(tape, &model.params, Trainable::None).with_adapters(scale);
        let conds = if cond {
            ClipConditions::encode(&ctx, &clip.clip, &spec)?
        } else {
            ClipConditions::null(&ctx, clip.clip.frames.len())?
        };
        predict_noise(&ctx, model, z, t, &conds, &clip.ors_fg, &clip.ors_bg)
    });
    sample(&eps, clip.video.shape(), &schedule, steps, cfg_scale, seed)
}
