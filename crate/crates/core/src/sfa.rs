//! Semantic fusion attention over ray-feature tokens (residual self-attention,
//! tanh-gated attention with spatial conditions, text-conditioned deformable
//! sampling) and the temporal / spatio-temporal attention used for video.
//!
//! Token tensors are `[B, N, d]`; single sequences use `B = 1`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::rng::Prng;
use crate::tensor::{Tensor, Var};

/// Scaled dot-product self-attention without residual.
pub fn self_attention<'t>(ctx: &Ctx<'t, '_>, prefix: &str, tokens: Var<'t>) -> Result<Var<'t>> {
    ctx.attention(prefix, tokens, tokens)
}

/// `V + SelfAttn(V)`
pub fn sfa_stage1<'t>(ctx: &Ctx<'t, '_>, prefix: &str, v: Var<'t>) -> Result<Var<'t>> {
    Ok(v.add(self_attention(ctx, &format!("{prefix}.self"), v)?)?)
}

/// `V₁ + tanh(γ) · SelfAttn([V₁ ; c])` restricted to the visual positions.
pub fn gated_self_attention<'t>(
    ctx: &Ctx<'t, '_>,
    prefix: &str,
    v1: Var<'t>,
    spatial: Var<'t>,
) -> Result<Var<'t>> {
    let (vs, cs) = (v1.shape(), spatial.shape());
    if vs.len() != 3 || cs.len() != 3 || vs[0] != cs[0] || vs[2] != cs[2] {
        return Err(Error::invalid(
            "gated attention",
            format!("visual tokens {vs:?} and spatial tokens {cs:?} disagree"),
        ));
    }
    let joint = ctx.tape().concat(&[v1, spatial], 1)?;
    let attended = self_attention(ctx, &format!("{prefix}.gated"), joint)?.slice(1, 0, vs[1])?;
    let gate = ctx.p(&format!("{prefix}.gamma"))?.tanh()?.broadcast_to(&vs)?;
    Ok(v1.add(gate.mul(attended)?)?)
}

/// Deformable attention on a `[B, H, W, d]` token grid: per query, text
/// cross-attention gives a context, a linear head on `[q ; t_q]` predicts
/// `Kp` offsets and weights, and the weighted bilinear samples (through
/// `W_v`) are added to the query.
///
/// Offsets are in token cells around the query's own cell center.
pub fn deformable_text_attention<'t>(
    ctx: &Ctx<'t, '_>,
    prefix: &str,
    grid: Var<'t>,
    text: Var<'t>,
) -> Result<Var<'t>> {
    let gs = grid.shape();
    if gs.len() != 4 {
        return Err(Error::invalid("deformable attention", format!("grid shape {gs:?} is not [B, H, W, d]")));
    }
    let (b, h, w, d) = (gs[0], gs[1], gs[2], gs[3]);
    let n = h * w;
    let head = ctx.store().get(&format!("{prefix}.head.w"))?;
    let kp = head.shape()[1] / 3;
    let q = grid.reshape(vec![b, n, d])?;
    let context = ctx.attention(&format!("{prefix}.text"), q, text)?;
    let feats = ctx.tape().concat(&[q, context], 2)?;
    let pred = ctx.linear(&format!("{prefix}.head"), feats)?;
    let offsets = pred.slice(2, 0, 2 * kp)?.reshape(vec![b, n, kp, 2])?;
    let weights = pred.slice(2, 2 * kp, kp)?.softmax()?.reshape(vec![b, n, 1, kp])?;
    // cell centers: continuous position (u + 0.5, v + 0.5) is index (u, v)
    let reference = Tensor::from_fn(vec![b, n, kp, 2], |i| {
        let cell = (i / (2 * kp)) % n;
        if i % 2 == 0 {
            (cell / w) as f64
        } else {
            (cell % w) as f64
        }
    });
    let coords = ctx.constant_owned(reference)?.add(offsets)?;
    let mut sampled = Vec::with_capacity(b);
    for bi in 0..b {
        let g = grid.slice(0, bi, 1)?.reshape(vec![h, w, d])?;
        let c = coords.slice(0, bi, 1)?.reshape(vec![n, kp, 2])?;
        sampled.push(Var::bilinear_sample(g, c)?.reshape(vec![1, n, kp, d])?);
    }
    let sampled = ctx.tape().concat(&sampled, 0)?;
    let values = ctx.projection(&format!("{prefix}.value"), sampled)?;
    let mixed = weights.matmul(values)?.reshape(vec![b, h, w, d])?;
    Ok(grid.add(mixed)?)
}

/// Per spatial position, residual self-attention across time.
/// Input and output are `[F, N, d]`.
pub fn temporal_attention<'t>(ctx: &Ctx<'t, '_>, prefix: &str, frames: Var<'t>) -> Result<Var<'t>> {
    let by_position = frames.permute(&[1, 0, 2])?;
    let attended = self_attention(ctx, prefix, by_position)?.permute(&[1, 0, 2])?;
    Ok(frames.add(attended)?)
}

/// Frame `t` attends over `[frame 0 ; frame max(t−1, 0)]`, residual added.
pub fn st_attention<'t>(ctx: &Ctx<'t, '_>, prefix: &str, frames: Var<'t>) -> Result<Var<'t>> {
    let s = frames.shape();
    let (f, n, d) = (s[0], s[1], s[2]);
    let first = frames.slice(0, 0, 1)?.broadcast_to(&[f, n, d])?;
    let prev = if f == 1 {
        frames
    } else {
        ctx.tape().concat(&[frames.slice(0, 0, 1)?, frames.slice(0, 0, f - 1)?], 0)?
    };
    let keys = ctx.tape().concat(&[first, prev], 1)?;
    Ok(frames.add(ctx.attention(prefix, frames, keys)?)?)
}

/// Everything on one branch's fusion path.
pub fn init_sfa(store: &mut ParamStore, rng: &mut Prng, prefix: &str, m: &ModelConfig, n_sample: usize) {
    let d = m.d;
    let patch_in = m.ors_channels * m.patch * m.patch;
    store.init_linear(rng, &format!("{prefix}.ors_in"), n_sample, m.ors_channels, 1.0);
    store.init_linear(rng, &format!("{prefix}.embed"), patch_in, d, 1.0);
    store.init_attention(rng, &format!("{prefix}.self"), d);
    store.init_attention(rng, &format!("{prefix}.gated"), d);
    store.insert(format!("{prefix}.gamma"), Tensor::full(vec![1], m.gamma_init));
    store.init_attention(rng, &format!("{prefix}.deform.text"), d);
    store.init_linear(rng, &format!("{prefix}.deform.head"), 2 * d, 3 * m.deform_points, 0.1);
    store.init_normal(rng, &format!("{prefix}.deform.value"), &[d, d], 1.0 / (d as f64).sqrt());
}

/// Splits `[F, U, V, C]` into `[F, (U/p)·(V/p), p·p·C]` patch tokens; the
/// token index is row-major over the patch grid and each token is laid out
/// `(du, dv, c)`.
pub fn patchify<'t>(x: Var<'t>, p: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (f, u, v, c) = (s[0], s[1], s[2], s[3]);
    if u % p != 0 || v % p != 0 {
        return Err(Error::invalid("patchify", format!("{u}×{v} is not divisible by {p}")));
    }
    Ok(x
        .reshape(vec![f, u / p, p, v / p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![f, (u / p) * (v / p), p * p * c])?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<'t>(x: Var<'t>, p: usize, size: [usize; 2], c: usize) -> Result<Var<'t>> {
    let f = x.shape()[0];
    let (gu, gv) = (size[0] / p, size[1] / p);
    Ok(x
        .reshape(vec![f, gu, gv, p, p, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(vec![f, size[0], size[1], c])?)
}

/// Full fusion of one branch: project `[F, U, V, N]` ray features to
/// tokens, then stage 1, the gate and the deformable stage. Returns
/// `[F, tokens, d]`.
pub fn semantic_fusion<'t>(
    ctx: &Ctx<'t, '_>,
    prefix: &str,
    features: &Tensor,
    spatial: Var<'t>,
    text: Var<'t>,
    patch: usize,
) -> Result<Var<'t>> {
    let s = features.shape();
    let (f, u, v) = (s[0], s[1], s[2]);
    let raw = ctx.constant(features)?;
    let per_pixel = ctx.linear(&format!("{prefix}.ors_in"), raw)?;
    let tokens = ctx.linear(&format!("{prefix}.embed"), patchify(per_pixel, patch)?)?;
    let v1 = sfa_stage1(ctx, prefix, tokens)?;
    let v2 = gated_self_attention(ctx, prefix, v1, spatial)?;
    let d = v2.shape()[2];
    let grid = v2.reshape(vec![f, u / patch, v / patch, d])?;
    let out = deformable_text_attention(ctx, &format!("{prefix}.deform"), grid, text)?;
    Ok(out.reshape(vec![f, (u / patch) * (v / patch), d])?)
}
