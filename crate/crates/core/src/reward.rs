//! Reward-guided fine-tuning: a frozen random 3-D convolution feature stack,
//! the feature-distance reward, low-rank adapters on attention projections,
//! and rollouts recorded end to end on one tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::dataset::PreparedClip;
use crate::diffusion::{generate, predict_noise, sample_on_tape, Model, NoiseSchedule};
use crate::encoders::ClipConditions;
use crate::error::{Error, Result};
use crate::nn::{Adam, Ctx, ParamStore, Trainable, GROUP_ADAPTERS};
use crate::rng::{self, Prng};
use crate::tensor::{Tape, Tensor, Var, GATHER_ZERO};

pub const FEATURE_WIDTH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
struct Conv3d {
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    c_in: usize,
    /// `[kf·ku·kv·c_in, c_out]`
    w: Tensor,
    b: Tensor,
}

impl Conv3d {
    fn new(rng: &mut Prng, kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3], c_in: usize, c_out: usize) -> Self {
        let fan_in = kernel.iter().product::<usize>() * c_in;
        Self {
            kernel,
            stride,
            pad,
            c_in,
            w: rng::normal_tensor(rng, vec![fan_in, c_out], 1.0 / (fan_in as f64).sqrt()),
            b: rng::normal_tensor(rng, vec![c_out], 0.1),
        }
    }

    fn out_dims(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = dims[a] + 2 * self.pad[a];
            if span < self.kernel[a] || !(span - self.kernel[a]).is_multiple_of(self.stride[a]) {
                return Err(Error::invalid(
                    "feature extractor",
                    format!("input extent {dims:?} does not tile the convolution"),
                ));
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// im2col gather indices for an input `[F, U, V, c_in]`.
    fn columns(&self, dims: [usize; 3], out: [usize; 3]) -> Rc<[usize]> {
        let [kf, ku, kv] = self.kernel;
        let mut idx = Vec::with_capacity(out.iter().product::<usize>() * kf * ku * kv * self.c_in);
        for of in 0..out[0] {
            for ou in 0..out[1] {
                for ov in 0..out[2] {
                    for a in 0..kf {
                        for b in 0..ku {
                            for c in 0..kv {
                                let p = [of * self.stride[0] + a, ou * self.stride[1] + b, ov * self.stride[2] + c];
                                let inside = (0..3).all(|k| p[k] >= self.pad[k] && p[k] - self.pad[k] < dims[k]);
                                for ch in 0..self.c_in {
                                    idx.push(if inside {
                                        (((p[0] - self.pad[0]) * dims[1] + p[1] - self.pad[1]) * dims[2] + p[2]
                                            - self.pad[2])
                                            * self.c_in
                                            + ch
                                    } else {
                                        GATHER_ZERO
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        idx.into()
    }

    fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let dims = [s[0], s[1], s[2]];
        let out = self.out_dims(dims)?;
        let rows: usize = out.iter().product();
        let width = self.w.shape()[0];
        let cols = x.gather(self.columns(dims, out), vec![rows, width])?;
        let tape = x.tape();
        let y = cols.matmul(tape.constant(&self.w)?)?;
        let y = y.add(tape.constant(&self.b)?.broadcast_to(&y.shape())?)?.tanh()?;
        let c_out = self.w.shape()[1];
        Ok(y.reshape(vec![out[0], out[1], out[2], c_out])?)
    }
}

/// Frozen seeded stack over `[F, U, V, 3]` clips: two strided 3-D
/// convolutions with tanh, global mean pooling, and a linear map to
/// [`FEATURE_WIDTH`] features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Conv3d>,
    head_w: Tensor,
    head_b: Tensor,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::derive(seed, "feature-extractor");
        let layers = vec![
            Conv3d::new(&mut r, [3, 4, 4], [1, 4, 4], [1, 0, 0], 3, 16),
            Conv3d::new(&mut r, [3, 2, 2], [1, 2, 2], [1, 0, 0], 16, 32),
        ];
        Self {
            layers,
            head_w: rng::normal_tensor(&mut r, vec![32, FEATURE_WIDTH], 1.0 / 32f64.sqrt()),
            head_b: Tensor::zeros(vec![FEATURE_WIDTH]),
        }
    }

    pub fn features<'t>(&self, clip: Var<'t>) -> Result<Var<'t>> {
        let s = clip.shape();
        if s.len() != 4 || s[3] != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) || s[0] == 0 {
            return Err(Error::invalid(
                "feature extractor",
                format!("clip shape {s:?} is not [F, U, V, 3] with U, V multiples of 8"),
            ));
        }
        let mut h = clip;
        for layer in &self.layers {
            h = layer.apply(h)?;
        }
        let hs = h.shape();
        let pooled = h.reshape(vec![hs[0] * hs[1] * hs[2], hs[3]])?.mean_axis(0)?.reshape(vec![1, hs[3]])?;
        let tape = clip.tape();
        let y = pooled.matmul(tape.constant(&self.head_w)?)?;
        Ok(y.add(tape.constant(&self.head_b)?.reshape(vec![1, FEATURE_WIDTH])?)?.reshape(vec![FEATURE_WIDTH])?)
    }

    /// Feature vector of a plain clip tensor.
    pub fn features_of(&self, clip: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let f = self.features(tape.constant(clip)?)?;
        let out = f.value().data().to_vec();
        Ok(out)
    }
}

/// `−‖a − b‖₂` of two feature vectors.
pub fn reward_from_features<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if a.shape() != b.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "reward",
            lhs: a.shape(),
            rhs: b.shape(),
        }
        .into());
    }
    Ok(a.sub(b)?.square()?.sum()?.sqrt()?.neg()?)
}

/// `R(x0, v) = −‖Φ(x0) − Φ(v)‖₂`
pub fn reward_i3d<'t>(x0: Var<'t>, reference: Var<'t>, extractor: &FeatureExtractor) -> Result<Var<'t>> {
    if x0.shape() != reference.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "reward",
            lhs: x0.shape(),
            rhs: reference.shape(),
        }
        .into());
    }
    reward_from_features(extractor.features(x0)?, extractor.features(reference)?)
}

/// `x·W + s·(x·Aᵀ)·Bᵀ` with `A: r×d_in`, `B: d_out×r` (row-vector
/// convention: the effective weight is `W + s·(B·A)ᵀ`).
pub fn adapted_projection<'t>(x: Var<'t>, w: Var<'t>, a: Var<'t>, b: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let (ws, as_, bs) = (w.shape(), a.shape(), b.shape());
    if as_.len() != 2 || bs.len() != 2 || as_[1] != ws[0] || bs[0] != ws[1] || as_[0] != bs[1] {
        return Err(Error::invalid(
            "adapter",
            format!("A {as_:?} / B {bs:?} do not fit projection {ws:?}"),
        ));
    }
    Ok(x.matmul(w)?.add(x.matmul_t(a)?.matmul_t(b)?.scale(scale)?)?)
}

/// Attention projections that receive adapters: every query/key/value/output
/// matrix of the branch encoders and of the base decoder.
pub fn adapter_targets(params: &ParamStore) -> Vec<String> {
    params
        .iter()
        .filter(|(name, t)| {
            let adapted_block = name.starts_with("branches.") || name.starts_with("base.dec.");
            let projection = [".q", ".k", ".v", ".o"].iter().any(|s| name.ends_with(s));
            adapted_block && projection && t.ndim() == 2
        })
        .map(|(name, _)| name.clone())
        .collect()
}

/// Adds `adapters.<target>.a` (`r×d_in`, Gaussian) and `.b` (`d_out×r`,
/// zero) for every target; existing adapters are kept.
pub fn init_adapters(params: &mut ParamStore, rank: usize, seed: u64) -> Result<()> {
    let mut r = rng::derive(seed, "adapters");
    for target in adapter_targets(params) {
        let shape = params.get(&target)?.shape().to_vec();
        let (d_in, d_out) = (shape[0], shape[1]);
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::invalid(
                "adapter",
                format!("rank {rank} must lie in [1, {}]", d_in.min(d_out)),
            ));
        }
        let a_name = format!("{GROUP_ADAPTERS}.{target}.a");
        if params.contains(&a_name) {
            continue;
        }
        params.init_normal(&mut r, &a_name, &[rank, d_in], 1.0 / (d_in as f64).sqrt());
        params.insert(format!("{GROUP_ADAPTERS}.{target}.b"), Tensor::zeros(vec![d_out, rank]));
    }
    Ok(())
}

/// A differentiable rollout: the generated clip and the parameter bindings
/// needed to read adapter adjoints after `backward`.
pub struct Rollout<'t, 's> {
    pub x0: Var<'t>,
    pub ctx: Ctx<'t, 's>,
}

/// Guided sampling with every step on `tape`; only adapters are tracked.
pub fn denoise_with_grad<'t, 's>(
    tape: &'t Tape,
    model: &'s Model,
    clip: &PreparedClip,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Rollout<'t, 's>> {
    let ctx = Ctx::new(tape, &model.params, Trainable::Adapters).with_adapters(model.config.reward.scale);
    let x0 = denoise_in(&ctx, model, clip, steps, cfg_scale, seed)?;
    Ok(Rollout { x0, ctx })
}

/// The rollout of [`denoise_with_grad`] under caller-supplied bindings.
pub fn denoise_in<'t>(
    ctx: &Ctx<'t, '_>,
    model: &Model,
    clip: &PreparedClip,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Var<'t>> {
    let schedule = NoiseSchedule::from_config(&model.config.diffusion)?;
    let cond = ClipConditions::encode(ctx, &clip.clip, &model.fourier()?)?;
    let null = ClipConditions::null(ctx, clip.clip.frames.len())?;
    let eps = |z: Var<'t>, t: usize, c: bool| {
        predict_noise(ctx, model, z, t, if c { &cond } else { &null }, &clip.ors_fg, &clip.ors_bg)
    };
    sample_on_tape(&eps, ctx.tape(), clip.video.shape(), &schedule, steps, cfg_scale, seed)
}

/// Reward of one rollout and its adapter adjoints.
pub fn reward_and_grads(
    model: &Model,
    clip: &PreparedClip,
    extractor: &FeatureExtractor,
    seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let cfg = &model.config.reward;
    let tape = Tape::new();
    let roll = denoise_with_grad(&tape, model, clip, cfg.sample_steps, cfg.cfg_scale, seed)?;
    let r = reward_i3d(roll.x0, tape.constant(&clip.video)?, extractor)?;
    let grads = tape.backward(r)?;
    Ok((r.value().item(), roll.ctx.collect(&grads)))
}

/// Mean reward of fixed-seed generations over `clips` (seed `i` for clip `i`
/// offset by `seed`).
pub fn evaluate_reward(model: &Model, clips: &[PreparedClip], extractor: &FeatureExtractor, seed: u64) -> Result<f64> {
    let cfg = &model.config.reward;
    let mut total = 0.0;
    for (i, clip) in clips.iter().enumerate() {
        let x0 = generate(model, clip, cfg.sample_steps, cfg.cfg_scale, seed + i as u64)?;
        total -= euclidean(&extractor.features_of(&x0)?, &extractor.features_of(&clip.video)?);
    }
    Ok(total / clips.len().max(1) as f64)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardReport {
    /// Mean rollout reward per update.
    pub rewards: Vec<f64>,
}

impl RewardReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,mean_reward\n");
        for (i, r) in self.rewards.iter().enumerate() {
            s.push_str(&format!("{},{r}\n", i + 1));
        }
        s
    }
}

/// Stage-2 ascent on the reward with respect to the adapters only.
pub fn train_stage2(
    model: &mut Model,
    data: &[PreparedClip],
    mut observe: impl FnMut(usize, f64),
) -> Result<RewardReport> {
    if data.is_empty() {
        return Err(Error::invalid("reward training", "the dataset is empty"));
    }
    let cfg = model.config.clone();
    init_adapters(&mut model.params, cfg.reward.rank, cfg.seed)?;
    let extractor = FeatureExtractor::new(cfg.reward.extractor_seed);
    let mut r = rng::derive(cfg.seed, "stage2");
    let mut opt = Adam::new(cfg.reward.lr);
    let mut rewards = Vec::with_capacity(cfg.reward.updates);
    for update in 0..cfg.reward.updates {
        let mut grads = BTreeMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.reward.clips_per_update {
            let clip = &data[r.random_range(0..data.len())];
            let seed = r.random::<u64>();
            let (reward, g) = reward_and_grads(model, clip, &extractor, seed)?;
            total += reward;
            crate::nn::accumulate(&mut grads, g);
        }
        let n = cfg.reward.clips_per_update as f64;
        crate::nn::scale_grads(&mut grads, 1.0 / n);
        // ascend the reward
        opt.step(&mut model.params, &grads, -1.0)?;
        rewards.push(total / n);
        observe(update + 1, total / n);
    }
    Ok(RewardReport { rewards })
}
