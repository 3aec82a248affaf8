use std::collections::BTreeMap;

use rand::Rng;

use super::{fgm_loss, forward_diffuse, make_schedule, predict_base, predict_noise, Model};
use crate::dataset::PreparedClip;
use crate::encoders::ClipConditions;
use crate::error::{Error, Result};
use crate::nn::{accumulate, scale_grads, Adam, Ctx, Trainable};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Batch-mean loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and of the last `window` losses.
    pub fn initial_and_final(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..w]), mean(&self.losses[self.losses.len() - w..])))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }
}

/// Trailing moving average with the given window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut acc = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            acc += v;
            if i >= w {
                acc -= values[i - w];
            }
            acc / (i + 1).min(w) as f64
        })
        .collect()
}

/// One clip's FGM loss and gradients with respect to the stage-1
/// parameters.
pub fn stage1_loss_and_grads(
    model: &Model,
    clip: &PreparedClip,
    t: usize,
    eps: &Tensor,
    drop_conditions: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let schedule = make_schedule(
        model.config.diffusion.steps,
        model.config.diffusion.beta_min,
        model.config.diffusion.beta_max,
    )?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, Trainable::Stage1);
    let conds = if drop_conditions {
        ClipConditions::null(&ctx, clip.clip.frames.len())?
    } else {
        ClipConditions::encode(&ctx, &clip.clip, &model.fourier()?)?
    };
    let zt = ctx.constant_owned(forward_diffuse(&clip.video, t, &schedule, eps)?)?;
    let eps_hat = predict_noise(&ctx, model, zt, t, &conds, &clip.ors_fg, &clip.ors_bg)?;
    let loss = fgm_loss(ctx.constant(eps)?, eps_hat, ctx.constant(&clip.mask)?)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), ctx.collect(&grads)))
}

/// One clip's loss for the base alone (text condition only) and its
/// gradients with respect to the base parameters.
pub fn base_loss_and_grads(
    model: &Model,
    clip: &PreparedClip,
    t: usize,
    eps: &Tensor,
    drop_conditions: bool,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let d = &model.config.diffusion;
    let schedule = make_schedule(d.steps, d.beta_min, d.beta_max)?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.params, Trainable::Base);
    let conds = if drop_conditions {
        ClipConditions::null(&ctx, clip.clip.frames.len())?
    } else {
        ClipConditions::encode(&ctx, &clip.clip, &model.fourier()?)?
    };
    let zt = ctx.constant_owned(forward_diffuse(&clip.video, t, &schedule, eps)?)?;
    let eps_hat = predict_base(&ctx, model, zt, t, &conds)?;
    let loss = fgm_loss(ctx.constant(eps)?, eps_hat, ctx.constant(&clip.mask)?)?;
    let grads = tape.backward(loss)?;
    Ok((loss.value().item(), ctx.collect(&grads)))
}

type LossFn = fn(&Model, &PreparedClip, usize, &Tensor, bool) -> Result<(f64, BTreeMap<String, Tensor>)>;

fn optimize(
    model: &mut Model,
    data: &[PreparedClip],
    steps: usize,
    label: &str,
    loss_fn: LossFn,
    observe: &mut dyn FnMut(usize, f64),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::invalid("training", "the dataset is empty"));
    }
    let cfg = model.config.clone();
    let total = cfg.diffusion.steps;
    let mut rng = rng::derive(cfg.seed, label);
    let mut opt = Adam::new(cfg.train.lr);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut grads = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.train.batch {
            let clip = &data[rng.random_range(0..data.len())];
            let t = rng.random_range(1..=total);
            let eps = rng::normal_tensor(&mut rng, clip.video.shape().to_vec(), 1.0);
            let drop = rng.random::<f64>() < cfg.diffusion.cond_dropout;
            let (loss, g) = loss_fn(model, clip, t, &eps, drop)?;
            loss_sum += loss;
            accumulate(&mut grads, g);
        }
        scale_grads(&mut grads, 1.0 / cfg.train.batch as f64);
        opt.step(&mut model.params, &grads, 1.0)?;
        let loss = loss_sum / cfg.train.batch as f64;
        losses.push(loss);
        observe(step + 1, loss);
    }
    Ok(TrainReport { losses })
}

/// Fits the base denoiser (text condition only) for `train.base_steps`
/// steps, then re-copies it into both branches. Stands in for starting from
/// a pretrained backbone; afterwards the base stays frozen.
pub fn pretrain_base(
    model: &mut Model,
    data: &[PreparedClip],
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let steps = model.config.train.base_steps;
    let report = optimize(model, data, steps, "base", base_loss_and_grads, &mut observe)?;
    model.sync_branches();
    Ok(report)
}

/// Stage-1 optimization of encoders, fusion and branches (base frozen).
/// `observe(step, loss)` is called after every optimizer step.
pub fn train_stage1(
    model: &mut Model,
    data: &[PreparedClip],
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    let steps = model.config.train.steps;
    optimize(model, data, steps, "stage1", stage1_loss_and_grads, &mut observe)
}
