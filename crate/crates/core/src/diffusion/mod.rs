//! Noise schedule, forward diffusion, the foreground-weighted loss, guidance
//! and the deterministic sampler, plus the dual-branch denoiser and its
//! training loop.

mod model;
mod train;

pub use model::{eps_fn, generate, predict_base, predict_noise, Model, BRANCHES};
pub use train::{base_loss_and_grads, pretrain_base, smoothed, stage1_loss_and_grads, train_stage1, TrainReport};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Linear β ramp with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(
            "noise schedule",
            format!("need T ≥ 1 and 0 < β_min ≤ β_max < 1, got T={steps}, [{beta_min}, {beta_max}]"),
        ));
    }
    let mut betas = vec![0.0];
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let frac = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
        let b = beta_min + (beta_max - beta_min) * frac;
        betas.push(b);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid("timestep", format!("{t} exceeds T = {}", self.steps())));
        }
        Ok(())
    }

    /// `S + 1` evenly spaced timesteps from `T` down to 0.
    pub fn timesteps(&self, sample_steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if sample_steps == 0 || sample_steps > total {
            return Err(Error::invalid(
                "sampler",
                format!("sample steps {sample_steps} must lie in [1, {total}]"),
            ));
        }
        Ok((0..=sample_steps).rev().map(|k| k * total / sample_steps).collect())
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`
pub fn forward_diffuse(z0: &Tensor, t: usize, schedule: &NoiseSchedule, eps: &Tensor) -> Result<Tensor> {
    schedule.check(t)?;
    if z0.shape() != eps.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "forward_diffuse",
            lhs: z0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = z0.data().iter().zip(eps.data()).map(|(x, e)| sa * x + sn * e).collect();
    Ok(Tensor::new(z0.shape().to_vec(), data)?)
}

/// Mean of `m · (ε − ε̂)²`. The mask is broadcast over trailing channel
/// axes: `[U, V]` or `[F, U, V]` weights for `[F, U, V, C]` noise.
pub fn fgm_loss<'t>(eps: Var<'t>, eps_hat: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
    let (es, ms) = (eps.shape(), mask.shape());
    if es != eps_hat.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "fgm_loss",
            lhs: es,
            rhs: eps_hat.shape(),
        }
        .into());
    }
    let mask = if ms.len() < es.len() {
        let mut s = ms.clone();
        s.push(1);
        mask.reshape(s)?
    } else {
        mask
    };
    let weights = mask.broadcast_to(&es).map_err(|_| TensorError::ShapeMismatch {
        op: "fgm_loss",
        lhs: es.clone(),
        rhs: ms,
    })?;
    Ok(eps.sub(eps_hat)?.square()?.mul(weights)?.mean()?)
}

/// `ε̂_u + s·(ε̂_c − ε̂_u)`; the neutral scales return an operand unchanged.
pub fn cfg_combine<'t>(cond: Var<'t>, uncond: Var<'t>, scale: f64) -> Result<Var<'t>> {
    if scale == 1.0 {
        return Ok(cond);
    }
    if scale == 0.0 {
        return Ok(uncond);
    }
    Ok(uncond.add(cond.sub(uncond)?.scale(scale)?)?)
}

/// Deterministic step from `t` to `t_prev < t` through the predicted clean
/// latent.
pub fn ddim_step_to<'t>(
    z: Var<'t>,
    t: usize,
    t_prev: usize,
    eps_hat: Var<'t>,
    schedule: &NoiseSchedule,
) -> Result<Var<'t>> {
    schedule.check(t)?;
    if t == 0 || t_prev >= t {
        return Err(Error::invalid(
            "ddim step",
            format!("cannot step from t={t} to t={t_prev} (already denoised or not decreasing)"),
        ));
    }
    let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let z0_hat = z.sub(eps_hat.scale((1.0 - a).sqrt())?)?.scale(1.0 / a.sqrt())?;
    Ok(z0_hat.scale(ap.sqrt())?.add(eps_hat.scale((1.0 - ap).sqrt())?)?)
}

/// `z_t → z_{t−1}`
pub fn ddim_step<'t>(z: Var<'t>, t: usize, eps_hat: Var<'t>, schedule: &NoiseSchedule) -> Result<Var<'t>> {
    ddim_step_to(z, t, t.saturating_sub(1), eps_hat, schedule)
}

/// Seeded starting latent `√(1 − ᾱ_T)·ε`: the forward marginal at `T` of
/// a zero latent. With a short schedule `ᾱ_T` is far from 0 and unit noise
/// would overshoot the variance the denoiser was trained on.
pub fn initial_latent(shape: &[usize], schedule: &NoiseSchedule, seed: u64) -> Tensor {
    let std = (1.0 - schedule.alpha_bar(schedule.steps())).sqrt();
    rng::normal_tensor(&mut rng::derive(seed, "sample-start"), shape.to_vec(), std)
}

/// Noise prediction at timestep `t` on a given tape: conditional when the
/// flag is true.
pub type EpsFn<'a> = dyn for<'t> Fn(&'t Tape, Var<'t>, usize, bool) -> Result<Var<'t>> + 'a;

/// Guided prediction; skips the unconditional pass when guidance is neutral.
pub fn guided_eps<'t>(
    eps: impl Fn(Var<'t>, usize, bool) -> Result<Var<'t>>,
    z: Var<'t>,
    t: usize,
    cfg_scale: f64,
) -> Result<Var<'t>> {
    let cond = eps(z, t, true)?;
    if cfg_scale == 1.0 {
        return Ok(cond);
    }
    let uncond = eps(z, t, false)?;
    cfg_combine(cond, uncond, cfg_scale)
}

/// Deterministic guided sampling from a seeded `z_T` over an evenly spaced
/// `S`-subset of timesteps. Every step runs on its own tape.
pub fn sample(
    eps: &EpsFn<'_>,
    shape: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let ts = schedule.timesteps(steps)?;
    let mut z = initial_latent(shape, schedule, seed);
    for pair in ts.windows(2) {
        let tape = Tape::new();
        let zv = tape.constant_owned(z)?;
        let e = guided_eps(|z, t, c| eps(&tape, z, t, c), zv, pair[0], cfg_scale)?;
        z = (*ddim_step_to(zv, pair[0], pair[1], e, schedule)?.value()).clone();
    }
    Ok(z)
}

/// The same chain recorded on one tape so that gradients flow through every
/// step.
pub fn sample_on_tape<'t>(
    eps: &dyn Fn(Var<'t>, usize, bool) -> Result<Var<'t>>,
    tape: &'t Tape,
    shape: &[usize],
    schedule: &NoiseSchedule,
    steps: usize,
    cfg_scale: f64,
    seed: u64,
) -> Result<Var<'t>> {
    let ts = schedule.timesteps(steps)?;
    let mut z = tape.constant_owned(initial_latent(shape, schedule, seed))?;
    for pair in ts.windows(2) {
        let e = guided_eps(eps, z, pair[0], cfg_scale)?;
        z = ddim_step_to(z, pair[0], pair[1], e, schedule)?;
    }
    Ok(z)
}

impl NoiseSchedule {
    pub fn from_config(cfg: &crate::config::DiffusionConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_min, cfg.beta_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
    }

    #[test]
    fn timesteps_are_even_and_descending() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.timesteps(4).unwrap(), vec![100, 75, 50, 25, 0]);
        assert_eq!(s.timesteps(100).unwrap().len(), 101);
        assert!(s.timesteps(101).is_err());
    }
}
