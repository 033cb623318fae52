//! Noise schedule, forward noising, and the deterministic conditional
//! reverse loop. Frame 0 of every volume is the noise-free condition: it is
//! never noised and never written by a sampling step.

use crate::codec::LatentGrid;
use crate::config::ActionLabel;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Linear-beta schedule with cumulative products; `alpha_bar[0] == 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if timesteps == 0 {
            return Err(Error::invalid("noise_schedule", "timesteps must be positive"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(
                "noise_schedule",
                format!("require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"),
            ));
        }
        let t = timesteps;
        let beta: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        for &b in &beta {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(NoiseSchedule { timesteps, beta, alpha_bar })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Descending timestep sequence for `steps` reverse steps.
    pub fn sample_timesteps(&self, steps: usize) -> Vec<usize> {
        (1..=steps).rev().map(|i| i * self.timesteps / steps).collect()
    }
}

/// Per-sequence latent stack `[M,C,h,w]` with the condition-frame contract.
#[derive(Debug, Clone)]
pub struct LatentVolume {
    pub data: Tensor,
    pub frame_0_is_condition: bool,
}

impl LatentVolume {
    pub fn new(data: Tensor, frame_0_is_condition: bool) -> Result<LatentVolume> {
        if data.shape.len() != 4 || data.shape[0] < 2 {
            return Err(Error::invalid(
                "latent_volume",
                format!("expected [M>=2,C,h,w], got {:?}", data.shape),
            ));
        }
        Ok(LatentVolume { data, frame_0_is_condition })
    }

    pub fn frames(&self) -> usize {
        self.data.shape[0]
    }

    fn frame_len(&self) -> usize {
        self.data.shape[1..].iter().product()
    }

    /// Frames `1..M` as an `[M-1,C,h,w]` tensor.
    pub fn future(&self) -> Tensor {
        let mut shape = self.data.shape.clone();
        shape[0] -= 1;
        Tensor::new(shape, self.data.data[self.frame_len()..].to_vec())
    }

    /// Frame 0 as `[C,h,w]`.
    pub fn condition(&self) -> Tensor {
        Tensor::new(self.data.shape[1..].to_vec(), self.data.data[..self.frame_len()].to_vec())
    }

    /// Replace frames `1..M`, leaving frame 0's storage untouched.
    pub fn set_future(&mut self, fut: &Tensor) {
        let flen = self.frame_len();
        assert_eq!(fut.numel(), self.data.numel() - flen);
        self.data.data[flen..].copy_from_slice(&fut.data);
    }
}

/// The closed-form noising kernel: `sqrt(ab) z0 + sqrt(1-ab) eps`.
pub fn mix(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let data = z0.data.iter().zip(&eps.data).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::new(z0.shape.clone(), data)
}

/// Noise frames `1..M` of `z0` to level `t`; frame 0 passes through untouched.
pub fn forward_noise(
    z0: &LatentVolume,
    schedule: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
) -> Result<LatentVolume> {
    if t < 1 || t > schedule.timesteps {
        return Err(Error::invalid("forward_noise", format!("t={t} outside 1..={}", schedule.timesteps)));
    }
    let fut = z0.future();
    if eps.shape != fut.shape {
        return Err(Error::ShapeMismatch { op: "forward_noise", lhs: eps.shape.clone(), rhs: fut.shape });
    }
    let mut out = z0.clone();
    out.set_future(&mix(&z0.future(), eps, schedule.alpha_bar(t)));
    Ok(out)
}

/// Condition latent in frame 0, `M-1` seeded standard-normal noise frames after it.
pub fn build_inference_volume(cond: &LatentGrid, m: usize, seed: u64) -> Result<LatentVolume> {
    if m < 2 {
        return Err(Error::invalid("build_inference_volume", "need at least 2 frames"));
    }
    let (c, h, w) = (cond.tensor.shape[0], cond.tensor.shape[1], cond.tensor.shape[2]);
    let mut rng = rng::stream(seed, "noise");
    let noise = Tensor::randn(&[(m - 1) * c * h * w], &mut rng);
    let mut data = Vec::with_capacity(m * c * h * w);
    data.extend_from_slice(&cond.tensor.data);
    data.extend_from_slice(&noise.data);
    LatentVolume::new(Tensor::new(vec![m, c, h, w], data), true)
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`; the endpoints return the
/// respective branch exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Tensor {
    if scale == 1.0 {
        return eps_cond.clone();
    }
    if scale == 0.0 {
        return eps_uncond.clone();
    }
    let data = eps_uncond
        .data
        .iter()
        .zip(&eps_cond.data)
        .map(|(&u, &c)| u + scale * (c - u))
        .collect();
    Tensor::new(eps_cond.shape.clone(), data)
}

/// One deterministic reverse step on the future-frames slab.
pub fn ddim_step(z_t: &Tensor, eps: &Tensor, ab_t: f64, ab_prev: f64) -> Tensor {
    let z0 = predict_clean(z_t, eps, ab_t);
    if ab_prev >= 1.0 {
        return z0;
    }
    mix(&z0, eps, ab_prev)
}

/// Recover the clean latents implied by an epsilon prediction at level `t`.
pub fn predict_clean(z_t: &Tensor, eps: &Tensor, ab_t: f64) -> Tensor {
    let a = ab_t.sqrt();
    let b = (1.0 - ab_t).sqrt();
    let data = z_t.data.iter().zip(&eps.data).map(|(&z, &e)| (z - b * e) / a).collect();
    Tensor::new(z_t.shape.clone(), data)
}

/// Anything that predicts per-frame noise (and optionally a depth latent)
/// from a noisy volume.
pub trait Denoiser {
    /// Returns eps for frames `1..M` (an `[M-1,C,h,w]` tensor) and, when a
    /// depth head is present, the depth latent volume `[M,C,h,w]`.
    fn denoise(&self, vol: &LatentVolume, t: usize, action: ActionLabel)
        -> Result<(Tensor, Option<Tensor>)>;

    /// Hook on the reconstructed clean future; identity unless the model
    /// feeds geometry back into the image latent.
    fn refine_clean(&self, z_x: &Tensor, _z_d: Option<&Tensor>, _is_final: bool) -> Result<Tensor> {
        Ok(z_x.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub guidance_scale: f64,
    pub steps: usize,
}

/// Clean-latent clamp applied inside the reverse loop. Latents are
/// standardized to unit scale, so this only engages when an undertrained
/// model would otherwise diverge geometrically across steps.
pub const CLEAN_LATENT_CLAMP: f64 = 10.0;

/// Rollout product: the clean image latents (frame 0 is the condition) and
/// the depth latents surfaced by the final step.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub volume: LatentVolume,
    pub depth_latents: Option<Tensor>,
}

/// Deterministic reverse trajectory over the whole future jointly.
pub fn denoise_loop(
    vol: &LatentVolume,
    model: &dyn Denoiser,
    schedule: &NoiseSchedule,
    action: ActionLabel,
    opts: &RolloutOptions,
) -> Result<Rollout> {
    if opts.steps == 0 || opts.steps > schedule.timesteps {
        return Err(Error::invalid(
            "denoise_loop",
            format!("steps must lie in 1..={}, got {}", schedule.timesteps, opts.steps),
        ));
    }
    let ts = schedule.sample_timesteps(opts.steps);
    let mut current = vol.clone();
    let mut final_depth = None;

    for (i, &t) in ts.iter().enumerate() {
        let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
        let (eps_cond, z_d) = model.denoise(&current, t, action)?;
        let eps = if opts.guidance_scale == 1.0 {
            eps_cond
        } else {
            let (eps_uncond, _) = model.denoise(&current, t, ActionLabel::Null)?;
            cfg_combine(&eps_uncond, &eps_cond, opts.guidance_scale)
        };
        let is_final = t_prev == 0;
        let z_t = current.future();
        let mut z0 = predict_clean(&z_t, &eps, schedule.alpha_bar(t));
        for v in &mut z0.data {
            *v = v.clamp(-CLEAN_LATENT_CLAMP, CLEAN_LATENT_CLAMP);
        }
        let z0 = model.refine_clean(&z0, z_d.as_ref(), is_final)?;
        if is_final {
            current.set_future(&z0);
            final_depth = z_d;
        } else {
            current.set_future(&mix(&z0, &eps, schedule.alpha_bar(t_prev)));
        }
    }
    Ok(Rollout { volume: current, depth_latents: final_depth })
}
