//! The assembled world model: temporal UNet plus a depth path, its sampler
//! bridge, and the rollout / evaluation entry points used by training,
//! inference and the metrics suite.

use crate::codec::{Codec, DepthNorm, LatentGrid, Modality};
use crate::config::{ActionLabel, Config, DepthPath, TrainMode};
use crate::dataset::{Dataset, Split};
use crate::diffusion::{
    build_inference_volume, denoise_loop, Denoiser, LatentVolume, NoiseSchedule, Rollout,
    RolloutOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{self, DepthMetrics};
use crate::mli::{DepthStub, Mli};
use crate::params::{Binding, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};
use crate::unet::UNet;
use serde::{Deserialize, Serialize};

pub enum DepthPathImpl {
    Mli(Mli),
    Stub(DepthStub),
    /// Plain UNet, no depth branch at all.
    None,
}

pub struct WorldModel {
    pub config: Config,
    pub store: ParamStore,
    pub unet: UNet,
    pub depth: DepthPathImpl,
    pub schedule: NoiseSchedule,
}

impl WorldModel {
    pub fn new(config: &Config) -> Result<WorldModel> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = rng::stream(config.seed, "model_init");
        let unet = UNet::new(&mut store, &mut init, &config.model, config.codec.latent_channels);
        let depth = if !config.mli.enabled {
            DepthPathImpl::None
        } else {
            match config.mli.depth_path {
                DepthPath::SharedLatent => DepthPathImpl::Mli(Mli::new(
                    &mut store,
                    &mut init,
                    &config.mli,
                    &unet.channels,
                    config.codec.latent_channels,
                )),
                DepthPath::ConvStub => DepthPathImpl::Stub(DepthStub::new(
                    &mut store,
                    &mut init,
                    config.codec.latent_channels,
                    config.model.base_channels,
                )),
            }
        };
        let schedule = NoiseSchedule::linear(
            config.diffusion.timesteps,
            config.diffusion.beta_start,
            config.diffusion.beta_end,
        )?;
        Ok(WorldModel { config: config.clone(), store, unet, depth, schedule })
    }

    /// One assembled forward on an existing tape. Returns the full eps volume
    /// and the depth latent volume when a depth path exists.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vol: TensorId,
        t: usize,
        action: ActionLabel,
        detach_taps: bool,
    ) -> Result<(TensorId, Option<TensorId>)> {
        match &self.depth {
            DepthPathImpl::Mli(mli) => {
                let out = mli.assemble(tape, bind, &self.unet, vol, t, action, detach_taps)?;
                Ok((out.eps, Some(out.z_d)))
            }
            DepthPathImpl::Stub(stub) => {
                let (eps, _) = self.unet.forward(tape, bind, vol, t, action, None)?;
                // conventional path: depth from the denoised image latent
                let m = tape.shape(vol)[0];
                let eps_fut = tape.slice_frames(eps, 1, m - 1)?;
                let z_fut = tape.slice_frames(vol, 1, m - 1)?;
                let z_fut = if detach_taps { tape.detach(z_fut) } else { z_fut };
                let eps_in = if detach_taps { tape.detach(eps_fut) } else { eps_fut };
                let ab = self.schedule.alpha_bar(t);
                let z0_fut = predict_clean_on(tape, z_fut, eps_in, ab)?;
                let frame0 = tape.slice_frames(vol, 0, 1)?;
                let z0_vol = tape.concat_frames(&[frame0, z0_fut])?;
                let z_d = stub.forward(tape, bind, z0_vol)?;
                Ok((eps, Some(z_d)))
            }
            DepthPathImpl::None => {
                let (eps, _) = self.unet.forward(tape, bind, vol, t, action, None)?;
                Ok((eps, None))
            }
        }
    }

    /// Outside feedback on the clean future latents, when configured.
    pub fn refine_on(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z_x_fut: TensorId,
        z_d: Option<TensorId>,
    ) -> Result<TensorId> {
        match (&self.depth, z_d) {
            (DepthPathImpl::Mli(mli), Some(z_d)) if self.config.mli.outside => {
                let m = tape.shape(z_d)[0];
                let z_d_fut = tape.slice_frames(z_d, 1, m - 1)?;
                mli.apply_outside(tape, bind, z_x_fut, z_d_fut)
            }
            _ => Ok(z_x_fut),
        }
    }

    /// Loss coefficients `(c_x, c_d, c_ssi)` for a training mode.
    pub fn mode_coefficients(mode: TrainMode, w_depth: f64, lambda: f64) -> (f64, f64, f64) {
        match mode {
            TrainMode::ImageOnly => (1.0, 0.0, 0.0),
            TrainMode::DepthOnly => (0.0, w_depth, lambda),
            TrainMode::DetachGrad | TrainMode::Joint => (1.0, w_depth, lambda),
        }
    }
}

/// On-tape version of the clean-latent reconstruction.
pub fn predict_clean_on(tape: &mut Tape, z_t: TensorId, eps: TensorId, ab: f64) -> Result<TensorId> {
    let b = (1.0 - ab).sqrt();
    let scaled_eps = tape.scale(eps, b);
    let num = tape.sub(z_t, scaled_eps)?;
    Ok(tape.scale(num, 1.0 / ab.sqrt()))
}

/// Immutable sampler view over a model; implements the reverse-loop contract.
pub struct Sampler<'a> {
    pub model: &'a WorldModel,
    /// Use the EMA weights instead of the raw ones.
    pub store_override: Option<&'a ParamStore>,
}

impl Sampler<'_> {
    fn store(&self) -> &ParamStore {
        self.store_override.unwrap_or(&self.model.store)
    }
}

impl Denoiser for Sampler<'_> {
    fn denoise(&self, vol: &LatentVolume, t: usize, action: ActionLabel) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::no_grad();
        let bind = self.store().bind(&mut tape, false);
        let v = tape.constant(vol.data.clone());
        let (eps, z_d) = self.model.forward_on(&mut tape, &bind, v, t, action, false)?;
        let m = vol.frames();
        let eps_fut = tape.slice_frames(eps, 1, m - 1)?;
        Ok((tape.extract(eps_fut), z_d.map(|id| tape.extract(id))))
    }

    fn refine_clean(&self, z_x: &Tensor, z_d: Option<&Tensor>, is_final: bool) -> Result<Tensor> {
        let apply = match &self.model.depth {
            DepthPathImpl::Mli(_) => {
                self.model.config.mli.outside && (is_final || self.model.config.mli.outside_every_step)
            }
            _ => false,
        };
        if !apply || z_d.is_none() {
            return Ok(z_x.clone());
        }
        let mut tape = Tape::no_grad();
        let bind = self.store().bind(&mut tape, false);
        let zx = tape.constant(z_x.clone());
        let zd = tape.constant(z_d.unwrap().clone());
        let out = self.model.refine_on(&mut tape, &bind, zx, Some(zd))?;
        Ok(tape.extract(out))
    }
}

/// Decoded rollout: predicted future frames and normalized depth maps.
pub struct RolloutProducts {
    pub rollout: Rollout,
    /// `[3,H,W]` per future frame, clamped to [0,1].
    pub rgb: Vec<Tensor>,
    /// `[1,H,W]` per future frame in normalized depth space.
    pub depth01: Vec<Tensor>,
}

/// Encode a condition frame, run the reverse loop, and decode both streams.
pub fn rollout_from_frame(
    model: &WorldModel,
    codec: &Codec,
    store_override: Option<&ParamStore>,
    cond_rgb: &Tensor,
    action: ActionLabel,
    frames: usize,
    seed: u64,
    opts: &RolloutOptions,
) -> Result<RolloutProducts> {
    let cond = codec.encode_image(cond_rgb)?;
    let vol = build_inference_volume(&cond, frames, seed)?;
    let sampler = Sampler { model, store_override };
    let rollout = denoise_loop(&vol, &sampler, &model.schedule, action, opts)?;

    let mut rgb = Vec::with_capacity(frames - 1);
    let mut depth01 = Vec::with_capacity(frames - 1);
    let fut = rollout.volume.future();
    let (c, h, w) = (fut.shape[1], fut.shape[2], fut.shape[3]);
    let flen = c * h * w;
    for i in 0..frames - 1 {
        let grid = LatentGrid {
            tensor: Tensor::new(vec![c, h, w], fut.data[i * flen..(i + 1) * flen].to_vec()),
            modality: Modality::Image,
            norm: None,
        };
        let mut img = codec.decode_image(&grid)?;
        for v in &mut img.data {
            *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        }
        rgb.push(img);
    }
    if let Some(zd) = &rollout.depth_latents {
        for i in 1..frames {
            let grid = LatentGrid {
                tensor: Tensor::new(vec![c, h, w], zd.data[i * flen..(i + 1) * flen].to_vec()),
                modality: Modality::Depth,
                norm: None,
            };
            let mut d = codec.decode_depth(&grid)?;
            for v in &mut d.data {
                *v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.5 };
            }
            depth01.push(d);
        }
    }
    Ok(RolloutProducts { rollout, rgb, depth01 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Depth metrics per future frame offset (index 0 = first predicted frame).
    pub per_frame: Vec<DepthMetrics>,
    pub mean: DepthMetrics,
    /// Mean aligned absolute depth residual in normalized space, the
    /// training-time SSI residual measured on rollouts.
    pub mean_ssi: f64,
    /// Distance between generated and held-out real frame distributions.
    pub frechet: f64,
    /// AbsRel and deltas are raw ratios, not scaled by 1e2.
    pub units: String,
    pub sequences: usize,
}

/// Roll out every sequence of a split from its first frame and score the
/// predictions against the analytic ground truth of the same trajectory.
pub fn evaluate(
    model: &WorldModel,
    codec: &Codec,
    store_override: Option<&ParamStore>,
    dataset: &Dataset,
    split: Split,
    opts: &RolloutOptions,
    seed: u64,
) -> Result<EvalReport> {
    let indices = dataset.indices(split);
    if indices.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let m = dataset.manifest.frames;
    let mut per_frame_acc: Vec<Vec<DepthMetrics>> = vec![Vec::new(); m - 1];
    let mut ssi_acc = Vec::new();
    let mut gen_frames = Vec::new();
    let mut real_frames = Vec::new();

    for (k, &idx) in indices.iter().enumerate() {
        let seq = dataset.load_sequence(idx)?;
        let products = rollout_from_frame(
            model,
            codec,
            store_override,
            &seq.rgb[0],
            seq.action.into(),
            m,
            seed.wrapping_add(k as u64),
            opts,
        )?;
        for f in 0..m - 1 {
            let gt_metric = &seq.depth[f + 1];
            let valid = Tensor::new(
                gt_metric.shape.clone(),
                gt_metric.data.iter().map(|d| if d.is_finite() { 1.0 } else { 0.0 }).collect(),
            );
            if !products.depth01.is_empty() {
                let pred = &products.depth01[f];
                per_frame_acc[f].push(metrics::depth_metrics(pred, gt_metric, &valid));
                let (gt01, _) = DepthNorm::normalize(gt_metric);
                ssi_acc.push(ssi_residual(&pred.data, &gt01.data, &valid.data));
            }
            gen_frames.push(products.rgb[f].clone());
            real_frames.push(seq.rgb[f + 1].clone());
        }
    }

    let mean_of = |ms: &[DepthMetrics]| {
        let n = ms.len().max(1) as f64;
        DepthMetrics {
            absrel: ms.iter().map(|m| m.absrel).sum::<f64>() / n,
            delta1: ms.iter().map(|m| m.delta1).sum::<f64>() / n,
            delta2: ms.iter().map(|m| m.delta2).sum::<f64>() / n,
            delta3: ms.iter().map(|m| m.delta3).sum::<f64>() / n,
        }
    };
    let per_frame: Vec<DepthMetrics> = per_frame_acc.iter().map(|v| mean_of(v)).collect();
    let all: Vec<DepthMetrics> = per_frame_acc.into_iter().flatten().collect();
    let frechet = metrics::frechet_frames(codec, &gen_frames, &real_frames)?;
    Ok(EvalReport {
        per_frame,
        mean: mean_of(&all),
        mean_ssi: if ssi_acc.is_empty() {
            f64::NAN
        } else {
            ssi_acc.iter().sum::<f64>() / ssi_acc.len() as f64
        },
        frechet,
        units: "ratio".to_string(),
        sequences: indices.len(),
    })
}

/// Scalar SSI residual: affine-align then mean absolute error over valid pixels.
pub fn ssi_residual(pred: &[f64], gt: &[f64], mask: &[f64]) -> f64 {
    let (s, b, _) = metrics::align_affine(pred, gt, mask);
    let n: f64 = mask.iter().sum();
    let mut acc = 0.0;
    for i in 0..pred.len() {
        if mask[i] > 0.0 {
            acc += (s * pred[i] + b - gt[i]).abs();
        }
    }
    acc / n.max(1.0)
}
