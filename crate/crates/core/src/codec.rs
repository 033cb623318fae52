//! Shared latent codec: a single conv encoder/decoder pair serves both RGB
//! frames and depth maps, so texture and geometry live in one latent space.
//!
//! Depth enters as a per-frame min-max normalized map replicated to three
//! channels and leaves by averaging the decoder's three output channels.
//! After pretraining, a fixed per-channel affine (realized as a pair of
//! diagonal 1x1 convolutions) standardizes the latent so diffusion sees
//! roughly unit-scale values.

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::Conv2dLayer;
use crate::optim::{AdamHyper, AdamW};
use crate::params::{Binding, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorId};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Depth,
}

/// Per-frame affine depth normalization record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct DepthNorm {
    pub min: f64,
    pub max: f64,
    /// Constant input; normalization fell back to all-0.5.
    pub degenerate: bool,
}

impl DepthNorm {
    /// Min-max over finite pixels; sky maps to 1.0 (far).
    pub fn normalize(depth: &Tensor) -> (Tensor, DepthNorm) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &d in &depth.data {
            if d.is_finite() {
                min = min.min(d);
                max = max.max(d);
            }
        }
        let degenerate = !(max - min).is_finite() || (max - min) <= 0.0;
        let norm = DepthNorm { min, max, degenerate };
        let data = depth
            .data
            .iter()
            .map(|&d| {
                if !d.is_finite() {
                    1.0
                } else if degenerate {
                    0.5
                } else {
                    (d - min) / (max - min)
                }
            })
            .collect();
        (Tensor::new(depth.shape.clone(), data), norm)
    }

    /// Inverse over valid pixels.
    pub fn denormalize(&self, d01: &Tensor) -> Tensor {
        let data = d01
            .data
            .iter()
            .map(|&v| if self.degenerate { self.min } else { self.min + v * (self.max - self.min) })
            .collect();
        Tensor::new(d01.shape.clone(), data)
    }
}

/// A per-frame latent with its modality tag.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    /// `[C, h, w]`.
    pub tensor: Tensor,
    pub modality: Modality,
    /// Present on depth latents.
    pub norm: Option<DepthNorm>,
}

#[derive(Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    enc_stem: Conv2dLayer,
    enc_mid: Vec<Conv2dLayer>,
    enc_out: Conv2dLayer,
    std: Conv2dLayer,
    unstd: Conv2dLayer,
    dec_stem: Conv2dLayer,
    dec_mid: Vec<Conv2dLayer>,
    dec_out: Conv2dLayer,
}

impl Codec {
    pub fn new(cfg: &CodecConfig, seed: u64) -> Codec {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "codec_init");
        let h = cfg.hidden;
        let c = cfg.latent_channels;
        let stages = cfg.downsample.trailing_zeros() as usize;

        let enc_stem = Conv2dLayer::new(&mut store, &mut rng, "codec.enc.stem", 3, h, 3, 1, 1);
        let enc_mid = (0..stages)
            .map(|i| Conv2dLayer::new(&mut store, &mut rng, &format!("codec.enc.mid{i}"), h, h, 3, 1, 1))
            .collect();
        let enc_out = Conv2dLayer::new(&mut store, &mut rng, "codec.enc.out", h, c, 3, 1, 1);

        // identity until fitted by `fit_latent_standardization`
        let mut eye = Tensor::zeros(&[c, c, 1, 1]);
        for i in 0..c {
            eye.data[i * c + i] = 1.0;
        }
        let std_w = store.register("codec.std.w", eye.clone());
        let std_b = store.register("codec.std.b", Tensor::zeros(&[c]));
        let unstd_w = store.register("codec.unstd.w", eye);
        let unstd_b = store.register("codec.unstd.b", Tensor::zeros(&[c]));
        let std = Conv2dLayer { w: std_w, b: std_b, stride: 1, pad: 0 };
        let unstd = Conv2dLayer { w: unstd_w, b: unstd_b, stride: 1, pad: 0 };

        let dec_stem = Conv2dLayer::new(&mut store, &mut rng, "codec.dec.stem", c, h, 3, 1, 1);
        let dec_mid = (0..stages)
            .map(|i| Conv2dLayer::new(&mut store, &mut rng, &format!("codec.dec.mid{i}"), h, h, 3, 1, 1))
            .collect();
        let dec_out = Conv2dLayer::new(&mut store, &mut rng, "codec.dec.out", h, 3, 3, 1, 1);

        Codec { cfg: cfg.clone(), store, enc_stem, enc_mid, enc_out, std, unstd, dec_stem, dec_mid, dec_out }
    }

    fn is_std_param(name: &str) -> bool {
        name.starts_with("codec.std.") || name.starts_with("codec.unstd.")
    }

    /// Encoder over a `[M,3,H,W]` batch already on a tape.
    pub fn encode_on(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[0] == 0 || shape[1] != 3 {
            return Err(Error::invalid("encode", format!("expected [M,3,H,W], got {shape:?}")));
        }
        let s = self.cfg.downsample;
        if shape[2] % s != 0 || shape[3] % s != 0 {
            return Err(Error::invalid(
                "encode",
                format!("spatial extents {}x{} not divisible by downsample {s}", shape[2], shape[3]),
            ));
        }
        let mut hcur = self.enc_stem.apply(tape, bind, x)?;
        for layer in &self.enc_mid {
            hcur = tape.silu(hcur);
            hcur = tape.down2(hcur)?;
            hcur = layer.apply(tape, bind, hcur)?;
        }
        let hcur = tape.silu(hcur);
        let z = self.enc_out.apply(tape, bind, hcur)?;
        self.std.apply(tape, bind, z)
    }

    /// Decoder over a `[M,C,h,w]` batch already on a tape.
    pub fn decode_on(&self, tape: &mut Tape, bind: &Binding, z: TensorId) -> Result<TensorId> {
        let z = self.unstd.apply(tape, bind, z)?;
        let mut hcur = self.dec_stem.apply(tape, bind, z)?;
        for layer in &self.dec_mid {
            hcur = tape.silu(hcur);
            hcur = tape.up2(hcur)?;
            hcur = layer.apply(tape, bind, hcur)?;
        }
        let hcur = tape.silu(hcur);
        self.dec_out.apply(tape, bind, hcur)
    }

    /// Decode and average the three output channels into one depth channel.
    pub fn decode_depth_on(&self, tape: &mut Tape, bind: &Binding, z: TensorId) -> Result<TensorId> {
        let rgbish = self.decode_on(tape, bind, z)?;
        let w = tape.constant(Tensor::new(vec![1, 3, 1, 1], vec![1.0 / 3.0; 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        tape.conv2d(rgbish, w, b, 1, 0)
    }

    fn run_no_grad(&self, f: impl FnOnce(&mut Tape, &Binding) -> Result<TensorId>) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let bind = self.store.bind(&mut tape, false);
        let out = f(&mut tape, &bind)?;
        Ok(tape.extract(out))
    }

    /// Encode one RGB frame `[3,H,W]` with values in [0,1].
    pub fn encode_image(&self, rgb: &Tensor) -> Result<LatentGrid> {
        if rgb.shape.len() != 3 || rgb.shape[0] != 3 {
            return Err(Error::invalid("encode_image", format!("expected [3,H,W], got {:?}", rgb.shape)));
        }
        if rgb.data.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
            return Err(Error::invalid("encode_image", "values must lie in [0,1]"));
        }
        let t = self.run_no_grad(|tape, bind| {
            let x = tape.constant(Tensor::new(vec![1, 3, rgb.shape[1], rgb.shape[2]], rgb.data.clone()));
            self.encode_on(tape, bind, x)
        })?;
        Ok(LatentGrid {
            tensor: Tensor::new(t.shape[1..].to_vec(), t.data),
            modality: Modality::Image,
            norm: None,
        })
    }

    /// Normalize one metric depth frame `[1,H,W]`, replicate to three
    /// channels, and push it through the same encoder as images.
    pub fn encode_depth(&self, depth: &Tensor) -> Result<LatentGrid> {
        if depth.shape.len() != 3 || depth.shape[0] != 1 {
            return Err(Error::invalid("encode_depth", format!("expected [1,H,W], got {:?}", depth.shape)));
        }
        let (d01, norm) = DepthNorm::normalize(depth);
        let t = self.run_no_grad(|tape, bind| {
            let x = tape.constant(replicate3(&d01));
            self.encode_on(tape, bind, x)
        })?;
        Ok(LatentGrid {
            tensor: Tensor::new(t.shape[1..].to_vec(), t.data),
            modality: Modality::Depth,
            norm: Some(norm),
        })
    }

    pub fn decode_image(&self, z: &LatentGrid) -> Result<Tensor> {
        let t = self.run_no_grad(|tape, bind| {
            let mut shape = vec![1];
            shape.extend_from_slice(&z.tensor.shape);
            let zid = tape.constant(Tensor::new(shape, z.tensor.data.clone()));
            self.decode_on(tape, bind, zid)
        })?;
        Ok(Tensor::new(t.shape[1..].to_vec(), t.data))
    }

    /// Decode to a single normalized depth channel `[1,H,W]`.
    pub fn decode_depth(&self, z: &LatentGrid) -> Result<Tensor> {
        let t = self.run_no_grad(|tape, bind| {
            let mut shape = vec![1];
            shape.extend_from_slice(&z.tensor.shape);
            let zid = tape.constant(Tensor::new(shape, z.tensor.data.clone()));
            self.decode_depth_on(tape, bind, zid)
        })?;
        Ok(Tensor::new(t.shape[1..].to_vec(), t.data))
    }

    /// Fit the latent standardization pair from raw encoder statistics.
    /// Call once, right after pretraining, while `std` is still the identity.
    pub fn fit_latent_standardization(&mut self, sample_frames: &[Tensor]) -> Result<()> {
        let c = self.cfg.latent_channels;
        let mut sums = vec![0.0; c];
        let mut sqs = vec![0.0; c];
        let mut count = 0usize;
        for frame in sample_frames {
            let z = self.run_no_grad(|tape, bind| {
                let x =
                    tape.constant(Tensor::new(vec![1, 3, frame.shape[1], frame.shape[2]], frame.data.clone()));
                self.encode_on(tape, bind, x)
            })?;
            let plane = z.shape[2] * z.shape[3];
            for ci in 0..c {
                for &v in &z.data[ci * plane..(ci + 1) * plane] {
                    sums[ci] += v;
                    sqs[ci] += v * v;
                }
            }
            count += plane;
        }
        if count == 0 {
            return Err(Error::invalid("fit_latent_standardization", "no sample frames"));
        }
        let mut std_w = Tensor::zeros(&[c, c, 1, 1]);
        let mut std_b = Tensor::zeros(&[c]);
        let mut unstd_w = Tensor::zeros(&[c, c, 1, 1]);
        let mut unstd_b = Tensor::zeros(&[c]);
        for ci in 0..c {
            let mean = sums[ci] / count as f64;
            let var = (sqs[ci] / count as f64 - mean * mean).max(1e-12);
            let sigma = var.sqrt();
            std_w.data[ci * c + ci] = 1.0 / sigma;
            std_b.data[ci] = -mean / sigma;
            unstd_w.data[ci * c + ci] = sigma;
            unstd_b.data[ci] = mean;
        }
        self.store.set_data(self.std.w, std_w.data);
        self.store.set_data(self.std.b, std_b.data);
        self.store.set_data(self.unstd.w, unstd_w.data);
        self.store.set_data(self.unstd.b, unstd_b.data);
        Ok(())
    }
}

/// Replicate `[1,H,W]` to `[1,3,H,W]` for the shared encoder.
pub fn replicate3(d01: &Tensor) -> Tensor {
    let (h, w) = (d01.shape[1], d01.shape[2]);
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&d01.data);
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Pretraining products: the held-out MSE curve sampled at eval intervals.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub eval_mse: Vec<f64>,
}

/// Train the codec on reconstruction of both modalities, then standardize
/// the latent. `train_frames` mixes RGB frames and replicated normalized
/// depth frames, all `[3,H,W]`.
pub fn pretrain_codec(
    cfg: &CodecConfig,
    seed: u64,
    train_frames: &[Tensor],
    val_frames: &[Tensor],
) -> Result<(Codec, PretrainReport)> {
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(Error::invalid("pretrain_codec", "empty frame set"));
    }
    let mut codec = Codec::new(cfg, seed);
    let hp = AdamHyper { lr: cfg.pretrain_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut opt = AdamW::new(hp, &codec.store);
    let mut data_rng = rng::stream(seed, "codec_data");
    let batch = 8.min(train_frames.len());

    let mut eval_mse = Vec::new();
    for step in 0..cfg.pretrain_steps {
        let mut tape = Tape::new();
        let bind = codec.store.bind_filtered(&mut tape, |n| !Codec::is_std_param(n));
        let mut total = None;
        for _ in 0..batch {
            let frame = train_frames.choose(&mut data_rng).expect("nonempty");
            let x = tape.constant(Tensor::new(vec![1, 3, frame.shape[1], frame.shape[2]], frame.data.clone()));
            let z = codec.encode_on(&mut tape, &bind, x)?;
            let y = codec.decode_on(&mut tape, &bind, z)?;
            let diff = tape.sub(y, x)?;
            let sq = tape.mul(diff, diff)?;
            let l = tape.mean(sq);
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("batch > 0"), 1.0 / batch as f64);
        tape.value(loss).validate("codec pretrain loss")?;
        tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> =
            bind.all().iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
        opt.step(&mut codec.store, &grads);

        if (step + 1) % cfg.eval_interval == 0 || step + 1 == cfg.pretrain_steps {
            eval_mse.push(eval_recon_mse(&codec, val_frames)?);
        }
    }

    let sample: Vec<Tensor> = train_frames.iter().take(256).cloned().collect();
    codec.fit_latent_standardization(&sample)?;
    Ok((codec, PretrainReport { eval_mse }))
}

/// Mean squared reconstruction error over a frame set.
pub fn eval_recon_mse(codec: &Codec, frames: &[Tensor]) -> Result<f64> {
    eval_recon(codec, frames, |a, b| (a - b) * (a - b))
}

/// Mean absolute reconstruction error over a frame set.
pub fn eval_recon_mae(codec: &Codec, frames: &[Tensor]) -> Result<f64> {
    eval_recon(codec, frames, |a, b| (a - b).abs())
}

fn eval_recon(codec: &Codec, frames: &[Tensor], err: impl Fn(f64, f64) -> f64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for frame in frames {
        let mut tape = Tape::no_grad();
        let bind = codec.store.bind(&mut tape, false);
        let x = tape.constant(Tensor::new(vec![1, 3, frame.shape[1], frame.shape[2]], frame.data.clone()));
        let z = codec.encode_on(&mut tape, &bind, x)?;
        let y = codec.decode_on(&mut tape, &bind, z)?;
        total += tape.data(y).iter().zip(tape.data(x)).map(|(&a, &b)| err(a, b)).sum::<f64>();
        count += frame.numel();
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn codec() -> Codec {
        Codec::new(&Config::toy().codec, 1)
    }

    #[test]
    fn latent_shape_follows_downsample() {
        // H=32, W=64, s=4, C=8 -> 8x8x16
        let c = codec();
        let rgb = Tensor::full(&[3, 32, 64], 0.5);
        let z = c.encode_image(&rgb).unwrap();
        assert_eq!(z.tensor.shape, vec![8, 8, 16]);
        assert_eq!(z.modality, Modality::Image);
    }

    #[test]
    fn identical_images_give_identical_latents() {
        let c = codec();
        let rgb = Tensor::full(&[3, 32, 64], 0.3);
        let z1 = c.encode_image(&rgb).unwrap();
        let z2 = c.encode_image(&rgb).unwrap();
        assert_eq!(z1.tensor.data, z2.tensor.data);
    }

    #[test]
    fn rejects_non_divisible_extents() {
        let c = codec();
        let rgb = Tensor::full(&[3, 30, 64], 0.5);
        assert!(c.encode_image(&rgb).is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        let c = codec();
        let rgb = Tensor::full(&[3, 32, 64], 1.5);
        assert!(c.encode_image(&rgb).is_err());
    }

    #[test]
    fn decode_restores_shapes_for_both_modalities() {
        let c = codec();
        let rgb = Tensor::full(&[3, 32, 64], 0.5);
        let z = c.encode_image(&rgb).unwrap();
        let back = c.decode_image(&z).unwrap();
        assert_eq!(back.shape, vec![3, 32, 64]);

        let mut depth = Tensor::full(&[1, 32, 64], 5.0);
        depth.data[0] = 2.0;
        depth.data[1] = f64::INFINITY;
        let zd = c.encode_depth(&depth).unwrap();
        assert_eq!(zd.tensor.shape, vec![8, 8, 16]);
        assert_eq!(zd.modality, Modality::Depth);
        let backd = c.decode_depth(&zd).unwrap();
        assert_eq!(backd.shape, vec![1, 32, 64]);
    }

    #[test]
    fn shared_parameters_touch_both_modalities() {
        let mut c = codec();
        let rgb = Tensor::full(&[3, 32, 64], 0.4);
        let depth = {
            let mut d = Tensor::full(&[1, 32, 64], 4.0);
            for (i, v) in d.data.iter_mut().enumerate() {
                *v += (i % 7) as f64 * 0.3;
            }
            d
        };
        let zi0 = c.encode_image(&rgb).unwrap().tensor;
        let zd0 = c.encode_depth(&depth).unwrap().tensor;
        // perturb one shared encoder weight
        let id = c.store.ids().next().unwrap();
        let mut data = c.store.get(id).data.clone();
        data[0] += 0.5;
        c.store.set_data(id, data);
        let zi1 = c.encode_image(&rgb).unwrap().tensor;
        let zd1 = c.encode_depth(&depth).unwrap().tensor;
        assert_ne!(zi0.data, zi1.data, "image path must see the shared weight");
        assert_ne!(zd0.data, zd1.data, "depth path must see the shared weight");
    }

    #[test]
    fn depth_normalization_roundtrip() {
        let mut depth = Tensor::full(&[1, 4, 4], 3.0);
        for (i, v) in depth.data.iter_mut().enumerate() {
            *v = 2.0 + i as f64 * 0.37;
        }
        depth.data[5] = f64::INFINITY;
        let (d01, norm) = DepthNorm::normalize(&depth);
        assert!(!norm.degenerate);
        let back = norm.denormalize(&d01);
        for i in 0..16 {
            if depth.data[i].is_finite() {
                assert!((back.data[i] - depth.data[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_depth_falls_back_to_half() {
        let depth = Tensor::full(&[1, 4, 4], 7.0);
        let (d01, norm) = DepthNorm::normalize(&depth);
        assert!(norm.degenerate);
        assert!(d01.data.iter().all(|&v| v == 0.5));
        let c = codec();
        let z = c.encode_depth(&depth).unwrap();
        assert!(z.norm.unwrap().degenerate, "degenerate flag must surface in metadata");
    }

    #[test]
    fn standardization_pair_is_inverse() {
        let mut c = codec();
        let mut frames = Vec::new();
        let mut r = crate::rng::stream(3, "test");
        for _ in 0..4 {
            let mut f = Tensor::randn(&[3, 32, 64], &mut r);
            for v in &mut f.data {
                *v = (*v * 0.2 + 0.5).clamp(0.0, 1.0);
            }
            frames.push(f);
        }
        let before = c.decode_image(&c.encode_image(&frames[0]).unwrap()).unwrap();
        c.fit_latent_standardization(&frames).unwrap();
        let z = c.encode_image(&frames[0]).unwrap();
        // standardized latent has roughly centered stats
        let mean: f64 = z.tensor.data.iter().sum::<f64>() / z.tensor.numel() as f64;
        assert!(mean.abs() < 1.0, "latent mean {mean} should be near zero after fit");
        let after = c.decode_image(&z).unwrap();
        for (a, b) in after.data.iter().zip(&before.data) {
            assert!((a - b).abs() < 1e-9, "standardization must not change reconstructions");
        }
    }
}
