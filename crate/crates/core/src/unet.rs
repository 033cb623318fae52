//! Video denoising UNet: four spatial scales with temporal mixing after each
//! block, timestep + action conditioning injected per scale, feature taps
//! exposed at every scale of both halves, and optional additive injection
//! sites for the geometry feedback branch.

use crate::config::{ActionLabel, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ChannelNormLayer, Conv2dLayer, LinearLayer, TemporalLayer};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;

pub const SCALES: usize = 4;

/// Feature tensors at scales {1, 1/2, 1/4, 1/8} of the latent grid.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTaps {
    pub enc: [TensorId; SCALES],
    pub dec: [TensorId; SCALES],
}

/// Optional per-scale additive injections, shaped exactly like the stage
/// features they join.
#[derive(Debug, Clone, Copy, Default)]
pub struct Injections {
    pub enc: [Option<TensorId>; SCALES],
    pub dec: [Option<TensorId>; SCALES],
}

impl Injections {
    pub fn any_enc(&self) -> bool {
        self.enc.iter().any(|i| i.is_some())
    }
}

/// conv -> silu -> norm -> temporal mixing, wrapped in a residual.
struct Block {
    conv: Conv2dLayer,
    norm: ChannelNormLayer,
    temporal: TemporalLayer,
    cond: LinearLayer,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, ch: usize, temb: usize) -> Block {
        Block {
            conv: Conv2dLayer::new(store, rng, &format!("{name}.conv"), ch, ch, 3, 1, 1),
            norm: ChannelNormLayer::new(store, &format!("{name}.norm"), ch),
            temporal: TemporalLayer::new(store, rng, &format!("{name}.temporal"), ch),
            cond: LinearLayer::new(store, rng, &format!("{name}.cond"), temb, ch),
        }
    }

    fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId, cond: TensorId) -> Result<TensorId> {
        let h = self.conv.apply(tape, bind, x)?;
        let h = self.norm.apply(tape, bind, h)?;
        // conditioning enters after the norm so the per-channel shift survives
        let bias = self.cond.apply(tape, bind, cond)?;
        let h = tape.add_channel_bias(h, bias)?;
        let h = tape.silu(h);
        let h = self.temporal.apply(tape, bind, h)?;
        tape.add(x, h)
    }
}

pub struct UNet {
    pub latent_channels: usize,
    pub channels: [usize; SCALES],
    temb_dim: usize,
    stem: Conv2dLayer,
    enc_blocks: Vec<Block>,
    downs: Vec<Conv2dLayer>,
    dec_blocks: Vec<Block>,
    ups: Vec<Conv2dLayer>,
    pub(crate) out: Conv2dLayer,
    temb_l1: LinearLayer,
    temb_l2: LinearLayer,
    action_table: ParamId,
}

/// Sinusoidal position features for a timestep, standard diffusion practice.
fn sinusoidal(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        data[i] = (t as f64 * freq).sin();
        data[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(vec![dim], data)
}

impl UNet {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig, latent_channels: usize) -> UNet {
        let channels: [usize; SCALES] =
            std::array::from_fn(|i| cfg.base_channels * cfg.channel_mults[i]);
        let temb = cfg.temb_dim;

        let stem = Conv2dLayer::new(store, rng, "unet.stem", latent_channels, channels[0], 3, 1, 1);
        let enc_blocks = (0..SCALES)
            .map(|s| Block::new(store, rng, &format!("unet.enc{s}"), channels[s], temb))
            .collect();
        let downs = (0..SCALES - 1)
            .map(|s| Conv2dLayer::new(store, rng, &format!("unet.down{s}"), channels[s], channels[s + 1], 3, 1, 1))
            .collect();
        let dec_blocks = (0..SCALES)
            .map(|s| Block::new(store, rng, &format!("unet.dec{s}"), channels[s], temb))
            .collect();
        let ups = (0..SCALES - 1)
            .map(|s| Conv2dLayer::new(store, rng, &format!("unet.up{s}"), channels[s + 1], channels[s], 3, 1, 1))
            .collect();
        // zero-initialized output conv: the model starts by predicting zero
        // noise, which keeps the first reverse trajectories bounded
        let out = {
            let w = store.register("unet.out.w", Tensor::zeros(&[latent_channels, channels[0], 3, 3]));
            let b = store.register("unet.out.b", Tensor::zeros(&[latent_channels]));
            Conv2dLayer { w, b, stride: 1, pad: 1 }
        };

        let temb_l1 = LinearLayer::new(store, rng, "unet.temb.l1", temb, temb);
        let temb_l2 = LinearLayer::new(store, rng, "unet.temb.l2", temb, temb);
        let mut table = Tensor::randn(&[ActionLabel::VOCAB, temb], rng);
        for v in &mut table.data {
            *v *= 0.2;
        }
        let action_table = store.register("unet.action_table", table);

        UNet {
            latent_channels,
            channels,
            temb_dim: temb,
            stem,
            enc_blocks,
            downs,
            dec_blocks,
            ups,
            out,
            temb_l1,
            temb_l2,
            action_table,
        }
    }

    /// Conditioning vector: MLP over sinusoidal timestep features plus the
    /// learned action embedding.
    pub fn cond_vector(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        t: usize,
        action: ActionLabel,
    ) -> Result<TensorId> {
        let sin = tape.constant(sinusoidal(t, self.temb_dim));
        let h = self.temb_l1.apply(tape, bind, sin)?;
        let h = tape.silu(h);
        let h = self.temb_l2.apply(tape, bind, h)?;
        let a = tape.select_row(bind.id(self.action_table), action.index())?;
        tape.add(h, a)
    }

    fn check_injection(&self, tape: &Tape, stage: TensorId, inj: TensorId, scale: usize) -> Result<()> {
        if tape.shape(stage) != tape.shape(inj) {
            return Err(Error::invalid(
                "unet_injection",
                format!(
                    "scale 1/{}: stage features {:?} vs injection {:?}",
                    1 << scale,
                    tape.shape(stage),
                    tape.shape(inj)
                ),
            ));
        }
        Ok(())
    }

    /// Encoder half: returns per-scale taps (post-block, post-injection).
    fn run_encoder(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vol: TensorId,
        cond: TensorId,
        injections: Option<&Injections>,
    ) -> Result<[TensorId; SCALES]> {
        let mut taps = [TensorId(0); SCALES];
        let mut h = self.stem.apply(tape, bind, vol)?;
        for s in 0..SCALES {
            let mut y = self.enc_blocks[s].apply(tape, bind, h, cond)?;
            if let Some(inj) = injections.and_then(|i| i.enc[s]) {
                self.check_injection(tape, y, inj, s)?;
                y = tape.add(y, inj)?;
            }
            taps[s] = y;
            if s + 1 < SCALES {
                let d = tape.down2(y)?;
                h = self.downs[s].apply(tape, bind, d)?;
            }
        }
        Ok(taps)
    }

    /// Decoder half from encoder taps; returns (pre-passthrough output, dec taps).
    fn run_decoder(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        enc_taps: &[TensorId; SCALES],
        cond: TensorId,
        injections: Option<&Injections>,
    ) -> Result<(TensorId, [TensorId; SCALES])> {
        let mut taps = [TensorId(0); SCALES];
        let mut h = enc_taps[SCALES - 1];
        for s in (0..SCALES).rev() {
            if s + 1 < SCALES {
                h = tape.add(h, enc_taps[s])?; // skip connection
            }
            let mut y = self.dec_blocks[s].apply(tape, bind, h, cond)?;
            if let Some(inj) = injections.and_then(|i| i.dec[s]) {
                self.check_injection(tape, y, inj, s)?;
                y = tape.add(y, inj)?;
            }
            taps[s] = y;
            if s > 0 {
                let u = tape.up2(y)?;
                h = self.ups[s - 1].apply(tape, bind, u)?;
            } else {
                h = y;
            }
        }
        let eps = self.out.apply(tape, bind, h)?;
        Ok((eps, taps))
    }

    /// Full forward over a noisy volume. The returned volume predicts eps for
    /// frames `1..M`; the frame-0 slot passes the input through untouched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vol: TensorId,
        t: usize,
        action: ActionLabel,
        injections: Option<&Injections>,
    ) -> Result<(TensorId, FeatureTaps)> {
        let shape = tape.shape(vol).to_vec();
        if shape.len() != 4 || shape[1] != self.latent_channels {
            return Err(Error::invalid(
                "unet_forward",
                format!("expected [M,{},h,w], got {shape:?}", self.latent_channels),
            ));
        }
        let m = shape[0];
        let cond = self.cond_vector(tape, bind, t, action)?;
        let enc = self.run_encoder(tape, bind, vol, cond, injections)?;
        let (eps, dec) = self.run_decoder(tape, bind, &enc, cond, injections)?;
        let frame0 = tape.slice_frames(vol, 0, 1)?;
        let future = tape.slice_frames(eps, 1, m - 1)?;
        let out = tape.concat_frames(&[frame0, future])?;
        Ok((out, FeatureTaps { enc, dec }))
    }

    /// Rerun only the decoder half with injections, reusing encoder taps from
    /// an earlier pass on the same tape.
    pub fn forward_decoder(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        vol: TensorId,
        enc_taps: &[TensorId; SCALES],
        cond: TensorId,
        injections: Option<&Injections>,
    ) -> Result<(TensorId, [TensorId; SCALES])> {
        let m = tape.shape(vol)[0];
        let (eps, dec_taps) = self.run_decoder(tape, bind, enc_taps, cond, injections)?;
        let frame0 = tape.slice_frames(vol, 0, 1)?;
        let future = tape.slice_frames(eps, 1, m - 1)?;
        let out = tape.concat_frames(&[frame0, future])?;
        Ok((out, dec_taps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::rng;

    fn build() -> (ParamStore, UNet) {
        let cfg = Config::toy();
        let mut store = ParamStore::new();
        let mut r = rng::stream(0, "model_init");
        let unet = UNet::new(&mut store, &mut r, &cfg.model, cfg.codec.latent_channels);
        (store, unet)
    }

    fn test_volume() -> Tensor {
        let mut r = rng::stream(1, "test");
        Tensor::randn(&[5, 8, 8, 16], &mut r)
    }

    #[test]
    fn shapes_and_taps() {
        let (store, unet) = build();
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let (eps, taps) = unet.forward(&mut tape, &bind, vol, 10, ActionLabel::Straight, None).unwrap();
        assert_eq!(tape.shape(eps), &[5, 8, 8, 16]);
        let expect = [(8usize, 16usize), (4, 8), (2, 4), (1, 2)];
        for s in 0..SCALES {
            let sh = tape.shape(taps.enc[s]);
            assert_eq!((sh[2], sh[3]), expect[s], "enc tap scale {s}");
            assert_eq!(sh[1], unet.channels[s]);
            let sh = tape.shape(taps.dec[s]);
            assert_eq!((sh[2], sh[3]), expect[s], "dec tap scale {s}");
        }
    }

    #[test]
    fn frame0_passes_through_untouched() {
        let (store, unet) = build();
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let volt = test_volume();
        let vol = tape.constant(volt.clone());
        let (eps, _) = unet.forward(&mut tape, &bind, vol, 3, ActionLabel::Stop, None).unwrap();
        let flen = 8 * 8 * 16;
        assert_eq!(&tape.data(eps)[..flen], &volt.data[..flen]);
        assert_ne!(&tape.data(eps)[flen..2 * flen], &volt.data[flen..2 * flen]);
    }

    #[test]
    fn zero_injections_change_nothing() {
        let (store, unet) = build();
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let (base, taps) = unet.forward(&mut tape, &bind, vol, 7, ActionLabel::Left, None).unwrap();
        let mut inj = Injections::default();
        for s in 0..SCALES {
            let sh = tape.shape(taps.dec[s]).to_vec();
            inj.dec[s] = Some(tape.constant(Tensor::zeros(&sh)));
        }
        let (with, _) = unet.forward(&mut tape, &bind, vol, 7, ActionLabel::Left, Some(&inj)).unwrap();
        // additive identity: outputs equal element for element
        assert_eq!(tape.data(base), tape.data(with));
    }

    #[test]
    fn action_embedding_changes_output() {
        // perturbation check: nudge the zero-initialized output conv so the
        // conditioning path becomes observable in eps, then swap actions
        let (mut store, unet) = build();
        let mut r = rng::stream(9, "test");
        let w = unet.out.w;
        let noisy = Tensor::randn(&store.get(w).shape, &mut r);
        store.set_data(w, noisy.data.iter().map(|v| v * 0.1).collect());

        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let (a, taps_a) = unet.forward(&mut tape, &bind, vol, 7, ActionLabel::Null, None).unwrap();
        let (b, taps_b) = unet.forward(&mut tape, &bind, vol, 7, ActionLabel::Stop, None).unwrap();
        assert_ne!(tape.data(a), tape.data(b));
        // the embedding already separates the internal features at init
        assert_ne!(tape.data(taps_a.dec[0]), tape.data(taps_b.dec[0]));
    }

    #[test]
    fn injection_shape_mismatch_names_scale() {
        let (store, unet) = build();
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let mut inj = Injections::default();
        inj.dec[2] = Some(tape.constant(Tensor::zeros(&[5, 3, 2, 4])));
        let err = unet.forward(&mut tape, &bind, vol, 7, ActionLabel::Stop, Some(&inj)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1/4"), "{msg}");
    }

    #[test]
    fn injection_at_one_scale_only_affects_downstream() {
        // a delta at the coarsest decoder stage must not change coarser-level
        // taps computed before it, but must change the final output
        let (mut store, unet) = build();
        let mut r = rng::stream(10, "test");
        let noisy = Tensor::randn(&store.get(unet.out.w).shape, &mut r);
        store.set_data(unet.out.w, noisy.data.iter().map(|v| v * 0.1).collect());
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let (base, base_taps) = unet.forward(&mut tape, &bind, vol, 9, ActionLabel::Right, None).unwrap();

        let mut inj = Injections::default();
        let sh = tape.shape(base_taps.dec[3]).to_vec();
        let mut delta = Tensor::zeros(&sh);
        delta.data[0] = 0.5;
        inj.dec[3] = Some(tape.constant(delta));
        let (with, with_taps) = unet.forward(&mut tape, &bind, vol, 9, ActionLabel::Right, Some(&inj)).unwrap();

        assert_ne!(tape.data(base), tape.data(with), "output must change");
        // encoder taps are upstream of the decoder injection site
        for s in 0..SCALES {
            assert_eq!(tape.data(base_taps.enc[s]), tape.data(with_taps.enc[s]), "enc tap {s}");
        }
        // finer decoder taps are downstream and must differ
        assert_ne!(tape.data(base_taps.dec[0]), tape.data(with_taps.dec[0]));
    }

    #[test]
    fn tap_reading_is_pure() {
        let (store, unet) = build();
        let mut tape = Tape::no_grad();
        let bind = store.bind(&mut tape, false);
        let vol = tape.constant(test_volume());
        let (a, taps) = unet.forward(&mut tape, &bind, vol, 5, ActionLabel::Straight, None).unwrap();
        // consume taps in an unrelated computation
        let s = tape.sum(taps.dec[0]);
        let _ = tape.scale(s, 2.0);
        let (b, _) = unet.forward(&mut tape, &bind, vol, 5, ActionLabel::Straight, None).unwrap();
        assert_eq!(tape.data(a), tape.data(b));
    }
}
