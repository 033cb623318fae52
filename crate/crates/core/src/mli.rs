//! Multi-scale latent interaction: hierarchical depth layers over the UNet
//! taps, inside feedback through zero-initialized 1x1 convolutions into the
//! UNet stages, and outside feedback from the final depth latent into the
//! denoised image latent.
//!
//! With every feedback convolution at exactly zero, the image path is
//! indistinguishable from the plain UNet, so the model starts as a standard
//! video generator and grows into geometry gradually.

use crate::config::{ActionLabel, FeedbackKind, MliConfig};
use crate::error::Result;
use crate::nn::Conv2dLayer;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::unet::{FeatureTaps, Injections, UNet, SCALES};
use rand::Rng;

/// Coarse-to-fine fusion over taps: each stage consumes the encoder tap, the
/// decoder tap, and the upsampled previous output.
pub struct DepthLayerStack {
    fusion: Vec<Conv2dLayer>,
    proj: Conv2dLayer,
}

impl DepthLayerStack {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        channels: &[usize; SCALES],
        latent_channels: usize,
    ) -> Self {
        let fusion = (0..SCALES)
            .map(|s| {
                let prev = if s + 1 < SCALES { channels[s + 1] } else { 0 };
                let cin = 2 * channels[s] + prev;
                Conv2dLayer::new(store, rng, &format!("mli.fuse{s}"), cin, channels[s], 3, 1, 1)
            })
            .collect();
        let proj = Conv2dLayer::new(store, rng, "mli.proj", channels[0], latent_channels, 3, 1, 1);
        DepthLayerStack { fusion, proj }
    }

    /// Returns the depth latent `[M,C,h,w]` and the per-scale intermediates.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        taps: &FeatureTaps,
    ) -> Result<(TensorId, [TensorId; SCALES])> {
        let mut inter = [TensorId(0); SCALES];
        let mut prev: Option<TensorId> = None;
        for s in (0..SCALES).rev() {
            let mut parts = vec![taps.enc[s], taps.dec[s]];
            if let Some(p) = prev {
                parts.push(tape.up2(p)?);
            }
            let cat = tape.concat_channels(&parts)?;
            let fused = self.fusion[s].apply(tape, bind, cat)?;
            let fused = tape.silu(fused);
            inter[s] = fused;
            prev = Some(fused);
        }
        let z_d = self.proj.apply(tape, bind, inter[0])?;
        Ok((z_d, inter))
    }
}

/// One feedback site: a 1x1 convolution (zero or random init) or a direct add.
pub enum FeedbackSite {
    Conv(Conv2dLayer),
    Direct,
}

impl FeedbackSite {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, kind: FeedbackKind, name: &str, ch: usize) -> Self {
        match kind {
            FeedbackKind::Zero => FeedbackSite::Conv(Conv2dLayer::zero_1x1(store, name, ch, ch)),
            FeedbackKind::Random => FeedbackSite::Conv(Conv2dLayer::random_1x1(store, rng, name, ch, ch)),
            FeedbackKind::DirectAdd => FeedbackSite::Direct,
        }
    }

    /// `Y = site(X)`; the caller adds `Y` to the target features.
    pub fn apply(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        match self {
            FeedbackSite::Conv(c) => c.apply(tape, bind, x),
            FeedbackSite::Direct => Ok(x),
        }
    }
}

/// The full interaction head plus its feedback sites.
pub struct Mli {
    pub cfg: MliConfig,
    pub head: DepthLayerStack,
    inside_dec: Vec<FeedbackSite>,
    inside_enc: Vec<FeedbackSite>,
    outside: FeedbackSite,
}

/// Everything one assembled pass produces.
pub struct AssembleOut {
    /// Full eps volume (frame-0 slot passes through).
    pub eps: TensorId,
    /// Depth latent for all M frames.
    pub z_d: TensorId,
    pub taps: FeatureTaps,
}

impl Mli {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &MliConfig,
        channels: &[usize; SCALES],
        latent_channels: usize,
    ) -> Self {
        let head = DepthLayerStack::new(store, rng, channels, latent_channels);
        let inside_dec = (0..SCALES)
            .map(|s| FeedbackSite::new(store, rng, cfg.feedback, &format!("mli.in_dec{s}"), channels[s]))
            .collect();
        let inside_enc = (0..SCALES)
            .map(|s| FeedbackSite::new(store, rng, cfg.feedback, &format!("mli.in_enc{s}"), channels[s]))
            .collect();
        let outside = FeedbackSite::new(store, rng, cfg.feedback, "mli.outside", latent_channels);
        Mli { cfg: cfg.clone(), head, inside_dec, inside_enc, outside }
    }

    /// Whether inside feedback is wired at scale index `s` (0 = full res).
    fn scale_active(&self, s: usize) -> bool {
        self.cfg.inside && self.cfg.scales.contains(&(1u32 << s))
    }

    /// Two-pass assembly: tap pass without injections, depth head over the
    /// taps, then a decoder rerun (or full rerun when encoder sites are on)
    /// with the inside injections added to the stage features.
    ///
    /// `detach_taps` severs the head from the UNet for the detached-gradient
    /// training mode.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        unet: &UNet,
        vol: TensorId,
        t: usize,
        action: ActionLabel,
        detach_taps: bool,
    ) -> Result<AssembleOut> {
        let (eps_plain, taps) = unet.forward(tape, bind, vol, t, action, None)?;
        let head_taps = if detach_taps {
            FeatureTaps {
                enc: taps.enc.map(|id| tape.detach(id)),
                dec: taps.dec.map(|id| tape.detach(id)),
            }
        } else {
            taps
        };
        let (z_d, inter) = self.head.forward(tape, bind, &head_taps)?;

        let mut inj = Injections::default();
        let mut any = false;
        for s in 0..SCALES {
            if !self.scale_active(s) {
                continue;
            }
            inj.dec[s] = Some(self.inside_dec[s].apply(tape, bind, inter[s])?);
            any = true;
            if self.cfg.inside_encoder_sites {
                inj.enc[s] = Some(self.inside_enc[s].apply(tape, bind, inter[s])?);
            }
        }

        let eps = if !any {
            eps_plain
        } else if inj.any_enc() {
            let (eps2, _) = unet.forward(tape, bind, vol, t, action, Some(&inj))?;
            eps2
        } else {
            let cond = unet.cond_vector(tape, bind, t, action)?;
            let (eps2, _) = unet.forward_decoder(tape, bind, vol, &taps.enc, cond, Some(&inj))?;
            eps2
        };
        Ok(AssembleOut { eps, z_d, taps })
    }

    /// Outside feedback: add the gated depth latent to the denoised image latent.
    pub fn apply_outside(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        z_x: TensorId,
        z_d: TensorId,
    ) -> Result<TensorId> {
        if !self.cfg.outside {
            return Ok(z_x);
        }
        let y = self.outside.apply(tape, bind, z_d)?;
        tape.add(z_x, y)
    }
}

/// The conventional baseline: depth from the denoised image latent through a
/// plain conv stack, no taps, no feedback.
pub struct DepthStub {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
}

impl DepthStub {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, latent_channels: usize, hidden: usize) -> Self {
        DepthStub {
            c1: Conv2dLayer::new(store, rng, "stub.c1", latent_channels, hidden, 3, 1, 1),
            c2: Conv2dLayer::new(store, rng, "stub.c2", hidden, latent_channels, 3, 1, 1),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, z_x: TensorId) -> Result<TensorId> {
        let h = self.c1.apply(tape, bind, z_x)?;
        let h = tape.silu(h);
        self.c2.apply(tape, bind, h)
    }
}
