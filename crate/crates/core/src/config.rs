//! Run configuration: one JSON document covering data generation, the codec,
//! the world model, and training. See the README for the schema.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Ego action labels used both by the scene generator and as conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Stop,
    Straight,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Stop, Action::Straight, Action::Left, Action::Right];

    pub fn parse(s: &str) -> Result<Action> {
        match s {
            "stop" => Ok(Action::Stop),
            "straight" => Ok(Action::Straight),
            "left" => Ok(Action::Left),
            "right" => Ok(Action::Right),
            other => Err(Error::Config(format!("unknown action '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Action::Stop => "stop",
            Action::Straight => "straight",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

/// Conditioning vocabulary: the four ego actions plus the null label that
/// realizes classifier-free dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionLabel {
    Stop,
    Straight,
    Left,
    Right,
    Null,
}

impl ActionLabel {
    pub const VOCAB: usize = 5;

    pub fn index(&self) -> usize {
        match self {
            ActionLabel::Stop => 0,
            ActionLabel::Straight => 1,
            ActionLabel::Left => 2,
            ActionLabel::Right => 3,
            ActionLabel::Null => 4,
        }
    }
}

impl From<Action> for ActionLabel {
    fn from(a: Action) -> Self {
        match a {
            Action::Stop => ActionLabel::Stop,
            Action::Straight => ActionLabel::Straight,
            Action::Left => ActionLabel::Left,
            Action::Right => ActionLabel::Right,
        }
    }
}

/// Which depth prediction path is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthPath {
    /// Multi-scale head over UNet taps decoding through the shared codec.
    SharedLatent,
    /// Plain conv stack on the denoised image latent; the ablation baseline.
    ConvStub,
}

/// Initialization of the feedback convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Zero,
    Random,
    DirectAdd,
}

/// Optimization paradigm for the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ImageOnly,
    DepthOnly,
    DetachGrad,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per sequence (M).
    pub frames: usize,
    pub sequences: usize,
    pub val_fraction: f64,
    pub boxes: usize,
    /// Forward speed per frame for straight/left/right.
    pub forward_speed: f64,
    /// Yaw rate per frame (radians) for left/right.
    pub yaw_rate: f64,
    /// Fraction of boxes given a nonzero velocity.
    pub moving_fraction: f64,
    pub camera_height: f64,
    /// Focal length in pixels (fx = fy).
    pub focal: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Spatial downsample factor s (a power of two).
    pub downsample: usize,
    pub hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Held-out reconstruction eval every this many pretraining steps.
    pub eval_interval: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub channel_mults: [usize; 4],
    pub temb_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training step count T.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse steps used at inference (deterministic sampler).
    pub sample_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MliConfig {
    /// When false the depth branch is absent and rollouts are plain UNet.
    pub enabled: bool,
    pub depth_path: DepthPath,
    /// Geometry-to-texture injections into UNet stages.
    pub inside: bool,
    /// Depth-latent injection into the denoised image latent.
    pub outside: bool,
    /// Scales carrying inside feedback, as denominators from {1,2,4,8}.
    pub scales: Vec<u32>,
    pub feedback: FeedbackKind,
    /// Also inject into encoder stages (decoder stages are always the default sites).
    pub inside_encoder_sites: bool,
    /// Apply outside feedback at every reverse step instead of only the last.
    pub outside_every_step: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub action_dropout: f64,
    /// Balance weight on the scale/shift-invariant depth term.
    pub lambda: f64,
    /// Weight on the latent depth term.
    pub w_depth: f64,
    /// Weight on the structural (spatial-gradient) image term.
    pub w_struct: f64,
    pub mode: TrainMode,
    pub steps: usize,
    pub checkpoint_interval: usize,
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub mli: MliConfig,
    pub train: TrainSettings,
}

impl Config {
    /// Desk-scale defaults: 32x64 frames, 8x8x16 latent, M = 5.
    pub fn toy() -> Config {
        Config {
            seed: 0,
            data: DataConfig {
                height: 32,
                width: 64,
                frames: 5,
                sequences: 200,
                val_fraction: 0.1,
                boxes: 6,
                forward_speed: 1.0,
                yaw_rate: 0.12,
                moving_fraction: 0.3,
                camera_height: 1.5,
                focal: 32.0,
            },
            codec: CodecConfig {
                latent_channels: 8,
                downsample: 4,
                hidden: 12,
                pretrain_steps: 1500,
                pretrain_lr: 2e-3,
                eval_interval: 250,
            },
            model: ModelConfig { base_channels: 12, channel_mults: [1, 1, 2, 2], temb_dim: 32 },
            diffusion: DiffusionConfig {
                timesteps: 100,
                beta_start: 1e-4,
                beta_end: 0.02,
                sample_steps: 25,
            },
            mli: MliConfig {
                enabled: true,
                depth_path: DepthPath::SharedLatent,
                inside: true,
                outside: true,
                scales: vec![1, 2, 4, 8],
                feedback: FeedbackKind::Zero,
                inside_encoder_sites: false,
                outside_every_step: false,
            },
            train: TrainSettings {
                lr: 5e-5,
                beta1: 0.9,
                beta2: 0.999,
                weight_decay: 0.01,
                adam_eps: 1e-8,
                ema_decay: 0.999,
                action_dropout: 0.15,
                lambda: 0.5,
                w_depth: 1.0,
                w_struct: 0.1,
                mode: TrainMode::Joint,
                steps: 2000,
                checkpoint_interval: 500,
                grad_clip: 1.0,
            },
        }
    }

    pub fn from_json(json: &str) -> Result<Config> {
        let cfg: Config = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config> {
        Config::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let d = &self.data;
        if d.height == 0 || d.width == 0 || d.frames < 2 || d.sequences == 0 {
            return fail("data extents must be positive and frames >= 2".into());
        }
        if !(0.0..1.0).contains(&d.val_fraction) || (d.val_fraction * d.sequences as f64) < 1.0 {
            return fail("val_fraction must leave at least one held-out sequence".into());
        }
        let s = self.codec.downsample;
        if s == 0 || !s.is_power_of_two() {
            return fail(format!("codec downsample must be a power of two, got {s}"));
        }
        // four UNet scales need three spatial halvings of the latent
        let (lh, lw) = (d.height / s, d.width / s);
        if d.height % s != 0 || d.width % s != 0 || lh % 8 != 0 || lw % 8 != 0 {
            return fail(format!(
                "frame {}x{} with downsample {s} does not give a latent divisible by 8",
                d.height, d.width
            ));
        }
        if self.codec.latent_channels == 0 || self.codec.hidden == 0 {
            return fail("codec channels must be positive".into());
        }
        let df = &self.diffusion;
        if df.timesteps == 0 || df.sample_steps == 0 || df.sample_steps > df.timesteps {
            return fail("diffusion needs 0 < sample_steps <= timesteps".into());
        }
        if !(0.0 < df.beta_start && df.beta_start <= df.beta_end && df.beta_end < 1.0) {
            return fail("require 0 < beta_start <= beta_end < 1".into());
        }
        if self.model.base_channels == 0 || self.model.channel_mults.iter().any(|&m| m == 0) {
            return fail("model channels must be positive".into());
        }
        if self.model.temb_dim % 2 != 0 {
            return fail("temb_dim must be even".into());
        }
        let m = &self.mli;
        if m.scales.is_empty() || m.scales.iter().any(|s| ![1, 2, 4, 8].contains(s)) {
            return fail(format!("mli scales must be a nonempty subset of [1,2,4,8], got {:?}", m.scales));
        }
        if m.depth_path == DepthPath::ConvStub && (m.inside || m.outside) {
            return fail("conv_stub depth path has no feedback sites; disable inside/outside".into());
        }
        let t = &self.train;
        if !(0.0..=1.0).contains(&t.action_dropout) {
            return fail("action_dropout must be in [0,1]".into());
        }
        if t.lr <= 0.0 || t.steps == 0 || t.checkpoint_interval == 0 {
            return fail("train lr/steps/checkpoint_interval must be positive".into());
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return fail("ema_decay must be in [0,1)".into());
        }
        Ok(())
    }

    /// Side length of the latent grid, (h, w).
    pub fn latent_extent(&self) -> (usize, usize) {
        (self.data.height / self.codec.downsample, self.data.width / self.codec.downsample)
    }
}
