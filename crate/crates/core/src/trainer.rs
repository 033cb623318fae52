//! End-to-end training: per-step graph assembly under the four optimization
//! modes, AdamW with global-norm clipping, EMA shadow weights,
//! classifier-free action dropout, bit-exact checkpointing, and JSON-lines
//! logging.

use crate::codec::{Codec, DepthNorm, replicate3};
use crate::config::{ActionLabel, Config, TrainMode};
use crate::dataset::{Dataset, Split};
use crate::diffusion::{forward_noise, LatentVolume};
use crate::error::{Error, Result};
use crate::losses::{self, LossReport};
use crate::model::{predict_clean_on, WorldModel};
use crate::optim::{clip_global_norm, AdamHyper, AdamW, Ema};
use crate::params::ParamStore;
use crate::rng::{self, RngState};
use crate::tensor::{Tape, Tensor};
use crate::world::SceneSequence;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UF4D";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND_TRAIN: u8 = 0;
const KIND_CODEC: u8 = 1;

/// One sequence, encoded once and reused across steps (the codec is frozen).
pub struct CachedSeq {
    /// Clean image latents `[M,C,h,w]`.
    pub z_x: Tensor,
    /// Encoded depth latents `[M,C,h,w]`.
    pub z_d: Tensor,
    /// Normalized ground-truth depth per frame, `[1,H,W]`, sky at 1.0.
    pub gt01: Vec<Tensor>,
    /// Validity mask per frame (0 on sky).
    pub valid: Vec<Tensor>,
    pub action: ActionLabel,
}

/// Encode a scene sequence into the training representation.
pub fn encode_sequence(codec: &Codec, seq: &SceneSequence) -> Result<CachedSeq> {
    let m = seq.rgb.len();
    let (h, w) = (seq.rgb[0].shape[1], seq.rgb[0].shape[2]);

    let mut rgb_stack = Vec::with_capacity(m * 3 * h * w);
    for f in &seq.rgb {
        rgb_stack.extend_from_slice(&f.data);
    }
    let mut depth_stack = Vec::with_capacity(m * 3 * h * w);
    let mut gt01 = Vec::with_capacity(m);
    let mut valid = Vec::with_capacity(m);
    for d in &seq.depth {
        let (d01, _) = DepthNorm::normalize(d);
        depth_stack.extend_from_slice(&replicate3(&d01).data);
        valid.push(Tensor::new(
            d.shape.clone(),
            d.data.iter().map(|v| if v.is_finite() { 1.0 } else { 0.0 }).collect(),
        ));
        gt01.push(d01);
    }

    let mut tape = Tape::no_grad();
    let bind = codec.store.bind(&mut tape, false);
    let xs = tape.constant(Tensor::new(vec![m, 3, h, w], rgb_stack));
    let z_x = codec.encode_on(&mut tape, &bind, xs)?;
    let ds = tape.constant(Tensor::new(vec![m, 3, h, w], depth_stack));
    let z_d = codec.encode_on(&mut tape, &bind, ds)?;
    Ok(CachedSeq {
        z_x: tape.extract(z_x),
        z_d: tape.extract(z_d),
        gt01,
        valid,
        action: seq.action.into(),
    })
}

/// Replace the true action with the null label at the configured rate.
pub fn sample_action_dropout(action: ActionLabel, rng: &mut ChaCha12Rng, rate: f64) -> ActionLabel {
    if rng.gen::<f64>() < rate {
        ActionLabel::Null
    } else {
        action
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub grad_norm: f64,
    pub ms: f64,
}

pub struct TrainState {
    pub config: Config,
    pub model: WorldModel,
    pub codec: Codec,
    pub opt: AdamW,
    pub ema: Ema,
    pub step: u64,
    pub data_rng: ChaCha12Rng,
    pub noise_rng: ChaCha12Rng,
    pub dropout_rng: ChaCha12Rng,
}

impl TrainState {
    pub fn new(config: &Config, codec: Codec) -> Result<TrainState> {
        let model = WorldModel::new(config)?;
        let hp = AdamHyper {
            lr: config.train.lr,
            beta1: config.train.beta1,
            beta2: config.train.beta2,
            eps: config.train.adam_eps,
            weight_decay: config.train.weight_decay,
        };
        let opt = AdamW::new(hp, &model.store);
        let ema = Ema::new(config.train.ema_decay, &model.store);
        Ok(TrainState {
            config: config.clone(),
            model,
            codec,
            opt,
            ema,
            step: 0,
            data_rng: rng::stream(config.seed, "data"),
            noise_rng: rng::stream(config.seed, "noise"),
            dropout_rng: rng::stream(config.seed, "dropout"),
        })
    }

    /// One optimization step on an encoded sequence.
    pub fn train_step(&mut self, seq: &CachedSeq) -> Result<StepLog> {
        let started = std::time::Instant::now();
        let (report, mut grads) = self.compute_step(seq)?;
        let grad_norm = clip_global_norm(&mut grads, self.config.train.grad_clip);
        self.opt.step(&mut self.model.store, &grads);
        self.ema.update(&self.model.store);
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            report,
            grad_norm,
            ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Build the step's graph, run backward, and return the raw (pre-clip)
    /// gradients in parameter-store order. Advances the rng streams but does
    /// not touch parameters.
    pub fn compute_step(&mut self, seq: &CachedSeq) -> Result<(LossReport, Vec<Option<Vec<f64>>>)> {
        let tcfg = &self.config.train;
        let m = seq.z_x.shape[0];
        let t = self.noise_rng.gen_range(1..=self.model.schedule.timesteps);
        let mut fut_shape = seq.z_x.shape.clone();
        fut_shape[0] = m - 1;
        let eps = Tensor::randn(&fut_shape, &mut self.noise_rng);
        let action = sample_action_dropout(seq.action, &mut self.dropout_rng, tcfg.action_dropout);

        let z0_vol = LatentVolume::new(seq.z_x.clone(), true)?;
        let noisy = forward_noise(&z0_vol, &self.model.schedule, t, &eps)?;

        let mut tape = Tape::new();
        let bind = self.model.store.bind(&mut tape, true);
        let codec_bind = self.codec.store.bind(&mut tape, false);

        let noisy_id = tape.constant(noisy.data.clone());
        let eps_true = tape.constant(eps);
        let z_x_fut = tape.constant(z0_vol.future());
        let z_d_fut_true = {
            let vol = LatentVolume::new(seq.z_d.clone(), true)?;
            tape.constant(vol.future())
        };

        let detach = tcfg.mode == TrainMode::DetachGrad;
        let (eps_vol, z_d_hat) =
            self.model.forward_on(&mut tape, &bind, noisy_id, t, action, detach)?;
        let eps_fut = tape.slice_frames(eps_vol, 1, m - 1)?;

        // reconstructed clean latents, with outside feedback when configured
        let noisy_fut = tape.slice_frames(noisy_id, 1, m - 1)?;
        let ab = self.model.schedule.alpha_bar(t);
        let z0_hat = predict_clean_on(&mut tape, noisy_fut, eps_fut, ab)?;
        let z0_hat = self.model.refine_on(&mut tape, &bind, z0_hat, z_d_hat)?;

        let l_x = losses::image_latent_loss(&mut tape, eps_fut, eps_true, z0_hat, z_x_fut, tcfg.w_struct)?;
        let (l_d, l_ssi) = match z_d_hat {
            Some(z_d_hat) => {
                let z_d_hat_fut = tape.slice_frames(z_d_hat, 1, m - 1)?;
                let l_d = losses::depth_latent_loss(&mut tape, z_d_hat_fut, z_d_fut_true)?;
                // decode through the frozen shared decoder and score per frame
                let d_pred = self.codec.decode_depth_on(&mut tape, &codec_bind, z_d_hat_fut)?;
                let mut acc = None;
                for f in 0..m - 1 {
                    let pf = tape.slice_frames(d_pred, f, 1)?;
                    let gt = &seq.gt01[f + 1];
                    let gt_id = tape.constant(Tensor::new(
                        vec![1, 1, gt.shape[1], gt.shape[2]],
                        gt.data.clone(),
                    ));
                    let va = &seq.valid[f + 1];
                    let va_id = tape.constant(Tensor::new(
                        vec![1, 1, va.shape[1], va.shape[2]],
                        va.data.clone(),
                    ));
                    let out = losses::ssi_loss(&mut tape, pf, gt_id, va_id)?;
                    acc = Some(match acc {
                        None => out.loss,
                        Some(a) => tape.add(a, out.loss)?,
                    });
                }
                let l_ssi = tape.scale(acc.expect("m >= 2"), 1.0 / (m - 1) as f64);
                (l_d, l_ssi)
            }
            None => {
                let z = tape.constant(Tensor::scalar(0.0));
                (z, z)
            }
        };

        let report = LossReport::new(
            tape.value(l_x).item(),
            tape.value(l_d).item(),
            tape.value(l_ssi).item(),
            tcfg.lambda,
        );
        for (name, v) in [("l_x", report.l_x), ("l_d", report.l_d), ("l_ssi", report.l_ssi)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("{name} at step {}", self.step) });
            }
        }

        let (c_x, c_d, c_ssi) = WorldModel::mode_coefficients(tcfg.mode, tcfg.w_depth, tcfg.lambda);
        let ox = tape.scale(l_x, c_x);
        let od = tape.scale(l_d, c_d);
        let os = tape.scale(l_ssi, c_ssi);
        let objective = {
            let a = tape.add(ox, od)?;
            tape.add(a, os)?
        };
        tape.backward(objective)?;

        let grads: Vec<Option<Vec<f64>>> =
            bind.all().iter().map(|&id| tape.grad(id).map(|g| g.to_vec())).collect();
        Ok((report, grads))
    }
}

/// Drive a full training run over a dataset, logging per step and writing
/// checkpoints at the configured interval into `out_dir` when given.
pub fn run_training(
    state: &mut TrainState,
    dataset: &Dataset,
    out_dir: Option<&Path>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<()> {
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("train", "no training sequences"));
    }
    let mut cache: HashMap<usize, Arc<CachedSeq>> = HashMap::new();
    let steps = state.config.train.steps as u64;
    let interval = state.config.train.checkpoint_interval as u64;

    while state.step < steps {
        let idx = train_idx[state.data_rng.gen_range(0..train_idx.len())];
        if !cache.contains_key(&idx) {
            let seq = dataset.load_sequence(idx)?;
            cache.insert(idx, Arc::new(encode_sequence(&state.codec, &seq)?));
        }
        let cached = Arc::clone(&cache[&idx]);
        let log = match state.train_step(&cached) {
            Ok(log) => log,
            Err(e) => {
                if let Some(dir) = out_dir {
                    // leave a diagnostic trail before aborting the run
                    let _ = save_checkpoint(state, &dir.join("ckpt_diagnostic.uf4d"));
                }
                return Err(e);
            }
        };
        on_log(&log);
        if let Some(dir) = out_dir {
            if state.step % interval == 0 || state.step == steps {
                save_checkpoint(state, &dir.join(format!("ckpt_{:06}.uf4d", state.step)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, &dir.join("ckpt_final.uf4d"))?;
    }
    Ok(())
}

// ── checkpoint format ───────────────────────────────────────────────

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_blobs(w: &mut impl Write, entries: &[(String, Vec<usize>, &[f64])]) -> Result<()> {
    write_u64(w, entries.len() as u64)?;
    for (name, shape, data) in entries {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(w, shape.len() as u64)?;
        for &d in shape {
            write_u64(w, d as u64)?;
        }
        for &v in *data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

type Blobs = Vec<(String, Vec<usize>, Vec<f64>)>;

fn read_blobs(r: &mut impl Read) -> Result<Blobs> {
    let count = read_u64(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let ndim = read_u64(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn store_blobs<'a>(store: &'a ParamStore, extra: &'a [Vec<f64>]) -> Vec<(String, Vec<usize>, &'a [f64])> {
    store
        .iter()
        .zip(extra)
        .map(|((name, t), data)| (name.to_string(), t.shape.clone(), data.as_slice()))
        .collect()
}

fn param_blobs(store: &ParamStore) -> Vec<(String, Vec<usize>, &[f64])> {
    store.iter().map(|(name, t)| (name.to_string(), t.shape.clone(), t.data.as_slice())).collect()
}

/// Overwrite a freshly built store from named blobs; every parameter must be
/// present with the right shape.
fn restore_store(store: &mut ParamStore, blobs: Blobs, what: &str) -> Result<()> {
    let mut map: HashMap<String, (Vec<usize>, Vec<f64>)> =
        blobs.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let (shape, data) = map
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("{what}: missing parameter {name}")))?;
        if shape != store.get(id).shape {
            return Err(Error::Format(format!(
                "{what}: shape mismatch for {name}: {:?} vs {:?}",
                shape,
                store.get(id).shape
            )));
        }
        store.set_data(id, data);
    }
    if let Some(name) = map.keys().next() {
        return Err(Error::Format(format!("{what}: unknown parameter {name}")));
    }
    Ok(())
}

fn write_rng_state(w: &mut impl Write, s: &RngState) -> Result<()> {
    w.write_all(&s.seed)?;
    write_u64(w, s.stream)?;
    w.write_all(&s.word_pos.to_le_bytes())?;
    Ok(())
}

fn read_rng_state(r: &mut impl Read) -> Result<RngState> {
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let stream = read_u64(r)?;
    let mut wp = [0u8; 16];
    r.read_exact(&mut wp)?;
    Ok(RngState { seed, stream, word_pos: u128::from_le_bytes(wp) })
}

/// Versioned container: config, parameters, EMA, optimizer moments, RNG
/// stream positions, and the frozen codec. `load(save(state))` resumes
/// training bit-identically.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[KIND_TRAIN])?;
    write_u64(&mut w, state.step)?;
    let config = serde_json::to_string(&state.config)?;
    write_u64(&mut w, config.len() as u64)?;
    w.write_all(config.as_bytes())?;

    write_blobs(&mut w, &param_blobs(&state.model.store))?;
    write_blobs(&mut w, &store_blobs(&state.model.store, &state.ema.shadow))?;
    write_blobs(&mut w, &store_blobs(&state.model.store, &state.opt.m))?;
    write_blobs(&mut w, &store_blobs(&state.model.store, &state.opt.v))?;
    write_u64(&mut w, state.opt.t)?;
    write_rng_state(&mut w, &RngState::capture(&state.data_rng))?;
    write_rng_state(&mut w, &RngState::capture(&state.noise_rng))?;
    write_rng_state(&mut w, &RngState::capture(&state.dropout_rng))?;
    write_blobs(&mut w, &param_blobs(&state.codec.store))?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path, expect_kind: u8) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    if kind[0] != expect_kind {
        return Err(Error::Format(format!(
            "{}: checkpoint kind {} where {} was expected",
            path.display(),
            kind[0],
            expect_kind
        )));
    }
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<Config> {
    let config_len = read_u64(r)? as usize;
    let mut cfg_bytes = vec![0u8; config_len];
    r.read_exact(&mut cfg_bytes)?;
    Ok(serde_json::from_str(
        std::str::from_utf8(&cfg_bytes).map_err(|e| Error::Format(e.to_string()))?,
    )?)
}

/// Codec-only checkpoint in the same container format.
pub fn save_codec_checkpoint(codec: &Codec, config: &Config, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&[KIND_CODEC])?;
    let config = serde_json::to_string(config)?;
    write_u64(&mut w, config.len() as u64)?;
    w.write_all(config.as_bytes())?;
    write_blobs(&mut w, &param_blobs(&codec.store))?;
    Ok(())
}

pub fn load_codec_checkpoint(path: &Path) -> Result<(Codec, Config)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut r, path, KIND_CODEC)?;
    let config = read_config(&mut r)?;
    let blobs = read_blobs(&mut r)?;
    let mut codec = Codec::new(&config.codec, config.seed);
    restore_store(&mut codec.store, blobs, "codec")?;
    Ok((codec, config))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_header(&mut r, path, KIND_TRAIN)?;
    let step = read_u64(&mut r)?;
    let config = read_config(&mut r)?;

    let params = read_blobs(&mut r)?;
    let ema_blobs = read_blobs(&mut r)?;
    let m_blobs = read_blobs(&mut r)?;
    let v_blobs = read_blobs(&mut r)?;
    let adam_t = read_u64(&mut r)?;
    let data_rng = read_rng_state(&mut r)?;
    let noise_rng = read_rng_state(&mut r)?;
    let dropout_rng = read_rng_state(&mut r)?;
    let codec_blobs = read_blobs(&mut r)?;

    let mut codec = Codec::new(&config.codec, config.seed);
    restore_store(&mut codec.store, codec_blobs, "codec")?;
    let mut state = TrainState::new(&config, codec)?;
    restore_store(&mut state.model.store, params, "model")?;
    // ema / moments share the store's registration order
    let order: Vec<String> = state.model.store.iter().map(|(n, _)| n.to_string()).collect();
    let by_name = |blobs: Blobs, what: &str| -> Result<Vec<Vec<f64>>> {
        let mut map: HashMap<String, Vec<f64>> =
            blobs.into_iter().map(|(n, _, d)| (n, d)).collect();
        order
            .iter()
            .map(|n| map.remove(n).ok_or_else(|| Error::Format(format!("{what}: missing {n}"))))
            .collect()
    };
    state.ema.shadow = by_name(ema_blobs, "ema")?;
    state.opt.m = by_name(m_blobs, "adam.m")?;
    state.opt.v = by_name(v_blobs, "adam.v")?;
    state.opt.t = adam_t;
    state.step = step;
    state.data_rng = data_rng.restore();
    state.noise_rng = noise_rng.restore();
    state.dropout_rng = dropout_rng.restore();
    Ok(state)
}
