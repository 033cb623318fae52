//! Acceptance suite. Each criterion runs as one test and prints a final
//! verdict line; the slow training-dependent criteria share one fixture
//! (dataset -> pretrained codec -> five trained runs).

use fourcast::codec::{eval_recon_mae, pretrain_codec, replicate3, Codec, DepthNorm};
use fourcast::config::{Action, ActionLabel, Config, DepthPath, FeedbackKind, TrainMode};
use fourcast::dataset::{write_dataset, Dataset, Split};
use fourcast::diffusion::{
    build_inference_volume, cfg_combine, ddim_step, denoise_loop, forward_noise, Denoiser,
    LatentVolume, NoiseSchedule, RolloutOptions,
};
use fourcast::losses;
use fourcast::metrics;
use fourcast::model::{evaluate, predict_clean_on, rollout_from_frame, WorldModel};
use fourcast::optim::Ema;
use fourcast::params::ParamStore;
use fourcast::pointcloud::{backproject, reproject, Intrinsics};
use fourcast::rng;
use fourcast::tensor::gradcheck::{grad_check, grad_check_sampled};
use fourcast::tensor::{Tape, Tensor, TensorId};
use fourcast::trainer::{
    encode_sequence, load_checkpoint, run_training, sample_action_dropout, save_checkpoint,
    CachedSeq, TrainState,
};
use fourcast::world::{generate, SceneSpec};
use rand::Rng;
use std::sync::OnceLock;

fn verdict(name: &str, ok: bool, detail: &str) {
    println!("{name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name} failed: {detail}");
}

// ── shared slow fixture ─────────────────────────────────────────────

struct TrainedRun {
    state: TrainState,
    totals: Vec<f64>,
}

struct Fixture {
    _dir: tempfile::TempDir,
    dataset: Dataset,
    cfg: Config,
    pretrain_mse: Vec<f64>,
    codec_val_mae: f64,
    joint: TrainedRun,
    stub: TrainedRun,
    image_only: TrainedRun,
    depth_only: TrainedRun,
    detach: TrainedRun,
}

/// Desk-scale acceptance config: 32x64 frames, 8x8x16 latent, M = 5,
/// ~1e5 parameters, 2000 steps on 200 sequences.
fn acceptance_config() -> Config {
    let mut cfg = Config::toy();
    cfg.train.lr = 3e-4;
    cfg.train.steps = 2000;
    cfg
}

fn codec_frames(dataset: &Dataset, split: Split) -> Vec<Tensor> {
    let mut frames = Vec::new();
    for idx in dataset.indices(split) {
        let seq = dataset.load_sequence(idx).unwrap();
        for f in &seq.rgb {
            frames.push(f.clone());
        }
        for d in &seq.depth {
            let (d01, _) = DepthNorm::normalize(d);
            let rep = replicate3(&d01);
            frames.push(Tensor::new(rep.shape[1..].to_vec(), rep.data));
        }
    }
    frames
}

fn train_run(cfg: &Config, codec: Codec, dataset: &Dataset) -> TrainedRun {
    let mut state = TrainState::new(cfg, codec).unwrap();
    let mut totals = Vec::with_capacity(cfg.train.steps);
    run_training(&mut state, dataset, None, |log| totals.push(log.report.total)).unwrap();
    TrainedRun { state, totals }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = acceptance_config();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cfg).unwrap();
        let dataset = Dataset::open(dir.path()).unwrap();

        let train_frames = codec_frames(&dataset, Split::Train);
        let val_frames = codec_frames(&dataset, Split::Val);
        let (codec, report) =
            pretrain_codec(&cfg.codec, cfg.seed, &train_frames, &val_frames).unwrap();
        let codec_val_mae = eval_recon_mae(&codec, &val_frames).unwrap();

        let joint_cfg = cfg.clone();
        let stub_cfg = {
            let mut c = cfg.clone();
            c.mli.depth_path = DepthPath::ConvStub;
            c.mli.inside = false;
            c.mli.outside = false;
            c
        };
        let mode_cfg = |mode: TrainMode| {
            let mut c = cfg.clone();
            c.train.mode = mode;
            c
        };

        let (joint, stub, image_only, depth_only, detach) = std::thread::scope(|s| {
            let joint = s.spawn(|| train_run(&joint_cfg, codec.clone(), &dataset));
            let stub = s.spawn(|| train_run(&stub_cfg, codec.clone(), &dataset));
            let image_only =
                s.spawn(|| train_run(&mode_cfg(TrainMode::ImageOnly), codec.clone(), &dataset));
            let depth_only =
                s.spawn(|| train_run(&mode_cfg(TrainMode::DepthOnly), codec.clone(), &dataset));
            let detach =
                s.spawn(|| train_run(&mode_cfg(TrainMode::DetachGrad), codec.clone(), &dataset));
            (
                joint.join().unwrap(),
                stub.join().unwrap(),
                image_only.join().unwrap(),
                depth_only.join().unwrap(),
                detach.join().unwrap(),
            )
        });

        Fixture {
            _dir: dir,
            dataset,
            cfg,
            pretrain_mse: report.eval_mse,
            codec_val_mae,
            joint,
            stub,
            image_only,
            depth_only,
            detach,
        }
    })
}

/// Small fast config for graph-level checks.
fn tiny_config() -> Config {
    let mut cfg = Config::toy();
    cfg.data.frames = 3;
    cfg.data.sequences = 4;
    cfg.data.val_fraction = 0.25;
    cfg.codec.hidden = 6;
    cfg.model.base_channels = 4;
    cfg.model.channel_mults = [1, 1, 1, 1];
    cfg.model.temb_dim = 8;
    cfg.diffusion.timesteps = 20;
    cfg.diffusion.sample_steps = 5;
    cfg.train.steps = 2;
    cfg.train.lr = 1e-3;
    cfg
}

fn tiny_cached(cfg: &Config, index: u64) -> CachedSeq {
    let codec = Codec::new(&cfg.codec, cfg.seed);
    let spec = SceneSpec::sample(cfg.seed, index, &cfg.data).unwrap();
    encode_sequence(&codec, &generate(&spec)).unwrap()
}

fn cond_frame(seed: u64) -> Tensor {
    let cfg = Config::toy();
    let spec = SceneSpec::sample(seed, 1, &cfg.data).unwrap();
    generate(&spec).rgb[0].clone()
}

// ── criterion 1 ─────────────────────────────────────────────────────

#[test]
fn criterion_01_zero_init_equivalence() {
    let base = {
        let mut c = Config::toy();
        c.diffusion.sample_steps = 12;
        c
    };
    let codec = Codec::new(&base.codec, base.seed);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut cfg_on = base.clone();
        cfg_on.seed = 100 + seed;
        let mut cfg_off = cfg_on.clone();
        cfg_off.mli.enabled = false;

        // same init stream prefix: identical UNet weights with and without MLI
        let on = WorldModel::new(&cfg_on).unwrap();
        let off = WorldModel::new(&cfg_off).unwrap();

        let frame = cond_frame(seed);
        let opts = RolloutOptions { guidance_scale: 1.0, steps: cfg_on.diffusion.sample_steps };
        let a = rollout_from_frame(&on, &codec, None, &frame, ActionLabel::Straight, 5, seed, &opts)
            .unwrap();
        let b = rollout_from_frame(&off, &codec, None, &frame, ActionLabel::Straight, 5, seed, &opts)
            .unwrap();
        assert!(a.rollout.depth_latents.is_some(), "MLI run must still produce a depth latent");
        assert!(b.rollout.depth_latents.is_none());
        for (x, y) in a.rollout.volume.data.data.iter().zip(&b.rollout.volume.data.data) {
            let d = (x - y).abs();
            worst = worst.max(d);
            assert!(x == y, "rollouts diverged by {d}");
        }
    }
    verdict("ACCEPT-01 zero-init-equivalence", true, &format!("10 seeds, max |diff| = {worst:e}"));
}

// ── criterion 2 ─────────────────────────────────────────────────────

fn rand_t(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::randn(shape, r)
}

#[test]
fn criterion_02_gradient_correctness() {
    let mut r = rng::stream(2024, "gradcheck");
    let mut checked = 0;

    // every primitive op, 20 random instances each
    for i in 0..20 {
        let shape = [2, 3, 4, 6];
        let sq_sum = |tp: &mut Tape, y: TensorId| {
            let s = tp.mul(y, y).unwrap();
            tp.sum(s)
        };

        let binary_ops: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId, TensorId) -> TensorId>)> = vec![
            ("add", Box::new(|tp, a, b| tp.add(a, b).unwrap())),
            ("sub", Box::new(|tp, a, b| tp.sub(a, b).unwrap())),
            ("mul", Box::new(|tp, a, b| tp.mul(a, b).unwrap())),
        ];
        for (name, op) in binary_ops {
            let rep = grad_check(
                |tp, ids| {
                    let y = op(tp, ids[0], ids[1]);
                    sq_sum(tp, y)
                },
                &[rand_t(&shape, &mut r), rand_t(&shape, &mut r)],
                1e-5,
                1e-4,
            );
            assert!(rep.pass, "{name}[{i}]: {}", rep.max_rel_err);
            checked += 1;
        }

        // div on values away from zero
        let mut a = rand_t(&[1, 1, 2, 2], &mut r);
        let mut b = rand_t(&[1, 1, 2, 2], &mut r);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = v.abs() + 0.5;
        }
        let rep = grad_check(
            |tp, ids| {
                let y = tp.div(ids[0], ids[1]).unwrap();
                sq_sum(tp, y)
            },
            &[a, b],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "div[{i}]: {}", rep.max_rel_err);

        // unary and scalar-broadcast ops
        let rep = grad_check(
            |tp, ids| {
                let s1 = tp.scale(ids[0], 1.7);
                let s2 = tp.add_const(s1, 0.3);
                let s3 = tp.silu(s2);
                let s4 = tp.abs(s3);
                let scal = tp.sum(ids[1]);
                let s5 = tp.mul_scalar(s4, scal).unwrap();
                let s6 = tp.add_scalar(s5, scal).unwrap();
                tp.sum(s6)
            },
            &[rand_t(&shape, &mut r), rand_t(&[1], &mut r)],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "unary-chain[{i}]: {}", rep.max_rel_err);
        checked += 2;

        // conv2d stride 1 and stride 2
        for (stride, pad, hw) in [(1usize, 1usize, (4usize, 6usize)), (2, 1, (5, 7))] {
            let rep = grad_check(
                |tp, ids| {
                    let y = tp.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap();
                    sq_sum(tp, y)
                },
                &[
                    rand_t(&[2, 3, hw.0, hw.1], &mut r),
                    rand_t(&[4, 3, 3, 3], &mut r),
                    rand_t(&[4], &mut r),
                ],
                1e-5,
                1e-4,
            );
            assert!(rep.pass, "conv2d s{stride}[{i}]: {}", rep.max_rel_err);
            checked += 1;
        }

        // temporal conv, resampling, norm, layout ops
        let rep = grad_check(
            |tp, ids| {
                let t = tp.temporal_conv(ids[0], ids[1]).unwrap();
                let d = tp.down2(t).unwrap();
                let u = tp.up2(d).unwrap();
                let n = tp.channel_norm(u, ids[2], ids[3], 1e-5).unwrap();
                let c = tp.concat_channels(&[n, u]).unwrap();
                let f0 = tp.slice_frames(c, 0, 1).unwrap();
                let f1 = tp.slice_frames(c, 1, 1).unwrap();
                let cf = tp.concat_frames(&[f1, f0]).unwrap();
                let bias = tp.select_row(ids[4], 1).unwrap();
                let cb = tp.add_channel_bias(cf, bias).unwrap();
                let dh = tp.diff_h(cb).unwrap();
                let dw = tp.diff_w(dh).unwrap();
                let rs = tp.reshape(dw, &[dw_numel(tp, dw)]).unwrap();
                sq_sum(tp, rs)
            },
            &[
                rand_t(&[2, 3, 4, 6], &mut r),
                rand_t(&[3, 3], &mut r),
                rand_t(&[3], &mut r),
                rand_t(&[3], &mut r),
                rand_t(&[4, 6], &mut r),
            ],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "structured-chain[{i}]: {}", rep.max_rel_err);
        checked += 1;
    }

    // the three loss terms, 20 instances each
    let mut r2 = rng::stream(2025, "gradcheck");
    for i in 0..20 {
        let eps_true = rand_t(&[2, 2, 4, 4], &mut r2);
        let z_x = rand_t(&[2, 2, 4, 4], &mut r2);
        let rep = grad_check(
            |tp, ids| {
                let t = tp.constant(eps_true.clone());
                let zt = tp.constant(z_x.clone());
                losses::image_latent_loss(tp, ids[0], t, ids[1], zt, 0.1).unwrap()
            },
            &[rand_t(&[2, 2, 4, 4], &mut r2), rand_t(&[2, 2, 4, 4], &mut r2)],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "l_x[{i}]: {}", rep.max_rel_err);

        let z_d = rand_t(&[2, 2, 4, 4], &mut r2);
        let rep = grad_check(
            |tp, ids| {
                let t = tp.constant(z_d.clone());
                losses::depth_latent_loss(tp, ids[0], t).unwrap()
            },
            &[rand_t(&[2, 2, 4, 4], &mut r2)],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "l_d[{i}]: {}", rep.max_rel_err);

        let mut gt = rand_t(&[1, 1, 4, 4], &mut r2);
        let mut pred = rand_t(&[1, 1, 4, 4], &mut r2);
        for v in gt.data.iter_mut() {
            *v = 0.3 + v.abs();
        }
        for v in pred.data.iter_mut() {
            *v = 0.2 + v.abs();
        }
        let rep = grad_check(
            |tp, ids| {
                let g = tp.constant(gt.clone());
                let m = tp.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
                losses::ssi_loss(tp, ids[0], g, m).unwrap().loss
            },
            &[pred],
            1e-5,
            1e-4,
        );
        assert!(rep.pass, "l_ssi[{i}]: {}", rep.max_rel_err);
        checked += 3;
    }

    // depth head + inside/outside feedback through the assembled graph,
    // with random-init feedback so the paths carry gradient
    let mut cfg = tiny_config();
    cfg.mli.feedback = FeedbackKind::Random;
    let model = WorldModel::new(&cfg).unwrap();
    let codec = Codec::new(&cfg.codec, cfg.seed);
    let mut r3 = rng::stream(2026, "gradcheck");
    for i in 0..20 {
        let vol = rand_t(&[3, 8, 8, 16], &mut r3);
        let eps_true = rand_t(&[2, 8, 8, 16], &mut r3);
        let z_x = rand_t(&[2, 8, 8, 16], &mut r3);
        let z_d_true = rand_t(&[2, 8, 8, 16], &mut r3);
        let rep = grad_check_sampled(
            |tp, ids| {
                let bind = model.store.bind(tp, false);
                let cbind = codec.store.bind(tp, false);
                let (eps, z_d) = model.forward_on(tp, &bind, ids[0], 7, ActionLabel::Left, false).unwrap();
                let eps_fut = tp.slice_frames(eps, 1, 2).unwrap();
                let noisy_fut = tp.slice_frames(ids[0], 1, 2).unwrap();
                let z0 = predict_clean_on(tp, noisy_fut, eps_fut, model.schedule.alpha_bar(7)).unwrap();
                let z0 = model.refine_on(tp, &bind, z0, z_d).unwrap();
                let et = tp.constant(eps_true.clone());
                let zt = tp.constant(z_x.clone());
                let l_x = losses::image_latent_loss(tp, eps_fut, et, z0, zt, 0.1).unwrap();
                let z_d = z_d.unwrap();
                let z_d_fut = tp.slice_frames(z_d, 1, 2).unwrap();
                let zdt = tp.constant(z_d_true.clone());
                let l_d = losses::depth_latent_loss(tp, z_d_fut, zdt).unwrap();
                // one decoded-SSI frame keeps the check fast
                let d_px = codec.decode_depth_on(tp, &cbind, z_d_fut).unwrap();
                let p0 = tp.slice_frames(d_px, 0, 1).unwrap();
                let g = tp.constant(Tensor::full(&[1, 1, 32, 64], 0.4));
                let m = tp.constant(Tensor::full(&[1, 1, 32, 64], 1.0));
                let l_ssi = losses::ssi_loss(tp, p0, g, m).unwrap().loss;
                losses::total_loss(tp, l_x, l_d, l_ssi, 0.5).unwrap()
            },
            &[vol],
            1e-5,
            1e-4,
            40,
            900 + i,
        );
        assert!(rep.pass, "assembled-graph[{i}]: {}", rep.max_rel_err);
        checked += 1;
    }

    // parameter gradients of the assembled model, sampled coordinates
    let cached = tiny_cached(&cfg, 1);
    let param_rep = check_param_grads(&cfg, &cached, 60);
    assert!(param_rep <= 1e-4, "param grads max rel err {param_rep}");
    checked += 1;

    verdict("ACCEPT-02 gradient-correctness", true, &format!("{checked} checks, tol 1e-4"));
}

fn dw_numel(tp: &Tape, id: TensorId) -> usize {
    tp.shape(id).iter().product()
}

/// Analytic vs central-difference gradients for sampled parameter
/// coordinates of the full training objective.
fn check_param_grads(cfg: &Config, cached: &CachedSeq, samples: usize) -> f64 {
    let codec = Codec::new(&cfg.codec, cfg.seed);
    let model = WorldModel::new(cfg).unwrap();
    let t = 7;
    let m = cached.z_x.shape[0];
    let mut nrng = rng::stream(5, "noise");
    let mut fut_shape = cached.z_x.shape.clone();
    fut_shape[0] = m - 1;
    let eps = Tensor::randn(&fut_shape, &mut nrng);
    let z0_vol = LatentVolume::new(cached.z_x.clone(), true).unwrap();
    let noisy = forward_noise(&z0_vol, &model.schedule, t, &eps).unwrap();

    let loss_of = |store: &ParamStore, want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = if want_grads { Tape::new() } else { Tape::no_grad() };
        let bind = store.bind(&mut tape, want_grads);
        let cbind = codec.store.bind(&mut tape, false);
        let noisy_id = tape.constant(noisy.data.clone());
        let eps_true = tape.constant(eps.clone());
        let z_x_fut = tape.constant(z0_vol.future());
        let (eps_vol, z_d) =
            model.forward_on(&mut tape, &bind, noisy_id, t, ActionLabel::Right, false).unwrap();
        let eps_fut = tape.slice_frames(eps_vol, 1, m - 1).unwrap();
        let noisy_fut = tape.slice_frames(noisy_id, 1, m - 1).unwrap();
        let z0 = predict_clean_on(&mut tape, noisy_fut, eps_fut, model.schedule.alpha_bar(t)).unwrap();
        let z0 = model.refine_on(&mut tape, &bind, z0, z_d).unwrap();
        let l_x = losses::image_latent_loss(&mut tape, eps_fut, eps_true, z0, z_x_fut, 0.1).unwrap();
        let z_d = z_d.unwrap();
        let z_d_fut = tape.slice_frames(z_d, 1, m - 1).unwrap();
        let z_d_true = {
            let vol = LatentVolume::new(cached.z_d.clone(), true).unwrap();
            tape.constant(vol.future())
        };
        let l_d = losses::depth_latent_loss(&mut tape, z_d_fut, z_d_true).unwrap();
        let d_px = codec.decode_depth_on(&mut tape, &cbind, z_d_fut).unwrap();
        let p0 = tape.slice_frames(d_px, 0, 1).unwrap();
        let gt = &cached.gt01[1];
        let g = tape.constant(Tensor::new(vec![1, 1, gt.shape[1], gt.shape[2]], gt.data.clone()));
        let va = &cached.valid[1];
        let mk = tape.constant(Tensor::new(vec![1, 1, va.shape[1], va.shape[2]], va.data.clone()));
        let l_ssi = losses::ssi_loss(&mut tape, p0, g, mk).unwrap().loss;
        let total = losses::total_loss(&mut tape, l_x, l_d, l_ssi, 0.5).unwrap();
        let v = tape.value(total).item();
        if want_grads {
            tape.backward(total).unwrap();
            let grads = bind.all().iter().map(|&id| tape.grad(id).unwrap_or(&[]).to_vec()).collect();
            (v, Some(grads))
        } else {
            (v, None)
        }
    };

    let (_, grads) = loss_of(&model.store, true);
    let grads = grads.unwrap();
    let mut check_rng = rng::stream(77, "paramcheck");
    let h = 1e-5;
    let mut max_rel: f64 = 0.0;
    let n_params = model.store.len();
    for _ in 0..samples {
        let pi = check_rng.gen_range(0..n_params);
        let id = model.store.ids().nth(pi).unwrap();
        let numel = model.store.get(id).numel();
        let ei = check_rng.gen_range(0..numel);
        let mut plus = model.store.clone();
        let mut d = plus.get(id).data.clone();
        d[ei] += h;
        plus.set_data(id, d);
        let mut minus = model.store.clone();
        let mut d = minus.get(id).data.clone();
        d[ei] -= h;
        minus.set_data(id, d);
        let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
        let analytic = grads[pi].get(ei).copied().unwrap_or(0.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

// ── criterion 3 ─────────────────────────────────────────────────────

#[test]
fn criterion_03_ssi_properties() {
    let mut r = rng::stream(3000, "ssi");
    // affine invariance within 1e-9
    for _ in 0..20 {
        let gt = Tensor::randn(&[1, 1, 8, 8], &mut r);
        let pred = Tensor::randn(&[1, 1, 8, 8], &mut r);
        let a = 0.2 + r.gen::<f64>() * 3.0;
        let b = r.gen::<f64>() * 6.0 - 3.0;
        let mut affine = pred.clone();
        for v in &mut affine.data {
            *v = a * *v + b;
        }
        let mut tape = Tape::new();
        let (p1, p2) = (tape.constant(pred), tape.constant(affine));
        let g = tape.constant(gt);
        let m = tape.constant(Tensor::full(&[1, 1, 8, 8], 1.0));
        let l1 = losses::ssi_loss(&mut tape, p1, g, m).unwrap();
        let l2 = losses::ssi_loss(&mut tape, p2, g, m).unwrap();
        let (v1, v2) = (tape.value(l1.loss).item(), tape.value(l2.loss).item());
        assert!((v1 - v2).abs() < 1e-9, "affine invariance: {v1} vs {v2}");
    }
    // exact positive-slope affine prediction scores zero
    for _ in 0..20 {
        let gt = Tensor::randn(&[1, 1, 8, 8], &mut r);
        let mut pred = gt.clone();
        let a = 0.2 + r.gen::<f64>() * 3.0;
        let b = r.gen::<f64>() * 6.0 - 3.0;
        for v in &mut pred.data {
            *v = a * *v + b;
        }
        let mut tape = Tape::new();
        let p = tape.constant(pred);
        let g = tape.constant(gt);
        let m = tape.constant(Tensor::full(&[1, 1, 8, 8], 1.0));
        let out = losses::ssi_loss(&mut tape, p, g, m).unwrap();
        let v = tape.value(out.loss).item();
        assert!(v >= 0.0 && v < 1e-9, "exact affine must score ~0, got {v}");
    }
    // degenerate fallback exact per formula
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::full(&[1, 1, 2, 2], 3.3));
    let g = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 4.0, 9.0]));
    let m = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let out = losses::ssi_loss(&mut tape, p, g, m).unwrap();
    assert!(out.degenerate);
    let mean = 4.0;
    let expect = (3.0 + 2.0 + 0.0 + 5.0) / 4.0;
    assert_eq!(out.shift, mean);
    assert!((tape.value(out.loss).item() - expect).abs() < 1e-15);

    verdict("ACCEPT-03 ssi-properties", true, "affine invariance 1e-9, exact-affine zero, degenerate exact");
}

// ── criterion 4 ─────────────────────────────────────────────────────

/// Independent alignment route: covariance form instead of the 2x2
/// determinant form used by the implementation.
fn oracle_align(pred: &[f64], gt: &[f64], mask: &[f64]) -> (f64, f64) {
    let n: f64 = mask.iter().sum();
    let mp = pred.iter().zip(mask).map(|(p, m)| p * m).sum::<f64>() / n;
    let mg = gt.iter().zip(mask).map(|(g, m)| g * m).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for i in 0..pred.len() {
        cov += mask[i] * (pred[i] - mp) * (gt[i] - mg);
        var += mask[i] * (pred[i] - mp) * (pred[i] - mp);
    }
    let s = cov / var;
    (s, mg - s * mp)
}

#[test]
fn criterion_04_metric_oracles() {
    let mut r = rng::stream(4000, "metrics");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = 64;
        let gt_v: Vec<f64> = (0..n).map(|_| 0.5 + r.gen::<f64>() * 4.5).collect();
        let pred_v: Vec<f64> = (0..n).map(|_| 0.3 + r.gen::<f64>() * 5.7).collect();
        let mask_v: Vec<f64> = (0..n).map(|_| if r.gen::<f64>() < 0.2 { 0.0 } else { 1.0 }).collect();
        let gt = Tensor::new(vec![1, 8, 8], gt_v.clone());
        let pred = Tensor::new(vec![1, 8, 8], pred_v.clone());
        let mask = Tensor::new(vec![1, 8, 8], mask_v.clone());

        // brute-force protocol: independent alignment, then naive loops
        let (s, b) = oracle_align(&pred_v, &gt_v, &mask_v);
        let aligned: Vec<f64> = pred_v.iter().map(|p| s * p + b).collect();
        let mut absrel_acc = 0.0;
        let mut nn = 0.0;
        let mut hits = [0.0; 3];
        for i in 0..n {
            if mask_v[i] > 0.0 {
                nn += 1.0;
                absrel_acc += (aligned[i] - gt_v[i]).abs() / gt_v[i];
                for (k, hit) in hits.iter_mut().enumerate() {
                    let thresh = 1.25f64.powi(k as i32 + 1);
                    if aligned[i] > 0.0 && (aligned[i] / gt_v[i]).max(gt_v[i] / aligned[i]) < thresh {
                        *hit += 1.0;
                    }
                }
            }
        }
        let oracle_absrel = absrel_acc / nn;

        let dm = metrics::depth_metrics(&pred, &gt, &mask);
        worst = worst.max((dm.absrel - oracle_absrel).abs());
        assert!((dm.absrel - oracle_absrel).abs() < 1e-12, "{} vs {}", dm.absrel, oracle_absrel);
        for (k, d) in [dm.delta1, dm.delta2, dm.delta3].into_iter().enumerate() {
            let o = hits[k] / nn;
            worst = worst.max((d - o).abs());
            assert!((d - o).abs() < 1e-12, "delta{}: {} vs {}", k + 1, d, o);
        }
    }

    // ratio-2 example: 1.25^3 = 1.953125 < 2 keeps delta3 at 0.5
    assert_eq!(1.25f64.powi(3), 1.953125);
    let pred = [2.0, 2.0, 1.0, 1.0];
    let gt = [1.0, 1.0, 1.0, 1.0];
    let m = [1.0; 4];
    for k in 1..=3 {
        assert_eq!(metrics::delta_k_raw(&pred, &gt, &m, k), 0.5);
    }

    verdict("ACCEPT-04 metric-oracles", true, &format!("20 seeds, max |diff| = {worst:e}"));
}

// ── criterion 5 ─────────────────────────────────────────────────────

#[test]
fn criterion_05_geometry_roundtrip() {
    let k = Intrinsics::new(63.7, 41.2, 31.1, 16.9).unwrap();
    let mut r = rng::stream(5000, "geom");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut depth = Tensor::zeros(&[1, 8, 12]);
        for v in &mut depth.data {
            *v = 0.5 + r.gen::<f64>() * 20.0;
        }
        let rgb = Tensor::zeros(&[3, 8, 12]);
        let pc = backproject(&depth, &rgb, &k, 0).unwrap();
        let mut it = pc.points.iter();
        for v in 0..8 {
            for u in 0..12 {
                let p = it.next().unwrap();
                let (ru, rv) = reproject(p.x, p.y, p.z, &k);
                worst = worst.max((ru - u as f64).abs()).max((rv - v as f64).abs());
                assert!((ru - u as f64).abs() < 1e-12 && (rv - v as f64).abs() < 1e-12);
                assert_eq!(p.z, depth.data[v * 12 + u]);
            }
        }
    }

    // principal point: depth 1 at (cx, cy) -> (0, 0, 1)
    let k2 = Intrinsics::new(100.0, 100.0, 2.0, 1.0).unwrap();
    let mut depth = Tensor::full(&[1, 3, 5], f64::INFINITY);
    depth.data[5 + 2] = 1.0;
    let pc = backproject(&depth, &Tensor::zeros(&[3, 3, 5]), &k2, 0).unwrap();
    assert_eq!((pc.points[0].x, pc.points[0].y, pc.points[0].z), (0.0, 0.0, 1.0));

    // off-axis: fx=fy=100, c=0, pixel (100, 0), z=2 -> (2, 0, 2)
    let k3 = Intrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap();
    let mut depth = Tensor::full(&[1, 1, 101], f64::INFINITY);
    depth.data[100] = 2.0;
    let pc = backproject(&depth, &Tensor::zeros(&[3, 1, 101]), &k3, 0).unwrap();
    assert_eq!((pc.points[0].x, pc.points[0].y, pc.points[0].z), (2.0, 0.0, 2.0));

    verdict("ACCEPT-05 geometry-roundtrip", true, &format!("max |diff| = {worst:e}"));
}

// ── criterion 6 ─────────────────────────────────────────────────────

struct Cheat {
    true_future: Tensor,
    schedule: NoiseSchedule,
}

impl Denoiser for Cheat {
    fn denoise(
        &self,
        vol: &LatentVolume,
        t: usize,
        _action: ActionLabel,
    ) -> fourcast::Result<(Tensor, Option<Tensor>)> {
        let z_t = vol.future();
        let ab = self.schedule.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data: Vec<f64> = z_t
            .data
            .iter()
            .zip(&self.true_future.data)
            .map(|(&zt, &z0)| (zt - a * z0) / b)
            .collect();
        Ok((Tensor::new(z_t.shape.clone(), data), None))
    }
}

#[test]
fn criterion_06_diffusion_algebra() {
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let mut r = rng::stream(6000, "diff");
    let target = LatentVolume::new(Tensor::randn(&[5, 4, 4, 8], &mut r), true).unwrap();
    let cheat = Cheat { true_future: target.future(), schedule: schedule.clone() };

    // single-step recovery from every training timestep
    let mut worst: f64 = 0.0;
    for t in 1..=100 {
        let eps = Tensor::randn(&[4, 4, 4, 8], &mut r);
        let noised = forward_noise(&target, &schedule, t, &eps).unwrap();
        let (eps_hat, _) = cheat.denoise(&noised, t, ActionLabel::Null).unwrap();
        let rec = ddim_step(&noised.future(), &eps_hat, schedule.alpha_bar(t), 1.0);
        for (a, b) in rec.data.iter().zip(&target.future().data) {
            worst = worst.max((a - b).abs());
            assert!((a - b).abs() < 1e-9, "t={t}");
        }
    }

    // guidance endpoints are exact
    let u = Tensor::randn(&[2, 4, 4, 8], &mut r);
    let c = Tensor::randn(&[2, 4, 4, 8], &mut r);
    assert_eq!(cfg_combine(&u, &c, 1.0).data, c.data);
    assert_eq!(cfg_combine(&u, &c, 0.0).data, u.data);

    // condition frame is bit-immutable through the whole loop
    let cond = fourcast::codec::LatentGrid {
        tensor: target.condition(),
        modality: fourcast::codec::Modality::Image,
        norm: None,
    };
    let start = build_inference_volume(&cond, 5, 31).unwrap();
    let before: Vec<u64> = start.condition().data.iter().map(|v| v.to_bits()).collect();
    let opts = RolloutOptions { guidance_scale: 1.0, steps: 25 };
    let out = denoise_loop(&start, &cheat, &schedule, ActionLabel::Straight, &opts).unwrap();
    let after: Vec<u64> = out.volume.condition().data.iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);

    verdict("ACCEPT-06 diffusion-algebra", true, &format!("oracle max |diff| = {worst:e}"));
}

// ── criterion 7 ─────────────────────────────────────────────────────

#[test]
fn criterion_07_trainer_mechanics() {
    // EMA closed form at n = 17 to 1e-12
    let (p, ema0, decay, n) = (2.5, -1.0, 0.9, 17);
    let mut store = ParamStore::new();
    store.register("p", Tensor::scalar(p));
    let mut ema = Ema::new(decay, &store);
    ema.shadow[0][0] = ema0;
    for _ in 0..n {
        ema.update(&store);
    }
    let expect = p + (ema0 - p) * decay.powi(n);
    assert!((ema.shadow[0][0] - expect).abs() < 1e-12);

    // action dropout empirical rate over 1e5 draws
    let mut drng = rng::stream(7000, "dropout");
    let mut nulls = 0;
    for _ in 0..100_000 {
        if sample_action_dropout(ActionLabel::Right, &mut drng, 0.15) == ActionLabel::Null {
            nulls += 1;
        }
    }
    let rate = nulls as f64 / 1e5;
    assert!((rate - 0.15).abs() < 0.01, "rate {rate}");

    // detach-grad: UNet parameter gradients are bit-identical whether or not
    // the depth losses are added (gradient stop at the tap boundary)
    let cfg = tiny_config();
    let cached = tiny_cached(&cfg, 1);
    let mut cfg_detach = cfg.clone();
    cfg_detach.train.mode = TrainMode::DetachGrad;
    let mut cfg_detach_nodepth = cfg_detach.clone();
    cfg_detach_nodepth.train.w_depth = 0.0;
    cfg_detach_nodepth.train.lambda = 0.0;
    let grads_of = |cfg: &Config| {
        let mut state = TrainState::new(cfg, Codec::new(&cfg.codec, cfg.seed)).unwrap();
        let (_, grads) = state.compute_step(&cached).unwrap();
        let names: Vec<String> = state.model.store.iter().map(|(n, _)| n.to_string()).collect();
        (names, grads)
    };
    let (names, ga) = grads_of(&cfg_detach);
    let (_, gb) = grads_of(&cfg_detach_nodepth);
    let mut mli_differs = false;
    for i in 0..names.len() {
        let (a, b) = (ga[i].as_deref().unwrap_or(&[]), gb[i].as_deref().unwrap_or(&[]));
        if names[i].starts_with("unet.") {
            let same = a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{}: UNet gradients must be bit-identical under detach", names[i]);
        } else if names[i].starts_with("mli.") && a != b {
            mli_differs = true;
        }
    }
    assert!(mli_differs, "depth-head gradients must differ when depth losses exist");

    // image-only trajectory == joint with zero depth-loss weights, k = 10
    let mut cfg_img = cfg.clone();
    cfg_img.train.mode = TrainMode::ImageOnly;
    let mut cfg_joint0 = cfg.clone();
    cfg_joint0.train.mode = TrainMode::Joint;
    cfg_joint0.train.w_depth = 0.0;
    cfg_joint0.train.lambda = 0.0;
    let all_bits = |state: &TrainState| {
        state
            .model
            .store
            .iter()
            .flat_map(|(_, t)| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    let mut a = TrainState::new(&cfg_img, Codec::new(&cfg.codec, cfg.seed)).unwrap();
    let mut b = TrainState::new(&cfg_joint0, Codec::new(&cfg.codec, cfg.seed)).unwrap();
    for _ in 0..10 {
        a.train_step(&cached).unwrap();
        b.train_step(&cached).unwrap();
    }
    assert_eq!(all_bits(&a), all_bits(&b), "image-only must equal joint with zero depth weights");

    // checkpoint save / load resumes bit-identically
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(&cfg, Codec::new(&cfg.codec, cfg.seed)).unwrap();
    for _ in 0..3 {
        state.train_step(&cached).unwrap();
    }
    let path = dir.path().join("ckpt.uf4d");
    save_checkpoint(&state, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    for _ in 0..3 {
        state.train_step(&cached).unwrap();
        resumed.train_step(&cached).unwrap();
    }
    assert_eq!(all_bits(&state), all_bits(&resumed), "resume must be bit-identical");

    verdict(
        "ACCEPT-07 trainer-mechanics",
        true,
        &format!("ema 1e-12, dropout {rate:.4}, detach bit-exact, resume bit-exact"),
    );
}

// ── criterion 8 ─────────────────────────────────────────────────────

#[test]
fn codec_pretraining_quality() {
    let fx = fixture();
    // held-out reconstruction decreases monotonically with <= 5% upward noise
    for w in fx.pretrain_mse.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "recon MSE rose too much: {} -> {}", w[0], w[1]);
    }
    // per-pixel reconstruction quality after pretraining
    assert!(fx.codec_val_mae <= 0.08, "held-out MAE {} above 0.08", fx.codec_val_mae);
    println!(
        "codec-pretraining: PASS (MSE curve {:?}, val MAE {:.4})",
        fx.pretrain_mse, fx.codec_val_mae
    );
}

#[test]
fn criterion_08_training_trend() {
    let fx = fixture();

    // (i) joint total loss falls by >= 50% from its step-10 moving average
    let baseline: f64 = fx.joint.totals[..10].iter().sum::<f64>() / 10.0;
    let tail = &fx.joint.totals[fx.joint.totals.len() - 10..];
    let final_avg: f64 = tail.iter().sum::<f64>() / 10.0;
    let halved = final_avg <= 0.5 * baseline;

    // (ii) joint beats the conventional depth stub on held-out SSI
    let opts = RolloutOptions { guidance_scale: 1.0, steps: fx.cfg.diffusion.sample_steps };
    let joint_ema = fx.joint.state.ema.materialize(&fx.joint.state.model.store);
    let stub_ema = fx.stub.state.ema.materialize(&fx.stub.state.model.store);
    let joint_eval = evaluate(
        &fx.joint.state.model,
        &fx.joint.state.codec,
        Some(&joint_ema),
        &fx.dataset,
        Split::Val,
        &opts,
        fx.cfg.seed,
    )
    .unwrap();
    let stub_eval = evaluate(
        &fx.stub.state.model,
        &fx.stub.state.codec,
        Some(&stub_ema),
        &fx.dataset,
        Split::Val,
        &opts,
        fx.cfg.seed,
    )
    .unwrap();
    let ssi_better = joint_eval.mean_ssi < stub_eval.mean_ssi;

    // (iii) all four optimization modes ran to completion
    let steps = fx.cfg.train.steps as u64;
    for (name, run) in [
        ("joint", &fx.joint),
        ("image_only", &fx.image_only),
        ("depth_only", &fx.depth_only),
        ("detach_grad", &fx.detach),
    ] {
        assert_eq!(run.state.step, steps, "{name} did not finish");
        assert!(run.totals.iter().all(|v| v.is_finite()), "{name} produced non-finite losses");
    }

    // logged, not asserted: joint vs detach-grad on the image term
    let tail_mean = |v: &Vec<f64>| v[v.len() - 10..].iter().sum::<f64>() / 10.0;
    println!(
        "note: final joint total {:.4} vs detach-grad total {:.4} (directional only)",
        tail_mean(&fx.joint.totals),
        tail_mean(&fx.detach.totals)
    );
    println!(
        "note: joint eval absrel {:.4}, delta1 {:.4}, frechet {:.4}",
        joint_eval.mean.absrel, joint_eval.mean.delta1, joint_eval.frechet
    );

    verdict(
        "ACCEPT-08 training-trend",
        halved && ssi_better,
        &format!(
            "loss {baseline:.4} -> {final_avg:.4} (halved: {halved}); held-out SSI joint {:.5} vs stub {:.5}; 4 modes complete",
            joint_eval.mean_ssi, stub_eval.mean_ssi
        ),
    );
}

// ── criterion 9 ─────────────────────────────────────────────────────

#[test]
fn criterion_09_controllability() {
    let fx = fixture();
    let val = fx.dataset.indices(Split::Val);
    let seq = fx.dataset.load_sequence(val[0]).unwrap();
    let cond = &seq.rgb[0];
    let m = fx.cfg.data.frames;
    let opts = RolloutOptions { guidance_scale: 2.0, steps: fx.cfg.diffusion.sample_steps };
    let ema = fx.joint.state.ema.materialize(&fx.joint.state.model.store);

    let roll = |action: Action| {
        rollout_from_frame(
            &fx.joint.state.model,
            &fx.joint.state.codec,
            Some(&ema),
            cond,
            action.into(),
            m,
            4242,
            &opts,
        )
        .unwrap()
    };
    let straight = roll(Action::Straight);
    let left = roll(Action::Left);
    let stop = roll(Action::Stop);

    // straight vs left: >= 1% of pixels differ by >= 0.05
    let mut differing = 0usize;
    let mut total = 0usize;
    for (a, b) in straight.rgb.iter().zip(&left.rgb) {
        for (x, y) in a.data.iter().zip(&b.data) {
            total += 1;
            if (x - y).abs() >= 0.05 {
                differing += 1;
            }
        }
    }
    let frac = differing as f64 / total as f64;

    // stop rollouts change less frame-to-frame than straight rollouts
    let temporal_change = |products: &fourcast::model::RolloutProducts| {
        let mut seq_frames: Vec<&Tensor> = vec![cond];
        seq_frames.extend(products.rgb.iter());
        let mut acc = 0.0;
        let mut n = 0usize;
        for w in seq_frames.windows(2) {
            for (a, b) in w[0].data.iter().zip(&w[1].data) {
                acc += (a - b).abs();
                n += 1;
            }
        }
        acc / n as f64
    };
    let stop_change = temporal_change(&stop);
    let straight_change = temporal_change(&straight);

    verdict(
        "ACCEPT-09 controllability",
        frac >= 0.01 && stop_change < straight_change,
        &format!(
            "straight-vs-left differing pixels {:.2}%; stop motion {stop_change:.4} < straight motion {straight_change:.4}",
            frac * 100.0
        ),
    );
}

// ── ablation reachability (Table-style configuration modes) ─────────

#[test]
fn ablation_modes_are_distinct_and_runnable() {
    let base = tiny_config();
    // one group per ablation axis; the full model appears in each group
    let mut axes: Vec<(String, Vec<(String, Config)>)> = Vec::new();

    let modes = [TrainMode::ImageOnly, TrainMode::DepthOnly, TrainMode::DetachGrad, TrainMode::Joint]
        .into_iter()
        .map(|mode| {
            let mut c = base.clone();
            c.train.mode = mode;
            (format!("mode-{mode:?}"), c)
        })
        .collect();
    axes.push(("optimization-paradigms".into(), modes));

    let decoders = vec![
        ("decoder-shared-latent".to_string(), base.clone()),
        ("decoder-stub".to_string(), {
            let mut c = base.clone();
            c.mli.depth_path = DepthPath::ConvStub;
            c.mli.inside = false;
            c.mli.outside = false;
            c
        }),
    ];
    axes.push(("depth-decoders".into(), decoders));

    let scales = [vec![1u32], vec![1, 2, 4], vec![1, 2, 4, 8]]
        .into_iter()
        .map(|scales| {
            let mut c = base.clone();
            c.mli.scales = scales.clone();
            (format!("scales-{scales:?}"), c)
        })
        .collect();
    axes.push(("interaction-scales".into(), scales));

    let feedback = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(inside, outside)| {
            let mut c = base.clone();
            c.mli.inside = inside;
            c.mli.outside = outside;
            (format!("feedback-in{inside}-out{outside}"), c)
        })
        .collect();
    axes.push(("feedback-direction".into(), feedback));

    let layers = [FeedbackKind::Zero, FeedbackKind::Random, FeedbackKind::DirectAdd]
        .into_iter()
        .map(|kind| {
            let mut c = base.clone();
            c.mli.feedback = kind;
            (format!("layer-{kind:?}"), c)
        })
        .collect();
    axes.push(("feedback-layer-type".into(), layers));

    // rows are distinct within each axis
    for (axis, variants) in &axes {
        let mut seen = std::collections::BTreeSet::new();
        for (name, c) in variants {
            c.validate().unwrap_or_else(|e| panic!("{name}: invalid config: {e}"));
            assert!(seen.insert(c.to_json()), "{axis}: {name} duplicates another row");
        }
    }

    // every distinct configuration runs a training step
    let cached = tiny_cached(&base, 2);
    let mut ran = std::collections::BTreeSet::new();
    let mut rows = 0;
    for (_, variants) in &axes {
        for (name, c) in variants {
            rows += 1;
            if !ran.insert(c.to_json()) {
                continue;
            }
            let mut state = TrainState::new(c, Codec::new(&c.codec, c.seed)).unwrap();
            let log = state.train_step(&cached).unwrap_or_else(|e| panic!("{name}: step failed: {e}"));
            assert!(log.report.total.is_finite(), "{name}: non-finite loss");
        }
    }
    println!(
        "ablation-reachability: PASS ({rows} rows over {} axes, {} distinct configurations ran)",
        axes.len(),
        ran.len()
    );
}
