use fourcast::config::Action;
use fourcast::dataset::{Dataset, Split};
use fourcast::diffusion::RolloutOptions;
use fourcast::model::{rollout_from_frame, RolloutProducts};
use fourcast::tensor::Tensor;
use fourcast::trainer::load_checkpoint;
use std::path::Path;

fn main() {
    let state = load_checkpoint(Path::new("/tmp/fc_calib/run_joint/ckpt_final.uf4d")).unwrap();
    let ds = Dataset::open(Path::new("/tmp/fc_calib/data")).unwrap();
    let val = ds.indices(Split::Val);
    let seq = ds.load_sequence(val[0]).unwrap();
    let cond = &seq.rgb[0];
    let ema = state.ema.materialize(&state.model.store);

    for (gname, g) in [("g1.0", 1.0), ("g2.0", 2.0), ("g3.0", 3.0)] {
        let opts = RolloutOptions { guidance_scale: g, steps: 25 };
        let roll = |a: Action| -> RolloutProducts {
            rollout_from_frame(&state.model, &state.codec, Some(&ema), cond, a.into(), 5, 4242, &opts).unwrap()
        };
        let straight = roll(Action::Straight);
        let left = roll(Action::Left);
        let stop = roll(Action::Stop);

        let mut differing = 0usize;
        let mut total = 0usize;
        for (a, b) in straight.rgb.iter().zip(&left.rgb) {
            for (x, y) in a.data.iter().zip(&b.data) {
                total += 1;
                if (x - y).abs() >= 0.05 { differing += 1; }
            }
        }
        let temporal = |p: &RolloutProducts| {
            let mut frames: Vec<&Tensor> = vec![cond];
            frames.extend(p.rgb.iter());
            let mut acc = 0.0; let mut n = 0;
            for w in frames.windows(2) {
                for (a, b) in w[0].data.iter().zip(&w[1].data) { acc += (a - b).abs(); n += 1; }
            }
            acc / n as f64
        };
        println!("{gname}: straight-vs-left diff {:.2}%  | motion stop {:.4} straight {:.4} left {:.4}",
            100.0 * differing as f64 / total as f64, temporal(&stop), temporal(&straight), temporal(&left));
    }
}
