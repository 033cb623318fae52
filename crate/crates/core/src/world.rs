//! Procedural driving world: ground plane plus box obstacles, rendered with a
//! per-pixel depth buffer so every written color carries its exact surface
//! depth. Sky pixels get an infinite-depth sentinel.
//!
//! World frame: x right, y down, z forward. The camera starts at the origin
//! looking along +z; the ground plane lies at `y = camera_height`.

use crate::config::{Action, DataConfig};
use crate::error::{Error, Result};
use crate::pointcloud::Intrinsics;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

/// Drop ground hits beyond this camera-space depth; they become sky.
pub const FAR_PLANE: f64 = 50.0;

#[derive(Debug, Clone)]
pub struct BoxObstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// World-units per frame along (x, z).
    pub velocity: [f64; 2],
    pub color: [f64; 3],
}

impl BoxObstacle {
    fn at_frame(&self, m: usize) -> ([f64; 3], [f64; 3]) {
        let dx = self.velocity[0] * m as f64;
        let dz = self.velocity[1] * m as f64;
        (
            [self.min[0] + dx, self.min[1], self.min[2] + dz],
            [self.max[0] + dx, self.max[1], self.max[2] + dz],
        )
    }
}

/// A fully sampled scene: everything [`generate`] needs, nothing random left.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub seed: u64,
    pub index: u64,
    pub boxes: Vec<BoxObstacle>,
    pub camera_height: f64,
    pub intrinsics: Intrinsics,
    pub action: Action,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub forward_speed: f64,
    pub yaw_rate: f64,
}

/// One discretized 4D scene sample: paired RGB and metric depth per frame.
#[derive(Debug, Clone)]
pub struct SceneSequence {
    /// `[3,H,W]` in [0,1] per frame.
    pub rgb: Vec<Tensor>,
    /// `[1,H,W]` metric depth; sky is `+inf` and must be masked.
    pub depth: Vec<Tensor>,
    pub action: Action,
    pub intrinsics: Intrinsics,
}

/// Camera pose per frame: position (x, z) and heading angle.
pub fn ego_poses(action: Action, frames: usize, v: f64, omega: f64) -> Vec<(f64, f64, f64)> {
    let mut poses = Vec::with_capacity(frames);
    let (mut px, mut pz, mut theta) = (0.0f64, 0.0f64, 0.0f64);
    poses.push((px, pz, theta));
    for _ in 1..frames {
        match action {
            Action::Stop => {}
            Action::Straight | Action::Left | Action::Right => {
                px += v * theta.sin();
                pz += v * theta.cos();
                match action {
                    Action::Left => theta -= omega,
                    Action::Right => theta += omega,
                    _ => {}
                }
            }
        }
        poses.push((px, pz, theta));
    }
    poses
}

impl SceneSpec {
    /// Sample scene `index` of a dataset. Depends only on `(seed, index)` and
    /// the config, so sequences can be generated in any order.
    pub fn sample(seed: u64, index: u64, cfg: &DataConfig) -> Result<SceneSpec> {
        let mut rng = rng::indexed_stream(seed, "data", index);
        let action = Action::ALL[(index % 4) as usize];
        let intrinsics = Intrinsics::new(
            cfg.focal,
            cfg.focal,
            cfg.width as f64 / 2.0,
            cfg.height as f64 / 2.0,
        )?;
        let poses = ego_poses(action, cfg.frames, cfg.forward_speed, cfg.yaw_rate);

        let mut boxes = Vec::with_capacity(cfg.boxes);
        let mut attempts = 0;
        while boxes.len() < cfg.boxes {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::invalid("scene_sample", "could not place boxes clear of the camera"));
            }
            let sx = rng.gen_range(0.8..2.5);
            let sy = rng.gen_range(0.8..2.5);
            let sz = rng.gen_range(0.8..2.5);
            let x = rng.gen_range(-10.0..10.0);
            let z = rng.gen_range(5.0..24.0);
            let velocity = if rng.gen_bool(cfg.moving_fraction.clamp(0.0, 1.0)) {
                [rng.gen_range(-0.25..0.25), rng.gen_range(-0.4..0.4)]
            } else {
                [0.0, 0.0]
            };
            let color = [
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.2..1.0),
            ];
            let b = BoxObstacle {
                min: [x - sx / 2.0, cfg.camera_height - sy, z - sz / 2.0],
                max: [x + sx / 2.0, cfg.camera_height, z + sz / 2.0],
                velocity,
                color,
            };
            // keep a margin between the box and every camera position
            let margin = 0.8;
            let clear = (0..cfg.frames).all(|m| {
                let (bmin, bmax) = b.at_frame(m);
                let (px, pz, _) = poses[m];
                px < bmin[0] - margin
                    || px > bmax[0] + margin
                    || pz < bmin[2] - margin
                    || pz > bmax[2] + margin
            });
            if clear {
                boxes.push(b);
            }
        }
        Ok(SceneSpec {
            seed,
            index,
            boxes,
            camera_height: cfg.camera_height,
            intrinsics,
            action,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            forward_speed: cfg.forward_speed,
            yaw_rate: cfg.yaw_rate,
        })
    }
}

/// Surface identity per pixel, for the instrumented-render consistency check.
/// 0 = sky, 1 = ground, `2 + i` = box `i`.
pub type SurfaceId = u16;

fn sky_color(v: usize, h: usize) -> [f64; 3] {
    let s = v as f64 / (h.saturating_sub(1)).max(1) as f64;
    [
        0.55 + 0.25 * s,
        0.70 + 0.15 * s,
        0.95,
    ]
}

fn ground_color(gx: f64, gz: f64) -> [f64; 3] {
    let cell = (gx / 2.0).floor() as i64 + (gz / 2.0).floor() as i64;
    if cell.rem_euclid(2) == 0 {
        [0.42, 0.42, 0.45]
    } else {
        [0.27, 0.27, 0.30]
    }
}

/// Ray vs axis-aligned box via the slab method. Returns `(t, entry_axis)`.
fn ray_box(o: [f64; 3], d: [f64; 3], bmin: [f64; 3], bmax: [f64; 3]) -> Option<(f64, usize)> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < bmin[a] || o[a] > bmax[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let (mut t0, mut t1) = ((bmin[a] - o[a]) * inv, (bmax[a] - o[a]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis = a;
        }
        tmax = tmax.min(t1);
        if tmax < tmin {
            return None;
        }
    }
    if tmin > 1e-9 {
        Some((tmin, axis))
    } else {
        None
    }
}

/// Render one frame, returning RGB, depth, and the winning surface per pixel.
pub fn render_frame(spec: &SceneSpec, m: usize) -> (Tensor, Tensor, Vec<SurfaceId>) {
    let (h, w) = (spec.height, spec.width);
    let k = &spec.intrinsics;
    let poses = ego_poses(spec.action, spec.frames, spec.forward_speed, spec.yaw_rate);
    let (px, pz, theta) = poses[m];
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let origin = [px, 0.0, pz];

    let frame_boxes: Vec<([f64; 3], [f64; 3])> = spec.boxes.iter().map(|b| b.at_frame(m)).collect();

    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut surf = vec![0u16; plane];

    for v in 0..h {
        for u in 0..w {
            let dx = (u as f64 - k.cx) / k.fx;
            let dy = (v as f64 - k.cy) / k.fy;
            // camera ray rotated into the world; its parameter equals camera-z depth
            let d = [dx * cos_t + sin_t, dy, -dx * sin_t + cos_t];

            let mut best = f64::INFINITY;
            let mut color = sky_color(v, h);
            let mut id: SurfaceId = 0;

            if d[1] > 1e-12 {
                let t = spec.camera_height / d[1];
                if t > 0.0 && t <= FAR_PLANE {
                    best = t;
                    color = ground_color(origin[0] + t * d[0], origin[2] + t * d[2]);
                    id = 1;
                }
            }
            for (bi, (bmin, bmax)) in frame_boxes.iter().enumerate() {
                if let Some((t, axis)) = ray_box(origin, d, *bmin, *bmax) {
                    if t < best {
                        best = t;
                        let shade = match axis {
                            0 => 0.85,
                            1 => 1.0,
                            _ => 0.70,
                        };
                        let c = &spec.boxes[bi].color;
                        color = [c[0] * shade, c[1] * shade, c[2] * shade];
                        id = 2 + bi as SurfaceId;
                    }
                }
            }

            let idx = v * w + u;
            rgb[idx] = color[0];
            rgb[plane + idx] = color[1];
            rgb[2 * plane + idx] = color[2];
            depth[idx] = best;
            surf[idx] = id;
        }
    }
    (
        Tensor::new(vec![3, h, w], rgb),
        Tensor::new(vec![1, h, w], depth),
        surf,
    )
}

/// Render the full sequence.
pub fn generate(spec: &SceneSpec) -> SceneSequence {
    let mut rgb = Vec::with_capacity(spec.frames);
    let mut depth = Vec::with_capacity(spec.frames);
    for m in 0..spec.frames {
        let (r, d, _) = render_frame(spec, m);
        rgb.push(r);
        depth.push(d);
    }
    SceneSequence { rgb, depth, action: spec.action, intrinsics: spec.intrinsics }
}

/// Re-derive the depth of a known surface along a pixel ray; the independent
/// check used by the instrumented-render test.
pub fn surface_depth(spec: &SceneSpec, m: usize, u: usize, v: usize, id: SurfaceId) -> Option<f64> {
    let k = &spec.intrinsics;
    let poses = ego_poses(spec.action, spec.frames, spec.forward_speed, spec.yaw_rate);
    let (px, pz, theta) = poses[m];
    let dx = (u as f64 - k.cx) / k.fx;
    let dy = (v as f64 - k.cy) / k.fy;
    let d = [dx * theta.cos() + theta.sin(), dy, -dx * theta.sin() + theta.cos()];
    let o = [px, 0.0, pz];
    match id {
        0 => None,
        1 => {
            if d[1] > 1e-12 {
                Some(spec.camera_height / d[1])
            } else {
                None
            }
        }
        b => {
            let (bmin, bmax) = spec.boxes[(b - 2) as usize].at_frame(m);
            ray_box(o, d, bmin, bmax).map(|(t, _)| t)
        }
    }
}
