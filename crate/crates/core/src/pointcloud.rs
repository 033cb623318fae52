//! Pinhole back-projection of image-depth pairs and PLY export.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Pinhole camera intrinsics in pixel units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::invalid("intrinsics", format!("focal lengths must be positive: {fx}, {fy}")));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub frame_index: usize,
}

/// Colored points in the camera frame; `y` points down, `z` forward.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn merge(clouds: impl IntoIterator<Item = PointCloud>) -> PointCloud {
        let mut points = Vec::new();
        for c in clouds {
            points.extend(c.points);
        }
        PointCloud { points }
    }
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Lift a depth map into 3D: `x = (u - cx) z / fx`, `y = (v - cy) z / fy`.
/// Pixels with non-finite or non-positive depth (sky) are skipped.
pub fn backproject(depth: &Tensor, rgb: &Tensor, k: &Intrinsics, frame_index: usize) -> Result<PointCloud> {
    if depth.shape.len() != 3 || depth.shape[0] != 1 {
        return Err(Error::invalid("backproject", format!("depth must be [1,H,W], got {:?}", depth.shape)));
    }
    let (h, w) = (depth.shape[1], depth.shape[2]);
    if rgb.shape != [3, h, w] {
        return Err(Error::ShapeMismatch { op: "backproject", lhs: rgb.shape.clone(), rhs: vec![3, h, w] });
    }
    let plane = h * w;
    let mut points = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let z = depth.data[v * w + u];
            if !z.is_finite() || z <= 0.0 {
                continue;
            }
            let idx = v * w + u;
            points.push(Point {
                x: (u as f64 - k.cx) * z / k.fx,
                y: (v as f64 - k.cy) * z / k.fy,
                z,
                r: to_u8(rgb.data[idx]),
                g: to_u8(rgb.data[plane + idx]),
                b: to_u8(rgb.data[2 * plane + idx]),
                frame_index,
            });
        }
    }
    Ok(PointCloud { points })
}

/// Algebraic inverse of [`backproject`] for one point.
pub fn reproject(x: f64, y: f64, z: f64, k: &Intrinsics) -> (f64, f64) {
    (x * k.fx / z + k.cx, y * k.fy / z + k.cy)
}

fn write_ply(pc: &PointCloud, path: &Path, with_frame_index: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", pc.points.len())?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    writeln!(out, "property uchar red")?;
    writeln!(out, "property uchar green")?;
    writeln!(out, "property uchar blue")?;
    if with_frame_index {
        writeln!(out, "property int frame_index")?;
    }
    writeln!(out, "end_header")?;
    for p in &pc.points {
        if with_frame_index {
            writeln!(out, "{} {} {} {} {} {} {}", p.x, p.y, p.z, p.r, p.g, p.b, p.frame_index)?;
        } else {
            writeln!(out, "{} {} {} {} {} {}", p.x, p.y, p.z, p.r, p.g, p.b)?;
        }
    }
    Ok(())
}

/// One ASCII PLY per frame cloud.
pub fn export_ply_frame(pc: &PointCloud, path: &Path) -> Result<()> {
    write_ply(pc, path, false)
}

/// Merged cloud across frames, carrying `frame_index` as a scalar property.
pub fn export_ply_merged(pc: &PointCloud, path: &Path) -> Result<()> {
    write_ply(pc, path, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> Intrinsics {
        Intrinsics::new(100.0, 100.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn principal_point_maps_to_axis() {
        let k = Intrinsics::new(50.0, 50.0, 2.0, 1.0).unwrap();
        let mut depth = Tensor::full(&[1, 3, 5], f64::INFINITY);
        depth.data[1 * 5 + 2] = 1.0; // pixel (u=2, v=1) == principal point
        let rgb = Tensor::zeros(&[3, 3, 5]);
        let pc = backproject(&depth, &rgb, &k, 0).unwrap();
        assert_eq!(pc.points.len(), 1);
        let p = pc.points[0];
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn off_axis_pixel() {
        // fx=fy=100, cx=cy=0, pixel (100, 0), z=2 -> (2, 0, 2)
        let k = k100();
        let mut depth = Tensor::full(&[1, 1, 101], f64::INFINITY);
        depth.data[100] = 2.0;
        let rgb = Tensor::zeros(&[3, 1, 101]);
        let pc = backproject(&depth, &rgb, &k, 3).unwrap();
        let p = pc.points[0];
        assert_eq!((p.x, p.y, p.z), (2.0, 0.0, 2.0));
        assert_eq!(p.frame_index, 3);
    }

    #[test]
    fn reproject_roundtrip_exact() {
        let k = Intrinsics::new(64.0, 48.0, 31.5, 15.5).unwrap();
        let mut depth = Tensor::zeros(&[1, 8, 12]);
        for (i, d) in depth.data.iter_mut().enumerate() {
            *d = 1.0 + (i as f64) * 0.25;
        }
        let rgb = Tensor::zeros(&[3, 8, 12]);
        let pc = backproject(&depth, &rgb, &k, 0).unwrap();
        assert_eq!(pc.points.len(), 8 * 12);
        let mut it = pc.points.iter();
        for v in 0..8 {
            for u in 0..12 {
                let p = it.next().unwrap();
                let (ru, rv) = reproject(p.x, p.y, p.z, &k);
                assert!((ru - u as f64).abs() < 1e-12, "{ru} vs {u}");
                assert!((rv - v as f64).abs() < 1e-12, "{rv} vs {v}");
            }
        }
    }

    #[test]
    fn ply_files_have_expected_header() {
        let dir = tempfile::tempdir().unwrap();
        let pc = PointCloud {
            points: vec![Point { x: 1.0, y: 2.0, z: 3.0, r: 10, g: 20, b: 30, frame_index: 2 }],
        };
        let merged = dir.path().join("scene.ply");
        export_ply_merged(&pc, &merged).unwrap();
        let text = std::fs::read_to_string(&merged).unwrap();
        assert!(text.contains("property int frame_index"));
        assert!(text.contains("1 2 3 10 20 30 2"));

        let single = dir.path().join("frame.ply");
        export_ply_frame(&pc, &single).unwrap();
        let text = std::fs::read_to_string(&single).unwrap();
        assert!(!text.contains("frame_index"));
        assert!(text.ends_with("1 2 3 10 20 30\n"));
    }
}
