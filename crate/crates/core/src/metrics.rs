//! Depth evaluation metrics (affine-invariant protocol) and a desk-scale
//! Fréchet feature distance over pooled codec-encoder features.
//!
//! AbsRel and the threshold accuracies are reported as raw ratios; published
//! numbers in this domain often appear scaled by 1e2.

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Closed-form least-squares fit of `s * pred + b ~ gt` over valid pixels;
/// the same solver the SSI loss uses. Returns `(s, b, degenerate)`.
pub fn align_affine(pred: &[f64], gt: &[f64], mask: &[f64]) -> (f64, f64, bool) {
    let n: f64 = mask.iter().sum();
    let (mut sp, mut spp, mut sg, mut spg) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        // branch rather than multiply: masked-out sky depth is infinite
        if mask[i] > 0.0 {
            sp += pred[i];
            spp += pred[i] * pred[i];
            sg += gt[i];
            spg += pred[i] * gt[i];
        }
    }
    let det = n * spp - sp * sp;
    if det.abs() <= 1e-12 * (n * spp).abs().max(1e-300) {
        (0.0, sg / n.max(1.0), true)
    } else {
        ((n * spg - sp * sg) / det, (spp * sg - sp * spg) / det, false)
    }
}

/// Mean over valid pixels of `|pred - gt| / gt`, no alignment.
pub fn absrel_raw(pred: &[f64], gt: &[f64], mask: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if mask[i] > 0.0 {
            acc += (pred[i] - gt[i]).abs() / gt[i];
            n += 1.0;
        }
    }
    acc / n
}

/// Fraction of valid pixels with `max(pred/gt, gt/pred) < 1.25^k` (strict);
/// non-positive predictions fail every threshold.
pub fn delta_k_raw(pred: &[f64], gt: &[f64], mask: &[f64], k: u32) -> f64 {
    let thresh = 1.25f64.powi(k as i32);
    let mut hits = 0.0;
    let mut n = 0.0;
    for i in 0..pred.len() {
        if mask[i] > 0.0 {
            n += 1.0;
            if pred[i] > 0.0 {
                let ratio = (pred[i] / gt[i]).max(gt[i] / pred[i]);
                if ratio < thresh {
                    hits += 1.0;
                }
            }
        }
    }
    hits / n
}

fn aligned(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Vec<f64> {
    let (s, b, _) = align_affine(&pred.data, &gt.data, &mask.data);
    pred.data.iter().map(|&p| s * p + b).collect()
}

/// Affine-invariant AbsRel: align first, then the raw ratio error.
pub fn absrel(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> f64 {
    absrel_raw(&aligned(pred, gt, mask), &gt.data, &mask.data)
}

/// Affine-invariant threshold accuracy.
pub fn delta_k(pred: &Tensor, gt: &Tensor, mask: &Tensor, k: u32) -> f64 {
    delta_k_raw(&aligned(pred, gt, mask), &gt.data, &mask.data, k)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// All depth metrics under the affine-invariant protocol with one shared fit.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> DepthMetrics {
    let a = aligned(pred, gt, mask);
    DepthMetrics {
        absrel: absrel_raw(&a, &gt.data, &mask.data),
        delta1: delta_k_raw(&a, &gt.data, &mask.data, 1),
        delta2: delta_k_raw(&a, &gt.data, &mask.data, 2),
        delta3: delta_k_raw(&a, &gt.data, &mask.data, 3),
    }
}

/// Pooled codec-encoder feature of one `[3,H,W]` frame: the spatial mean of
/// each latent channel.
pub fn codec_feature(codec: &Codec, frame: &Tensor) -> Result<Vec<f64>> {
    let z = codec.encode_image(frame)?;
    let (c, plane) = (z.tensor.shape[0], z.tensor.shape[1] * z.tensor.shape[2]);
    Ok((0..c)
        .map(|ci| z.tensor.data[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect())
}

fn gaussian_fit(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        for i in 0..d {
            mu[i] += f[i];
        }
    }
    mu /= n as f64;
    let mut sigma = DMatrix::zeros(d, d);
    if n > 1 {
        for f in feats {
            let x = DVector::from_column_slice(f) - &mu;
            sigma += &x * x.transpose();
        }
        sigma /= (n - 1) as f64;
    }
    for i in 0..d {
        sigma[(i, i)] += 1e-6;
    }
    (mu, sigma)
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`.
pub fn frechet_feature_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    if feats_a.is_empty() || feats_b.is_empty() {
        return Err(Error::invalid("frechet", "empty feature set"));
    }
    if feats_a[0].len() != feats_b[0].len() {
        return Err(Error::invalid("frechet", "feature dimension mismatch"));
    }
    let (mu_a, sig_a) = gaussian_fit(feats_a);
    let (mu_b, sig_b) = gaussian_fit(feats_b);
    let dmu = &mu_a - &mu_b;
    let root_a = sqrtm(&sig_a);
    let inner = &root_a * &sig_b * &root_a;
    let cross = sqrtm(&inner);
    let d = dmu.dot(&dmu) + sig_a.trace() + sig_b.trace() - 2.0 * cross.trace();
    // round-off can push an exact zero a hair negative
    Ok(d.max(0.0))
}

/// Fréchet distance between two frame sets through the codec encoder.
pub fn frechet_frames(codec: &Codec, set_a: &[Tensor], set_b: &[Tensor]) -> Result<f64> {
    let fa: Result<Vec<_>> = set_a.iter().map(|f| codec_feature(codec, f)).collect();
    let fb: Result<Vec<_>> = set_b.iter().map(|f| codec_feature(codec, f)).collect();
    frechet_feature_distance(&fa?, &fb?)
}
