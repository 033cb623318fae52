//! The training objective: an epsilon + structural image term, a latent
//! depth term, and a scale/shift-invariant pixel depth term, combined as
//! `total = l_x + l_d + lambda * l_ssi`.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};
use serde::{Deserialize, Serialize};

/// Per-step loss values; `total` always satisfies the exact identity
/// `total == l_x + l_d + lambda * l_ssi` regardless of training mode.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub l_x: f64,
    pub l_d: f64,
    pub l_ssi: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossReport {
    pub fn new(l_x: f64, l_d: f64, l_ssi: f64, lambda: f64) -> LossReport {
        LossReport { l_x, l_d, l_ssi, total: l_x + l_d + lambda * l_ssi, lambda }
    }
}

/// Mean squared error between same-shape tensors.
pub fn mse(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Epsilon MSE plus a spatial-gradient matching term on the reconstructed
/// latent: `mse(eps) + w_struct * (mse(dh) + mse(dw))`.
pub fn image_latent_loss(
    tape: &mut Tape,
    eps_pred: TensorId,
    eps_true: TensorId,
    z_x_hat: TensorId,
    z_x: TensorId,
    w_struct: f64,
) -> Result<TensorId> {
    let eps_term = mse(tape, eps_pred, eps_true)?;
    let (ah, aw) = (tape.diff_h(z_x_hat)?, tape.diff_w(z_x_hat)?);
    let (bh, bw) = (tape.diff_h(z_x)?, tape.diff_w(z_x)?);
    let sh = mse(tape, ah, bh)?;
    let sw = mse(tape, aw, bw)?;
    let s = tape.add(sh, sw)?;
    let s = tape.scale(s, w_struct);
    tape.add(eps_term, s)
}

/// MSE in latent space between predicted and encoded depth latents.
pub fn depth_latent_loss(tape: &mut Tape, z_d_hat: TensorId, z_d: TensorId) -> Result<TensorId> {
    mse(tape, z_d_hat, z_d)
}

pub struct SsiOut {
    pub loss: TensorId,
    pub degenerate: bool,
    /// Fitted alignment, for inspection.
    pub scale: f64,
    pub shift: f64,
}

/// Scale/shift-invariant depth loss: closed-form least-squares alignment of
/// the prediction to ground truth over valid pixels, then mean absolute
/// residual. `d_gt` and `valid` must be constants (no gradient); `valid` is a
/// 0/1 mask of `d_gt`'s shape.
///
/// A degenerate system (constant prediction) falls back to `s = 0`,
/// `b = mean(d_gt)`, which carries no gradient.
pub fn ssi_loss(tape: &mut Tape, d_pred: TensorId, d_gt: TensorId, valid: TensorId) -> Result<SsiOut> {
    if tape.shape(d_pred) != tape.shape(d_gt) || tape.shape(d_pred) != tape.shape(valid) {
        return Err(Error::ShapeMismatch {
            op: "ssi_loss",
            lhs: tape.shape(d_pred).to_vec(),
            rhs: tape.shape(d_gt).to_vec(),
        });
    }
    let gt = tape.data(d_gt).to_vec();
    let mask = tape.data(valid).to_vec();
    let pred = tape.data(d_pred).to_vec();

    // the loss multiplies by the mask on-tape, so targets must be finite
    // everywhere (normalized depth keeps sky at 1.0)
    if gt.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("ssi_loss", "ground truth must be finite; normalize sky first"));
    }
    let n: f64 = mask.iter().sum();
    if n < 2.0 {
        return Err(Error::invalid("ssi_loss", "need at least 2 valid pixels"));
    }
    let sg: f64 = gt.iter().zip(&mask).map(|(g, m)| g * m).sum();
    let sp: f64 = pred.iter().zip(&mask).map(|(p, m)| p * m).sum();
    let spp: f64 = pred.iter().zip(&mask).map(|(p, m)| p * p * m).sum();
    let spg: f64 = pred.iter().zip(&gt).zip(&mask).map(|((p, g), m)| p * g * m).sum();
    let det = n * spp - sp * sp;

    if det <= 1e-12 * (n * spp).abs().max(1e-300) {
        // constant prediction: s = 0, b = mean(d_gt)
        let b = sg / n;
        let loss_val =
            gt.iter().zip(&mask).map(|(g, m)| (b - g).abs() * m).sum::<f64>() / n;
        let loss = tape.constant(Tensor::scalar(loss_val));
        return Ok(SsiOut { loss, degenerate: true, scale: 0.0, shift: b });
    }

    // the 2x2 normal equations, built on-tape so gradients flow through the solve
    let pm = tape.mul(d_pred, valid)?;
    let sp_t = tape.sum(pm);
    let pp = tape.mul(d_pred, d_pred)?;
    let ppm = tape.mul(pp, valid)?;
    let spp_t = tape.sum(ppm);
    let pg = tape.mul(d_pred, d_gt)?;
    let pgm = tape.mul(pg, valid)?;
    let spg_t = tape.sum(pgm);

    let n_spp = tape.scale(spp_t, n);
    let sp_sq = tape.mul(sp_t, sp_t)?;
    let det_t = tape.sub(n_spp, sp_sq)?;

    let n_spg = tape.scale(spg_t, n);
    let sp_sg = tape.scale(sp_t, sg);
    let s_num = tape.sub(n_spg, sp_sg)?;
    let s_t = tape.div(s_num, det_t)?;

    let spp_sg = tape.scale(spp_t, sg);
    let sp_spg = tape.mul(sp_t, spg_t)?;
    let b_num = tape.sub(spp_sg, sp_spg)?;
    let b_t = tape.div(b_num, det_t)?;

    let scaled = tape.mul_scalar(d_pred, s_t)?;
    let aligned = tape.add_scalar(scaled, b_t)?;
    let resid = tape.sub(aligned, d_gt)?;
    let resid = tape.mul(resid, valid)?;
    let absr = tape.abs(resid);
    let total = tape.sum(absr);
    let loss = tape.scale(total, 1.0 / n);

    let s_val = (n * spg - sp * sg) / det;
    let b_val = (spp * sg - sp * spg) / det;
    Ok(SsiOut { loss, degenerate: false, scale: s_val, shift: b_val })
}

/// Combine the three terms on-tape in report order: `l_x + l_d + lambda * l_ssi`.
pub fn total_loss(
    tape: &mut Tape,
    l_x: TensorId,
    l_d: TensorId,
    l_ssi: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    let t = tape.add(l_x, l_d)?;
    let ls = tape.scale(l_ssi, lambda);
    tape.add(t, ls)
}
