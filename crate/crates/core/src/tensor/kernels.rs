//! Forward kernels and their backward rules, one match arm per primitive.

use super::{Node, Tensor, TensorId};
use crate::error::{Error, Result};

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn expect_4d(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.shape.len() != 4 {
        return Err(Error::invalid(op, format!("expected 4D tensor, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2], t.shape[3]))
}

// ── conv2d ──────────────────────────────────────────────────────────

fn conv2d_out_extent(op: &'static str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::invalid(
            op,
            format!("non-integral output extent: ({extent} + 2*{pad} - {k}) / {stride} + 1"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (b, cin, h, wd) = expect_4d("conv2d", x)?;
    let (cout, wcin, kh, kw) = expect_4d("conv2d", w)?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    if wcin != cin {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: x.shape.clone(), rhs: w.shape.clone() });
    }
    if bias.shape != [cout] {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: bias.shape.clone(), rhs: vec![cout] });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let k = kh;
    let oh = conv2d_out_extent("conv2d", h, k, stride, pad)?;
    let ow = conv2d_out_extent("conv2d", wd, k, stride, pad)?;

    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let plane = &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            plane.fill(bias.data[co]);
            for ci in 0..cin {
                let xplane = &x.data[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data[((co * cin + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        conv2d_accumulate(plane, xplane, wv, h, wd, oh, ow, ky, kx, stride, pad);
                    }
                }
            }
        }
    }
    Ok((vec![b, cout, oh, ow], out))
}

/// Valid output-index range for one kernel offset: `0 <= o*stride + koff - pad < extent`.
fn valid_range(extent: usize, out_extent: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo_num = pad as isize - koff as isize;
    let lo = if lo_num <= 0 { 0 } else { (lo_num as usize).div_ceil(stride) };
    let hi_num = extent as isize - 1 - koff as isize + pad as isize;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num as usize / stride).min(out_extent.saturating_sub(1));
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_accumulate(
    out_plane: &mut [f64],
    x_plane: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) {
    let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
    let (ox0, ox1) = valid_range(w, ow, kx, stride, pad);
    if oy0 > oy1 || ox0 > ox1 {
        return;
    }
    for oy in oy0..=oy1 {
        let iy = oy * stride + ky - pad;
        let xrow = &x_plane[iy * w..(iy + 1) * w];
        let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let off = kx as isize - pad as isize;
            for ox in ox0..=ox1 {
                orow[ox] += wv * xrow[(ox as isize + off) as usize];
            }
        } else {
            for ox in ox0..=ox1 {
                orow[ox] += wv * xrow[ox * stride + kx - pad];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    g: &[f64],
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (b, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, k) = (w.shape[0], w.shape[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;

    if let Some(db) = db {
        for bi in 0..b {
            for co in 0..cout {
                let gplane = &g[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                db[co] += gplane.iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for bi in 0..b {
        for co in 0..cout {
            let gplane = &g[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wd;
                for ky in 0..k {
                    for kx in 0..k {
                        let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
                        let (ox0, ox1) = valid_range(wd, ow, kx, stride, pad);
                        if oy0 > oy1 || ox0 > ox1 {
                            continue;
                        }
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = w.data[widx];
                        let mut wacc = 0.0;
                        for oy in oy0..=oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow = &mut dx[xbase + iy * wd..xbase + (iy + 1) * wd];
                                for ox in ox0..=ox1 {
                                    dxrow[ox * stride + kx - pad] += wv * grow[ox];
                                }
                            }
                            if dw.is_some() {
                                let xrow = &x.data[xbase + iy * wd..xbase + (iy + 1) * wd];
                                for ox in ox0..=ox1 {
                                    wacc += grow[ox] * xrow[ox * stride + kx - pad];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

// ── temporal depthwise conv ─────────────────────────────────────────

fn reflect(i: isize, m: usize) -> usize {
    if m == 1 {
        return 0;
    }
    let last = (m - 1) as isize;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn temporal_conv_forward(x: &Tensor, w: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, wd) = expect_4d("temporal_conv", x)?;
    if w.shape.len() != 2 || w.shape[0] != c {
        return Err(Error::ShapeMismatch { op: "temporal_conv", lhs: x.shape.clone(), rhs: w.shape.clone() });
    }
    let k = w.shape[1];
    if k % 2 == 0 {
        return Err(Error::invalid("temporal_conv", format!("kernel length must be odd, got {k}")));
    }
    if (k / 2) >= m && m > 1 {
        // reflect padding needs k/2 < M
        return Err(Error::invalid("temporal_conv", format!("kernel {k} too long for {m} frames")));
    }
    let half = (k / 2) as isize;
    let plane = h * wd;
    let mut out = vec![0.0; x.numel()];
    for mi in 0..m {
        for ci in 0..c {
            let orow = &mut out[(mi * c + ci) * plane..(mi * c + ci + 1) * plane];
            for j in 0..k {
                let src = reflect(mi as isize + j as isize - half, m);
                let wv = w.data[ci * k + j];
                let xrow = &x.data[(src * c + ci) * plane..(src * c + ci + 1) * plane];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += wv * xv;
                }
            }
        }
    }
    Ok((x.shape.clone(), out))
}

fn temporal_conv_backward(
    g: &[f64],
    x: &Tensor,
    w: &Tensor,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (m, c, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let k = w.shape[1];
    let half = (k / 2) as isize;
    let plane = h * wd;
    for mi in 0..m {
        for ci in 0..c {
            let grow = &g[(mi * c + ci) * plane..(mi * c + ci + 1) * plane];
            for j in 0..k {
                let src = reflect(mi as isize + j as isize - half, m);
                let base = (src * c + ci) * plane;
                let wv = w.data[ci * k + j];
                if let Some(dx) = dx.as_deref_mut() {
                    let drow = &mut dx[base..base + plane];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let xrow = &x.data[base..base + plane];
                    let acc: f64 = grow.iter().zip(xrow).map(|(&gv, &xv)| gv * xv).sum();
                    dw[ci * k + j] += acc;
                }
            }
        }
    }
}

// ── resampling ──────────────────────────────────────────────────────

pub(crate) fn down2_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("down2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("down2", format!("spatial extents must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; m * c * oh * ow];
    for p in 0..m * c {
        let xp = &x.data[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            let r0 = &xp[2 * i * w..(2 * i + 1) * w];
            let r1 = &xp[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                // pairwise sums keep up2 -> down2 an exact identity in f64
                op[i * ow + j] = ((r0[2 * j] + r0[2 * j + 1]) + (r1[2 * j] + r1[2 * j + 1])) * 0.25;
            }
        }
    }
    Ok((vec![m, c, oh, ow], out))
}

pub(crate) fn up2_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("up2", x)?;
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0; m * c * oh * ow];
    for p in 0..m * c {
        let xp = &x.data[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let v = xp[i * w + j];
                op[2 * i * ow + 2 * j] = v;
                op[2 * i * ow + 2 * j + 1] = v;
                op[(2 * i + 1) * ow + 2 * j] = v;
                op[(2 * i + 1) * ow + 2 * j + 1] = v;
            }
        }
    }
    Ok((vec![m, c, oh, ow], out))
}

// ── channel norm ────────────────────────────────────────────────────

pub(crate) fn channel_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("channel_norm", x)?;
    if gamma.shape != [c] || beta.shape != [c] {
        return Err(Error::ShapeMismatch { op: "channel_norm", lhs: gamma.shape.clone(), rhs: vec![c] });
    }
    let n = h * w;
    let mut out = vec![0.0; x.numel()];
    for mi in 0..m {
        for ci in 0..c {
            let xs = &x.data[(mi * c + ci) * n..(mi * c + ci + 1) * n];
            let os = &mut out[(mi * c + ci) * n..(mi * c + ci + 1) * n];
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let (gm, bt) = (gamma.data[ci], beta.data[ci]);
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = gm * (v - mean) * inv + bt;
            }
        }
    }
    Ok((x.shape.clone(), out))
}

fn channel_norm_backward(
    g: &[f64],
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    mut dx: Option<&mut [f64]>,
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) {
    let (m, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let n = h * w;
    let nf = n as f64;
    for mi in 0..m {
        for ci in 0..c {
            let base = (mi * c + ci) * n;
            let xs = &x.data[base..base + n];
            let gs = &g[base..base + n];
            let mean = xs.iter().sum::<f64>() / nf;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
            let inv = 1.0 / (var + eps).sqrt();
            let sum_g: f64 = gs.iter().sum();
            let sum_gxhat: f64 = gs.iter().zip(xs).map(|(&gv, &xv)| gv * (xv - mean) * inv).sum();
            if let Some(db) = dbeta.as_deref_mut() {
                db[ci] += sum_g;
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[ci] += sum_gxhat;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let gm = gamma.data[ci];
                let ds = &mut dx[base..base + n];
                for ((d, &gv), &xv) in ds.iter_mut().zip(gs).zip(xs) {
                    let xhat = (xv - mean) * inv;
                    *d += gm * inv * (gv - sum_g / nf - xhat * sum_gxhat / nf);
                }
            }
        }
    }
}

// ── layout ops ──────────────────────────────────────────────────────

pub(crate) fn concat_channels_forward(parts: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels", "no inputs"));
    }
    let (m, _, h, w) = expect_4d("concat_channels", parts[0])?;
    let mut ctotal = 0;
    for p in parts {
        let (pm, pc, ph, pw) = expect_4d("concat_channels", p)?;
        if (pm, ph, pw) != (m, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        ctotal += pc;
    }
    let plane = h * w;
    let mut out = vec![0.0; m * ctotal * plane];
    for mi in 0..m {
        let mut co = 0;
        for p in parts {
            let pc = p.shape[1];
            let src = &p.data[mi * pc * plane..(mi + 1) * pc * plane];
            out[(mi * ctotal + co) * plane..(mi * ctotal + co + pc) * plane].copy_from_slice(src);
            co += pc;
        }
    }
    Ok((vec![m, ctotal, h, w], out))
}

pub(crate) fn concat_frames_forward(parts: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_frames", "no inputs"));
    }
    let rest = &parts[0].shape[1..];
    let mut m = 0;
    for p in parts {
        if p.shape.is_empty() || &p.shape[1..] != rest {
            return Err(Error::ShapeMismatch {
                op: "concat_frames",
                lhs: parts[0].shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        m += p.shape[0];
    }
    let mut shape = vec![m];
    shape.extend_from_slice(rest);
    let mut out = Vec::with_capacity(shape.iter().product());
    for p in parts {
        out.extend_from_slice(&p.data);
    }
    Ok((shape, out))
}

pub(crate) fn slice_frames_forward(x: &Tensor, start: usize, len: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.shape.is_empty() || start + len > x.shape[0] {
        return Err(Error::invalid(
            "slice_frames",
            format!("frames {}..{} of shape {:?}", start, start + len, x.shape),
        ));
    }
    let row: usize = x.shape[1..].iter().product();
    let mut shape = vec![len];
    shape.extend_from_slice(&x.shape[1..]);
    let data = x.data[start * row..(start + len) * row].to_vec();
    Ok((shape, data))
}

pub(crate) fn add_channel_bias_forward(x: &Tensor, bias: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("add_channel_bias", x)?;
    if bias.shape != [c] {
        return Err(Error::ShapeMismatch {
            op: "add_channel_bias",
            lhs: x.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let plane = h * w;
    let mut out = x.data.clone();
    for mi in 0..m {
        for ci in 0..c {
            let b = bias.data[ci];
            for v in &mut out[(mi * c + ci) * plane..(mi * c + ci + 1) * plane] {
                *v += b;
            }
        }
    }
    Ok((x.shape.clone(), out))
}

pub(crate) fn diff_h_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("diff_h", x)?;
    if h < 2 {
        return Err(Error::invalid("diff_h", format!("need H >= 2, got {h}")));
    }
    let mut out = vec![0.0; m * c * (h - 1) * w];
    for p in 0..m * c {
        let xp = &x.data[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * (h - 1) * w..(p + 1) * (h - 1) * w];
        for i in 0..h - 1 {
            for j in 0..w {
                op[i * w + j] = xp[(i + 1) * w + j] - xp[i * w + j];
            }
        }
    }
    Ok((vec![m, c, h - 1, w], out))
}

pub(crate) fn diff_w_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (m, c, h, w) = expect_4d("diff_w", x)?;
    if w < 2 {
        return Err(Error::invalid("diff_w", format!("need W >= 2, got {w}")));
    }
    let mut out = vec![0.0; m * c * h * (w - 1)];
    for p in 0..m * c {
        let xp = &x.data[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h * (w - 1)..(p + 1) * h * (w - 1)];
        for i in 0..h {
            for j in 0..w - 1 {
                op[i * (w - 1) + j] = xp[i * w + j + 1] - xp[i * w + j];
            }
        }
    }
    Ok((vec![m, c, h, w - 1], out))
}

// ── backward dispatch ───────────────────────────────────────────────

fn req(vals: &[Tensor], id: TensorId) -> bool {
    vals[id.0].requires_grad
}

/// Borrow a gradient buffer only when that input can reach a differentiable leaf.
fn grad_if<'a>(grads: &'a mut [Vec<f64>], vals: &[Tensor], id: TensorId) -> Option<&'a mut [f64]> {
    if req(vals, id) {
        Some(grads[id.0].as_mut_slice())
    } else {
        None
    }
}

/// Apply one node's backward rule, accumulating into input gradients.
pub(crate) fn backward_node(node: &Node, vals: &[Tensor], g: &[f64], grads: &mut [Vec<f64>]) {
    match node {
        Node::Leaf => {}
        Node::Add { a, b } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, 1.0);
            }
            if req(vals, *b) {
                axpy(&mut grads[b.0], g, 1.0);
            }
        }
        Node::Sub { a, b } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, 1.0);
            }
            if req(vals, *b) {
                axpy(&mut grads[b.0], g, -1.0);
            }
        }
        Node::Mul { a, b } => {
            if req(vals, *a) {
                let bv = &vals[b.0].data;
                for (d, (&gv, &x)) in grads[a.0].iter_mut().zip(g.iter().zip(bv)) {
                    *d += gv * x;
                }
            }
            if req(vals, *b) {
                let av = &vals[a.0].data;
                for (d, (&gv, &x)) in grads[b.0].iter_mut().zip(g.iter().zip(av)) {
                    *d += gv * x;
                }
            }
        }
        Node::Div { a, b } => {
            if req(vals, *a) {
                let bv = &vals[b.0].data;
                for (d, (&gv, &y)) in grads[a.0].iter_mut().zip(g.iter().zip(bv)) {
                    *d += gv / y;
                }
            }
            if req(vals, *b) {
                let av = vals[a.0].data.clone();
                let bv = vals[b.0].data.clone();
                for (i, d) in grads[b.0].iter_mut().enumerate() {
                    *d += -g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Node::Scale { a, c } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, *c);
            }
        }
        Node::AddConst { a } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, 1.0);
            }
        }
        Node::MulS { a, s } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, vals[s.0].data[0]);
            }
            if req(vals, *s) {
                let av = &vals[a.0].data;
                grads[s.0][0] += g.iter().zip(av).map(|(&gv, &x)| gv * x).sum::<f64>();
            }
        }
        Node::AddS { a, s } => {
            if req(vals, *a) {
                axpy(&mut grads[a.0], g, 1.0);
            }
            if req(vals, *s) {
                grads[s.0][0] += g.iter().sum::<f64>();
            }
        }
        Node::Abs { a } => {
            if req(vals, *a) {
                let av = &vals[a.0].data;
                for (d, (&gv, &x)) in grads[a.0].iter_mut().zip(g.iter().zip(av)) {
                    *d += gv * sign(x);
                }
            }
        }
        Node::Silu { a } => {
            if req(vals, *a) {
                let av = &vals[a.0].data;
                for (d, (&gv, &x)) in grads[a.0].iter_mut().zip(g.iter().zip(av)) {
                    *d += gv * silu_deriv(x);
                }
            }
        }
        Node::Sum { a } => {
            if req(vals, *a) {
                let gv = g[0];
                for d in grads[a.0].iter_mut() {
                    *d += gv;
                }
            }
        }
        Node::Conv2d { x, w, bias, stride, pad } => {
            let [dx, dw, db] = grads
                .get_disjoint_mut([x.0, w.0, bias.0])
                .expect("conv2d inputs must be distinct tensors");
            conv2d_backward(
                g,
                &vals[x.0],
                &vals[w.0],
                *stride,
                *pad,
                req(vals, *x).then_some(dx.as_mut_slice()),
                req(vals, *w).then_some(dw.as_mut_slice()),
                req(vals, *bias).then_some(db.as_mut_slice()),
            );
        }
        Node::TemporalConv { x, w } => {
            let [dx, dw] = grads
                .get_disjoint_mut([x.0, w.0])
                .expect("temporal_conv inputs must be distinct tensors");
            temporal_conv_backward(
                g,
                &vals[x.0],
                &vals[w.0],
                req(vals, *x).then_some(dx.as_mut_slice()),
                req(vals, *w).then_some(dw.as_mut_slice()),
            );
        }
        Node::Down2 { x } => {
            if let Some(dx) = grad_if(grads, vals, *x) {
                let s = &vals[x.0].shape;
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                for p in 0..m * c {
                    let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gp[i * ow + j] * 0.25;
                            dp[2 * i * w + 2 * j] += gv;
                            dp[2 * i * w + 2 * j + 1] += gv;
                            dp[(2 * i + 1) * w + 2 * j] += gv;
                            dp[(2 * i + 1) * w + 2 * j + 1] += gv;
                        }
                    }
                }
            }
        }
        Node::Up2 { x } => {
            if let Some(dx) = grad_if(grads, vals, *x) {
                let s = &vals[x.0].shape;
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                let ow = w * 2;
                for p in 0..m * c {
                    let gp = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dp[i * w + j] += (gp[2 * i * ow + 2 * j] + gp[2 * i * ow + 2 * j + 1])
                                + (gp[(2 * i + 1) * ow + 2 * j] + gp[(2 * i + 1) * ow + 2 * j + 1]);
                        }
                    }
                }
            }
        }
        Node::ChannelNorm { x, gamma, beta, eps } => {
            let [dx, dg, db] = grads
                .get_disjoint_mut([x.0, gamma.0, beta.0])
                .expect("channel_norm inputs must be distinct tensors");
            channel_norm_backward(
                g,
                &vals[x.0],
                &vals[gamma.0],
                *eps,
                req(vals, *x).then_some(dx.as_mut_slice()),
                req(vals, *gamma).then_some(dg.as_mut_slice()),
                req(vals, *beta).then_some(db.as_mut_slice()),
            );
        }
        Node::ConcatC { parts } => {
            let out_c: usize = parts.iter().map(|p| vals[p.0].shape[1]).sum();
            let (m, h, w) = {
                let s = &vals[parts[0].0].shape;
                (s[0], s[2], s[3])
            };
            let plane = h * w;
            for mi in 0..m {
                let mut co = 0;
                for p in parts {
                    let pc = vals[p.0].shape[1];
                    if req(vals, *p) {
                        let dst = &mut grads[p.0][mi * pc * plane..(mi + 1) * pc * plane];
                        let src = &g[(mi * out_c + co) * plane..(mi * out_c + co + pc) * plane];
                        axpy(dst, src, 1.0);
                    }
                    co += pc;
                }
            }
        }
        Node::ConcatF { parts } => {
            let mut off = 0;
            for p in parts {
                let n = vals[p.0].numel();
                if req(vals, *p) {
                    axpy(&mut grads[p.0], &g[off..off + n], 1.0);
                }
                off += n;
            }
        }
        Node::SliceF { x, start } => {
            if req(vals, *x) {
                let row: usize = vals[x.0].shape[1..].iter().product();
                axpy(&mut grads[x.0][start * row..start * row + g.len()], g, 1.0);
            }
        }
        Node::AddChannelBias { x, bias } => {
            if req(vals, *x) {
                axpy(&mut grads[x.0], g, 1.0);
            }
            if req(vals, *bias) {
                let s = &vals[x.0].shape;
                let (m, c, plane) = (s[0], s[1], s[2] * s[3]);
                let db = &mut grads[bias.0];
                for mi in 0..m {
                    for ci in 0..c {
                        db[ci] += g[(mi * c + ci) * plane..(mi * c + ci + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
        }
        Node::Reshape { x } => {
            if req(vals, *x) {
                axpy(&mut grads[x.0], g, 1.0);
            }
        }
        Node::SelectRow { table, row } => {
            if req(vals, *table) {
                let d = vals[table.0].shape[1];
                axpy(&mut grads[table.0][row * d..(row + 1) * d], g, 1.0);
            }
        }
        Node::DiffH { x } => {
            if let Some(dx) = grad_if(grads, vals, *x) {
                let s = &vals[x.0].shape;
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                for p in 0..m * c {
                    let gp = &g[p * (h - 1) * w..(p + 1) * (h - 1) * w];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h - 1 {
                        for j in 0..w {
                            let gv = gp[i * w + j];
                            dp[(i + 1) * w + j] += gv;
                            dp[i * w + j] -= gv;
                        }
                    }
                }
            }
        }
        Node::DiffW { x } => {
            if let Some(dx) = grad_if(grads, vals, *x) {
                let s = &vals[x.0].shape;
                let (m, c, h, w) = (s[0], s[1], s[2], s[3]);
                for p in 0..m * c {
                    let gp = &g[p * h * (w - 1)..(p + 1) * h * (w - 1)];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w - 1 {
                            let gv = gp[i * (w - 1) + j];
                            dp[i * w + j + 1] += gv;
                            dp[i * w + j] -= gv;
                        }
                    }
                }
            }
        }
    }
}

/// Ids consumed by a node, used to propagate gradient reachability forward.
pub(crate) fn node_inputs(node: &Node) -> Vec<TensorId> {
    match node {
        Node::Leaf => vec![],
        Node::Add { a, b }
        | Node::Sub { a, b }
        | Node::Mul { a, b }
        | Node::Div { a, b } => vec![*a, *b],
        Node::Scale { a, .. } | Node::AddConst { a } => vec![*a],
        Node::MulS { a, s } | Node::AddS { a, s } => vec![*a, *s],
        Node::Abs { a } | Node::Silu { a } | Node::Sum { a } => vec![*a],
        Node::Conv2d { x, w, bias, .. } => vec![*x, *w, *bias],
        Node::TemporalConv { x, w } => vec![*x, *w],
        Node::Down2 { x } | Node::Up2 { x } => vec![*x],
        Node::ChannelNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Node::ConcatC { parts } | Node::ConcatF { parts } => parts.clone(),
        Node::SliceF { x, .. } => vec![*x],
        Node::AddChannelBias { x, bias } => vec![*x, *bias],
        Node::Reshape { x } => vec![*x],
        Node::SelectRow { table, .. } => vec![*table],
        Node::DiffH { x } | Node::DiffW { x } => vec![*x],
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
