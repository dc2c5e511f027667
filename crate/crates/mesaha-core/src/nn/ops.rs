//! Raw forward/backward kernels over NCHW arrays.

use super::Elem;
use ndarray::parallel::prelude::*;
use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, Axis, Zip};

/// Unfolds `x` ([C, H, W]) into `cols` ([C*k*k, H*W]) for a stride-1, padded
/// convolution. Out-of-bounds taps are zero.
fn im2col<E: Elem>(x: &ArrayView3<'_, E>, k: usize, pad: usize, cols: &mut Array2<E>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c * k * k, h * w));
    cols.fill(E::zero());
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                // Output x-range whose source column stays in bounds.
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx_lo = x_lo + kx - pad;
                    let src = x.slice(s![ic, sy as usize, sx_lo..sx_lo + (x_hi - x_lo)]);
                    let dst_start = y * w + x_lo;
                    let mut dst = cols.slice_mut(s![row, dst_start..dst_start + (x_hi - x_lo)]);
                    dst.assign(&src);
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds column gradients back onto the
/// input gradient plane.
fn col2im_add<E: Elem>(
    cols: &Array2<E>,
    k: usize,
    pad: usize,
    dx: &mut ndarray::ArrayViewMut3<'_, E>,
) {
    let (c, h, w) = dx.dim();
    debug_assert_eq!(cols.dim(), (c * k * k, h * w));
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad - kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx_lo = x_lo + kx - pad;
                    let src = cols.slice(s![row, y * w + x_lo..y * w + x_hi]);
                    let mut dst =
                        dx.slice_mut(s![ic, sy as usize, sx_lo..sx_lo + (x_hi - x_lo)]);
                    dst += &src;
                }
            }
        }
    }
}

/// Stride-1 "same" convolution; kernel must be square with odd side (1 or 3
/// in this network), padding is `k / 2`.
pub fn conv2d_forward<E: Elem>(
    x: &ArrayView4<'_, E>,
    w: &ArrayView4<'_, E>,
    b: Option<&ArrayView1<'_, E>>,
) -> Array4<E> {
    let (n, c, h, width) = x.dim();
    let (oc, ic, k, k2) = w.dim();
    assert_eq!(c, ic, "conv input channels {c} != kernel channels {ic}");
    assert_eq!(k, k2, "conv kernel must be square");
    let pad = k / 2;
    let w2 = w
        .to_shape((oc, ic * k * k))
        .expect("kernel tensors are standard layout");
    let mut out = Array4::<E>::zeros((n, oc, h, width));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out_n)| {
            let xn = x.index_axis(Axis(0), i);
            let prod = if k == 1 {
                let xm = xn
                    .to_shape((c, h * width))
                    .expect("node values are standard layout");
                w2.dot(&xm)
            } else {
                let mut cols = Array2::<E>::zeros((c * k * k, h * width));
                im2col(&xn, k, pad, &mut cols);
                w2.dot(&cols)
            };
            out_n.assign(&prod.to_shape((oc, h, width)).expect("matmul output"));
            if let Some(bias) = b {
                for o in 0..oc {
                    let mut ch = out_n.index_axis_mut(Axis(0), o);
                    ch += bias[o];
                }
            }
        });
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, kernel, and bias.
pub fn conv2d_backward<E: Elem>(
    x: &ArrayView4<'_, E>,
    w: &ArrayView4<'_, E>,
    dout: &ArrayView4<'_, E>,
) -> (Array4<E>, Array4<E>, Array1<E>) {
    let (n, c, h, width) = x.dim();
    let (oc, ic, k, _) = w.dim();
    let pad = k / 2;
    let w2 = w.to_shape((oc, ic * k * k)).expect("standard layout");

    let mut dx = Array4::<E>::zeros((n, c, h, width));
    let per_sample_dw: Vec<Array2<E>> = dx
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(i, mut dx_n)| {
            let xn = x.index_axis(Axis(0), i);
            let dout_m = dout
                .index_axis(Axis(0), i)
                .to_shape((oc, h * width))
                .expect("standard layout")
                .into_owned();
            if k == 1 {
                let xm = xn.to_shape((c, h * width)).expect("standard layout");
                let dw_n = dout_m.dot(&xm.t());
                let dcols = w2.t().dot(&dout_m);
                dx_n.assign(&dcols.to_shape((c, h, width)).expect("matmul output"));
                dw_n
            } else {
                let mut cols = Array2::<E>::zeros((c * k * k, h * width));
                im2col(&xn, k, pad, &mut cols);
                let dw_n = dout_m.dot(&cols.t());
                let dcols = w2.t().dot(&dout_m);
                col2im_add(&dcols, k, pad, &mut dx_n.view_mut());
                dw_n
            }
        })
        .collect();

    // Sum per-sample kernel gradients in index order to stay deterministic.
    let mut dw2 = Array2::<E>::zeros((oc, ic * k * k));
    for dwn in per_sample_dw {
        dw2 += &dwn;
    }
    let dw = dw2
        .to_shape((oc, ic, k, k))
        .expect("contiguous")
        .into_owned();

    let mut db = Array1::<E>::zeros(oc);
    for i in 0..n {
        for o in 0..oc {
            db[o] += dout.slice(s![i, o, .., ..]).sum();
        }
    }
    (dx, dw, db)
}

/// 2x2 max pooling with stride 2; also returns the argmax offset (dy*2+dx)
/// needed by the backward pass. Ties resolve to the first maximum in scan
/// order. Spatial dims must be even.
pub fn maxpool2_forward<E: Elem>(x: &ArrayView4<'_, E>) -> (Array4<E>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max pool needs even spatial dims, got {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<E>::zeros((n, c, oh, ow));
    let mut idx = Array4::<u8>::zeros((n, c, oh, ow));
    for i in 0..n {
        for ch in 0..c {
            let plane = x.slice(s![i, ch, .., ..]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane[[2 * oy, 2 * ox]];
                    let mut best_k = 0u8;
                    for ky in 0..2usize {
                        for kx in 0..2usize {
                            let v = plane[[2 * oy + ky, 2 * ox + kx]];
                            if v > best {
                                best = v;
                                best_k = (ky * 2 + kx) as u8;
                            }
                        }
                    }
                    out[[i, ch, oy, ox]] = best;
                    idx[[i, ch, oy, ox]] = best_k;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<E: Elem>(dout: &ArrayView4<'_, E>, idx: &Array4<u8>) -> Array4<E> {
    let (n, c, oh, ow) = dout.dim();
    let mut dx = Array4::<E>::zeros((n, c, oh * 2, ow * 2));
    for i in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let k = idx[[i, ch, oy, ox]] as usize;
                    let (ky, kx) = (k / 2, k % 2);
                    dx[[i, ch, 2 * oy + ky, 2 * ox + kx]] += dout[[i, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<E: Elem>(x: &ArrayView4<'_, E>) -> Array4<E> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::<E>::zeros((n, c, h * 2, w * 2));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = x[[i, ch, y, x_]];
                    out[[i, ch, 2 * y, 2 * x_]] = v;
                    out[[i, ch, 2 * y, 2 * x_ + 1]] = v;
                    out[[i, ch, 2 * y + 1, 2 * x_]] = v;
                    out[[i, ch, 2 * y + 1, 2 * x_ + 1]] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<E: Elem>(dout: &ArrayView4<'_, E>) -> Array4<E> {
    let (n, c, h2, w2) = dout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<E>::zeros((n, c, h, w));
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    dx[[i, ch, y, x_]] = dout[[i, ch, 2 * y, 2 * x_]]
                        + dout[[i, ch, 2 * y, 2 * x_ + 1]]
                        + dout[[i, ch, 2 * y + 1, 2 * x_]]
                        + dout[[i, ch, 2 * y + 1, 2 * x_ + 1]];
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics cached by the forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnCache<E> {
    pub mean: Array1<E>,
    pub invstd: Array1<E>,
    /// Biased batch variance, exposed so the caller can update running
    /// statistics.
    pub var: Array1<E>,
}

pub fn bn_forward_train<E: Elem>(
    x: &ArrayView4<'_, E>,
    gamma: &ArrayView1<'_, E>,
    beta: &ArrayView1<'_, E>,
    eps: f64,
) -> (Array4<E>, BnCache<E>) {
    let (_, c, _, _) = x.dim();
    let mut mean = Array1::<E>::zeros(c);
    let mut var = Array1::<E>::zeros(c);
    let mut invstd = Array1::<E>::zeros(c);
    let eps = E::from_f64(eps);
    for ch in 0..c {
        let lane = x.slice(s![.., ch, .., ..]);
        let m = E::from_f64(lane.len() as f64);
        let mu = lane.sum() / m;
        let mut ss = E::zero();
        for v in lane.iter() {
            let d = *v - mu;
            ss += d * d;
        }
        let v = ss / m;
        mean[ch] = mu;
        var[ch] = v;
        invstd[ch] = E::one() / (v + eps).sqrt();
    }
    let mut out = x.to_owned();
    for ch in 0..c {
        let g = gamma[ch] * invstd[ch];
        let b = beta[ch] - gamma[ch] * mean[ch] * invstd[ch];
        let mut lane = out.slice_mut(s![.., ch, .., ..]);
        lane.mapv_inplace(|v| v * g + b);
    }
    (out, BnCache { mean, invstd, var })
}

pub fn bn_backward_train<E: Elem>(
    x: &ArrayView4<'_, E>,
    gamma: &ArrayView1<'_, E>,
    cache: &BnCache<E>,
    dout: &ArrayView4<'_, E>,
) -> (Array4<E>, Array1<E>, Array1<E>) {
    let (_, c, _, _) = x.dim();
    let mut dx = Array4::<E>::zeros(x.raw_dim());
    let mut dgamma = Array1::<E>::zeros(c);
    let mut dbeta = Array1::<E>::zeros(c);
    for ch in 0..c {
        let xl = x.slice(s![.., ch, .., ..]);
        let dl = dout.slice(s![.., ch, .., ..]);
        let m = E::from_f64(xl.len() as f64);
        let mu = cache.mean[ch];
        let istd = cache.invstd[ch];
        let g = gamma[ch];

        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        Zip::from(&xl).and(&dl).for_each(|xv, dv| {
            let xhat = (*xv - mu) * istd;
            sum_dy += *dv;
            sum_dy_xhat += *dv * xhat;
        });
        dbeta[ch] = sum_dy;
        dgamma[ch] = sum_dy_xhat;

        // dx = (g*istd/m) * (m*dy - sum_dy - xhat * sum_dy_xhat)
        let scale = g * istd / m;
        let mut dxl = dx.slice_mut(s![.., ch, .., ..]);
        Zip::from(&mut dxl).and(&xl).and(&dl).for_each(|o, xv, dv| {
            let xhat = (*xv - mu) * istd;
            *o = scale * (m * *dv - sum_dy - xhat * sum_dy_xhat);
        });
    }
    (dx, dgamma, dbeta)
}

/// Affine-only normalization: `y = gamma * x + beta` per channel. Used in the
/// degenerate mode (identity statistics) that analytic tests run in, and as
/// the inference transform once folded statistics are substituted.
pub fn bn_forward_affine<E: Elem>(
    x: &ArrayView4<'_, E>,
    scale: &Array1<E>,
    shift: &Array1<E>,
) -> Array4<E> {
    let (_, c, _, _) = x.dim();
    let mut out = x.to_owned();
    for ch in 0..c {
        let mut lane = out.slice_mut(s![.., ch, .., ..]);
        let (g, b) = (scale[ch], shift[ch]);
        lane.mapv_inplace(|v| v * g + b);
    }
    out
}
