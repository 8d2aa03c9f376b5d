//! Forward and backward kernels over NCHW tensors.

use crate::tensor::{gemm, Tensor};

/// Unfolds one sample (c×h×w) into a (c·k·k)×(h·w) patch matrix, zero padded.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    dst[..lo.min(w)].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    dst[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, pad: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dxs = kx as isize - pad as isize;
                let dys = ky as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dys;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dxs).max(0) as usize;
                    let hi = (w as isize - dxs).min(w as isize).max(0) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let s0 = (lo as isize + dxs) as usize;
                    let dst = &mut plane[sy as usize * w + s0..][..hi - lo];
                    for (d, s) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 convolution with `pad` zero padding; weight is co×ci×k×k.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, pad: usize) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (co, wci, k, _) = weight.dims4();
    assert_eq!(ci, wci, "conv input channels");
    assert_eq!(2 * pad + 1, k, "only same-size convolutions are supported");
    let hw = h * w;
    let kk = ci * k * k;
    let mut out = Tensor::zeros(&[n, co, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for s in 0..n {
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        let os = &mut out.data_mut()[s * co * hw..(s + 1) * co * hw];
        let patches: &[f64] = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, pad, &mut cols);
            &cols
        };
        gemm(co, kk, hw, weight.data(), false, patches, false, 0.0, os);
        if let Some(b) = bias {
            for (o, bv) in os.chunks_mut(hw).zip(b.data()) {
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Tensor,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    pad: usize,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads {
    let (n, ci, h, w) = x.dims4();
    let (co, _, k, _) = weight.dims4();
    let hw = h * w;
    let kk = ci * k * k;
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut cols = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    let mut dcols = if need_dx && k != 1 { vec![0.0; kk * hw] } else { Vec::new() };
    for s in 0..n {
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        let dys = &dy.data()[s * co * hw..(s + 1) * co * hw];
        let patches: &[f64] = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, pad, &mut cols);
            &cols
        };
        // dW += dY · patchesᵀ
        gemm(co, hw, kk, dys, false, patches, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * ci * hw..(s + 1) * ci * hw];
            if k == 1 {
                gemm(kk, co, hw, weight.data(), true, dys, false, 1.0, dxs);
            } else {
                gemm(kk, co, hw, weight.data(), true, dys, false, 0.0, &mut dcols);
                col2im(&dcols, ci, h, w, k, pad, dxs);
            }
        }
        if let Some(db) = db.as_mut() {
            for (b, plane) in db.data_mut().iter_mut().zip(dys.chunks(hw)) {
                *b += plane.iter().sum::<f64>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 stride-2 transposed convolution; weight is ci×co×2×2.
pub fn conv_transpose2(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, ci, h, w) = x.dims4();
    let (wci, co, k1, k2) = weight.dims4();
    assert_eq!((ci, k1, k2), (wci, 2, 2), "transposed conv weight shape");
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = vec![0.0; co * 4 * hw];
    for s in 0..n {
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        gemm(co * 4, ci, hw, weight.data(), true, xs, false, 0.0, &mut cols);
        let os = &mut out.data_mut()[s * co * oh * ow..(s + 1) * co * oh * ow];
        for c in 0..co {
            let bv = bias.map_or(0.0, |b| b.data()[c]);
            for a in 0..2 {
                for b in 0..2 {
                    let row = &cols[(c * 4 + a * 2 + b) * hw..][..hw];
                    for y in 0..h {
                        let dst = &mut os[c * oh * ow + (2 * y + a) * ow..][..ow];
                        for xx in 0..w {
                            dst[2 * xx + b] = row[y * w + xx] + bv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads {
    let (n, ci, h, w) = x.dims4();
    let (_, co, _, _) = weight.dims4();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dw = Tensor::zeros(weight.shape());
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut db = need_db.then(|| Tensor::zeros(&[co]));
    let mut dcols = vec![0.0; co * 4 * hw];
    for s in 0..n {
        let dys = &dy.data()[s * co * oh * ow..(s + 1) * co * oh * ow];
        for c in 0..co {
            for a in 0..2 {
                for b in 0..2 {
                    let row = &mut dcols[(c * 4 + a * 2 + b) * hw..][..hw];
                    for y in 0..h {
                        let src = &dys[c * oh * ow + (2 * y + a) * ow..][..ow];
                        for xx in 0..w {
                            row[y * w + xx] = src[2 * xx + b];
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[c] += dys[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
            }
        }
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        // dW (ci × co4) += X (ci × hw) · dcolsᵀ (hw × co4)
        gemm(ci, hw, co * 4, xs, false, &dcols, true, 1.0, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * ci * hw..(s + 1) * ci * hw];
            gemm(ci, co * 4, hw, weight.data(), false, &dcols, false, 0.0, dxs);
        }
    }
    ConvGrads { dx, dw, db }
}

pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                o[y * ow + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Tensor, in_shape: &[usize]) -> Tensor {
    let (_, _, oh, ow) = dy.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for (p, g) in dy.data().chunks(oh * ow).enumerate() {
        let plane = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = 0.25 * g[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                plane[i] += v;
                plane[i + 1] += v;
                plane[i + w] += v;
                plane[i + w + 1] += v;
            }
        }
    }
    dx
}

/// Per-channel normalization statistics over (n, h, w).
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, as used for normalization.
    pub var: Vec<f64>,
    /// Count of values per channel.
    pub count: usize,
}

pub fn channel_stats(x: &Tensor) -> BatchStats {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.data()[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let m = s / count as f64;
        let mut v = 0.0;
        for i in 0..n {
            v += x.data()[(i * c + ch) * hw..][..hw]
                .iter()
                .map(|t| (t - m) * (t - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count as f64;
    }
    BatchStats { mean, var, count }
}

/// y = γ·(x − mean)·inv_std + β; returns (y, x̂).
pub fn normalize_affine(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * hw;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for j in off..off + hw {
                let v = (x.data()[j] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[j] = v;
                y.data_mut()[j] = g * v + b;
            }
        }
    }
    (y, xhat)
}

pub struct NormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

/// Backward of batch normalization. With `batch_stats` the mean and variance
/// are functions of the input; otherwise they are constants.
pub fn batch_norm_backward(
    dy: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    batch_stats: bool,
) -> NormGrads {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                sum_dy += dy.data()[j];
                sum_dy_xhat += dy.data()[j] * xhat.data()[j];
            }
        }
        dgamma.data_mut()[ch] = sum_dy_xhat;
        dbeta.data_mut()[ch] = sum_dy;
        let g = gamma.data()[ch];
        let s = inv_std[ch];
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for j in off..off + hw {
                dx.data_mut()[j] = if batch_stats {
                    g * s / m * (m * dy.data()[j] - sum_dy - xhat.data()[j] * sum_dy_xhat)
                } else {
                    g * s * dy.data()[j]
                };
            }
        }
    }
    NormGrads { dx, dgamma, dbeta }
}
