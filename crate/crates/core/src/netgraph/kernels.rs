//! Forward and backward kernels on raw NCHW buffers.

use crate::scalar::Scalar;

/// Unfolds one `[ci, h, w]` image into `[ci*k*k, h*w]` columns, zero padded by `k/2`.
pub(crate) fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(cols.len(), ci * k * k * hw);
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..h {
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (xo, o) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + shift;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Scalar>(cols: &[T], ci: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).min(w as isize)).max(0) as usize;
                    for xo in lo..hi {
                        dst[(xo as isize + shift) as usize] += src[y * w + xo];
                    }
                }
            }
        }
    }
}

/// Geometry of a same-padded stride-1 convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward<T: Scalar>(s: ConvShape, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let hw = s.h * s.w;
    let kk = s.cin * s.k * s.k;
    let mut out = vec![T::zero(); s.batch * s.cout * hw];
    let mut cols = if s.k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for n in 0..s.batch {
        let xb = &x[n * s.cin * hw..(n + 1) * s.cin * hw];
        let ob = &mut out[n * s.cout * hw..(n + 1) * s.cout * hw];
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        let src: &[T] = if s.k == 1 {
            xb
        } else {
            im2col(xb, s.cin, s.h, s.w, s.k, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(s.cout, kk, hw, T::one(), weight, kk, 1, src, hw, 1, beta, ob, hw, 1);
    }
    out
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when not needed.
pub(crate) fn conv2d_backward<T: Scalar>(
    s: ConvShape,
    x: &[T],
    weight: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = s.h * s.w;
    let kk = s.cin * s.k * s.k;
    let mut dw = vec![T::zero(); s.cout * kk];
    let mut db = vec![T::zero(); s.cout];
    let mut dx = if need_dx {
        Some(vec![T::zero(); s.batch * s.cin * hw])
    } else {
        None
    };
    let mut cols = if s.k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if s.k == 1 || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for n in 0..s.batch {
        let xb = &x[n * s.cin * hw..(n + 1) * s.cin * hw];
        let gb = &dout[n * s.cout * hw..(n + 1) * s.cout * hw];
        for (co, d) in db.iter_mut().enumerate() {
            *d += gb[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if need_dw {
            let src: &[T] = if s.k == 1 {
                xb
            } else {
                im2col(xb, s.cin, s.h, s.w, s.k, &mut cols);
                &cols
            };
            // dW += dout_b [cout, hw] * cols^T [hw, kk]
            T::gemm(
                s.cout,
                hw,
                kk,
                T::one(),
                gb,
                hw,
                1,
                src,
                1,
                hw,
                T::one(),
                &mut dw,
                kk,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[n * s.cin * hw..(n + 1) * s.cin * hw];
            if s.k == 1 {
                // dx_b = W^T [cin, cout] * dout_b [cout, hw]
                T::gemm(
                    s.cin,
                    s.cout,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kk,
                    gb,
                    hw,
                    1,
                    T::zero(),
                    dxb,
                    hw,
                    1,
                );
            } else {
                T::gemm(
                    kk,
                    s.cout,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kk,
                    gb,
                    hw,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw,
                    1,
                );
                col2im(&dcols, s.cin, s.h, s.w, s.k, dxb);
            }
        }
    }
    (dx, dw, db)
}

pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    dims: (usize, usize, usize),
    groups: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, NormStats<T>) {
    let (b, c, hw) = dims;
    let cpg = c / groups;
    let count = T::of((cpg * hw) as f64);
    let eps = T::of(NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for n in 0..b {
        for g in 0..groups {
            let start = (n * c + g * cpg) * hw;
            let seg = &x[start..start + cpg * hw];
            let mu = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let (ga, be) = (gain[ch], bias[ch]);
                let off = start + ci * hw;
                for i in off..off + hw {
                    y[i] = (x[i] - mu) * r * ga + be;
                }
            }
            mean.push(mu);
            rstd.push(r);
        }
    }
    (y, NormStats { mean, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn group_norm_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    dims: (usize, usize, usize),
    groups: usize,
    gain: &[T],
    stats: &NormStats<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, hw) = dims;
    let cpg = c / groups;
    let count = T::of((cpg * hw) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); c];
    let mut dbias = vec![T::zero(); c];
    for n in 0..b {
        for g in 0..groups {
            let idx = n * groups + g;
            let (mu, r) = (stats.mean[idx], stats.rstd[idx]);
            let start = (n * c + g * cpg) * hw;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * r;
                    dgain[ch] += dy[i] * xhat;
                    dbias[ch] += dy[i];
                    let dxhat = dy[i] * gain[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m1 = sum_dxhat / count;
            let m2 = sum_dxhat_xhat / count;
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                let off = start + ci * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - mu) * r;
                    dx[i] = r * (dy[i] * gain[ch] - m1 - xhat * m2);
                }
            }
        }
    }
    (dx, dgain, dbias)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn avg_pool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            let r0 = base + 2 * i * w;
            let r1 = r0 + w;
            for j in 0..ow {
                let s = x[r0 + 2 * j] + x[r0 + 2 * j + 1] + x[r1 + 2 * j] + x[r1 + 2 * j + 1];
                y.push(s * quarter);
            }
        }
    }
    y
}

pub(crate) fn avg_pool2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[(p * oh + i) * ow + j] * quarter;
                let r0 = p * h * w + 2 * i * w + 2 * j;
                dx[r0] = g;
                dx[r0 + 1] = g;
                dx[r0 + w] = g;
                dx[r0 + w + 1] = g;
            }
        }
    }
    dx
}

pub(crate) fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            let src = &x[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
            let dst = &mut y[(p * oh + i) * ow..(p * oh + i + 1) * ow];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / 2];
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            let src = &dy[(p * oh + i) * ow..(p * oh + i + 1) * ow];
            let dst = &mut dx[(p * h + i / 2) * w..(p * h + i / 2 + 1) * w];
            for (j, &g) in src.iter().enumerate() {
                dst[j / 2] += g;
            }
        }
    }
    dx
}
