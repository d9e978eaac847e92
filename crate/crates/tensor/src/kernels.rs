//! Slice-level forward and backward kernels used by the tape.
//!
//! Everything here is deterministic: reductions run in a fixed order and the
//! GEMM backend is single-threaded.

use crate::scalar::Scalar;

/// Geometry of a 3D cross-correlation on a `[C, D, H, W]` volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when it would be empty.
    pub fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = n + 2 * pad;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    fn in_voxels(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output positions `o` with `o * stride + shift` inside `[0, n)`.
fn valid_range(out_len: usize, stride: usize, shift: isize, n: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let last = n as isize - 1 - shift;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

/// Output z-planes processed per im2col tile; keeps the column buffer near
/// cache size instead of materializing the whole `K x P` matrix.
fn tile_planes(g: &ConvGeom) -> usize {
    const TARGET: usize = 1 << 18;
    let plane = g.out_dims[1] * g.out_dims[2];
    (TARGET / (g.col_rows() * plane).max(1)).clamp(1, g.out_dims[0])
}

/// Writes the `[K, P_tile]` column matrix for output planes `z0..z1`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, z0: usize, z1: usize, col: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = (z1 - z0) * oh * ow;
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let zero = T::zero();
    for c in 0..g.cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    let shift = kw as isize - pad;
                    let (x0, x1) = valid_range(ow, s, shift, w);
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize + kd as isize - pad;
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + kh as isize - pad;
                            let at = ((oz - z0) * oh + oy) * ow;
                            let out = &mut dst[at..at + ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                out.fill(zero);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            out[..x0].fill(zero);
                            out[x1..].fill(zero);
                            if s == 1 {
                                let off = (x0 as isize + shift) as usize;
                                out[x0..x1].copy_from_slice(&src[off..off + (x1 - x0)]);
                            } else {
                                for (ox, o) in out.iter_mut().enumerate().take(x1).skip(x0) {
                                    *o = src[((ox * s) as isize + shift) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a `[K, P_tile]` column gradient for planes `z0..z1` into `dx`.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, z0: usize, z1: usize, dx: &mut [T]) {
    let [d, h, w] = g.in_dims;
    let [_, oh, ow] = g.out_dims;
    let p = (z1 - z0) * oh * ow;
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.cin {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((c * k + kd) * k + kh) * k + kw;
                    let src_row = &col[row * p..(row + 1) * p];
                    let shift = kw as isize - pad;
                    let (x0, x1) = valid_range(ow, s, shift, w);
                    for oz in z0..z1 {
                        let iz = (oz * s) as isize + kd as isize - pad;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * s) as isize + kh as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let at = ((oz - z0) * oh + oy) * ow;
                            let src = &src_row[at..at + ow];
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            if s == 1 {
                                let off = (x0 as isize + shift) as usize;
                                for (a, &b) in dst[off..off + (x1 - x0)].iter_mut().zip(&src[x0..x1]) {
                                    *a += b;
                                }
                            } else {
                                for ox in x0..x1 {
                                    dst[((ox * s) as isize + shift) as usize] += src[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// The GEMMs below treat output voxels as the long `m` dimension and write
// straight into the channel-major `[Cout, P]` layout through strides; with
// the small channel counts of this model that runs faster than `[Cout, K] x
// [K, P]`.

/// `out[co, p0 + j] (+)= sum_k col[k, j] * w[co, k]` for a tile of `pt` columns.
#[allow(clippy::too_many_arguments)]
fn tile_forward<T: Scalar>(col: &[T], pt: usize, w: &[T], g: &ConvGeom, out: &mut [T], p0: usize, p: usize) {
    let kk = g.col_rows();
    T::gemm(
        pt,
        kk,
        g.cout,
        T::one(),
        col,
        1,
        pt as isize,
        w,
        1,
        kk as isize,
        T::zero(),
        &mut out[p0..],
        1,
        p as isize,
    );
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_voxels();
    let mut out = vec![T::zero(); g.cout * p];
    if g.is_pointwise() {
        tile_forward(x, p, w, g, &mut out, 0, p);
    } else {
        let plane = g.out_dims[1] * g.out_dims[2];
        let step = tile_planes(g);
        let mut col = vec![T::zero(); g.col_rows() * step * plane];
        for z0 in (0..g.out_dims[0]).step_by(step) {
            let z1 = (z0 + step).min(g.out_dims[0]);
            let pt = (z1 - z0) * plane;
            im2col(x, g, z0, z1, &mut col);
            tile_forward(&col, pt, w, g, &mut out, z0 * plane, p);
        }
    }
    if let Some(b) = b {
        for (row, &bias) in out.chunks_exact_mut(p).zip(b) {
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv3d_backward<T: Scalar>(x: &[T], w: &[T], gy: &[T], g: &ConvGeom, need: [bool; 3]) -> ConvGrads<T> {
    let p = g.out_voxels();
    let kk = g.col_rows();
    let db = need[2].then(|| gy.chunks_exact(p).map(|row| row.iter().copied().sum()).collect());
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * kk]);
    let mut dx = need[0].then(|| vec![T::zero(); g.cin * g.in_voxels()]);
    let transposed_dx = g.stride == 1 && !g.is_pointwise() && g.pad < g.k && g.cin >= 8 && p >= 4096;
    if let Some(dx) = dx.as_mut().filter(|_| transposed_dx) {
        // Stride-1 input gradient is a forward correlation of `gy` with the
        // spatially flipped, channel-transposed kernel.
        let k3 = g.k * g.k * g.k;
        let mut wt = vec![T::zero(); w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let src = &w[(co * g.cin + ci) * k3..][..k3];
                let dst = &mut wt[(ci * g.cout + co) * k3..][..k3];
                for (j, v) in dst.iter_mut().enumerate() {
                    *v = src[k3 - 1 - j];
                }
            }
        }
        let tg = ConvGeom {
            cin: g.cout,
            cout: g.cin,
            k: g.k,
            stride: 1,
            pad: g.k - 1 - g.pad,
            in_dims: g.out_dims,
            out_dims: g.in_dims,
        };
        *dx = conv3d_forward(gy, &wt, None, &tg);
        if dw.is_none() {
            return ConvGrads {
                dx: Some(std::mem::take(dx)),
                dw,
                db,
            };
        }
    }
    let (plane, step) = if g.is_pointwise() {
        (p, 1)
    } else {
        (g.out_dims[1] * g.out_dims[2], tile_planes(g))
    };
    let z_len = if g.is_pointwise() { 1 } else { g.out_dims[0] };
    let mut col = vec![T::zero(); kk * step * plane];
    for z0 in (0..z_len).step_by(step) {
        let z1 = (z0 + step).min(z_len);
        let pt = (z1 - z0) * plane;
        let p0 = z0 * plane;
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, z0, z1, &mut col);
                &col
            };
            // dW [Cout, K] += gy_tile [Cout, pt] . col^T [pt, K]
            T::gemm(
                g.cout,
                pt,
                kk,
                T::one(),
                &gy[p0..],
                p as isize,
                1,
                src,
                1,
                pt as isize,
                T::one(),
                dw,
                kk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut().filter(|_| !transposed_dx) {
            // dcol^T [pt, K] = gy_tile^T [pt, Cout] . W [Cout, K]
            let target: &mut [T] = if g.is_pointwise() { dx } else { &mut col };
            T::gemm(
                pt,
                g.cout,
                kk,
                T::one(),
                &gy[p0..],
                1,
                p as isize,
                w,
                kk as isize,
                1,
                T::zero(),
                target,
                1,
                pt as isize,
            );
            if !g.is_pointwise() {
                col2im(&col, g, z0, z1, dx);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Decomposes `shape` around `axis` into `(outer, n, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Source taps for half-pixel linear resampling from `n` to `m` samples.
pub fn linear_taps(n: usize, m: usize) -> Vec<(usize, usize, f64)> {
    let scale = n as f64 / m as f64;
    (0..m)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, m: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let taps = linear_taps(n, m);
    let mut out = vec![T::zero(); outer * m * inner];
    for a in 0..outer {
        let xa = &x[a * n * inner..(a + 1) * n * inner];
        let ya = &mut out[a * m * inner..(a + 1) * m * inner];
        for (o, &(i0, i1, l)) in taps.iter().enumerate() {
            let l = T::from_f64(l);
            let r = T::one() - l;
            let dst = &mut ya[o * inner..(o + 1) * inner];
            let s0 = &xa[i0 * inner..(i0 + 1) * inner];
            let s1 = &xa[i1 * inner..(i1 + 1) * inner];
            for ((d, &u), &v) in dst.iter_mut().zip(s0).zip(s1) {
                *d = r * u + l * v;
            }
        }
    }
    out
}

pub fn resize_backward<T: Scalar>(gy: &[T], in_shape: &[usize], axis: usize, m: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let taps = linear_taps(n, m);
    let mut dx = vec![T::zero(); outer * n * inner];
    for a in 0..outer {
        let ga = &gy[a * m * inner..(a + 1) * m * inner];
        let da = &mut dx[a * n * inner..(a + 1) * n * inner];
        for (o, &(i0, i1, l)) in taps.iter().enumerate() {
            let l = T::from_f64(l);
            let r = T::one() - l;
            let src = &ga[o * inner..(o + 1) * inner];
            for (j, &gv) in src.iter().enumerate() {
                da[i0 * inner + j] += r * gv;
                da[i1 * inner + j] += l * gv;
            }
        }
    }
    dx
}

/// Normalizes each contiguous group of `group` elements to zero mean and unit
/// population variance. Returns `(xhat, inv_std per group)`.
pub fn normalize_groups<T: Scalar>(x: &[T], group: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / group);
    for g in x.chunks_exact(group) {
        let mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / group as f64;
        let var = g
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / group as f64;
        let istd = 1.0 / (var + eps).sqrt();
        xhat.extend(g.iter().map(|v| T::from_f64((v.to_f64() - mean) * istd)));
        inv.push(T::from_f64(istd));
    }
    (xhat, inv)
}

/// Input gradient of group normalization given the gradient w.r.t. `xhat`.
pub fn normalize_groups_backward<T: Scalar>(dxhat: &[T], xhat: &[T], inv: &[T], group: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(dxhat.len());
    let n = T::from_f64(group as f64);
    for ((dg, xg), &istd) in dxhat.chunks_exact(group).zip(xhat.chunks_exact(group)).zip(inv) {
        let sum_d: T = dg.iter().copied().sum();
        let sum_dx: T = dg.iter().zip(xg).map(|(&a, &b)| a * b).sum();
        let mean_d = sum_d / n;
        let mean_dx = sum_dx / n;
        dx.extend(dg.iter().zip(xg).map(|(&d, &xh)| istd * (d - mean_d - xh * mean_dx)));
    }
    dx
}

/// Softmax along `axis`; `mask`, when given, applies to the last axis and
/// forces hidden positions to exactly zero.
pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize, mask: Option<&[bool]>, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    let visible = |i: usize| mask.is_none_or(|m| m[i]);
    for a in 0..outer {
        for b in 0..inner {
            let base = a * n * inner + b;
            let mut mx = T::neg_infinity();
            for i in (0..n).filter(|&i| visible(i)) {
                mx = mx.max(x[base + i * inner]);
            }
            let mut sum = T::zero();
            for i in (0..n).filter(|&i| visible(i)) {
                let e = (x[base + i * inner] - mx).exp();
                y[base + i * inner] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for i in 0..n {
                    y[base + i * inner] = x[base + i * inner] - mx - lse;
                }
            } else {
                for i in (0..n).filter(|&i| visible(i)) {
                    y[base + i * inner] /= sum;
                }
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], gy: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for a in 0..outer {
        for b in 0..inner {
            let base = a * n * inner + b;
            if log {
                let s: T = (0..n).map(|i| gy[base + i * inner]).sum();
                for i in 0..n {
                    let j = base + i * inner;
                    dx[j] = gy[j] - y[j].exp() * s;
                }
            } else {
                let s: T = (0..n).map(|i| gy[base + i * inner] * y[base + i * inner]).sum();
                for i in 0..n {
                    let j = base + i * inner;
                    dx[j] = y[j] * (gy[j] - s);
                }
            }
        }
    }
    dx
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `x` permuted so that output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
