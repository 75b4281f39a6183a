//! Slice-level forward and backward kernels used by the tape.

use super::{Scalar, Shape};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dxc[base + ix as usize] = dxc[base + ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], n: usize, k: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let ck = g.col_rows();
    let mut out = vec![T::zero(); n * g.cout * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * plane] };
    for i in 0..n {
        let xi = &x[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut col);
            &col
        };
        let oi = &mut out[i * g.cout * plane..(i + 1) * g.cout * plane];
        T::gemm(g.cout, ck, plane, k, (ck as isize, 1), cols, (plane as isize, 1), oi, false);
    }
    out
}

/// Returns (dx, dk); either may be skipped.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    k: &[T],
    g: &ConvGeom,
    dout: &[T],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let ck = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dk = need_dk.then(|| vec![T::zero(); g.cout * ck]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * plane] };
    let mut dcol = if need_dx && !g.is_pointwise() { vec![T::zero(); ck * plane] } else { Vec::new() };
    for i in 0..n {
        let xi = &x[i * in_len..(i + 1) * in_len];
        let gi = &dout[i * g.cout * plane..(i + 1) * g.cout * plane];
        if let Some(dk) = dk.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            // dK[cout, ck] += dOut[cout, plane] · colᵀ[plane, ck]
            T::gemm(g.cout, plane, ck, gi, (plane as isize, 1), cols, (1, plane as isize), dk, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_len..(i + 1) * in_len];
            // dcol[ck, plane] = Kᵀ[ck, cout] · dOut[cout, plane]
            if g.is_pointwise() {
                T::gemm(ck, g.cout, plane, k, (1, ck as isize), gi, (plane as isize, 1), dxi, false);
            } else {
                T::gemm(ck, g.cout, plane, k, (1, ck as isize), gi, (plane as isize, 1), &mut dcol, false);
                col2im_add(&dcol, g, dxi);
            }
        }
    }
    (dx, dk)
}

/// Output extent of a floor-mode pooling window.
pub(crate) fn pool_extent(input: usize, window: usize, stride: usize) -> Option<usize> {
    (window <= input && window >= 1 && stride >= 1).then(|| (input - window) / stride + 1)
}

/// Max pooling; also returns, for every output, the flat input index of the
/// first maximum found in row-major scan order.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    shape: Shape,
    (kh, kw): (usize, usize),
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = shape.0;
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool<T: Scalar>(x: &[T], shape: Shape, (kh, kw): (usize, usize), stride: usize) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let inv = T::one() / T::from_usize(kh * kw).unwrap();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..kh {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kw {
                        acc = acc + x[row + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    dout: &[T],
    shape: Shape,
    (kh, kw): (usize, usize),
    stride: usize,
) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ho = (h - kh) / stride + 1;
    let wo = (w - kw) / stride + 1;
    let inv = T::one() / T::from_usize(kh * kw).unwrap();
    let mut dx = vec![T::zero(); shape.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dout[(plane * ho + oy) * wo + ox] * inv;
                for ky in 0..kh {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..kw {
                        dx[row + kx] = dx[row + kx] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-output-coordinate source taps along one axis: (lo, hi, weight_lo, weight_hi).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub(crate) fn nearest_taps(input: usize, output: usize) -> Vec<usize> {
    let scale = input as f64 / output as f64;
    (0..output).map(|o| ((o as f64 * scale).floor() as usize).min(input - 1)).collect()
}

pub(crate) fn bilinear<T: Scalar>(x: &[T], shape: Shape, (oh, ow): (usize, usize)) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for &(x0, x1, wx0, wx1) in &tx {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bottom = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                out.push(top * wy0 + bottom * wy1);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(dout: &[T], shape: Shape, (oh, ow): (usize, usize)) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); shape.numel()];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let g = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let v = g[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + v * wy0 * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + v * wy0 * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + v * wy1 * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + v * wy1 * wx1;
            }
        }
    }
    dx
}

pub(crate) fn nearest<T: Scalar>(x: &[T], shape: Shape, (oh, ow): (usize, usize)) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ty = nearest_taps(h, oh);
    let tx = nearest_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for &sy in &ty {
            for &sx in &tx {
                out.push(src[sy * w + sx]);
            }
        }
    }
    out
}

pub(crate) fn nearest_backward<T: Scalar>(dout: &[T], shape: Shape, (oh, ow): (usize, usize)) -> Vec<T> {
    let [n, c, h, w] = shape.0;
    let ty = nearest_taps(h, oh);
    let tx = nearest_taps(w, ow);
    let mut dx = vec![T::zero(); shape.numel()];
    for plane in 0..n * c {
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        let g = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &sy) in ty.iter().enumerate() {
            for (ox, &sx) in tx.iter().enumerate() {
                dst[sy * w + sx] = dst[sy * w + sx] + g[oy * ow + ox];
            }
        }
    }
    dx
}

/// Strides for reading `src` as if broadcast to `out` (0 along broadcast axes).
pub(crate) fn broadcast_strides(src: Shape, out: Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if src.0[d] == out.0[d] { s[d] } else { 0 };
    }
    r
}

/// Shape both operands broadcast to, if compatible.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a.0[d], b.0[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(Shape(out))
}

pub(crate) fn zip_broadcast<T: Scalar>(
    a: &[T],
    sa: Shape,
    b: &[T],
    sb: Shape,
    out: Shape,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if sa == out && sb == out {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let ta = broadcast_strides(sa, out);
    let tb = broadcast_strides(sb, out);
    let [n, c, h, w] = out.0;
    let mut res = Vec::with_capacity(out.numel());
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let oa = i * ta[0] + j * ta[1] + y * ta[2];
                let ob = i * tb[0] + j * tb[1] + y * tb[2];
                for x in 0..w {
                    res.push(f(a[oa + x * ta[3]], b[ob + x * tb[3]]));
                }
            }
        }
    }
    res
}

/// Sums `src` (shaped `from`) down to `to`, where every axis of `to` either
/// matches or is 1.
pub(crate) fn sum_to<T: Scalar>(src: &[T], from: Shape, to: Shape) -> Vec<T> {
    if from == to {
        return src.to_vec();
    }
    let st = broadcast_strides(to, from);
    let [n, c, h, w] = from.0;
    let mut out = vec![T::zero(); to.numel()];
    let mut k = 0;
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let base = i * st[0] + j * st[1] + y * st[2];
                for x in 0..w {
                    let o = base + x * st[3];
                    out[o] = out[o] + src[k];
                    k += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: Shape, perm: [usize; 4]) -> (Vec<T>, Shape) {
    let s = shape.strides();
    let out_shape = Shape([shape.0[perm[0]], shape.0[perm[1]], shape.0[perm[2]], shape.0[perm[3]]]);
    let ps = [s[perm[0]], s[perm[1]], s[perm[2]], s[perm[3]]];
    let [n, c, h, w] = out_shape.0;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..n {
        for j in 0..c {
            for y in 0..h {
                let base = i * ps[0] + j * ps[1] + y * ps[2];
                for xx in 0..w {
                    out.push(x[base + xx * ps[3]]);
                }
            }
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: [usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Iterates the (offset, stride) pairs of every 1-d lane along `axis`.
pub(crate) fn lanes(shape: Shape, axis: usize) -> impl Iterator<Item = (usize, usize)> {
    let strides = shape.strides();
    let stride = strides[axis];
    let dims = shape.0;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let span = dims[axis] * inner;
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * span + i, stride)))
}
