//! Raw forward/backward kernels on NHWC buffers.
//!
//! These operate on slices and geometry records; shape validation and
//! gradient bookkeeping live in [`crate::graph`].

use crate::tensor::{gemm, Float, Mat};

/// Geometry of a 2D convolution with square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout
    }

    pub fn weight_len(&self) -> usize {
        self.k * self.k * self.cin_per_group() * self.cout
    }

    /// Multiply-accumulate count of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.ho * self.wo) as u64
            * (self.k * self.k * self.cin_per_group()) as u64
            * self.cout as u64
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * stride + t) as isize - pad as isize;
        if p < 0 || p as usize >= limit {
            None
        } else {
            Some(p as usize)
        }
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let kk = g.k * g.k * g.cin;
    let mut col = vec![T::zero(); g.n * g.ho * g.wo * kk];
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let s = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let d = row + (ky * g.k + kx) * g.cin;
                        col[d..d + g.cin].copy_from_slice(&x[s..s + g.cin]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Float>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let kk = g.k * g.k * g.cin;
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((n * g.ho + oy) * g.wo + ox) * kk;
                for ky in 0..g.k {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let s = ((n * g.h + iy) * g.w + ix) * g.cin;
                        let d = row + (ky * g.k + kx) * g.cin;
                        for (a, &b) in dx[s..s + g.cin].iter_mut().zip(&col[d..d + g.cin]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Float>(dy: &[T], c: usize, db: &mut [T]) {
    for row in dy.chunks_exact(c) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

pub fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let rows = g.n * g.ho * g.wo;
    let mut out = vec![T::zero(); rows * g.cout];
    if g.groups == 1 {
        let kk = g.k * g.k * g.cin;
        if g.is_pointwise() {
            gemm(
                Mat::new(x, rows, kk),
                Mat::new(w, kk, g.cout),
                &mut out,
                false,
            );
        } else {
            let col = im2col(g, x);
            gemm(
                Mat::new(&col, rows, kk),
                Mat::new(w, kk, g.cout),
                &mut out,
                false,
            );
        }
    } else if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        grouped_forward(g, x, w, &mut out);
    }
    if let Some(b) = b {
        add_bias(&mut out, b);
    }
    out
}

/// Gradients of a convolution; each output slice is accumulated into.
pub fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(db) = db {
        bias_grad(dy, g.cout, db);
    }
    let rows = g.n * g.ho * g.wo;
    if g.groups == 1 {
        let kk = g.k * g.k * g.cin;
        if g.is_pointwise() {
            if let Some(dw) = dw {
                gemm(
                    Mat::new(x, rows, kk).t(),
                    Mat::new(dy, rows, g.cout),
                    dw,
                    true,
                );
            }
            if let Some(dx) = dx {
                gemm(
                    Mat::new(dy, rows, g.cout),
                    Mat::new(w, kk, g.cout).t(),
                    dx,
                    true,
                );
            }
        } else {
            if let Some(dw) = dw {
                let col = im2col(g, x);
                gemm(
                    Mat::new(&col, rows, kk).t(),
                    Mat::new(dy, rows, g.cout),
                    dw,
                    true,
                );
            }
            if let Some(dx) = dx {
                let mut dcol = vec![T::zero(); rows * kk];
                gemm(
                    Mat::new(dy, rows, g.cout),
                    Mat::new(w, kk, g.cout).t(),
                    &mut dcol,
                    false,
                );
                col2im(g, &dcol, dx);
            }
        }
    } else if g.is_depthwise() {
        depthwise_backward(g, x, w, dy, dx, dw);
    } else {
        grouped_backward(g, x, w, dy, dx, dw);
    }
}

/// Weights of every tap repeated across a full output row, so a tap becomes
/// one contiguous multiply-add over `wo * c` values.
fn tiled_taps<T: Float>(g: &ConvGeom, w: &[T]) -> Vec<T> {
    let c = g.cin;
    let span = g.wo * c;
    let mut rep = vec![T::zero(); g.k * g.k * span];
    for t in 0..g.k * g.k {
        for ox in 0..g.wo {
            rep[t * span + ox * c..t * span + (ox + 1) * c].copy_from_slice(&w[t * c..(t + 1) * c]);
        }
    }
    rep
}

/// Output columns `[lo, hi)` whose input column for tap `kx` is in range
/// (stride 1).
#[inline]
fn tap_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo);
    (lo, hi.max(lo))
}

fn depthwise_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    if g.stride != 1 {
        return grouped_forward(g, x, w, out);
    }
    let c = g.cin;
    let span = g.wo * c;
    let rep = tiled_taps(g, w);
    for n in 0..g.n {
        for oy in 0..g.ho {
            let o = (n * g.ho + oy) * span;
            let orow = &mut out[o..o + span];
            for ky in 0..g.k {
                let Some(iy) = ConvGeom::src(oy, ky, 1, g.pad, g.h) else {
                    continue;
                };
                let xrow = &x[(n * g.h + iy) * g.w * c..(n * g.h + iy + 1) * g.w * c];
                for kx in 0..g.k {
                    let (lo, hi) = tap_span(g, kx);
                    if lo >= hi {
                        continue;
                    }
                    let t = (ky * g.k + kx) * span;
                    let xs = (lo + kx - g.pad) * c;
                    let len = (hi - lo) * c;
                    let dst = &mut orow[lo * c..lo * c + len];
                    let src = &xrow[xs..xs + len];
                    let wt = &rep[t + lo * c..t + lo * c + len];
                    for ((d, &a), &b) in dst.iter_mut().zip(src).zip(wt) {
                        *d += a * b;
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    if g.stride != 1 {
        return grouped_backward(g, x, w, dy, dx, dw);
    }
    let c = g.cin;
    let span = g.wo * c;
    let rep = tiled_taps(g, w);
    let mut acc = dw.as_ref().map(|_| vec![T::zero(); g.k * g.k * span]);
    for n in 0..g.n {
        for oy in 0..g.ho {
            let o = (n * g.ho + oy) * span;
            let grow = &dy[o..o + span];
            for ky in 0..g.k {
                let Some(iy) = ConvGeom::src(oy, ky, 1, g.pad, g.h) else {
                    continue;
                };
                let xo = (n * g.h + iy) * g.w * c;
                for kx in 0..g.k {
                    let (lo, hi) = tap_span(g, kx);
                    if lo >= hi {
                        continue;
                    }
                    let t = (ky * g.k + kx) * span;
                    let xs = xo + (lo + kx - g.pad) * c;
                    let len = (hi - lo) * c;
                    let gs = &grow[lo * c..lo * c + len];
                    if let Some(dx) = dx.as_deref_mut() {
                        let wt = &rep[t + lo * c..t + lo * c + len];
                        for ((d, &a), &b) in dx[xs..xs + len].iter_mut().zip(gs).zip(wt) {
                            *d += a * b;
                        }
                    }
                    if let Some(acc) = acc.as_mut() {
                        let at = &mut acc[t + lo * c..t + lo * c + len];
                        for ((d, &a), &b) in at.iter_mut().zip(gs).zip(&x[xs..xs + len]) {
                            *d += a * b;
                        }
                    }
                }
            }
        }
    }
    if let (Some(dw), Some(acc)) = (dw, acc) {
        for t in 0..g.k * g.k {
            let dwt = &mut dw[t * c..(t + 1) * c];
            for chunk in acc[t * span..(t + 1) * span].chunks_exact(c) {
                for (d, &a) in dwt.iter_mut().zip(chunk) {
                    *d += a;
                }
            }
        }
    }
}

fn grouped_forward<T: Float>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                for ky in 0..g.k {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let s = ((n * g.h + iy) * g.w + ix) * g.cin;
                        for co in 0..g.cout {
                            let grp = co / cog;
                            let mut acc = T::zero();
                            for ci in 0..cig {
                                let wi = ((ky * g.k + kx) * cig + ci) * g.cout + co;
                                acc += x[s + grp * cig + ci] * w[wi];
                            }
                            out[o + co] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn grouped_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
    for n in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let o = ((n * g.ho + oy) * g.wo + ox) * g.cout;
                for ky in 0..g.k {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kx in 0..g.k {
                        let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let s = ((n * g.h + iy) * g.w + ix) * g.cin;
                        for co in 0..g.cout {
                            let grp = co / cog;
                            let gy = dy[o + co];
                            for ci in 0..cig {
                                let wi = ((ky * g.k + kx) * cig + ci) * g.cout + co;
                                let xi = s + grp * cig + ci;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += gy * w[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += gy * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Index map for pixel unshuffle: output element `i` reads input element `map[i]`.
///
/// Output channel layout is `c * r * r + dy * r + dx`.
pub fn unshuffle_map(n: usize, h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (ho, wo, co) = (h / r, w / r, c * r * r);
    let mut map = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for oc in 0..co {
                    let ch = oc / (r * r);
                    let dy = (oc / r) % r;
                    let dx = oc % r;
                    let (iy, ix) = (oy * r + dy, ox * r + dx);
                    map.push(((b * h + iy) * w + ix) * c + ch);
                }
            }
        }
    }
    map
}

/// GELU, tanh approximation.
pub fn gelu<T: Float>(x: T) -> T {
    let k = T::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::lit(0.797_884_560_802_865_4);
    let a = T::lit(0.044_715);
    let half = T::lit(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of one contiguous row, in place.
pub fn softmax_row<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
