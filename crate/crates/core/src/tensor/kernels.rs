//! Raw numeric kernels behind the tape operations. All functions work on
//! flat slices and are deterministic: every reduction runs in a fixed order.

use std::sync::Arc;

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Output columns `ox` whose tap `kx` reads inside `0..w`.
#[inline]
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must lie in [0, w)
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { (g.w + g.pad - kx - 1) / g.stride + 1 } else { 0 };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

/// Appends the `(C k k) x (OH OW)` patch matrix of one sample to `cols`.
fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let zero = T::zero();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        cols.resize(cols.len() + ow, zero);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    cols.resize(cols.len() + lo, zero);
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        cols.extend_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        cols.extend((0..hi - lo).map(|i| src[start + i * g.stride]));
                    }
                    cols.resize(cols.len() + ow - hi, zero);
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grad_in: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    for c in 0..g.c {
        let plane = &mut grad_in[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            dst[start + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let kk = g.patch_len();
    let mut out = vec![T::zero(); g.n * g.o * hw];
    out.par_chunks_mut(g.o * hw)
        .enumerate()
        .for_each(|(n, out_n)| {
            let x = &input[n * in_len..(n + 1) * in_len];
            let owned;
            let cols: &[T] = if g.is_pointwise() {
                x
            } else {
                let mut buf = Vec::with_capacity(kk * hw);
                im2col(g, x, &mut buf);
                owned = buf;
                &owned
            };
            if let Some(b) = bias {
                for (o, row) in out_n.chunks_mut(hw).enumerate() {
                    row.fill(b[o]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                g.o, kk, hw, T::one(), weight, kk as isize, 1, cols, hw as isize, 1, beta, out_n,
                hw as isize, 1,
            );
        });
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let hw = g.out_h() * g.out_w();
    let in_len = g.c * g.h * g.w;
    let kk = g.patch_len();

    type SampleGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);
    let per_sample: Vec<SampleGrads<T>> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x = &input[n * in_len..(n + 1) * in_len];
            let go = &grad_out[n * g.o * hw..(n + 1) * g.o * hw];
            let gw = need_weight.then(|| {
                let owned;
                let cols: &[T] = if g.is_pointwise() {
                    x
                } else {
                    let mut buf = Vec::with_capacity(kk * hw);
                    im2col(g, x, &mut buf);
                    owned = buf;
                    &owned
                };
                let mut gw = vec![T::zero(); g.o * kk];
                // grad_w[o, j] = sum_p grad_out[o, p] * cols[j, p]
                T::gemm(
                    g.o, hw, kk, T::one(), go, hw as isize, 1, cols, 1, hw as isize, T::zero(),
                    &mut gw, kk as isize, 1,
                );
                gw
            });
            let gi = need_input.then(|| {
                let mut gi = vec![T::zero(); in_len];
                if g.is_pointwise() {
                    T::gemm(
                        kk, g.o, hw, T::one(), weight, 1, kk as isize, go, hw as isize, 1,
                        T::zero(), &mut gi, hw as isize, 1,
                    );
                } else {
                    T::with_scratch(kk * hw, |dcols| {
                        T::gemm(
                            kk, g.o, hw, T::one(), weight, 1, kk as isize, go, hw as isize, 1,
                            T::zero(), dcols, hw as isize, 1,
                        );
                        col2im(g, dcols, &mut gi);
                    });
                }
                gi
            });
            (gi, gw)
        })
        .collect();

    let mut grad_bias = vec![T::zero(); g.o];
    for n in 0..g.n {
        let go = &grad_out[n * g.o * hw..(n + 1) * g.o * hw];
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += go[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }

    let mut grad_in = need_input.then(|| Vec::with_capacity(g.n * in_len));
    let mut grad_w = need_weight.then(|| vec![T::zero(); g.o * kk]);
    for (gi, gw) in per_sample {
        if let (Some(acc), Some(gi)) = (grad_in.as_mut(), gi) {
            acc.extend_from_slice(&gi);
        }
        if let (Some(acc), Some(gw)) = (grad_w.as_mut(), gw) {
            for (a, b) in acc.iter_mut().zip(gw) {
                *a += b;
            }
        }
    }
    (grad_in, grad_w, grad_bias)
}

/// Source taps of output index `o` for midpoint-insertion upsampling along an
/// axis of length `n`: even outputs copy, odd outputs average two neighbours.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    if o.is_multiple_of(2) {
        (i, i)
    } else {
        (i, (i + 1).min(n - 1))
    }
}

pub(crate) fn upsample2x_forward<T: Real>(planes: usize, h: usize, w: usize, x: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = up_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1) = up_taps(ox, w);
                dst[oy * ow + ox] = quarter
                    * (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0] + src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(planes: usize, h: usize, w: usize, g: &[T]) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = up_taps(oy, h);
            for ox in 0..ow {
                let (x0, x1) = up_taps(ox, w);
                let v = quarter * src[oy * ow + ox];
                dst[y0 * w + x0] += v;
                dst[y0 * w + x1] += v;
                dst[y1 * w + x0] += v;
                dst[y1 * w + x1] += v;
            }
        }
    }
    out
}

/// Bilinear sampling plan for one homography: each output pixel reads four
/// source taps. Taps outside the source carry zero weight.
#[derive(Debug, Clone)]
pub(crate) struct WarpPlan<T> {
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<[u32; 4]>,
    pub weights: Vec<[T; 4]>,
    /// Output pixels whose sample location lies inside the source footprint.
    pub inside: Vec<bool>,
}

impl<T: Real> WarpPlan<T> {
    /// Builds the plan from a map `output pixel -> source location`; `None`
    /// means the location is undefined (behind the camera).
    pub fn from_fn(
        src_h: usize,
        src_w: usize,
        out_h: usize,
        out_w: usize,
        locate: impl Fn(f64, f64) -> Option<(f64, f64)>,
    ) -> Self {
        let n = out_h * out_w;
        let mut taps = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut inside = Vec::with_capacity(n);
        for y in 0..out_h {
            for x in 0..out_w {
                let Some((sx, sy)) = locate(x as f64, y as f64).filter(|(a, b)| a.is_finite() && b.is_finite()) else {
                    taps.push([0; 4]);
                    weights.push([T::zero(); 4]);
                    inside.push(false);
                    continue;
                };
                inside.push(
                    sx >= -0.5 && sx <= src_w as f64 - 0.5 && sy >= -0.5 && sy <= src_h as f64 - 0.5,
                );
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let corners = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1.0, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1.0, (1.0 - fx) * fy),
                    (x0 + 1.0, y0 + 1.0, fx * fy),
                ];
                let mut t = [0u32; 4];
                let mut wts = [T::zero(); 4];
                for (k, &(cx, cy, wt)) in corners.iter().enumerate() {
                    if cx >= 0.0 && cy >= 0.0 && cx < src_w as f64 && cy < src_h as f64 {
                        t[k] = (cy as usize * src_w + cx as usize) as u32;
                        wts[k] = T::from_f64(wt);
                    }
                }
                taps.push(t);
                weights.push(wts);
            }
        }
        WarpPlan {
            src_h,
            src_w,
            out_h,
            out_w,
            taps,
            weights,
            inside,
        }
    }

    pub fn apply_plane(&self, src: &[T], dst: &mut [T]) {
        for ((d, t), w) in dst.iter_mut().zip(&self.taps).zip(&self.weights) {
            *d = w[0] * src[t[0] as usize]
                + w[1] * src[t[1] as usize]
                + w[2] * src[t[2] as usize]
                + w[3] * src[t[3] as usize];
        }
    }

    pub fn adjoint_plane(&self, grad: &[T], acc: &mut [T]) {
        for ((g, t), w) in grad.iter().zip(&self.taps).zip(&self.weights) {
            for k in 0..4 {
                acc[t[k] as usize] += w[k] * *g;
            }
        }
    }
}

/// Copies `warp(input[src_n])` into `output[dst_n, dst_c..dst_c + C]`.
#[derive(Debug, Clone)]
pub(crate) struct WarpJob<T> {
    pub src_n: usize,
    pub dst_n: usize,
    pub dst_c: usize,
    pub plan: Arc<WarpPlan<T>>,
}

pub(crate) fn overcomposite_forward<T: Real>(r: usize, d: usize, hw: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * 3 * hw];
    for ri in 0..r {
        let base = ri * d * 4 * hw;
        for p in 0..hw {
            // Closed form: sum_d C_d A_d prod_{k>d} (1 - A_k), nearest plane last.
            let mut trans = T::one();
            let mut acc = [T::zero(); 3];
            for di in (0..d).rev() {
                let a = x[base + (di * 4 + 3) * hw + p];
                for (c, v) in acc.iter_mut().enumerate() {
                    *v += x[base + (di * 4 + c) * hw + p] * a * trans;
                }
                trans *= T::one() - a;
            }
            for (c, v) in acc.iter().enumerate() {
                out[(ri * 3 + c) * hw + p] = *v;
            }
        }
    }
    out
}

pub(crate) fn overcomposite_backward<T: Real>(
    r: usize,
    d: usize,
    hw: usize,
    x: &[T],
    g: &[T],
) -> Vec<T> {
    let mut grad = vec![T::zero(); x.len()];
    let mut partial = vec![[T::zero(); 3]; d];
    let mut trans = vec![T::zero(); d];
    for ri in 0..r {
        let base = ri * d * 4 * hw;
        for p in 0..hw {
            let alpha = |di: usize| x[base + (di * 4 + 3) * hw + p];
            let color = |di: usize, c: usize| x[base + (di * 4 + c) * hw + p];
            // partial[d] = back-to-front composite of planes 0..d (exclusive)
            let mut acc = [T::zero(); 3];
            for (di, slot) in partial.iter_mut().enumerate() {
                *slot = acc;
                let a = alpha(di);
                for (c, v) in acc.iter_mut().enumerate() {
                    *v = color(di, c) * a + (T::one() - a) * *v;
                }
            }
            let mut t = T::one();
            for di in (0..d).rev() {
                trans[di] = t;
                t *= T::one() - alpha(di);
            }
            for di in 0..d {
                let a = alpha(di);
                let mut ga = T::zero();
                for c in 0..3 {
                    let go = g[(ri * 3 + c) * hw + p];
                    grad[base + (di * 4 + c) * hw + p] = go * a * trans[di];
                    ga += go * trans[di] * (color(di, c) - partial[di][c]);
                }
                grad[base + (di * 4 + 3) * hw + p] = ga;
            }
        }
    }
    grad
}
