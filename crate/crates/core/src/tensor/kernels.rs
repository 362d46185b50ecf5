//! Slice-level kernels shared by the autodiff tape and the no-grad inference
//! paths. All spatial tensors are planar `[C, H, W]`, row-major.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the unfolded input matrix.
    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfolds `input` into a `[C_in*k*k, H*W]` patch matrix with zero padding.
pub fn im2col<T: Real>(g: &ConvGeometry, input: &[T], col: &mut [T]) {
    im2col_rows(g, input, 0, g.height, col);
}

/// [`im2col`] restricted to output rows `y0..y1`; `col` is
/// `[C_in*k*k, (y1-y0)*W]`.
pub fn im2col_rows<T: Real>(g: &ConvGeometry, input: &[T], y0: usize, y1: usize, col: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let plane = g.plane();
    let band = (y1 - y0) * g.width;
    debug_assert_eq!(col.len(), g.patch() * band);
    for ci in 0..g.c_in {
        let src = &input[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * band..(row + 1) * band];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in y0 as isize..y1 as isize {
                    let sy = y + dy;
                    let r = (y - y0 as isize) * w;
                    let out_row = &mut dst[r as usize..(r + w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    let x_lo = (-dx).max(0);
                    let x_hi = (w - dx).min(w);
                    out_row[..x_lo.min(w) as usize].fill(T::zero());
                    if x_hi > x_lo {
                        out_row[x_lo as usize..x_hi as usize]
                            .copy_from_slice(&src_row[(x_lo + dx) as usize..(x_hi + dx) as usize]);
                    }
                    out_row[x_hi.max(0) as usize..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input plane.
pub fn col2im_add<T: Real>(g: &ConvGeometry, col: &[T], input_grad: &mut [T]) {
    col2im_rows_add(g, col, 0, g.height, input_grad);
}

/// Adjoint of [`im2col_rows`].
pub fn col2im_rows_add<T: Real>(g: &ConvGeometry, col: &[T], y0: usize, y1: usize, input_grad: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad() as isize);
    let plane = g.plane();
    let band = (y1 - y0) * g.width;
    debug_assert_eq!(col.len(), g.patch() * band);
    for ci in 0..g.c_in {
        let dst = &mut input_grad[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * band..(row + 1) * band];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0);
                let x_hi = (w - dx).min(w);
                if x_hi <= x_lo {
                    continue;
                }
                for y in y0 as isize..y1 as isize {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let r = (y - y0 as isize) * w;
                    let from = &src[(r + x_lo) as usize..(r + x_hi) as usize];
                    let to = &mut dst[(sy * w + x_lo + dx) as usize..(sy * w + x_hi + dx) as usize];
                    for (t, &f) in to.iter_mut().zip(from) {
                        *t = *t + f;
                    }
                }
            }
        }
    }
}

/// Upper bound on the unfolded patch buffer, in elements. Small enough
/// that a band stays in cache between unfolding and the product.
const MAX_COL_ELEMS: usize = 1 << 18;

/// Output row ranges whose patch matrix fits in [`MAX_COL_ELEMS`].
fn col_bands(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = (MAX_COL_ELEMS / (g.patch() * g.width).max(1)).max(1);
    let h = g.height;
    (0..h).step_by(step).map(move |y0| (y0, (y0 + step).min(h)))
}

/// Layers with at most this many output channels skip the patch matrix:
/// packing it costs more than the product itself.
const DIRECT_MAX_OUT: usize = 8;

/// Output elements per row band of the direct path, sized to stay in L1.
const DIRECT_BAND: usize = 1024;

fn use_direct(g: &ConvGeometry) -> bool {
    g.c_out <= DIRECT_MAX_OUT
}

/// Output row ranges visited together by the direct path.
#[inline(always)]
fn row_bands(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let step = (DIRECT_BAND / g.width.max(1)).max(1);
    let h = g.height;
    (0..h).step_by(step).map(move |y0| (y0, (y0 + step).min(h)))
}

/// Calls `f(out_start, in_start, len)` for every segment of output rows
/// `rows` that overlaps the input plane shifted by `(dy, dx)`.
#[inline(always)]
fn shifted_rows(g: &ConvGeometry, rows: (usize, usize), dy: isize, dx: isize, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w) = (g.height as isize, g.width as isize);
    let x_lo = (-dx).max(0);
    let x_hi = (w - dx).min(w);
    if x_hi <= x_lo {
        return;
    }
    let len = (x_hi - x_lo) as usize;
    for y in (-dy).max(rows.0 as isize)..(h - dy).min(rows.1 as isize) {
        f((y * w + x_lo) as usize, ((y + dy) * w + x_lo + dx) as usize, len);
    }
}

/// Offset of kernel tap `t` relative to the output pixel.
fn tap_offset(g: &ConvGeometry, t: usize) -> (isize, isize) {
    let pad = g.pad() as isize;
    ((t / g.kernel) as isize - pad, (t % g.kernel) as isize - pad)
}

#[inline(always)]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

#[inline(always)]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for i in 0..8 {
            lanes[i] = lanes[i] + a[i] * b[i];
        }
    }
    lanes.iter().copied().sum::<T>() + tail
}

/// Same-padded cross-correlation plus per-channel bias.
///
/// Large planes are processed in row bands so the patch buffer stays bounded.
pub fn conv2d_forward<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    if use_direct(g) {
        forward_direct(g, input, weight, bias)
    } else {
        forward_gemm(g, input, weight, bias)
    }
}

fn forward_direct<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { forward_direct_avx2(g, input, weight, bias) };
    }
    forward_direct_body(g, input, weight, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_direct_avx2<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    forward_direct_body(g, input, weight, bias)
}

#[inline(always)]
fn forward_direct_body<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let taps = g.kernel * g.kernel;
    let mut out = Vec::with_capacity(g.c_out * plane);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, plane));
    }
    for rows in row_bands(g) {
        for (co, o) in out.chunks_exact_mut(plane).enumerate() {
            for ci in 0..g.c_in {
                let src = &input[ci * plane..(ci + 1) * plane];
                for t in 0..taps {
                    let wv = weight[(co * g.c_in + ci) * taps + t];
                    let (dy, dx) = tap_offset(g, t);
                    shifted_rows(g, rows, dy, dx, |oi, si, len| axpy(wv, &src[si..si + len], &mut o[oi..oi + len]));
                }
            }
        }
    }
    out
}

fn forward_gemm<T: Real>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let patch = g.patch();
    let mut out = Vec::with_capacity(g.c_out * plane);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, plane));
    }
    let mut col = Vec::new();
    for (y0, y1) in col_bands(g) {
        let band = (y1 - y0) * g.width;
        col.resize(patch * band, T::zero());
        let col = &mut col[..patch * band];
        im2col_rows(g, input, y0, y1, col);
        T::gemm(
            g.c_out,
            patch,
            band,
            T::one(),
            weight,
            (patch as isize, 1),
            col,
            (band as isize, 1),
            T::one(),
            &mut out[y0 * g.width..],
            plane as isize,
        );
    }
    out
}

/// Accumulates gradients of a same-padded convolution.
///
/// `input_grad` is skipped when `None` (e.g. the network input).
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
    bias_grad: Option<&mut [T]>,
) {
    let plane = g.plane();
    if let Some(bg) = bias_grad {
        for (co, b) in bg.iter_mut().enumerate() {
            let s: T = out_grad[co * plane..(co + 1) * plane].iter().copied().sum();
            *b = *b + s;
        }
    }
    if use_direct(g) {
        backward_direct(g, input, weight, out_grad, input_grad, weight_grad);
    } else {
        backward_gemm(g, input, weight, out_grad, input_grad, weight_grad);
    }
}

fn backward_direct<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { backward_direct_avx2(g, input, weight, out_grad, input_grad, weight_grad) };
    }
    backward_direct_body(g, input, weight, out_grad, input_grad, weight_grad)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn backward_direct_avx2<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
) {
    backward_direct_body(g, input, weight, out_grad, input_grad, weight_grad)
}

#[inline(always)]
fn backward_direct_body<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
) {
    let plane = g.plane();
    let taps = g.kernel * g.kernel;
    if let Some(wg) = weight_grad {
        let mut acc = vec![T::zero(); wg.len()];
        for rows in row_bands(g) {
            for co in 0..g.c_out {
                let og = &out_grad[co * plane..(co + 1) * plane];
                for ci in 0..g.c_in {
                    let src = &input[ci * plane..(ci + 1) * plane];
                    for t in 0..taps {
                        let (dy, dx) = tap_offset(g, t);
                        let slot = &mut acc[(co * g.c_in + ci) * taps + t];
                        shifted_rows(g, rows, dy, dx, |oi, si, len| {
                            *slot = *slot + dot(&og[oi..oi + len], &src[si..si + len])
                        });
                    }
                }
            }
        }
        for (w, a) in wg.iter_mut().zip(acc) {
            *w = *w + a;
        }
    }
    if let Some(ig) = input_grad {
        for rows in row_bands(g) {
            for (ci, dst) in ig.chunks_exact_mut(plane).enumerate() {
                for co in 0..g.c_out {
                    let og = &out_grad[co * plane..(co + 1) * plane];
                    for t in 0..taps {
                        let wv = weight[(co * g.c_in + ci) * taps + t];
                        let (dy, dx) = tap_offset(g, t);
                        shifted_rows(g, rows, dy, dx, |oi, si, len| axpy(wv, &og[oi..oi + len], &mut dst[si..si + len]));
                    }
                }
            }
        }
    }
}

fn backward_gemm<T: Real>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    input_grad: Option<&mut [T]>,
    weight_grad: Option<&mut [T]>,
) {
    let plane = g.plane();
    let patch = g.patch();
    let (mut input_grad, mut weight_grad) = (input_grad, weight_grad);
    let mut col = Vec::new();
    for (y0, y1) in col_bands(g) {
        let band = (y1 - y0) * g.width;
        col.resize(patch * band, T::zero());
        let dout = &out_grad[y0 * g.width..];
        if let Some(wg) = weight_grad.as_deref_mut() {
            im2col_rows(g, input, y0, y1, &mut col);
            // dW += dOut * col^T
            T::gemm(
                g.c_out,
                band,
                patch,
                T::one(),
                dout,
                (plane as isize, 1),
                &col,
                (1, band as isize),
                T::one(),
                wg,
                patch as isize,
            );
        }
        if let Some(ig) = input_grad.as_deref_mut() {
            // dCol = W^T * dOut
            T::gemm(
                patch,
                g.c_out,
                band,
                T::one(),
                weight,
                (1, patch as isize),
                dout,
                (plane as isize, 1),
                T::zero(),
                &mut col,
                band as isize,
            );
            col2im_rows_add(g, &col, y0, y1, ig);
        }
    }
}

/// Separable Gaussian filter whose taps are renormalized over the in-bounds
/// part of the window, so constant planes stay constant up to the border.
#[derive(Clone, Debug)]
pub struct GaussianWindow {
    pub taps: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1, "window size must be odd");
        let r = (size / 2) as f64;
        let mut taps: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        GaussianWindow { taps }
    }

    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// Per-position normalizers along an axis of length `len`.
    fn norms(&self, len: usize) -> Vec<f64> {
        let r = self.radius() as isize;
        (0..len as isize)
            .map(|x| {
                self.taps
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| {
                        let q = x + *i as isize - r;
                        q >= 0 && q < len as isize
                    })
                    .map(|(_, t)| t)
                    .sum()
            })
            .collect()
    }

    /// Filters `[C, H, W]` data along both spatial axes.
    pub fn apply<T: Real>(&self, data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let tmp = self.pass(data, channels, h, w, Axis::X, false);
        self.pass(&tmp, channels, h, w, Axis::Y, false)
    }

    /// Adjoint of [`apply`](Self::apply).
    pub fn apply_adjoint<T: Real>(&self, data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
        let tmp = self.pass(data, channels, h, w, Axis::Y, true);
        self.pass(&tmp, channels, h, w, Axis::X, true)
    }

    fn pass<T: Real>(&self, data: &[T], channels: usize, h: usize, w: usize, axis: Axis, adjoint: bool) -> Vec<T> {
        let (len, stride, lines, line_step): (usize, usize, usize, Box<dyn Fn(usize) -> usize>) = match axis {
            Axis::X => (w, 1, h, Box::new(move |l| l * w)),
            Axis::Y => (h, w, w, Box::new(|l| l)),
        };
        let norms = self.norms(len);
        let taps: Vec<T> = self.taps.iter().map(|&t| T::of(t)).collect();
        let inv: Vec<T> = norms.iter().map(|&n| T::of(1.0 / n)).collect();
        let r = self.radius() as isize;
        let plane = h * w;
        let mut out = vec![T::zero(); data.len()];
        for c in 0..channels {
            for l in 0..lines {
                let base = c * plane + line_step(l);
                for x in 0..len as isize {
                    for (i, &t) in taps.iter().enumerate() {
                        let q = x + i as isize - r;
                        if q < 0 || q >= len as isize {
                            continue;
                        }
                        let xi = base + x as usize * stride;
                        let qi = base + q as usize * stride;
                        let coef = t * inv[x as usize];
                        if adjoint {
                            out[qi] = out[qi] + coef * data[xi];
                        } else {
                            out[xi] = out[xi] + coef * data[qi];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

/// Forward difference along x, zero in the last column.
pub fn diff_x<T: Real>(data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels * h * w];
    for row in 0..channels * h {
        let s = &data[row * w..(row + 1) * w];
        let o = &mut out[row * w..(row + 1) * w];
        for x in 0..w.saturating_sub(1) {
            o[x] = s[x + 1] - s[x];
        }
    }
    out
}

pub fn diff_x_adjoint_add<T: Real>(grad: &[T], channels: usize, h: usize, w: usize, into: &mut [T]) {
    for row in 0..channels * h {
        let g = &grad[row * w..(row + 1) * w];
        let d = &mut into[row * w..(row + 1) * w];
        for x in 0..w.saturating_sub(1) {
            d[x + 1] = d[x + 1] + g[x];
            d[x] = d[x] - g[x];
        }
    }
}

/// Forward difference along y, zero in the last row.
pub fn diff_y<T: Real>(data: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels * h * w];
    let plane = h * w;
    for c in 0..channels {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let i = c * plane + y * w + x;
                out[i] = data[i + w] - data[i];
            }
        }
    }
    out
}

pub fn diff_y_adjoint_add<T: Real>(grad: &[T], channels: usize, h: usize, w: usize, into: &mut [T]) {
    let plane = h * w;
    for c in 0..channels {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let i = c * plane + y * w + x;
                into[i + w] = into[i + w] + grad[i];
                into[i] = into[i] - grad[i];
            }
        }
    }
}
