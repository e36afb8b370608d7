//! im2col-based convolution kernels on raw NCHW buffers.
//!
//! Samples are processed in chunks whose column matrices are concatenated,
//! so each chunk costs one GEMM per direction. Chunking depends only on the
//! shapes, which keeps every reduction order fixed.

use super::Real;
use crate::error::{Error, Result};

/// Upper bound on the elements of one chunk's column matrix.
const CHUNK_ELEMS: usize = 1 << 20;

/// Shape bookkeeping for one cross-correlation from a `cin×h×w` image to a
/// `ho×wo` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution over an `h×w` input.
    pub fn conv(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} with stride {stride} is invalid"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "kernel {kh}x{kw} does not fit a padded {h}x{w} input (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { cin, h, w, kh, kw, stride, pad, ho, wo })
    }

    /// Geometry of the convolution whose adjoint is a transposed convolution
    /// from `cin_t×h×w` to `cout_t×h'×w'`. The "image" side is the transposed
    /// convolution's output.
    pub fn transposed(cout: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if kh == 0 || kw == 0 || stride == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "transposed kernel {kh}x{kw} with stride {stride} on {h}x{w} is invalid"
            )));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::Dimension(format!(
                "transposed convolution output would be empty (pad {pad})"
            )));
        }
        Ok(Self {
            cin: cout,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: w,
        })
    }

    pub fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_pixels(&self) -> usize {
        self.h * self.w
    }

    fn chunk(&self) -> usize {
        (CHUNK_ELEMS / (self.kdim() * self.out_pixels()).max(1)).max(1)
    }
}

/// Range of output columns `ox` whose source column `ox·stride + j − pad`
/// lies inside `0..w`.
fn valid_cols(g: &ConvGeometry, j: usize) -> (usize, usize) {
    let lo = if g.pad > j { (g.pad - j).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > j { (g.w + g.pad - j).div_ceil(g.stride).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Writes the column block of one image into `col` (row stride `ld`,
/// starting at column `col0`).
fn im2col<T: Real>(x: &[T], g: &ConvGeometry, col: &mut [T], ld: usize, col0: usize) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_cols(g, j);
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ld + col0..row * ld + col0 + p];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize || lo == hi {
                        line.fill(T::zero());
                        continue;
                    }
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    let first = lo * g.stride + j - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column block back onto an image.
fn col2im<T: Real>(col: &[T], ld: usize, col0: usize, g: &ConvGeometry, x: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut x[c * g.in_pixels()..(c + 1) * g.in_pixels()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let (lo, hi) = valid_cols(g, j);
                if lo == hi {
                    continue;
                }
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ld + col0..row * ld + col0 + p];
                for oy in 0..g.ho {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    let first = lo * g.stride + j - g.pad;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[nb][rows][p]` sample-major data into a `[rows][nb·p]` matrix.
fn gather<T: Real>(src: &[T], nb: usize, rows: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * nb * p];
    for s in 0..nb {
        for r in 0..rows {
            out[r * nb * p + s * p..r * nb * p + (s + 1) * p]
                .copy_from_slice(&src[(s * rows + r) * p..(s * rows + r + 1) * p]);
        }
    }
    out
}

/// Inverse of [`gather`], adding `bias[r]` to every element of row `r`.
fn scatter<T: Real>(src: &[T], nb: usize, rows: usize, p: usize, bias: Option<&[T]>, dst: &mut [T]) {
    for s in 0..nb {
        for r in 0..rows {
            let b = bias.map_or(T::zero(), |b| b[r]);
            let from = &src[r * nb * p + s * p..r * nb * p + (s + 1) * p];
            let to = &mut dst[(s * rows + r) * p..(s * rows + r + 1) * p];
            for (d, &v) in to.iter_mut().zip(from) {
                *d = v + b;
            }
        }
    }
}

fn bias_grad<T: Real>(dy: &[T], n: usize, channels: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for s in 0..n {
        for (c, acc) in db.iter_mut().enumerate() {
            for &v in &dy[(s * channels + c) * p..(s * channels + c + 1) * p] {
                *acc += v;
            }
        }
    }
    db
}

/// Gradients produced by a convolution backward pass.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (kdim, p) = (g.kdim(), g.out_pixels());
    let mut out = vec![T::zero(); n * cout * p];
    let chunk = g.chunk();
    let mut s0 = 0;
    while s0 < n {
        let nb = chunk.min(n - s0);
        let ld = nb * p;
        let mut col = vec![T::zero(); kdim * ld];
        for s in 0..nb {
            let img = &x[(s0 + s) * g.cin * g.in_pixels()..(s0 + s + 1) * g.cin * g.in_pixels()];
            im2col(img, g, &mut col, ld, s * p);
        }
        let mut y = vec![T::zero(); cout * ld];
        T::gemm(cout, kdim, ld, weight, false, &col, false, &mut y, false);
        scatter(&y, nb, cout, p, bias, &mut out[s0 * cout * p..(s0 + nb) * cout * p]);
        s0 += nb;
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    weight: &[T],
    cout: usize,
    g: &ConvGeometry,
    dy: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (kdim, p) = (g.kdim(), g.out_pixels());
    let flipped = need_input && g.stride == 1 && g.kh == g.kw && g.pad < g.kh && 2 * cout <= g.cin;
    let mut dx = (need_input && !flipped).then(|| vec![T::zero(); n * g.cin * g.in_pixels()]);
    if flipped {
        // With unit stride the input gradient is itself a convolution of dy
        // with the spatially flipped, channel-transposed kernel; its column
        // matrix scales with cout instead of cin.
        let k = g.kh;
        let mut wf = vec![T::zero(); g.cin * cout * k * k];
        for co in 0..cout {
            for c in 0..g.cin {
                for i in 0..k {
                    for j in 0..k {
                        wf[((c * cout + co) * k + i) * k + j] = weight[((co * g.cin + c) * k + (k - 1 - i)) * k + (k - 1 - j)];
                    }
                }
            }
        }
        let gf = ConvGeometry::conv(cout, g.ho, g.wo, k, k, 1, k - 1 - g.pad).expect("adjoint geometry");
        debug_assert_eq!((gf.ho, gf.wo), (g.h, g.w));
        dx = Some(conv2d_forward(dy, n, &wf, None, g.cin, &gf));
    }
    let need_input = need_input && !flipped;
    let mut dw = need_weight.then(|| vec![T::zero(); cout * kdim]);
    let chunk = g.chunk();
    let mut s0 = 0;
    while s0 < n && (need_input || need_weight) {
        let nb = chunk.min(n - s0);
        let ld = nb * p;
        let dyc = gather(&dy[s0 * cout * p..(s0 + nb) * cout * p], nb, cout, p);
        if let Some(dw) = dw.as_mut() {
            let mut col = vec![T::zero(); kdim * ld];
            for s in 0..nb {
                let img = &x[(s0 + s) * g.cin * g.in_pixels()..(s0 + s + 1) * g.cin * g.in_pixels()];
                im2col(img, g, &mut col, ld, s * p);
            }
            T::gemm(cout, ld, kdim, &dyc, false, &col, true, dw, true);
        }
        if let (true, Some(dx)) = (need_input, dx.as_mut()) {
            let mut dcol = vec![T::zero(); kdim * ld];
            T::gemm(kdim, cout, ld, weight, true, &dyc, false, &mut dcol, false);
            for s in 0..nb {
                let img = &mut dx[(s0 + s) * g.cin * g.in_pixels()..(s0 + s + 1) * g.cin * g.in_pixels()];
                col2im(&dcol, ld, s * p, g, img);
            }
        }
        s0 += nb;
    }
    ConvGrads { input: dx, weight: dw, bias: need_bias.then(|| bias_grad(dy, n, cout, p)) }
}

/// Transposed convolution: `x` is `[n, cin, g.ho, g.wo]`, weight is
/// `[cin, g.cin, kh, kw]`, output is `[n, g.cin, g.h, g.w]`.
pub(crate) fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let (kdim, p) = (g.kdim(), g.out_pixels());
    let img = g.cin * g.in_pixels();
    let mut out = vec![T::zero(); n * img];
    let chunk = g.chunk();
    let mut s0 = 0;
    while s0 < n {
        let nb = chunk.min(n - s0);
        let ld = nb * p;
        let xc = gather(&x[s0 * cin * p..(s0 + nb) * cin * p], nb, cin, p);
        let mut col = vec![T::zero(); kdim * ld];
        T::gemm(kdim, cin, ld, weight, true, &xc, false, &mut col, false);
        for s in 0..nb {
            col2im(&col, ld, s * p, g, &mut out[(s0 + s) * img..(s0 + s + 1) * img]);
        }
        s0 += nb;
    }
    if let Some(b) = bias {
        for s in 0..n {
            for (c, &bc) in b.iter().enumerate() {
                let plane = &mut out[s * img + c * g.in_pixels()..s * img + (c + 1) * g.in_pixels()];
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    weight: &[T],
    g: &ConvGeometry,
    dy: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (kdim, p) = (g.kdim(), g.out_pixels());
    let img = g.cin * g.in_pixels();
    let mut dx = need_input.then(|| vec![T::zero(); n * cin * p]);
    let mut dw = need_weight.then(|| vec![T::zero(); cin * kdim]);
    let chunk = g.chunk();
    let mut s0 = 0;
    while s0 < n && (need_input || need_weight) {
        let nb = chunk.min(n - s0);
        let ld = nb * p;
        let mut col = vec![T::zero(); kdim * ld];
        for s in 0..nb {
            im2col(&dy[(s0 + s) * img..(s0 + s + 1) * img], g, &mut col, ld, s * p);
        }
        if let Some(dx) = dx.as_mut() {
            let mut dxc = vec![T::zero(); cin * ld];
            T::gemm(cin, kdim, ld, weight, false, &col, false, &mut dxc, false);
            scatter(&dxc, nb, cin, p, None, &mut dx[s0 * cin * p..(s0 + nb) * cin * p]);
        }
        if let Some(dw) = dw.as_mut() {
            let xc = gather(&x[s0 * cin * p..(s0 + nb) * cin * p], nb, cin, p);
            T::gemm(cin, ld, kdim, &xc, false, &col, true, dw, true);
        }
        s0 += nb;
    }
    ConvGrads { input: dx, weight: dw, bias: need_bias.then(|| bias_grad(dy, n, g.cin, g.in_pixels())) }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Reflection padding of every `h×w` plane; `pad < min(h, w)`.
pub(crate) fn reflect_pad_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); planes * hp * wp];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * hp * wp..(pl + 1) * hp * wp];
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..wp {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[y * wp + xx] = src[sy * w + sx];
            }
        }
    }
    out
}

pub(crate) fn reflect_pad_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let src = &dy[pl * hp * wp..(pl + 1) * hp * wp];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for y in 0..hp {
            let sy = reflect(y as isize - pad as isize, h);
            for xx in 0..wp {
                let sx = reflect(xx as isize - pad as isize, w);
                dst[sy * w + sx] += src[y * wp + xx];
            }
        }
    }
    dx
}
