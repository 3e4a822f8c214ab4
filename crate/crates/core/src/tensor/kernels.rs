//! Slice-level kernels shared by the forward and backward passes.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Sliding-window geometry over one `C x H x W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    pub fn new(
        op: &'static str,
        (c, h, w): (usize, usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return Err(dim_err(op, "kernel extent must be >= 1"));
        }
        if stride == 0 {
            return Err(dim_err(op, "stride must be >= 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(dim_err(
                op,
                format!("window {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Unfolds one image into a `(C*kh*kw) x (oh*ow)` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Window, cols: &mut [T]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let seg = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into the image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Window, x: &mut [T]) {
    let p = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    out_channels: usize,
    bias: Option<&[T]>,
    g: &Window,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * out_channels * p];
    let mut cols = vec![T::zero(); k * p];
    for s in 0..n {
        im2col(&x[s * g.in_len()..(s + 1) * g.in_len()], g, &mut cols);
        let dst = &mut out[s * out_channels * p..(s + 1) * out_channels * p];
        T::gemm(out_channels, k, p, T::one(), weight, k, 1, &cols, p, 1, T::zero(), dst, p, 1);
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    out_channels: usize,
    dout: &[T],
    g: &Window,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.rows(), g.cols());
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = need.2.then(|| vec![T::zero(); out_channels]);
    let mut cols = vec![T::zero(); k * p];
    for s in 0..n {
        let dy = &dout[s * out_channels * p..(s + 1) * out_channels * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * g.in_len()..(s + 1) * g.in_len()], g, &mut cols);
            // dW[O,K] += dY[O,P] * cols^T[P,K]
            T::gemm(out_channels, p, k, T::one(), dy, p, 1, &cols, 1, p, T::one(), dw, k, 1);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[K,P] = W^T[K,O] * dY[O,P]
            T::gemm(k, out_channels, p, T::one(), weight, 1, k, dy, p, 1, T::zero(), &mut cols, p, 1);
            col2im(&cols, g, &mut dx[s * g.in_len()..(s + 1) * g.in_len()]);
        }
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy[o * p..(o + 1) * p].iter().copied().sum();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Transposed convolution; `g` describes the corresponding forward
/// convolution whose input is this op's output (`g.oh x g.ow` is the
/// spatial extent of `x`).
pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    in_channels: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &Window,
) -> Vec<T> {
    let (k, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * g.in_len()];
    let mut cols = vec![T::zero(); k * p];
    for s in 0..n {
        let xs = &x[s * in_channels * p..(s + 1) * in_channels * p];
        // cols[K,P] = W^T[K,Ci] * x[Ci,P], W stored [Ci, K]
        T::gemm(k, in_channels, p, T::one(), weight, 1, k, xs, p, 1, T::zero(), &mut cols, p, 1);
        let dst = &mut out[s * g.in_len()..(s + 1) * g.in_len()];
        col2im(&cols, g, dst);
        if let Some(b) = bias {
            let plane = g.h * g.w;
            for (o, &bv) in b.iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    in_channels: usize,
    weight: &[T],
    dout: &[T],
    g: &Window,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (k, p) = (g.rows(), g.cols());
    let mut dx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut dw = need.1.then(|| vec![T::zero(); weight.len()]);
    let mut db = need.2.then(|| vec![T::zero(); g.c]);
    let mut cols = vec![T::zero(); k * p];
    for s in 0..n {
        let dy = &dout[s * g.in_len()..(s + 1) * g.in_len()];
        if dx.is_some() || dw.is_some() {
            im2col(dy, g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            // dx[Ci,P] = W[Ci,K] * dcols[K,P]
            let dst = &mut dx[s * in_channels * p..(s + 1) * in_channels * p];
            T::gemm(in_channels, k, p, T::one(), weight, k, 1, &cols, p, 1, T::zero(), dst, p, 1);
        }
        if let Some(dw) = dw.as_mut() {
            // dW[Ci,K] += x[Ci,P] * dcols^T[P,K]
            let xs = &x[s * in_channels * p..(s + 1) * in_channels * p];
            T::gemm(in_channels, p, k, T::one(), xs, p, 1, &cols, 1, p, T::one(), dw, k, 1);
        }
        if let Some(db) = db.as_mut() {
            let plane = g.h * g.w;
            for (o, d) in db.iter_mut().enumerate() {
                *d += dy[o * plane..(o + 1) * plane].iter().copied().sum();
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max pooling per plane; returns values and the flat input offset of each
/// selected element. Ties resolve to the first element in row-major order.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], planes: usize, g: &Window) -> (Vec<T>, Vec<u32>) {
    let (hw, ohw) = (g.h * g.w, g.cols());
    let mut out = Vec::with_capacity(planes * ohw);
    let mut arg = Vec::with_capacity(planes * ohw);
    for pl in 0..planes {
        let base = pl * hw;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let at = base + iy as usize * g.w + ix as usize;
                        if best_at == usize::MAX || x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at as u32);
            }
        }
    }
    (out, arg)
}

/// Average pooling per plane; padded cells count toward the divisor.
pub(crate) fn avgpool_forward<T: Scalar>(x: &[T], planes: usize, g: &Window) -> Vec<T> {
    let hw = g.h * g.w;
    let inv = T::one() / T::from_usize_lossy(g.kh * g.kw);
    let mut out = Vec::with_capacity(planes * g.cols());
    for pl in 0..planes {
        let plane = &x[pl * hw..(pl + 1) * hw];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += plane[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(dout: &[T], planes: usize, g: &Window) -> Vec<T> {
    let hw = g.h * g.w;
    let inv = T::one() / T::from_usize_lossy(g.kh * g.kw);
    let mut dx = vec![T::zero(); planes * hw];
    for pl in 0..planes {
        let plane = &mut dx[pl * hw..(pl + 1) * hw];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dout[pl * g.cols() + oy * g.ow + ox] * inv;
                for i in 0..g.kh {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kw {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += d;
                        }
                    }
                }
            }
        }
    }
    dx
}
