//! Slice-level kernels shared by the tape's forward and backward passes.
//!
//! All reductions accumulate in `f64` and narrow once per output element.

use super::Float;
use crate::error::{Error, Result};

/// `a (m×k) · b (k×n)`, optionally adding `bias[i]` to row `i`.
pub fn matmul<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, bias: Option<&[T]>) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        let init = bias.map_or(0.0, |bias| bias[i].widen());
        acc.iter_mut().for_each(|s| *s = init);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let av = av.widen();
            let brow = &b[p * n..(p + 1) * n];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.widen();
            }
        }
        out.extend(acc.iter().map(|&s| T::narrow(s)));
    }
    out
}

pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `floor((len + 2·pad − k) / stride) + 1`
pub fn conv_out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("convolution stride must be positive".into()));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k} larger than padded extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: conv_out_extent(height, kernel, stride, pad)?,
            out_w: conv_out_extent(width, kernel, stride, pad)?,
        })
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel offset `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        valid_range(self.width, self.out_w, kx, self.stride, self.pad)
    }

    fn row_range(&self, ky: usize) -> (usize, usize) {
        valid_range(self.height, self.out_h, ky, self.stride, self.pad)
    }
}

/// Output positions `o` with `0 <= o·stride + offset − pad < len`.
fn valid_range(len: usize, out_len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // o·stride + offset − pad <= len − 1
    let hi = if len + pad < offset + 1 {
        0
    } else {
        ((len + pad - offset - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// Unfolds `x (C×H×W)` into `(C·k·k) × (out_h·out_w)`.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_h * g.out_w;
    let mut cols = vec![T::zero(); g.channels * k * k * plane];
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy0, oy1) = g.row_range(ky);
            for kx in 0..k {
                let (ox0, ox1) = g.col_range(kx);
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &xc[iy * g.width..(iy + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s) = (g.kernel, g.stride);
    let plane = g.out_h * g.out_w;
    let mut acc = vec![0f64; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let xc = &mut acc[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy0, oy1) = g.row_range(ky);
            for kx in 0..k {
                let (ox0, ox1) = g.col_range(kx);
                let row = ((c * k + ky) * k + kx) * plane;
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    let dst = &mut xc[iy * g.width..(iy + 1) * g.width];
                    for ox in ox0..ox1 {
                        dst[ox * s + kx - g.pad] += src[ox].widen();
                    }
                }
            }
        }
    }
    acc.into_iter().map(T::narrow).collect()
}

/// Per-channel `k×k` convolution; `w` is `C×1×k×k`.
pub fn depthwise_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, s) = (g.kernel, g.stride);
    let mut out = Vec::with_capacity(g.channels * g.out_h * g.out_w);
    let mut acc = vec![0f64; g.out_w];
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        let wc = &w[c * k * k..(c + 1) * k * k];
        let b = bias.map_or(0.0, |b| b[c].widen());
        for oy in 0..g.out_h {
            acc.iter_mut().for_each(|v| *v = b);
            for ky in 0..k {
                let iy = oy * s + ky;
                if iy < g.pad || iy - g.pad >= g.height {
                    continue;
                }
                let src = &xc[(iy - g.pad) * g.width..(iy - g.pad + 1) * g.width];
                for kx in 0..k {
                    let wv = wc[ky * k + kx].widen();
                    let (ox0, ox1) = g.col_range(kx);
                    for ox in ox0..ox1 {
                        acc[ox] += wv * src[ox * s + kx - g.pad].widen();
                    }
                }
            }
            out.extend(acc.iter().map(|&v| T::narrow(v)));
        }
    }
    out
}

/// Gradients of [`depthwise_forward`] w.r.t. input, weight and bias.
pub fn depthwise_backward<T: Float>(
    x: &[T],
    w: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, s) = (g.kernel, g.stride);
    let hw = g.height * g.width;
    let ohw = g.out_h * g.out_w;
    let mut dx = want_x.then(|| vec![0f64; g.channels * hw]);
    let mut dw = vec![0f64; g.channels * k * k];
    let mut db = vec![0f64; g.channels];
    for c in 0..g.channels {
        let xc = &x[c * hw..(c + 1) * hw];
        let gc = &grad_out[c * ohw..(c + 1) * ohw];
        db[c] = gc.iter().map(|v| v.widen()).sum();
        for ky in 0..k {
            let (oy0, oy1) = g.row_range(ky);
            for kx in 0..k {
                let (ox0, ox1) = g.col_range(kx);
                let wv = w[(c * k + ky) * k + kx].widen();
                let mut wsum = 0f64;
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let grow = &gc[oy * g.out_w..(oy + 1) * g.out_w];
                    let xrow = &xc[iy * g.width..(iy + 1) * g.width];
                    for ox in ox0..ox1 {
                        wsum += grow[ox].widen() * xrow[ox * s + kx - g.pad].widen();
                    }
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx[c * hw + iy * g.width..c * hw + (iy + 1) * g.width];
                        for ox in ox0..ox1 {
                            drow[ox * s + kx - g.pad] += wv * grow[ox].widen();
                        }
                    }
                }
                dw[(c * k + ky) * k + kx] = wsum;
            }
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(T::narrow).collect::<Vec<T>>();
    (dx.map(narrow), narrow(dw), narrow(db))
}

/// One axis of a bilinear resize: source indices and the lerp weight.
#[derive(Clone, Debug)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    /// Half-pixel centers (`align_corners = false`), clamped at the border.
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(out_len),
            hi: Vec::with_capacity(out_len),
            frac: Vec::with_capacity(out_len),
        };
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.frac.push(frac);
        }
        taps
    }
}

pub fn bilinear_forward<T: Float>(x: &[T], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let r0 = &xc[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
            let r1 = &xc[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
            let fy = ty.frac[oy];
            for ox in 0..out_w {
                let (a, b, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                // Lerp form keeps constant fields exact.
                let top = r0[a].widen() + fx * (r0[b].widen() - r0[a].widen());
                let bot = r1[a].widen() + fx * (r1[b].widen() - r1[a].widen());
                out.push(T::narrow(top + fy * (bot - top)));
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Float>(
    grad_out: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut acc = vec![0f64; channels * h * w];
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..out_h {
            let fy = ty.frac[oy];
            for ox in 0..out_w {
                let g = grad_out[(c * out_h + oy) * out_w + ox].widen();
                let fx = tx.frac[ox];
                let (y0, y1, x0, x1) = (ty.lo[oy], ty.hi[oy], tx.lo[ox], tx.hi[ox]);
                acc[base + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                acc[base + y0 * w + x1] += g * (1.0 - fy) * fx;
                acc[base + y1 * w + x0] += g * fy * (1.0 - fx);
                acc[base + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    acc.into_iter().map(T::narrow).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..9 {
            for k in [1usize, 3, 5, 7] {
                for stride in 1..4 {
                    let pad = k / 2;
                    let Ok(out) = conv_out_extent(len, k, stride, pad) else { continue };
                    for off in 0..k {
                        let (lo, hi) = valid_range(len, out, off, stride, pad);
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let p = (o * stride + off) as isize - pad as isize;
                                p >= 0 && (p as usize) < len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "len={len} k={k} s={stride} off={off}");
                    }
                }
            }
        }
    }

    #[test]
    fn taps_replicate_single_pixel() {
        let t = AxisTaps::new(1, 3);
        assert_eq!(t.lo, vec![0, 0, 0]);
        assert!(t.frac.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
