//! Numeric kernels shared by the forward and backward passes.
//!
//! Convolutions unfold each image into a `[in_ch*kh*kw, oh*ow]` column
//! matrix and work on whole output planes. Every reduction runs in a fixed
//! order (eight interleaved partial sums, then a fixed tree), so results are
//! bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn taps(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Output columns `[lo, hi)` whose input column for tap `kx` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        if self.width + self.pad < kx + 1 {
            return (0, 0);
        }
        let hi = ((self.width - 1 + self.pad - kx) / self.stride + 1).min(ow);
        (lo.min(hi), hi)
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.stride + ky;
        (iy >= self.pad && iy - self.pad < self.height).then(|| iy - self.pad)
    }
}

fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            lanes[j] += x[j] * y[j];
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        lanes[j] += x * y;
    }
    let q = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

fn sum(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for j in 0..8 {
            lanes[j] += x[j];
        }
    }
    for (j, x) in rest.iter().enumerate() {
        lanes[j] += x;
    }
    let q = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

/// Unfolds one image into `col` (`[taps, oh*ow]`), zero where the tap falls in padding.
/// Every entry of `col` is written.
fn im2col(g: &ConvGeom, img: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.height * g.width;
    for i in 0..g.in_ch {
        let in_plane = &img[i * plane_in..][..plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (i * g.kh + ky) * g.kw + kx;
                let (lo, hi) = g.col_range(kx);
                let dst = &mut col[r * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..][..ow];
                    let iy = match g.in_row(oy, ky) {
                        Some(iy) if lo < hi => iy,
                        _ => {
                            out.fill(0.0);
                            continue;
                        }
                    };
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let src = &in_plane[iy * g.width..][..g.width];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto the image gradient.
fn col2im(g: &ConvGeom, col: &[f32], img: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane_in = g.height * g.width;
    for i in 0..g.in_ch {
        let in_plane = &mut img[i * plane_in..][..plane_in];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (i * g.kh + ky) * g.kw + kx;
                let (lo, hi) = g.col_range(kx);
                if lo >= hi {
                    continue;
                }
                let src = &col[r * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let dst = &mut in_plane[iy * g.width..][..g.width];
                    let row = &src[oy * ow..][..ow];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        for (d, s) in dst[ix0..ix0 + hi - lo].iter_mut().zip(&row[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += row[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let plane_out = g.out_h() * g.out_w();
    let plane_in = g.height * g.width;
    let taps = g.taps();
    let mut out = vec![0.0f32; g.batch * g.out_ch * plane_out];
    let mut col = vec![0.0f32; taps * plane_out];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_ch * plane_in..][..g.in_ch * plane_in], &mut col);
        let out_img = &mut out[n * g.out_ch * plane_out..][..g.out_ch * plane_out];
        if let Some(b) = bias {
            for (plane, bv) in out_img.chunks_exact_mut(plane_out).zip(b) {
                plane.fill(*bv);
            }
        }
        // tap-major so each column row is streamed once for all output planes
        for k in 0..taps {
            let src = &col[k * plane_out..][..plane_out];
            for (o, plane) in out_img.chunks_exact_mut(plane_out).enumerate() {
                axpy(plane, w[o * taps + k], src);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane_out = g.out_h() * g.out_w();
    let plane_in = g.height * g.width;
    let img_in = g.in_ch * plane_in;
    let taps = g.taps();
    let mut gx = vec![0.0f32; if need_x { x.len() } else { 0 }];
    let mut gw = vec![0.0f32; if need_w { w.len() } else { 0 }];
    let mut gb = vec![0.0f32; g.out_ch];
    let mut col = vec![0.0f32; taps * plane_out];
    let mut gcol = vec![0.0f32; if need_x { taps * plane_out } else { 0 }];
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_ch * plane_out..][..g.out_ch * plane_out];
        for o in 0..g.out_ch {
            gb[o] += sum(&go[o * plane_out..][..plane_out]);
        }
        if need_w {
            im2col(g, &x[n * img_in..][..img_in], &mut col);
            for k in 0..taps {
                let src = &col[k * plane_out..][..plane_out];
                for o in 0..g.out_ch {
                    gw[o * taps + k] += dot(&go[o * plane_out..][..plane_out], src);
                }
            }
        }
        if need_x {
            for k in 0..taps {
                let dst = &mut gcol[k * plane_out..][..plane_out];
                dst.fill(0.0);
                for o in 0..g.out_ch {
                    axpy(dst, w[o * taps + k], &go[o * plane_out..][..plane_out]);
                }
            }
            col2im(g, &gcol, &mut gx[n * img_in..][..img_in]);
        }
    }
    (gx, gw, gb)
}

/// `[m, k] x [k, n]`, i-k-j loop order.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (dst, bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *dst += av * bv;
            }
        }
    }
    out
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0f32; g.batch * g.out_ch * oh * ow];
        for n in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f64;
                        for i in 0..g.in_ch {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    let xv = x[((n * g.in_ch + i) * g.height + iy as usize) * g.width + ix as usize];
                                    let wv = w[((o * g.in_ch + i) * g.kh + ky) * g.kw + kx];
                                    s += (xv * wv) as f64;
                                }
                            }
                        }
                        out[((n * g.out_ch + o) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unfolded_conv_matches_naive_reference() {
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 6), (2, 1, 3, 7, 7), (2, 0, 3, 8, 5), (1, 0, 1, 4, 4), (3, 2, 3, 6, 9)] {
            let g = ConvGeom { batch: 2, in_ch: 3, height: h, width: w, out_ch: 2, kh: k, kw: k, stride, pad };
            let x: Vec<f32> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
            let wt: Vec<f32> = (0..2 * 3 * k * k).map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.2).collect();
            let fast = conv2d_forward(&g, &x, &wt, None);
            let slow = naive_conv(&g, &x, &wt);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
