//! Raw buffer kernels behind the tape ops. No shape validation here; the
//! tape checks shapes before calling in.

use super::Real;

/// Geometry of a stride-1, same-padded square convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Unfolds one batch item `[c_in × H × W]` into `[c_in·k·k × H·W]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad());
    let plane = g.plane();
    for ci in 0..g.c_in {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let out_row = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xo, v) in out_row.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *v = if sx < 0 || sx >= w {
                            T::zero()
                        } else {
                            src_row[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds `[c_in·k·k × H·W]` back, accumulating into `dx`.
fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (h, w, k, pad) = (g.height as isize, g.width as isize, g.kernel, g.pad());
    let plane = g.plane();
    for ci in 0..g.c_in {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    let src_row = &src[(y * w) as usize..((y + 1) * w) as usize];
                    let dst_row = &mut dst[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xo, &v) in src_row.iter().enumerate() {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < w {
                            dst_row[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.plane();
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.batch * g.c_out * plane];
    let mut col = vec![T::zero(); rows * plane];
    for b in 0..g.batch {
        im2col(g, &x[b * g.c_in * plane..(b + 1) * g.c_in * plane], &mut col);
        let dst = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        T::gemm(g.c_out, rows, plane, w, false, &col, false, T::one(), dst);
    }
    out
}

/// Returns `(dx, dw, dbias)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane = g.plane();
    let rows = g.col_rows();
    let mut dw = vec![T::zero(); g.c_out * rows];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut col = vec![T::zero(); rows * plane];
    let mut dcol = vec![T::zero(); if need_dx { rows * plane } else { 0 }];
    for b in 0..g.batch {
        let dout_b = &dout[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in dout_b.chunks(plane).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        im2col(g, &x[b * g.c_in * plane..(b + 1) * g.c_in * plane], &mut col);
        // dW += dOut_b · colᵀ
        T::gemm(g.c_out, plane, rows, dout_b, false, &col, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dOut_b
            T::gemm(rows, g.c_out, plane, w, true, dout_b, false, T::zero(), &mut dcol);
            col2im_add(g, &dcol, &mut dx[b * g.c_in * plane..(b + 1) * g.c_in * plane]);
        }
    }
    (dx, dw, db)
}

/// Max-pool with stride equal to the window. Returns values and, for each
/// output, the flat input index of the winner (first maximum in row-major
/// window order, i.e. the lowest flat index).
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (height / kh, width / kw);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * kh * width + ox * kw;
                let mut best = x[best_idx];
                for dy in 0..kh {
                    let row = base + (oy * kh + dy) * width + ox * kw;
                    for dx in 0..kw {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-channel mean and biased variance of `[B × C × plane]`.
pub(crate) fn channel_moments<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    plane: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * plane) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            ss += x[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / n;
    }
    (mean, var)
}
