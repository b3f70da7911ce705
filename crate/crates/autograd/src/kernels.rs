//! Raw numeric kernels over NCHW buffers. The graph layer wraps these with
//! shape checks and gradient bookkeeping.

use crate::par;

/// Geometry of a 2-d sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self { kh: k, kw: k, stride, pad }
    }

    /// Output extent of a convolution over an `h`×`w` input, if non-empty.
    pub fn conv_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    /// Output extent of a transposed convolution over an `h`×`w` input.
    pub fn transpose_out(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = ((h as isize - 1) * self.stride as isize + self.kh as isize) - 2 * self.pad as isize;
        let ow = ((w as isize - 1) * self.stride as isize + self.kw as isize) - 2 * self.pad as isize;
        (oh > 0 && ow > 0).then_some((oh as usize, ow as usize))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` m×k and `op(b)` k×n,
/// all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `c` channels of an `h`×`w` image into a `(c·kh·kw) × (oh·ow)` matrix.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Vec<f64> {
    let l = oh * ow;
    let mut cols = vec![0.0; c * win.kh * win.kw * l];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ch * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize, x: &mut [f64]) {
    let l = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ch * win.kh + ky) * win.kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a grouped convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvDims {
    fn cg(&self) -> usize {
        self.c_in / self.groups
    }
    fn og(&self) -> usize {
        self.c_out / self.groups
    }
    fn kk(&self) -> usize {
        self.win.kh * self.win.kw
    }
    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }
}

fn depthwise_forward(x: &[f64], weight: &[f64], d: &ConvDims, y: &mut [f64]) {
    let (h, w, oh, ow, win) = (d.h, d.w, d.oh, d.ow, d.win);
    for ch in 0..d.c_in {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let k = &weight[ch * d.kk()..(ch + 1) * d.kk()];
        let out = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += k[ky * win.kw + kx] * plane[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
    }
}

fn depthwise_backward(x: &[f64], weight: &[f64], dy: &[f64], d: &ConvDims, dx: Option<&mut [f64]>, dw: &mut [f64]) {
    let (h, w, oh, ow, win) = (d.h, d.w, d.oh, d.ow, d.win);
    let mut dx = dx;
    for ch in 0..d.c_in {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let k = &weight[ch * d.kk()..(ch + 1) * d.kk()];
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dk = &mut dw[ch * d.kk()..(ch + 1) * d.kk()];
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[oy * ow + ox];
                if go == 0.0 {
                    continue;
                }
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let idx = iy as usize * w + ix as usize;
                            dk[ky * win.kw + kx] += go * plane[idx];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[ch * h * w + idx] += go * k[ky * win.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-d convolution forward. Returns `[n, c_out, oh, ow]` data.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let in_per = d.c_in * d.h * d.w;
    let out_plane = d.oh * d.ow;
    let out_per = d.c_out * out_plane;
    let mut y = vec![0.0; d.n * out_per];
    par::for_each_chunk(&mut y, out_per, |n, yn| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        if d.is_depthwise() {
            depthwise_forward(xn, weight, d, yn);
        } else {
            let (cg, og, kk) = (d.cg(), d.og(), d.kk());
            for g in 0..d.groups {
                let xg = &xn[g * cg * d.h * d.w..(g + 1) * cg * d.h * d.w];
                let wg = &weight[g * og * cg * kk..(g + 1) * og * cg * kk];
                let yg = &mut yn[g * og * out_plane..(g + 1) * og * out_plane];
                if d.win.is_pointwise() {
                    gemm(og, cg, out_plane, 1.0, wg, false, xg, false, 0.0, yg);
                } else {
                    let cols = im2col(xg, cg, d.h, d.w, d.win, d.oh, d.ow);
                    gemm(og, cg * kk, out_plane, 1.0, wg, false, &cols, false, 0.0, yg);
                }
            }
        }
        if let Some(b) = bias {
            for (o, plane) in yn.chunks_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    y
}

/// Gradients of a grouped convolution: `(dx, dweight, dbias)`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_per = d.c_in * d.h * d.w;
    let out_plane = d.oh * d.ow;
    let out_per = d.c_out * out_plane;
    let (cg, og, kk) = (d.cg(), d.og(), d.kk());
    let per_item = par::map_range(d.n, |n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let dyn_ = &dy[n * out_per..(n + 1) * out_per];
        let mut dw = vec![0.0; weight.len()];
        let mut dx = need_dx.then(|| vec![0.0; in_per]);
        if d.is_depthwise() {
            depthwise_backward(xn, weight, dyn_, d, dx.as_deref_mut(), &mut dw);
            return (dx, dw);
        }
        for g in 0..d.groups {
            let xg = &xn[g * cg * d.h * d.w..(g + 1) * cg * d.h * d.w];
            let wg = &weight[g * og * cg * kk..(g + 1) * og * cg * kk];
            let dyg = &dyn_[g * og * out_plane..(g + 1) * og * out_plane];
            let dwg = &mut dw[g * og * cg * kk..(g + 1) * og * cg * kk];
            if d.win.is_pointwise() {
                gemm(og, out_plane, cg, 1.0, dyg, false, xg, true, 1.0, dwg);
                if let Some(dx) = dx.as_mut() {
                    let dxg = &mut dx[g * cg * d.h * d.w..(g + 1) * cg * d.h * d.w];
                    gemm(cg, og, out_plane, 1.0, wg, true, dyg, false, 0.0, dxg);
                }
            } else {
                let cols = im2col(xg, cg, d.h, d.w, d.win, d.oh, d.ow);
                gemm(og, out_plane, cg * kk, 1.0, dyg, false, &cols, true, 1.0, dwg);
                if let Some(dx) = dx.as_mut() {
                    let mut dcols = vec![0.0; cg * kk * out_plane];
                    gemm(cg * kk, og, out_plane, 1.0, wg, true, dyg, false, 0.0, &mut dcols);
                    let dxg = &mut dx[g * cg * d.h * d.w..(g + 1) * cg * d.h * d.w];
                    col2im(&dcols, cg, d.h, d.w, d.win, d.oh, d.ow, dxg);
                }
            }
        }
        (dx, dw)
    });
    let mut dw = vec![0.0; weight.len()];
    let mut dx = need_dx.then(|| Vec::with_capacity(d.n * in_per));
    for (dxn, dwn) in per_item {
        for (a, b) in dw.iter_mut().zip(&dwn) {
            *a += b;
        }
        if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
            dx.extend_from_slice(&dxn);
        }
    }
    let db = channel_sums(dy, d.n, d.c_out, out_plane);
    (dx, dw, db)
}

/// Sum over batch and space for every channel.
pub fn channel_sums(t: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            let off = (i * c + ch) * plane;
            *acc += t[off..off + plane].iter().sum::<f64>();
        }
    }
    s
}

/// Shapes of a transposed convolution (no groups).
#[derive(Clone, Copy, Debug)]
pub struct ConvTDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

/// Transposed convolution forward, weight laid out `[c_in, c_out, kh, kw]`.
pub fn conv_transpose2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvTDims) -> Vec<f64> {
    let in_plane = d.h * d.w;
    let in_per = d.c_in * in_plane;
    let out_plane = d.oh * d.ow;
    let out_per = d.c_out * out_plane;
    let kk = d.win.kh * d.win.kw;
    let mut y = vec![0.0; d.n * out_per];
    par::for_each_chunk(&mut y, out_per, |n, yn| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let mut cols = vec![0.0; d.c_out * kk * in_plane];
        gemm(d.c_out * kk, d.c_in, in_plane, 1.0, weight, true, xn, false, 0.0, &mut cols);
        col2im(&cols, d.c_out, d.oh, d.ow, d.win, d.h, d.w, yn);
        if let Some(b) = bias {
            for (o, plane) in yn.chunks_mut(out_plane).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    y
}

/// Gradients of a transposed convolution: `(dx, dweight, dbias)`.
pub fn conv_transpose2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvTDims,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let in_plane = d.h * d.w;
    let in_per = d.c_in * in_plane;
    let out_plane = d.oh * d.ow;
    let out_per = d.c_out * out_plane;
    let kk = d.win.kh * d.win.kw;
    let per_item = par::map_range(d.n, |n| {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let dcols = im2col(&dy[n * out_per..(n + 1) * out_per], d.c_out, d.oh, d.ow, d.win, d.h, d.w);
        let mut dw = vec![0.0; weight.len()];
        gemm(d.c_in, in_plane, d.c_out * kk, 1.0, xn, false, &dcols, true, 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; in_per];
            gemm(d.c_in, d.c_out * kk, in_plane, 1.0, weight, false, &dcols, false, 0.0, &mut dx);
            dx
        });
        (dx, dw)
    });
    let mut dw = vec![0.0; weight.len()];
    let mut dx = need_dx.then(|| Vec::with_capacity(d.n * in_per));
    for (dxn, dwn) in per_item {
        for (a, b) in dw.iter_mut().zip(&dwn) {
            *a += b;
        }
        if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
            dx.extend_from_slice(&dxn);
        }
    }
    let db = channel_sums(dy, d.n, d.c_out, out_plane);
    (dx, dw, db)
}

/// Max pooling; returns output and the flat input index of every maximum.
pub fn max_pool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> (Vec<f64>, Vec<usize>) {
    let mut y = vec![f64::NEG_INFINITY; n * c * oh * ow];
    let mut arg = vec![0usize; y.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x[idx] > y[o] {
                            y[o] = x[idx];
                            arg[o] = idx;
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

/// Average pooling counting padded cells as zeros.
pub fn avg_pool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Vec<f64> {
    let scale = 1.0 / (win.kh * win.kw) as f64;
    let mut y = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += x[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                y[(plane * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool_backward(dy: &[f64], n: usize, c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize) -> Vec<f64> {
    let scale = 1.0 / (win.kh * win.kw) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(plane * oh + oy) * ow + ox] * scale;
                for ky in 0..win.kh {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..win.kw {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Source channel for each output channel of a channel shuffle.
pub fn shuffle_permutation(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    // view channels as (groups, per), transpose to (per, groups), flatten
    (0..c).map(|o| (o % groups) * per + o / groups).collect()
}

/// Gathers channels: `out[:, o] = x[:, perm[o]]`.
pub fn permute_channels(x: &[f64], n: usize, c: usize, plane: usize, perm: &[usize]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for i in 0..n {
        for (o, &src) in perm.iter().enumerate() {
            let d = (i * c + o) * plane;
            let s = (i * c + src) * plane;
            y[d..d + plane].copy_from_slice(&x[s..s + plane]);
        }
    }
    y
}
