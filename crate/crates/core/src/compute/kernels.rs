//! Forward and backward kernels on raw tensors.
//!
//! Image tensors are `[N, C, H, W]`. Convolutions use a fixed 3×3 window
//! with padding 1, so a stride-`s` convolution maps `H` to `ceil(H / s)`
//! and the transposed convolution maps `H` to `s * H`. Both are expressed
//! through one im2col/col2im pair plus a GEMM.

use super::tensor::Tensor;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
const PAD: isize = 1;

/// `c = a · b + beta · c` with optional transposes, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

pub fn strided_size(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

/// Patch matrix `[C*9, Hs*Ws]` of a `[C, Hb, Wb]` image sampled with `stride`.
fn im2col(img: &[f64], c: usize, hb: usize, wb: usize, stride: usize, cols: &mut [f64]) {
    let hs = strided_size(hb, stride);
    let ws = strided_size(wb, stride);
    let plane = hs * ws;
    debug_assert_eq!(cols.len(), c * TAPS * plane);
    for ch in 0..c {
        let src = &img[ch * hb * wb..(ch + 1) * hb * wb];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[((ch * TAPS) + ky * KERNEL + kx) * plane..][..plane];
                for oy in 0..hs {
                    let iy = (oy * stride) as isize + ky as isize - PAD;
                    let dst = &mut row[oy * ws..(oy + 1) * ws];
                    if iy < 0 || iy >= hb as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * wb..(iy as usize + 1) * wb];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - PAD;
                        *d = if ix >= 0 && ix < wb as isize {
                            line[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` back onto a `[C, Hb, Wb]` image.
fn col2im(cols: &[f64], c: usize, hb: usize, wb: usize, stride: usize, img: &mut [f64]) {
    let hs = strided_size(hb, stride);
    let ws = strided_size(wb, stride);
    let plane = hs * ws;
    for ch in 0..c {
        let dst = &mut img[ch * hb * wb..(ch + 1) * hb * wb];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[((ch * TAPS) + ky * KERNEL + kx) * plane..][..plane];
                for oy in 0..hs {
                    let iy = (oy * stride) as isize + ky as isize - PAD;
                    if iy < 0 || iy >= hb as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * wb..(iy as usize + 1) * wb];
                    for (ox, &v) in row[oy * ws..(oy + 1) * ws].iter().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - PAD;
                        if ix >= 0 && ix < wb as isize {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "{what} expects [N, C, H, W], got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn check_stride(stride: usize) {
    assert!(stride == 1 || stride == 2, "stride must be 1 or 2, got {stride}");
}

/// Cross-correlation with kernels `[Co, Ci, 3, 3]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
    check_stride(stride);
    let (n, ci, h, wd) = dims4(x, "conv2d");
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv2d kernels must be [Co, Ci, 3, 3]");
    assert_eq!(ws[1], ci, "conv2d: input has {ci} channels, kernels expect {}", ws[1]);
    assert!(ws[2] == KERNEL && ws[3] == KERNEL, "conv2d kernels must be 3x3");
    let co = ws[0];
    let (ho, wo) = (strided_size(h, stride), strided_size(wd, stride));
    let plane = ho * wo;
    let mut out = vec![0.0; n * co * plane];
    let mut cols = vec![0.0; ci * TAPS * plane];
    for b in 0..n {
        im2col(&x.data()[b * ci * h * wd..][..ci * h * wd], ci, h, wd, stride, &mut cols);
        let y = &mut out[b * co * plane..][..co * plane];
        if let Some(bias) = bias {
            for (c, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[c]);
            }
        }
        gemm(co, ci * TAPS, plane, w.data(), false, &cols, false, 1.0, y);
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Returns `(dx, dw, db)`; `dx`/`dw` are skipped when not requested.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, ci, h, wd) = dims4(x, "conv2d");
    let co = w.shape()[0];
    let (ho, wo) = (strided_size(h, stride), strided_size(wd, stride));
    let plane = ho * wo;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = vec![0.0; co];
    let mut cols = vec![0.0; ci * TAPS * plane];
    for b in 0..n {
        let g = &dy.data()[b * co * plane..][..co * plane];
        for (c, chunk) in g.chunks(plane).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * ci * h * wd..][..ci * h * wd], ci, h, wd, stride, &mut cols);
            gemm(co, plane, ci * TAPS, g, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ci * TAPS, co, plane, w.data(), true, g, false, 0.0, &mut cols);
            col2im(&cols, ci, h, wd, stride, &mut dx[b * ci * h * wd..][..ci * h * wd]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        Tensor::new(vec![co], db),
    )
}

/// Transposed convolution with kernels `[Ci, Co, 3, 3]`; output is `stride` times larger.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize) -> Tensor {
    check_stride(stride);
    let (n, ci, h, wd) = dims4(x, "transposed_conv2d");
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "transposed_conv2d kernels must be [Ci, Co, 3, 3]");
    assert_eq!(
        ws[0], ci,
        "transposed_conv2d: input has {ci} channels, kernels expect {}",
        ws[0]
    );
    assert!(ws[2] == KERNEL && ws[3] == KERNEL, "transposed_conv2d kernels must be 3x3");
    let co = ws[1];
    let (hb, wb) = (h * stride, wd * stride);
    let plane = h * wd;
    let mut out = vec![0.0; n * co * hb * wb];
    let mut cols = vec![0.0; co * TAPS * plane];
    for b in 0..n {
        let xs = &x.data()[b * ci * plane..][..ci * plane];
        gemm(co * TAPS, ci, plane, w.data(), true, xs, false, 0.0, &mut cols);
        let y = &mut out[b * co * hb * wb..][..co * hb * wb];
        if let Some(bias) = bias {
            for (c, chunk) in y.chunks_mut(hb * wb).enumerate() {
                chunk.fill(bias.data()[c]);
            }
        }
        col2im(&cols, co, hb, wb, stride, y);
    }
    Tensor::new(vec![n, co, hb, wb], out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    dy: &Tensor,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>, Tensor) {
    let (n, ci, h, wd) = dims4(x, "transposed_conv2d");
    let co = w.shape()[1];
    let (hb, wb) = (h * stride, wd * stride);
    let plane = h * wd;
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = vec![0.0; co];
    let mut cols = vec![0.0; co * TAPS * plane];
    for b in 0..n {
        let g = &dy.data()[b * co * hb * wb..][..co * hb * wb];
        for (c, chunk) in g.chunks(hb * wb).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
        if !need_dx && !need_dw {
            continue;
        }
        im2col(g, co, hb, wb, stride, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(ci, co * TAPS, plane, w.data(), false, &cols, false, 0.0, &mut dx[b * ci * plane..][..ci * plane]);
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[b * ci * plane..][..ci * plane];
            gemm(ci, plane, co * TAPS, xs, false, &cols, true, 1.0, dw);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d)),
        Tensor::new(vec![co], db),
    )
}

/// 2×2/stride-2 max pooling. Returns the pooled tensor and, per output,
/// the flat input index of the winning element (first maximum in
/// row-major window order).
pub fn maxpool2d(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = dims4(x, "maxpool2d");
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "maxpool2d needs even spatial dims, got {h}x{w}"
    );
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::new(vec![n, c, ho, wo], out), arg)
}

/// 2×2/stride-2 average pooling.
pub fn avgpool2d(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x, "avgpool2d");
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2d needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i = base + 2 * oy * w + 2 * ox;
                out.push(0.25 * (d[i] + d[i + 1] + d[i + w] + d[i + w + 1]));
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, inp) = (x.shape()[0], x.len() / x.shape()[0]);
    let ws = w.shape();
    assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
    assert_eq!(ws[1], inp, "linear: input width {inp}, weight expects {}", ws[1]);
    let out_w = ws[0];
    let mut y = vec![0.0; n * out_w];
    if let Some(b) = b {
        for row in y.chunks_mut(out_w) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(n, inp, out_w, x.data(), false, w.data(), true, 1.0, &mut y);
    Tensor::new(vec![n, out_w], y)
}

/// Per-channel statistics over `(N, H, W)` of a `[N, C, H, W]` tensor:
/// biased mean and variance.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims4(x, "batchnorm");
    assert!(n > 0, "batchnorm over an empty batch");
    let plane = h * w;
    let count = (n * plane) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += d[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            v += d[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|x| (x - m) * (x - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}
