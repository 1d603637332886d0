//! Slice-level numeric kernels shared by the forward and backward passes.
//!
//! Every loop here runs in a fixed order, so results are bit-reproducible for
//! a given input regardless of platform or thread count.

/// `c[m×n] += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `a_trans`, `a` is stored as `k×m`; with `b_trans`, `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let transposed;
    let b = if b_trans {
        transposed = transpose(b, n, k);
        &transposed[..]
    } else {
        b
    };
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = if a_trans { a[p * m + i] } else { a[i * k + p] };
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// Transpose a row-major `rows×cols` matrix.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfold one `[C,H,W]` image into `[C·kh·kw, H'·W']` columns (zero padding).
pub fn im2col(img: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    let mut cols = vec![0.0; g.patch_len() * positions];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = img[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C,H,W]` image.
pub fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = (c * g.height + iy as usize) * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            img[dst_row + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `input` is `[N,C,H,W]`, `kernel` is `[K,C,kh,kw]`.
pub fn conv2d_forward(
    input: &[f64],
    batch: usize,
    g: &ConvGeometry,
    kernel: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let positions = g.out_height() * g.out_width();
    let out_len = out_channels * positions;
    let mut out = vec![0.0; batch * out_len];
    for n in 0..batch {
        let cols = im2col(&input[n * in_len..(n + 1) * in_len], g);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        gemm(out_channels, g.patch_len(), positions, kernel, false, &cols, false, dst);
        if let Some(b) = bias {
            for (k, &bk) in b.iter().enumerate() {
                for v in &mut dst[k * positions..(k + 1) * positions] {
                    *v += bk;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &[f64],
    batch: usize,
    g: &ConvGeometry,
    kernel: &[f64],
    out_channels: usize,
    grad_out: &[f64],
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let positions = g.out_height() * g.out_width();
    let out_len = out_channels * positions;
    let patch = g.patch_len();
    let mut gi = vec![0.0; batch * in_len];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; out_channels];
    for n in 0..batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        let cols = im2col(&input[n * in_len..(n + 1) * in_len], g);
        gemm(out_channels, positions, patch, go, false, &cols, true, &mut gk);
        let mut dcols = vec![0.0; patch * positions];
        gemm(patch, out_channels, positions, kernel, true, go, false, &mut dcols);
        col2im(&dcols, g, &mut gi[n * in_len..(n + 1) * in_len]);
        for (k, b) in gb.iter_mut().enumerate() {
            *b += go[k * positions..(k + 1) * positions].iter().sum::<f64>();
        }
    }
    ConvGrads { input: gi, kernel: gk, bias: gb }
}

/// Output size of a window op without padding.
pub fn pooled(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

/// Max pooling over `[planes, H, W]`; returns values and flat argmax indices.
pub fn maxpool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (pooled(h, kernel, stride), pooled(w, kernel, stride));
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avgpool_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = (pooled(h, kernel, stride), pooled(w, kernel, stride));
    let area = (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        s += input[base + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out.push(s / area);
            }
        }
    }
    out
}

pub fn avgpool_backward(
    grad_out: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Vec<f64> {
    let (ho, wo) = (pooled(h, kernel, stride), pooled(w, kernel, stride));
    let area = (kernel * kernel) as f64;
    let mut gi = vec![0.0; planes * h * w];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out[(p * ho + oy) * wo + ox] / area;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        gi[base + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    gi
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
