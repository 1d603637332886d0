//! Naive reference implementations, written without looking at the
//! optimized kernels: direct loops over every index, no shared helpers.

use perceptra::Rng;

/// `x`: `[n][c][h][w]` flat; `k`: `[o][c][kh][kw]` flat.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                let kv = k[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Pooling over `planes` planes of `h×w`; `max` selects max- or average-pooling.
pub fn pool2d(x: &[f64], planes: usize, h: usize, w: usize, kernel: usize, stride: usize, max: bool) -> Vec<f64> {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::new();
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        vals.push(x[p * h * w + (oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                let v = if max {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                out.push(v);
            }
        }
    }
    out
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = s / a.len() as f64;
    10.0 * (peak * peak / mse).log10()
}

/// 2-D window weights, built directly in two dimensions.
pub fn ssim_window(size: usize, gaussian_sigma: Option<f64>) -> Vec<Vec<f64>> {
    let mut win = vec![vec![0.0; size]; size];
    let c = (size - 1) as f64 / 2.0;
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = match gaussian_sigma {
                Some(s) => (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * s * s)).exp(),
                None => 1.0,
            };
            total += *v;
        }
    }
    for row in win.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    win
}

/// Sliding-window SSIM from its defining formula; planes `[c][h][w]`.
#[allow(clippy::too_many_arguments)]
pub fn ssim(
    a: &[f64],
    b: &[f64],
    c: usize,
    h: usize,
    w: usize,
    win: &[Vec<f64>],
    k1: f64,
    k2: f64,
    peak: f64,
) -> f64 {
    let k = win.len();
    let c1 = (k1 * peak) * (k1 * peak);
    let c2 = (k2 * peak) * (k2 * peak);
    let mut total = 0.0;
    let mut count = 0.0;
    for ch in 0..c {
        let at = |img: &[f64], y: usize, x: usize| img[(ch * h + y) * w + x];
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += win[i][j] * at(a, y0 + i, x0 + j);
                        mb += win[i][j] * at(b, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let da = at(a, y0 + i, x0 + j) - ma;
                        let db = at(b, y0 + i, x0 + j) - mb;
                        va += win[i][j] * da * da;
                        vb += win[i][j] * db * db;
                        cov += win[i][j] * da * db;
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Pearson r by the raw-moment formula.
pub fn pearson_r(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        sa += a[i];
        sb += b[i];
        saa += a[i] * a[i];
        sbb += b[i] * b[i];
        sab += a[i] * b[i];
    }
    (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt())
}

/// Γ(k/2) for a positive integer `k`, by the half-integer recurrence.
fn gamma_half(k: usize) -> f64 {
    let (mut x, mut g) = if k.is_multiple_of(2) { (1.0, 1.0) } else { (0.5, std::f64::consts::PI.sqrt()) };
    while x < k as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Two-sided Student-t tail probability for integer degrees of freedom,
/// by composite Simpson integration of the density.
pub fn t_two_sided(t: f64, df: usize) -> f64 {
    let nu = df as f64;
    let norm = gamma_half(df + 1) / ((nu * std::f64::consts::PI).sqrt() * gamma_half(df));
    let f = |s: f64| norm * (1.0 + s * s / nu).powf(-(nu + 1.0) / 2.0);
    let t = t.abs();
    let steps = 20_000;
    let hstep = t / steps as f64;
    let mut acc = f(0.0) + f(t);
    for i in 1..steps {
        acc += f(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let central = acc * hstep / 3.0;
    (1.0 - 2.0 * central).clamp(0.0, 1.0)
}

pub fn afc(d0: f64, d1: f64, p: f64) -> f64 {
    if d0 == d1 {
        0.5
    } else if d1 < d0 {
        // x1 judged closer by the metric; humans agreed with probability p
        p
    } else {
        1.0 - p
    }
}

pub fn normalize_by_max(v: &[f64]) -> Vec<f64> {
    let mut m = 0.0;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    v.iter().map(|x| x / m).collect()
}

pub fn rand_vec(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(lo, hi)).collect()
}
