//! Pixel-space baselines: mean absolute difference, PSNR and SSIM.
//!
//! Images are tensors `[H, W]` or `[C, H, W]`; SSIM is computed per channel
//! and averaged.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("shape mismatch: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / x.numel() as f64)
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / x.numel() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` for identical images.
pub fn psnr(x: &Tensor, y: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SsimWindow {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Gaussian { size, .. } | SsimWindow::Uniform { size } => size,
        }
    }

    /// Normalized 1-D taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        match *self {
            SsimWindow::Uniform { size } => vec![1.0 / size as f64; size],
            SsimWindow::Gaussian { size, sigma } => {
                let c = (size as f64 - 1.0) / 2.0;
                let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
                let s: f64 = g.iter().sum();
                g.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: SsimWindow,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: SsimWindow::Gaussian { size: 11, sigma: 1.5 }, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

impl SsimConfig {
    pub fn uniform8(peak: f64) -> Self {
        Self { window: SsimWindow::Uniform { size: 8 }, peak, ..Self::default() }
    }

    pub fn with_peak(self, peak: f64) -> Self {
        Self { peak, ..self }
    }
}

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("expected [H,W] or [C,H,W] image, got {:?}", t.shape()))),
    }
}

/// Valid-mode separable filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean of the local SSIM map over all valid window positions.
pub fn ssim(x: &Tensor, y: &Tensor, config: &SsimConfig) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = planes(x)?;
    let k = config.window.size();
    if k == 0 || h < k || w < k {
        return Err(Error::shape(format!("image {h}x{w} smaller than the {k}x{k} SSIM window")));
    }
    if !(config.peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {}", config.peak)));
    }
    let c1 = (config.k1 * config.peak).powi(2);
    let c2 = (config.k2 * config.peak).powi(2);
    let taps = config.window.taps();
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let a = &x.data()[ch * n..(ch + 1) * n];
        let b = &y.data()[ch * n..(ch + 1) * n];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
        let mu_a = filter_valid(a, h, w, &taps);
        let mu_b = filter_valid(b, h, w, &taps);
        let aa = filter_valid(&prod(&|p, _| p * p), h, w, &taps);
        let bb = filter_valid(&prod(&|_, q| q * q), h, w, &taps);
        let ab = filter_valid(&prod(&|p, q| p * q), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    /// dB; `null` in JSON when the images are identical.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub ssim_config: SsimConfig,
}

pub fn quality_scores(x: &Tensor, y: &Tensor, config: &SsimConfig) -> Result<QualityScores> {
    Ok(QualityScores {
        psnr: psnr(x, y, config.peak)?,
        ssim: ssim(x, y, config)?,
        l1: l1_distance(x, y)?,
        ssim_config: *config,
    })
}
