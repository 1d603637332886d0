//! Planar images in `[0, 1]`, file IO and the pixel operations used by
//! augmentation and benchmark generation.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar `[C, H, W]` image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "image {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self { channels, height, width, data: vec![v; channels * height * width] }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { channels, height, width, data }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] => Self::new(1, h, w, t.to_vec()),
            [c, h, w] | [1, c, h, w] => Self::new(c, h, w, t.to_vec()),
            _ => Err(Error::shape(format!("not an image tensor: {:?}", t.shape()))),
        }
    }

    /// `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.height, self.width], self.data.clone()).expect("consistent image")
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| self.at(c, top + y, left + x)))
    }

    /// Bilinear resampling with pixel-center alignment; identity when the
    /// size does not change.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(self.channels, height, width, |c, y, x| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let top = self.at(c, y0, x0) * (1.0 - tx) + self.at(c, y0, x1) * tx;
            let bot = self.at(c, y1, x0) * (1.0 - tx) + self.at(c, y1, x1) * tx;
            top * (1.0 - ty) + bot * ty
        })
    }

    pub fn hflip(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| self.at(c, y, self.width - 1 - x))
    }

    /// Integer translation with edge replication.
    pub fn shift(&self, dy: isize, dx: isize) -> Image {
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.at(c, clampi(y as isize - dy, self.height), clampi(x as isize - dx, self.width))
        })
    }

    /// Separable Gaussian blur, radius `ceil(3σ)`, edge replication.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let horiz = Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.at(c, y, clampi(x as isize + i as isize - radius, self.width)))
                .sum()
        });
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz.at(c, clampi(y as isize + i as isize - radius, self.height), x))
                .sum()
        })
    }

    /// Collapse to one channel (mean over channels).
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(1, self.height, self.width, |_, y, x| {
            (0..self.channels).map(|c| self.at(c, y, x)).sum::<f64>() / self.channels as f64
        })
    }

    /// Replicate a grayscale image to `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::shape(format!("replicate needs 1 channel, got {}", self.channels)));
        }
        Ok(Image::from_fn(channels, self.height, self.width, |_, y, x| self.at(0, y, x)))
    }

    fn to_dynamic(&self) -> Result<DynamicImage> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf = self.data.iter().map(|&v| q(v)).collect();
                GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .map(DynamicImage::ImageLuma8)
                    .ok_or_else(|| Error::shape("gray buffer"))
            }
            3 => {
                let mut buf = Vec::with_capacity(self.data.len());
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..3 {
                            buf.push(q(self.at(c, y, x)));
                        }
                    }
                }
                RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .map(DynamicImage::ImageRgb8)
                    .ok_or_else(|| Error::shape("rgb buffer"))
            }
            c => Err(Error::shape(format!("cannot encode a {c}-channel image"))),
        }
    }

    fn from_dynamic(img: DynamicImage) -> Image {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let has_color = img.color().has_color();
        if has_color {
            let rgb = img.to_rgb8();
            Image::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        } else {
            let g = img.to_luma8();
            Image::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
        }
    }

    /// Encoded 8-bit PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_dynamic()?
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Image { path: "<memory>".into(), message: e.to_string() })?;
        Ok(out.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Image> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Image { path: "<memory>".into(), message: e.to_string() })?;
        Ok(Self::from_dynamic(img))
    }

    /// Load an 8-bit PNG, PGM or PPM file.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(Self::from_dynamic(img))
    }

    /// Save by extension: `.png`, `.pgm` (gray) or `.ppm` (rgb).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let format = ImageFormat::from_path(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        self.to_dynamic()?
            .save_with_format(path, format)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Quantize through 8 bits, matching what a save/load cycle produces.
    pub fn quantized(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }
}

/// Images in a directory with a supported extension, sorted by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    paths.iter().map(Image::load).collect()
}
