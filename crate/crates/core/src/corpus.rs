//! Seeded procedural image corpus: multi-octave value noise, geometric shapes
//! and soft bright blobs, standing in for grayscale MRI slices.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { count: 256, size: 64, seed: 0 }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a `cells×cells` lattice, smoothly interpolated.
fn value_noise(size: usize, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
    let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let fy = y as f64 / size as f64 * cells as f64;
            let fx = x as f64 / size as f64 * cells as f64;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (smoothstep(fy - iy as f64), smoothstep(fx - ix as f64));
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// One procedural grayscale image of side `size`.
pub fn procedural_image(size: usize, rng: &mut Rng) -> Image {
    let mut px = vec![0.0; size * size];
    let mut amp = 0.5;
    let mut total = 0.0;
    for cells in [2usize, 4, 8, 16] {
        let layer = value_noise(size, cells, rng);
        for (p, l) in px.iter_mut().zip(layer) {
            *p += amp * l;
        }
        total += amp;
        amp *= 0.5;
    }
    px.iter_mut().for_each(|p| *p = 0.15 + 0.5 * *p / total);

    let s = size as f64;
    for _ in 0..1 + rng.below(3) {
        let (cy, cx) = (rng.uniform() * s, rng.uniform() * s);
        let r = s * rng.uniform_range(0.08, 0.25);
        let level = rng.uniform_range(-0.2, 0.3);
        let rect = rng.bernoulli(0.5);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if rect { dy.abs() < r && dx.abs() < 0.7 * r } else { dy * dy + dx * dx < r * r };
                if inside {
                    px[y * size + x] += level;
                }
            }
        }
    }
    for _ in 0..rng.below(4) {
        let (cy, cx) = (rng.uniform() * s, rng.uniform() * s);
        let sigma = s * rng.uniform_range(0.02, 0.07);
        let level = rng.uniform_range(0.2, 0.45);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                px[y * size + x] += level * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Image::new(1, size, size, px).expect("size*size pixels").clamp01()
}

/// `spec.count` images; image `i` depends only on `(seed, i)`.
pub fn generate(spec: &CorpusSpec) -> Vec<Image> {
    let root = Rng::new(spec.seed);
    (0..spec.count).map(|i| procedural_image(spec.size, &mut root.fork(i as u64))).collect()
}

/// Write a corpus as `img_00000.png`, ... into `dir`.
pub fn write_dir(images: &[Image], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, im) in images.iter().enumerate() {
        im.save(dir.join(format!("img_{i:05}.png")))?;
    }
    Ok(())
}

/// SHA-256 over the 8-bit quantized pixels; identifies a corpus in checkpoint metadata.
pub fn corpus_hash(images: &[Image]) -> String {
    let mut h = Sha256::new();
    for im in images {
        h.update((im.channels as u32).to_le_bytes());
        h.update((im.height as u32).to_le_bytes());
        h.update((im.width as u32).to_le_bytes());
        let bytes: Vec<u8> = im.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        h.update(&bytes);
    }
    hex::encode(h.finalize().as_slice())
}
