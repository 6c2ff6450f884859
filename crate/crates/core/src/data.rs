//! IDX-style dataset files and the synthetic oriented-grating generator.
//!
//! Headers are big-endian as in classic IDX. Image files carry a fourth
//! dimension (channels) after height and width; pixels are stored
//! `[count, h, w, c]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_HEADER: usize = 20;
pub const LABELS_HEADER: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[count, h, w, c]` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Network input: `[n, c, h, w]` floats, `(p - 127.5) / 64`.
    pub fn to_nchw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0f32; self.pixels.len()];
        for n in 0..self.len() {
            let src = &self.pixels[n * h * w * c..(n + 1) * h * w * c];
            let dst = &mut out[n * h * w * c..(n + 1) * h * w * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = (src[(y * w + x) * c + ch] as f32 - 127.5) / 64.0;
                    }
                }
            }
        }
        out
    }

    pub fn images_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGES_HEADER + self.pixels.len());
        for v in [IMAGES_MAGIC, self.len() as u32, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn labels_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABELS_HEADER + self.len());
        out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Self> {
        let be = |b: &[u8], i: usize| u32::from_be_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        if images.len() < IMAGES_HEADER || be(images, 0) != IMAGES_MAGIC as usize {
            return Err(Error::integrity(images_path, "bad images magic"));
        }
        if labels.len() < LABELS_HEADER || be(labels, 0) != LABELS_MAGIC as usize {
            return Err(Error::integrity(labels_path, "bad labels magic"));
        }
        let (count, h, w, c) = (be(images, 1), be(images, 2), be(images, 3), be(images, 4));
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::integrity(images_path, "zero image dimension"));
        }
        if images.len() != IMAGES_HEADER + count * h * w * c {
            return Err(Error::integrity(
                images_path,
                format!("expected {} bytes, found {}", IMAGES_HEADER + count * h * w * c, images.len()),
            ));
        }
        let lcount = be(labels, 1);
        if labels.len() != LABELS_HEADER + lcount {
            return Err(Error::integrity(labels_path, "label count does not match file size"));
        }
        if lcount != count {
            return Err(Error::integrity(labels_path, format!("{lcount} labels for {count} images")));
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            pixels: images[IMAGES_HEADER..].to_vec(),
            labels: labels[LABELS_HEADER..].to_vec(),
        })
    }

    pub fn load(images_path: &Path, labels_path: &Path) -> Result<Self> {
        let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
        let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
        Self::from_bytes(&images, &labels, images_path, labels_path)
    }

    pub fn save(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        fs::write(images_path, self.images_bytes()).map_err(|e| Error::io(images_path, e))?;
        fs::write(labels_path, self.labels_bytes()).map_err(|e| Error::io(labels_path, e))
    }

    /// Errors unless every label is below `classes`.
    pub fn check_classes(&self, classes: usize, path: &Path) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(l) => Err(Error::integrity(path, format!("label {l} >= {classes} classes"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Half-width, in radians, of the orientation jitter around each class.
    pub jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { classes: 4, samples: 2000, size: 16, channels: 3, noise: 40.0, jitter: 0.35 }
    }
}

/// Oriented sinusoidal gratings. Class `k` has orientation `k * pi / K`
/// (plus jitter); frequency, phase, colour and a weaker distractor grating
/// are drawn per sample. Labels are exactly balanced.
pub fn synthesize(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.classes > 256 || cfg.samples == 0 || cfg.size == 0 || cfg.channels == 0 {
        return Err(Error::Argument(format!("invalid synthetic dataset config {cfg:?}")));
    }
    let mut labels: Vec<u8> = (0..cfg.samples).map(|i| (i % cfg.classes) as u8).collect();
    rng.shuffle(&mut labels);
    let (s, c) = (cfg.size, cfg.channels);
    let mut pixels = Vec::with_capacity(cfg.samples * s * s * c);
    let tau = std::f64::consts::TAU;
    for &label in &labels {
        let theta = label as f64 * std::f64::consts::PI / cfg.classes as f64 + rng.uniform_range(-cfg.jitter, cfg.jitter);
        let freq = rng.uniform_range(0.12, 0.3);
        let phase = rng.uniform_range(0.0, tau);
        let amp = rng.uniform_range(40.0, 90.0);
        let colour: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.3, 1.0)).collect();
        let d_theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let d_freq = rng.uniform_range(0.12, 0.3);
        let d_phase = rng.uniform_range(0.0, tau);
        let d_amp = amp * rng.uniform_range(0.2, 0.5);
        let (ct, st) = (theta.cos(), theta.sin());
        let (cd, sd) = (d_theta.cos(), d_theta.sin());
        for y in 0..s {
            for x in 0..s {
                let (xf, yf) = (x as f64, y as f64);
                let main = amp * (tau * freq * (xf * ct + yf * st) + phase).sin();
                let distract = d_amp * (tau * d_freq * (xf * cd + yf * sd) + d_phase).sin();
                for col in &colour {
                    let v = 127.5 + col * main + distract + cfg.noise * rng.normal();
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Ok(Dataset { height: s, width: s, channels: c, pixels, labels })
}
