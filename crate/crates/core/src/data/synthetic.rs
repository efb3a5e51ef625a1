//! Synthetic segmentation data: random elliptical regions over a noisy,
//! blurred background, optionally crossed by dark hair-like strokes that
//! appear in the image but not in the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Sample, SampleEntry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 100;
const HAIR_INTENSITY: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Number of label values, background included (2 for binary).
    pub num_classes: usize,
    /// Gaussian blur applied to region boundaries, in pixels. 0 disables it.
    pub boundary_blur_sigma: f64,
    pub occlusion: bool,
    pub noise_std: f64,
    /// Bounds on the foreground fraction of each mask.
    pub roi_area_range: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 20,
            height: 64,
            width: 64,
            in_channels: 1,
            num_classes: 2,
            boundary_blur_sigma: 1.0,
            occlusion: false,
            noise_std: 0.05,
            roi_area_range: (0.05, 0.5),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1".into());
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(16)
            || !self.width.is_multiple_of(16)
        {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.height, self.width
            ));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes counts the background and must be >= 2".into());
        }
        let (lo, hi) = self.roi_area_range;
        if !(lo > 0.0 && hi < 1.0 && lo < hi) {
            return bad(format!(
                "roi_area_range ({lo}, {hi}) must satisfy 0 < low < high < 1"
            ));
        }
        if !(self.boundary_blur_sigma >= 0.0 && self.noise_std >= 0.0) {
            return bad("blur sigma and noise std must be non-negative".into());
        }
        Ok(())
    }

    /// Seed for sample `index`: the dataset seed XOR the index.
    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }
}

/// Generates `cfg.n_samples` samples and a manifest with default relative
/// paths (`images/NNNN.tensor`, `masks/NNNN.tensor`).
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<Sample>, DatasetManifest)> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples)
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        num_classes: cfg.num_classes,
        in_channels: cfg.in_channels,
        h: cfg.height,
        w: cfg.width,
        samples: (0..cfg.n_samples)
            .map(|i| SampleEntry {
                image: format!("images/{i:04}.tensor"),
                mask: format!("masks/{i:04}.tensor"),
            })
            .collect(),
    };
    Ok((samples, manifest))
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn generate_sample(cfg: &SyntheticConfig, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed(index));
    let (h, w) = (cfg.height, cfg.width);
    let (lo, hi) = cfg.roi_area_range;
    let labels = (0..MAX_ATTEMPTS)
        .find_map(|_| {
            let labels = draw_mask(cfg, &mut rng);
            let fg = labels.iter().filter(|&&l| l > 0).count() as f64 / (h * w) as f64;
            (lo..=hi).contains(&fg).then_some(labels)
        })
        .ok_or_else(|| {
            Error::Generation(format!(
                "sample {index}: no mask with foreground fraction in [{lo}, {hi}] after {MAX_ATTEMPTS} attempts"
            ))
        })?;

    let mut image = Vec::with_capacity(cfg.in_channels * h * w);
    let gradient_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let gradient_amp: f64 = rng.random_range(0.0..0.1);
    for ch in 0..cfg.in_channels {
        let offset = 0.04 * ch as f64;
        let mut plane: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                let shade = gradient_amp * (x * gradient_dir.cos() + y * gradient_dir.sin());
                class_intensity(l, cfg.num_classes) + offset + shade
            })
            .collect();
        if cfg.boundary_blur_sigma > 0.0 {
            plane = gaussian_blur(&plane, h, w, cfg.boundary_blur_sigma);
        }
        image.extend(plane);
    }
    if cfg.occlusion {
        draw_hair(&mut image, cfg, &mut rng);
    }
    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("valid std");
        for v in &mut image {
            *v += noise.sample(&mut rng);
        }
    }
    let image: Vec<f32> = image
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Sample {
        image: Tensor::from_vec([1, cfg.in_channels, h, w], image)?,
        mask: Tensor::from_vec([1, 1, h, w], labels.iter().map(|&l| l as f32).collect())?,
    })
}

fn class_intensity(label: u8, num_classes: usize) -> f64 {
    0.3 + 0.4 * label as f64 / (num_classes - 1) as f64
}

/// 1-3 ellipses per foreground class, sized so their total area lands near
/// a target fraction drawn from the configured range. Later classes paint
/// over earlier ones.
fn draw_mask(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (cfg.height, cfg.width);
    let (lo, hi) = cfg.roi_area_range;
    let target: f64 = rng.random_range(lo..=hi);
    let mut shapes = Vec::new();
    for class in 1..cfg.num_classes {
        let count = rng.random_range(1..=3usize);
        for _ in 0..count {
            shapes.push((class as u8, rng.random::<f64>()));
        }
    }
    let weight_sum: f64 = shapes.iter().map(|s| 0.5 + s.1).sum();
    let mut ellipses = Vec::with_capacity(shapes.len());
    for &(class, wgt) in &shapes {
        let area = target * (h * w) as f64 * (0.5 + wgt) / weight_sum;
        let aspect: f64 = rng.random_range(0.5..=1.0);
        let ry = (area / (std::f64::consts::PI * aspect)).sqrt();
        let rx = ry * aspect;
        let margin = ry.max(rx).min(h.min(w) as f64 / 2.0);
        let cy = rng.random_range(margin * 0.5..=(h as f64 - margin * 0.5).max(margin * 0.5));
        let cx = rng.random_range(margin * 0.5..=(w as f64 - margin * 0.5).max(margin * 0.5));
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        ellipses.push((
            class,
            Ellipse {
                cy,
                cx,
                ry: ry.max(0.5),
                rx: rx.max(0.5),
                cos: theta.cos(),
                sin: theta.sin(),
            },
        ));
    }
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for (class, e) in &ellipses {
                if e.contains(py, px) {
                    labels[y * w + x] = *class;
                }
            }
        }
    }
    labels
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// 2-4 dark random-walk polylines across every channel.
fn draw_hair(image: &mut [f64], cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) {
    let (h, w) = (cfg.height, cfg.width);
    let strokes = rng.random_range(2..=4usize);
    for _ in 0..strokes {
        let mut y = rng.random_range(0.0..h as f64);
        let mut x = rng.random_range(0.0..w as f64);
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let segments = rng.random_range(3..=6usize);
        for _ in 0..segments {
            heading += rng.random_range(-0.6..0.6);
            let len = rng.random_range(0.1..0.3) * h.min(w) as f64;
            let steps = (len * 2.0).ceil() as usize;
            for _ in 0..steps {
                y += 0.5 * heading.sin();
                x += 0.5 * heading.cos();
                if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                for ch in 0..cfg.in_channels {
                    image[ch * h * w + idx] = HAIR_INTENSITY as f64;
                }
            }
        }
    }
}
