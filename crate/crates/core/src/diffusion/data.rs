//! Synthetic class-conditioned image sets.

use serde::{Deserialize, Serialize};

use crate::numerics::{Result, Rng, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// One geometric shape per class at a jittered position and size.
    Shapes,
    /// One Gaussian blob per class, centered on a class-specific point.
    Gaussians,
}

impl std::str::FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shapes" => Ok(DatasetKind::Shapes),
            "gaussians" => Ok(DatasetKind::Gaussians),
            other => Err(format!("unknown dataset kind {other:?} (expected shapes or gaussians)")),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Shapes => "shapes",
            DatasetKind::Gaussians => "gaussians",
        })
    }
}

pub const MAX_SHAPE_CLASSES: usize = 8;

/// Images stored row-major as `[count, channels, height, width]`, pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Per-class mean image, `classes` rows of `image_len`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let n = self.image_len();
        let mut sums = vec![vec![0.0; n]; self.classes];
        let mut counts = vec![0usize; self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(self.image(i)) {
                *s += v;
            }
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
        }
        sums
    }
}

/// Builds `count` images with labels cycling through `0..classes`. Image `i`
/// depends only on `(kind, seed, i)`.
pub fn make_dataset(
    kind: DatasetKind,
    count: usize,
    classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<ToyDataset> {
    if classes < 2 {
        return Err(TensorError::Config(format!("need at least 2 classes, got {classes}")));
    }
    if kind == DatasetKind::Shapes && classes > MAX_SHAPE_CLASSES {
        return Err(TensorError::Config(format!("shapes supports at most {MAX_SHAPE_CLASSES} classes")));
    }
    if channels == 0 || height < 8 || width < 8 {
        return Err(TensorError::Config(format!("invalid image dims {channels}x{height}x{width} (min 1x8x8)")));
    }
    let root = Rng::new(seed);
    let plane = height * width;
    let mut images = Vec::with_capacity(count * channels * plane);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % classes;
        let mut rng = root.derive(i as u64);
        let img = match kind {
            DatasetKind::Shapes => shape_image(label, height, width, &mut rng),
            DatasetKind::Gaussians => gaussian_image(label, classes, height, width, &mut rng),
        };
        for _ in 0..channels {
            images.extend_from_slice(&img);
        }
        labels.push(label);
    }
    Ok(ToyDataset { images, labels, classes, channels, height, width })
}

fn jitter(rng: &mut Rng, amount: f64) -> f64 {
    (rng.uniform() * 2.0 - 1.0) * amount
}

fn shape_image(label: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let size = h.min(w) as f64;
    let cy = (h as f64 - 1.0) / 2.0 + jitter(rng, size / 8.0);
    let cx = (w as f64 - 1.0) / 2.0 + jitter(rng, size / 8.0);
    let r = size * (0.25 + 0.1 * rng.uniform());
    let mut img = vec![-1.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let inside = match label {
                0 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                1 => {
                    let d = (dx * dx + dy * dy).sqrt();
                    d <= r && d >= r - 1.6
                }
                2 => (dx.abs() <= 1.0 && dy.abs() <= r) || (dy.abs() <= 1.0 && dx.abs() <= r),
                3 => dx.abs() <= r && dy.abs() <= r && (y % 4) < 2,
                4 => dx.abs() <= r && ((dx - dy).abs() <= 1.0 || (dx + dy).abs() <= 1.0),
                5 => dx.abs() <= r && dy.abs() <= r && (x % 4) < 2,
                6 => dx * dx + dy * dy <= r * r * 0.6,
                _ => dy <= r * 0.7 && dy >= -r * 0.7 && dx.abs() <= (dy + r * 0.7) * 0.6,
            };
            if inside {
                img[y * w + x] = 1.0;
            }
        }
    }
    img
}

fn gaussian_image(label: usize, classes: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
    let size = h.min(w) as f64;
    let angle = 2.0 * std::f64::consts::PI * label as f64 / classes as f64;
    let cy = (h as f64 - 1.0) / 2.0 + 0.3 * size * angle.sin() + jitter(rng, 1.0);
    let cx = (w as f64 - 1.0) / 2.0 + 0.3 * size * angle.cos() + jitter(rng, 1.0);
    let sigma = 0.15 * size;
    let mut img = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            img.push(2.0 * (-d2 / (2.0 * sigma * sigma)).exp() - 1.0);
        }
    }
    img
}

/// Rearranges images `[B, C, H, W]` into patch rows `[B, (H/p)(W/p), p·p·C]`,
/// patches in raster order and each patch channel-last.
pub fn patchify(images: &[f64], batch: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(images.len());
    for b in 0..batch {
        let img = &images[b * c * h * w..(b + 1) * c * h * w];
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            out.push(img[ch * h * w + (py * p + y) * w + px * p + x]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f64], batch: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (gh, gw) = (h / p, w / p);
    let mut out = vec![0.0; patches.len()];
    let mut i = 0;
    for b in 0..batch {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..c {
                            out[b * c * h * w + ch * h * w + (py * p + y) * w + px * p + x] = patches[i];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    out
}
