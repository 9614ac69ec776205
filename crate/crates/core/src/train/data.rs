//! Datasets, augmentation and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3074;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 100;
pub const SHAPES: usize = 4;
pub const COLORS: usize = 6;

/// Images `[n×H×W×3]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_len();
        &self.images[i * s..(i + 1) * s]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            height: self.height,
            width: self.width,
            classes: self.classes,
        }
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// Parse CIFAR-100 binary records: coarse label, fine label, then the R, G
/// and B planes of a 32×32 image. The fine label is kept.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * plane * 3);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r} has fine label {fine}")));
        }
        labels.push(fine);
        let px = &rec[2..];
        for i in 0..plane {
            for c in 0..3 {
                images.push(px[c * plane + i] as f32 / 255.0);
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        classes: CIFAR_CLASSES,
    })
}

/// Load `train.bin` or `test.bin` from a CIFAR-100 binary directory.
pub fn load_cifar100(dir: &Path, train: bool) -> Result<Dataset> {
    let path = dir.join(if train { "train.bin" } else { "test.bin" });
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    parse_cifar100(&bytes)
}

const SHAPE_COLORS: [[f32; 3]; COLORS] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
];

fn inside(shape: usize, dy: f32, dx: f32, r: f32) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
        2 => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.55,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

/// Shape and color of a synthetic class.
pub fn synth_class(c: usize) -> (usize, usize) {
    (c % SHAPES, (c + c / SHAPES) % COLORS)
}

/// One colored shape per image on a striped, noisy background. Class `c`
/// draws shape `c mod 4` in color `(c + c/4) mod 6`; labels cycle through the
/// classes before shuffling, so the histogram is uniform within one.
pub fn synth_dataset(classes: usize, size: usize, n: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPES * COLORS).contains(&classes) {
        return Err(Error::config(
            "synth_classes",
            format!("must lie in 2..={}", SHAPES * COLORS),
        ));
    }
    if size < 8 {
        return Err(Error::config("input_size", "synthetic images need at least 8 pixels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let s = size as f32;
    let mut images = Vec::with_capacity(n * size * size * 3);
    for &label in &labels {
        let (shape, color) = synth_class(label);
        let base: f32 = rng.gen_range(0.25..0.55);
        let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        let freq: f32 = rng.gen_range(0.3..1.2);
        let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let r = rng.gen_range(0.2 * s..0.32 * s);
        let cy = rng.gen_range(r..s - r);
        let cx = rng.gen_range(r..s - r);
        let col = SHAPE_COLORS[color];
        let shade: f32 = rng.gen_range(0.85..1.0);
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                let hit = inside(shape, fy - cy, fx - cx, r);
                let stripe = 0.08 * (freq * (fx * ca + fy * sa) + phase).sin();
                for c in 0..3 {
                    let noise: f32 = rng.gen_range(-0.06..0.06);
                    let v = if hit {
                        col[c] * shade + noise * 0.5
                    } else {
                        base + tint[c] + stripe + noise
                    };
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        height: size,
        width: size,
        classes,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalizer {
    pub fn fit(data: &Dataset) -> Self {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for px in data.images.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
        }
        let n = (data.images.len() / 3).max(1) as f64;
        let mut out = Normalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        for c in 0..3 {
            let m = sum[c] / n;
            out.mean[c] = m as f32;
            out.std[c] = ((sq[c] / n - m * m).max(0.0).sqrt()).max(1e-3) as f32;
        }
        out
    }

    pub fn apply(&self, img: &mut [f32]) {
        for px in img.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - self.mean[c]) / self.std[c];
            }
        }
    }
}

pub fn flip_horizontal(img: &mut [f32], height: usize, width: usize) {
    for row in img.chunks_exact_mut(width * 3).take(height) {
        for x in 0..width / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (width - 1 - x) * 3 + c);
            }
        }
    }
}

/// Gather samples into a standardized batch. With `flip_rng`, each sample
/// is mirrored with probability one half.
pub fn make_batch(
    data: &Dataset,
    indices: &[usize],
    norm: &Normalizer,
    flip_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut images = Vec::with_capacity(indices.len() * data.image_len());
    for &i in indices {
        images.extend_from_slice(data.image(i));
    }
    augment(&mut images, data.height, data.width, norm, flip_rng);
    let t = Tensor::from_vec(&[indices.len(), data.height, data.width, 3], images)?;
    Ok((t, indices.iter().map(|&i| data.labels[i]).collect()))
}

/// Optional random flip, then channel standardization, in place.
pub fn augment(images: &mut [f32], height: usize, width: usize, norm: &Normalizer, flip_rng: Option<&mut ChaCha8Rng>) {
    let s = height * width * 3;
    if let Some(rng) = flip_rng {
        for img in images.chunks_exact_mut(s) {
            if rng.gen_bool(0.5) {
                flip_horizontal(img, height, width);
            }
        }
    }
    norm.apply(images);
}

fn mix(seed: u64, epoch: u64, stream: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Sample order of one epoch; a permutation determined by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 1)));
    order
}

/// Augmentation randomness of one epoch.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synth_dataset(3, 16, 50, 7).unwrap();
        assert_eq!(a, synth_dataset(3, 16, 50, 7).unwrap());
        let h = a.histogram();
        assert!(h.iter().max().unwrap() - h.iter().min().unwrap() <= 1);
        let b = synth_dataset(3, 16, 50, 8).unwrap();
        let sum = |d: &Dataset| d.images.iter().map(|&v| v as f64).sum::<f64>();
        assert_ne!(sum(&a), sum(&b));
        assert!(synth_dataset(1, 16, 5, 0).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[1] = 42;
        bytes[2] = 255;
        bytes[CIFAR_RECORD + 1] = 99;
        let d = parse_cifar100(&bytes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![42, 99]);
        assert_eq!(d.images[0], 1.0);
        assert_eq!(d.images[1], 0.0);
        assert!(parse_cifar100(&bytes[1..]).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let d = synth_dataset(2, 8, 1, 3).unwrap();
        let mut img = d.image(0).to_vec();
        flip_horizontal(&mut img, 8, 8);
        assert_ne!(img, d.image(0));
        flip_horizontal(&mut img, 8, 8);
        assert_eq!(img, d.image(0));
    }

    #[test]
    fn standardizing_constant_image() {
        let norm = Normalizer {
            mean: [0.5; 3],
            std: [0.2; 3],
        };
        let mut img = vec![0.5f32; 12];
        augment(&mut img, 2, 2, &norm, None);
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(100, 1, 3);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(100, 1, 3));
        assert_ne!(a, epoch_order(100, 1, 4));
    }
}
