//! Labeled image datasets: IDX ingestion, a synthetic class-template generator,
//! and byte/float pixel conversion.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte IDX with four dimensions `(n, c, h, w)`, used for multi-channel exports.
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images stored as bytes, `N × C × H × W`, with integer labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    images: Vec<u8>,
    image_shape: (usize, usize, usize),
    labels: Vec<u8>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<u8>, image_shape: (usize, usize, usize), labels: Vec<u8>, classes: usize) -> Result<Self> {
        let (c, h, w) = image_shape;
        let per = c * h * w;
        if per == 0 || labels.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one non-empty image".into()));
        }
        if images.len() != per * labels.len() {
            return Err(Error::CountMismatch { images: images.len() / per, labels: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
        }
        Ok(LabeledDataset { images, image_shape, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn pixels_per_image(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self) -> &[u8] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    /// Indices of every sample of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y as usize].push(i);
        }
        out
    }

    /// Normalized `[k, C, H, W]` tensor of the selected samples.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::EmptySet);
        }
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&b| normalize_byte(b)));
        }
        let (c, h, w) = self.image_shape;
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    /// Normalized tensor of the whole dataset and its labels.
    pub fn to_tensor(&self) -> Result<(Tensor, Vec<usize>)> {
        let idx: Vec<usize> = (0..self.len()).collect();
        Ok((self.batch(&idx)?, self.labels.iter().map(|&y| y as usize).collect()))
    }

    /// IDX image file bytes (3-D for one channel, 4-D otherwise).
    pub fn idx_image_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.image_shape;
        let mut out = Vec::with_capacity(self.images.len() + 20);
        if c == 1 {
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [self.len(), h, w] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
        } else {
            out.extend_from_slice(&IDX_IMAGES4_MAGIC.to_be_bytes());
            for d in [self.len(), c, h, w] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
        }
        out.extend_from_slice(&self.images);
        out
    }

    pub fn idx_label_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() + 8);
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn write_idx(&self, image_path: &Path, label_path: &Path) -> Result<()> {
        std::fs::write(image_path, self.idx_image_bytes())?;
        std::fs::write(label_path, self.idx_label_bytes())?;
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { needed: at + 4, found: bytes.len() })
}

/// Parses IDX image bytes into `(n, (c, h, w), pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, (usize, usize, usize), Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    let (n, shape, header) = match magic {
        IDX_IMAGES_MAGIC => {
            let n = be_u32(bytes, 4)? as usize;
            (n, (1, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize), 16)
        }
        IDX_IMAGES4_MAGIC => {
            let n = be_u32(bytes, 4)? as usize;
            let c = be_u32(bytes, 8)? as usize;
            (n, (c, be_u32(bytes, 12)? as usize, be_u32(bytes, 16)? as usize), 20)
        }
        found => return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, found }),
    };
    let needed = header + n * shape.0 * shape.1 * shape.2;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    Ok((n, shape, bytes[header..needed].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)? as usize;
    let needed = 8 + n;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Builds a dataset from IDX image and label bytes; the class count is `max label + 1`.
pub fn dataset_from_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<LabeledDataset> {
    let (n, shape, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if n != labels.len() {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    let classes = labels.iter().copied().max().map_or(1, |m| m as usize + 1);
    LabeledDataset::new(pixels, shape, labels, classes)
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(image_path)?;
    let labels = std::fs::read(label_path)?;
    dataset_from_idx(&images, &labels)
}

/// Plane-wave stripe template of class `c` for `side × side` single-channel images:
/// stripes with period 4 pixels at orientation `π·c/classes`, in `[0.15, 0.85]`.
pub fn blob_template(class: usize, classes: usize, side: usize) -> Vec<f32> {
    let theta = std::f32::consts::PI * class as f32 / classes.max(1) as f32;
    let (s, c) = theta.sin_cos();
    let k = std::f32::consts::TAU / 4.0;
    (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f32, (i % side) as f32);
            0.5 + 0.35 * (k * (x * c + y * s)).cos()
        })
        .collect()
}

/// `classes × per_class` single-channel images: class template plus Gaussian pixel
/// noise of standard deviation `noise_sigma`, clamped to `[0, 1]` and quantized.
/// Templates depend only on `(class, classes, side)`; `seed` drives the noise.
pub fn synth_blobs(classes: usize, per_class: usize, side: usize, noise_sigma: f32, seed: u64) -> Result<LabeledDataset> {
    if classes < 2 || per_class == 0 || side < 2 || classes > 256 {
        return Err(Error::InvalidArgument(format!(
            "synth_blobs needs classes in 2..=256, per_class >= 1, side >= 2 (got {classes}, {per_class}, {side})"
        )));
    }
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut noise = rng::stream(seed, &[0x5EED_B10B]);
    let mut images = Vec::with_capacity(classes * per_class * side * side);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let template = blob_template(c, classes, side);
        for _ in 0..per_class {
            for &t in &template {
                let z: f32 = StandardNormal.sample(&mut noise);
                images.push(quantize(t + noise_sigma * z));
            }
            labels.push(c as u8);
        }
    }
    LabeledDataset::new(images, (1, side, side), labels, classes)
}

/// Train and test blob sets sharing templates, with independent noise streams.
pub fn synth_split(
    classes: usize,
    per_class: usize,
    test_per_class: usize,
    side: usize,
    noise_sigma: f32,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = synth_blobs(classes, per_class, side, noise_sigma, seed)?;
    let test = synth_blobs(classes, test_per_class, side, noise_sigma, rng::derive_seed(seed, &[0x7E57]))?;
    Ok((train, test))
}

/// Byte to `[0, 1]`.
pub fn normalize_byte(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn normalize(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| normalize_byte(b)).collect()
}

/// Inverse of [`normalize_byte`]: clamps to `[0, 1]` and rounds to the nearest byte.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
