//! Image datasets: the synthetic blob generator and IDX file I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Grayscale images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, H, W]`.
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 3 || s[0] != labels.len() {
            return Err(Error::shape("dataset", s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        let imgs: Vec<Tensor<f64>> = idx.iter().map(|&i| self.images.slice0(i)).collect();
        let images = Tensor::stack(&imgs).expect("equal image shapes");
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Fails with [`Error::EmptyClass`] unless every class has a sample.
    pub fn check_classes(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }
}

/// Class templates are Gaussian blobs spaced evenly on a circle around the
/// image centre; samples add pixel noise and are quantised to bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl BlobConfig {
    pub fn toy(seed: u64) -> Self {
        BlobConfig {
            height: 16,
            width: 16,
            classes: 3,
            sigma: 0.1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("blob data needs at least two classes"));
        }
        if self.height == 0 || self.width == 0 || !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("blob data needs positive size and finite sigma >= 0"));
        }
        Ok(())
    }

    /// Noise-free templates `[classes, H, W]`.
    pub fn templates(&self) -> Result<Tensor<f64>> {
        self.validate()?;
        let (h, w) = (self.height as f64, self.width as f64);
        let radius = 0.25 * h.min(w);
        let spread = h.min(w) / 8.0;
        let mut out = Vec::with_capacity(self.classes * self.height * self.width);
        for c in 0..self.classes {
            let angle = 2.0 * PI * c as f64 / self.classes as f64 + PI / 4.0;
            let cy = (h - 1.0) / 2.0 - radius * angle.sin();
            let cx = (w - 1.0) / 2.0 + radius * angle.cos();
            for y in 0..self.height {
                for x in 0..self.width {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    out.push((-d2 / (2.0 * spread * spread)).exp());
                }
            }
        }
        Tensor::new(&[self.classes, self.height, self.width], out)
    }

    /// `per_class` samples of every class in shuffled order. Distinct
    /// `stream`s give independent splits from one seed.
    pub fn generate(&self, per_class: usize, stream: u64) -> Result<Dataset> {
        let templates = self.templates()?;
        let mut rng = Rng::with_stream(self.seed, stream);
        let n = per_class * self.classes;
        let order = rng.permutation(n);
        let pix = self.height * self.width;
        let mut data = Vec::with_capacity(n * pix);
        let mut labels = Vec::with_capacity(n);
        for &k in &order {
            let y = k % self.classes;
            labels.push(y);
            for &t in &templates.data()[y * pix..(y + 1) * pix] {
                data.push(quantise(t + self.sigma * rng.normal()));
            }
        }
        Dataset::new(Tensor::new(&[n, self.height, self.width], data)?, labels, self.classes)
    }
}

fn quantise(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_idx_images(images: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 3 {
        return Err(Error::shape("idx images", s, &[]));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for &dim in s {
        out.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::invalid(format!("label {y} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let word = |i: usize| -> Result<u32> {
        let b = bytes.get(4 * i..4 * i + 4).ok_or(Error::IdxTruncated)?;
        Ok(u32::from_be_bytes(b.try_into().expect("four bytes")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::IdxMagic { found, expected: magic });
    }
    (1..=dims).map(|i| word(i).map(|v| v as usize)).collect()
}

/// `[n, rows, cols]` scaled to `[0, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor<f64>> {
    let dims = header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let len: usize = dims.iter().product();
    let body = bytes.get(16..16 + len).ok_or(Error::IdxTruncated)?;
    Tensor::new(&dims, body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let n = header(bytes, IDX_LABELS_MAGIC, 1)?[0];
    let body = bytes.get(8..8 + n).ok_or(Error::IdxTruncated)?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Writes `data` as an image file and a label file.
pub fn write_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    fs::write(images, encode_idx_images(&data.images)?)?;
    fs::write(labels, encode_idx_labels(&data.labels)?)?;
    Ok(())
}

/// Reads an image/label file pair. The class count is one past the largest
/// label unless `classes` is given.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let imgs = decode_idx_images(&fs::read(images)?)?;
    let labels = decode_idx_labels(&fs::read(labels)?)?;
    if imgs.shape()[0] != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: imgs.shape()[0],
            labels: labels.len(),
        });
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(imgs, labels, classes)
}
