//! In-memory labelled image sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Images stored channel-first as `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one image.
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], num_classes: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} pixels for {} images of shape {:?}",
                pixels.len(),
                labels.len(),
                image_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset { image_shape, num_classes, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` as `[C, H, W]`.
    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.pixels(i).iter().map(|&v| T::of(v as f64)).collect();
        Tensor::new(self.image_shape.to_vec(), data).unwrap()
    }

    /// Images at `idx` stacked as `[N, C, H, W]`, with their labels.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.pixels(i).iter().map(|&v| T::of(v as f64)));
        }
        let [c, h, w] = self.image_shape;
        let x = Tensor::new(vec![idx.len(), c, h, w], data).unwrap();
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            pixels.extend_from_slice(self.pixels(i));
        }
        Dataset {
            image_shape: self.image_shape,
            num_classes: self.num_classes,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Train and test split of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-channel affine map between pixel values and standardized
/// coordinates, `x = mean + std * z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelNorm {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::InvalidInput("mean and std need the same non-zero length".into()));
        }
        if std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("std must be positive and finite".into()));
        }
        Ok(ChannelNorm { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Full-size scale and shift tensors for a `[C, H, W]` or `[N, C, H, W]`
    /// shape.
    pub fn expand<T: Real>(&self, shape: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let c = match shape.len() {
            3 => shape[0],
            4 => shape[1],
            _ => return Err(Error::InvalidInput(format!("cannot normalize shape {shape:?}"))),
        };
        if c != self.channels() {
            return Err(Error::InvalidInput(format!(
                "{} normalization channels for {c} image channels",
                self.channels()
            )));
        }
        let plane: usize = shape[shape.len() - 2..].iter().product();
        let n = crate::tensor::numel(shape);
        let mut s = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        for i in 0..n {
            let ch = (i / plane) % c;
            s.push(T::of(self.std[ch]));
            m.push(T::of(self.mean[ch]));
        }
        Ok((Tensor::new(shape.to_vec(), s)?, Tensor::new(shape.to_vec(), m)?))
    }

    pub fn to_pixels<T: Real>(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, m) = self.expand::<T>(z.shape())?;
        let data = z.data().iter().zip(s.data()).zip(m.data()).map(|((&z, &s), &m)| m + s * z).collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    pub fn from_pixels<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, m) = self.expand::<T>(x.shape())?;
        let data = x.data().iter().zip(s.data()).zip(m.data()).map(|((&x, &s), &m)| (x - m) / s).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

impl Dataset {
    /// Per-channel pixel mean and population standard deviation.
    pub fn channel_norm(&self) -> Result<ChannelNorm> {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.pixels.chunks_exact(c * plane) {
            for (ch, p) in img.chunks_exact(plane).enumerate() {
                for &v in p {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (self.len() * plane) as f64;
        if count == 0.0 {
            return Err(Error::InvalidInput("empty dataset has no statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-6)).collect();
        ChannelNorm::new(mean, std)
    }
}
