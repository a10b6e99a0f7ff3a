//! Turning images into normalized input tensors.

use std::path::PathBuf;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{LabelTask, Manifest, SampleRecord};
use super::pipeline::load_rgb;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel mean and standard deviation of pixel values scaled to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for ChannelStats {
    /// Leaves values in [0, 1] unchanged.
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

const MIN_STD: f64 = 1e-6;

#[derive(Clone, Copy, Default)]
struct Moments {
    count: f64,
    sum: [f64; 3],
    sum_sq: [f64; 3],
}

impl Moments {
    fn of(img: &RgbImage) -> Self {
        let mut m = Moments::default();
        for p in img.pixels() {
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                m.sum[c] += v;
                m.sum_sq[c] += v * v;
            }
        }
        m.count = (img.width() * img.height()) as f64;
        m
    }

    fn merge(mut self, other: Moments) -> Self {
        self.count += other.count;
        for c in 0..3 {
            self.sum[c] += other.sum[c];
            self.sum_sq[c] += other.sum_sq[c];
        }
        self
    }
}

impl ChannelStats {
    /// Statistics over every pixel of every image. Images are decoded in
    /// parallel and reduced in input order.
    pub fn compute(paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Data("cannot compute normalization statistics of zero images".into()));
        }
        let moments: Vec<Moments> = paths
            .par_iter()
            .map(|p| load_rgb(p).map(|img| Moments::of(&img)))
            .collect::<Result<_>>()?;
        Ok(Self::from_moments(moments.into_iter().fold(Moments::default(), Moments::merge)))
    }

    pub fn of_images(images: &[RgbImage]) -> Self {
        Self::from_moments(images.iter().map(Moments::of).fold(Moments::default(), Moments::merge))
    }

    fn from_moments(m: Moments) -> Self {
        let mut mean = [0.0f32; 3];
        let mut std = [1.0f32; 3];
        for c in 0..3 {
            let mu = m.sum[c] / m.count;
            let var = (m.sum_sq[c] / m.count - mu * mu).max(0.0);
            mean[c] = mu as f32;
            std[c] = var.sqrt().max(MIN_STD) as f32;
        }
        Self { mean, std }
    }
}

/// `3 x H x W` tensor of `(pixel / 255 - mean) / std`.
pub fn image_to_tensor(img: &RgbImage, stats: &ChannelStats) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = (p[c] as f32 / 255.0 - stats.mean[c]) / stats.std[c];
        }
    }
    Tensor::new([3, h, w], data).expect("non-empty image")
}

/// Labelled examples addressed by index.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize;

    /// The input tensor, `C x H x W`.
    fn input(&self, index: usize) -> Result<Tensor<f32>>;

    /// Stacks the inputs at `indices` into an `N x C x H x W` batch, decoding in
    /// parallel but keeping the given order.
    fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let inputs: Vec<Tensor<f32>> = indices.par_iter().map(|&i| self.input(i)).collect::<Result<_>>()?;
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((Tensor::stack(&inputs)?, labels))
    }
}

/// Pre-built tensors, used by tests and synthetic runs.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    pub inputs: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn input(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.inputs[index].clone())
    }
}

/// Images listed in a manifest, decoded on demand.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub records: Vec<SampleRecord>,
    labels: Vec<usize>,
    size: (u32, u32),
    pub stats: ChannelStats,
}

impl ImageDataset {
    /// Every record of `manifest`. Images must already be `width x height`;
    /// use the patch stage to resize or crop them.
    pub fn new(manifest: &Manifest, task: LabelTask, size: (u32, u32), stats: ChannelStats) -> Result<Self> {
        let labels = manifest
            .records
            .iter()
            .map(|r| r.label_index(task, manifest.dataset()))
            .collect::<Result<_>>()?;
        Ok(Self {
            records: manifest.records.clone(),
            labels,
            size,
            stats,
        })
    }
}

impl Dataset for ImageDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    fn input(&self, index: usize) -> Result<Tensor<f32>> {
        let path = &self.records[index].path;
        let img = load_rgb(path)?;
        if img.dimensions() != self.size {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but the model expects {}x{}; run the patch stage first",
                path.display(),
                img.width(),
                img.height(),
                self.size.0,
                self.size.1
            )));
        }
        Ok(image_to_tensor(&img, &self.stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn stats_of_two_level_image() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { Rgb([0, 255, 51]) } else { Rgb([255, 255, 51]) });
        let s = ChannelStats::of_images(&[img.clone()]);
        assert!((s.mean[0] - 0.5).abs() < 1e-7 && (s.std[0] - 0.5).abs() < 1e-7);
        assert_eq!(s.std[1], MIN_STD as f32);
        let t = image_to_tensor(&img, &s);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data()[0..2], [-1.0, 1.0]);
        assert!(t.data()[2..].iter().all(|&v| v.abs() < 1e-6));
    }
}
