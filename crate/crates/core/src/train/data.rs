//! In-memory image datasets and the procedural local-texture task.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Images stored channel-major (`[N, C, S, S]`) as normalized `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub num_classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(channels: usize, size: usize, num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per = channels * size * size;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixel values cannot hold {} images of {channels}x{size}x{size}",
                images.len(),
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("label {l} at index {i} is outside [0, {num_classes})")));
        }
        Ok(Self {
            channels,
            size,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_numel();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into an image tensor `[B, C, S, S]` and label vector.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let n = self.image_numel();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new([indices.len(), self.channels, self.size, self.size], data)?;
        Ok((t, labels))
    }

    /// Splits off the last `n` samples.
    pub fn split_off(&mut self, n: usize) -> Dataset {
        let keep = self.len().saturating_sub(n);
        let px = self.images.split_off(keep * self.image_numel());
        let lb = self.labels.split_off(keep);
        Dataset {
            channels: self.channels,
            size: self.size,
            num_classes: self.num_classes,
            images: px,
            labels: lb,
        }
    }

    /// Applies `(v - mean[c]) / std[c]` per channel.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!(
                "normalization needs {} positive per-channel constants",
                self.channels
            )));
        }
        let plane = self.size * self.size;
        for (k, chunk) in self.images.chunks_exact_mut(plane).enumerate() {
            let c = k % self.channels;
            chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
        }
        Ok(())
    }
}

/// 3x3 texture motifs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motif {
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

impl Motif {
    fn mask(self) -> [[f32; 3]; 3] {
        match self {
            Motif::Horizontal => [[0., 0., 0.], [1., 1., 1.], [0., 0., 0.]],
            Motif::Vertical => [[0., 1., 0.], [0., 1., 0.], [0., 1., 0.]],
            Motif::Diagonal => [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]],
            Motif::AntiDiagonal => [[0., 0., 1.], [0., 1., 0.], [1., 0., 0.]],
        }
    }
}

/// Generator for the local-texture task.
///
/// A class is a pair (intensity band, motif): the band sets the background
/// mean, the motif is a 3x3 oriented stroke pasted at random positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    /// Motifs cycled through by class index; at least two.
    pub motifs: Vec<Motif>,
    /// Copies of the motif per image.
    pub motif_copies: usize,
    /// Side of the square block each motif cell becomes; 1 keeps strokes
    /// inside a patch, the patch size makes orientation visible only across tokens.
    pub motif_scale: usize,
    pub motif_contrast: f32,
    pub pixel_noise: f32,
}

pub const SYNTH_SIZE: usize = 32;
pub const SYNTH_CHANNELS: usize = 3;

impl SynthSpec {
    /// Target task: diagonal strokes.
    pub fn target(classes: usize) -> Self {
        Self {
            size: SYNTH_SIZE,
            channels: SYNTH_CHANNELS,
            classes,
            motifs: vec![Motif::Diagonal, Motif::AntiDiagonal],
            motif_copies: 3,
            motif_scale: 1,
            motif_contrast: 0.8,
            pixel_noise: 0.08,
        }
    }

    /// Source task for pretraining: same bands, axis-aligned strokes.
    pub fn source(classes: usize) -> Self {
        Self {
            motifs: vec![Motif::Horizontal, Motif::Vertical],
            ..Self::target(classes)
        }
    }

    fn bands(&self) -> usize {
        self.classes.div_ceil(self.motifs.len())
    }

    /// `(band, motif)` of class `c`.
    pub fn class_parts(&self, c: usize) -> (usize, Motif) {
        let k = self.motifs.len();
        (c / k, self.motifs[c % k])
    }

    /// Deterministic dataset of `n` images in `[0, 1]`; label of sample `i` is `i % classes`.
    pub fn generate(&self, seed: u64, n: usize) -> Result<Dataset> {
        if self.classes < 2 || self.motifs.len() < 2 {
            return Err(Error::Config("synthetic task needs at least two classes and two motifs".into()));
        }
        let span = 3 * self.motif_scale;
        if self.motif_scale == 0 || self.size < span || self.channels == 0 {
            return Err(Error::Config("synthetic images must fit one scaled motif and have a channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, self.pixel_noise).map_err(|e| Error::Config(format!("{e}")))?;
        let (s, c) = (self.size, self.channels);
        let bands = self.bands() as f32;
        let mut images = Vec::with_capacity(n * c * s * s);
        let mut labels = Vec::with_capacity(n);
        let mut gray = vec![0f32; s * s];
        for i in 0..n {
            let label = i % self.classes;
            let (band, motif) = self.class_parts(label);
            // Bands split [0.2, 0.8]; the inner 60% of each band is used so neighbours stay separated.
            let width = 0.6 / bands;
            let level = 0.2 + width * (band as f32 + rng.random_range(0.2f32..0.8));
            gray.iter_mut().for_each(|g| *g = level + noise.sample(&mut rng));
            let polarity = if level > 0.5 { -1.0 } else { 1.0 };
            let mask = motif.mask();
            for _ in 0..self.motif_copies {
                let y = rng.random_range(0..=s - span);
                let x = rng.random_range(0..=s - span);
                for dy in 0..span {
                    for dx in 0..span {
                        let m = mask[dy / self.motif_scale][dx / self.motif_scale];
                        gray[(y + dy) * s + x + dx] += polarity * self.motif_contrast * m;
                    }
                }
            }
            for _ in 0..c {
                let z: f32 = StandardNormal.sample(&mut rng);
                let tint = 0.02 * z;
                images.extend(gray.iter().map(|&g| (g + tint).clamp(0.0, 1.0)));
            }
            labels.push(label);
        }
        Dataset::new(c, s, self.classes, images, labels)
    }
}

/// Target-task dataset with the default generator, normalized to roughly zero mean, unit scale.
pub fn synth_dataset(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    let mut ds = SynthSpec::target(classes).generate(seed, n)?;
    ds.normalize(&[0.5; SYNTH_CHANNELS], &[0.25; SYNTH_CHANNELS])?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_from_seed() {
        assert_eq!(synth_dataset(3, 20, 4).unwrap(), synth_dataset(3, 20, 4).unwrap());
        assert_ne!(synth_dataset(3, 20, 4).unwrap(), synth_dataset(4, 20, 4).unwrap());
    }

    #[test]
    fn balanced_labels() {
        let ds = synth_dataset(1, 40, 4).unwrap();
        let mut hist = [0usize; 4];
        ds.labels().iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [10; 4]);
    }

    #[test]
    fn rejects_degenerate_task() {
        assert!(synth_dataset(1, 4, 1).is_err());
    }

    #[test]
    fn bands_order_mean_intensity() {
        let spec = SynthSpec::target(4);
        let ds = spec.generate(9, 200).unwrap();
        let mean = |label: usize| {
            let imgs: Vec<f32> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == label)
                .flat_map(|i| ds.image(i).to_vec())
                .collect();
            imgs.iter().sum::<f32>() / imgs.len() as f32
        };
        assert!(mean(0) < mean(2));
        assert!(mean(1) < mean(3));
    }

    #[test]
    fn scaled_motif_is_blockwise() {
        let spec = SynthSpec {
            size: 12,
            channels: 1,
            motif_copies: 1,
            motif_scale: 4,
            pixel_noise: 1e-6,
            ..SynthSpec::target(2)
        };
        // A 12x12 image fits the 12x12 motif only at the origin.
        let ds = spec.generate(5, 2).unwrap();
        for i in 0..2 {
            let img = ds.image(i);
            let mask = spec.class_parts(i).1.mask();
            for y in 0..12 {
                for x in 0..12 {
                    let on = mask[y / 4][x / 4] > 0.0;
                    let dev = (img[y * 12 + x] - img[4]).abs();
                    assert_eq!(on, dev > 0.4, "pixel ({y},{x}) of sample {i}");
                }
            }
        }
        assert!(SynthSpec { motif_scale: 5, ..spec.clone() }.generate(0, 1).is_err());
    }

    #[test]
    fn batch_and_split() {
        let mut ds = synth_dataset(2, 10, 2).unwrap();
        let held = ds.split_off(4);
        assert_eq!((ds.len(), held.len()), (6, 4));
        let (x, y) = ds.batch::<f32>(&[0, 5]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 32, 32]);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        assert!(Dataset::new(1, 2, 2, vec![0.0; 4], vec![2]).is_err());
        assert!(Dataset::new(1, 2, 2, vec![0.0; 3], vec![0]).is_err());
    }
}
