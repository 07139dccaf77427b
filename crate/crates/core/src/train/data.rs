//! Procedural dataset: one colored geometric shape per image, drawn over
//! a noise background. Samples are generated on demand from a per-index
//! seed, so a dataset is a recipe (seed, split, length, resolution), not
//! a buffer, and the train/validation streams never overlap.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::model::{fnv1a64, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn tag(self) -> &'static [u8] {
        match self {
            Split::Train => b"toy-train",
            Split::Val => b"toy-val",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub seed: u64,
    pub split: Split,
    pub len: usize,
    pub resolution: usize,
    /// Peak amplitude of the uniform background noise. Kept small by
    /// default: the background is incompressible, so its response
    /// dominates the distillation targets if it rivals the shape
    /// contrast, drowning the structure a narrow bottleneck can carry.
    pub noise: f64,
}

/// Default image side used by the desk-scale experiments.
pub const DEFAULT_RESOLUTION: usize = 64;
pub const DEFAULT_NOISE: f64 = 0.05;

impl ToyDataset {
    pub fn new(seed: u64, split: Split, len: usize, resolution: usize) -> Self {
        ToyDataset { seed, split, len, resolution, noise: DEFAULT_NOISE }
    }

    pub fn train(seed: u64, len: usize) -> Self {
        Self::new(seed, Split::Train, len, DEFAULT_RESOLUTION)
    }

    pub fn val(seed: u64, len: usize) -> Self {
        Self::new(seed, Split::Val, len, DEFAULT_RESOLUTION)
    }

    /// Image (3, res, res) in [0, 1] plus its class label. Classes cycle
    /// through the index so every contiguous batch is balanced.
    pub fn sample<T: Scalar>(&self, index: usize) -> (Tensor<T>, usize) {
        assert!(index < self.len, "index {index} out of range {}", self.len);
        let class = index % NUM_CLASSES;
        let mut rng = ChaCha8Rng::seed_from_u64(
            fnv1a64(self.split.tag())
                ^ self.seed
                ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let res = self.resolution;
        let mut data = vec![T::zero(); 3 * res * res];

        // noise background
        for v in data.iter_mut() {
            *v = T::from_f64(rng.random_range(0.0..self.noise));
        }

        // one solid bright shape
        let color: [f64; 3] = [
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
        ];
        let lo = res as f64 * 0.3;
        let hi = res as f64 * 0.7;
        let cx = rng.random_range(lo..hi);
        let cy = rng.random_range(lo..hi);
        let r = rng.random_range(res as f64 * 0.12..res as f64 * 0.25);

        for y in 0..res {
            for x in 0..res {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let inside = match class {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r && dy.abs() <= r,
                    2 => dx.abs() + dy.abs() <= r,
                    _ => (dx.abs() <= r / 3.0 && dy.abs() <= r)
                        || (dx.abs() <= r && dy.abs() <= r / 3.0),
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        data[c * res * res + y * res + x] = T::from_f64(col);
                    }
                }
            }
        }

        let image = Tensor::new(vec![3, res, res], data).expect("shape matches buffer");
        (image, class)
    }

    /// A contiguous batch of samples.
    pub fn batch<T: Scalar>(&self, start: usize, count: usize) -> Vec<(Tensor<T>, usize)> {
        (start..start + count).map(|i| self.sample(i)).collect()
    }
}
