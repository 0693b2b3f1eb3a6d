use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default image side.
pub const IMAGE_SIDE: usize = 64;
/// Default training-set size. Below roughly 64 images the mini presets
/// memorize instead of generalizing.
pub const DEFAULT_TRAIN: usize = 96;
pub const DEFAULT_VAL: usize = 120;

/// Procedural shape drawn in a sample. The first three are the default task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Cross,
    Bar,
    Ring,
    Square,
}

impl Shape {
    pub const ALL: [Shape; 5] = [Shape::Disc, Shape::Cross, Shape::Bar, Shape::Ring, Shape::Square];
}

/// Images `[3, hw, hw]` stored contiguously, with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub hw: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.hw * self.hw
    }

    /// Stack the given samples into an NCHW batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if idx.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let il = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * il);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(&self.pixels[i * il..(i + 1) * il]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(alloc::vec![idx.len(), 3, self.hw, self.hw], data)?, labels))
    }

    /// Consecutive batches of at most `batch_size` in sample order.
    pub fn batches(&self, batch_size: usize) -> Result<Vec<(Tensor, Vec<usize>)>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

/// Seeded synthetic classification task: one shape per image at a random
/// position, size and colour over uniform noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub n_classes: usize,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
}

impl ToyTask {
    /// Default-sized task: 64x64 images, 96 train and 120 val samples.
    pub fn standard(seed: u64, n_classes: usize) -> Result<Self> {
        Self::generate(seed, n_classes, DEFAULT_TRAIN, DEFAULT_VAL, IMAGE_SIDE)
    }

    pub fn generate(seed: u64, n_classes: usize, n_train: usize, n_val: usize, hw: usize) -> Result<Self> {
        if !(2..=Shape::ALL.len()).contains(&n_classes) {
            return Err(Error::invalid(format!("toy task supports 2..=5 classes, got {n_classes}")));
        }
        if hw < 16 {
            return Err(Error::invalid(format!("image side {hw} is too small")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = make_split(&mut rng, n_classes, n_train, hw);
        let val = make_split(&mut rng, n_classes, n_val, hw);
        Ok(ToyTask {
            n_classes,
            seed,
            train,
            val,
        })
    }
}

fn make_split(rng: &mut ChaCha8Rng, k: usize, n: usize, hw: usize) -> Dataset {
    let mut pixels = Vec::with_capacity(n * 3 * hw * hw);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // round-robin labels keep classes balanced within one sample
        let label = i % k;
        labels.push(label);
        draw(rng, Shape::ALL[label], hw, &mut pixels);
    }
    Dataset { hw, pixels, labels }
}

fn draw(rng: &mut ChaCha8Rng, shape: Shape, hw: usize, out: &mut Vec<f32>) {
    let plane = hw * hw;
    let base = out.len();
    out.extend((0..3 * plane).map(|_| rng.gen_range(-0.15f32..0.15)));
    let f = hw as f32;
    let r = rng.gen_range(0.18 * f..0.26 * f);
    let cx = rng.gen_range(r..f - r);
    let cy = rng.gen_range(r..f - r);
    let thick = rng.gen_range(0.28f32..0.34) * r;
    let vertical = rng.gen_bool(0.5);
    let colour: [f32; 3] = core::array::from_fn(|_| rng.gen_range(0.6f32..1.0));
    for y in 0..hw {
        for x in 0..hw {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            let inside = match shape {
                Shape::Disc => d2 <= r * r,
                Shape::Cross => (dx.abs() <= thick && dy.abs() <= r) || (dy.abs() <= thick && dx.abs() <= r),
                Shape::Bar => {
                    if vertical {
                        dx.abs() <= thick && dy.abs() <= r
                    } else {
                        dy.abs() <= thick && dx.abs() <= r
                    }
                }
                Shape::Ring => d2 <= r * r && d2 >= (0.6 * r) * (0.6 * r),
                Shape::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            };
            if inside {
                for (c, col) in colour.iter().enumerate() {
                    out[base + c * plane + y * hw + x] = *col;
                }
            }
        }
    }
}
