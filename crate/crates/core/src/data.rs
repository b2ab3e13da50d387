//! Synthetic single-object scenes.
//!
//! Each 32x32 RGB image holds one filled square or one ring in a warm or cool color
//! (four classes) on a noisy gray background. Both shapes span about 8 pixels and are
//! rendered with 4x4 supersampling, so the sub-pixel center is visible in the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::par::{map_indexed, Execution};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 4;
/// Centers are drawn uniformly from `[CENTER_MIN, CENTER_MAX]` in normalized coordinates.
pub const CENTER_MIN: f64 = 0.15;
pub const CENTER_MAX: f64 = 0.85;
pub const NOISE_STD: f64 = 0.05;
/// Square area in pixels; the ring's outer disc has the same area.
pub const OBJECT_AREA: f64 = 64.0;
/// Ring inner radius as a fraction of the outer one.
pub const RING_HOLE: f64 = 0.5;
/// Input channels seen by the model: RGB plus the two coordinate planes.
pub const INPUT_CHANNELS: usize = 5;

const SUPERSAMPLE: usize = 4;
const WARM: [f64; 3] = [0.9, 0.4, 0.15];
const COOL: [f64; 3] = [0.15, 0.45, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectShape {
    Square,
    Ring,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor,
    pub class_label: usize,
    /// Normalized `(cx, cy)`; `cx` runs along the width.
    pub center: (f64, f64),
}

impl SyntheticScene {
    pub fn shape(&self) -> ObjectShape {
        if self.class_label.is_multiple_of(2) {
            ObjectShape::Square
        } else {
            ObjectShape::Ring
        }
    }
}

fn coverage(shape: ObjectShape, cx: f64, cy: f64, px: usize, py: usize) -> f64 {
    let half = OBJECT_AREA.sqrt() / 2.0;
    let r2 = OBJECT_AREA / std::f64::consts::PI;
    let mut hits = 0;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
            let (dx, dy) = (x - cx, y - cy);
            let inside = match shape {
                ObjectShape::Square => dx.abs() < half && dy.abs() < half,
                ObjectShape::Ring => (RING_HOLE * RING_HOLE * r2..r2).contains(&(dx * dx + dy * dy)),
            };
            hits += inside as usize;
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

/// Render scene `index` of the stream identified by `seed`. Pure in `(seed, index)`.
pub fn generate_scene(seed: u64, index: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let class_label = rng.random_range(0..NUM_CLASSES);
    let shape = if class_label % 2 == 0 {
        ObjectShape::Square
    } else {
        ObjectShape::Ring
    };
    let base = if class_label < 2 { WARM } else { COOL };
    let color: Vec<f64> = base.iter().map(|c| c + rng.random_range(-0.08..0.08)).collect();
    let background = rng.random_range(0.3..0.5);
    let brightness = rng.random_range(0.85..1.15);
    let center = (
        rng.random_range(CENTER_MIN..=CENTER_MAX),
        rng.random_range(CENTER_MIN..=CENTER_MAX),
    );
    let (cx, cy) = (center.0 * IMAGE_SIZE as f64, center.1 * IMAGE_SIZE as f64);

    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; 3 * plane];
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let cov = coverage(shape, cx, cy, px, py);
            for (c, &col) in color.iter().enumerate() {
                let v = (cov * col + (1.0 - cov) * background) * brightness + noise.sample(&mut rng);
                data[c * plane + py * IMAGE_SIZE + px] = v.clamp(0.0, 1.0);
            }
        }
    }
    SyntheticScene {
        image: Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).expect("consistent shape"),
        class_label,
        center,
    }
}

/// A contiguous range of scene indices from one seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub scenes: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate(seed: u64, start: u64, len: usize, exec: Execution) -> Self {
        let scenes = map_indexed(exec, len, |i| generate_scene(seed, start + i as u64));
        Dataset { seed, scenes }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

/// Eval scenes come from the same seed, far past any training index.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 40;

/// Model input for one scene: `[1, 5, 32, 32]` with the RGB planes followed by the
/// x and y pixel-center coordinates in `(0, 1)`.
pub fn scene_input(scene: &SyntheticScene) -> Tensor {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * plane);
    data.extend_from_slice(scene.image.data());
    let coord = |k: usize| (k as f64 + 0.5) / IMAGE_SIZE as f64;
    data.extend((0..plane).map(|p| coord(p % IMAGE_SIZE)));
    data.extend((0..plane).map(|p| coord(p / IMAGE_SIZE)));
    Tensor::new(vec![1, INPUT_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data).expect("consistent shape")
}
