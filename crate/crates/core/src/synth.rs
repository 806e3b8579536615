//! Procedural 10-class image set used for tests, benchmarks and demos.
//!
//! Every image is a single coloured glyph (disk, square, triangle, plus,
//! cross, ring, frame, stripes, checkerboard) at a random position, size and
//! colour over a random background, with Gaussian pixel noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::Result;
use crate::rng::{self, streams};

pub const NUM_CLASSES: u16 = 10;
pub const SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        SynthConfig { count, size: SIZE, noise: 0.08, seed }
    }
}

fn inside(class: u16, dx: f32, dy: f32, r: f32, phase: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    let t = (0.3 * r).max(1.5);
    match class {
        0 => d <= r,
        1 => ax <= r * 0.85 && ay <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.55,
        3 => (ax <= t * 0.5 && ay <= r) || (ay <= t * 0.5 && ax <= r),
        4 => (dx - dy).abs() <= t * 0.7 && d <= r || (dx + dy).abs() <= t * 0.7 && d <= r,
        5 => d <= r && d >= r - t,
        6 => ax <= r && ay <= r && ax.max(ay) >= r - t,
        7 => ax <= r && ay <= r && ((dy + r + phase) / 3.0).floor() as i32 % 2 == 0,
        8 => ax <= r && ay <= r && ((dx + r + phase) / 3.0).floor() as i32 % 2 == 0,
        _ => {
            ax <= r && ay <= r && ((((dx + r) / 3.0).floor() + ((dy + r + phase) / 3.0).floor()) as i32) % 2 == 0
        }
    }
}

/// Generates a balanced, shuffled set of `cfg.count` RGB images.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let s = cfg.size;
    let mut rng = rng::stream(cfg.seed, streams::SYNTH);
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("finite noise");
    let mut labels: Vec<u16> = (0..cfg.count).map(|i| (i % NUM_CLASSES as usize) as u16).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    let mut images = Vec::with_capacity(cfg.count * 3 * s * s);
    let scale = s as f32 / SIZE as f32;
    for &class in &labels {
        let r = rng.random_range(6.0..11.0) * scale;
        let cx = rng.random_range(0.35..0.65) * s as f32;
        let cy = rng.random_range(0.35..0.65) * s as f32;
        let phase = rng.random_range(0.0..3.0);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let fg: [f32; 3] = std::array::from_fn(|i| {
            let delta = rng.random_range(0.3..0.6);
            if bg[i] > 0.5 { bg[i] - delta } else { bg[i] + delta }
        });
        let mut mask = vec![false; s * s];
        for y in 0..s {
            for x in 0..s {
                mask[y * s + x] = inside(class, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r, phase);
            }
        }
        for ch in 0..3 {
            for &m in &mask {
                let v = if m { fg[ch] } else { bg[ch] } + noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(3, s, s, NUM_CLASSES, images, labels)
}
