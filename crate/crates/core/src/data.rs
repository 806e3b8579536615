//! `BDS1` image dataset container, augmentation and batching.
//!
//! File layout (little-endian): magic `BDS1`, count u32, channels u32,
//! height u32, width u32, `count` images as f32 CHW arrays, `count` labels
//! as u16, then the number of classes as a trailing u16.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BDS1";
const HEADER: usize = 20;

/// In-memory labelled image set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: u16,
    images: Vec<f32>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(channels: usize, height: usize, width: usize, num_classes: u16, images: Vec<f32>, labels: Vec<u16>) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::Data("image dimensions must be positive".into()));
        }
        if images.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} image values for {} labels of size {per}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} >= class count {num_classes}")));
        }
        Ok(Dataset { channels, height, width, num_classes, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u16 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Images `range` as one `[N, C, H, W]` tensor.
    pub fn slice_tensor(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[idx.len(), self.channels, self.height, self.width], data).unwrap()
    }

    /// Splits into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = n * self.image_len();
        let mk = |imgs: &[f32], labels: &[u16]| Dataset {
            images: imgs.to_vec(),
            labels: labels.to_vec(),
            ..self.clone_meta()
        };
        (
            mk(&self.images[..cut], &self.labels[..n]),
            mk(&self.images[cut..], &self.labels[n..]),
        )
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let hw = self.height * self.width;
        let mut mean = vec![0.0f64; self.channels];
        let mut sq = vec![0.0f64; self.channels];
        for img in self.images.chunks(self.image_len()) {
            for c in 0..self.channels {
                for &v in &img[c * hw..(c + 1) * hw] {
                    mean[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * hw).max(1) as f64;
        let m: Vec<f32> = mean.iter().map(|s| (s / n) as f32).collect();
        let s = sq
            .iter()
            .zip(&mean)
            .map(|(q, s)| ((q / n - (s / n).powi(2)).max(0.0).sqrt() as f32).max(1e-6))
            .collect();
        (m, s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(HEADER + 2 + self.images.len() * 4 + self.labels.len() * 2);
        b.extend_from_slice(MAGIC);
        for v in [self.len(), self.channels, self.height, self.width] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in &self.images {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            b.extend_from_slice(&l.to_le_bytes());
        }
        b.extend_from_slice(&self.num_classes.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER {
            return Err(Error::Format {
                offset: b.len() as u64,
                msg: format!("truncated header: expected at least {HEADER} bytes, got {}", b.len()),
            });
        }
        if &b[..4] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected BDS1".into() });
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let (count, c, h, w) = (u32_at(4), u32_at(8), u32_at(12), u32_at(16));
        let per = c * h * w;
        let expected = HEADER as u64 + count as u64 * (per as u64 * 4 + 2) + 2;
        if b.len() as u64 != expected {
            return Err(Error::Format {
                offset: (b.len() as u64).min(expected),
                msg: format!("expected {expected} bytes, got {}", b.len()),
            });
        }
        let img_end = HEADER + count * per * 4;
        let images = b[HEADER..img_end]
            .chunks_exact(4)
            .map(|x| f32::from_le_bytes(x.try_into().unwrap()))
            .collect();
        let lab_end = img_end + count * 2;
        let labels: Vec<u16> = b[img_end..lab_end]
            .chunks_exact(2)
            .map(|x| u16::from_le_bytes([x[0], x[1]]))
            .collect();
        let num_classes = u16::from_le_bytes([b[lab_end], b[lab_end + 1]]);
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Format {
                offset: (img_end + 2 * i) as u64,
                msg: format!("label {} >= class count {num_classes}", labels[i]),
            });
        }
        if per == 0 {
            return Err(Error::Format { offset: 8, msg: "zero image dimension".into() });
        }
        Ok(Dataset { channels: c, height: h, width: w, num_classes, images, labels })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::from_bytes(&fs::read(path)?)
    }
}

/// Augmentation applied per sample when batching. Normalization always
/// runs; crop and flip are the random parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub crop_padding: usize,
    pub flip_prob: f32,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl AugmentSpec {
    /// Normalization only.
    pub fn normalize_only(mean: Vec<f32>, std: Vec<f32>) -> Self {
        AugmentSpec { crop_padding: 0, flip_prob: 0.0, mean, std }
    }

    /// Pad-4 random crop and horizontal flips, normalized with the dataset's
    /// own channel statistics.
    pub fn standard(ds: &Dataset) -> Self {
        let (mean, std) = ds.channel_stats();
        AugmentSpec { crop_padding: 4, flip_prob: 0.5, mean, std }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0,1]", self.flip_prob)));
        }
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config("normalization stats do not match channel count".into()));
        }
        Ok(())
    }

    /// Writes the augmented, normalized view of `src` into `dst`.
    pub fn apply(&self, src: &[f32], c: usize, h: usize, w: usize, rng: &mut Rng, dst: &mut [f32]) {
        let (dy, dx) = if self.crop_padding > 0 {
            let p = self.crop_padding as i64;
            (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize)
        } else {
            (0, 0)
        };
        let flip = self.flip_prob > 0.0 && rng.random::<f32>() < self.flip_prob;
        for ch in 0..c {
            let (m, s) = (self.mean[ch], self.std[ch]);
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        (src[(ch * h + sy as usize) * w + sx as usize] - m) / s
                    };
                    dst[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
}

/// A batch of images and their labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
    pub epoch: u64,
}

/// Epoch-wise shuffled mini-batches with per-sample augmentation.
///
/// Each epoch's permutation comes from its own seeded stream, so every
/// sample appears exactly once per epoch and the sequence depends only on the
/// seed. The last batch of an epoch may be short.
#[derive(Debug)]
pub struct Batcher<'a> {
    ds: &'a Dataset,
    aug: AugmentSpec,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    aug_rng: Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(ds: &'a Dataset, aug: AugmentSpec, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if ds.is_empty() {
            return Err(Error::Data("cannot batch an empty dataset".into()));
        }
        aug.validate(ds.channels)?;
        let mut b = Batcher {
            ds,
            aug,
            batch_size,
            seed,
            shuffle: true,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            aug_rng: rng::stream(seed, streams::DATA),
        };
        b.start_epoch();
        Ok(b)
    }

    /// Visit samples in stored order instead of shuffling.
    pub fn sequential(mut self) -> Self {
        self.shuffle = false;
        self.start_epoch();
        self
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ds.len().div_ceil(self.batch_size)
    }

    fn start_epoch(&mut self) {
        self.order = (0..self.ds.len()).collect();
        if self.shuffle {
            let key = self.seed ^ self.epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let mut r = rng::stream(key, streams::DATA + 100);
            self.order.shuffle(&mut r);
        }
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.start_epoch();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let (c, h, w) = (self.ds.channels, self.ds.height, self.ds.width);
        let per = self.ds.image_len();
        let mut data = vec![0.0; idx.len() * per];
        for (k, &i) in idx.iter().enumerate() {
            self.aug.apply(self.ds.image(i), c, h, w, &mut self.aug_rng, &mut data[k * per..(k + 1) * per]);
        }
        Batch {
            images: Tensor::new(&[idx.len(), c, h, w], data).unwrap(),
            labels: idx.iter().map(|&i| self.ds.label(i) as usize).collect(),
            indices: idx,
            epoch: self.epoch,
        }
    }
}

/// Reads a folder of class sub-folders holding PNG images into a dataset.
///
/// Classes are the sorted sub-folder names; images are resized to
/// `height × width`, converted to RGB and scaled to `[0, 1]`.
pub fn convert_image_folder(root: impl AsRef<Path>, height: usize, width: usize) -> Result<(Dataset, Vec<String>)> {
    let root = root.as_ref();
    let mut classes: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    classes.sort();
    if classes.len() > u16::MAX as usize {
        return Err(Error::Data("too many classes".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ci, name) in classes.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(root.join(name))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| Error::Data(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let img = image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
            for ch in 0..3 {
                for y in 0..height {
                    for x in 0..width {
                        images.push(img.get_pixel(x as u32, y as u32)[ch] as f32 / 255.0);
                    }
                }
            }
            labels.push(ci as u16);
        }
    }
    Ok((Dataset::new(3, height, width, classes.len() as u16, images, labels)?, classes))
}
