//! Linear evaluation of frozen extractors and top-k accuracy.

use rand::Rng as _;

use crate::data::{AugmentSpec, Batcher, Dataset};
use crate::error::{contract_err, dim_err, Error, Result};
use crate::networks::{BinaryStudent, SupervisedFpNet};
use crate::optim::{lr_at, LrDecay, Optimizer, OptimizerKind};
use crate::param::{ParamGroup, ParamSet};
use crate::rng::{self, streams};
use crate::tape::Tape;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Fraction of rows of `logits` (`[B, K]`) whose label is among the `k`
/// largest entries. Equal logits rank by lower class index first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f32> {
    let &[b, classes] = logits.shape() else {
        return dim_err(format!("topk_accuracy expects [B, K], got {:?}", logits.shape()));
    };
    if k == 0 || k > classes {
        return contract_err(format!("k = {k} outside 1..={classes}"));
    }
    if labels.len() != b {
        return dim_err(format!("{} labels for {b} rows", labels.len()));
    }
    if b == 0 {
        return Ok(0.0);
    }
    // A NaN logit outranks every number; a NaN at the label is a miss.
    let mut hits = 0usize;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::Data(format!("label {y} >= {classes} classes")));
        }
        let ly = row[y];
        if ly.is_nan() {
            continue;
        }
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v.is_nan() || v > ly || (v == ly && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f32 / b as f32)
}

/// Dataset-normalized, unaugmented view used for all evaluation passes.
pub fn eval_view(ds: &Dataset) -> AugmentSpec {
    let (mean, std) = ds.channel_stats();
    AugmentSpec::normalize_only(mean, std)
}

fn eval_batches(ds: &Dataset) -> Result<(Batcher<'_>, usize)> {
    let b = Batcher::new(ds, eval_view(ds), EVAL_BATCH, 0)?.sequential();
    let n = b.batches_per_epoch();
    Ok((b, n))
}

/// Top-1 accuracy of a supervised network over `ds` (inference-mode
/// batchnorm, no augmentation).
pub fn supervised_accuracy(net: &mut SupervisedFpNet, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let (mut batches, n) = eval_batches(ds)?;
    let mut hits = 0.0f64;
    for _ in 0..n {
        let batch = batches.next_batch();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let logits = net.logits(&mut tape, x, false)?;
        hits += topk_accuracy(tape.value(logits), &batch.labels, 1)? as f64 * batch.labels.len() as f64;
    }
    Ok((hits / ds.len() as f64) as f32)
}

/// Student extractor features of every sample, `[N, D]`, in inference
/// mode. The student is left untouched.
pub fn extract_features(student: &mut BinaryStudent, ds: &Dataset) -> Result<Tensor> {
    let (mut batches, n) = eval_batches(ds)?;
    let mut data = Vec::new();
    let mut d = 0;
    for _ in 0..n {
        let batch = batches.next_batch();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let f = student.features(&mut tape, x, false)?;
        d = tape.shape(f)[1];
        data.extend_from_slice(tape.data(f));
    }
    Tensor::new(&[ds.len(), d], data)
}

/// Linear probe training schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub seed: u64,
    /// Leading share of the dataset used to train the probe; the rest is
    /// the held-out split.
    pub train_fraction: f32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 30, batch_size: 128, lr: 0.3, momentum: 0.9, seed: 0, train_fraction: 0.8 }
    }
}

/// Outcome of one probe run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub train_top1: f32,
    pub test_top1: f32,
}

fn standardize(x: &mut [f32], d: usize, mean: &[f64], std: &[f64]) {
    for row in x.chunks_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = ((*v as f64 - m) / s) as f32;
        }
    }
}

/// Trains a softmax-regression probe on fixed features and reports top-1
/// on both splits. Features are standardized with training-split
/// statistics.
pub fn train_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (&[n, d], &[m, d2]) = (train_x.shape(), test_x.shape()) else {
        return dim_err("probe features must be [N, D]");
    };
    if d != d2 || train_y.len() != n || test_y.len() != m {
        return dim_err("probe features and labels disagree");
    }
    if let Some(y) = train_y.iter().chain(test_y).find(|&&y| y >= num_classes) {
        return Err(Error::Data(format!("label {y} >= {num_classes} classes")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("probe batch_size must be at least 1".into()));
    }
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in train_x.data().chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let nn = n.max(1) as f64;
    for j in 0..d {
        mean[j] /= nn;
        sq[j] = (sq[j] / nn - mean[j] * mean[j]).max(0.0).sqrt().max(1e-6);
    }
    let mut xtr = train_x.data().to_vec();
    let mut xte = test_x.data().to_vec();
    standardize(&mut xtr, d, &mean, &sq);
    standardize(&mut xte, d, &mean, &sq);

    let mut rng = rng::stream(cfg.seed, streams::PROBE);
    let bound = 1.0 / (d as f32).sqrt();
    let mut ps = ParamSet::new();
    let w: Vec<f32> = (0..num_classes * d).map(|_| rng.random_range(-bound..=bound)).collect();
    let b: Vec<f32> = (0..num_classes).map(|_| rng.random_range(-bound..=bound)).collect();
    ps.add("probe.weight", Tensor::new(&[num_classes, d], w)?, ParamGroup::BinaryClassifier)?;
    ps.add("probe.bias", Tensor::new(&[num_classes], b)?, ParamGroup::BinaryClassifier)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum }, 0.0, &ps);

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(&xtr[i * d..(i + 1) * d]);
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[chunk.len(), d], xb)?);
            let (wv, bv) = (ps.bind(&mut tape, 0), ps.bind(&mut tape, 1));
            let logits = tape.linear(x, wv, Some(bv))?;
            let loss = tape.cross_entropy(logits, &yb)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite { iter: step, tensor: "probe loss".into() });
            }
            tape.backward(loss)?;
            ps.zero_grad();
            ps.collect_grads(&tape);
            opt.step(&mut ps, lr_at(cfg.lr, LrDecay::Step, step, total));
            step += 1;
        }
    }

    let score = |x: &[f32], y: &[usize], rows: usize| -> Result<f32> {
        if rows == 0 {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(&[rows, d], x.to_vec())?);
        let (wv, bv) = (ps.bind(&mut tape, 0), ps.bind(&mut tape, 1));
        let logits = tape.linear(xv, wv, Some(bv))?;
        topk_accuracy(tape.value(logits), y, 1)
    };
    Ok(ProbeResult { train_top1: score(&xtr, train_y, n)?, test_top1: score(&xte, test_y, m)? })
}

/// Freezes `student`, extracts features of `ds`, and trains a probe on the
/// leading `train_fraction` of the samples; accuracy is on the rest.
pub fn linear_probe(student: &mut BinaryStudent, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction outside [0,1]".into()));
    }
    let before = student.extractor_hash();
    let feats = extract_features(student, ds)?;
    if student.extractor_hash() != before {
        return contract_err("extractor changed during feature extraction");
    }
    let n = ds.len();
    let d = feats.shape()[1];
    let cut = ((n as f64) * cfg.train_fraction as f64).round() as usize;
    let labels: Vec<usize> = ds.labels().iter().map(|&l| l as usize).collect();
    let tr = Tensor::new(&[cut, d], feats.data()[..cut * d].to_vec())?;
    let te = Tensor::new(&[n - cut, d], feats.data()[cut * d..].to_vec())?;
    train_probe(&tr, &labels[..cut], &te, &labels[cut..], ds.num_classes as usize, cfg)
}

/// One row of the linear-evaluation results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub run_id: String,
    pub pretrain_method: String,
    pub probe_lr: f32,
    pub top1: f32,
}

impl ProbeRow {
    pub const CSV_HEADER: &'static str = "run_id,pretrain_method,probe_lr,top1";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.run_id, self.pretrain_method, self.probe_lr, self.top1)
    }
}
