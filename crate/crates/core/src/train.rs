//! Two-stage BURN training, its telemetry and checkpoints, and supervised
//! pretraining of the teacher extractor.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::binary::{BinarizeMode, StageMode};
use crate::checkpoint::{Checkpoint, StageTag};
use crate::data::{AugmentSpec, Batcher, Dataset};
use crate::error::{contract_err, Error, Result};
use crate::eval;
use crate::loss::{combine, lambda_at, FsVariant, LambdaSchedule, LossReport, ScheduleShape};
use crate::networks::{make_student, BinaryStudent, FpTeacher, NetConfig, SupervisedFpNet};
use crate::optim::{lr_at, LrDecay, Optimizer, OptimizerKind};
use crate::param::{ParamGroup, ParamSet};
use crate::tape::Tape;

/// Settings of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: StageMode,
    pub iters: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub lr_decay: LrDecay,
    pub weight_decay: f32,
    pub seed: u64,
    pub schedule: LambdaSchedule,
    pub fs_variant: FsVariant,
    pub use_fs_loss: bool,
    pub use_dynamic_lambda: bool,
    pub use_multistage: bool,
    /// Write an intermediate checkpoint every this many steps (0 = only at
    /// the end of the stage).
    pub checkpoint_every: u64,
    pub crop_padding: usize,
    pub flip_prob: f32,
}

impl TrainConfig {
    /// `λ(t)` after applying the ablation switches.
    pub fn lambda(&self, t: u64) -> Result<f32> {
        if !self.use_fs_loss {
            return Ok(0.0);
        }
        if !self.use_dynamic_lambda {
            let s = LambdaSchedule { shape: ScheduleShape::Constant, ..self.schedule };
            return lambda_at(&s, t);
        }
        lambda_at(&self.schedule, t)
    }

    pub fn stage_tag(&self) -> StageTag {
        match self.stage {
            StageMode::ActivationsOnly => StageTag::Stage1,
            StageMode::FullBinary => StageTag::Stage2,
        }
    }

    fn augment(&self, ds: &Dataset) -> AugmentSpec {
        let (mean, std) = ds.channel_stats();
        AugmentSpec { crop_padding: self.crop_padding, flip_prob: self.flip_prob, mean, std }
    }
}

/// Whole-run configuration, read from a flat `key = value` file.
///
/// Keys (defaults in brackets):
///
/// | key | meaning |
/// |-----|---------|
/// | `seed` | RNG seed [0] |
/// | `batch_size` | samples per step [64] |
/// | `epochs` | total epochs over both stages [10] |
/// | `max_iters` | total step budget; overrides `epochs` when > 0 [0] |
/// | `stage1_fraction` | share of the budget given to stage 1 [0.5] |
/// | `optimizer` | `sgd` or `adam` [sgd] |
/// | `momentum` | SGD momentum [0.9] |
/// | `beta1`, `beta2` | Adam moments [0.9, 0.999] |
/// | `lr` | initial learning rate [0.05] |
/// | `lr_decay` | `cosine`, `step` or `constant` [cosine] |
/// | `weight_decay_stage1`, `weight_decay_stage2` | [1e-5, 0] |
/// | `lambda0`, `lambda_tmax` | schedule endpoints [0.9, 0.7] |
/// | `lambda_shape` | `cosine`, `constant` or `heaviside` [cosine] |
/// | `fs_variant` | `cosine`, `l1` or `l2` [cosine] |
/// | `use_fs_loss`, `use_dynamic_lambda`, `use_multistage` | ablation switches [true] |
/// | `checkpoint_every` | steps between intermediate checkpoints [0] |
/// | `crop_padding`, `flip_prob` | augmentation [4, 0.5] |
/// | `teacher_widths`, `student_widths`, `strides` | comma lists [16,32,64,128 / 16,32,64,64 / 2,2,2,1] |
/// | `num_classes` | width `K` of both classifiers [100] |
#[derive(Debug, Clone, PartialEq)]
pub struct BurnConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iters: u64,
    pub stage1_fraction: f32,
    pub optimizer: OptimizerKind,
    pub lr: f32,
    pub lr_decay: LrDecay,
    pub weight_decay_stage1: f32,
    pub weight_decay_stage2: f32,
    pub lambda0: f32,
    pub lambda_tmax: f32,
    pub lambda_shape: ScheduleShape,
    pub fs_variant: FsVariant,
    pub use_fs_loss: bool,
    pub use_dynamic_lambda: bool,
    pub use_multistage: bool,
    pub checkpoint_every: u64,
    pub crop_padding: usize,
    pub flip_prob: f32,
    pub net: NetConfig,
}

impl Default for BurnConfig {
    fn default() -> Self {
        BurnConfig {
            seed: 0,
            batch_size: 64,
            epochs: 10,
            max_iters: 0,
            stage1_fraction: 0.5,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            lr: 0.05,
            lr_decay: LrDecay::Cosine,
            weight_decay_stage1: 1e-5,
            weight_decay_stage2: 0.0,
            lambda0: LambdaSchedule::DEFAULT_LAMBDA0,
            lambda_tmax: LambdaSchedule::DEFAULT_LAMBDA_TMAX,
            lambda_shape: ScheduleShape::CosineAnneal,
            fs_variant: FsVariant::Cosine,
            use_fs_loss: true,
            use_dynamic_lambda: true,
            use_multistage: true,
            checkpoint_every: 0,
            crop_padding: 4,
            flip_prob: 0.5,
            net: NetConfig::default(),
        }
    }
}

/// Ablations selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoFs,
    NoDyn,
    NoMst,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-fs" => Ok(Ablation::NoFs),
            "no-dyn" => Ok(Ablation::NoDyn),
            "no-mst" => Ok(Ablation::NoMst),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

impl BurnConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = BurnConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        BurnConfig::from_kv(&fs::read_to_string(path)?)
    }

    /// Sets one key; used for both the file and command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_iters" => self.max_iters = parse(key, v)?,
            "stage1_fraction" => self.stage1_fraction = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd { momentum: 0.9 },
                    "adam" => OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
                    _ => return Err(Error::Config(format!("unknown optimizer `{v}`"))),
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = parse(key, v)?,
                _ => return Err(Error::Config("`momentum` needs optimizer = sgd".into())),
            },
            "beta1" | "beta2" => match &mut self.optimizer {
                OptimizerKind::Adam { beta1, beta2 } => {
                    *(if key == "beta1" { beta1 } else { beta2 }) = parse(key, v)?
                }
                _ => return Err(Error::Config(format!("`{key}` needs optimizer = adam"))),
            },
            "lr" => self.lr = parse(key, v)?,
            "lr_decay" => self.lr_decay = v.parse()?,
            "weight_decay_stage1" => self.weight_decay_stage1 = parse(key, v)?,
            "weight_decay_stage2" => self.weight_decay_stage2 = parse(key, v)?,
            "lambda0" => self.lambda0 = parse(key, v)?,
            "lambda_tmax" => self.lambda_tmax = parse(key, v)?,
            "lambda_shape" => self.lambda_shape = v.parse()?,
            "fs_variant" => self.fs_variant = v.parse()?,
            "use_fs_loss" => self.use_fs_loss = parse(key, v)?,
            "use_dynamic_lambda" => self.use_dynamic_lambda = parse(key, v)?,
            "use_multistage" => self.use_multistage = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "crop_padding" => self.crop_padding = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "teacher_widths" => self.net.teacher_widths = parse_list(key, v)?,
            "student_widths" => self.net.student_widths = parse_list(key, v)?,
            "strides" => self.net.strides = parse_list(key, v)?,
            "num_classes" => self.net.num_classes = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoFs => self.use_fs_loss = false,
            Ablation::NoDyn => self.use_dynamic_lambda = false,
            Ablation::NoMst => self.use_multistage = false,
        }
    }

    /// Pure-KL baseline: all three ablations.
    pub fn baseline(mut self) -> Self {
        for a in [Ablation::NoFs, Ablation::NoDyn, Ablation::NoMst] {
            self.apply(a);
        }
        self
    }

    /// Total step budget for a dataset of `n` samples.
    pub fn total_iters(&self, n: usize) -> u64 {
        if self.max_iters > 0 {
            self.max_iters
        } else {
            (self.epochs * n.div_ceil(self.batch_size.max(1))) as u64
        }
    }

    /// Per-stage configurations: two stages, or one full-binary stage over
    /// the whole budget when multi-stage training is off.
    pub fn stages(&self, n: usize) -> Result<Vec<TrainConfig>> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stage1_fraction) {
            return Err(Error::Config("stage1_fraction outside [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob outside [0,1]".into()));
        }
        self.net.validate()?;
        let total = self.total_iters(n);
        let split: Vec<(StageMode, u64, f32)> = if self.use_multistage {
            let s1 = (total as f64 * self.stage1_fraction as f64).round() as u64;
            vec![
                (StageMode::ActivationsOnly, s1, self.weight_decay_stage1),
                (StageMode::FullBinary, total - s1, self.weight_decay_stage2),
            ]
        } else {
            vec![(StageMode::FullBinary, total, self.weight_decay_stage2)]
        };
        split
            .into_iter()
            .map(|(stage, iters, weight_decay)| {
                Ok(TrainConfig {
                    stage,
                    iters,
                    batch_size: self.batch_size,
                    optimizer: self.optimizer,
                    lr: self.lr,
                    lr_decay: self.lr_decay,
                    weight_decay,
                    seed: self.seed,
                    schedule: LambdaSchedule::new(self.lambda0, self.lambda_tmax, iters.max(1), self.lambda_shape)?,
                    fs_variant: self.fs_variant,
                    use_fs_loss: self.use_fs_loss,
                    use_dynamic_lambda: self.use_dynamic_lambda,
                    use_multistage: self.use_multistage,
                    checkpoint_every: self.checkpoint_every,
                    crop_padding: self.crop_padding,
                    flip_prob: self.flip_prob,
                })
            })
            .collect()
    }
}

/// L2 gradient norms per parameter group for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradTelemetry {
    pub fp_classifier: f32,
    pub bin_extractor: f32,
    pub bin_classifier: f32,
}

/// Norms of the concatenated gradients of each trainable group across both
/// networks. Every trainable parameter must carry a gradient.
pub fn grad_group_norms(student: &ParamSet, teacher: &ParamSet) -> Result<GradTelemetry> {
    let mut sq = [0.0f64; 3];
    for p in student.params().iter().chain(teacher.params()) {
        let slot = match p.group {
            ParamGroup::FpClassifier => 0,
            ParamGroup::BinaryExtractor => 1,
            ParamGroup::BinaryClassifier => 2,
            ParamGroup::Frozen => continue,
        };
        let Some(g) = p.tensor.grad() else {
            return contract_err(format!("parameter `{}` has no gradient", p.name));
        };
        sq[slot] += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
    }
    Ok(GradTelemetry {
        fp_classifier: sq[0].sqrt() as f32,
        bin_extractor: sq[1].sqrt() as f32,
        bin_classifier: sq[2].sqrt() as f32,
    })
}

/// Receives one [`LossReport`] per step, keeps it, and appends it to a CSV
/// file (flushed every step) when one is attached.
#[derive(Default)]
pub struct Telemetry {
    pub rows: Vec<LossReport>,
    file: Option<BufWriter<File>>,
    log: Option<Box<dyn FnMut(&str)>>,
}

impl std::fmt::Debug for Telemetry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Telemetry").field("rows", &self.rows.len()).finish()
    }
}

impl Telemetry {
    pub fn in_memory() -> Self {
        Telemetry::default()
    }

    /// Creates (truncates) `path` and writes the header.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", LossReport::CSV_HEADER)?;
        w.flush()?;
        Ok(Telemetry { file: Some(w), ..Default::default() })
    }

    /// Human-readable progress lines go to `f`.
    pub fn with_log(mut self, f: impl FnMut(&str) + 'static) -> Self {
        self.log = Some(Box::new(f));
        self
    }

    pub fn log(&mut self, msg: &str) {
        if let Some(f) = &mut self.log {
            f(msg);
        }
    }

    fn record(&mut self, r: LossReport) -> Result<()> {
        if let Some(w) = &mut self.file {
            writeln!(w, "{}", r.csv_row())?;
            w.flush()?;
        }
        self.rows.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", LossReport::CSV_HEADER);
        for r in &self.rows {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }
}

/// Result of one stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    /// Student state under `student.` and `g_θ` under `fp_classifier.`.
    pub checkpoint: Checkpoint,
    pub steps: u64,
}

/// Student plus `g_θ` snapshot, the unit of stage checkpoints.
pub fn stage_checkpoint(tag: StageTag, iteration: u64, seed: u64, teacher: &FpTeacher, student: &BinaryStudent) -> Checkpoint {
    let mut ck = Checkpoint::new(tag, iteration, seed);
    student.export(&mut ck);
    teacher.export_classifier(&mut ck);
    ck
}

fn non_finite(iter: u64, what: String) -> Error {
    Error::NonFinite { iter, tensor: what }
}

/// Trains `student` and the teacher classifier for `cfg.iters` steps.
///
/// `first_iter` is the global index of the first step, used in telemetry
/// and checkpoint names. When `out` is set, intermediate and final stage
/// checkpoints are written there.
pub fn train_stage(
    cfg: &TrainConfig,
    teacher: &mut FpTeacher,
    student: &mut BinaryStudent,
    data: &Dataset,
    telemetry: &mut Telemetry,
    first_iter: u64,
    out: Option<&Path>,
) -> Result<StageOutcome> {
    if student.mode != BinarizeMode::from(cfg.stage) {
        return contract_err(format!("student is {:?}, stage wants {:?}", student.mode, cfg.stage));
    }
    let tag = cfg.stage_tag();
    let frozen_before = teacher.extractor_hash();
    let mut opt_t = Optimizer::new(cfg.optimizer, cfg.weight_decay, &teacher.params);
    let mut opt_s = Optimizer::new(cfg.optimizer, cfg.weight_decay, &student.params);
    let batch_seed = cfg.seed ^ ((cfg.stage.tag() as u64) << 56);
    let mut batcher = Batcher::new(data, cfg.augment(data), cfg.batch_size, batch_seed)?;
    let per_epoch = batcher.batches_per_epoch() as u64;
    let mut epoch_loss = 0.0f64;
    let mut epoch_steps = 0u64;

    for t in 0..cfg.iters {
        let iter = first_iter + t;
        let batch = batcher.next_batch();
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let out_pair = crate::networks::forward_pair(teacher, student, &mut tape, x)?;
        let lambda = cfg.lambda(t)?;
        let (obj, mut report) = combine(&mut tape, out_pair.p1, out_pair.p2, out_pair.v1, out_pair.v2_matched, lambda, cfg.fs_variant)?;
        if !report.loss_total.is_finite() {
            let what = match tape.first_non_finite() {
                Some((v, op)) => format!("`{op}` output (node {})", v.index()),
                None => "loss".to_string(),
            };
            return Err(non_finite(iter, what));
        }
        tape.backward(obj.total)?;
        teacher.params.zero_grad();
        student.params.zero_grad();
        teacher.params.collect_grads(&tape);
        student.params.collect_grads(&tape);
        let g = grad_group_norms(&student.params, &teacher.params)?;
        for p in student.params.params().iter().chain(teacher.params.params()) {
            if p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite(iter, format!("gradient of `{}`", p.name)));
            }
        }
        let lr = lr_at(cfg.lr, cfg.lr_decay, t, cfg.iters);
        opt_t.step(&mut teacher.params, lr);
        opt_s.step(&mut student.params, lr);

        report.iter = iter;
        report.stage = cfg.stage.tag();
        report.gnorm_fp_classifier = g.fp_classifier;
        report.gnorm_bin_extractor = g.bin_extractor;
        report.gnorm_bin_classifier = g.bin_classifier;
        epoch_loss += report.loss_total as f64;
        epoch_steps += 1;
        telemetry.record(report)?;

        if (t + 1) % per_epoch == 0 || t + 1 == cfg.iters {
            let msg = format!(
                "stage {} epoch {} step {}/{} loss {:.5} lambda {:.4}",
                cfg.stage.tag(),
                t / per_epoch + 1,
                t + 1,
                cfg.iters,
                epoch_loss / epoch_steps as f64,
                lambda
            );
            telemetry.log(&msg);
            epoch_loss = 0.0;
            epoch_steps = 0;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 && t + 1 < cfg.iters {
                stage_checkpoint(tag, iter + 1, cfg.seed, teacher, student)
                    .save(dir.join(format!("stage{}_iter{}.bnck", cfg.stage.tag(), iter + 1)))?;
            }
        }
    }

    if teacher.extractor_hash() != frozen_before {
        return contract_err("teacher extractor changed during training");
    }
    let ck = stage_checkpoint(tag, first_iter + cfg.iters, cfg.seed, teacher, student);
    if let Some(dir) = out {
        ck.save(dir.join(format!("stage{}.bnck", cfg.stage.tag())))?;
    }
    Ok(StageOutcome { checkpoint: ck, steps: cfg.iters })
}

/// Everything a BURN run produces.
#[derive(Debug, Clone)]
pub struct BurnOutcome {
    /// The student extractor `k_φ` (with running statistics).
    pub extractor: Checkpoint,
    /// Final checkpoint of each stage.
    pub stages: Vec<Checkpoint>,
    /// Student and `g_θ` as handed to stage 2, before its first step.
    pub stage2_init: Option<Checkpoint>,
}

/// Runs the configured stages end to end.
///
/// Stage 2 starts from the full stage-1 student and the stage-1 `g_θ`.
/// With `out` set, stage checkpoints and `extractor.bnck` are written there;
/// per-step rows go to `telemetry`.
pub fn run_burn(cfg: &BurnConfig, teacher: &mut FpTeacher, data: &Dataset, telemetry: &mut Telemetry, out: Option<&Path>) -> Result<BurnOutcome> {
    let stages = cfg.stages(data.len())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut prev: Option<Checkpoint> = None;
    let mut done = Vec::new();
    let mut stage2_init = None;
    let mut iter = 0;
    let mut student = None;
    for sc in &stages {
        let mut s = make_student(&cfg.net, sc.stage.into(), cfg.seed, prev.as_ref())?;
        if let Some(ck) = &prev {
            teacher.import_classifier(ck)?;
            stage2_init = Some(stage_checkpoint(sc.stage_tag(), iter, cfg.seed, teacher, &s));
        }
        let outcome = train_stage(sc, teacher, &mut s, data, telemetry, iter, out)?;
        iter += outcome.steps;
        prev = Some(outcome.checkpoint.clone());
        done.push(outcome.checkpoint);
        student = Some(s);
    }
    let student = student.expect("at least one stage");
    let tag = stages.last().map(TrainConfig::stage_tag).unwrap_or(StageTag::None);
    let mut extractor = Checkpoint::new(tag, iter, cfg.seed);
    student.export_extractor(&mut extractor);
    if let Some(dir) = out {
        extractor.save(dir.join("extractor.bnck"))?;
    }
    Ok(BurnOutcome { extractor, stages: done, stage2_init })
}

/// Builds the BURN student network an extractor checkpoint belongs to,
/// taking the block widths from the checkpoint itself.
pub fn student_from_extractor(base: &NetConfig, ck: &Checkpoint) -> Result<BinaryStudent> {
    let mut net = base.clone();
    if let Some((c, widths)) = NetConfig::widths_from(ck, "student.extractor.") {
        net.in_channels = c;
        if widths.len() == net.strides.len() {
            net.student_widths = widths;
        }
    }
    BinaryStudent::from_extractor_checkpoint(&net, BinarizeMode::FullBinary, ck)
}

/// Supervised pretraining settings for the FP teacher extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub net: NetConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { epochs: 10, batch_size: 64, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, seed: 0, net: NetConfig::default() }
    }
}

/// One line of the teacher pretraining log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    /// Top-1 accuracy on the (unaugmented) training set after the epoch.
    pub accuracy: f32,
}

/// Trains a supervised FP network on the dataset labels and returns its
/// checkpoint (everything under `teacher.`) with per-epoch logs.
pub fn pretrain_teacher(cfg: &TeacherConfig, data: &Dataset, mut log: impl FnMut(&EpochLog)) -> Result<(Checkpoint, Vec<EpochLog>)> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut net = SupervisedFpNet::new(&cfg.net, data.num_classes as usize, cfg.seed)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum }, cfg.weight_decay, &net.params);
    let mut logs = Vec::new();
    if cfg.epochs > 0 {
        let mut batcher = Batcher::new(data, AugmentSpec::standard(data), cfg.batch_size, cfg.seed)?;
        let per_epoch = batcher.batches_per_epoch() as u64;
        let total = per_epoch * cfg.epochs as u64;
        let mut step = 0;
        for epoch in 1..=cfg.epochs {
            let mut loss_sum = 0.0f64;
            for _ in 0..per_epoch {
                let batch = batcher.next_batch();
                let mut tape = Tape::new();
                let x = tape.constant(batch.images);
                let logits = net.logits(&mut tape, x, true)?;
                let loss = tape.cross_entropy(logits, &batch.labels)?;
                let l = tape.value(loss).item();
                if !l.is_finite() {
                    return Err(non_finite(step, "cross-entropy loss".into()));
                }
                tape.backward(loss)?;
                net.params.zero_grad();
                net.params.collect_grads(&tape);
                opt.step(&mut net.params, lr_at(cfg.lr, LrDecay::Cosine, step, total));
                loss_sum += l as f64;
                step += 1;
            }
            let accuracy = eval::supervised_accuracy(&mut net, data)?;
            let e = EpochLog { epoch, loss: (loss_sum / per_epoch as f64) as f32, accuracy };
            log(&e);
            logs.push(e);
        }
    }
    Ok((net.to_checkpoint(logs.len() as u64, cfg.seed), logs))
}

/// Reads the teacher architecture back from a pretraining checkpoint.
pub fn teacher_net_config(base: &NetConfig, ck: &Checkpoint) -> Result<NetConfig> {
    let (c, widths) = NetConfig::widths_from(ck, "teacher.extractor.").ok_or_else(|| Error::Load {
        name: "teacher.extractor.block0.conv.weight".into(),
        msg: "missing from checkpoint".into(),
    })?;
    let mut net = base.clone();
    net.in_channels = c;
    if widths.len() != net.strides.len() {
        return Err(Error::Config(format!(
            "teacher has {} blocks but {} strides are configured",
            widths.len(),
            net.strides.len()
        )));
    }
    net.teacher_widths = widths;
    Ok(net)
}

/// Telemetry file inside a `burn` output directory.
pub fn telemetry_path(dir: &Path) -> PathBuf {
    dir.join("telemetry.csv")
}
