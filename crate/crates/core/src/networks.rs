//! The three actors of BURN training: the frozen floating-point feature
//! extractor with its trainable classifier (the teacher), and the binary
//! student split into extractor and classifier, plus an optional linear
//! adapter when the two feature widths differ.

use rand::Rng as _;

use crate::binary::BinarizeMode;
use crate::checkpoint::{Checkpoint, StageTag};
use crate::error::{contract_err, Error, Result};
use crate::param::{ParamGroup, ParamSet};
use crate::rng::{self, streams, Rng};
use crate::tape::{BnMode, Tape, Var};
use crate::tensor::Tensor;

const BN_MOMENTUM: f32 = 0.1;

/// Architecture of the desk-scale teacher and student.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub teacher_widths: Vec<usize>,
    pub student_widths: Vec<usize>,
    /// Per-block conv stride, shared by teacher and student.
    pub strides: Vec<usize>,
    /// Output width `K` of both classifiers.
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            teacher_widths: vec![16, 32, 64, 128],
            student_widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            num_classes: 100,
        }
    }
}

impl NetConfig {
    pub fn d_fp(&self) -> usize {
        *self.teacher_widths.last().expect("teacher has no blocks")
    }

    pub fn d_bin(&self) -> usize {
        *self.student_widths.last().expect("student has no blocks")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.strides.len();
        if n == 0 || self.teacher_widths.len() != n || self.student_widths.len() != n {
            return Err(Error::Config(format!(
                "block counts disagree: strides {n}, teacher {}, student {}",
                self.teacher_widths.len(),
                self.student_widths.len()
            )));
        }
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("num_classes and in_channels must be positive".into()));
        }
        if self.strides.iter().chain(&self.teacher_widths).chain(&self.student_widths).any(|&v| v == 0) {
            return Err(Error::Config("widths and strides must be positive".into()));
        }
        Ok(())
    }

    /// Reads block widths from conv weights named
    /// `{prefix}block{i}.conv.weight`, keeping everything else.
    pub fn widths_from(ck: &Checkpoint, prefix: &str) -> Option<(usize, Vec<usize>)> {
        let mut widths = Vec::new();
        let mut in_ch = None;
        while let Some(t) = ck.get(&format!("{prefix}block{}.conv.weight", widths.len())) {
            if t.ndim() != 4 {
                return None;
            }
            in_ch.get_or_insert(t.shape()[1]);
            widths.push(t.shape()[0]);
        }
        in_ch.map(|c| (c, widths))
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], bound: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Kaiming-uniform with `a = √5`, i.e. bound `1/√fan_in`.
fn kaiming(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    uniform(rng, shape, 1.0 / (fan_in as f32).sqrt())
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: usize,
    bn_w: usize,
    bn_b: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
}

impl ConvBn {
    fn build(
        ps: &mut ParamSet,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: ps.add(format!("{prefix}conv.weight"), kaiming(rng, &[cout, cin, 3, 3]), group)?,
            bn_w: ps.add(format!("{prefix}bn.weight"), Tensor::full(&[cout], 1.0), group)?,
            bn_b: ps.add(format!("{prefix}bn.bias"), Tensor::zeros(&[cout]), group)?,
            running_mean: ps.add_buffer(format!("{prefix}bn.running_mean"), Tensor::zeros(&[cout]))?,
            running_var: ps.add_buffer(format!("{prefix}bn.running_var"), Tensor::full(&[cout], 1.0))?,
            stride,
        })
    }

    fn forward(&self, ps: &mut ParamSet, tape: &mut Tape, x: Var, binarize_weight: bool, train: bool) -> Result<Var> {
        let mut w = ps.bind(tape, self.conv);
        if binarize_weight {
            w = tape.binarize_weight(w)?;
        }
        let y = tape.conv2d(x, w, self.stride, 1)?;
        let g = ps.bind(tape, self.bn_w);
        let b = ps.bind(tape, self.bn_b);
        if train {
            let (out, stats) = tape.batchnorm2d(y, g, b, BnMode::Train)?;
            let stats = stats.expect("train mode yields stats");
            blend(ps.buffer_mut(self.running_mean).data_mut(), &stats.mean);
            blend(ps.buffer_mut(self.running_var).data_mut(), &stats.var);
            Ok(out)
        } else {
            let mode = BnMode::Eval {
                mean: ps.buffer(self.running_mean).data(),
                var: ps.buffer(self.running_var).data(),
            };
            Ok(tape.batchnorm2d(y, g, b, mode)?.0)
        }
    }
}

fn blend(running: &mut [f32], batch: &[f32]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn build(ps: &mut ParamSet, prefix: &str, din: usize, dout: usize, group: ParamGroup, rng: &mut Rng) -> Result<Self> {
        let w = ps.add(format!("{prefix}weight"), kaiming(rng, &[dout, din]), group)?;
        let b = ps.add(format!("{prefix}bias"), uniform(rng, &[dout], 1.0 / (din as f32).sqrt()), group)?;
        Ok(Linear { w, b })
    }

    fn forward(&self, ps: &ParamSet, tape: &mut Tape, x: Var, binarize_weight: bool) -> Result<Var> {
        let mut w = ps.bind(tape, self.w);
        if binarize_weight {
            w = tape.binarize_weight(w)?;
        }
        let b = ps.bind(tape, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Floating-point conv → batchnorm → ReLU stack followed by global average
/// pooling.
#[derive(Debug, Clone)]
pub(crate) struct FpBackbone {
    blocks: Vec<ConvBn>,
}

impl FpBackbone {
    pub(crate) fn build(ps: &mut ParamSet, cfg: &NetConfig, group: ParamGroup, rng: &mut Rng) -> Result<Self> {
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, (&w, &s)) in cfg.teacher_widths.iter().zip(&cfg.strides).enumerate() {
            blocks.push(ConvBn::build(ps, &format!("extractor.block{i}."), cin, w, s, group, rng)?);
            cin = w;
        }
        Ok(FpBackbone { blocks })
    }

    pub(crate) fn forward(&self, ps: &mut ParamSet, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ps, tape, h, false, train)?;
            h = tape.relu(h);
        }
        tape.global_avg_pool(h)
    }
}

#[derive(Debug, Clone)]
struct BinaryBlock {
    beta: Option<usize>,
    conv_bn: ConvBn,
    gamma: usize,
    zeta: usize,
    slope: usize,
    stride: usize,
    shortcut: Option<usize>,
}

/// Binary block stack. Block `i` computes
/// `RPReLU(BN(conv(RSign(h))) + shortcut(h))` followed by global average
/// pooling at the end. Block 0 convolves the real-valued image directly. The
/// shortcut is parameter-free (average pooling by the stride, then channel
/// repetition) and exists whenever the output width is a multiple of the
/// input width.
#[derive(Debug, Clone)]
struct BinaryBackbone {
    blocks: Vec<BinaryBlock>,
}

impl BinaryBackbone {
    fn build(ps: &mut ParamSet, cfg: &NetConfig, rng: &mut Rng) -> Result<Self> {
        let g = ParamGroup::BinaryExtractor;
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::new();
        for (i, (&w, &s)) in cfg.student_widths.iter().zip(&cfg.strides).enumerate() {
            let p = format!("extractor.block{i}.");
            let beta = if i > 0 { Some(ps.add(format!("{p}rsign.beta"), Tensor::zeros(&[cin]), g)?) } else { None };
            blocks.push(BinaryBlock {
                beta,
                conv_bn: ConvBn::build(ps, &p, cin, w, s, g, rng)?,
                gamma: ps.add(format!("{p}rprelu.gamma"), Tensor::zeros(&[w]), g)?,
                zeta: ps.add(format!("{p}rprelu.zeta"), Tensor::zeros(&[w]), g)?,
                slope: ps.add(format!("{p}rprelu.slope"), Tensor::full(&[w], 0.25), g)?,
                stride: s,
                shortcut: (i > 0 && w % cin == 0).then_some(w / cin),
            });
            cin = w;
        }
        Ok(BinaryBackbone { blocks })
    }

    fn forward(&self, ps: &mut ParamSet, tape: &mut Tape, x: Var, mode: BinarizeMode, train: bool) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            let u = match b.beta {
                Some(beta) if mode.binarize_activations() => {
                    let beta = ps.bind(tape, beta);
                    tape.rsign(h, beta)?
                }
                _ => h,
            };
            let mut y = b.conv_bn.forward(ps, tape, u, mode.binarize_weights(), train)?;
            if let Some(times) = b.shortcut {
                let pooled = if b.stride > 1 { tape.avg_pool2d(h, b.stride)? } else { h };
                let sc = if times > 1 { tape.repeat_channels(pooled, times)? } else { pooled };
                y = tape.add(y, sc)?;
            }
            let (g, z, s) = (ps.bind(tape, b.gamma), ps.bind(tape, b.zeta), ps.bind(tape, b.slope));
            h = tape.rprelu(y, g, z, s)?;
        }
        tape.global_avg_pool(h)
    }
}

/// Frozen FP feature extractor `h_ζ` plus trainable classifier `g_θ`.
#[derive(Debug, Clone)]
pub struct FpTeacher {
    pub params: ParamSet,
    backbone: FpBackbone,
    classifier: Linear,
    cfg: NetConfig,
}

/// Checkpoint prefix of the teacher extractor written by supervised
/// pretraining.
pub const TEACHER_PREFIX: &str = "teacher.";
/// Checkpoint prefix of the student and of `g_θ` in stage checkpoints.
pub const STUDENT_PREFIX: &str = "student.";
pub const FP_CLASSIFIER_PREFIX: &str = "fp_classifier.";

fn is_extractor(name: &str) -> bool {
    name.starts_with("extractor.")
}

impl FpTeacher {
    /// Fresh classifier only; the extractor stays at its random init. Used by
    /// tests and as the skeleton for [`build_teacher`].
    fn skeleton(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let backbone = FpBackbone::build(&mut ps, cfg, ParamGroup::Frozen, &mut rng::stream(seed, streams::TEACHER_EXTRACTOR))?;
        let classifier = Linear::build(
            &mut ps,
            "classifier.",
            cfg.d_fp(),
            cfg.num_classes,
            ParamGroup::FpClassifier,
            &mut rng::stream(seed, streams::FP_CLASSIFIER),
        )?;
        Ok(FpTeacher { params: ps, backbone, classifier, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// `v₁ = h_ζ(x)` with batchnorm in inference mode.
    pub fn features(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.backbone.forward(&mut self.params, tape, x, false)
    }

    /// `(v₁, p₁)` with `p₁ = softmax(g_θ(v₁))`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let v1 = self.features(tape, x)?;
        let logits = self.classifier.forward(&self.params, tape, v1, false)?;
        Ok((v1, tape.softmax(logits)?))
    }

    /// Hash of the frozen extractor tensors (parameters and running stats).
    pub fn extractor_hash(&self) -> String {
        let mut ck = Checkpoint::new(StageTag::None, 0, 0);
        self.params.export(&mut ck, "", is_extractor);
        ck.hash()
    }

    pub fn export_classifier(&self, ck: &mut Checkpoint) {
        self.params.export(ck, FP_CLASSIFIER_PREFIX, |n| n.starts_with("classifier."));
    }

    pub fn import_classifier(&mut self, ck: &Checkpoint) -> Result<()> {
        self.params.import(ck, FP_CLASSIFIER_PREFIX, |n| n.starts_with("classifier."))
    }
}

/// Loads the pretrained extractor from `weights` (tensors under
/// `teacher.extractor.*`) and freezes it; `g_θ` is freshly initialized from
/// `seed`.
pub fn build_teacher(cfg: &NetConfig, weights: &Checkpoint, seed: u64) -> Result<FpTeacher> {
    let mut t = FpTeacher::skeleton(cfg, seed)?;
    t.params.import(weights, TEACHER_PREFIX, is_extractor)?;
    Ok(t)
}

/// Builds a teacher whose extractor is just its seeded random init.
pub fn random_teacher(cfg: &NetConfig, seed: u64) -> Result<FpTeacher> {
    FpTeacher::skeleton(cfg, seed)
}

/// Binary student: extractor `k_φ`, classifier `l_φ`, optional adapter.
#[derive(Debug, Clone)]
pub struct BinaryStudent {
    pub params: ParamSet,
    pub mode: BinarizeMode,
    backbone: BinaryBackbone,
    adapter: Option<Linear>,
    classifier: Linear,
    cfg: NetConfig,
}

/// Outputs of one paired forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PairOutput {
    pub v1: Var,
    /// Raw student features `k_φ(x)`.
    pub v2: Var,
    /// Student features as fed to the feature-similarity loss (after the
    /// adapter when one is present).
    pub v2_matched: Var,
    pub p1: Var,
    pub p2: Var,
}

impl BinaryStudent {
    fn fresh(cfg: &NetConfig, mode: BinarizeMode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, streams::STUDENT);
        let mut ps = ParamSet::new();
        let backbone = BinaryBackbone::build(&mut ps, cfg, &mut rng)?;
        let adapter = if cfg.d_bin() != cfg.d_fp() {
            Some(Linear::build(&mut ps, "adapter.", cfg.d_bin(), cfg.d_fp(), ParamGroup::BinaryExtractor, &mut rng)?)
        } else {
            None
        };
        let classifier = Linear::build(&mut ps, "classifier.", cfg.d_bin(), cfg.num_classes, ParamGroup::BinaryClassifier, &mut rng)?;
        Ok(BinaryStudent { params: ps, mode, backbone, adapter, classifier, cfg: cfg.clone() })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// `v₂ = k_φ(x)`. `train` selects batch statistics (and running-stat
    /// updates) over the stored running statistics.
    pub fn features(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        self.backbone.forward(&mut self.params, tape, x, self.mode, train)
    }

    /// `(v₂, adapted v₂, p₂)`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<(Var, Var, Var)> {
        let v2 = self.features(tape, x, train)?;
        let matched = match &self.adapter {
            Some(a) => a.forward(&self.params, tape, v2, false)?,
            None => v2,
        };
        let logits = self.classifier.forward(&self.params, tape, v2, self.mode.binarize_weights())?;
        Ok((v2, matched, tape.softmax(logits)?))
    }

    /// Whole student state (extractor, adapter, classifier, buffers).
    pub fn export(&self, ck: &mut Checkpoint) {
        self.params.export(ck, STUDENT_PREFIX, |_| true);
    }

    /// Extractor only: what BURN returns.
    pub fn export_extractor(&self, ck: &mut Checkpoint) {
        self.params.export(ck, STUDENT_PREFIX, is_extractor);
    }

    /// Builds a student carrying only the extractor weights of `ck`; the
    /// adapter and classifier keep their seeded init.
    pub fn from_extractor_checkpoint(cfg: &NetConfig, mode: BinarizeMode, ck: &Checkpoint) -> Result<Self> {
        let mut s = BinaryStudent::fresh(cfg, mode, ck.seed)?;
        s.params.import(ck, STUDENT_PREFIX, is_extractor)?;
        Ok(s)
    }

    /// Hash of extractor parameters and running statistics.
    pub fn extractor_hash(&self) -> String {
        let mut ck = Checkpoint::new(StageTag::None, 0, 0);
        self.params.export(&mut ck, "", is_extractor);
        ck.hash()
    }
}

/// Creates a student in `mode`, either freshly initialized from `seed` or
/// restored from a checkpoint holding the full student state.
///
/// A stage-2 checkpoint cannot seed an activations-only student.
pub fn make_student(cfg: &NetConfig, mode: BinarizeMode, seed: u64, init: Option<&Checkpoint>) -> Result<BinaryStudent> {
    let mut s = BinaryStudent::fresh(cfg, mode, seed)?;
    if let Some(ck) = init {
        let backwards = matches!(mode, BinarizeMode::ActivationsOnly | BinarizeMode::None) && ck.stage == StageTag::Stage2;
        if backwards {
            return contract_err(format!("cannot initialize a {mode:?} student from a stage-2 checkpoint"));
        }
        s.params.import(ck, STUDENT_PREFIX, |_| true)?;
    }
    Ok(s)
}

/// Runs teacher and student on the same input batch.
///
/// Gradients reach `g_θ` through `p₁` and the student through `v₂`/`p₂`;
/// the teacher extractor is bound as constants.
pub fn forward_pair(teacher: &mut FpTeacher, student: &mut BinaryStudent, tape: &mut Tape, x: Var) -> Result<PairOutput> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != teacher.cfg.in_channels || shape[1] != student.cfg.in_channels {
        return Err(Error::Dimension(format!("input {shape:?} does not match the network stems")));
    }
    if teacher.cfg.num_classes != student.cfg.num_classes {
        return contract_err("teacher and student classifier widths differ");
    }
    let (v1, p1) = teacher.forward(tape, x)?;
    let (v2, v2_matched, p2) = student.forward(tape, x, true)?;
    if tape.shape(v1) != tape.shape(v2_matched) {
        return Err(Error::Dimension(format!(
            "feature shapes {:?} vs {:?}",
            tape.shape(v1),
            tape.shape(v2_matched)
        )));
    }
    Ok(PairOutput { v1, v2, v2_matched, p1, p2 })
}

/// Supervised FP network used to pretrain the teacher extractor: the FP
/// backbone with a label head.
#[derive(Debug, Clone)]
pub struct SupervisedFpNet {
    pub params: ParamSet,
    backbone: FpBackbone,
    head: Linear,
}

impl SupervisedFpNet {
    pub fn new(cfg: &NetConfig, num_labels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let backbone = FpBackbone::build(&mut ps, cfg, ParamGroup::FpClassifier, &mut rng::stream(seed, streams::TEACHER_EXTRACTOR))?;
        let head = Linear::build(&mut ps, "head.", cfg.d_fp(), num_labels, ParamGroup::FpClassifier, &mut rng::stream(seed, streams::TEACHER_HEAD))?;
        Ok(SupervisedFpNet { params: ps, backbone, head })
    }

    pub fn logits(&mut self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let f = self.backbone.forward(&mut self.params, tape, x, train)?;
        self.head.forward(&self.params, tape, f, false)
    }

    /// Everything under `teacher.`: extractor, running stats and the head.
    pub fn to_checkpoint(&self, iteration: u64, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(StageTag::None, iteration, seed);
        self.params.export(&mut ck, TEACHER_PREFIX, |_| true);
        ck
    }

    pub fn load(cfg: &NetConfig, num_labels: usize, ck: &Checkpoint) -> Result<Self> {
        let mut net = SupervisedFpNet::new(cfg, num_labels, ck.seed)?;
        net.params.import(ck, TEACHER_PREFIX, |_| true)?;
        Ok(net)
    }
}
