//! The BURN objective: KL divergence between the two classifiers' outputs,
//! a feature-similarity term between the two extractors, and the
//! time-dependent weight `λ(t)` that mixes them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{contract_err, Error, Result};
use crate::tape::{Tape, Var};

/// Additive floor inside the KL logarithms.
pub const LOG_FLOOR: f32 = 1e-12;
/// Row-sum tolerance accepted by [`kl_div`].
pub const PROB_TOL: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleShape {
    /// Smooth cosine annealing from `λ₀` to `λ_Tmax`.
    CosineAnneal,
    /// `λ(t) = λ₀`.
    Constant,
    /// `λ₀` for the first half, `λ_Tmax` afterwards.
    HeavisideStep,
}

impl FromStr for ScheduleShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleShape::CosineAnneal),
            "constant" => Ok(ScheduleShape::Constant),
            "heaviside" => Ok(ScheduleShape::HeavisideStep),
            _ => Err(Error::Config(format!("unknown lambda shape `{s}`"))),
        }
    }
}

impl fmt::Display for ScheduleShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleShape::CosineAnneal => "cosine",
            ScheduleShape::Constant => "constant",
            ScheduleShape::HeavisideStep => "heaviside",
        })
    }
}

/// Balancing weight between the KL and feature-similarity terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f32,
    pub lambda_tmax: f32,
    pub t_max: u64,
    pub shape: ScheduleShape,
}

impl LambdaSchedule {
    pub const DEFAULT_LAMBDA0: f32 = 0.9;
    pub const DEFAULT_LAMBDA_TMAX: f32 = 0.7;

    pub fn new(lambda0: f32, lambda_tmax: f32, t_max: u64, shape: ScheduleShape) -> Result<Self> {
        let unit = 0.0..=1.0;
        if !unit.contains(&lambda0) || !unit.contains(&lambda_tmax) {
            return Err(Error::Config(format!(
                "lambda values must lie in [0,1], got {lambda0} and {lambda_tmax}"
            )));
        }
        if t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(LambdaSchedule { lambda0, lambda_tmax, t_max, shape })
    }

    pub fn cosine(t_max: u64) -> Self {
        LambdaSchedule::new(Self::DEFAULT_LAMBDA0, Self::DEFAULT_LAMBDA_TMAX, t_max, ScheduleShape::CosineAnneal).unwrap()
    }
}

/// `λ(t)` for `0 ≤ t ≤ T_max`.
pub fn lambda_at(s: &LambdaSchedule, t: u64) -> Result<f32> {
    if t > s.t_max {
        return contract_err(format!("t = {t} outside [0, {}]", s.t_max));
    }
    Ok(match s.shape {
        ScheduleShape::Constant => s.lambda0,
        ScheduleShape::HeavisideStep => {
            // λ₀ while t < T_max/2
            if 2 * t < s.t_max {
                s.lambda0
            } else {
                s.lambda_tmax
            }
        }
        ScheduleShape::CosineAnneal => {
            if t == 0 {
                return Ok(s.lambda0);
            }
            if t == s.t_max {
                return Ok(s.lambda_tmax);
            }
            let (l0, lt) = (widen(s.lambda0), widen(s.lambda_tmax));
            let c = ((PI * t as f64 / s.t_max as f64).cos() + 1.0) / 2.0;
            (lt - (lt - l0) * c) as f32
        }
    })
}

/// Widens through the shortest decimal form, so `0.9f32` becomes `0.9f64`
/// rather than `0.89999997615…`. Averaging the raw f32 values of 0.9 and 0.7
/// lands exactly on an f32 rounding tie.
fn widen(x: f32) -> f64 {
    x.to_string().parse().expect("f32 display is valid f64")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FsVariant {
    /// `1 − cos(v₁, v₂)`, bounded in `[0, 2]`.
    Cosine,
    /// `‖v₁ − v₂‖₁`.
    L1,
    /// `‖v₁ − v₂‖₂`.
    L2,
}

impl FromStr for FsVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(FsVariant::Cosine),
            "l1" => Ok(FsVariant::L1),
            "l2" => Ok(FsVariant::L2),
            _ => Err(Error::Config(format!("unknown feature-similarity variant `{s}`"))),
        }
    }
}

impl fmt::Display for FsVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FsVariant::Cosine => "cosine",
            FsVariant::L1 => "l1",
            FsVariant::L2 => "l2",
        })
    }
}

fn check_probs(tape: &Tape, p: Var, what: &str) -> Result<()> {
    let shape = tape.shape(p);
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("{what}: expected [B, K], got {shape:?}")));
    }
    for (r, row) in tape.data(p).chunks(shape[1]).enumerate() {
        if row.iter().any(|&v| v < 0.0) {
            return contract_err(format!("{what}: row {r} has a negative entry"));
        }
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > PROB_TOL as f64 {
            return contract_err(format!("{what}: row {r} sums to {s}"));
        }
    }
    Ok(())
}

/// Batch mean of `Σ_k p₂ log(p₂/p₁)`, i.e. `D_KL(p₂ ‖ p₁)`, with
/// [`LOG_FLOOR`] added inside both logarithms. Differentiable in both
/// arguments.
pub fn kl_div(tape: &mut Tape, p2: Var, p1: Var) -> Result<Var> {
    if tape.shape(p1) != tape.shape(p2) {
        return Err(Error::Dimension(format!(
            "kl_div: {:?} vs {:?}",
            tape.shape(p2),
            tape.shape(p1)
        )));
    }
    check_probs(tape, p2, "kl_div p2")?;
    check_probs(tape, p1, "kl_div p1")?;
    let a = tape.add_scalar(p2, LOG_FLOOR);
    let b = tape.add_scalar(p1, LOG_FLOOR);
    let la = tape.log(a);
    let lb = tape.log(b);
    let diff = tape.sub(la, lb)?;
    let terms = tape.mul(p2, diff)?;
    let rows = tape.sum_rows(terms)?;
    Ok(tape.mean(rows))
}

/// Batch mean of a per-sample distance between `v1` and `v2` (`[B, D]`).
///
/// The cosine variant divides by norms clamped below at
/// [`NORM_EPS`](crate::tape::NORM_EPS), so an all-zero row yields distance 1
/// instead of a division by zero.
pub fn feature_similarity(tape: &mut Tape, v1: Var, v2: Var, variant: FsVariant) -> Result<Var> {
    if tape.shape(v1) != tape.shape(v2) || tape.shape(v1).len() != 2 {
        return Err(Error::Dimension(format!(
            "feature_similarity: {:?} vs {:?}",
            tape.shape(v1),
            tape.shape(v2)
        )));
    }
    let per_row = match variant {
        FsVariant::Cosine => {
            let dot = tape.dot(v1, v2)?;
            let n1 = tape.l2_norm(v1)?;
            let n2 = tape.l2_norm(v2)?;
            let denom = tape.mul(n1, n2)?;
            let cos = tape.div(dot, denom)?;
            let neg = tape.scale(cos, -1.0);
            tape.add_scalar(neg, 1.0)
        }
        FsVariant::L1 => {
            let d = tape.sub(v1, v2)?;
            let a = tape.abs(d);
            tape.sum_rows(a)?
        }
        FsVariant::L2 => {
            let d = tape.sub(v1, v2)?;
            tape.l2_norm(d)?
        }
    };
    Ok(tape.mean(per_row))
}

/// One row of training telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub iter: u64,
    pub stage: u8,
    pub lambda: f32,
    pub loss_kl: f32,
    pub loss_fs: f32,
    pub loss_total: f32,
    pub gnorm_fp_classifier: f32,
    pub gnorm_bin_extractor: f32,
    pub gnorm_bin_classifier: f32,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,stage,lambda,loss_kl,loss_fs,loss_total,gnorm_fp_classifier,gnorm_bin_extractor,gnorm_bin_classifier";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.stage,
            self.lambda,
            self.loss_kl,
            self.loss_fs,
            self.loss_total,
            self.gnorm_fp_classifier,
            self.gnorm_bin_extractor,
            self.gnorm_bin_classifier
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Data(format!("telemetry row has {} fields", f.len())));
        }
        let bad = || Error::Data(format!("bad telemetry row `{line}`"));
        let num = |s: &str| s.parse::<f32>().map_err(|_| bad());
        Ok(LossReport {
            iter: f[0].parse().map_err(|_| bad())?,
            stage: f[1].parse().map_err(|_| bad())?,
            lambda: num(f[2])?,
            loss_kl: num(f[3])?,
            loss_fs: num(f[4])?,
            loss_total: num(f[5])?,
            gnorm_fp_classifier: num(f[6])?,
            gnorm_bin_extractor: num(f[7])?,
            gnorm_bin_classifier: num(f[8])?,
        })
    }
}

/// Terms of the combined objective, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub kl: Var,
    pub fs: Var,
    pub lambda: f32,
}

/// `(1 − λ(t))·D_KL(p₂‖p₁) + λ(t)·L_FS(v₁, v₂)`.
///
/// The returned report carries the raw terms and `λ(t)`; gradient norms are
/// filled in by the trainer.
#[allow(clippy::too_many_arguments)]
pub fn burn_objective(
    tape: &mut Tape,
    p1: Var,
    p2: Var,
    v1: Var,
    v2: Var,
    t: u64,
    schedule: &LambdaSchedule,
    variant: FsVariant,
) -> Result<(Objective, LossReport)> {
    let lambda = lambda_at(schedule, t)?;
    combine(tape, p1, p2, v1, v2, lambda, variant)
}

/// [`burn_objective`] with an explicit `λ`.
pub fn combine(tape: &mut Tape, p1: Var, p2: Var, v1: Var, v2: Var, lambda: f32, variant: FsVariant) -> Result<(Objective, LossReport)> {
    let kl = kl_div(tape, p2, p1)?;
    let fs = feature_similarity(tape, v1, v2, variant)?;
    let a = tape.scale(kl, 1.0 - lambda);
    let b = tape.scale(fs, lambda);
    let total = tape.add(a, b)?;
    let report = LossReport {
        iter: 0,
        lambda,
        loss_kl: tape.value(kl).item(),
        loss_fs: tape.value(fs).item(),
        loss_total: tape.value(total).item(),
        ..LossReport::default()
    };
    Ok((Objective { total, kl, fs, lambda }, report))
}
