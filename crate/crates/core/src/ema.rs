//! Toy simulation of a backbone vector random-walking under noisy updates
//! while a target vector tracks it by exponential moving average, measured
//! either on the raw vectors or on their signs.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, streams, Rng};
use crate::tape::sign;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaMode {
    Fp,
    Binary,
}

impl FromStr for EmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(EmaMode::Fp),
            "binary" => Ok(EmaMode::Binary),
            _ => Err(Error::Config(format!("unknown mode `{s}` (fp|binary)"))),
        }
    }
}

impl fmt::Display for EmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmaMode::Fp => "fp",
            EmaMode::Binary => "binary",
        })
    }
}

/// What the trace records at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    /// [`distance`] as is.
    Raw,
    /// [`distance`] divided by the length of the backbone in the measured
    /// representation: `‖b‖` in FP mode and `√dim` (the length of any sign
    /// vector) in binary mode.
    Relative,
}

impl FromStr for DistanceMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(DistanceMetric::Raw),
            "relative" => Ok(DistanceMetric::Relative),
            _ => Err(Error::Config(format!("unknown metric `{s}` (raw|relative)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaSimConfig {
    pub dim: usize,
    pub eta: f32,
    pub tau: f32,
    pub iters: usize,
    pub runs: usize,
    pub mode: EmaMode,
    pub metric: DistanceMetric,
    pub seed: u64,
}

impl Default for EmaSimConfig {
    fn default() -> Self {
        EmaSimConfig {
            dim: 100,
            eta: 4.8,
            tau: 0.99,
            iters: 100,
            runs: 10,
            mode: EmaMode::Fp,
            metric: DistanceMetric::Relative,
            seed: 0,
        }
    }
}

impl EmaSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0,1]", self.tau)));
        }
        if self.dim == 0 || self.runs == 0 {
            return Err(Error::Config("dim and runs must be at least 1".into()));
        }
        if !self.eta.is_finite() {
            return Err(Error::Config("eta must be finite".into()));
        }
        Ok(())
    }
}

/// One update with an explicit noise vector: `b ← b + η·Δ`, then
/// `t ← τ·t + (1−τ)·b` using the updated `b`.
pub fn ema_step_with(backbone: &mut [f32], target: &mut [f32], delta: &[f32], eta: f32, tau: f32) {
    for ((b, t), d) in backbone.iter_mut().zip(target.iter_mut()).zip(delta) {
        *b += eta * d;
        *t = tau * *t + (1.0 - tau) * *b;
    }
}

/// One update with `Δ ~ N(0, I)` drawn from `rng`.
pub fn ema_step(backbone: &mut [f32], target: &mut [f32], eta: f32, tau: f32, rng: &mut Rng) {
    let delta: Vec<f32> = (0..backbone.len()).map(|_| StandardNormal.sample(rng)).collect();
    ema_step_with(backbone, target, &delta, eta, tau);
}

/// `‖b − t‖₂` in FP mode, `‖sign(b) − sign(t)‖₂` in binary mode.
pub fn distance(backbone: &[f32], target: &[f32], mode: EmaMode) -> f32 {
    let sq: f64 = backbone
        .iter()
        .zip(target)
        .map(|(&b, &t)| {
            let d = match mode {
                EmaMode::Fp => b as f64 - t as f64,
                EmaMode::Binary => (sign(b) - sign(t)) as f64,
            };
            d * d
        })
        .sum();
    sq.sqrt() as f32
}

fn measure(b: &[f32], t: &[f32], mode: EmaMode, metric: DistanceMetric) -> f32 {
    let d = distance(b, t, mode);
    match (metric, mode) {
        (DistanceMetric::Raw, _) => d,
        (DistanceMetric::Relative, EmaMode::Binary) => d / (b.len() as f32).sqrt(),
        (DistanceMetric::Relative, EmaMode::Fp) => {
            let norm = b.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 { (d as f64 / norm) as f32 } else { 0.0 }
        }
    }
}

/// Per-run series and their across-run mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaTrace {
    pub mode: EmaMode,
    /// `runs × (iters + 1)`; entry 0 of each run is the shared init.
    pub runs: Vec<Vec<f32>>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl EmaTrace {
    pub fn final_mean(&self) -> f32 {
        *self.mean.last().unwrap()
    }

    pub fn final_std(&self) -> f32 {
        *self.std.last().unwrap()
    }

    /// `mode,run,iter,distance` rows.
    pub fn write_runs_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "mode,run,iter,distance")?;
        for (r, series) in self.runs.iter().enumerate() {
            for (i, d) in series.iter().enumerate() {
                writeln!(w, "{},{r},{i},{d}", self.mode)?;
            }
        }
        Ok(())
    }

    /// `mode,iter,mean,std` rows.
    pub fn write_aggregate_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "mode,iter,mean,std")?;
        for (i, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(w, "{},{i},{m},{s}", self.mode)?;
        }
        Ok(())
    }
}

/// Runs `cfg.runs` independent trajectories in parallel. Run `r` draws its
/// shared initial vector and its noise from stream `(seed, r)`, so FP and
/// binary simulations with the same seed follow the same trajectories.
pub fn run_sim(cfg: &EmaSimConfig) -> Result<EmaTrace> {
    cfg.validate()?;
    let runs: Vec<Vec<f32>> = (0..cfg.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, streams::EMA_BASE + r as u64);
            let mut b: Vec<f32> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut t = b.clone();
            let mut out = Vec::with_capacity(cfg.iters + 1);
            out.push(measure(&b, &t, cfg.mode, cfg.metric));
            for _ in 0..cfg.iters {
                ema_step(&mut b, &mut t, cfg.eta, cfg.tau, &mut rng);
                out.push(measure(&b, &t, cfg.mode, cfg.metric));
            }
            out
        })
        .collect();
    let n = runs.len() as f64;
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for i in 0..=cfg.iters {
        let m = runs.iter().map(|s| s[i] as f64).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|s| (s[i] as f64 - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m as f32);
        std.push(var.sqrt() as f32);
    }
    Ok(EmaTrace { mode: cfg.mode, runs, mean, std })
}
