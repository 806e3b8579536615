//! Shared test oracles: straightforward f64 reference implementations of
//! the tape ops and a central-difference gradient checker built on them.
#![allow(dead_code)]

use burnkit::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcases;
pub mod reference;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An input tensor of a gradient check, already rounded to f32 precision.
#[derive(Debug, Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        Input { shape: shape.to_vec(), data }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

pub fn uniform(rng: &mut TestRng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product();
    Input::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values with `lo ≤ |x| ≤ hi` and random sign, keeping clear of a kink at 0.
pub fn away_from_zero(rng: &mut TestRng, shape: &[usize], lo: f64, hi: f64) -> Input {
    let n = shape.iter().product();
    Input::new(
        shape,
        (0..n)
            .map(|_| {
                let m = rng.random_range(lo..hi);
                if rng.random::<bool>() { m } else { -m }
            })
            .collect(),
    )
}

/// Values in `(-2, 2)` at least `margin` away from ±1 (the clip points of
/// the straight-through window).
pub fn away_from_clip(rng: &mut TestRng, shape: &[usize], margin: f64) -> Input {
    let n = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = rng.random_range(-2.0..2.0);
        if (v.abs() - 1.0).abs() > margin {
            out.push(v);
        }
    }
    Input::new(shape, out)
}

pub const FD_EPS: f64 = 1e-3;
/// Gradient entries are compared relative to `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-2;

/// Compares tape gradients of `Σ r ⊙ f(inputs)` (with a random weighting `r`)
/// against central differences of the f64 reference. Returns the largest
/// relative error over all entries of all inputs.
pub fn grad_check(
    inputs: &[Input],
    weight_seed: u64,
    tape_fn: impl Fn(&mut Tape, &[Var]) -> burnkit::Result<Var>,
    ref_fn: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let raw: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let out_len = ref_fn(&raw).len();
    let mut wr = rng(weight_seed ^ 0xA5A5);
    let r: Vec<f64> = (0..out_len).map(|_| wr.random_range(-1.0..1.0) as f32 as f64).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|i| tape.variable(i.tensor())).collect();
    let out = tape_fn(&mut tape, &vars).expect("tape op failed");
    let out_shape = tape.shape(out).to_vec();
    assert_eq!(tape.value(out).numel(), out_len, "tape and reference output sizes differ");
    let rv = tape.constant(Tensor::new(&out_shape, r.iter().map(|&v| v as f32).collect()).unwrap());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let ref_loss = |x: &[Vec<f64>]| -> f64 { ref_fn(x).iter().zip(&r).map(|(a, b)| a * b).sum() };
    let mut worst = 0.0f64;
    let mut x = raw.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("input has no gradient").to_vec();
        for j in 0..x[k].len() {
            let orig = x[k][j];
            x[k][j] = orig + FD_EPS;
            let up = ref_loss(&x);
            x[k][j] = orig - FD_EPS;
            let down = ref_loss(&x);
            x[k][j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}
