//! Binarization modes, weight scaling and bit-packed XNOR-popcount kernels.
//!
//! The training path keeps binarized values as ±1.0 f32 on the tape (see
//! [`Tape::sign_ste`](crate::Tape::sign_ste), [`Tape::rsign`](crate::Tape::rsign),
//! [`Tape::binarize_weight`](crate::Tape::binarize_weight)). The packed path
//! here is inference-only.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tape::sign;
use crate::tensor::Tensor;

/// Which parts of a binary network are binarized in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinarizeMode {
    /// Plain floating-point network.
    None,
    /// Stage 1: activations are binarized, weights stay latent f32.
    ActivationsOnly,
    /// Stage 2: activations and (scaled) weights are binarized.
    FullBinary,
}

impl BinarizeMode {
    pub fn binarize_activations(self) -> bool {
        !matches!(self, BinarizeMode::None)
    }

    pub fn binarize_weights(self) -> bool {
        matches!(self, BinarizeMode::FullBinary)
    }
}

/// Training stage of the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageMode {
    ActivationsOnly,
    FullBinary,
}

impl StageMode {
    /// Numeric tag used in checkpoints and telemetry (1 or 2).
    pub fn tag(self) -> u8 {
        match self {
            StageMode::ActivationsOnly => 1,
            StageMode::FullBinary => 2,
        }
    }
}

impl From<StageMode> for BinarizeMode {
    fn from(s: StageMode) -> Self {
        match s {
            StageMode::ActivationsOnly => BinarizeMode::ActivationsOnly,
            StageMode::FullBinary => BinarizeMode::FullBinary,
        }
    }
}

/// Per-output-channel mean of `|w|` over all but the first axis.
pub fn channel_scale(w: &Tensor) -> Result<Vec<f32>> {
    let Some(&f) = w.shape().first() else {
        return dim_err("channel_scale on a scalar");
    };
    let per = w.numel() / f;
    Ok(w
        .data()
        .chunks(per)
        .map(|row| (row.iter().map(|v| v.abs() as f64).sum::<f64>() / per as f64) as f32)
        .collect())
}

/// Sign bits of a row-major matrix, one bit per element (`+1 → 1`).
///
/// Each row starts on a fresh u64; unused high bits of the last word are
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
    scale: Vec<f32>,
}

impl PackedMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.cols.div_ceil(64)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        let w = self.words_per_row();
        &self.words[r * w..(r + 1) * w]
    }

    /// Per-row scale factors (mean `|x|` of the source row).
    pub fn scale(&self) -> &[f32] {
        &self.scale
    }

    /// The ±1 matrix encoded by the bits.
    pub fn unpack(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            let words = self.row_words(r);
            for c in 0..self.cols {
                let bit = (words[c / 64] >> (c % 64)) & 1;
                out.push(if bit == 1 { 1.0 } else { -1.0 });
            }
        }
        out
    }

    /// Writes `rows: u32, cols: u32` then the words, all little-endian.
    /// Scale factors are not part of the encoding.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.rows as u32).to_le_bytes())?;
        w.write_all(&(self.cols as u32).to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`write_to`](Self::write_to); scales come back as 1.0.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rows = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let cols = u32::from_le_bytes(b4) as usize;
        let wpr = cols.div_ceil(64);
        let mut words = Vec::with_capacity(rows * wpr);
        let mut b8 = [0u8; 8];
        for i in 0..rows * wpr {
            r.read_exact(&mut b8)?;
            let word = u64::from_le_bytes(b8);
            let used = cols - (i % wpr) * 64;
            if used < 64 && word >> used != 0 {
                return Err(Error::Format {
                    offset: 8 + 8 * i as u64,
                    msg: "padding bits set".into(),
                });
            }
            words.push(word);
        }
        Ok(PackedMatrix { rows, cols, words, scale: vec![1.0; rows] })
    }
}

/// Packs the signs of a row-major `rows × cols` matrix (`sign(0) = +1`).
pub fn pack_signs(m: &[f32], rows: usize, cols: usize) -> Result<PackedMatrix> {
    if m.len() != rows * cols {
        return dim_err(format!("pack_signs: {} values for {rows}x{cols}", m.len()));
    }
    let wpr = cols.div_ceil(64);
    let mut words = vec![0u64; rows * wpr];
    let mut scale = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let dst = &mut words[r * wpr..(r + 1) * wpr];
        for (c, &v) in row.iter().enumerate() {
            if sign(v) > 0.0 {
                dst[c / 64] |= 1u64 << (c % 64);
            }
        }
        let mean_abs = if cols == 0 {
            0.0
        } else {
            (row.iter().map(|v| v.abs() as f64).sum::<f64>() / cols as f64) as f32
        };
        scale.push(mean_abs);
    }
    Ok(PackedMatrix { rows, cols, words, scale })
}

/// Integer product of two ±1 matrices: `a (m×k)` times `b (k×n)`, with `b`
/// supplied transposed as an `n × k` packed matrix (rows of `b_t` are the
/// columns of `b`).
///
/// Entry `(i, j)` is `k − 2·popcount(a_i XOR b_j)`.
pub fn xnor_gemm(a: &PackedMatrix, b_t: &PackedMatrix) -> Result<Vec<i32>> {
    if a.cols != b_t.cols {
        return dim_err(format!(
            "xnor_gemm: inner dims {} and {} differ",
            a.cols, b_t.cols
        ));
    }
    let (m, n, k) = (a.rows, b_t.rows, a.cols as i32);
    let mut out = vec![0i32; m * n];
    if n == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let ai = a.row_words(i);
        for (j, o) in row.iter_mut().enumerate() {
            let diff: u32 = ai
                .iter()
                .zip(b_t.row_words(j))
                .map(|(x, y)| (x ^ y).count_ones())
                .sum();
            *o = k - 2 * diff as i32;
        }
    });
    debug_assert_eq!(out.len(), m * n);
    Ok(out)
}

/// `a (m×k) · b_tᵀ` through the f32 GEMM kernel, rounded to integers.
/// Exact for ±1 inputs while `k < 2²⁴`.
pub fn float_gemm_signs(a: &[f32], b_t: &[f32], m: usize, k: usize, n: usize) -> Result<Vec<i32>> {
    if a.len() != m * k || b_t.len() != n * k {
        return dim_err(format!("float_gemm_signs: buffers do not match {m}x{k} · ({n}x{k})ᵀ"));
    }
    let mut c = vec![0.0f32; m * n];
    crate::kernels::gemm(m, k, n, a, false, b_t, true, &mut c, 0.0);
    Ok(c.iter().map(|&v| v.round() as i32).collect())
}

/// Result of [`xnor_bench`]. Throughputs are in multiply-accumulates per
/// second (`m·k·n / seconds`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XnorBench {
    pub exact: bool,
    pub packed_macs_per_sec: f64,
    pub float_macs_per_sec: f64,
}

/// Random ±1 operands of the given shape, multiplied both by
/// [`xnor_gemm`] and by the float GEMM, `reps` times each.
pub fn xnor_bench(m: usize, k: usize, n: usize, reps: usize, seed: u64) -> Result<XnorBench> {
    if m == 0 || k == 0 || n == 0 || reps == 0 {
        return Err(Error::Config(format!("xnor-bench needs positive sizes, got m={m} k={k} n={n} reps={reps}")));
    }
    use rand::Rng as _;
    let mut rng = crate::rng::stream(seed, crate::rng::streams::BENCH);
    let mut draw = |len: usize| -> Vec<f32> { (0..len).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect() };
    let (a, b_t) = (draw(m * k), draw(n * k));
    let (pa, pb) = (pack_signs(&a, m, k)?, pack_signs(&b_t, n, k)?);
    let macs = (m * k * n * reps) as f64;

    let t0 = std::time::Instant::now();
    let mut packed = Vec::new();
    for _ in 0..reps {
        packed = xnor_gemm(&pa, &pb)?;
    }
    let packed_secs = t0.elapsed().as_secs_f64().max(1e-9);

    let t0 = std::time::Instant::now();
    let mut float = Vec::new();
    for _ in 0..reps {
        float = float_gemm_signs(&a, &b_t, m, k, n)?;
    }
    let float_secs = t0.elapsed().as_secs_f64().max(1e-9);

    Ok(XnorBench {
        exact: packed == float,
        packed_macs_per_sec: macs / packed_secs,
        float_macs_per_sec: macs / float_secs,
    })
}
