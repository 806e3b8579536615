//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into each node's tensor; repeated calls accumulate
//! until [`Tape::zero_grad`].
//!
//! Layout is row-major; image tensors are NCHW. Channel-wise ops treat axis 1
//! as the channel axis for any tensor of rank ≥ 2.

use crate::error::{contract_err, dim_err, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Records which parameter a leaf node was bound from.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Binding {
    pub set_id: u64,
    pub index: usize,
    pub var: Var,
}

/// Batchnorm behaviour for one call.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
}

/// Batch statistics observed by a training-mode batchnorm call.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, as used for running-average updates.
    pub var: Vec<f32>,
}

pub const BN_EPS: f32 = 1e-5;
/// Lower bound applied to row norms before they are used as divisors.
pub const NORM_EPS: f32 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    GlobalAvgPool(Var),
    AvgPool2d {
        x: Var,
        k: usize,
    },
    RepeatChannels {
        x: Var,
        times: usize,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    Reshape(Var),
    SignSte(Var),
    RSign {
        x: Var,
        beta: Var,
    },
    RPrelu {
        x: Var,
        gamma: Var,
        zeta: Var,
        slope: Var,
    },
    BinarizeWeight {
        w: Var,
        scale: Vec<f32>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::Dot(..) => "dot",
            Op::L2Norm(..) => "l2_norm",
            Op::Matmul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Prelu { .. } => "prelu",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::RepeatChannels { .. } => "repeat_channels",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::SignSte(..) => "sign_ste",
            Op::RSign { .. } => "rsign",
            Op::RPrelu { .. } => "rprelu",
            Op::BinarizeWeight { .. } => "binarize_weight",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

/// `sign` with the tie `sign(0) = +1`.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Splits a rank ≥ 2 shape into (outer, channels, inner) around axis 1.
fn channel_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return dim_err(format!("channel-wise op needs rank >= 2, got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn rows_split(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.split_last() {
        Some((&d, rest)) => Ok((rest.iter().product(), d)),
        None => dim_err("row-wise op on a scalar"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: &[usize], data: Vec<f32>, op: Op, inputs: &[Var]) -> Var {
        let t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push(t, op, inputs)
    }

    /// Adds a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub(crate) fn bind(&mut self, set_id: u64, index: usize, value: &Tensor, trainable: bool) -> Var {
        let mut t = Tensor::new(value.shape(), value.data().to_vec()).unwrap();
        t.set_requires_grad(trainable);
        let var = self.leaf(t);
        if trainable {
            self.bindings.push(Binding { set_id, index, var });
        }
        var
    }

    pub(crate) fn bindings(&self) -> &[Binding] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn channel_param(&self, x: Var, p: Var, what: &str) -> Result<(usize, usize, usize)> {
        let (o, c, i) = channel_split(self.shape(x))?;
        if self.value(p).numel() != c {
            return dim_err(format!(
                "{what}: parameter has {} entries, input has {c} channels",
                self.value(p).numel()
            ));
        }
        Ok((o, c, i))
    }

    // ---- elementwise -------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.make(&shape, data, op, &[a, b]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    /// Natural log. Non-positive inputs give -inf/NaN; callers add a floor.
    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f32::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f32::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        self.make(&[], vec![s as f32], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.data(a).iter().map(|&x| x as f64).sum();
        self.make(&[], vec![(s / n) as f32], Op::Mean(a), &[a])
    }

    /// Sums over the last axis.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, d) = rows_split(&shape)?;
        let data = self
            .data(a)
            .chunks(d)
            .map(|r| r.iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), rows);
        let out = row_shape(&shape);
        Ok(self.make(&out, data, Op::SumRows(a), &[a]))
    }

    /// Row-wise inner product over the last axis.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let shape = self.shape(a).to_vec();
        let (_, d) = rows_split(&shape)?;
        let data = self
            .data(a)
            .chunks(d)
            .zip(self.data(b).chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum::<f64>() as f32)
            .collect();
        Ok(self.make(&row_shape(&shape), data, Op::Dot(a, b), &[a, b]))
    }

    /// Row-wise Euclidean norm over the last axis, clamped below at
    /// [`NORM_EPS`]. The clamp has zero gradient.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, d) = rows_split(&shape)?;
        let data = self
            .data(a)
            .chunks(d)
            .map(|r| {
                let s: f64 = r.iter().map(|&x| (x as f64) * (x as f64)).sum();
                (s.sqrt() as f32).max(NORM_EPS)
            })
            .collect();
        Ok(self.make(&row_shape(&shape), data, Op::L2Norm(a), &[a]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.make(&[m, n], out, Op::Matmul(a, b), &[a, b]))
    }

    /// `x · wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return dim_err(format!("linear: input {sx:?}, weight {sw:?}"));
        }
        let (bsz, inp, out) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.value(b).numel() != out {
                return dim_err(format!("linear: bias {:?} for {out} outputs", self.shape(b)));
            }
        }
        let mut y = vec![0.0; bsz * out];
        gemm(bsz, inp, out, self.data(x), false, self.data(w), true, &mut y, 0.0);
        if let Some(b) = b {
            let bias = self.data(b);
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, bb)| *v += bb);
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.make(&[bsz, out], y, Op::Linear { x, w, b }, &inputs))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [F,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return dim_err(format!("conv2d: input {sx:?}, weight {sw:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be positive");
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return dim_err(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { c, h, w: wd, kh, kw, stride, pad, oh, ow };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * p];
        let mut y = vec![0.0; n * f * p];
        let xd = self.data(x);
        let wdat = self.data(w);
        for i in 0..n {
            let col = &mut cols[i * rows * p..(i + 1) * rows * p];
            im2col(&xd[i * c * h * wd..(i + 1) * c * h * wd], &geom, col);
            gemm(f, rows, p, wdat, false, col, false, &mut y[i * f * p..(i + 1) * f * p], 0.0);
        }
        Ok(self.make(&[n, f, oh, ow], y, Op::Conv2d { x, w, geom, cols }, &[x, w]))
    }

    // ---- activations and normalization -------------------------------

    /// Channel-wise PReLU: `x` if positive, else `slope[c]·x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (o, c, inner) = self.channel_param(x, slope, "prelu")?;
        let s = self.data(slope);
        let xd = self.data(x);
        let mut y = vec![0.0; xd.len()];
        for (i, (yv, &xv)) in y.iter_mut().zip(xd).enumerate() {
            let ch = (i / inner) % c;
            *yv = if xv > 0.0 { xv } else { s[ch] * xv };
        }
        debug_assert_eq!(y.len(), o * c * inner);
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, y, Op::Prelu { x, slope }, &[x, slope]))
    }

    /// Per-channel batch normalization with affine `gamma`/`beta`.
    ///
    /// In `Train` mode returns the batch statistics so the caller can update
    /// its running averages.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BnStats>)> {
        let (o, c, inner) = self.channel_param(x, gamma, "batchnorm2d")?;
        self.channel_param(x, beta, "batchnorm2d")?;
        let xd = self.data(x);
        let count = o * inner;
        let (mean, var_b, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for (i, &v) in xd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    mean[ch] += v as f64;
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (i, &v) in xd.iter().enumerate() {
                    let ch = (i / inner) % c;
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
                let var_b: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
                let unbiased = sq
                    .iter()
                    .map(|s| (s / (count.max(2) - 1) as f64) as f32)
                    .collect();
                let mean_f: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
                let stats = BnStats { mean: mean_f.clone(), var: unbiased };
                (mean_f, var_b.iter().map(|&v| v as f32).collect::<Vec<_>>(), Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err("batchnorm2d: running statistics length mismatch");
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f32> = var_b.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for i in 0..xd.len() {
            let ch = (i / inner) % c;
            xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
            y[i] = g[ch] * xhat[i] + b[ch];
        }
        let shape = self.shape(x).to_vec();
        let train = matches!(mode, BnMode::Train);
        let v = self.make(
            &shape,
            y,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// `[N, C, ...] → [N, C]` mean over all trailing axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, inner) = channel_split(self.shape(x))?;
        let data = self
            .data(x)
            .chunks(inner)
            .map(|r| (r.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        Ok(self.make(&[n, c], data, Op::GlobalAvgPool(x), &[x]))
    }

    /// `[N, C, H, W]` mean over non-overlapping `k×k` windows. Output size is
    /// `ceil(H/k) × ceil(W/k)`; edge windows average only the pixels they
    /// cover.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || k == 0 {
            return dim_err(format!("avg_pool2d needs [N,C,H,W] and k >= 1, got {shape:?}, k={k}"));
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let xs = self.data(x);
        let mut y = vec![0.0f32; nc * oh * ow];
        for p in 0..nc {
            let src = &xs[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y1, x1) = ((oy * k + k).min(h), (ox * k + k).min(w));
                    let mut s = 0.0f64;
                    for iy in oy * k..y1 {
                        for ix in ox * k..x1 {
                            s += src[iy * w + ix] as f64;
                        }
                    }
                    y[(p * oh + oy) * ow + ox] = (s / ((y1 - oy * k) * (x1 - ox * k)) as f64) as f32;
                }
            }
        }
        Ok(self.make(&[shape[0], shape[1], oh, ow], y, Op::AvgPool2d { x, k }, &[x]))
    }

    /// `[N, C, ...] → [N, C·times, ...]` with output channel `j` copying input
    /// channel `j mod C`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Result<Var> {
        let (n, c, inner) = channel_split(self.shape(x))?;
        if times == 0 {
            return dim_err("repeat_channels with times = 0");
        }
        let xs = self.data(x);
        let mut y = Vec::with_capacity(n * c * times * inner);
        for row in xs.chunks(c * inner) {
            for _ in 0..times {
                y.extend_from_slice(row);
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = c * times;
        Ok(self.make(&shape, y, Op::RepeatChannels { x, times }, &[x]))
    }

    /// Softmax over the last axis with max-subtraction. NaN inputs
    /// propagate to every entry of their row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, k) = rows_split(&shape)?;
        let mut y = self.data(x).to_vec();
        y.chunks_mut(k).for_each(softmax_row);
        Ok(self.make(&shape, y, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err(format!("cross_entropy: logits {shape:?}, {} labels", labels.len()));
        }
        let k = shape[1];
        if let Some(&l) = labels.iter().find(|&&l| l >= k) {
            return contract_err(format!("cross_entropy: label {l} >= {k} classes"));
        }
        let mut probs = self.data(logits).to_vec();
        probs.chunks_mut(k).for_each(softmax_row);
        let nll: f64 = probs
            .chunks(k)
            .zip(labels)
            .map(|(p, &l)| -(p[l].max(1e-30) as f64).ln())
            .sum();
        let loss = (nll / labels.len() as f64) as f32;
        Ok(self.make(
            &[],
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ---- binarization ------------------------------------------------

    /// Forward `sign(x)` (with `sign(0)=+1`); backward passes the gradient
    /// where `|x| ≤ 1` and blocks it elsewhere.
    pub fn sign_ste(&mut self, x: Var) -> Var {
        self.map(x, sign, Op::SignSte(x))
    }

    /// `sign_ste(x - beta[c])` with a learnable per-channel threshold.
    pub fn rsign(&mut self, x: Var, beta: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_param(x, beta, "rsign")?;
        let b = self.data(beta);
        let y = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| sign(v - b[(i / inner) % c]))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, y, Op::RSign { x, beta }, &[x, beta]))
    }

    /// `prelu(x - gamma[c], slope[c]) + zeta[c]`.
    pub fn rprelu(&mut self, x: Var, gamma: Var, zeta: Var, slope: Var) -> Result<Var> {
        let (_, c, inner) = self.channel_param(x, gamma, "rprelu")?;
        self.channel_param(x, zeta, "rprelu")?;
        self.channel_param(x, slope, "rprelu")?;
        let (g, z, s) = (self.data(gamma), self.data(zeta), self.data(slope));
        let y = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                let u = v - g[ch];
                (if u > 0.0 { u } else { s[ch] * u }) + z[ch]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, y, Op::RPrelu { x, gamma, zeta, slope }, &[x, gamma, zeta, slope]))
    }

    /// Scaled weight binarization `scale[f] · sign(w)` where `scale` is the
    /// per-output-channel mean of `|w|`. The scale is treated as a constant
    /// in the backward pass; `sign` uses the clipped straight-through rule.
    pub fn binarize_weight(&mut self, w: Var) -> Result<Var> {
        let shape = self.shape(w).to_vec();
        if shape.is_empty() {
            return dim_err("binarize_weight on a scalar");
        }
        let scale = crate::binary::channel_scale(self.value(w))?;
        let per = self.value(w).numel() / shape[0];
        let y = self
            .data(w)
            .iter()
            .enumerate()
            .map(|(i, &v)| scale[i / per] * sign(v))
            .collect();
        Ok(self.make(&shape, y, Op::BinarizeWeight { w, scale }, &[w]))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from the scalar `loss`, accumulating into the
    /// gradient buffer of every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return contract_err("backward on an empty tape");
        }
        if self.value(loss).numel() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.backprop(i, &g, &mut grads);
            self.nodes[i].value.accumulate_grad(&g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad() && node.value.grad().is_none() {
                let zeros = vec![0.0; node.value.numel()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let acc = |grads: &mut [Option<Vec<f32>>], v: Var, d: Vec<f32>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d),
        };
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    acc(grads, *a, g.iter().zip(bd).map(|(g, y)| g * y).collect());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.iter().zip(ad).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    acc(grads, *a, g.iter().zip(bd).map(|(g, y)| g / y).collect());
                }
                if self.needs(*b) {
                    let d = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    acc(grads, *b, d);
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => acc(grads, *a, g.to_vec()),
            Op::Log(a) => {
                let d = g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                acc(grads, *a, d)
            }
            Op::Abs(a) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(grads, *a, d)
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *a, d)
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                acc(grads, *a, vec![g[0] / n as f32; n])
            }
            Op::SumRows(a) => {
                let d = *self.shape(*a).last().unwrap();
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (r, row) in ga.chunks_mut(d).enumerate() {
                    row.iter_mut().for_each(|v| *v = g[r]);
                }
                acc(grads, *a, ga)
            }
            Op::Dot(a, b) => {
                let d = *self.shape(*a).last().unwrap();
                let rowwise = |other: &[f32]| -> Vec<f32> {
                    other.iter().enumerate().map(|(j, &o)| g[j / d] * o).collect()
                };
                if self.needs(*a) {
                    acc(grads, *a, rowwise(self.data(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, rowwise(self.data(*a)));
                }
            }
            Op::L2Norm(a) => {
                let d = *self.shape(*a).last().unwrap();
                let ga = self
                    .data(*a)
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let nrm = out[j / d];
                        if nrm > NORM_EPS {
                            g[j / d] * x / nrm
                        } else {
                            0.0
                        }
                    })
                    .collect();
                acc(grads, *a, ga)
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut ga, 0.0);
                    acc(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut gb, 0.0);
                    acc(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, inp, outd) = (sx[0], sx[1], sw[0]);
                if self.needs(*x) {
                    let mut gx = vec![0.0; bsz * inp];
                    gemm(bsz, outd, inp, g, false, self.data(*w), false, &mut gx, 0.0);
                    acc(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; outd * inp];
                    gemm(outd, bsz, inp, g, true, self.data(*x), false, &mut gw, 0.0);
                    acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut gb = vec![0.0f64; outd];
                        for row in g.chunks(outd) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
                        }
                        acc(grads, *b, gb.into_iter().map(|v| v as f32).collect());
                    }
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let n = self.shape(*x)[0];
                let f = self.shape(*w)[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let img = geom.c * geom.h * geom.w;
                if self.needs(*w) {
                    let mut gw = vec![0.0; f * rows];
                    for i in 0..n {
                        let gi = &g[i * f * p..(i + 1) * f * p];
                        let ci = &cols[i * rows * p..(i + 1) * rows * p];
                        gemm(f, p, rows, gi, false, ci, true, &mut gw, 1.0);
                    }
                    acc(grads, *w, gw);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; n * img];
                    let mut gcol = vec![0.0; rows * p];
                    let wd = self.data(*w);
                    for i in 0..n {
                        let gi = &g[i * f * p..(i + 1) * f * p];
                        gemm(rows, f, p, wd, true, gi, false, &mut gcol, 0.0);
                        col2im(&gcol, geom, &mut gx[i * img..(i + 1) * img]);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Prelu { x, slope } => {
                let (_, c, inner) = channel_split(self.shape(*x)).unwrap();
                let s = self.data(*slope);
                let xd = self.data(*x);
                if self.needs(*x) {
                    let gx = xd
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, &gv))| if v > 0.0 { gv } else { s[(i / inner) % c] * gv })
                        .collect();
                    acc(grads, *x, gx);
                }
                if self.needs(*slope) {
                    let mut gs = vec![0.0f64; c];
                    for (i, (&v, &gv)) in xd.iter().zip(g).enumerate() {
                        if v <= 0.0 {
                            gs[(i / inner) % c] += (gv * v) as f64;
                        }
                    }
                    acc(grads, *slope, to_f32(gs));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (o, c, inner) = channel_split(self.shape(*x)).unwrap();
                let count = (o * inner) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (i, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gv as f64;
                    sum_gx[ch] += (gv * xh) as f64;
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, to_f32(sum_gx.clone()));
                }
                if self.needs(*beta) {
                    acc(grads, *beta, to_f32(sum_g.clone()));
                }
                if self.needs(*x) {
                    let gm = self.data(*gamma);
                    let gx = g
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(i, (&gv, &xh))| {
                            let ch = (i / inner) % c;
                            let k = gm[ch] * inv_std[ch];
                            if *train {
                                let mg = (sum_g[ch] / count) as f32;
                                let mgx = (sum_gx[ch] / count) as f32;
                                k * (gv - mg - xh * mgx)
                            } else {
                                k * gv
                            }
                        })
                        .collect();
                    acc(grads, *x, gx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, inner) = channel_split(self.shape(*x)).unwrap();
                let gx = (0..self.value(*x).numel()).map(|j| g[j / inner] / inner as f32).collect();
                acc(grads, *x, gx)
            }
            Op::AvgPool2d { x, k } => {
                let shape = self.shape(*x);
                let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                let (oh, ow) = (h.div_ceil(*k), w.div_ceil(*k));
                let mut gx = vec![0.0f32; nc * h * w];
                for p in 0..nc {
                    for iy in 0..h {
                        let oy = iy / k;
                        let rows = ((oy + 1) * k).min(h) - oy * k;
                        for ix in 0..w {
                            let ox = ix / k;
                            let cols = ((ox + 1) * k).min(w) - ox * k;
                            gx[(p * h + iy) * w + ix] = g[(p * oh + oy) * ow + ox] / (rows * cols) as f32;
                        }
                    }
                }
                acc(grads, *x, gx)
            }
            Op::RepeatChannels { x, times } => {
                let stride = self.value(*x).numel() / self.shape(*x)[0];
                let mut gx = vec![0.0f32; self.value(*x).numel()];
                for (dst, src) in gx.chunks_mut(stride).zip(g.chunks(stride * times)) {
                    for rep in src.chunks(stride) {
                        for (d, &v) in dst.iter_mut().zip(rep) {
                            *d += v;
                        }
                    }
                }
                acc(grads, *x, gx)
            }
            Op::Softmax(x) => {
                let k = *self.shape(*x).last().unwrap();
                let mut gx = vec![0.0; out.len()];
                for ((gr, yr), dst) in g.chunks(k).zip(out.chunks(k)).zip(gx.chunks_mut(k)) {
                    let s: f64 = gr.iter().zip(yr).map(|(&a, &b)| (a * b) as f64).sum();
                    for j in 0..k {
                        dst[j] = yr[j] * (gr[j] - s as f32);
                    }
                }
                acc(grads, *x, gx)
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut gx = probs.clone();
                for (row, &l) in gx.chunks_mut(k).zip(labels) {
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(grads, *logits, gx)
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::SignSte(x) => {
                let gx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &v)| if v.abs() <= 1.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *x, gx)
            }
            Op::RSign { x, beta } => {
                let (_, c, inner) = channel_split(self.shape(*x)).unwrap();
                let b = self.data(*beta);
                let gu: Vec<f32> = g
                    .iter()
                    .zip(self.data(*x))
                    .enumerate()
                    .map(|(i, (&gv, &v))| {
                        if (v - b[(i / inner) % c]).abs() <= 1.0 {
                            gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(*beta) {
                    let mut gb = vec![0.0f64; c];
                    for (i, &v) in gu.iter().enumerate() {
                        gb[(i / inner) % c] -= v as f64;
                    }
                    acc(grads, *beta, to_f32(gb));
                }
                if self.needs(*x) {
                    acc(grads, *x, gu);
                }
            }
            Op::RPrelu { x, gamma, zeta, slope } => {
                let (_, c, inner) = channel_split(self.shape(*x)).unwrap();
                let (gm, s) = (self.data(*gamma), self.data(*slope));
                let xd = self.data(*x);
                let mut gu = vec![0.0; xd.len()];
                let mut gs = vec![0.0f64; c];
                let mut gz = vec![0.0f64; c];
                let mut gg = vec![0.0f64; c];
                for (i, (&v, &gv)) in xd.iter().zip(g).enumerate() {
                    let ch = (i / inner) % c;
                    let u = v - gm[ch];
                    gz[ch] += gv as f64;
                    gu[i] = if u > 0.0 {
                        gv
                    } else {
                        gs[ch] += (gv * u) as f64;
                        s[ch] * gv
                    };
                    gg[ch] -= gu[i] as f64;
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, to_f32(gg));
                }
                if self.needs(*zeta) {
                    acc(grads, *zeta, to_f32(gz));
                }
                if self.needs(*slope) {
                    acc(grads, *slope, to_f32(gs));
                }
                if self.needs(*x) {
                    acc(grads, *x, gu);
                }
            }
            Op::BinarizeWeight { w, scale } => {
                let per = self.value(*w).numel() / scale.len();
                let gw = g
                    .iter()
                    .zip(self.data(*w))
                    .enumerate()
                    .map(|(i, (&gv, &v))| if v.abs() <= 1.0 { gv * scale[i / per] } else { 0.0 })
                    .collect();
                acc(grads, *w, gw)
            }
        }
    }
}

fn row_shape(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len() - 1].to_vec()
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}

fn softmax_row(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v as f64;
    }
    let inv = (1.0 / s) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}
