//! Plain-loop f64 versions of every differentiable tape op.

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

pub fn div(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x / y).collect()
}

pub fn sum_rows(a: &[f64], d: usize) -> Vec<f64> {
    a.chunks(d).map(|r| r.iter().sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    a.chunks(d).zip(b.chunks(d)).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum()).collect()
}

pub fn l2_norm(a: &[f64], d: usize) -> Vec<f64> {
    a.chunks(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)).collect()
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `x [B, in] · wᵀ + b` with `w [out, in]`.
pub fn linear(x: &[f64], w: &[f64], b: Option<&[f64]>, batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for i in 0..batch {
        for o in 0..out {
            let mut s = b.map_or(0.0, |b| b[o]);
            for p in 0..inp {
                s += x[i * inp + p] * w[o * inp + p];
            }
            y[i * out + o] = s;
        }
    }
    y
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }
}

pub fn conv2d(x: &[f64], wt: &[f64], g: Conv) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let mut y = vec![0.0; g.n * g.f * oh * ow];
    for n in 0..g.n {
        for f in 0..g.f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..g.c {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                s += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                    * wt[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    y[((n * g.f + f) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    y
}

/// Channel index of flat element `i` for shape `[N, C, inner]`.
pub fn ch(i: usize, c: usize, inner: usize) -> usize {
    (i / inner) % c
}

pub fn prelu(x: &[f64], slope: &[f64], c: usize, inner: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| if v > 0.0 { v } else { slope[ch(i, c, inner)] * v })
        .collect()
}

pub const BN_EPS: f64 = 1e-5;

pub fn batchnorm_train(x: &[f64], gamma: &[f64], beta: &[f64], c: usize, inner: usize) -> Vec<f64> {
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in x.iter().enumerate() {
        mean[ch(i, c, inner)] += v / count;
    }
    let mut var = vec![0.0; c];
    for (i, v) in x.iter().enumerate() {
        let k = ch(i, c, inner);
        var[k] += (v - mean[k]).powi(2) / count;
    }
    batchnorm_eval(x, gamma, beta, &mean, &var, c, inner)
}

pub fn batchnorm_eval(x: &[f64], gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], c: usize, inner: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let k = ch(i, c, inner);
            gamma[k] * (v - mean[k]) / (var[k] + BN_EPS).sqrt() + beta[k]
        })
        .collect()
}

pub fn global_avg_pool(x: &[f64], inner: usize) -> Vec<f64> {
    x.chunks(inner).map(|r| r.iter().sum::<f64>() / inner as f64).collect()
}

/// Non-overlapping `k×k` mean pooling with partial edge windows.
pub fn avg_pool2d(x: &[f64], nc: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for iy in oy * k..((oy + 1) * k).min(h) {
                    for ix in ox * k..((ox + 1) * k).min(w) {
                        vals.push(x[(p * h + iy) * w + ix]);
                    }
                }
                out.push(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    out
}

pub fn repeat_channels(x: &[f64], n: usize, times: usize) -> Vec<f64> {
    let per = x.len() / n;
    x.chunks(per).flat_map(|row| std::iter::repeat_n(row, times).flatten().copied()).collect()
}

pub fn softmax(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

pub fn cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let p = softmax(logits, k);
    labels.iter().enumerate().map(|(i, &l)| -p[i * k + l].ln()).sum::<f64>() / labels.len() as f64
}

/// `clamp(x, -1, 1)`: the function whose derivative the clipped
/// straight-through estimator of `sign` reports.
pub fn hardtanh(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

pub fn rsign_surrogate(x: &[f64], beta: &[f64], c: usize, inner: usize) -> Vec<f64> {
    x.iter().enumerate().map(|(i, &v)| hardtanh(v - beta[ch(i, c, inner)])).collect()
}

pub fn rprelu(x: &[f64], gamma: &[f64], zeta: &[f64], slope: &[f64], c: usize, inner: usize) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let k = ch(i, c, inner);
            let u = v - gamma[k];
            (if u > 0.0 { u } else { slope[k] * u }) + zeta[k]
        })
        .collect()
}

/// Per-row mean `|w|` (rows along the first axis).
pub fn row_scale(w: &[f64], rows: usize) -> Vec<f64> {
    let per = w.len() / rows;
    w.chunks(per).map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / per as f64).collect()
}

/// `KL(p2 ‖ p1)` per row, with the same `1e-12` floor inside the logs.
pub fn kl_rows(p2: &[f64], p1: &[f64], k: usize) -> Vec<f64> {
    p2.chunks(k)
        .zip(p1.chunks(k))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * ((x + 1e-12).ln() - (y + 1e-12).ln())).sum())
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn cosine_distance_rows(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let dots = dot(a, b, d);
    let na = l2_norm(a, d);
    let nb = l2_norm(b, d);
    dots.iter().zip(na.iter().zip(&nb)).map(|(p, (x, y))| 1.0 - p / (x * y)).collect()
}
