//! Central finite-difference cases for every differentiable op, checked
//! against the f64 reference implementations.

use burnkit::loss::{feature_similarity, kl_div, FsVariant};
use burnkit::tape::BnMode;
use rand::Rng;

use super::reference as r;
use super::*;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
pub const TOL_STE: f64 = 1e-3;

/// Worst relative error per op over [`SEEDS`] seeds, with its tolerance.
#[derive(Debug, Default)]
pub struct Cases {
    pub results: Vec<(String, f64, f64)>,
}

impl Cases {
    pub fn run(&mut self, name: &str, tol: f64, case: impl Fn(u64) -> f64) {
        let worst = (0..SEEDS).map(&case).fold(0.0, f64::max);
        self.results.push((name.to_string(), worst, tol));
    }

    pub fn failures(&self) -> Vec<&(String, f64, f64)> {
        self.results.iter().filter(|(_, w, t)| !(w < t)).collect()
    }
}

pub const GROUPS: &[fn(&mut Cases)] = &[elementwise_binary_ops, elementwise_unary_ops, reductions, dense_ops, channel_ops, probability_ops, feature_similarity_variants, straight_through_ops];

pub fn elementwise_binary_ops(c: &mut Cases) {
    c.run("add", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[3, 4], -1.0, 1.0), uniform(&mut g, &[3, 4], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| t.add(v[0], v[1]), |x| r::add(&x[0], &x[1]))
    });
    c.run("sub", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[5], -1.0, 1.0), uniform(&mut g, &[5], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| t.sub(v[0], v[1]), |x| r::sub(&x[0], &x[1]))
    });
    c.run("mul", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[2, 6], -1.0, 1.0), uniform(&mut g, &[2, 6], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| t.mul(v[0], v[1]), |x| r::mul(&x[0], &x[1]))
    });
    c.run("div", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[7], -1.0, 1.0), away_from_zero(&mut g, &[7], 0.5, 2.0));
        grad_check(&[a, b], s, |t, v| t.div(v[0], v[1]), |x| r::div(&x[0], &x[1]))
    });
}

pub fn elementwise_unary_ops(c: &mut Cases) {
    c.run("scale", TOL, |s| {
        let a = uniform(&mut rng(s), &[6], -1.0, 1.0);
        grad_check(&[a], s, |t, v| Ok(t.scale(v[0], -2.5)), |x| x[0].iter().map(|v| v * -2.5).collect())
    });
    c.run("add_scalar", TOL, |s| {
        let a = uniform(&mut rng(s), &[6], -1.0, 1.0);
        grad_check(&[a], s, |t, v| Ok(t.add_scalar(v[0], 0.75)), |x| x[0].iter().map(|v| v + 0.75).collect())
    });
    c.run("log", TOL, |s| {
        let a = uniform(&mut rng(s), &[8], 0.2, 3.0);
        grad_check(&[a], s, |t, v| Ok(t.log(v[0])), |x| x[0].iter().map(|v| v.ln()).collect())
    });
    c.run("abs", TOL, |s| {
        let a = away_from_zero(&mut rng(s), &[8], 0.05, 2.0);
        grad_check(&[a], s, |t, v| Ok(t.abs(v[0])), |x| x[0].iter().map(|v| v.abs()).collect())
    });
    c.run("relu", TOL, |s| {
        let a = away_from_zero(&mut rng(s), &[8], 0.05, 2.0);
        grad_check(&[a], s, |t, v| Ok(t.relu(v[0])), |x| x[0].iter().map(|v| v.max(0.0)).collect())
    });
    c.run("reshape", TOL, |s| {
        let a = uniform(&mut rng(s), &[2, 6], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.reshape(v[0], &[3, 4]), |x| x[0].clone())
    });
}

pub fn reductions(c: &mut Cases) {
    c.run("sum", TOL, |s| {
        let a = uniform(&mut rng(s), &[3, 5], -1.0, 1.0);
        grad_check(&[a], s, |t, v| Ok(t.sum(v[0])), |x| vec![x[0].iter().sum()])
    });
    c.run("mean", TOL, |s| {
        let a = uniform(&mut rng(s), &[3, 5], -1.0, 1.0);
        grad_check(&[a], s, |t, v| Ok(t.mean(v[0])), |x| vec![r::mean(&x[0])])
    });
    c.run("sum_rows", TOL, |s| {
        let a = uniform(&mut rng(s), &[4, 3], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.sum_rows(v[0]), |x| r::sum_rows(&x[0], 3))
    });
    c.run("dot", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[3, 5], -1.0, 1.0), uniform(&mut g, &[3, 5], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| t.dot(v[0], v[1]), |x| r::dot(&x[0], &x[1], 5))
    });
    c.run("l2_norm", TOL, |s| {
        let a = uniform(&mut rng(s), &[3, 6], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.l2_norm(v[0]), |x| r::l2_norm(&x[0], 6))
    });
    c.run("global_avg_pool", TOL, |s| {
        let a = uniform(&mut rng(s), &[2, 3, 3, 2], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.global_avg_pool(v[0]), |x| r::global_avg_pool(&x[0], 6))
    });
    c.run("avg_pool2d", TOL, |s| {
        let mut g = rng(s);
        let (h, w, k) = (g.random_range(2..7), g.random_range(2..7), g.random_range(1..4));
        let a = uniform(&mut g, &[2, 2, h, w], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.avg_pool2d(v[0], k), |x| r::avg_pool2d(&x[0], 4, h, w, k))
    });
    c.run("repeat_channels", TOL, |s| {
        let a = uniform(&mut rng(s), &[2, 3, 2, 2], -1.0, 1.0);
        grad_check(&[a], s, |t, v| t.repeat_channels(v[0], 3), |x| r::repeat_channels(&x[0], 2, 3))
    });
}

pub fn dense_ops(c: &mut Cases) {
    c.run("matmul", TOL, |s| {
        let mut g = rng(s);
        let (m, k, n) = (g.random_range(1..5), g.random_range(1..6), g.random_range(1..5));
        let (a, b) = (uniform(&mut g, &[m, k], -1.0, 1.0), uniform(&mut g, &[k, n], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| t.matmul(v[0], v[1]), |x| r::matmul(&x[0], &x[1], m, k, n))
    });
    c.run("linear", TOL, |s| {
        let mut g = rng(s);
        let (bs, i, o) = (g.random_range(1..5), g.random_range(1..7), g.random_range(1..5));
        let x = uniform(&mut g, &[bs, i], -1.0, 1.0);
        let w = uniform(&mut g, &[o, i], -1.0, 1.0);
        let b = uniform(&mut g, &[o], -1.0, 1.0);
        grad_check(&[x, w, b], s, |t, v| t.linear(v[0], v[1], Some(v[2])), |x| {
            r::linear(&x[0], &x[1], Some(&x[2]), bs, i, o)
        })
    });
    c.run("linear (no bias)", TOL, |s| {
        let mut g = rng(s);
        let x = uniform(&mut g, &[3, 4], -1.0, 1.0);
        let w = uniform(&mut g, &[2, 4], -1.0, 1.0);
        grad_check(&[x, w], s, |t, v| t.linear(v[0], v[1], None), |x| r::linear(&x[0], &x[1], None, 3, 4, 2))
    });
    c.run("conv2d", TOL, |s| {
        let mut g = rng(s);
        let geom = r::Conv {
            n: g.random_range(1..3),
            c: g.random_range(1..4),
            h: g.random_range(3..7),
            w: g.random_range(3..7),
            f: g.random_range(1..4),
            kh: 3,
            kw: 3,
            stride: g.random_range(1..3),
            pad: g.random_range(0..2),
        };
        let x = uniform(&mut g, &[geom.n, geom.c, geom.h, geom.w], -1.0, 1.0);
        let w = uniform(&mut g, &[geom.f, geom.c, 3, 3], -1.0, 1.0);
        grad_check(&[x, w], s, |t, v| t.conv2d(v[0], v[1], geom.stride, geom.pad), |x| r::conv2d(&x[0], &x[1], geom))
    });
}

pub fn channel_ops(c: &mut Cases) {
    c.run("prelu", TOL, |s| {
        let mut g = rng(s);
        let x = away_from_zero(&mut g, &[2, 3, 2, 2], 0.05, 1.5);
        let a = uniform(&mut g, &[3], 0.0, 0.5);
        grad_check(&[x, a], s, |t, v| t.prelu(v[0], v[1]), |x| r::prelu(&x[0], &x[1], 3, 4))
    });
    c.run("batchnorm2d (train)", TOL, |s| {
        let mut g = rng(s);
        let x = uniform(&mut g, &[3, 2, 2, 2], -2.0, 2.0);
        let gm = uniform(&mut g, &[2], 0.5, 1.5);
        let bt = uniform(&mut g, &[2], -0.5, 0.5);
        grad_check(&[x, gm, bt], s, |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Train)?.0), |x| {
            r::batchnorm_train(&x[0], &x[1], &x[2], 2, 4)
        })
    });
    c.run("batchnorm2d (eval)", TOL, |s| {
        let mut g = rng(s);
        let x = uniform(&mut g, &[2, 3, 2, 1], -2.0, 2.0);
        let gm = uniform(&mut g, &[3], 0.5, 1.5);
        let bt = uniform(&mut g, &[3], -0.5, 0.5);
        let mean: Vec<f32> = (0..3).map(|_| g.random_range(-0.5..0.5)).collect();
        let var: Vec<f32> = (0..3).map(|_| g.random_range(0.5..2.0)).collect();
        let (m64, v64): (Vec<f64>, Vec<f64>) = (mean.iter().map(|&v| v as f64).collect(), var.iter().map(|&v| v as f64).collect());
        grad_check(
            &[x, gm, bt],
            s,
            |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0),
            |x| r::batchnorm_eval(&x[0], &x[1], &x[2], &m64, &v64, 3, 2),
        )
    });
    c.run("rprelu", TOL, |s| {
        let mut g = rng(s);
        let gamma = uniform(&mut g, &[2], -0.3, 0.3);
        // keep x - gamma clear of the kink
        let u = away_from_zero(&mut g, &[2, 2, 3], 0.05, 1.5);
        let gd: Vec<f64> = gamma.data.clone();
        let x = Input::new(&[2, 2, 3], u.data.iter().enumerate().map(|(i, v)| v + gd[r::ch(i, 2, 3)]).collect());
        let zeta = uniform(&mut g, &[2], -0.3, 0.3);
        let slope = uniform(&mut g, &[2], 0.0, 0.5);
        grad_check(&[x, gamma, zeta, slope], s, |t, v| t.rprelu(v[0], v[1], v[2], v[3]), |x| {
            r::rprelu(&x[0], &x[1], &x[2], &x[3], 2, 3)
        })
    });
}

pub fn probability_ops(c: &mut Cases) {
    c.run("softmax", TOL, |s| {
        let a = uniform(&mut rng(s), &[3, 5], -3.0, 3.0);
        grad_check(&[a], s, |t, v| t.softmax(v[0]), |x| r::softmax(&x[0], 5))
    });
    c.run("cross_entropy", TOL, |s| {
        let mut g = rng(s);
        let a = uniform(&mut g, &[4, 6], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| g.random_range(0..6)).collect();
        let l2 = labels.clone();
        grad_check(&[a], s, move |t, v| t.cross_entropy(v[0], &labels), move |x| vec![r::cross_entropy(&x[0], &l2, 6)])
    });
    c.run("kl_div(softmax, softmax)", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[3, 5], -2.0, 2.0), uniform(&mut g, &[3, 5], -2.0, 2.0));
        grad_check(
            &[a, b],
            s,
            |t, v| {
                let p2 = t.softmax(v[0])?;
                let p1 = t.softmax(v[1])?;
                kl_div(t, p2, p1)
            },
            |x| vec![r::mean(&r::kl_rows(&r::softmax(&x[0], 5), &r::softmax(&x[1], 5), 5))],
        )
    });
}

pub fn feature_similarity_variants(c: &mut Cases) {
    c.run("fs cosine", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[3, 6], -1.0, 1.0), uniform(&mut g, &[3, 6], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| feature_similarity(t, v[0], v[1], FsVariant::Cosine), |x| {
            vec![r::mean(&r::cosine_distance_rows(&x[0], &x[1], 6))]
        })
    });
    c.run("fs l1", TOL, |s| {
        let mut g = rng(s);
        let a = uniform(&mut g, &[3, 4], -1.0, 1.0);
        let d = away_from_zero(&mut g, &[3, 4], 0.05, 1.0);
        let b = Input::new(&[3, 4], a.data.iter().zip(&d.data).map(|(x, y)| x + y).collect());
        grad_check(&[a, b], s, |t, v| feature_similarity(t, v[0], v[1], FsVariant::L1), |x| {
            let d: Vec<f64> = r::sub(&x[0], &x[1]).iter().map(|v| v.abs()).collect();
            vec![r::mean(&r::sum_rows(&d, 4))]
        })
    });
    c.run("fs l2", TOL, |s| {
        let mut g = rng(s);
        let (a, b) = (uniform(&mut g, &[3, 4], -1.0, 1.0), uniform(&mut g, &[3, 4], -1.0, 1.0));
        grad_check(&[a, b], s, |t, v| feature_similarity(t, v[0], v[1], FsVariant::L2), |x| {
            vec![r::mean(&r::l2_norm(&r::sub(&x[0], &x[1]), 4))]
        })
    });
}

pub fn straight_through_ops(c: &mut Cases) {
    c.run("sign_ste", TOL_STE, |s| {
        let a = away_from_clip(&mut rng(s), &[10], 0.01);
        grad_check(&[a], s, |t, v| Ok(t.sign_ste(v[0])), |x| x[0].iter().map(|&v| r::hardtanh(v)).collect())
    });
    c.run("rsign", TOL_STE, |s| {
        let mut g = rng(s);
        let beta = uniform(&mut g, &[3], -0.3, 0.3);
        let u = away_from_clip(&mut g, &[2, 3, 2], 0.01);
        let bd = beta.data.clone();
        let x = Input::new(&[2, 3, 2], u.data.iter().enumerate().map(|(i, v)| v + bd[r::ch(i, 3, 2)]).collect());
        grad_check(&[x, beta], s, |t, v| t.rsign(v[0], v[1]), |x| r::rsign_surrogate(&x[0], &x[1], 3, 2))
    });
    c.run("binarize_weight", TOL_STE, |s| {
        let w = away_from_clip(&mut rng(s), &[3, 2, 2], 0.01);
        let scale = r::row_scale(&w.data, 3);
        grad_check(&[w], s, |t, v| t.binarize_weight(v[0]), move |x| {
            x[0].iter().enumerate().map(|(i, &v)| scale[i / 4] * r::hardtanh(v)).collect()
        })
    });
}
