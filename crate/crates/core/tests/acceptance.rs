//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! The desk task is a 3000-image, 10-class, 32×32 synthetic glyph dataset,
//! a 4-block FP teacher pretrained for 10 epochs on a separate 5000-image
//! draw, and a 4-block binary student trained for 10 epochs with Adam at
//! learning rate 1e-2 under cosine decay.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use burnkit::binary::{pack_signs, xnor_gemm};
use burnkit::data::Dataset;
use burnkit::ema::{run_sim, EmaMode, EmaSimConfig};
use burnkit::eval::{linear_probe, ProbeConfig};
use burnkit::loss::{feature_similarity, kl_div, lambda_at, FsVariant, LambdaSchedule};
use burnkit::networks::{build_teacher, make_student, NetConfig};
use burnkit::optim::OptimizerKind;
use burnkit::synth::{generate, SynthConfig};
use burnkit::train::{pretrain_teacher, run_burn, student_from_extractor, teacher_net_config, BurnConfig, BurnOutcome, Telemetry, TeacherConfig};
use burnkit::{BinarizeMode, Checkpoint, Tape, Tensor};
use common::gradcases::{Cases, GROUPS};
use common::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS_CRIT6: u64 = 5;
const SEEDS_CRIT8: u64 = 3;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, pass: bool, secs: f64, detail: String) {
        if !pass {
            self.failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("[{verdict}] {id:>2} {name:<22} {secs:>7.1}s  {detail}");
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn autodiff() -> (bool, String) {
    let mut c = Cases::default();
    for g in GROUPS {
        g(&mut c);
    }
    let failures = c.failures();
    let worst = c.results.iter().map(|(_, w, t)| w / t).fold(0.0, f64::max);
    let detail = format!("{} ops, worst err/tol {worst:.3}", c.results.len());
    if failures.is_empty() {
        (true, detail)
    } else {
        (false, format!("{detail}; failing: {:?}", failures.iter().map(|f| &f.0).collect::<Vec<_>>()))
    }
}

fn kernels() -> (bool, String) {
    let mut g = rng(2024);
    let mut odd = 0;
    for i in 0..100 {
        let m = g.random_range(1..12);
        let n = g.random_range(1..12);
        let k = if i % 10 == 0 { 64 * g.random_range(1..4) } else { g.random_range(1..300) };
        odd += (k % 64 != 0) as usize;
        let pm = |g: &mut common::TestRng, len: usize| -> Vec<f32> {
            (0..len).map(|_| if g.random::<bool>() { 1.0 } else { -1.0 }).collect()
        };
        let a = pm(&mut g, m * k);
        let b = pm(&mut g, n * k);
        let got = xnor_gemm(&pack_signs(&a, m, k).unwrap(), &pack_signs(&b, n, k).unwrap()).unwrap();
        for r in 0..m {
            for c in 0..n {
                let want: i32 = (0..k).map(|j| (a[r * k + j] * b[c * k + j]) as i32).sum();
                if got[r * n + c] != want {
                    return (false, format!("instance {i} ({m}x{k}x{n}) entry ({r},{c}): {} vs {want}", got[r * n + c]));
                }
            }
        }
    }
    (true, format!("100 instances, {odd} with k not a multiple of 64"))
}

fn schedule() -> (bool, String) {
    for t_max in [2u64, 10, 1000, 12_345 * 2] {
        let s = LambdaSchedule::cosine(t_max);
        let l: Vec<f32> = (0..=t_max).map(|t| lambda_at(&s, t).unwrap()).collect();
        let ends = l[0] == 0.9f32 && l[t_max as usize] == 0.7f32;
        let monotone = l.windows(2).all(|w| w[1] <= w[0]);
        let mid = l[t_max as usize / 2] == 0.8f32;
        if !(ends && monotone && mid) {
            return (false, format!("t_max {t_max}: ends {ends} monotone {monotone} midpoint {}", l[t_max as usize / 2]));
        }
    }
    (true, "t_max 2, 10, 1000, 24690".into())
}

fn scalar(tape: &Tape, v: burnkit::Var) -> f64 {
    tape.value(v).item() as f64
}

fn losses() -> (bool, String) {
    let mut g = rng(77);
    let mut tape = Tape::new();
    let mut kl_self = 0.0f64;
    for _ in 0..100 {
        let logits: Vec<f32> = (0..20).map(|_| g.random_range(-4.0..4.0)).collect();
        let z = tape.constant(Tensor::new(&[2, 10], logits).unwrap());
        let p = tape.softmax(z).unwrap();
        let d = kl_div(&mut tape, p, p).unwrap();
        kl_self = kl_self.max(scalar(&tape, d).abs());
    }
    let p2 = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let p1 = tape.constant(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
    let d = kl_div(&mut tape, p2, p1).unwrap();
    let ln2_err = (scalar(&tape, d) - std::f64::consts::LN_2).abs();

    let (mut lo, mut hi, mut scale_err) = (f64::MAX, f64::MIN, 0.0f64);
    for _ in 0..1000 {
        let dim = g.random_range(1..64);
        let mut draw = || -> Vec<f32> { (0..dim).map(|_| StandardNormal.sample(&mut g)).collect() };
        let (u, v) = (draw(), draw());
        let v7: Vec<f32> = v.iter().map(|x| 7.0 * x).collect();
        let mut fs = |a: &[f32], b: &[f32]| {
            let a = tape.constant(Tensor::new(&[1, dim], a.to_vec()).unwrap());
            let b = tape.constant(Tensor::new(&[1, dim], b.to_vec()).unwrap());
            let d = feature_similarity(&mut tape, a, b, FsVariant::Cosine).unwrap();
            scalar(&tape, d)
        };
        let d = fs(&u, &v);
        lo = lo.min(d);
        hi = hi.max(d);
        scale_err = scale_err.max((fs(&u, &v7) - d).abs()).max(fs(&v, &v7).abs());
    }
    let pass = kl_self < 1e-9 && ln2_err < 1e-6 && lo >= 0.0 && hi <= 2.0 && scale_err < 1e-6;
    (pass, format!("|KL(p,p)| {kl_self:.1e}, |KL-ln2| {ln2_err:.1e}, cosine range [{lo:.4}, {hi:.4}], v vs 7v {scale_err:.1e}"))
}

fn handoff(out: &BurnOutcome) -> (bool, String) {
    let (s1, Some(init)) = (&out.stages[0], out.stage2_init.as_ref()) else {
        return (false, "no stage-2 init recorded".into());
    };
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mismatched: Vec<&str> = s1.iter().filter(|(n, t)| init.get(n).is_none_or(|u| bits(t) != bits(u))).map(|(n, _)| n).collect();
    let classifier = s1.names().filter(|n| n.starts_with("fp_classifier.")).count();
    let pass = mismatched.is_empty() && s1.len() == init.len() && classifier > 0;
    (pass, format!("{} tensors ({classifier} of the FP classifier), {} mismatched", s1.len(), mismatched.len()))
}

fn ema() -> (bool, String) {
    let fp = run_sim(&EmaSimConfig { mode: EmaMode::Fp, ..EmaSimConfig::default() }).unwrap();
    let bin = run_sim(&EmaSimConfig { mode: EmaMode::Binary, ..EmaSimConfig::default() }).unwrap();
    let pass = bin.final_mean() > fp.final_mean() && bin.final_std() > fp.final_std();
    (
        pass,
        format!(
            "final mean {:.4} vs {:.4}, std {:.4} vs {:.4} (binary vs fp)",
            bin.final_mean(),
            fp.final_mean(),
            bin.final_std(),
            fp.final_std()
        ),
    )
}

fn round_trips(ds: &Dataset, cks: &[&Checkpoint]) -> (bool, String) {
    let b = ds.to_bytes();
    let ds_ok = Dataset::from_bytes(&b).unwrap().to_bytes() == b;
    let ck_ok = cks.iter().all(|ck| {
        let b = ck.to_bytes();
        let back = Checkpoint::read_from(&mut b.as_slice()).unwrap();
        back.to_bytes() == b && back.hash() == ck.hash()
    });
    (ds_ok && ck_ok, format!("dataset {} bytes, {} checkpoints", b.len(), cks.len()))
}

struct Desk {
    data: Dataset,
    teacher: Checkpoint,
    net: NetConfig,
}

impl Desk {
    fn new() -> Self {
        let data = generate(&SynthConfig::new(3000, 1)).unwrap();
        let tdata = generate(&SynthConfig::new(5000, 7)).unwrap();
        let tcfg = TeacherConfig { seed: 7, ..TeacherConfig::default() };
        let (teacher, logs) = pretrain_teacher(&tcfg, &tdata, |_| {}).unwrap();
        let last = logs.last().unwrap();
        println!("       teacher: {} epochs, train accuracy {:.3}", last.epoch, last.accuracy);
        let net = teacher_net_config(&NetConfig::default(), &teacher).unwrap();
        Desk { data, teacher, net }
    }

    fn config(&self, seed: u64) -> BurnConfig {
        BurnConfig {
            seed,
            epochs: 10,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999 },
            lr: 1e-2,
            net: self.net.clone(),
            ..BurnConfig::default()
        }
    }

    fn run(&self, cfg: &BurnConfig) -> (BurnOutcome, Telemetry) {
        let mut teacher = build_teacher(&cfg.net, &self.teacher, cfg.seed).unwrap();
        let frozen = teacher.extractor_hash();
        let mut tel = Telemetry::in_memory();
        let out = run_burn(cfg, &mut teacher, &self.data, &mut tel, None).unwrap();
        assert_eq!(teacher.extractor_hash(), frozen, "teacher extractor moved");
        (out, tel)
    }

    fn probe(&self, ck: &Checkpoint, seed: u64) -> f64 {
        let mut s = student_from_extractor(&self.net, ck).unwrap();
        linear_probe(&mut s, &self.data, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap().test_top1 as f64
    }

    fn probe_random(&self, seed: u64) -> f64 {
        let mut s = make_student(&self.net, BinarizeMode::FullBinary, seed, None).unwrap();
        linear_probe(&mut s, &self.data, &ProbeConfig { seed, ..ProbeConfig::default() }).unwrap().test_top1 as f64
    }
}

fn early_bin_classifier_gnorm(tel: &Telemetry) -> f64 {
    let k = (tel.rows.len() / 10).max(1);
    mean(&tel.rows[..k].iter().map(|r| r.gnorm_bin_classifier as f64).collect::<Vec<_>>())
}

fn main() -> ExitCode {
    let mut rep = Report { failed: 0 };

    let t = Instant::now();
    let (p, d) = autodiff();
    rep.line(1, "autodiff soundness", p, t.elapsed().as_secs_f64(), d);

    let t = Instant::now();
    let (p, d) = kernels();
    rep.line(2, "kernel exactness", p, t.elapsed().as_secs_f64(), d);

    let t = Instant::now();
    let (p, d) = schedule();
    rep.line(3, "schedule exactness", p, t.elapsed().as_secs_f64(), d);

    let t = Instant::now();
    let (p, d) = losses();
    rep.line(4, "loss identities", p, t.elapsed().as_secs_f64(), d);

    let t = Instant::now();
    let (p, d) = ema();
    rep.line(7, "ema divergence", p, t.elapsed().as_secs_f64(), d);

    let t_desk = Instant::now();
    let desk = Desk::new();
    println!("       desk setup {:.1}s", t_desk.elapsed().as_secs_f64());

    // Pure KL over 5 seeds; the first 3 are also the probe baseline.
    let t6 = Instant::now();
    let mut kl_runs = Vec::new();
    let mut gn_kl = Vec::new();
    for seed in 0..SEEDS_CRIT6 {
        let (out, tel) = desk.run(&desk.config(seed).baseline());
        gn_kl.push(early_bin_classifier_gnorm(&tel));
        kl_runs.push(out);
    }
    let mut gn_full = Vec::new();
    for seed in 0..SEEDS_CRIT6 {
        let mut cfg = desk.config(seed);
        cfg.use_multistage = false;
        let (_, tel) = desk.run(&cfg);
        gn_full.push(early_bin_classifier_gnorm(&tel));
    }
    let wins = gn_kl.iter().zip(&gn_full).filter(|(a, b)| a > b).count();
    let pairs: Vec<String> = gn_kl.iter().zip(&gn_full).map(|(a, b)| format!("{a:.3}/{b:.3}")).collect();
    let crit6 = (wins >= 4, format!("pure-KL larger in {wins}/5 seeds (KL/full: {})", pairs.join(" ")));
    let t6_secs = t6.elapsed().as_secs_f64();

    let t8 = Instant::now();
    let mut full_runs = Vec::new();
    let mut full_tel = Vec::new();
    for seed in 0..SEEDS_CRIT8 {
        let (out, tel) = desk.run(&desk.config(seed));
        full_runs.push(out);
        full_tel.push(tel);
    }
    let acc_full: Vec<f64> = full_runs.iter().zip(0..).map(|(o, s)| desk.probe(&o.extractor, s)).collect();
    let acc_kl: Vec<f64> = kl_runs[..SEEDS_CRIT8 as usize].iter().zip(0..).map(|(o, s)| desk.probe(&o.extractor, s)).collect();
    let acc_rand: Vec<f64> = (0..SEEDS_CRIT8).map(|s| desk.probe_random(s)).collect();
    let (mf, mk, mr) = (mean(&acc_full), mean(&acc_kl), mean(&acc_rand));
    let t8_secs = t8.elapsed().as_secs_f64();
    let crit8 = (
        mf >= mk && mk >= mr + 0.10,
        format!("top-1 full {mf:.3} >= KL {mk:.3}: {}; KL {mk:.3} >= random {mr:.3} + 0.10: {}", mf >= mk, mk >= mr + 0.10),
    );

    let t = Instant::now();
    let (p, d) = handoff(&full_runs[0]);
    rep.line(5, "stage handoff", p, t.elapsed().as_secs_f64(), d);
    rep.line(6, "early gradient norms", crit6.0, t6_secs, crit6.1);
    rep.line(8, "probe trend", crit8.0, t8_secs, crit8.1);

    let t = Instant::now();
    let (again, tel) = desk.run(&desk.config(0));
    let same_csv = tel.to_csv() == full_tel[0].to_csv();
    let same_hash = again.extractor.hash() == full_runs[0].extractor.hash();
    rep.line(9, "determinism", same_csv && same_hash, t.elapsed().as_secs_f64(), format!("telemetry identical {same_csv}, checkpoint hash identical {same_hash}"));

    let t = Instant::now();
    let cks: Vec<&Checkpoint> = [&desk.teacher, &full_runs[0].extractor].into_iter().chain(&full_runs[0].stages).collect();
    let (p, d) = round_trips(&desk.data, &cks);
    rep.line(10, "format round trips", p, t.elapsed().as_secs_f64(), d);

    println!("{} of 10 criteria failed", rep.failed);
    if rep.failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
