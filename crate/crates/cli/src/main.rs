//! `burnkit` command-line front end.
//!
//! Every subcommand writes machine-readable CSV (to a file or stdout) and
//! human-readable progress lines to stderr. Exit codes: 0 success, 2 bad
//! configuration or arguments, 3 I/O or malformed input files, 4 numeric
//! abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use burnkit::binary::xnor_bench;
use burnkit::data::{convert_image_folder, Dataset};
use burnkit::ema::{run_sim, DistanceMetric, EmaMode, EmaSimConfig};
use burnkit::eval::{linear_probe, ProbeConfig, ProbeRow};
use burnkit::networks::{build_teacher, make_student};
use burnkit::synth::{generate, SynthConfig};
use burnkit::train::{
    pretrain_teacher, run_burn, student_from_extractor, teacher_net_config, telemetry_path, Ablation, BurnConfig,
    Telemetry, TeacherConfig,
};
use burnkit::{BinarizeMode, Checkpoint, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "burnkit", version, about = "Self-supervised binary network training by joint classifier distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Supervised pretraining of the FP teacher extractor.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        /// Config file for the network shape (`teacher_widths`, `strides`).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Binary student pretraining against a frozen teacher extractor.
    Burn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Disable components: no-fs, no-dyn, no-mst.
        #[arg(long, num_args = 1.., value_name = "ABLATION")]
        ablate: Vec<Ablation>,
        /// Config overrides, `key=value`, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Linear probe on a frozen extractor.
    EvalLinear {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config file for `strides` and the probe-independent network keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also probe a randomly initialized extractor of the same shape.
        #[arg(long)]
        random_control: bool,
        #[arg(long, default_value = "run")]
        run_id: String,
        #[arg(long, default_value = "burn")]
        method: String,
        #[arg(long, default_value_t = 0.3)]
        probe_lr: f32,
        #[arg(long, default_value_t = 30)]
        probe_epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Toy EMA-target divergence simulation.
    EmaSim {
        #[arg(long)]
        mode: EmaMode,
        /// Per-iteration mean and std across runs.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-run series.
        #[arg(long)]
        runs_out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long, default_value_t = 4.8)]
        eta: f32,
        #[arg(long, default_value_t = 0.99)]
        tau: f32,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `relative` (default) or `raw` distances.
        #[arg(long, default_value = "relative")]
        metric: DistanceMetric,
    },
    /// Checks XNOR-popcount GEMM against float GEMM and times both.
    XnorBench {
        #[arg(long)]
        m: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes the procedural 10-class glyph dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Converts `ROOT/<class>/*.png` into a dataset file.
    ConvertImages {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Format { .. } | Error::Load { .. } | Error::Data(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn init_threads() -> burnkit::Result<()> {
    let Ok(v) = std::env::var("BURNKIT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("BURNKIT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_config(path: Option<&Path>) -> burnkit::Result<BurnConfig> {
    match path {
        Some(p) => BurnConfig::load(p),
        None => Ok(BurnConfig::default()),
    }
}

fn create(path: &Path) -> burnkit::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn run(cmd: Cmd) -> burnkit::Result<()> {
    match cmd {
        Cmd::PretrainTeacher { data, out, epochs, seed, batch_size, lr, config } => {
            let ds = Dataset::load(&data)?;
            let net = load_config(config.as_deref())?.net;
            let cfg = TeacherConfig { epochs, seed, batch_size, lr, net, ..TeacherConfig::default() };
            println!("epoch,loss,accuracy");
            let (ck, _) = pretrain_teacher(&cfg, &ds, |e| {
                println!("{},{},{}", e.epoch, e.loss, e.accuracy);
                eprintln!("epoch {} loss {:.5} train accuracy {:.4}", e.epoch, e.loss, e.accuracy);
            })?;
            ck.save(&out)?;
            eprintln!("wrote {} ({})", out.display(), ck.hash());
        }
        Cmd::Burn { data, teacher, out, config, ablate, overrides } => {
            let ds = Dataset::load(&data)?;
            let mut cfg = load_config(config.as_deref())?;
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            for a in ablate {
                cfg.apply(a);
            }
            let tck = Checkpoint::load(&teacher)?;
            cfg.net = teacher_net_config(&cfg.net, &tck)?;
            let mut t = build_teacher(&cfg.net, &tck, cfg.seed)?;
            fs::create_dir_all(&out)?;
            let mut tel = Telemetry::to_file(telemetry_path(&out))?.with_log(|m| eprintln!("{m}"));
            let outcome = run_burn(&cfg, &mut t, &ds, &mut tel, Some(&out))?;
            for (i, ck) in outcome.stages.iter().enumerate() {
                eprintln!("stage {} done at iteration {} ({})", i + 1, ck.iteration, ck.hash());
            }
            eprintln!("wrote {} ({})", out.join("extractor.bnck").display(), outcome.extractor.hash());
        }
        Cmd::EvalLinear {
            data,
            extractor,
            out,
            config,
            random_control,
            run_id,
            method,
            probe_lr,
            probe_epochs,
            seed,
        } => {
            let ds = Dataset::load(&data)?;
            let base = load_config(config.as_deref())?.net;
            let ck = Checkpoint::load(&extractor)?;
            let pcfg = ProbeConfig { lr: probe_lr, epochs: probe_epochs, seed, ..ProbeConfig::default() };
            let mut student = student_from_extractor(&base, &ck)?;
            let mut rows = Vec::new();
            let r = linear_probe(&mut student, &ds, &pcfg)?;
            eprintln!("{method}: train top-1 {:.4}, held-out top-1 {:.4}", r.train_top1, r.test_top1);
            rows.push(ProbeRow { run_id: run_id.clone(), pretrain_method: method, probe_lr, top1: r.test_top1 });
            if random_control {
                let mut random = make_student(student.config(), BinarizeMode::FullBinary, seed, None)?;
                let r = linear_probe(&mut random, &ds, &pcfg)?;
                eprintln!("random: train top-1 {:.4}, held-out top-1 {:.4}", r.train_top1, r.test_top1);
                rows.push(ProbeRow { run_id, pretrain_method: "random".into(), probe_lr, top1: r.test_top1 });
            }
            let mut w = create(&out)?;
            writeln!(w, "{}", ProbeRow::CSV_HEADER)?;
            for row in &rows {
                writeln!(w, "{}", row.csv_row())?;
            }
            w.flush()?;
        }
        Cmd::EmaSim { mode, out, runs_out, dim, eta, tau, iters, runs, seed, metric } => {
            let cfg = EmaSimConfig { dim, eta, tau, iters, runs, mode, metric, seed };
            let trace = run_sim(&cfg)?;
            let mut w = create(&out)?;
            trace.write_aggregate_csv(&mut w)?;
            w.flush()?;
            if let Some(p) = runs_out {
                let mut w = create(&p)?;
                trace.write_runs_csv(&mut w)?;
                w.flush()?;
            }
            eprintln!("{mode}: final distance mean {:.6} std {:.6}", trace.final_mean(), trace.final_std());
        }
        Cmd::XnorBench { m, k, n, reps, seed } => {
            let r = xnor_bench(m, k, n, reps, seed)?;
            println!("m,k,n,exact,packed_macs_per_sec,float_macs_per_sec");
            println!("{m},{k},{n},{},{:.6e},{:.6e}", r.exact, r.packed_macs_per_sec, r.float_macs_per_sec);
            eprintln!("exact: {}", r.exact);
            if !r.exact {
                return Err(Error::NonFinite { iter: 0, tensor: "xnor_gemm output (mismatch with float GEMM)".into() });
            }
        }
        Cmd::SynthData { out, count, seed } => {
            let ds = generate(&SynthConfig::new(count, seed))?;
            ds.save(&out)?;
            eprintln!("wrote {} images to {}", ds.len(), out.display());
        }
        Cmd::ConvertImages { root, out, height, width } => {
            let (ds, classes) = convert_image_folder(&root, height, width)?;
            ds.save(&out)?;
            println!("class_id,name");
            for (i, c) in classes.iter().enumerate() {
                println!("{i},{c}");
            }
            eprintln!("wrote {} images in {} classes to {}", ds.len(), classes.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
