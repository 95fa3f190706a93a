use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use specmask::adapt::{grad_check, GradCheckCase, GradCheckReport, GRAD_TOL};
use specmask::diagnostics::{
    cross_phase_diff_hist, diagnose, feature_cka, DiagnosticsReport, Histogram,
};
use specmask::maskers::ApmVariant;
use specmask::report::{
    write_cdf_csv, write_hist_csv, write_json, write_rows_csv, write_sweep_csv, RunConfig,
    RunManifest, SEED_ENV, TOOL_VERSION,
};
use specmask::synthbench::{run_benchmark, run_sweep, Shift};
use specmask::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "specmask",
    version,
    about = "Frequency-domain feature masking benchmarks and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adapt maskers on synthetic target episodes and compare with the frozen baseline.
    Bench(RunArgs),
    /// Frozen-pipeline mIoU under the 3x3 amplitude/phase band filters.
    Sweep(RunArgs),
    /// Channel statistics of one or two SMT feature maps.
    Diag {
        /// One or two c x h x w SMT tensors.
        #[arg(required = true, num_args = 1..=2)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-difference check of every analytic backward pass.
    Gradcheck {
        /// Instance seeds; may be repeated.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Corrupt one analytic gradient (negative control).
        #[arg(long)]
        perturb_backward: bool,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "specmask-run")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    variant: Option<ApmVariant>,
    /// Enable channel phase attention.
    #[arg(long)]
    acpa: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Episode-level worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Strength of the high-band amplitude noise on the target domain.
    #[arg(long)]
    sigma: Option<f64>,
    /// Band split for sweep filters, as a fraction of the maximal radius.
    #[arg(long)]
    cutoff: Option<f64>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<ExitCode, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

/// Defaults, then the environment seed, then the config file.
fn base_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    if let Some(path) = &common.config {
        let bytes = std::fs::read(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let env_seed = cfg.seed;
        let has_seed = serde_json::from_slice::<serde_json::Value>(&bytes)
            .map(|v| {
                v.get("seed").is_some() || v.get("config").and_then(|c| c.get("seed")).is_some()
            })
            .unwrap_or(false);
        cfg = RunConfig::from_json(&bytes)
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        if !has_seed {
            cfg.seed = env_seed;
        }
    }
    Ok(cfg)
}

fn resolve(args: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = base_config(&args.common)?;
    if let Some(v) = args.episodes {
        cfg.episodes = v;
    }
    if let Some(v) = args.shots {
        cfg.shots = v;
    }
    if let Some(v) = args.variant {
        cfg.adapt.apm_variant = v;
    }
    if args.acpa {
        cfg.adapt.use_acpa = true;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lr {
        cfg.adapt.lr = v;
    }
    if let Some(v) = args.iterations {
        cfg.adapt.iterations = v;
    }
    if let Some(v) = args.jobs {
        cfg.jobs = v;
    }
    if let Some(v) = args.sigma {
        cfg.shift = Shift::HighBandAmpNoise { sigma: v };
    }
    if let Some(v) = args.cutoff {
        cfg.cutoff = v;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn finish(
    command: &str,
    cfg: RunConfig,
    seeds: Vec<u64>,
    out: &Path,
    outputs: Vec<String>,
    started: Instant,
) -> Result<(), Failure> {
    let manifest = RunManifest {
        command: command.into(),
        config: cfg,
        seeds,
        tool_version: TOOL_VERSION.into(),
        outputs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn cmd_bench(args: &RunArgs) -> CmdResult {
    let cfg = resolve(args)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let started = Instant::now();
    eprintln!(
        "bench: {} episodes, {}, acpa={}, lr={}, seed={}",
        cfg.episodes,
        cfg.adapt.apm_variant.name(),
        cfg.adapt.use_acpa,
        cfg.adapt.lr,
        cfg.seed
    );
    let report = run_benchmark(
        &cfg.source(),
        &cfg.target(),
        &cfg.adapt_config(),
        &cfg.bench_options(),
    )?;
    write_json(&out.join("report.json"), &report)?;
    write_rows_csv(&out.join("rows.csv"), &report.rows)?;
    let mut outputs = vec!["report.json".to_string(), "rows.csv".to_string()];
    if cfg.dump_gates {
        report
            .amp_gate_response
            .write(out.join("gate_response_amp.smt"))?;
        report
            .phase_gate_response
            .write(out.join("gate_response_phase.smt"))?;
        outputs.extend([
            "gate_response_amp.smt".to_string(),
            "gate_response_phase.smt".to_string(),
        ]);
    }
    let s = &report.summary;
    eprintln!(
        "bench: baseline mIoU {:.4}, adapted mIoU {:.4}, delta {:+.4}",
        s.mean_baseline_miou, s.mean_adapted_miou, s.mean_delta_miou
    );
    let seeds = vec![cfg.seed];
    finish("bench", cfg, seeds, out, outputs, started)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(args: &RunArgs) -> CmdResult {
    let cfg = resolve(args)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let started = Instant::now();
    let sweep = run_sweep(
        &cfg.source(),
        &cfg.target(),
        &cfg.adapt_config(),
        &cfg.bench_options(),
        cfg.cutoff,
    )?;
    write_json(&out.join("report.json"), &sweep)?;
    write_sweep_csv(&out.join("rows.csv"), &sweep)?;
    for r in &sweep.rows {
        eprintln!(
            "sweep: amp={:<4} phase={:<4} mIoU {:.4}",
            r.amp_band.name(),
            r.phase_band.name(),
            r.mean_miou
        );
    }
    let seeds = vec![cfg.seed];
    finish(
        "sweep",
        cfg,
        seeds,
        out,
        vec!["report.json".into(), "rows.csv".into()],
        started,
    )?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DiagOutput {
    inputs: Vec<String>,
    reports: Vec<DiagnosticsReport>,
    cross_cka: Option<f64>,
    cross_phase_hist: Option<Histogram>,
}

fn cmd_diag(inputs: &[PathBuf], common: &CommonArgs) -> CmdResult {
    let cfg = base_config(common)?;
    let maps = inputs
        .iter()
        .map(|p| {
            let t = Tensor::read(p).map_err(usage)?;
            t.dims3()
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok(t)
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let out = &common.out;
    prepare_out(out)?;
    let started = Instant::now();
    let mut reports = Vec::new();
    let mut outputs = vec!["report.json".to_string()];
    for (i, f) in maps.iter().enumerate() {
        let reference = if maps.len() == 2 {
            Some(&maps[1 - i])
        } else {
            None
        };
        let r = diagnose(f, reference, &cfg.diagnostics)?;
        let (hist, cdf) = (format!("phase_hist_{i}.csv"), format!("corr_cdf_{i}.csv"));
        write_hist_csv(&out.join(&hist), &r.phase_hist)?;
        write_cdf_csv(&out.join(&cdf), &r.corr_cdf)?;
        outputs.extend([hist, cdf]);
        eprintln!(
            "diag: {} mean MI {:.4}, CKA {:.6}, area {:.4}",
            inputs[i].display(),
            r.mean_mi,
            r.cka,
            r.activated_area
        );
        reports.push(r);
    }
    let (cross_cka, cross_phase_hist) = if maps.len() == 2 {
        let h = cross_phase_diff_hist(&maps[0], &maps[1])?;
        write_hist_csv(&out.join("cross_phase_hist.csv"), &h)?;
        outputs.push("cross_phase_hist.csv".into());
        (Some(feature_cka(&maps[0], &maps[1])?), Some(h))
    } else {
        (None, None)
    };
    let report = DiagOutput {
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        reports,
        cross_cka,
        cross_phase_hist,
    };
    write_json(&out.join("report.json"), &report)?;
    let seeds = vec![cfg.diagnostics.seed];
    finish("diag", cfg, seeds, out, outputs, started)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seeds: &[u64], perturb: bool, common: &CommonArgs) -> CmdResult {
    let cfg = base_config(common)?;
    let seeds = if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    };
    let out = &common.out;
    prepare_out(out)?;
    let started = Instant::now();
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for &seed in &seeds {
        for case in GradCheckCase::ALL {
            let r = grad_check(case, seed, perturb)?;
            let verdict = if r.max_rel_err < GRAD_TOL {
                "ok"
            } else {
                "FAIL"
            };
            println!(
                "gradcheck seed={seed} case={} params={} max_rel_err={:.3e} {verdict}",
                r.case, r.n_checked, r.max_rel_err
            );
            reports.push(r);
        }
    }
    write_json(&out.join("report.json"), &reports)?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    finish(
        "gradcheck",
        cfg,
        seeds,
        out,
        vec!["report.json".into()],
        started,
    )?;
    if worst < GRAD_TOL {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck: max relative error {worst:.3e} exceeds {GRAD_TOL:e}");
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Bench(a) => cmd_bench(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diag { inputs, common } => cmd_diag(inputs, common),
        Command::Gradcheck {
            seeds,
            perturb_backward,
            common,
        } => cmd_gradcheck(seeds, *perturb_backward, common),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
