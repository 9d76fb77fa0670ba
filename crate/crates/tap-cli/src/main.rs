//! `tap` — command-line front end for the attention-patch experiment suite.
//!
//! Subcommands: `train` (one run + checkpoint), `benchmark` (five-variant
//! Monte-Carlo table), `sweep` (reference-batch-size curve), `verify-theorem`
//! (kernel-regression asymptotics laboratory), `gen-data` (offline synthetic
//! corpora). Every run writes to a fresh timestamped, seed-named subdirectory;
//! results are emitted as CSV + JSON side by side with SVG plots.
//!
//! Exit codes: 2 = configuration error, 3 = data error, 4 = numeric abort.

mod config;
mod svg;

use clap::{Parser, Subcommand};
use config::RunConfigFile;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tap_core::data::{
    load_csv_tabular, load_mnist_half, write_synthetic_corpus, write_synthetic_tabular,
    ColumnSchema, DatasetName, ModalDataset,
};
use tap_core::error::{Result, TapError};
use tap_core::kernel::{kernel_constants, KernelFamily, KernelSpec};
use tap_core::model::{ModelState, Variant};
use tap_core::nw::{verify_theorem1, SyntheticProblem, TheoremReport};
use tap_core::scalar::Scalar;
use tap_core::train::{
    batch_size_sweep, monte_carlo, run_once_full, McSummary, RunResult, SweepResult,
};

/// Instantiate a scalar-generic command at the configured precision.
macro_rules! with_precision {
    ($cfg:expr, $f:ident $(, $arg:expr)*) => {
        match $cfg.train.precision.as_str() {
            "f32" => $f::<f32>(&$cfg $(, $arg)*),
            "f64" => $f::<f64>(&$cfg $(, $arg)*),
            other => Err(TapError::Config(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    };
}

#[derive(Parser)]
#[command(
    name = "tap",
    version,
    about = "Kernelized cross-attention experiments: training, benchmarks, sweeps, and the kernel-regression theorem laboratory",
    after_help = "Environment overrides: TAP_CONFIG, TAP_SEED, TAP_JOBS, TAP_OUT_DIR, TAP_DATASET, TAP_VARIANT.\n\
                  \n\
                  Config file keys (TOML; every key optional, defaults shown):\n\
                  [dataset] name=\"mnist_half\" images/labels/csv/schema=<path|unset> standardize=<bool|unset>\n\
                  [model]   variant=\"tap\" hidden_dim=64 dropout_rate=0.5 norm_const=<unset: √d_h·(n′_z/m)^(−1/d_h)>\n\
                  [train]   lr=1e-4 adam_beta1=0.9 adam_beta2=0.999 adam_eps=1e-8 data_batch=100 ref_batch=250\n\
                  \x20         epochs_base=1000 mc_runs=20 seed=0 metric_mode=\"best5\" n_labeled=200 n_reference=1000\n\
                  \x20         eval_every=1 jobs=1 precision=\"f32\"\n\
                  [sweep]   sizes=[100,200,250,500,1000]\n\
                  [theorem] problem=\"sin_gauss\" sigma=0.1 linear_a=0.02 linear_b=0.0 alpha=0.2 trials=50\n\
                  \x20         n_values=[512..32768 doubling] grid=[−4..4 step 0.25]\n\
                  [gen]     rows=1800 corpus_seed=7 dir=\"data\" class_amp_x=0.35 class_amp_z=1.3\n\
                  \x20         style_amp_x=0.45 style_amp_z=0.45 noise_x=1.0 noise_z=0.35\n\
                  [output]  dir=\"runs\" plots=true"
)]
struct Cli {
    /// TOML run-configuration file (defaults reproduce the image-halves protocol)
    #[arg(long, global = true, env = "TAP_CONFIG")]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file)
    #[arg(long, global = true, env = "TAP_SEED")]
    seed: Option<u64>,

    /// Monte-Carlo worker threads; results are identical for any value
    #[arg(long, global = true, env = "TAP_JOBS")]
    jobs: Option<usize>,

    /// Base directory for result subdirectories
    #[arg(long, global = true, env = "TAP_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one (dataset, variant) pair; writes the run result and a checkpoint
    Train {
        /// mnist_half, activity, or crop
        #[arg(long, env = "TAP_DATASET")]
        dataset: Option<String>,
        /// baseline, ffn, control_group, tap, or tap_no_batch
        #[arg(long, env = "TAP_VARIANT")]
        variant: Option<String>,
        /// Reference batch size (only meaningful for reference-using variants)
        #[arg(long)]
        ref_batch: Option<usize>,
        /// Epoch budget before the 1/m reduction
        #[arg(long)]
        epochs: Option<usize>,
        /// best5 or literal_lowest5
        #[arg(long)]
        metric_mode: Option<String>,
    },
    /// Five-variant Monte-Carlo benchmark table (the hierarchy figure protocol)
    Benchmark {
        #[arg(long, env = "TAP_DATASET")]
        dataset: Option<String>,
        #[arg(long)]
        ref_batch: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        metric_mode: Option<String>,
    },
    /// Accuracy vs. reference-batch-size curve with a baseline reference row
    Sweep {
        #[arg(long, env = "TAP_DATASET")]
        dataset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        metric_mode: Option<String>,
        /// Comma-separated batch sizes (default 100,200,250,500,1000)
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Kernel-regression asymptotics laboratory (bias/variance scaling report)
    VerifyTheorem {},
    /// Generate an offline synthetic corpus (IDX pair or CSV) under the data dir
    GenData {
        #[arg(long, env = "TAP_DATASET")]
        dataset: Option<String>,
        /// Corpus row count
        #[arg(long)]
        rows: Option<usize>,
        /// Generator seed (independent of the training master seed)
        #[arg(long)]
        corpus_seed: Option<u64>,
        /// Directory to write data files into
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &TapError) -> u8 {
    match e {
        TapError::Config(_) | TapError::Serde(_) => 2,
        TapError::Io { .. } | TapError::Idx { .. } | TapError::Csv { .. } | TapError::Data(_) => 3,
        TapError::Numeric(_) => 4,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.train.jobs = jobs;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = dir.clone();
    }

    match cli.cmd {
        Cmd::Train {
            dataset,
            variant,
            ref_batch,
            epochs,
            metric_mode,
        } => {
            if let Some(d) = dataset {
                cfg.dataset.name = d;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            let variant: Variant = cfg.model.variant.parse()?;
            if let Some(rb) = ref_batch {
                if !variant.needs_refs() {
                    return Err(TapError::Config(format!(
                        "--ref-batch {rb} given, but variant {variant} takes no reference data"
                    )));
                }
                cfg.train.ref_batch = rb;
            }
            if let Some(e) = epochs {
                cfg.train.epochs_base = e;
            }
            if let Some(m) = metric_mode {
                cfg.train.metric_mode = m;
            }
            with_precision!(cfg, cmd_train, variant)
        }
        Cmd::Benchmark {
            dataset,
            ref_batch,
            epochs,
            metric_mode,
        } => {
            if let Some(d) = dataset {
                cfg.dataset.name = d;
            }
            if let Some(rb) = ref_batch {
                cfg.train.ref_batch = rb;
            }
            if let Some(e) = epochs {
                cfg.train.epochs_base = e;
            }
            if let Some(m) = metric_mode {
                cfg.train.metric_mode = m;
            }
            with_precision!(cfg, cmd_benchmark)
        }
        Cmd::Sweep {
            dataset,
            epochs,
            metric_mode,
            sizes,
        } => {
            if let Some(d) = dataset {
                cfg.dataset.name = d;
            }
            if let Some(e) = epochs {
                cfg.train.epochs_base = e;
            }
            if let Some(m) = metric_mode {
                cfg.train.metric_mode = m;
            }
            if let Some(s) = sizes {
                cfg.sweep.sizes = s;
            }
            with_precision!(cfg, cmd_sweep)
        }
        Cmd::VerifyTheorem {} => cmd_verify_theorem(&cfg),
        Cmd::GenData {
            dataset,
            rows,
            corpus_seed,
            data_dir,
        } => {
            if let Some(d) = dataset {
                cfg.dataset.name = d;
            }
            if let Some(r) = rows {
                cfg.gen.rows = r;
            }
            if let Some(s) = corpus_seed {
                cfg.gen.corpus_seed = s;
            }
            if let Some(d) = data_dir {
                cfg.gen.dir = d;
            }
            cmd_gen_data(&cfg)
        }
    }
}

// ── Dataset resolution ────────────────────────────────────────────────────────

fn load_dataset<F: Scalar>(cfg: &RunConfigFile) -> Result<ModalDataset<F>> {
    let name: DatasetName = cfg.dataset.name.parse()?;
    match name {
        DatasetName::MnistHalf => {
            let images = cfg
                .dataset
                .images
                .clone()
                .unwrap_or_else(|| PathBuf::from("data/mnist_half/images-idx3-ubyte"));
            let labels = cfg
                .dataset
                .labels
                .clone()
                .unwrap_or_else(|| PathBuf::from("data/mnist_half/labels-idx1-ubyte"));
            if !images.exists() {
                return Err(TapError::Data(format!(
                    "dataset file {} not found; generate an offline corpus with `tap gen-data --dataset mnist_half`",
                    images.display()
                )));
            }
            load_mnist_half(&images, &labels)
        }
        DatasetName::Activity | DatasetName::Crop => {
            let csv = cfg
                .dataset
                .csv
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("data/{name}/{name}.csv")));
            if !csv.exists() {
                return Err(TapError::Data(format!(
                    "dataset file {} not found; generate an offline corpus with `tap gen-data --dataset {name}`",
                    csv.display()
                )));
            }
            let schema = match &cfg.dataset.schema {
                Some(path) => ColumnSchema::load(path)?,
                None => ColumnSchema::for_dataset(name)?,
            };
            load_csv_tabular(&csv, &schema)
        }
    }
}

// ── Output plumbing ───────────────────────────────────────────────────────────

fn fresh_run_dir(base: &Path, cmd: &str, tag: &str, seed: u64) -> Result<PathBuf> {
    let ts = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let stem = format!("{cmd}-{tag}-{ts}-seed{seed}");
    let mut path = base.join(&stem);
    let mut k = 1;
    while path.exists() {
        path = base.join(format!("{stem}-{k}"));
        k += 1;
    }
    std::fs::create_dir_all(&path).map_err(|e| TapError::io(path.display().to_string(), e))?;
    Ok(path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| TapError::Serde(e.to_string()))?;
    std::fs::write(path, json).map_err(|e| TapError::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TapError::io(path.display().to_string(), e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path)
        .map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))
}

fn csv_record<W: std::io::Write>(
    w: &mut csv::Writer<W>,
    path: &Path,
    rec: &[String],
) -> Result<()> {
    w.write_record(rec)
        .map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))
}

fn finish_csv<W: std::io::Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| TapError::csv(path.display().to_string(), e.to_string()))
}

fn eval_epochs(epochs: usize, every: usize) -> Vec<usize> {
    (0..epochs)
        .filter(|e| e % every == 0 || e + 1 == epochs)
        .collect()
}

// ── train ─────────────────────────────────────────────────────────────────────

fn cmd_train<F: Scalar>(cfg: &RunConfigFile, variant: Variant) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let ds: ModalDataset<F> = load_dataset(cfg)?;
    let dir = fresh_run_dir(
        &cfg.output.dir,
        "train",
        &format!("{}-{}", ds.name, variant),
        train_cfg.seed,
    )?;
    write_json(&dir.join("config.json"), cfg)?;

    let (result, model, adam) = run_once_full(&ds, variant, &train_cfg, 0)?;

    let mut state = ModelState::capture(&model, result.epochs, result.steps, result.run_seed);
    state.adam_m = Some(adam.m.clone());
    state.adam_v = Some(adam.v.clone());
    state.adam_t = Some(adam.t);
    state.save(&dir.join("checkpoint.json"))?;

    write_json(&dir.join("result.json"), &result)?;
    write_history_csv(&dir, &result, train_cfg.eval_every)?;

    if cfg.output.plots {
        let loss_svg = svg::line_plot(
            &format!("training loss — {} / {}", ds.name, variant),
            "epoch",
            "mean cross-entropy",
            &[svg::Series {
                label: "train loss".into(),
                points: result
                    .train_loss
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| (i as f64, l))
                    .collect(),
                err: None,
            }],
            &[],
        );
        write_text(&dir.join("loss_curve.svg"), &loss_svg)?;
        let epochs = eval_epochs(result.epochs, train_cfg.eval_every);
        let acc_svg = svg::line_plot(
            &format!("validation accuracy — {} / {}", ds.name, variant),
            "epoch",
            "accuracy",
            &[svg::Series {
                label: "val accuracy".into(),
                points: epochs
                    .iter()
                    .zip(result.val_acc.iter())
                    .map(|(&e, &a)| (e as f64, a))
                    .collect(),
                err: None,
            }],
            &[(
                result.final_metric,
                format!("final metric {:.4}", result.final_metric),
            )],
        );
        write_text(&dir.join("accuracy_curve.svg"), &acc_svg)?;
    }

    println!(
        "{} / {}: final metric {:.4} ({}) over {} epochs — results in {}",
        ds.name,
        variant,
        result.final_metric,
        result.metric_mode,
        result.epochs,
        dir.display()
    );
    Ok(())
}

fn write_history_csv(dir: &Path, result: &RunResult, eval_every: usize) -> Result<()> {
    let path = dir.join("history.csv");
    let mut w = csv_writer(&path)?;
    csv_record(
        &mut w,
        &path,
        &["epoch".into(), "train_loss".into(), "val_acc".into()],
    )?;
    let evals = eval_epochs(result.epochs, eval_every);
    let acc_at = |epoch: usize| -> String {
        evals
            .iter()
            .position(|&e| e == epoch)
            .and_then(|i| result.val_acc.get(i))
            .map(|a| format!("{a}"))
            .unwrap_or_default()
    };
    for (epoch, &loss) in result.train_loss.iter().enumerate() {
        csv_record(
            &mut w,
            &path,
            &[epoch.to_string(), loss.to_string(), acc_at(epoch)],
        )?;
    }
    finish_csv(w, &path)
}

// ── benchmark ─────────────────────────────────────────────────────────────────

fn cmd_benchmark<F: Scalar>(cfg: &RunConfigFile) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let ds: ModalDataset<F> = load_dataset(cfg)?;
    let dir = fresh_run_dir(
        &cfg.output.dir,
        "benchmark",
        &ds.name.to_string(),
        train_cfg.seed,
    )?;
    write_json(&dir.join("config.json"), cfg)?;

    let summaries = monte_carlo(&ds, &Variant::ALL, &train_cfg)?;
    write_json(&dir.join("benchmark.json"), &summaries)?;
    write_benchmark_csv(&dir, &summaries)?;

    if cfg.output.plots {
        let bars: Vec<(String, f64, f64)> = summaries
            .iter()
            .map(|s| (s.variant.to_string(), s.mean, s.std_err))
            .collect();
        let chart = svg::bar_chart(
            &format!(
                "final metric ({}) over {} Monte-Carlo runs — {}",
                train_cfg.metric_mode, train_cfg.mc_runs, ds.name
            ),
            "accuracy",
            &bars,
        );
        write_text(&dir.join("benchmark.svg"), &chart)?;
    }

    println!(
        "benchmark on {} ({} runs each):",
        ds.name, train_cfg.mc_runs
    );
    for s in &summaries {
        let flag = if s.failed.is_empty() {
            String::new()
        } else {
            format!("  [{} runs FAILED]", s.failed.len())
        };
        println!(
            "  {:>14}: {:.4} ± {:.4}{flag}",
            s.variant.to_string(),
            s.mean,
            s.std_err
        );
    }
    println!("results in {}", dir.display());
    Ok(())
}

fn write_benchmark_csv(dir: &Path, summaries: &[McSummary]) -> Result<()> {
    let path = dir.join("benchmark.csv");
    let mut w = csv_writer(&path)?;
    csv_record(
        &mut w,
        &path,
        &[
            "variant".into(),
            "mean".into(),
            "stderr".into(),
            "runs".into(),
            "failed".into(),
        ],
    )?;
    for s in summaries {
        csv_record(
            &mut w,
            &path,
            &[
                s.variant.to_string(),
                s.mean.to_string(),
                s.std_err.to_string(),
                s.metrics.len().to_string(),
                s.failed.len().to_string(),
            ],
        )?;
    }
    finish_csv(w, &path)
}

// ── sweep ─────────────────────────────────────────────────────────────────────

fn cmd_sweep<F: Scalar>(cfg: &RunConfigFile) -> Result<()> {
    let train_cfg = cfg.train_config()?;
    let ds: ModalDataset<F> = load_dataset(cfg)?;
    let dir = fresh_run_dir(
        &cfg.output.dir,
        "sweep",
        &ds.name.to_string(),
        train_cfg.seed,
    )?;
    write_json(&dir.join("config.json"), cfg)?;

    let sweep = batch_size_sweep(&ds, &cfg.sweep.sizes, &train_cfg)?;
    for warning in &sweep.warnings {
        eprintln!("warning: {warning}");
    }
    write_json(&dir.join("sweep.json"), &sweep)?;
    write_sweep_csv(&dir, &sweep)?;

    if cfg.output.plots {
        let series = svg::Series {
            label: "tap".into(),
            points: sweep.points.iter().map(|p| (p.ratio, p.mean)).collect(),
            err: Some(sweep.points.iter().map(|p| p.std_err).collect()),
        };
        let chart = svg::line_plot(
            &format!("accuracy vs. reference batch size — {}", ds.name),
            "unlabeled-to-labeled ratio (batch size / n_labeled)",
            "final metric",
            &[series],
            &[(
                sweep.baseline.mean,
                format!("baseline {:.4}", sweep.baseline.mean),
            )],
        );
        write_text(&dir.join("sweep.svg"), &chart)?;
    }

    println!("reference-batch sweep on {}:", ds.name);
    for p in &sweep.points {
        println!(
            "  size {:>5} (ratio {:>4.2}, m={}): {:.4} ± {:.4}",
            p.effective_size, p.ratio, p.m, p.mean, p.std_err
        );
    }
    println!(
        "  baseline: {:.4} ± {:.4}\nresults in {}",
        sweep.baseline.mean,
        sweep.baseline.std_err,
        dir.display()
    );
    Ok(())
}

fn write_sweep_csv(dir: &Path, sweep: &SweepResult) -> Result<()> {
    let path = dir.join("sweep.csv");
    let mut w = csv_writer(&path)?;
    csv_record(
        &mut w,
        &path,
        &[
            "kind".into(),
            "requested_size".into(),
            "effective_size".into(),
            "ratio".into(),
            "m".into(),
            "epochs".into(),
            "mean".into(),
            "stderr".into(),
            "runs".into(),
            "failed".into(),
        ],
    )?;
    for p in &sweep.points {
        csv_record(
            &mut w,
            &path,
            &[
                "point".into(),
                p.requested_size.to_string(),
                p.effective_size.to_string(),
                p.ratio.to_string(),
                p.m.to_string(),
                p.epochs.to_string(),
                p.mean.to_string(),
                p.std_err.to_string(),
                p.metrics.len().to_string(),
                p.failed.len().to_string(),
            ],
        )?;
    }
    csv_record(
        &mut w,
        &path,
        &[
            "baseline".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            sweep.baseline.mean.to_string(),
            sweep.baseline.std_err.to_string(),
            sweep.baseline.metrics.len().to_string(),
            sweep.baseline.failed.len().to_string(),
        ],
    )?;
    finish_csv(w, &path)
}

// ── verify-theorem ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct TheoremVerdict {
    var_slope: f64,
    var_slope_target: f64,
    var_slope_tolerance: f64,
    var_slope_ok: bool,
    bias_slope: String,
    bias_slope_ok: Option<bool>,
    max_abs_t: f64,
    t_critical: f64,
    t_ok: bool,
    residual_var_ratio: f64,
    residual_tolerance: f64,
    residual_ok: bool,
    mu2: f64,
    rk: f64,
    pass: bool,
}

fn verdict_from(report: &TheoremReport) -> TheoremVerdict {
    let var_slope_ok = (report.var_slope - report.var_slope_target).abs() <= 0.2;
    let (bias_slope, bias_slope_ok) = if report.bias_slope.is_nan() {
        (
            "n/a (|Ψ|/p below threshold on the whole grid)".to_string(),
            None,
        )
    } else {
        (
            format!("{:.4}", report.bias_slope),
            Some((report.bias_slope - report.bias_slope_target).abs() <= 0.4),
        )
    };
    let max_abs_t = report
        .zero_psi_t_stats
        .iter()
        .map(|&(_, t)| t.abs())
        .fold(0.0f64, f64::max);
    let t_ok = !report.zero_psi_t_stats.is_empty() && max_abs_t <= report.t_critical;
    let residual_ok = (report.residual_var_ratio - 1.0).abs() <= 0.35;
    let constants = kernel_constants(KernelFamily::Gaussian, 1);
    TheoremVerdict {
        var_slope: report.var_slope,
        var_slope_target: report.var_slope_target,
        var_slope_tolerance: 0.2,
        var_slope_ok,
        bias_slope,
        bias_slope_ok,
        max_abs_t,
        t_critical: report.t_critical,
        t_ok,
        residual_var_ratio: report.residual_var_ratio,
        residual_tolerance: 0.35,
        residual_ok,
        mu2: constants.mu2,
        rk: constants.rk,
        pass: var_slope_ok && t_ok && residual_ok,
    }
}

fn cmd_verify_theorem(cfg: &RunConfigFile) -> Result<()> {
    let t = &cfg.theorem;
    let problem = match t.problem.as_str() {
        "sin_gauss" => SyntheticProblem::SinGauss { sigma: t.sigma },
        "linear_gauss" => SyntheticProblem::LinearGauss {
            a: t.linear_a,
            b: t.linear_b,
            sigma: t.sigma,
        },
        "quad_gauss" => SyntheticProblem::QuadGauss { sigma: t.sigma },
        other => return Err(TapError::Config(format!(
            "unknown theorem problem '{other}' (expected sin_gauss, linear_gauss, or quad_gauss)"
        ))),
    };
    let dir = fresh_run_dir(
        &cfg.output.dir,
        "verify-theorem",
        &t.problem,
        cfg.train.seed,
    )?;
    write_json(&dir.join("config.json"), cfg)?;

    let spec = KernelSpec::gaussian(1);
    let report = verify_theorem1(
        &problem,
        &spec,
        &t.n_values,
        t.alpha,
        t.trials,
        &t.grid,
        cfg.train.seed,
    )?;
    let verdict = verdict_from(&report);

    #[derive(Serialize)]
    struct Out<'a> {
        report: &'a TheoremReport,
        verdict: &'a TheoremVerdict,
    }
    write_json(
        &dir.join("theorem.json"),
        &Out {
            report: &report,
            verdict: &verdict,
        },
    )?;
    write_theorem_csv(&dir, &report)?;

    if cfg.output.plots {
        // variance decay at the density mode (log–log against n·h^d)
        let mode_idx = report
            .grid
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let pts: Vec<(f64, f64)> = report
            .n_values
            .iter()
            .zip(report.h_values.iter())
            .enumerate()
            .map(|(k, (&n, &h))| {
                (
                    (n as f64 * h).ln(),
                    report.empirical_var[mode_idx][k].max(1e-300).ln(),
                )
            })
            .collect();
        let fit_label = format!("slope {:.3} (target −1 ± 0.2)", report.var_slope);
        let chart = svg::line_plot(
            "conditional variance decay at the density mode",
            "ln(n·h)",
            "ln var",
            &[svg::Series {
                label: fit_label,
                points: pts,
                err: None,
            }],
            &[],
        );
        write_text(&dir.join("theorem.svg"), &chart)?;
    }

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "variance slope {:.4} (target {} ± 0.2): {}",
        verdict.var_slope,
        verdict.var_slope_target,
        if verdict.var_slope_ok { "pass" } else { "FAIL" }
    );
    println!("bias slope {}", verdict.bias_slope);
    println!(
        "zero-Ψ t-test: max |t| {:.3} vs critical {:.3}: {}",
        verdict.max_abs_t,
        verdict.t_critical,
        if verdict.t_ok { "pass" } else { "FAIL" }
    );
    println!(
        "rescaled residual variance ratio {:.4} (±35%): {}",
        verdict.residual_var_ratio,
        if verdict.residual_ok { "pass" } else { "FAIL" }
    );
    println!(
        "kernel constants: μ₂ = {} , R(k) = {:.6}",
        verdict.mu2, verdict.rk
    );
    println!(
        "overall: {} — results in {}",
        if verdict.pass { "PASS" } else { "FAIL" },
        dir.display()
    );
    if verdict.pass {
        Ok(())
    } else {
        Err(TapError::Numeric(
            "theorem verification failed tolerances".into(),
        ))
    }
}

fn write_theorem_csv(dir: &Path, report: &TheoremReport) -> Result<()> {
    let path = dir.join("theorem.csv");
    let mut w = csv_writer(&path)?;
    csv_record(
        &mut w,
        &path,
        &[
            "x".into(),
            "n".into(),
            "h".into(),
            "empirical_bias".into(),
            "predicted_bias".into(),
            "empirical_var_fixed_design".into(),
            "empirical_var_unconditional".into(),
            "predicted_var".into(),
        ],
    )?;
    for (pi, &x) in report.grid.iter().enumerate() {
        if report.skipped_points.contains(&x) {
            continue;
        }
        for (k, (&n, &h)) in report
            .n_values
            .iter()
            .zip(report.h_values.iter())
            .enumerate()
        {
            csv_record(
                &mut w,
                &path,
                &[
                    x.to_string(),
                    n.to_string(),
                    h.to_string(),
                    report.empirical_bias[pi][k].to_string(),
                    report.predicted_bias[pi][k].to_string(),
                    report.empirical_var[pi][k].to_string(),
                    report.empirical_var_unconditional[pi][k].to_string(),
                    report.predicted_var[pi][k].to_string(),
                ],
            )?;
        }
    }
    finish_csv(w, &path)
}

// ── gen-data ──────────────────────────────────────────────────────────────────

fn cmd_gen_data(cfg: &RunConfigFile) -> Result<()> {
    let name: DatasetName = cfg.dataset.name.parse()?;
    let gen_cfg = cfg.gen_config();
    let dir = cfg.gen.dir.join(name.to_string());
    match name {
        DatasetName::MnistHalf => {
            let (images, labels) = write_synthetic_corpus(&dir, &gen_cfg)?;
            println!(
                "wrote {} rows:\n  {}\n  {}",
                gen_cfg.n_rows,
                images.display(),
                labels.display()
            );
        }
        DatasetName::Activity | DatasetName::Crop => {
            let csv = write_synthetic_tabular(&dir, name, &gen_cfg)?;
            println!("wrote {} rows:\n  {}", gen_cfg.n_rows, csv.display());
        }
    }
    Ok(())
}
