use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use etr_core::gradcheck::{run_gradcheck, GradcheckOptions};
use etr_core::metrics_io::{
    self, apply_override, config_digest, load_checkpoint, parse_config, render_config, render_lineplot,
    save_checkpoint, write_metrics_csv, Checkpoint, MetricsLog, Series,
};
use etr_core::objectives::theory::run_theory_checks;
use etr_core::policy::PolicyParams;
use etr_core::trainer::{self, eval_prompts, evaluate, stream_seed, Method, TrainConfig};

#[derive(Parser)]
#[command(
    name = "etr",
    about = "Elastic trust region policy optimization experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and write metrics, plots and a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Train every (method, seed) pair and summarize per-method medians.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        /// Comma-separated: grpo, cliphigh, etr, etr-micro, etr-macro, etr-inverse.
        #[arg(long, default_value = "grpo,etr")]
        methods: String,
        /// Inclusive range `a..b` or a comma-separated list.
        #[arg(long, default_value = "1..5")]
        seeds: String,
        /// Concurrent runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on the configured suite.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples per prompt; defaults to the config's eval_n.
        #[arg(long)]
        n: Option<usize>,
        /// Fail instead of warning when the checkpoint came from a different config.
        #[arg(long)]
        strict: bool,
    },
    /// Finite-difference check of the objective for every method.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Numeric checks of the threshold scaling and the KL expansion.
    Theory,
}

/// Failure with its exit code: 1 for verification or runtime failures, 2 for usage.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    for entry in &args.overrides {
        config =
            apply_override(&config, entry).map_err(|e| Failure::usage(format!("--override {entry}: {e}")))?;
    }
    Ok(config)
}

fn create_dir(out: &Path) -> CmdResult {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::runtime(format!("cannot create {}: {e}", out.display())))
}

fn io_failure(e: metrics_io::MetricsIoError) -> Failure {
    Failure::runtime(e.to_string())
}

fn series_from(
    log: &MetricsLog,
    name: &str,
    pick: impl Fn(&metrics_io::StepMetrics) -> Option<f64>,
) -> Series {
    Series {
        name: name.to_string(),
        points: log
            .rows()
            .iter()
            .filter_map(|r| pick(r).map(|v| (r.step as f64, v)))
            .collect(),
    }
}

fn write_plots(log: &MetricsLog, out: &Path) -> CmdResult {
    if log.rows().len() < 2 {
        return Ok(());
    }
    let plots: [(&str, Vec<Series>); 5] = [
        (
            "objective",
            vec![
                series_from(log, "total", |r| Some(r.total)),
                series_from(log, "surrogate", |r| Some(r.surrogate)),
            ],
        ),
        ("entropy", vec![series_from(log, "entropy", |r| Some(r.entropy))]),
        (
            "clip_frac",
            vec![series_from(log, "clip fraction", |r| Some(r.clip_frac))],
        ),
        (
            "resp_len",
            vec![series_from(log, "response length", |r| Some(r.resp_len))],
        ),
        (
            "pass_rate",
            vec![
                series_from(log, "batch pass rate", |r| Some(r.pass_rate)),
                series_from(log, "eval mean", |r| r.eval.as_ref().map(|e| e.mean)),
            ],
        ),
    ];
    for (name, series) in plots {
        let series: Vec<Series> = series.into_iter().filter(|s| s.points.len() >= 2).collect();
        if series.is_empty() {
            continue;
        }
        render_lineplot(name, "step", &series, &out.join(format!("{name}.svg"))).map_err(io_failure)?;
    }
    Ok(())
}

/// Trains and writes every artifact of one run into `out`.
fn train_into(config: &TrainConfig, out: &Path, verbose: bool) -> Result<MetricsLog, Failure> {
    create_dir(out)?;
    std::fs::write(out.join("config.txt"), render_config(config))
        .map_err(|e| Failure::runtime(format!("cannot write config: {e}")))?;
    let outcome = trainer::run_training_observed(config, |m| {
        if verbose {
            if let Some(e) = &m.eval {
                println!(
                    "step {:>4}  pass {:.3}  entropy {:.4}  clip {:.4}  mean@{} {:.4}  best@{} {:.4}",
                    m.step + 1,
                    m.pass_rate,
                    m.entropy,
                    m.clip_frac,
                    config.eval_n,
                    e.mean,
                    config.eval_n,
                    e.best
                );
            }
        }
    })
    .map_err(|e| Failure::runtime(format!("training failed: {e}")))?;
    write_metrics_csv(&outcome.log, &out.join("metrics.csv")).map_err(io_failure)?;
    write_plots(&outcome.log, out)?;
    let checkpoint = Checkpoint {
        params: outcome.params.values().to_vec(),
        optimizer: outcome.optimizer.state.clone(),
        digest: config_digest(config),
    };
    save_checkpoint(&out.join("checkpoint.bin"), &checkpoint).map_err(io_failure)?;
    Ok(outcome.log)
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> CmdResult {
    let config = load_config(args)?;
    let log = train_into(&config, out, true)?;
    println!("{} steps; artifacts in {}", log.rows().len(), out.display());
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::usage(format!("bad seed list '{text}'"));
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn parse_methods(text: &str) -> Result<Vec<Method>, Failure> {
    let methods: Vec<Method> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<Method>()
                .map_err(|e| Failure::usage(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(Failure::usage("no methods given"));
    }
    Ok(methods)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct RunSummary {
    method: Method,
    seed: u64,
    mean: f64,
    best: f64,
    initial_entropy: f64,
    final_entropy: f64,
    clip_frac: f64,
    log: MetricsLog,
}

fn summarize(method: Method, seed: u64, log: MetricsLog) -> RunSummary {
    let rows = log.rows();
    let eval = log.last_eval();
    RunSummary {
        method,
        seed,
        mean: eval.map_or(f64::NAN, |e| e.mean),
        best: eval.map_or(f64::NAN, |e| e.best),
        initial_entropy: rows.first().map_or(f64::NAN, |r| r.entropy),
        final_entropy: rows.last().map_or(f64::NAN, |r| r.entropy),
        clip_frac: rows.iter().map(|r| r.clip_frac).sum::<f64>() / rows.len().max(1) as f64,
        log,
    }
}

fn cmd_compare(args: &ConfigArgs, out: &Path, methods: &str, seeds: &str, jobs: usize) -> CmdResult {
    let config = load_config(args)?;
    let methods = parse_methods(methods)?;
    let seeds = parse_seeds(seeds)?;
    create_dir(out)?;
    let pairs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    let runs: Vec<RunSummary> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(method, seed)| {
                let cfg = TrainConfig {
                    seed,
                    ..method.apply(&config)
                };
                let dir = out.join(method.name()).join(format!("seed{seed}"));
                let log = train_into(&cfg, &dir, false)?;
                let s = summarize(method, seed, log);
                println!(
                    "{:<12} seed {:<3} mean@{n} {:.4}  best@{n} {:.4}  entropy {:.4} -> {:.4}  clip {:.4}",
                    method.name(),
                    seed,
                    s.mean,
                    s.best,
                    s.initial_entropy,
                    s.final_entropy,
                    s.clip_frac,
                    n = config.eval_n
                );
                Ok(s)
            })
            .collect::<Result<Vec<_>, Failure>>()
    })?;

    let n = config.eval_n;
    let mut per_run = format!("method,seed,mean@{n},best@{n},initial_entropy,final_entropy,mean_clip_frac\n");
    for r in &runs {
        per_run.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            metrics_io::format_sig9(r.mean),
            metrics_io::format_sig9(r.best),
            metrics_io::format_sig9(r.initial_entropy),
            metrics_io::format_sig9(r.final_entropy),
            metrics_io::format_sig9(r.clip_frac)
        ));
    }
    std::fs::write(out.join("runs.csv"), per_run).map_err(|e| Failure::runtime(e.to_string()))?;

    let mut summary =
        format!("method,runs,median_mean@{n},median_best@{n},median_final_entropy,median_clip_frac\n");
    println!(
        "\n{:<12} {:>4} {:>12} {:>12} {:>14} {:>10}",
        "method",
        "runs",
        format!("mean@{n}"),
        format!("best@{n}"),
        "final entropy",
        "clip frac"
    );
    let mut entropy_series = Vec::new();
    for &m in &methods {
        let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.method == m).collect();
        let col = |f: fn(&RunSummary) -> f64| median(&mut mine.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (mean, best, ent, clip) = (
            col(|r| r.mean),
            col(|r| r.best),
            col(|r| r.final_entropy),
            col(|r| r.clip_frac),
        );
        summary.push_str(&format!(
            "{m},{},{},{},{},{}\n",
            mine.len(),
            metrics_io::format_sig9(mean),
            metrics_io::format_sig9(best),
            metrics_io::format_sig9(ent),
            metrics_io::format_sig9(clip)
        ));
        println!(
            "{:<12} {:>4} {mean:>12.4} {best:>12.4} {ent:>14.4} {clip:>10.4}",
            m.name(),
            mine.len()
        );
        // per-step entropy averaged over seeds
        let steps = mine.iter().map(|r| r.log.rows().len()).min().unwrap_or(0);
        let points: Vec<(f64, f64)> = (0..steps)
            .map(|i| {
                let avg = mine.iter().map(|r| r.log.rows()[i].entropy).sum::<f64>() / mine.len() as f64;
                (i as f64, avg)
            })
            .collect();
        if points.len() >= 2 {
            entropy_series.push(Series {
                name: m.name().to_string(),
                points,
            });
        }
    }
    std::fs::write(out.join("summary.csv"), summary).map_err(|e| Failure::runtime(e.to_string()))?;
    if !entropy_series.is_empty() {
        render_lineplot(
            "mean token entropy",
            "step",
            &entropy_series,
            &out.join("entropy.svg"),
        )
        .map_err(io_failure)?;
    }
    Ok(())
}

fn cmd_eval(args: &ConfigArgs, checkpoint: &Path, n: Option<usize>, strict: bool) -> CmdResult {
    let config = load_config(args)?;
    let digest = config_digest(&config);
    let loaded = load_checkpoint(checkpoint, Some(&digest), strict)
        .map_err(|e| Failure::usage(format!("{}: {e}", checkpoint.display())))?;
    if loaded.digest_mismatch {
        eprintln!("warning: checkpoint was written under a different config");
    }
    let params = PolicyParams::from_values(config.policy_shape(), loaded.checkpoint.params)
        .map_err(|e| Failure::usage(format!("checkpoint does not fit the configured model: {e}")))?;
    let n = n.unwrap_or(config.eval_n);
    if n == 0 {
        return Err(Failure::usage("--n must be >= 1"));
    }
    let vocab = params.vocab();
    let set = eval_prompts(
        &config.suite,
        &vocab,
        config.eval_prompts,
        stream_seed(config.seed, u64::MAX, 0),
    )
    .map_err(|e| Failure::runtime(e.to_string()))?;
    let report = evaluate(
        &params,
        &config.suite,
        &set,
        n,
        stream_seed(config.seed, u64::MAX - 2, 0),
    )
    .map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "{:<14} {:>10} {:>10}",
        "task",
        format!("mean@{n}"),
        format!("best@{n}")
    );
    for e in &report.entries {
        println!("{:<14} {:>10.4} {:>10.4}", e.label, e.mean, e.best);
    }
    println!("{:<14} {:>10.4} {:>10.4}", "weighted", report.mean, report.best);
    Ok(())
}

fn cmd_gradcheck(args: &ConfigArgs) -> CmdResult {
    let config = load_config(args)?;
    let options = GradcheckOptions::from_config(&config);
    let report = run_gradcheck(&config, &options).map_err(|e| Failure::runtime(e.to_string()))?;
    println!(
        "{:<12} {:>14} {:>8} {:>8} {:>10}",
        "method", "max rel err", "tokens", "clipped", "zero grad"
    );
    for v in &report.variants {
        println!(
            "{:<12} {:>14.3e} {:>8} {:>8} {:>10}",
            v.method.name(),
            v.max_error,
            v.tokens,
            v.clipped_tokens,
            if v.clipped_zero_grad { "yes" } else { "NO" }
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e})",
        report.max_error(),
        report.tolerance
    );
    if report.passed() {
        return Ok(());
    }
    let mut dump = String::from("gradient check failed");
    for v in report.variants.iter().filter(|v| !v.passed(report.tolerance)) {
        dump.push_str(&format!(
            "\n  {}: batch {}, parameter {}: analytic {:.12e}, numeric {:.12e}, clipped tokens zero-grad: {}",
            v.method.name(),
            v.worst.batch,
            v.worst.index,
            v.worst.analytic,
            v.worst.numeric,
            v.clipped_zero_grad
        ));
    }
    Err(Failure::runtime(dump))
}

fn cmd_theory() -> CmdResult {
    let report = run_theory_checks(0.2).map_err(|e| Failure::runtime(e.to_string()))?;
    println!("{:>6} {:>14} {:>14} {:>6}", "r", "residual", "cubic bound", "ok");
    for r in &report.residuals {
        println!(
            "{:>6} {:>14.6e} {:>14.6e} {:>6}",
            r.ratio, r.residual, r.bound, r.holds
        );
    }
    println!("dense grid r in [0.5, 1.5]: {}", report.dense_grid_ok);
    println!("\n{:>10} {:>16} {:>6}", "r", "res/|r-1|^3", "ok");
    for l in &report.limits {
        println!("{:>10} {:>16.10} {:>6}", l.ratio, l.normalized, l.holds);
    }
    println!(
        "\n{:>4} {:>10} {:>14} {:>14} {:>6}",
        "rho", "epsilon", "eps/eps_base", "sqrt(rho)", "ok"
    );
    for r in &report.rhos {
        println!(
            "{:>4} {:>10.6} {:>14.12} {:>14.12} {:>6}",
            r.rho, r.epsilon, r.scale, r.expected_scale, r.holds
        );
    }
    if report.all_hold() {
        println!("\nall bounds hold");
        Ok(())
    } else {
        Err(Failure::runtime("bound violated"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Compare {
            config,
            out,
            methods,
            seeds,
            jobs,
        } => cmd_compare(config, out, methods, seeds, *jobs),
        Command::Eval {
            config,
            checkpoint,
            n,
            strict,
        } => cmd_eval(config, checkpoint, *n, *strict),
        Command::Gradcheck { config } => cmd_gradcheck(config),
        Command::Theory => cmd_theory(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
