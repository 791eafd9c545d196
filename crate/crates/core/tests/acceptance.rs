//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use etr_core::advantage::{GroupStats, DEFAULT_XI};
use etr_core::gradcheck::{perturbed_batch, run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};
use etr_core::metrics_io::{load_checkpoint, parse_config, render_metrics_csv, save_checkpoint, Checkpoint};
use etr_core::objectives::theory::{kl_quadratic_residual, run_theory_checks, theoretical_epsilon};
use etr_core::objectives::{
    batch_objective, clip_bounds, dynamic_epsilon, macro_adjustment, ClipStrategy, ElasticParams, TokenBatch,
};
use etr_core::policy::PolicyParams;
use etr_core::tasks::{TaskFamily, TaskSuite};
use etr_core::trainer::{
    eval_prompts, evaluate, exact_success_probability, run_training, stream_seed, Method, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn degeneration_identity() -> Outcome {
    let config = TrainConfig::default();
    let mut options = GradcheckOptions::from_config(&config);
    options.shape = config.policy_shape();
    options.groups = 4;
    options.group_size = 8;
    let elastic = ClipStrategy::Elastic(ElasticParams {
        base: 0.2,
        lambda1: 0.0,
        lambda2: 0.0,
        ..ElasticParams::default()
    });
    let mut clipped = 0;
    for b in 0..50u64 {
        let batch = perturbed_batch(&options, &config.suite, stream_seed(11, b, 0), DEFAULT_XI).unwrap();
        let shape = *batch.current.shape();
        let s = TokenBatch::new(&batch.groups, &shape, &ClipStrategy::grpo()).unwrap();
        let e = TokenBatch::new(&batch.groups, &shape, &elastic).unwrap();
        let a = batch_objective(&batch.current, &s, config.kl_coef).unwrap();
        let c = batch_objective(&batch.current, &e, config.kl_coef).unwrap();
        let values_equal = same_bits(
            &[a.breakdown.total, a.breakdown.surrogate, a.breakdown.kl],
            &[c.breakdown.total, c.breakdown.surrogate, c.breakdown.kl],
        );
        if !values_equal
            || !same_bits(&a.gradient, &c.gradient)
            || a.breakdown.clipped_tokens != c.breakdown.clipped_tokens
        {
            return outcome(false, format!("batch {b} differs"));
        }
        clipped += a.breakdown.clipped_tokens;
    }
    outcome(
        true,
        format!("50 batches bit-identical ({clipped} clipped tokens exercised)"),
    )
}

fn threshold_algebra() -> Outcome {
    let p = ElasticParams::default();
    let (lo_env, hi_env) = (p.base - p.lambda1, p.base + p.lambda1 + p.lambda2);
    let mut envelope = true;
    let mut macro_max: f64 = 0.0;
    for i in 0..=100 {
        let a = -10.0 + 20.0 * i as f64 / 100.0;
        for j in 0..=100 {
            let pg = j as f64 / 100.0;
            let eps = dynamic_epsilon(a, pg, &p);
            envelope &= lo_env <= eps && eps <= hi_env;
            macro_max = macro_max.max(macro_adjustment(pg, p.lambda2, p.direction));
        }
    }
    let m0 = macro_adjustment(0.0, p.lambda2, p.direction);
    let m1 = macro_adjustment(1.0, p.lambda2, p.direction);
    let mh = macro_adjustment(0.5, p.lambda2, p.direction);
    let macro_ok = m0 == 0.0 && m1 == 0.0 && (mh - p.lambda2).abs() <= 1e-12 && mh >= macro_max;
    let (_, hi) = clip_bounds(&ClipStrategy::Elastic(p), 10.0, 0.5);
    // saturation oracle: 1 + base + λ1 + λ2 − λ1·(1 − tanh 10)
    let oracle = 1.0 + 0.4 - 0.1 * (1.0 - 10f64.tanh());
    let boundary_ok = hi >= 1.3999 && (hi - oracle).abs() <= 1e-6 && (hi - 1.40).abs() <= 1e-6;
    outcome(
        envelope && macro_ok && boundary_ok,
        format!(
            "envelope {envelope}, macro(0)={m0} macro(1)={m1} macro(0.5)={mh}, upper bound at A=10 {hi:.9}"
        ),
    )
}

fn theory_verifier() -> Outcome {
    let report = run_theory_checks(0.2).unwrap();
    let mut sqrt_ok = true;
    for (rho, expect) in [(1.0, 1.0), (2.0, 2f64.sqrt()), (4.0, 2.0), (9.0, 3.0)] {
        sqrt_ok &= (theoretical_epsilon(rho, 0.2).unwrap() / 0.2 - expect).abs() <= 1e-12;
    }
    let mut limit_ok = true;
    for exp in 2..=6 {
        let h = 10f64.powi(-exp);
        for r in [1.0 + h, 1.0 - h] {
            let x: f64 = h;
            let ratio = kl_quadratic_residual(r).unwrap() / (x * x * x);
            limit_ok &= (ratio - 1.0 / 3.0).abs() <= 0.05 / 3.0;
        }
    }
    outcome(
        report.all_hold() && sqrt_ok && limit_ok,
        format!(
            "sqrt scaling {sqrt_ok}, cubic bound on [0.5,1.5] {}, limit 1/3 {limit_ok}",
            report.dense_grid_ok && report.residuals.iter().all(|r| r.holds)
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig::default();
    let report = run_gradcheck(&config, &GradcheckOptions::from_config(&config)).unwrap();
    let clipped: usize = report.variants.iter().map(|v| v.clipped_tokens).sum();
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        report.passed() && report.variants.len() == 6 && clipped > 0 && elapsed < 120.0,
        format!(
            "6 variants, max rel err {:.2e} < {GRADCHECK_TOLERANCE:.0e}, {clipped} clipped tokens with zero ratio-gradient, {elapsed:.1}s",
            report.max_error()
        ),
    )
}

fn advantage_oracle() -> Outcome {
    let rewards = [1.0, 1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0];
    let stats = GroupStats::from_rewards(&rewards, 1e-6).unwrap();
    // mean −0.5, population std √0.75
    let sd = 0.75f64.sqrt();
    let pos = 1.5 / (sd + 1e-6);
    let neg = -0.5 / (sd + 1e-6);
    let mut ok = stats.advantages[..2].iter().all(|a| (a - pos).abs() <= 1e-9)
        && stats.advantages[2..].iter().all(|a| (a - neg).abs() <= 1e-9)
        && (pos - 1.732049).abs() < 1e-6
        && (neg + 0.577350).abs() < 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let g = rng.gen_range(2..=16);
        let r: Vec<f64> = (0..g)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let s = GroupStats::from_rewards(&r, 1e-6).unwrap();
        worst = worst.max(s.advantages.iter().sum::<f64>().abs());
    }
    ok &= worst <= 1e-9;
    outcome(
        ok,
        format!(
            "A+ {:.6} A- {:.6}, max |sum A| over 1e4 groups {worst:.1e}",
            stats.advantages[0], stats.advantages[2]
        ),
    )
}

fn uniform_calibration() -> Outcome {
    let config = TrainConfig::default();
    let params = PolicyParams::init(config.policy_shape(), config.seed, config.init_scale).unwrap();
    let vocab = params.vocab();
    let n = 32;
    let prompts = 64;
    let best_expected = 1.0 - 0.9f64.powi(32);
    let mut ok = true;
    let mut detail = Vec::new();
    for k in 1..=3 {
        let suite = TaskSuite::single(TaskFamily::DigitSum, k).unwrap();
        let set = eval_prompts(&suite, &vocab, prompts, stream_seed(3, k as u64, 0)).unwrap();
        let exact: f64 = set[0]
            .iter()
            .map(|p| exact_success_probability(&params, p).unwrap())
            .sum::<f64>()
            / prompts as f64;
        let r = evaluate(&params, &suite, &set, n, stream_seed(4, k as u64, 0)).unwrap();
        let se_mean = (0.1 * 0.9 / (prompts * n) as f64).sqrt();
        let se_best = (best_expected * (1.0 - best_expected) / prompts as f64).sqrt();
        let pass = (r.mean - 0.1).abs() <= 3.0 * se_mean
            && (r.mean - exact).abs() <= 3.0 * se_mean
            && (r.best - best_expected).abs() <= 3.0 * se_best;
        ok &= pass;
        detail.push(format!(
            "k={k}: mean@32 {:.4} (exact {exact:.4}) best@32 {:.4}",
            r.mean, r.best
        ));
    }
    outcome(ok, detail.join("; "))
}

fn directional_dynamics() -> Outcome {
    let start = Instant::now();
    let base = TrainConfig::default();
    let methods = [Method::Grpo, Method::Etr, Method::EtrInverse];
    let runs: Vec<(Method, f64, f64, f64)> = methods
        .iter()
        .flat_map(|&m| (1..=5u64).map(move |s| (m, s)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(m, seed)| {
            let cfg = TrainConfig {
                seed,
                ..m.apply(&base)
            };
            let out = run_training(&cfg).unwrap();
            let rows = out.log.rows();
            let mean = out.log.last_eval().map(|e| e.mean).unwrap();
            (m, mean, rows[0].entropy, rows[rows.len() - 1].entropy)
        })
        .collect();
    let col = |m: Method, f: fn(&(Method, f64, f64, f64)) -> f64| {
        median(runs.iter().filter(|r| r.0 == m).map(f).collect())
    };
    let (g_mean, e_mean, i_mean) = (
        col(Method::Grpo, |r| r.1),
        col(Method::Etr, |r| r.1),
        col(Method::EtrInverse, |r| r.1),
    );
    let (g_h0, g_h, e_h) = (
        col(Method::Grpo, |r| r.2),
        col(Method::Grpo, |r| r.3),
        col(Method::Etr, |r| r.3),
    );
    let a = e_mean >= g_mean;
    let b = e_h > g_h && g_h < 0.25 * g_h0;
    let c = i_mean < e_mean;
    let per_run = start.elapsed().as_secs_f64() / runs.len() as f64 * rayon::current_num_threads() as f64;
    outcome(
        a && b && c && per_run < 600.0,
        format!(
            "(a) {} mean@32 etr {e_mean:.4} vs grpo {g_mean:.4}; (b) {} entropy etr {e_h:.4} vs grpo {g_h:.4} (grpo initial {g_h0:.4}); (c) {} etr-inverse {i_mean:.4} vs etr {e_mean:.4}",
            if a { "ok" } else { "FAIL" },
            if b { "ok" } else { "FAIL" },
            if c { "ok" } else { "FAIL" },
        ),
    )
}

/// Groups with pass rate 1/8 or 2/8. The sampling policy is random and the
/// current policy a random perturbation of it, standing in for the drift an
/// earlier inner epoch leaves behind.
fn clip_asymmetry() -> Outcome {
    let base = TrainConfig::default();
    let mut options = GradcheckOptions::from_config(&base);
    options.shape = base.policy_shape();
    options.groups = base.groups_per_step;
    options.group_size = base.group_size;
    let mut grpo = Vec::new();
    let mut etr = Vec::new();
    for b in 0..20u64 {
        let mut batch = perturbed_batch(&options, &base.suite, stream_seed(21, b, 0), base.xi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(22, b, 0));
        for g in &mut batch.groups {
            let positives = rng.gen_range(1..=2);
            let rewards: Vec<f64> = (0..base.group_size)
                .map(|i| if i < positives { 1.0 } else { -1.0 })
                .collect();
            g.stats = GroupStats::from_rewards(&rewards, base.xi).unwrap();
            g.group.rewards = rewards;
        }
        let shape = *batch.current.shape();
        for (method, sink) in [(Method::Grpo, &mut grpo), (Method::Etr, &mut etr)] {
            let tokens = TokenBatch::new(&batch.groups, &shape, &method.apply(&base).strategy()).unwrap();
            let eval = batch_objective(&batch.current, &tokens, base.kl_coef).unwrap();
            sink.push(eval.breakdown.clip_fraction());
        }
    }
    let (g, e) = (median(grpo), median(etr));
    outcome(
        e > g,
        format!("median token clip fraction etr {e:.5} vs grpo {g:.5} over 20 batches"),
    )
}

fn invariance_corpus() -> [&'static str; 20] {
    [
        "steps = 0",
        "group_size = 1",
        "learning_rate = 0",
        "learning_rate = -1e-3",
        "lambda1 = -0.1",
        "lambda2 = -0.1",
        "epsilon_base = 0.05",
        "epsilon_base = -0.2",
        "epsilon_high = -0.1",
        "kl_coef = -0.001",
        "beta1 = 1.0",
        "beta2 = -0.1",
        "adam_eps = 0",
        "weight_decay = -0.01",
        "grad_clip = 0",
        "inner_epochs = 0",
        "eval_n = 0",
        "suite = copy:1:0.5",
        "xi = 0",
        "max_response_len = 1",
    ]
}

fn infrastructure() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 20,
        eval_every: 10,
        eval_prompts: 8,
        eval_n: 4,
        ..TrainConfig::default()
    };
    let a = run_training(&cfg).unwrap();
    let b = run_training(&cfg).unwrap();
    let csv_same =
        render_metrics_csv(&a.log).unwrap().as_bytes() == render_metrics_csv(&b.log).unwrap().as_bytes();

    let path = dir.path().join("ckpt.bin");
    let ckpt = Checkpoint {
        params: a.params.values().to_vec(),
        optimizer: a.optimizer.state.clone(),
        digest: etr_core::metrics_io::config_digest(&cfg),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path, Some(&ckpt.digest), true)
        .unwrap()
        .checkpoint;
    let round_trip = same_bits(&back.params, &ckpt.params)
        && same_bits(&back.optimizer.first_moment, &ckpt.optimizer.first_moment)
        && same_bits(&back.optimizer.second_moment, &ckpt.optimizer.second_moment)
        && back.optimizer.step == ckpt.optimizer.step
        && back.digest == ckpt.digest;

    let corpus = invariance_corpus();
    let accepted: Vec<&str> = corpus
        .iter()
        .copied()
        .filter(|t| parse_config(t).is_ok())
        .collect();
    outcome(
        csv_same && round_trip && accepted.is_empty(),
        format!(
            "checkpoint bit-exact {round_trip}, rerun CSV identical {csv_same}, {}/20 invalid configs rejected",
            20 - accepted.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("degeneration identity", degeneration_identity),
        ("threshold algebra", threshold_algebra),
        ("theory verifier", theory_verifier),
        ("gradient suite", gradient_suite),
        ("advantage oracle", advantage_oracle),
        ("uniform-policy calibration", uniform_calibration),
        ("directional training dynamics", directional_dynamics),
        ("clip-fraction asymmetry", clip_asymmetry),
        ("infrastructure", infrastructure),
    ];
    // `cargo test -- <filter>` passes extra args; run only matching criteria
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {} {name}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {label}: {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
