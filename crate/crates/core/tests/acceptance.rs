//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use prdim::config::load_config;
use prdim::diffusion::{build_schedule, diff_loss, sample_unguided, Conditioning, DiffLossConfig, ScheduleKind};
use prdim::em::{impute_with, EmConfig, EmMode, GuidancePath, GuidanceReduction};
use prdim::eval::{compute_metrics, wasserstein2_exact, Scope};
use prdim::missing::{gen_adjacent_artificial, MechanismSpec};
use prdim::numerics::{finite_diff_check, Tensor};
use prdim::pipeline::{run_pipeline, RunOutcome};
use prdim::recognizer::{pr_input_grad, pr_loss, pr_predict, PatternRecognizer};

type Verdict = (bool, String);

fn schedule_pin() -> Verdict {
    let s = build_schedule(50, 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
    let got = s.alpha_bar(50);
    let rel = (got - 3.354e-5).abs() / 3.354e-5;
    (rel < 1e-3, format!("alpha_bar_T = {got:.6e}, rel err {rel:.2e}"))
}

fn gradient_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let dim = rng.random_range(2..7);
        let rows = rng.random_range(1..6);
        let x = random_matrix(rows, dim, &mut rng);
        let m = random_mask(rows, dim, 0.5, &mut rng);

        let pr = random_recognizer(dim, &mut rng);
        let analytic = pr_input_grad(&m, &x, &pr).unwrap();
        let r = finite_diff_check(|p| pr_loss(&m, p, &pr).unwrap(), &x, &analytic, 1e-5);
        assert!(r.nan_coords.is_empty());
        worst = worst.max(r.max_rel_error);

        let den = random_denoiser(dim, &mut rng);
        let sched = build_schedule(rng.random_range(2..20), 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let steps: Vec<usize> = (0..rows).map(|_| rng.random_range(1..=sched.steps())).collect();
        let x_t = random_matrix(rows, dim, &mut rng);
        let cond_mask = random_mask(rows, dim, 0.5, &mut rng);
        let obs = x.zip_map(&cond_mask, |v, c| v * c).unwrap();
        let target = random_mask(rows, dim, 0.7, &mut rng);
        let cond = Conditioning { obs_masked: &obs, mask: &cond_mask };
        let cfg = DiffLossConfig::default();
        let (_, grads) = diff_loss(&den, &x, &target, &x_t, &steps, &sched, cond, &cfg).unwrap();
        let params = den.net().flat_params();
        let r = finite_diff_check(
            |p| {
                let mut d = den.clone();
                d.net_mut().set_flat_params(p.values()).unwrap();
                diff_loss(&d, &x, &target, &x_t, &steps, &sched, cond, &cfg).unwrap().0
            },
            &params,
            &grads.flatten(),
            1e-5,
        );
        assert!(r.nan_coords.is_empty());
        worst = worst.max(r.max_rel_error);
    }
    (worst < 1e-5, format!("50 triples, max rel err {worst:.2e}"))
}

fn em_cfg(scale: f64, path: GuidancePath, reduction: GuidanceReduction, mode: EmMode) -> EmConfig {
    EmConfig { guidance_scale: scale, guidance_path: path, guidance_reduction: reduction, em_mode: mode, ..EmConfig::default() }
}

fn guidance_degeneracy() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for trial in 0..20 {
        let dim = rng.random_range(2..7);
        let rows = rng.random_range(1..40);
        let den = random_denoiser(dim, &mut rng);
        let trained = random_recognizer(dim, &mut rng);
        let zero = PatternRecognizer::zeros(dim, &small_recognizer_cfg()).unwrap();
        let sched = build_schedule(rng.random_range(2..12), 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let m = random_mask(rows, dim, 0.6, &mut rng);
        let x = random_matrix(rows, dim, &mut rng).zip_map(&m, |v, k| v * k).unwrap();
        let seed = rng.random::<u64>();
        let reference = sample_unguided(&den, &x, &m, &sched, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for path in [GuidancePath::FullChain, GuidancePath::X0hatOnly] {
            for reduction in [GuidanceReduction::RowSum, GuidanceReduction::RowMean] {
                let scale = 0.5 + trial as f64;
                let runs = [
                    (&trained, em_cfg(0.0, path, reduction, EmMode::Hard)),
                    (&zero, em_cfg(scale, path, reduction, EmMode::Hard)),
                ];
                for (pr, cfg) in runs {
                    let out = impute_with(&den, pr, &x, &m, &sched, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                    if !bitwise_eq(&out, &reference) {
                        return (false, format!("mismatch in trial {trial}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    (true, format!("{cases} cases bitwise equal to unguided sampling"))
}

fn observed_freezing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for run in 0..1000 {
        let dim = rng.random_range(1..6);
        let rows = rng.random_range(1..12);
        let den = random_denoiser(dim, &mut rng);
        let pr = random_recognizer(dim, &mut rng);
        let sched = build_schedule(rng.random_range(1..8), 1e-4, 0.5, ScheduleKind::Quadratic).unwrap();
        let m = random_mask(rows, dim, rng.random_range(0.0..1.0), &mut rng);
        // Missing entries carry arbitrary finite values; they must not leak.
        let x = random_matrix(rows, dim, &mut rng).map(|v| v * 3.0);
        let path = if rng.random::<bool>() { GuidancePath::FullChain } else { GuidancePath::X0hatOnly };
        let reduction = if rng.random::<bool>() { GuidanceReduction::RowSum } else { GuidanceReduction::RowMean };
        let mode = if rng.random_range(0..4) == 0 { EmMode::Soft } else { EmMode::Hard };
        let scale = [0.0, 1.0, 50.0][rng.random_range(0..3)];
        let cfg = em_cfg(scale, path, reduction, mode);
        let out = impute_with(&den, &pr, &x, &m, &sched, &cfg, &mut rng).unwrap();
        for ((&o, &v), &k) in out.values().iter().zip(x.values()).zip(m.values()) {
            if k == 1.0 && o.to_bits() != v.to_bits() {
                return (false, format!("run {run}: observed entry changed"));
            }
        }
    }
    (true, "1000 randomized E steps keep observed entries bitwise".into())
}

fn mechanism_ratios() -> Verdict {
    let (rows, cols) = (1000, 1000);
    let n = (rows * cols) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_matrix(rows, cols, &mut rng);
    let p_logistic = normal_expectation(|z| logistic(5.0 * (z - 0.8)));
    let mc = mc_normal_expectation(|z| logistic(5.0 * (z - 0.8)), 4_000_000, 55);
    assert!((p_logistic - mc).abs() < 1e-3, "quadrature {p_logistic} vs MC {mc}");

    let mar_cols = [0usize, 1];
    let mar_expected = {
        let mut total = 0.0;
        for i in 0..rows {
            let drive = (x.get(i, 0) + x.get(i, 1)) / 2.0;
            total += logistic(1.5 * drive - 1.0) * (cols - mar_cols.len()) as f64;
        }
        total / n
    };
    let cases: Vec<(MechanismSpec, f64)> = vec![
        (MechanismSpec::Mcar { p: 0.3 }, 0.3),
        (MechanismSpec::MnarLogistic { w: 5.0, b: 0.8 }, p_logistic),
        (MechanismSpec::MnarSelfCensor { w: 5.0, b: 0.8 }, p_logistic),
        (MechanismSpec::Mar { driver_columns: mar_cols.to_vec(), slope: 1.5, offset: -1.0 }, mar_expected),
        (MechanismSpec::MnarTruncation { lower: -1.0, upper: 1.5 }, normal_cdf(-1.0) + 1.0 - normal_cdf(1.5)),
        (MechanismSpec::MnarQuantile { q: 0.2, feature_fraction: 0.5 }, 0.1),
        (
            MechanismSpec::MnarLatent { latent_dim: 2, effect_scale: 0.5, w: 5.0, b: 0.8 },
            latent_oracle(2, 0.5, 5.0, 0.8, 2_000_000, 56),
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (spec, expected) in &cases {
        let got = spec.generate(&x, &mut rng).unwrap().realized_missing_ratio;
        let sigma = (expected * (1.0 - expected) / n).sqrt();
        let z = (got - expected).abs() / sigma;
        worst = worst.max(z);
        detail.push(format!("{} {z:.2}σ", spec.name()));
    }
    let m = MechanismSpec::MnarLogistic { w: 5.0, b: 0.8 }.generate(&x, &mut rng).unwrap().mask;
    let a = gen_adjacent_artificial(&m, 0.1, None, &mut rng).unwrap();
    let art_ok = a.sum() == (0.1 * m.sum()).round();
    detail.push(format!("artificial exact {art_ok}"));
    (worst <= 3.0 && art_ok, format!("{} (logistic oracle {p_logistic:.5})", detail.join(", ")))
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run_config(name: &str, seed: u64, dir: &std::path::Path) -> RunOutcome {
    let mut cfg = load_config(config_path(name)).unwrap();
    cfg.master_seed = seed;
    cfg.out_dir = dir.to_path_buf();
    run_pipeline(&cfg).unwrap()
}

struct Benchmarks {
    prdim: Vec<RunOutcome>,
    baseline: Vec<RunOutcome>,
    dirs: Vec<tempfile::TempDir>,
    secs: f64,
}

fn run_benchmarks() -> Benchmarks {
    let start = Instant::now();
    let (mut prdim, mut baseline, mut dirs) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..5 {
        let (p, q) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        prdim.push(run_config("benchmark.toml", seed, p.path()));
        baseline.push(run_config("baseline.toml", seed, q.path()));
        dirs.extend([p, q]);
    }
    Benchmarks { prdim, baseline, dirs, secs: start.elapsed().as_secs_f64() }
}

fn mae(o: &RunOutcome, scope: Scope) -> f64 {
    o.report.metric(scope).unwrap().mae
}

fn ablation(b: &Benchmarks) -> Verdict {
    let med = |runs: &[RunOutcome], s| median(runs.iter().map(|o| mae(o, s)).collect());
    let (p_oos, b_oos) = (med(&b.prdim, Scope::OriginalOutOfSample), med(&b.baseline, Scope::OriginalOutOfSample));
    let (p_art, b_art) = (med(&b.prdim, Scope::Artificial), med(&b.baseline, Scope::Artificial));
    let ok = p_oos <= b_oos && p_oos > p_art && b_oos > b_art && b.secs < 900.0;
    (
        ok,
        format!(
            "median out-of-sample MAE {p_oos:.4} vs baseline {b_oos:.4}; artificial {p_art:.4} / {b_art:.4}; {:.0} s for 10 runs",
            b.secs
        ),
    )
}

fn monotonicity(b: &Benchmarks) -> Verdict {
    let mut fracs = Vec::new();
    for o in &b.prdim {
        let total: Vec<f64> = o.state.trace.iter().map(|r| r.l_diff + r.l_pr).collect();
        assert_eq!(total.len(), 100);
        let smooth: Vec<f64> = total.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        let steps = smooth.len() - 1;
        let down = smooth.windows(2).filter(|w| w[1] <= w[0]).count();
        fracs.push(down as f64 / steps as f64);
    }
    let min = fracs.iter().cloned().fold(f64::INFINITY, f64::min);
    (min >= 0.9, format!("non-increasing fraction per seed {fracs:.3?}"))
}

fn recognizer_auc(b: &Benchmarks) -> Verdict {
    let mut aucs = Vec::new();
    for o in &b.prdim {
        let truth = o.data.test.truth.as_ref().unwrap();
        let p = pr_predict(&o.state.recognizer, truth).unwrap();
        let auc = pairwise_auc(p.values(), o.data.test.m.values());
        assert!((auc - o.report.recognizer_auc.unwrap()).abs() < 1e-12);
        aucs.push(auc);
    }
    let min = aucs.iter().cloned().fold(f64::INFINITY, f64::min);
    (min > 0.85, format!("held-out AUC per seed {aucs:.4?}"))
}

fn w2_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=4);
        let a = random_matrix(n, d, &mut rng);
        let b = random_matrix(n, d, &mut rng);
        let got = wasserstein2_exact(&a, &b).unwrap();
        worst = worst.max((got - brute_force_w2(&a, &b)).abs());
    }
    (worst <= 1e-9, format!("100 instances, max abs diff {worst:.1e}"))
}

fn metric_formulas() -> Verdict {
    let t = Tensor::vector(vec![2.0, 5.0, 7.0]);
    let h = Tensor::vector(vec![1.0, 0.0, 0.0]);
    let w = Tensor::vector(vec![1.0, 0.0, 0.0]);
    let r = compute_metrics(&t, &h, &w).unwrap();
    let hand = r.rmse == 1.0 && r.mae == 1.0 && r.mre_percent == Some(50.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let truth = random_matrix(20, 7, &mut rng);
    let mask = random_mask(20, 7, 0.5, &mut rng);
    let z = compute_metrics(&truth, &Tensor::zeros(truth.shape()), &mask).unwrap();
    let zero = (z.mre_percent.unwrap() - 100.0).abs() < 1e-12;
    (hand && zero, format!("hand example {hand}, zero-imputation MRE {:.12}%", z.mre_percent.unwrap()))
}

fn determinism(b: &Benchmarks) -> Verdict {
    let again = run_config("benchmark.toml", 0, b.dirs[0].path());
    let same = b.prdim[0].report.deterministic_json().unwrap() == again.report.deterministic_json().unwrap();
    (same, "two seed-0 benchmark runs give byte-identical reports".into())
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Verdict)> = vec![
        ("1 schedule pin", schedule_pin()),
        ("2 gradient correctness", gradient_correctness()),
        ("3 guidance degeneracy", guidance_degeneracy()),
        ("4 observed-entry freezing", observed_freezing()),
        ("5 mechanism ratios", mechanism_ratios()),
    ];
    let b = run_benchmarks();
    results.push(("6 ablation direction", ablation(&b)));
    results.push(("7 EM surrogate monotonicity", monotonicity(&b)));
    results.push(("8 recognizer learnability", recognizer_auc(&b)));
    results.push(("9 W2 exactness", w2_exactness()));
    results.push(("10 metric formulas", metric_formulas()));
    results.push(("11 determinism", determinism(&b)));
    let mut all = true;
    for (name, (ok, detail)) in &results {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
        all &= ok;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
