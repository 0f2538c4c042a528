//! End-to-end experiment: data, mechanism, split, standardization,
//! pretraining, EM, evaluation and report files.
//!
//! Every stochastic stage draws from `stage_rng(master_seed, <stage>, i)`
//! with the stage names below, so stages never share a stream.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, GuidanceHeader, ScheduleHeader};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{load_csv, split, standardize, to_csv, window_dataset, MaskedDataset, NormStats};
use crate::diffusion::{build_schedule, pretrain_phase1, Denoiser};
use crate::em::{impute_out_of_sample, impute_with, run_em, EmConfig, EmHooks, EmState, Monitor, TraceRow};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, roc_auc, wasserstein2_exact, MetricsReport, Scope, W2_MAX_POINTS};
use crate::missing::gen_adjacent_artificial;
use crate::numerics::{Init, Tensor};
use crate::recognizer::{pr_predict, PatternRecognizer};
use crate::seed::{stage_rng, stage_seed};

pub const REPORT_VERSION: u32 = 1;

/// Complete AR(1) series `[len × features]` started from the stationary law.
pub fn generate_ar1<R: Rng + ?Sized>(len: usize, features: usize, coef: f64, noise_std: f64, rng: &mut R) -> Result<Tensor> {
    if coef.abs() >= 1.0 {
        return Err(Error::InvalidArgument(format!("AR(1) coefficient {coef} is not stationary")));
    }
    let stat_std = noise_std / (1.0 - coef * coef).sqrt();
    let mut v = vec![0.0; len * features];
    for f in 0..features {
        let mut prev = 0.0;
        for t in 0..len {
            let e: f64 = rng.sample(StandardNormal);
            let x = if t == 0 { stat_std * e } else { coef * prev + noise_std * e };
            v[t * features + f] = x;
            prev = x;
        }
    }
    Tensor::matrix(len, features, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRatios {
    pub overall: f64,
    pub train: f64,
    pub valid: Option<f64>,
    pub test: Option<f64>,
    /// Mechanism-only ratio over entries with known values.
    pub mechanism_realized: f64,
    /// Oracle expectation for the mechanism on this data, when available.
    pub mechanism_expected: Option<f64>,
    pub mechanism_entries: usize,
    pub artificial_fraction_realized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WassersteinReport {
    pub in_sample: Option<f64>,
    pub out_of_sample: Option<f64>,
    /// How points are formed from the data.
    pub points: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub guidance_scale: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub software_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub baseline_mode: bool,
    pub missing_ratios: Option<MissingRatios>,
    pub metrics: Vec<MetricsReport>,
    pub wasserstein2: Option<WassersteinReport>,
    /// Per-entry ROC-AUC of the recognizer for `m` on true test values.
    pub recognizer_auc: Option<f64>,
    pub guidance_sweep: Vec<SweepRow>,
    pub files: BTreeMap<String, String>,
    pub notes: Vec<String>,
    /// Excluded from determinism comparisons.
    pub wall_times_sec: BTreeMap<String, f64>,
}

impl RunReport {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            report_version: REPORT_VERSION,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            status: "running".into(),
            failed_stage: None,
            error: None,
            baseline_mode: cfg.em.is_baseline(),
            missing_ratios: None,
            metrics: Vec::new(),
            wasserstein2: None,
            recognizer_auc: None,
            guidance_sweep: Vec::new(),
            files: BTreeMap::new(),
            notes: Vec::new(),
            wall_times_sec: BTreeMap::new(),
        }
    }

    pub fn metric(&self, scope: Scope) -> Option<&MetricsReport> {
        self.metrics.iter().find(|r| r.scope == Some(scope))
    }

    /// Report JSON with wall times removed.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_times_sec.clear();
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Windowed, standardized splits ready for modelling.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MaskedDataset,
    pub valid: MaskedDataset,
    pub test: MaskedDataset,
    /// 1 where the ground truth is known (all ones for synthetic data).
    pub train_known: Tensor,
    pub test_known: Tensor,
    /// Statistics matching the model's columns.
    pub stats: NormStats,
    pub ratios: MissingRatios,
    /// Full-series mask after the mechanism, `[time × features]`.
    pub series_mask: Tensor,
}

/// Everything a run produces besides the files.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub state: EmState,
    pub phase1_trace: Vec<f64>,
    pub data: PreparedData,
    pub imputed_test: Tensor,
}

fn ratio(m: &Tensor) -> Option<f64> {
    (!m.is_empty()).then(|| 1.0 - m.mean())
}

fn series_source(cfg: &ExperimentConfig) -> Result<(Tensor, Tensor)> {
    match &cfg.data {
        DataSource::Synthetic {
            ar_coef,
            noise_std,
            features,
            window,
            train_rows,
            test_rows,
        } => {
            let len = (train_rows + test_rows) * window;
            let mut rng = stage_rng(cfg.master_seed, "data", 0);
            let x = generate_ar1(len, *features, *ar_coef, *noise_std, &mut rng)?;
            let known = Tensor::full(x.shape(), 1.0);
            Ok((x, known))
        }
        DataSource::Csv {
            path,
            has_header,
            missing_token,
            ..
        } => {
            let ds = load_csv(path, *has_header, missing_token)?;
            Ok((ds.x, ds.m))
        }
    }
}

fn window_spec(cfg: &ExperimentConfig) -> Option<(usize, usize)> {
    match &cfg.data {
        DataSource::Synthetic { window, .. } => Some((*window, *window)),
        DataSource::Csv { window, stride, .. } => window.map(|w| (w, stride.unwrap_or(w))),
    }
}

/// Data, mechanism, split, standardization and windowing.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (truth, known) = series_source(cfg).map_err(|e| e.in_stage("data"))?;
    let mech_input = if cfg.mechanism_on_standardized {
        let probe = MaskedDataset::new(truth.zip_map(&known, |v, k| v * k)?, known.clone())?;
        NormStats::fit(&probe)?.apply(&truth)?
    } else {
        truth.clone()
    };
    let mech_input = mech_input.zip_map(&known, |v, k| if k == 1.0 { v } else { f64::NAN })?;
    let mut rng = stage_rng(cfg.master_seed, "mechanism", 0);
    let sample = cfg.mechanism.generate(&mech_input, &mut rng).map_err(|e| e.in_stage("mechanism"))?;
    let m = sample.mask.zip_map(&known, |a, b| a * b)?;
    let known_count = known.sum();
    let mech_missing = known
        .values()
        .iter()
        .zip(sample.mask.values())
        .filter(|(&k, &s)| k == 1.0 && s == 0.0)
        .count() as f64;
    let expected = if known_count as usize == known.len() {
        cfg.mechanism.expected_missing_ratio(&mech_input)
    } else {
        None
    };

    let mut series = MaskedDataset::new(truth.zip_map(&m, |v, k| v * k)?, m.clone())?;
    series.truth = Some(truth.zip_map(&known, |v, k| v * k)?);
    let split_seed = stage_seed(cfg.master_seed, "split", 0);
    let ratios = cfg.split.ratios();
    let splits = split(&series, ratios, split_seed, cfg.split.shuffle).map_err(|e| e.in_stage("split"))?;
    let known_splits = split(&MaskedDataset::complete(known.clone())?, ratios, split_seed, cfg.split.shuffle)?;

    let (train, stats) = standardize(&splits.train, None).map_err(|e| e.in_stage("standardize"))?;
    let (valid, _) = standardize(&splits.valid, Some(&stats))?;
    let (test, _) = standardize(&splits.test, Some(&stats))?;
    let (train_known, test_known) = (known_splits.train.x, known_splits.test.x);

    let window = |ds: &MaskedDataset, w: usize, s: usize| -> Result<MaskedDataset> {
        if ds.rows() == 0 {
            return Ok(ds.clone());
        }
        window_dataset(ds, w, s)
    };
    let (train, valid, test, train_known, test_known, stats) = match window_spec(cfg) {
        Some((w, s)) => {
            let train = window(&train, w, s).map_err(|e| e.in_stage("window"))?;
            let valid = window(&valid, w, s).map_err(|e| e.in_stage("window"))?;
            let test = window(&test, w, s).map_err(|e| e.in_stage("window"))?;
            let kw = |k: &Tensor| -> Result<Tensor> {
                if k.rows() == 0 {
                    return Ok(k.clone());
                }
                Ok(window_dataset(&MaskedDataset::complete(k.clone())?, w, s)?.x)
            };
            let meta = train.axis_meta.expect("windowed data has axis meta");
            (train, valid, test, kw(&train_known)?, kw(&test_known)?, stats.tile_for_windows(meta)?)
        }
        None => (train, valid, test, train_known, test_known, stats),
    };

    let ratios = MissingRatios {
        overall: 1.0 - m.mean(),
        train: 1.0 - train.m.mean(),
        valid: ratio(&valid.m),
        test: ratio(&test.m),
        mechanism_realized: if known_count > 0.0 { mech_missing / known_count } else { 0.0 },
        mechanism_expected: expected,
        mechanism_entries: known_count as usize,
        artificial_fraction_realized: None,
    };
    Ok(PreparedData {
        train,
        valid,
        test,
        train_known,
        test_known,
        stats,
        ratios,
        series_mask: m,
    })
}

fn to_units(stats: Option<&NormStats>, t: &Tensor) -> Result<Tensor> {
    match stats {
        Some(s) => s.invert(t),
        None => Ok(t.clone()),
    }
}

fn score(truth: &Tensor, imputed: &Tensor, mask: &Tensor, stats: Option<&NormStats>, scope: Scope) -> Result<Option<MetricsReport>> {
    if mask.sum() == 0.0 {
        return Ok(None);
    }
    let r = compute_metrics(&to_units(stats, truth)?, &to_units(stats, imputed)?, mask)?;
    Ok(Some(r.with_scope(scope)))
}

fn w2_rows(a: &Tensor, b: &Tensor, stats: Option<&NormStats>) -> Result<Option<f64>> {
    if a.rows() == 0 || a.rows() > W2_MAX_POINTS {
        return Ok(None);
    }
    wasserstein2_exact(&to_units(stats, a)?, &to_units(stats, b)?).map(Some)
}

fn build_checkpoint(state: &EmState, data: &PreparedData, cfg: &ExperimentConfig) -> Checkpoint {
    Checkpoint {
        denoiser: state.denoiser.clone(),
        recognizer: state.recognizer.clone(),
        norm_stats: Some(data.stats.clone()),
        axis_meta: data.train.axis_meta,
        schedule: ScheduleHeader {
            steps: cfg.schedule.steps,
            beta_min: cfg.schedule.beta_min,
            beta_max: cfg.schedule.beta_max,
            kind: cfg.schedule.kind,
        },
        guidance: GuidanceHeader {
            scale: cfg.em.guidance_scale,
            path: cfg.em.guidance_path,
            reduction: cfg.em.guidance_reduction,
            grad_clip_norm: cfg.em.grad_clip_norm,
            em_mode: cfg.em.em_mode,
            soft_samples: cfg.em.soft_samples,
        },
        em_iteration: state.iteration,
    }
}

fn timed<T>(times: &mut BTreeMap<String, f64>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(stage),
    });
    times.insert(stage.to_string(), start.elapsed().as_secs_f64());
    out
}

fn stage_of(e: &Error) -> Option<String> {
    match e {
        Error::Stage { stage, .. } => Some(stage.clone()),
        _ => None,
    }
}

/// Runs the experiment and writes the report and sidecar files into
/// `cfg.out_dir`. On failure a partial report naming the stage is written.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let out_dir = cfg.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut report = RunReport::new(cfg);
    match run_stages(cfg, &out_dir, &mut report) {
        Ok(outcome) => Ok(outcome),
        Err(e) => {
            report.status = "failed".into();
            report.failed_stage = stage_of(&e);
            report.error = Some(e.to_string());
            // Best effort: the original error matters more than a write failure.
            let _ = write_report(&out_dir, &report);
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, out_dir: &Path, report: &mut RunReport) -> Result<RunOutcome> {
    let seed = cfg.master_seed;
    let mut data = timed(&mut report.wall_times_sec, "prepare", || prepare_data(cfg))?;
    report.missing_ratios = Some(data.ratios.clone());
    report.notes.push("split on the raw timeline before windowing".into());
    if cfg.mechanism_on_standardized {
        report.notes.push("mechanism applied to column-standardized values".into());
    }
    let meta = data.train.axis_meta;
    let d = data.train.cols();
    let sched = build_schedule(cfg.schedule.steps, cfg.schedule.beta_min, cfg.schedule.beta_max, cfg.schedule.kind)
        .map_err(|e| e.in_stage("schedule"))?;
    let units = cfg.eval.data_units.then_some(&data.stats);

    let test_artificial = timed(&mut report.wall_times_sec, "artificial_mask", || {
        if data.test.rows() == 0 {
            return Ok(None);
        }
        let mut rng = stage_rng(seed, "artificial_eval", 0);
        gen_adjacent_artificial(&data.test.m, cfg.phase1.artificial_fraction, meta, &mut rng).map(Some)
    })?;
    if let Some(a) = &test_artificial {
        let obs = data.test.m.sum();
        if obs > 0.0 {
            data.ratios.artificial_fraction_realized = Some(a.sum() / obs);
            report.missing_ratios = Some(data.ratios.clone());
        }
    }

    let phase1 = timed(&mut report.wall_times_sec, "phase1", || {
        let mut rng = stage_rng(seed, "init_denoiser", 0);
        let init = Denoiser::new(d, &cfg.denoiser, Init::Uniform, &mut rng)?;
        let mut rng = stage_rng(seed, "phase1", 0);
        pretrain_phase1(&data.train, init, &cfg.phase1, &sched, &mut rng)
    })?;

    let recognizer = if cfg.em.is_baseline() {
        PatternRecognizer::zeros(d, &cfg.recognizer)?
    } else {
        let mut rng = stage_rng(seed, "init_recognizer", 0);
        PatternRecognizer::new(d, &cfg.recognizer, Init::Uniform, &mut rng)?
    };

    let train_eval = data.train.m.zip_map(&data.train_known, |m, k| (1.0 - m) * k)?;
    let train_truth = data.train.truth.clone().expect("prepared data carries truth");
    let ckpt_dir = out_dir.join("checkpoints");
    let mut save_ckpt = |state: &EmState| -> Result<()> {
        if cfg.checkpoint_interval > 0 && state.iteration.is_multiple_of(cfg.checkpoint_interval) {
            fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            build_checkpoint(state, &data, cfg).save(ckpt_dir.join(format!("iter_{:04}.ckpt", state.iteration)))?;
        }
        Ok(())
    };
    let state = timed(&mut report.wall_times_sec, "em", || {
        let hooks = EmHooks {
            monitor: Some(Monitor {
                truth: &train_truth,
                eval_mask: &train_eval,
                stats: units,
            }),
            on_iteration: Some(&mut save_ckpt),
        };
        let mut rng = stage_rng(seed, "em", 0);
        run_em(phase1.denoiser, recognizer, &data.train, &sched, &cfg.em, hooks, &mut rng)
    })?;

    let test_truth = data.test.truth.clone().expect("prepared data carries truth");
    let imputed_test = timed(&mut report.wall_times_sec, "impute_test", || {
        let mut rng = stage_rng(seed, "impute_test", 0);
        impute_out_of_sample(&state, &data.test.observed(), &data.test.m, &sched, &cfg.em, &mut rng)
    })?;

    timed(&mut report.wall_times_sec, "evaluate", || {
        for scope in &cfg.eval.scopes {
            let r = match scope {
                Scope::OriginalInSample => score(&train_truth, &state.imputed, &train_eval, units, *scope)?,
                Scope::OriginalOutOfSample => {
                    let mask = data.test.m.zip_map(&data.test_known, |m, k| (1.0 - m) * k)?;
                    score(&test_truth, &imputed_test, &mask, units, *scope)?
                }
                Scope::Artificial => match &test_artificial {
                    Some(a) => {
                        let cond = data.test.m.zip_map(a, |m, a| m - a)?;
                        let obs = data.test.x.zip_map(&cond, |v, c| v * c)?;
                        let mut rng = stage_rng(seed, "impute_artificial", 0);
                        let imp = impute_out_of_sample(&state, &obs, &cond, &sched, &cfg.em, &mut rng)?;
                        score(&test_truth, &imp, a, units, *scope)?
                    }
                    None => None,
                },
            };
            report.metrics.extend(r);
        }
        if cfg.eval.wasserstein {
            let full = |k: &Tensor| k.values().iter().all(|&v| v == 1.0);
            report.wasserstein2 = Some(WassersteinReport {
                in_sample: if full(&data.train_known) { w2_rows(&state.imputed, &train_truth, units)? } else { None },
                out_of_sample: if full(&data.test_known) { w2_rows(&imputed_test, &test_truth, units)? } else { None },
                points: "flattened rows".into(),
            });
        }
        if data.test.rows() > 0 {
            let probs = pr_predict(&state.recognizer, &test_truth)?;
            let (mut s, mut l) = (Vec::new(), Vec::new());
            for ((&p, &m), &k) in probs.values().iter().zip(data.test.m.values()).zip(data.test_known.values()) {
                if k == 1.0 {
                    s.push(p);
                    l.push(m);
                }
            }
            report.recognizer_auc = roc_auc(&s, &l);
        }
        Ok(())
    })?;

    timed(&mut report.wall_times_sec, "guidance_sweep", || {
        let mask = data.test.m.zip_map(&data.test_known, |m, k| (1.0 - m) * k)?;
        for &s in &cfg.eval.guidance_sweep {
            let em = EmConfig {
                guidance_scale: s,
                ..cfg.em.clone()
            };
            let mut rng = stage_rng(seed, "guidance_sweep", 0);
            let imp = impute_with(&state.denoiser, &state.recognizer, &data.test.observed(), &data.test.m, &sched, &em, &mut rng)?;
            if let Some(r) = score(&test_truth, &imp, &mask, units, Scope::OriginalOutOfSample)? {
                report.guidance_sweep.push(SweepRow {
                    guidance_scale: s,
                    metrics: r,
                });
            }
        }
        Ok(())
    })?;

    timed(&mut report.wall_times_sec, "write", || {
        let files = emit_plot_data(out_dir, &state.trace, &phase1.loss_trace, &report.guidance_sweep, !cfg.eval.guidance_sweep.is_empty())?;
        report.files.extend(files);
        let train_units = to_units(units, &state.imputed)?;
        write_file(out_dir, "imputed_train.csv", &to_csv(&train_units, None, None))?;
        report.files.insert("imputed_train".into(), "imputed_train.csv".into());
        write_file(out_dir, "imputed_test.csv", &to_csv(&to_units(units, &imputed_test)?, None, None))?;
        report.files.insert("imputed_test".into(), "imputed_test.csv".into());
        build_checkpoint(&state, &data, cfg).save(out_dir.join("model.ckpt"))?;
        report.files.insert("checkpoint".into(), "model.ckpt".into());
        Ok(())
    })?;
    report.status = "ok".into();
    write_report(out_dir, report)?;
    info!("run finished; report in {}", out_dir.join("report.json").display());
    Ok(RunOutcome {
        report: report.clone(),
        state,
        phase1_trace: phase1.loss_trace,
        data,
        imputed_test,
    })
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write_file(dir, "report.json", &serde_json::to_string_pretty(report)?)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Loss, MRE and guidance-sweep CSVs. Returns name → file name.
pub fn emit_plot_data(
    dir: &Path,
    trace: &[TraceRow],
    phase1: &[f64],
    sweep: &[SweepRow],
    write_sweep: bool,
) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let mut em = String::from("iteration,L_diff,L_PR,mae_in,rmse_in,mre_in\n");
    let mut mre = String::from("iteration,mre_in\n");
    for r in trace {
        let m = r.metrics.as_ref();
        em.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.l_diff,
            r.l_pr,
            opt(m.map(|m| m.mae)),
            opt(m.map(|m| m.rmse)),
            opt(m.and_then(|m| m.mre_percent))
        ));
        mre.push_str(&format!("{},{}\n", r.iteration, opt(m.and_then(|m| m.mre_percent))));
    }
    write_file(dir, "em_trace.csv", &em)?;
    files.insert("em_trace".into(), "em_trace.csv".into());
    write_file(dir, "mre_vs_iteration.csv", &mre)?;
    files.insert("mre_vs_iteration".into(), "mre_vs_iteration.csv".into());
    let mut p1 = String::from("epoch,loss\n");
    for (i, l) in phase1.iter().enumerate() {
        p1.push_str(&format!("{},{}\n", i + 1, l));
    }
    write_file(dir, "phase1_loss.csv", &p1)?;
    files.insert("phase1_loss".into(), "phase1_loss.csv".into());
    if write_sweep {
        let mut s = String::from("guidance_scale,rmse,mae,mre\n");
        for r in sweep {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.guidance_scale,
                r.metrics.rmse,
                r.metrics.mae,
                opt(r.metrics.mre_percent)
            ));
        }
        write_file(dir, "guidance_sweep.csv", &s)?;
        files.insert("guidance_sweep".into(), "guidance_sweep.csv".into());
    }
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub config_hash: String,
    pub mechanism: String,
    pub ratios: MissingRatios,
    pub train_shape: Vec<usize>,
    pub test_shape: Vec<usize>,
}

/// Mechanism-only dry run: writes `mask.csv` (series mask) and
/// `masks.json` into `cfg.out_dir`.
pub fn run_masks(cfg: &ExperimentConfig) -> Result<MaskSummary> {
    let data = prepare_data(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, "mask.csv", &to_csv(&data.series_mask, None, None))?;
    let summary = MaskSummary {
        config_hash: cfg.hash(),
        mechanism: cfg.mechanism.name().to_string(),
        ratios: data.ratios,
        train_shape: data.train.m.shape().to_vec(),
        test_shape: data.test.m.shape().to_vec(),
    };
    write_file(dir, "masks.json", &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Reverse chain with a saved model on a `[time × features]` or
/// `[rows × D]` matrix in data units (missing entries marked by `m = 0`).
pub fn impute_with_checkpoint<R: Rng + ?Sized>(ck: &Checkpoint, ds: &MaskedDataset, rng: &mut R) -> Result<Tensor> {
    let sched = ck.build_schedule()?;
    let d = ck.denoiser.dim();
    let em = EmConfig {
        guidance_scale: ck.guidance.scale,
        guidance_path: ck.guidance.path,
        guidance_reduction: ck.guidance.reduction,
        grad_clip_norm: ck.guidance.grad_clip_norm,
        em_mode: ck.guidance.em_mode,
        soft_samples: ck.guidance.soft_samples,
        ..EmConfig::default()
    };
    let run = |rows: &MaskedDataset, rng: &mut R| -> Result<Tensor> {
        let x = match &ck.norm_stats {
            Some(s) => s.apply(&rows.x)?.zip_map(&rows.m, |v, m| v * m)?,
            None => rows.observed(),
        };
        let imp = impute_with(&ck.denoiser, &ck.recognizer, &x, &rows.m, &sched, &em, rng)?;
        let mut out = to_units(ck.norm_stats.as_ref(), &imp)?;
        // Observed values are returned exactly as given.
        for ((o, &v), &m) in out.values_mut().iter_mut().zip(rows.x.values()).zip(rows.m.values()) {
            if m == 1.0 {
                *o = v;
            }
        }
        Ok(out)
    };
    if ds.cols() == d {
        return run(ds, rng);
    }
    let meta = ck
        .axis_meta
        .filter(|m| m.features == ds.cols())
        .ok_or_else(|| Error::Shape(format!("model expects {d} columns (or a series of its feature count), got {}", ds.cols())))?;
    tile_series(ds, meta.steps, |w| run(w, rng))
}

/// Cuts a series into disjoint windows (the last one aligned to the end),
/// imputes each and stitches the series back together.
fn tile_series(ds: &MaskedDataset, len: usize, mut impute: impl FnMut(&MaskedDataset) -> Result<Tensor>) -> Result<Tensor> {
    let total = ds.rows();
    if total < len {
        return Err(Error::Shape(format!("series of {total} rows is shorter than the window {len}")));
    }
    let mut starts: Vec<usize> = (0..=total - len).step_by(len).collect();
    if starts.last() != Some(&(total - len)) {
        starts.push(total - len);
    }
    let k = ds.cols();
    let mut out = ds.x.clone();
    let mut done = 0;
    for &s in &starts {
        let idx: Vec<usize> = (s..s + len).collect();
        let w = window_dataset(&ds.select_rows(&idx), len, len)?;
        let imp = impute(&w)?;
        let meta = w.axis_meta.expect("window meta");
        for step in done.max(s) - s..len {
            for f in 0..k {
                out.set(s + step, f, imp.get(0, meta.column(f, step)));
            }
        }
        done = s + len;
    }
    Ok(out)
}
