//! Experiment orchestration: model or logit table, calibration, methods,
//! reports and plot-data tables.
//!
//! Test labels flow only into `EvalReport::build`, the plot-data metrics and
//! the supervised ACI baseline. Set construction for every label-free method
//! receives probabilities or covariates alone.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::{EvalMode, Input, Method, RunConfig, Temperature};
use crate::conformal::{self, CalibrationResult, PredictionSet};
use crate::entropy_scaling::{self, ScalingSpec};
use crate::error::{Error, Result};
use crate::io::{self, Cell, LogitTable, ReportRow, Table};
use crate::metrics::{self, DiagnosticInputs, EvalReport, PointContext, SlopeFit};
use crate::model::{self, ClassifierParams, Dataset, TrainConfig};
use crate::numkit::{self, ProbVector};
use crate::online_baseline;
use crate::shiftsim::{self, ShiftSchedule, SyntheticTask};
use crate::tta::{self, AdaptationState, QuantileMode, QuantileTracker};

const TAG_TRAIN: u64 = 0x7261;
const TAG_CAL: u64 = 0x6361;
const TAG_VAL: u64 = 0x7661;
const TAG_SHIFT: u64 = 0x7368;
const TAG_SPLIT: u64 = 0x7370;

/// A model with the covariates of the test stream, for adaptive methods.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub params: ClassifierParams,
    pub test_rows: Vec<Vec<f64>>,
}

/// Everything one seed needs before any method runs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: String,
    pub seed: u64,
    pub cal_scores: Vec<f64>,
    pub cal_probs: Vec<ProbVector>,
    pub cal_labels: Vec<usize>,
    pub calib: CalibrationResult,
    pub test_probs: Vec<ProbVector>,
    pub test_labels: Vec<usize>,
    pub severities: Option<Vec<u8>>,
    pub model: Option<ModelContext>,
    pub temperature: Option<f64>,
}

/// Trained (or loaded) model plus the clean splits it came from.
#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub task: SyntheticTask,
    pub params: ClassifierParams,
    pub train: Dataset,
    pub cal: Dataset,
    pub warnings: Vec<String>,
}

/// Draw the clean splits for `seed` and train (or load) the classifier.
pub fn synthetic_model(cfg: &RunConfig, seed: u64) -> Result<SyntheticModel> {
    let spec = shiftsim::SyntheticSpec {
        seed,
        ..cfg.synthetic.clone()
    };
    let task = SyntheticTask::new(spec.clone())?;
    let train = task.sample(spec.n_train, numkit::derive_seed(seed, TAG_TRAIN))?;
    let cal = task.sample(spec.n_cal, numkit::derive_seed(seed, TAG_CAL))?;
    let mut warnings = Vec::new();
    let params = match &cfg.model_path {
        Some(path) => {
            let p = model::load_checkpoint(path)?;
            if p.input_dim != spec.dim || p.num_classes != spec.num_classes {
                return Err(Error::Config(format!(
                    "checkpoint is d={} k={}, data is d={} k={}",
                    p.input_dim, p.num_classes, spec.dim, spec.num_classes
                )));
            }
            match cfg.temperature {
                Temperature::Fixed(t) => p.with_temperature(t)?,
                Temperature::Auto => p,
            }
        }
        None => {
            let outcome = model::train_supervised(
                &train,
                &TrainConfig {
                    seed,
                    ..cfg.train.clone()
                },
            )?;
            warnings.extend(outcome.warnings);
            let t = match cfg.temperature {
                Temperature::Fixed(t) => t,
                Temperature::Auto => {
                    let val = task.sample(spec.n_cal, numkit::derive_seed(seed, TAG_VAL))?;
                    model::fit_temperature(&outcome.params, &val)?
                }
            };
            outcome.params.with_temperature(t)?
        }
    };
    Ok(SyntheticModel {
        task,
        params,
        train,
        cal,
        warnings,
    })
}

fn true_scores(probs: &[ProbVector], labels: &[usize]) -> Result<Vec<f64>> {
    probs.iter().zip(labels).map(|(p, &y)| conformal::score(p, y)).collect()
}

fn prepare_synthetic(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    prepare_from_model(cfg, seed, &synthetic_model(cfg, seed)?)
}

/// Calibrate an already trained model and draw the configured test stream.
pub fn prepare_from_model(cfg: &RunConfig, seed: u64, sm: &SyntheticModel) -> Result<Prepared> {
    let schedule = ShiftSchedule {
        mode: cfg.effective_shift(),
        segment_len: cfg.segment_len,
        pool: cfg.pool.clone(),
        seed: numkit::derive_seed(seed, TAG_SHIFT),
    };
    let total = cfg.stream_len.unwrap_or(cfg.synthetic.n_test);
    let stream = shiftsim::schedule_stream(&sm.task, &schedule, total)?;
    let cal_probs = sm.params.predict_proba_rows(sm.cal.rows())?;
    let cal_scores = true_scores(&cal_probs, sm.cal.labels())?;
    let calib = conformal::calibrate(&cal_scores, cfg.alpha)?;
    let test_rows: Vec<Vec<f64>> = stream.data.rows().map(<[f64]>::to_vec).collect();
    let test_probs = sm.params.predict_proba_rows(stream.data.rows())?;
    let pool: Vec<String> = cfg.pool.iter().map(|k| k.to_string()).collect();
    let dataset = cfg
        .dataset_name
        .clone()
        .unwrap_or_else(|| format!("synthetic:{}:{}", schedule.mode, pool.join("+")));
    Ok(Prepared {
        dataset,
        seed,
        cal_scores,
        cal_probs,
        cal_labels: sm.cal.labels().to_vec(),
        calib,
        test_probs,
        test_labels: stream.data.labels().to_vec(),
        severities: Some(stream.severities),
        temperature: Some(sm.params.temperature),
        model: Some(ModelContext {
            params: sm.params.clone(),
            test_rows,
        }),
    })
}

fn prepare_logits(cfg: &RunConfig, seed: u64, path: &Path, cal_path: Option<&Path>, orientation: io::Orientation) -> Result<Prepared> {
    let (cal, test): (LogitTable, LogitTable) = match cal_path {
        Some(c) => (io::load_logit_table(c, orientation)?, io::load_logit_table(path, orientation)?),
        None => {
            let table = io::load_logit_table(path, orientation)?;
            let n = table.len();
            if n < 3 {
                return Err(Error::invalid("a split logit table needs at least 3 rows"));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut numkit::rng_from_seed(numkit::derive_seed(seed, TAG_SPLIT)));
            let n_cal = ((cfg.split * n as f64).round() as usize).clamp(2, n - 1);
            (table.subset(&idx[..n_cal]), table.subset(&idx[n_cal..]))
        }
    };
    if cal.num_classes() != test.num_classes() {
        return Err(Error::invalid(format!(
            "calibration table has k={}, test table has k={}",
            cal.num_classes(),
            test.num_classes()
        )));
    }
    let cal_scores = cal.true_label_scores();
    let calib = conformal::calibrate(&cal_scores, cfg.alpha)?;
    let dataset = cfg.dataset_name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map_or_else(|| "logits".to_string(), |s| s.to_string_lossy().into_owned())
    });
    Ok(Prepared {
        dataset,
        seed,
        cal_scores,
        cal_probs: cal.probs,
        cal_labels: cal.labels,
        calib,
        test_probs: test.probs,
        test_labels: test.labels,
        severities: None,
        model: None,
        temperature: None,
    })
}

/// Train or load, calibrate, and build the test stream for one seed.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    match &cfg.input {
        Input::Synthetic => prepare_synthetic(cfg, seed),
        Input::LogitTable {
            path,
            cal_path,
            orientation,
        } => prepare_logits(cfg, seed, path, cal_path.as_deref(), *orientation),
    }
}

/// Sets plus the `u_test` each point was scaled with, if any.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub sets: Vec<PredictionSet>,
    pub u_tests: Option<Vec<f64>>,
}

/// Streaming ECP over fixed probabilities.
fn ecp_stream_probs(probs: &[ProbVector], batch: usize, calib: &CalibrationResult, spec: ScalingSpec, mode: QuantileMode) -> Result<MethodOutput> {
    let mut tracker = QuantileTracker::new(mode)?;
    let mut sets = Vec::with_capacity(probs.len());
    let mut u_tests = Vec::with_capacity(probs.len());
    for chunk in probs.chunks(batch) {
        let values = entropy_scaling::uncertainty_values(chunk, spec.measure());
        values.iter().for_each(|&v| tracker.push(v));
        let u = tracker.quantile(spec.beta())?;
        let factor = entropy_scaling::scale_factor(u, &spec);
        for p in chunk {
            sets.push(entropy_scaling::ecp_set(p, calib, factor));
            u_tests.push(u);
        }
    }
    Ok(MethodOutput {
        sets,
        u_tests: Some(u_tests),
    })
}

/// Streaming ETA + split CP: predict each batch, then adapt on it.
fn eta_splitcp_stream(ctx: &ModelContext, calib: &CalibrationResult, cfg: &tta::TtaConfig) -> Result<Vec<PredictionSet>> {
    let mut params = ctx.params.clone();
    let mut state = AdaptationState::new();
    let rows: Vec<&[f64]> = ctx.test_rows.iter().map(Vec::as_slice).collect();
    let mut sets = Vec::with_capacity(rows.len());
    for batch in rows.chunks(cfg.batch_size) {
        let probs = params.predict_proba_rows(batch.iter().copied())?;
        sets.extend(probs.iter().map(|p| conformal::splitcp_set(p, calib)));
        tta::batch_update(&mut params, batch, cfg, &mut state)?;
    }
    Ok(sets)
}

fn need_model(prep: &Prepared, method: Method) -> Result<&ModelContext> {
    prep.model
        .as_ref()
        .ok_or_else(|| Error::Config(format!("method {method} needs a model, not a logit table")))
}

/// Run one method on prepared data. Only ACI sees test labels.
pub fn run_method(cfg: &RunConfig, prep: &Prepared, method: Method) -> Result<MethodOutput> {
    let spec = ScalingSpec::new(cfg.measure, cfg.order, cfg.effective_beta())?;
    let plain = |sets| MethodOutput { sets, u_tests: None };
    let probs = &prep.test_probs;
    Ok(match (method, cfg.mode) {
        (Method::Naive, _) => plain(probs.iter().map(|p| conformal::naive_set(p, cfg.alpha)).collect()),
        (Method::SplitCp, _) => plain(entropy_scaling::splitcp_sets(probs, &prep.calib)),
        (Method::Ecp, EvalMode::Offline) => {
            let (sets, profile) = entropy_scaling::ecp_sets(probs, &prep.calib, spec)?;
            MethodOutput {
                u_tests: Some(vec![profile.u_test(); sets.len()]),
                sets,
            }
        }
        (Method::Ecp, EvalMode::Stream) => ecp_stream_probs(probs, cfg.tta.batch_size, &prep.calib, spec, cfg.quantile)?,
        (Method::EtaSplitCp, EvalMode::Offline) => {
            let ctx = need_model(prep, method)?;
            let rows: Vec<&[f64]> = ctx.test_rows.iter().map(Vec::as_slice).collect();
            let (adapted, _) = tta::adapt(ctx.params.clone(), &rows, &cfg.tta)?;
            let probs = adapted.predict_proba_rows(rows.iter().copied())?;
            plain(entropy_scaling::splitcp_sets(&probs, &prep.calib))
        }
        (Method::EtaSplitCp, EvalMode::Stream) => plain(eta_splitcp_stream(need_model(prep, method)?, &prep.calib, &cfg.tta)?),
        (Method::Eacp, EvalMode::Offline) => {
            let ctx = need_model(prep, method)?;
            let rows: Vec<&[f64]> = ctx.test_rows.iter().map(Vec::as_slice).collect();
            let out = tta::eacp_offline(ctx.params.clone(), &rows, &prep.calib, spec, &cfg.tta)?;
            MethodOutput {
                u_tests: Some(vec![out.profile.u_test(); out.sets.len()]),
                sets: out.sets,
            }
        }
        (Method::Eacp, EvalMode::Stream) => {
            let ctx = need_model(prep, method)?;
            let rows: Vec<&[f64]> = ctx.test_rows.iter().map(Vec::as_slice).collect();
            let out = tta::eacp_streaming(ctx.params.clone(), &rows, cfg.tta.batch_size, &prep.calib, spec, Some(&cfg.tta), cfg.quantile)?;
            MethodOutput {
                u_tests: Some(out.points.iter().map(|p| p.u_test).collect()),
                sets: out.sets(),
            }
        }
        (Method::Aci, _) => {
            let stream: Vec<(ProbVector, usize)> = probs.iter().cloned().zip(prep.test_labels.iter().copied()).collect();
            plain(online_baseline::aci_sets(&stream, &prep.cal_scores, cfg.gamma, cfg.alpha)?.sets)
        }
    })
}

/// Display name for a method with the settings that distinguish it.
pub fn method_label(cfg: &RunConfig, method: Method) -> String {
    match (method, cfg.mode) {
        (Method::Ecp | Method::Eacp, EvalMode::Offline) => format!("{method}{}", cfg.order),
        (Method::Ecp | Method::Eacp, EvalMode::Stream) => format!("{method}{}:{}", cfg.order, cfg.quantile),
        _ => method.to_string(),
    }
}

pub fn evaluate(cfg: &RunConfig, prep: &Prepared, method: Method) -> Result<EvalReport> {
    let out = run_method(cfg, prep, method)?;
    EvalReport::build(
        &method_label(cfg, method),
        &prep.dataset,
        prep.seed,
        cfg.alpha,
        cfg.window,
        &out.sets,
        &prep.test_labels,
        PointContext {
            severities: prep.severities.as_deref(),
            u_tests: out.u_tests.as_deref(),
        },
    )
}

/// Plot-data and report tables accumulated over seeds.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub reports: Vec<EvalReport>,
    pub severity: Table,
    pub beta_sweep: Table,
    pub diagnostic: Table,
    pub diagnostic_fit: Table,
    pub calibration: Table,
    pub warnings: Vec<String>,
}

impl ExperimentOutput {
    fn new() -> Self {
        Self {
            reports: Vec::new(),
            severity: Table::new(&["method", "dataset", "seed", "severity", "n", "coverage", "avg_size"]),
            beta_sweep: Table::new(&["dataset", "seed", "beta", "u_test", "coverage", "avg_size"]),
            diagnostic: Table::new(&["dataset", "seed", "alpha", "u_test", "tau_d", "tau_test", "ratio", "in_fit"]),
            diagnostic_fit: Table::new(&["dataset", "seed", "status", "slope", "intercept"]),
            calibration: Table::new(&["dataset", "seed", "alpha", "n_cal", "tau", "temperature", "ece_cal", "ece_test"]),
            warnings: Vec::new(),
        }
    }

    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.reports.iter().map(ReportRow::from).collect()
    }
}

fn add_calibration_row(cfg: &RunConfig, prep: &Prepared, out: &mut ExperimentOutput) -> Result<()> {
    out.calibration.push(vec![
        prep.dataset.clone().into(),
        prep.seed.into(),
        cfg.alpha.into(),
        prep.calib.n_cal().into(),
        prep.calib.tau().into(),
        prep.temperature.map_or(Cell::Text(String::new()), Cell::Real),
        metrics::ece(&prep.cal_probs, &prep.cal_labels, cfg.ece_bins)?.into(),
        metrics::ece(&prep.test_probs, &prep.test_labels, cfg.ece_bins)?.into(),
    ]);
    Ok(())
}

fn add_extras(cfg: &RunConfig, prep: &Prepared, out: &mut ExperimentOutput) -> Result<()> {
    for row in metrics::beta_sweep(&prep.test_probs, &prep.test_labels, &prep.calib, &cfg.betas, cfg.order, cfg.measure)? {
        out.beta_sweep.push(vec![
            prep.dataset.clone().into(),
            prep.seed.into(),
            row.beta.into(),
            row.u_test.into(),
            row.coverage.into(),
            row.avg_size.into(),
        ]);
    }
    let diag = scaling_diagnostic(cfg, prep)?;
    for p in &diag.points {
        out.diagnostic.push(vec![
            prep.dataset.clone().into(),
            prep.seed.into(),
            p.alpha.into(),
            p.u_test.into(),
            p.tau_d.into(),
            p.tau_test.into(),
            p.ratio.into(),
            p.in_fit.into(),
        ]);
    }
    let (status, slope, intercept) = match &diag.fit {
        SlopeFit::Fitted { slope, intercept } => ("fitted".to_string(), Cell::Real(*slope), Cell::Real(*intercept)),
        SlopeFit::NotApplicable(why) => (format!("not_applicable: {why}"), Cell::Text(String::new()), Cell::Text(String::new())),
    };
    out.diagnostic_fit
        .push(vec![prep.dataset.clone().into(), prep.seed.into(), status.into(), slope, intercept]);
    out.warnings.extend(diag.warnings);
    add_calibration_row(cfg, prep, out)
}

/// Scaling-order diagnostic on the unadapted test probabilities.
pub fn scaling_diagnostic(cfg: &RunConfig, prep: &Prepared) -> Result<metrics::ScalingDiagnostic> {
    let uncertainty = entropy_scaling::uncertainty_values(&prep.test_probs, cfg.measure);
    let scores = true_scores(&prep.test_probs, &prep.test_labels)?;
    metrics::scaling_order_diagnostic(
        DiagnosticInputs {
            cal_scores: &prep.cal_scores,
            test_uncertainty: &uncertainty,
            test_true_scores: &scores,
        },
        &cfg.diag_alphas,
        cfg.diag_range,
    )
}

/// Full pipeline over every seed and method; writes artifacts when
/// `cfg.output_dir` is set.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut out = ExperimentOutput::new();
    for &seed in &cfg.seeds {
        let prep = prepare(cfg, seed)?;
        for &method in &cfg.methods {
            let report = evaluate(cfg, &prep, method)?;
            for (sev, n, cov, size) in report.by_severity() {
                out.severity.push(vec![
                    report.method.clone().into(),
                    report.dataset.clone().into(),
                    seed.into(),
                    sev.into(),
                    n.into(),
                    cov.into(),
                    size.into(),
                ]);
            }
            out.reports.push(report);
        }
        add_extras(cfg, &prep, &mut out)?;
    }
    if let Some(dir) = &cfg.output_dir {
        write_artifacts(cfg, &out, dir)?;
    }
    Ok(out)
}

/// Write report, optional per-point records, plot data and the effective config.
pub fn write_artifacts(cfg: &RunConfig, out: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        io::write_bytes(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    put("report.csv", io::report_csv(&out.report_rows())?)?;
    if cfg.per_point {
        put("points.csv", io::points_csv(&out.reports)?)?;
    }
    put("coverage_by_severity.csv", out.severity.to_csv()?)?;
    put("beta_sweep.csv", out.beta_sweep.to_csv()?)?;
    put("scaling_diagnostic.csv", out.diagnostic.to_csv()?)?;
    put("scaling_fit.csv", out.diagnostic_fit.to_csv()?)?;
    put("calibration.csv", out.calibration.to_csv()?)?;
    put("config.txt", cfg.to_text().into_bytes())?;
    Ok(written)
}

/// Files produced by [`train_demo`].
#[derive(Debug, Clone)]
pub struct TrainDemoOutput {
    pub params: ClassifierParams,
    pub clean_accuracy: f64,
    pub warnings: Vec<String>,
    pub written: Vec<PathBuf>,
}

/// Train on synthetic data for the first seed and export the model, the
/// clean splits, and probability tables for calibration and shifted test data.
pub fn train_demo(cfg: &RunConfig, dir: &Path) -> Result<TrainDemoOutput> {
    let mut cfg = cfg.clone();
    cfg.input = Input::Synthetic;
    cfg.validate()?;
    let seed = cfg.seeds[0];
    let sm = synthetic_model(&cfg, seed)?;
    let prep = prepare_from_model(&cfg, seed, &sm)?;
    let test_clean = sm
        .task
        .sample(cfg.synthetic.n_test, numkit::derive_seed(seed, TAG_SHIFT ^ 1))?;
    let clean_accuracy = model::accuracy(&sm.params, &test_clean)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let ckpt = dir.join("model.ckpt");
    model::save_checkpoint(&sm.params, &ckpt)?;
    written.push(ckpt);
    for (name, data) in [("train.csv", &sm.train), ("cal.csv", &sm.cal)] {
        let path = dir.join(name);
        io::write_dataset(data, &path)?;
        written.push(path);
    }
    let as_rows = |probs: &[ProbVector]| probs.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>();
    for (name, labels, probs) in [
        ("cal_logits.csv", &prep.cal_labels, &prep.cal_probs),
        ("test_logits.csv", &prep.test_labels, &prep.test_probs),
    ] {
        let path = dir.join(name);
        io::write_bytes(&path, &io::logit_table_csv(labels, &as_rows(probs))?)?;
        written.push(path);
    }
    Ok(TrainDemoOutput {
        params: sm.params,
        clean_accuracy,
        warnings: sm.warnings,
        written,
    })
}
