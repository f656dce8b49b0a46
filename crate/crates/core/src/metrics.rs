//! Evaluation metrics and post-hoc diagnostics. These are the only consumers
//! of test labels.

use crate::conformal::{self, CalibrationResult, PredictionSet};
use crate::entropy_scaling::{self, ScalingSpec, UncertaintyMeasure};
use crate::error::{Error, Result};
use crate::numkit::{self, ProbVector};

pub const DEFAULT_WINDOW: usize = 128;
pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_DIAG_ALPHA_RANGE: (f64, f64) = (0.05, 0.3);

/// Log-ratio magnitude below which the log-log fit is reported as not applicable.
const NO_SHIFT_LOG_TOL: f64 = 0.05;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} prediction sets but {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid("metrics need at least one point"));
    }
    Ok(())
}

pub fn covered_flags(sets: &[PredictionSet], labels: &[usize]) -> Result<Vec<bool>> {
    check_lengths(sets.len(), labels.len())?;
    Ok(sets.iter().zip(labels).map(|(s, &y)| s.contains(y)).collect())
}

/// Fraction of points whose set contains the label.
pub fn coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64> {
    let flags = covered_flags(sets, labels)?;
    Ok(flags.iter().filter(|c| **c).count() as f64 / flags.len() as f64)
}

pub fn avg_size(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(|s| s.len()).sum::<usize>() as f64 / sets.len() as f64
}

pub fn empty_set_rate(sets: &[PredictionSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().filter(|s| s.is_empty()).count() as f64 / sets.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// `max_window |target - mean(indicators)|`
    Lce,
    /// Worst under-coverage, `max_window (target - mean(indicators))`; may be negative.
    LceSigned,
    /// `max_window mean(sizes)`
    Lss,
}

/// Extremes of the contiguous length-`w` window sums.
fn window_sum_extremes(values: &[f64], w: usize) -> (f64, f64) {
    let mut sum: f64 = values[..w].iter().sum();
    let (mut lo, mut hi) = (sum, sum);
    for i in w..values.len() {
        sum += values[i] - values[i - w];
        lo = lo.min(sum);
        hi = hi.max(sum);
    }
    (lo, hi)
}

/// Worst sliding-window statistic over every contiguous window of length `w`.
///
/// Running sums are exact for 0/1 indicators and integer set sizes, which is
/// what the harness feeds in.
pub fn worst_window(values: &[f64], w: usize, target: f64, kind: WindowKind) -> Result<f64> {
    if w == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if values.len() < w {
        return Err(Error::invalid(format!(
            "window {w} longer than the {} available points",
            values.len()
        )));
    }
    let (lo, hi) = window_sum_extremes(values, w);
    let wf = w as f64;
    Ok(match kind {
        WindowKind::Lce => (target - lo / wf).abs().max((target - hi / wf).abs()),
        WindowKind::LceSigned => target - lo / wf,
        WindowKind::Lss => hi / wf,
    })
}

/// Top-label expected calibration error over equal-width confidence bins.
pub fn ece(probs: &[ProbVector], labels: &[usize], bins: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    if bins == 0 {
        return Err(Error::invalid("ECE needs at least one bin"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let conf = p.max_prob();
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += conf;
        if p.argmax() == y {
            correct[b] += 1;
        }
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (correct[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| out[k] = r);
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of at least 2 points"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSweepRow {
    pub beta: f64,
    pub u_test: f64,
    pub coverage: f64,
    pub avg_size: f64,
}

/// Recompute `u_test` and ECP sets for each `beta`.
pub fn beta_sweep(
    probs: &[ProbVector],
    labels: &[usize],
    calib: &CalibrationResult,
    betas: &[f64],
    order: f64,
    measure: UncertaintyMeasure,
) -> Result<Vec<BetaSweepRow>> {
    check_lengths(probs.len(), labels.len())?;
    let values = entropy_scaling::uncertainty_values(probs, measure);
    betas
        .iter()
        .map(|&beta| {
            let spec = ScalingSpec::new(measure, order, beta)?;
            let u_test = entropy_scaling::entropy_quantile(&values, beta)?;
            let factor = entropy_scaling::scale_factor(u_test, &spec);
            let sets: Vec<PredictionSet> = probs
                .iter()
                .map(|p| entropy_scaling::ecp_set(p, calib, factor))
                .collect();
            Ok(BetaSweepRow {
                beta,
                u_test,
                coverage: coverage(&sets, labels)?,
                avg_size: avg_size(&sets),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticPoint {
    pub alpha: f64,
    pub u_test: f64,
    pub tau_d: f64,
    pub tau_test: f64,
    pub ratio: f64,
    /// Inside the alpha range and with positive finite coordinates.
    pub in_fit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlopeFit {
    Fitted { slope: f64, intercept: f64 },
    /// No usable shift signal or too few points.
    NotApplicable(String),
}

impl SlopeFit {
    pub fn slope(&self) -> Option<f64> {
        match self {
            SlopeFit::Fitted { slope, .. } => Some(*slope),
            SlopeFit::NotApplicable(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingDiagnostic {
    pub points: Vec<DiagnosticPoint>,
    pub fit: SlopeFit,
    pub warnings: Vec<String>,
}

/// Labeled inputs for the scaling-order diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticInputs<'a> {
    pub cal_scores: &'a [f64],
    /// Per test point uncertainty (entropy by default).
    pub test_uncertainty: &'a [f64],
    /// Per test point softmax score of the true label.
    pub test_true_scores: &'a [f64],
}

/// For each alpha: `u_test` at `beta = 1 - alpha`, `tau_D / tau_test`, and a
/// log-log fit whose slope suggests the polynomial order of `f`.
pub fn scaling_order_diagnostic(
    inputs: DiagnosticInputs<'_>,
    alphas: &[f64],
    alpha_range: (f64, f64),
) -> Result<ScalingDiagnostic> {
    if inputs.test_uncertainty.len() != inputs.test_true_scores.len() {
        return Err(Error::invalid("uncertainty and score vectors differ in length"));
    }
    let mut points = Vec::with_capacity(alphas.len());
    let mut warnings = Vec::new();
    for &alpha in alphas {
        let calib = conformal::calibrate(inputs.cal_scores, alpha)?;
        let u_test = entropy_scaling::entropy_quantile(inputs.test_uncertainty, 1.0 - alpha)?;
        let diag = entropy_scaling::tau_test_diagnostic(inputs.test_true_scores, alpha, calib.tau())?;
        let positive = u_test > 0.0 && diag.ratio > 0.0 && diag.ratio.is_finite();
        let in_range = alpha >= alpha_range.0 && alpha <= alpha_range.1;
        if !positive {
            warnings.push(format!(
                "alpha={alpha}: excluded non-positive coordinate (u_test={u_test}, ratio={})",
                diag.ratio
            ));
        }
        points.push(DiagnosticPoint {
            alpha,
            u_test,
            tau_d: calib.tau(),
            tau_test: diag.tau_test,
            ratio: diag.ratio,
            in_fit: positive && in_range,
        });
    }
    let fit_pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.in_fit)
        .map(|p| (p.u_test, p.ratio))
        .collect();
    let fit = if fit_pts.len() < 2 {
        SlopeFit::NotApplicable(format!("{} usable points", fit_pts.len()))
    } else if fit_pts.iter().all(|(_, r)| r.ln().abs() < NO_SHIFT_LOG_TOL) {
        SlopeFit::NotApplicable("ratios indistinguishable from 1 (no shift)".into())
    } else {
        match numkit::linear_fit_loglog(&fit_pts) {
            Ok((slope, intercept)) => SlopeFit::Fitted { slope, intercept },
            Err(e) => SlopeFit::NotApplicable(e.to_string()),
        }
    };
    Ok(ScalingDiagnostic {
        points,
        fit,
        warnings,
    })
}

/// One evaluated test point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRecord {
    pub index: usize,
    pub label: usize,
    pub covered: bool,
    pub set_size: usize,
    pub severity: Option<u8>,
    pub u_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub alpha: f64,
    pub n: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub empty_set_rate: f64,
    /// Absolute worst local coverage error (headline).
    pub lce_w: f64,
    /// Worst local under-coverage.
    pub lce_signed_w: f64,
    pub lss_w: f64,
    /// Window actually used; clamped to `n` for short runs.
    pub window: usize,
    pub records: Vec<PointRecord>,
}

/// Per-point side information attached to a report.
#[derive(Debug, Clone, Default)]
pub struct PointContext<'a> {
    pub severities: Option<&'a [u8]>,
    pub u_tests: Option<&'a [f64]>,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        method: &str,
        dataset: &str,
        seed: u64,
        alpha: f64,
        window: usize,
        sets: &[PredictionSet],
        labels: &[usize],
        ctx: PointContext<'_>,
    ) -> Result<Self> {
        let flags = covered_flags(sets, labels)?;
        let n = sets.len();
        if window == 0 {
            return Err(Error::invalid("window must be >= 1"));
        }
        let window = window.min(n);
        let target = 1.0 - alpha;
        let indicators: Vec<f64> = flags.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        let sizes: Vec<f64> = sets.iter().map(|s| s.len() as f64).collect();
        let records = (0..n)
            .map(|i| PointRecord {
                index: i,
                label: labels[i],
                covered: flags[i],
                set_size: sets[i].len(),
                severity: ctx.severities.map(|s| s[i]),
                u_test: ctx.u_tests.map(|u| u[i]),
            })
            .collect();
        Ok(Self {
            method: method.to_string(),
            dataset: dataset.to_string(),
            seed,
            alpha,
            n,
            coverage: indicators.iter().sum::<f64>() / n as f64,
            avg_size: avg_size(sets),
            empty_set_rate: empty_set_rate(sets),
            lce_w: worst_window(&indicators, window, target, WindowKind::Lce)?,
            lce_signed_w: worst_window(&indicators, window, target, WindowKind::LceSigned)?,
            lss_w: worst_window(&sizes, window, target, WindowKind::Lss)?,
            window,
            records,
        })
    }

    /// `(severity, n, coverage, avg_size)` grouped by severity, ascending.
    pub fn by_severity(&self) -> Vec<(u8, usize, f64, f64)> {
        let mut acc: std::collections::BTreeMap<u8, (usize, usize, usize)> = Default::default();
        for r in &self.records {
            if let Some(s) = r.severity {
                let e = acc.entry(s).or_default();
                e.0 += 1;
                e.1 += usize::from(r.covered);
                e.2 += r.set_size;
            }
        }
        acc.into_iter()
            .map(|(s, (n, c, z))| (s, n, c as f64 / n as f64, z as f64 / n as f64))
            .collect()
    }
}
