//! Split conformal prediction with the positively oriented softmax score,
//! plus the cumulative-softmax NAIVE baseline.

use crate::error::{Error, Result};
use crate::numkit::{self, ProbVector};

/// Slack on the cumulative-mass comparison of [`naive_set`]; ten entries of
/// `0.1` sum to `0.9999999999999999` in binary floating point.
const NAIVE_MASS_SLACK: f64 = 1e-9;

/// A calibrated threshold `tau_D` for error rate `alpha` on `n_cal` scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    tau: f64,
    alpha: f64,
    n_cal: usize,
}

impl CalibrationResult {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_cal(&self) -> usize {
        self.n_cal
    }

    /// A result with an explicit threshold, bypassing calibration.
    pub fn with_tau(tau: f64, alpha: f64, n_cal: usize) -> Result<Self> {
        check_alpha(alpha)?;
        if !tau.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(Self { tau, alpha, n_cal })
    }
}

/// Sorted, duplicate-free class indices. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PredictionSet(Vec<usize>);

impl PredictionSet {
    pub fn from_classes(mut classes: Vec<usize>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        Self(classes)
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.binary_search(&class).is_ok()
    }

    pub fn is_subset_of(&self, other: &PredictionSet) -> bool {
        self.0.iter().all(|c| other.contains(*c))
    }

    /// Every class whose scaled score reaches `tau`.
    pub(crate) fn thresholded(p: &ProbVector, factor: f64, tau: f64) -> Self {
        Self(
            p.as_slice()
                .iter()
                .enumerate()
                .filter(|(_, &s)| s * factor >= tau)
                .map(|(j, _)| j)
                .collect(),
        )
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// `s(x, y) = p[y]`.
pub fn score(p: &ProbVector, y: usize) -> Result<f64> {
    p.get(y).ok_or_else(|| {
        Error::invalid(format!(
            "class {y} out of range for k={}",
            p.num_classes()
        ))
    })
}

/// `tau_D` = the `alpha (1 - 1/n)` empirical quantile of the calibration scores.
pub fn calibrate(cal_scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    let n = cal_scores.len();
    if n < 2 {
        return Err(Error::invalid(format!("calibration needs n >= 2 scores, got {n}")));
    }
    let level = alpha * (1.0 - 1.0 / n as f64);
    let tau = numkit::empirical_quantile(cal_scores, level)?;
    Ok(CalibrationResult { tau, alpha, n_cal: n })
}

/// `{y : p[y] >= tau}`.
pub fn splitcp_set(p: &ProbVector, calib: &CalibrationResult) -> PredictionSet {
    PredictionSet::thresholded(p, 1.0, calib.tau)
}

/// Classes in descending probability (ascending index on ties) until the
/// cumulative mass first reaches `1 - alpha`.
pub fn naive_set(p: &ProbVector, alpha: f64) -> PredictionSet {
    let probs = p.as_slice();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let target = 1.0 - alpha - NAIVE_MASS_SLACK;
    let mut mass = 0.0;
    let mut members = Vec::new();
    for j in order {
        members.push(j);
        mass += probs[j];
        if mass >= target {
            break;
        }
    }
    PredictionSet::from_classes(members)
}
