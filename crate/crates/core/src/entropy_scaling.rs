//! Entropy-scaled conformal prediction (ECP).
//!
//! The base model's uncertainty is summarised over the whole unlabeled test
//! set by a single quantile `u_test` of per-point uncertainty values. Scores
//! are inflated by `max(1, f(u_test))` with `f(u) = u^order`, and the
//! calibrated threshold `tau_D` is kept fixed, so sets can only grow relative
//! to split CP.
//!
//! `f` is applied before the clamp. For `u_test >= 1` and `order >= 1` this is
//! the same as clamping first; below 1 both give a factor of exactly 1.

use std::fmt;
use std::str::FromStr;

use crate::conformal::{self, CalibrationResult, PredictionSet};
use crate::error::{Error, Result};
use crate::numkit::{self, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UncertaintyMeasure {
    #[default]
    Entropy,
    /// Population (divide-by-k) variance of the softmax entries.
    SoftmaxVariance,
    OneMinusMax,
}

impl UncertaintyMeasure {
    pub fn evaluate(&self, p: &ProbVector) -> f64 {
        let v = p.as_slice();
        match self {
            UncertaintyMeasure::Entropy => numkit::entropy(p),
            UncertaintyMeasure::SoftmaxVariance => {
                let k = v.len() as f64;
                let mean = v.iter().sum::<f64>() / k;
                v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k
            }
            UncertaintyMeasure::OneMinusMax => (1.0 - p.max_prob()).max(0.0),
        }
    }
}

impl fmt::Display for UncertaintyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UncertaintyMeasure::Entropy => "entropy",
            UncertaintyMeasure::SoftmaxVariance => "softmax_variance",
            UncertaintyMeasure::OneMinusMax => "one_minus_max",
        })
    }
}

impl FromStr for UncertaintyMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "softmax_variance" => Ok(Self::SoftmaxVariance),
            "one_minus_max" => Ok(Self::OneMinusMax),
            other => Err(Error::Config(format!("unknown uncertainty measure '{other}'"))),
        }
    }
}

/// Uncertainty measure, polynomial order of `f`, and quantile level `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingSpec {
    measure: UncertaintyMeasure,
    order: f64,
    beta: f64,
}

impl ScalingSpec {
    pub fn new(measure: UncertaintyMeasure, order: f64, beta: f64) -> Result<Self> {
        if !(order.is_finite() && order >= 1.0) {
            return Err(Error::invalid(format!("scaling order must be >= 1, got {order}")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1), got {beta}")));
        }
        Ok(Self { measure, order, beta })
    }

    /// Entropy measure with `beta = 1 - alpha`.
    pub fn for_alpha(alpha: f64, order: f64) -> Result<Self> {
        Self::new(UncertaintyMeasure::Entropy, order, 1.0 - alpha)
    }

    pub fn measure(&self) -> UncertaintyMeasure {
        self.measure
    }

    pub fn order(&self) -> f64 {
        self.order
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn with_beta(self, beta: f64) -> Result<Self> {
        Self::new(self.measure, self.order, beta)
    }

    pub fn with_order(self, order: f64) -> Result<Self> {
        Self::new(self.measure, order, self.beta)
    }
}

/// Per-point uncertainties and their `beta`-quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    values: Vec<f64>,
    u_test: f64,
    spec: ScalingSpec,
}

impl EntropyProfile {
    pub fn from_probs(probs: &[ProbVector], spec: ScalingSpec) -> Result<Self> {
        Self::from_values(uncertainty_values(probs, spec.measure), spec)
    }

    pub fn from_values(values: Vec<f64>, spec: ScalingSpec) -> Result<Self> {
        let u_test = entropy_quantile(&values, spec.beta)?;
        Ok(Self { values, u_test, spec })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn u_test(&self) -> f64 {
        self.u_test
    }

    pub fn spec(&self) -> ScalingSpec {
        self.spec
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn factor(&self) -> f64 {
        scale_factor(self.u_test, &self.spec)
    }
}

pub fn uncertainty_values(probs: &[ProbVector], measure: UncertaintyMeasure) -> Vec<f64> {
    probs.iter().map(|p| measure.evaluate(p)).collect()
}

/// `u_test`: the `beta` empirical quantile of the uncertainty values.
pub fn entropy_quantile(values: &[f64], beta: f64) -> Result<f64> {
    numkit::empirical_quantile(values, beta)
}

/// `max(1, u_test^order)`.
pub fn scale_factor(u_test: f64, spec: &ScalingSpec) -> f64 {
    u_test.max(0.0).powf(spec.order).max(1.0)
}

/// `{y : p[y] * factor >= tau_D}`.
pub fn ecp_set(p: &ProbVector, calib: &CalibrationResult, factor: f64) -> PredictionSet {
    PredictionSet::thresholded(p, factor.max(1.0), calib.tau())
}

/// ECP sets for every point: profile, then one shared factor.
pub fn ecp_sets(probs: &[ProbVector], calib: &CalibrationResult, spec: ScalingSpec) -> Result<(Vec<PredictionSet>, EntropyProfile)> {
    let profile = EntropyProfile::from_probs(probs, spec)?;
    let factor = profile.factor();
    let sets = probs.iter().map(|p| ecp_set(p, calib, factor)).collect();
    Ok((sets, profile))
}

/// Post-hoc comparison of `tau_D` with the shifted true-label score level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauTestDiagnostic {
    /// Lower quantile at level `alpha (1 - 1/N)`, mirroring [`conformal::calibrate`].
    pub tau_test: f64,
    /// `tau_D / tau_test`; `+inf` when `tau_test == 0`.
    pub ratio: f64,
    /// Upper quantile at level `1 - alpha`.
    pub tau_test_upper: f64,
    pub ratio_upper: f64,
}

fn safe_ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

pub fn tau_test_diagnostic(true_label_scores: &[f64], alpha: f64, tau_d: f64) -> Result<TauTestDiagnostic> {
    if true_label_scores.is_empty() {
        return Err(Error::invalid("tau_test needs at least one labeled test score"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let n = true_label_scores.len() as f64;
    // A single point has alpha (1 - 1/N) = 0; fall back to its own score.
    let lower_level = (alpha * (1.0 - 1.0 / n)).max(f64::MIN_POSITIVE);
    let tau_test = numkit::empirical_quantile(true_label_scores, lower_level)?;
    let tau_test_upper = numkit::empirical_quantile(true_label_scores, 1.0 - alpha)?;
    Ok(TauTestDiagnostic {
        tau_test,
        ratio: safe_ratio(tau_d, tau_test),
        tau_test_upper,
        ratio_upper: safe_ratio(tau_d, tau_test_upper),
    })
}

/// Sanity helper used by tests and the harness: split CP on the same points.
pub fn splitcp_sets(probs: &[ProbVector], calib: &CalibrationResult) -> Vec<PredictionSet> {
    probs.iter().map(|p| conformal::splitcp_set(p, calib)).collect()
}
