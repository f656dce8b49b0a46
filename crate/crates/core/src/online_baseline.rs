//! Supervised online baseline: adaptive conformal inference on the split-CP
//! threshold, fed the true label after each prediction.

use crate::conformal::{self, CalibrationResult, PredictionSet};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, PointContext};
use crate::numkit::{self, ProbVector};

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineState {
    pub alpha_t: f64,
    pub gamma: f64,
    cal_scores: Vec<f64>,
    max_score: f64,
}

impl OnlineState {
    pub fn new(cal_scores: Vec<f64>, gamma: f64, alpha_start: f64) -> Result<Self> {
        if cal_scores.len() < 2 {
            return Err(Error::invalid("ACI needs at least 2 calibration scores"));
        }
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid(format!("gamma must be >= 0, got {gamma}")));
        }
        let max_score = cal_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            alpha_t: alpha_start.clamp(0.0, 1.0),
            gamma,
            cal_scores,
            max_score,
        })
    }

    /// Threshold for the current `alpha_t`: 0 at `alpha_t = 0`, the largest
    /// calibration score at `alpha_t = 1`, otherwise the split-CP quantile.
    pub fn threshold(&self) -> Result<f64> {
        if self.alpha_t <= 0.0 {
            return Ok(0.0);
        }
        if self.alpha_t >= 1.0 {
            return Ok(self.max_score);
        }
        let n = self.cal_scores.len() as f64;
        let level = (self.alpha_t * (1.0 - 1.0 / n)).max(f64::MIN_POSITIVE);
        numkit::empirical_quantile(&self.cal_scores, level)
    }
}

/// `clamp(alpha_t + gamma (alpha_target - err), 0, 1)`, `err = 1` on a miss.
pub fn aci_step(alpha_t: f64, miss: bool, gamma: f64, alpha_target: f64) -> f64 {
    let err = if miss { 1.0 } else { 0.0 };
    (alpha_t + gamma * (alpha_target - err)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct AciOutcome {
    pub sets: Vec<PredictionSet>,
    pub alphas: Vec<f64>,
    pub thresholds: Vec<f64>,
}

/// Run ACI over a labeled stream: predict with the current threshold, then
/// reveal the label and update `alpha_t`.
pub fn aci_sets(
    stream: &[(ProbVector, usize)],
    cal_scores: &[f64],
    gamma: f64,
    alpha_target: f64,
) -> Result<AciOutcome> {
    if stream.is_empty() {
        return Err(Error::invalid("ACI stream must be non-empty"));
    }
    let mut state = OnlineState::new(cal_scores.to_vec(), gamma, alpha_target)?;
    let mut out = AciOutcome {
        sets: Vec::with_capacity(stream.len()),
        alphas: Vec::with_capacity(stream.len()),
        thresholds: Vec::with_capacity(stream.len()),
    };
    for (p, y) in stream {
        let tau = state.threshold()?;
        let calib = CalibrationResult::with_tau(tau, alpha_target, cal_scores.len())?;
        let set = conformal::splitcp_set(p, &calib);
        let miss = !set.contains(*y);
        out.alphas.push(state.alpha_t);
        out.thresholds.push(tau);
        out.sets.push(set);
        state.alpha_t = aci_step(state.alpha_t, miss, state.gamma, alpha_target);
    }
    Ok(out)
}

pub fn aci_run(
    stream: &[(ProbVector, usize)],
    cal_scores: &[f64],
    gamma: f64,
    alpha_target: f64,
    window: usize,
) -> Result<EvalReport> {
    let out = aci_sets(stream, cal_scores, gamma, alpha_target)?;
    let labels: Vec<usize> = stream.iter().map(|(_, y)| *y).collect();
    EvalReport::build("aci", "stream", 0, alpha_target, window, &out.sets, &labels, PointContext::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use rand::Rng;

    #[test]
    fn step_examples() {
        assert!((aci_step(0.1, true, 0.01, 0.1) - (0.1 - 0.01 * 0.9)).abs() < 1e-15);
        assert!((aci_step(0.1, false, 0.01, 0.1) - 0.101).abs() < 1e-15);
        assert_eq!(aci_step(0.3, true, 0.0, 0.1), 0.3);
        assert_eq!(aci_step(0.0, true, 0.5, 0.1), 0.0);
        assert_eq!(aci_step(0.99, false, 0.5, 0.1), 1.0);
        // err = alpha_target on average leaves alpha fixed in expectation.
        let drift = 0.9 * (aci_step(0.2, false, 0.01, 0.1) - 0.2) + 0.1 * (aci_step(0.2, true, 0.01, 0.1) - 0.2);
        assert!(drift.abs() < 1e-15);
    }

    #[test]
    fn threshold_extremes() {
        let mut s = OnlineState::new(vec![0.2, 0.9, 0.5], 0.01, 0.0).unwrap();
        assert_eq!(s.threshold().unwrap(), 0.0);
        s.alpha_t = 1.0;
        assert_eq!(s.threshold().unwrap(), 0.9);
    }

    fn uniform_stream(n: usize, k: usize, seed: u64) -> (Vec<(ProbVector, usize)>, Vec<f64>) {
        // Exchangeable: the label's score and the calibration scores share a law.
        let mut rng = numkit::rng_from_seed(seed);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = numkit::softmax(&z, 1.0).unwrap();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = k - 1;
            for (j, v) in p.as_slice().iter().enumerate() {
                acc += v;
                if u < acc {
                    y = j;
                    break;
                }
            }
            (p, y)
        };
        let cal: Vec<f64> = (0..1000).map(|_| { let (p, y) = draw(&mut rng); p.as_slice()[y] }).collect();
        let stream = (0..n).map(|_| draw(&mut rng)).collect();
        (stream, cal)
    }

    #[test]
    fn zero_gamma_is_splitcp() {
        let (stream, cal) = uniform_stream(500, 5, 2);
        let out = aci_sets(&stream, &cal, 0.0, 0.1).unwrap();
        let calib = conformal::calibrate(&cal, 0.1).unwrap();
        for ((p, _), s) in stream.iter().zip(&out.sets) {
            assert_eq!(*s, conformal::splitcp_set(p, &calib));
        }
    }

    #[test]
    fn long_run_coverage_hits_target() {
        let (stream, cal) = uniform_stream(10_000, 5, 3);
        let r = aci_run(&stream, &cal, 0.005, 0.1, 128).unwrap();
        assert!((r.coverage - 0.9).abs() <= 0.02, "coverage {}", r.coverage);
    }

    #[test]
    fn adversarial_stream_stays_clamped() {
        // First half: the label never gets mass; second half: label is argmax.
        let k = 4;
        let mut stream = Vec::new();
        for i in 0..2000 {
            let p = ProbVector::new(vec![0.85, 0.05, 0.05, 0.05]).unwrap();
            let y = if i < 1000 { 3 } else { 0 };
            stream.push((p, y));
        }
        let cal: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let out = aci_sets(&stream, &cal, 0.05, 0.1).unwrap();
        assert!(out.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        let labels: Vec<usize> = stream.iter().map(|(_, y)| *y).collect();
        let cov = metrics::coverage(&out.sets, &labels).unwrap();
        // Misses in the first half push alpha_t down until the full set is emitted.
        assert!(cov > 0.8, "coverage {cov}");
        assert!(out.sets[..1000].iter().any(|s| s.len() == k));
    }
}
