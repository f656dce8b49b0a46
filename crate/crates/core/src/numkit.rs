//! Deterministic numeric primitives shared by every other module.
//!
//! Quantiles use the lower/inclusive order statistic: for `n` values and a
//! level `q` the result is the `ceil(q * n)`-th smallest value (1-indexed),
//! with no interpolation. Every threshold in the crate (`tau_D`, `u_test`,
//! `tau_test`) goes through [`empirical_quantile`].
//!
//! Randomness: every stochastic routine takes an explicit `u64` seed and
//! draws from [`rng_from_seed`], a ChaCha8 stream. Sub-streams are split off
//! with [`derive_seed`] (SplitMix64 mixing), so a run is bit-reproducible
//! from its root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Slack used when turning `level * n` into an order-statistic index, so that
/// products such as `0.3 * 10 = 3.0000000000000004` still select index 3.
const INDEX_SLACK: f64 = 1e-9;

/// A probability vector over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "probability vector needs k >= 2 entries, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + PROB_SUM_TOL) {
            return Err(Error::invalid("probability entries must lie in [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!(
                "probability entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(values))
    }

    /// Uniform distribution over `k` classes.
    pub fn uniform(k: usize) -> Result<Self> {
        Self::new(vec![1.0 / k as f64; k])
    }

    /// Point mass on `class` among `k` classes.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::invalid(format!("class {class} out of range for k={k}")));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self::new(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.0.get(class).copied()
    }

    pub fn max_prob(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = j;
            }
        }
        best
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite logits"));
    }
    Ok(ProbVector(softmax_unchecked(logits, temperature)))
}

/// Softmax on already-validated input. Used on hot paths inside the model.
pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// 1-indexed order statistic selected for `level` over `n` values.
pub fn quantile_rank(n: usize, level: f64) -> usize {
    let raw = level * n as f64;
    let m = (raw - INDEX_SLACK).ceil();
    (m.max(1.0) as usize).min(n)
}

/// The `ceil(level * n)`-th smallest value, no interpolation.
pub fn empirical_quantile(values: &[f64], level: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("empirical quantile of an empty sample"));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::invalid(format!(
            "quantile level must lie in (0, 1], got {level}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("quantile input contains NaN"));
    }
    let m = quantile_rank(values.len(), level);
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(m - 1, f64::total_cmp);
    Ok(*nth)
}

/// Ordinary least squares of `ln r` on `ln u`; returns `(slope, intercept)`.
pub fn linear_fit_loglog(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::invalid("log-log fit needs at least 2 points"));
    }
    if points
        .iter()
        .any(|&(u, r)| !(u > 0.0 && r > 0.0 && u.is_finite() && r.is_finite()))
    {
        return Err(Error::invalid("log-log fit needs strictly positive finite coordinates"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::invalid("log-log fit needs at least two distinct u values"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// The repo-wide generator: ChaCha8 seeded from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent sub-seed from a root seed and a stream tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
