//! Test-time adaptation by entropy minimisation (Tent and ETA), and the
//! EaCP pipeline built on it.
//!
//! Each batch receives exactly one SGD-with-momentum step. ETA additionally
//! drops high-entropy samples (`h >= E0`), drops samples whose softmax output
//! is nearly parallel to a moving average of previously retained outputs
//! (cosine similarity above `1 - epsilon`), and weights the survivors by
//! `exp(E0 - h)`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::conformal::{CalibrationResult, PredictionSet};
use crate::entropy_scaling::{self, EntropyProfile, ScalingSpec};
use crate::error::{Error, Result};
use crate::model::{self, ClassifierParams, Gradients, ParamSubset};
use crate::numkit::{self, ProbVector};

/// Decay of the exponential moving average used by the redundancy filter.
pub const MEMORY_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TtaMethod {
    Tent,
    #[default]
    Eta,
}

impl fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TtaMethod::Tent => "tent",
            TtaMethod::Eta => "eta",
        })
    }
}

impl FromStr for TtaMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tent" => Ok(Self::Tent),
            "eta" => Ok(Self::Eta),
            other => Err(Error::Config(format!("unknown TTA method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaConfig {
    pub method: TtaMethod,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Entropy margin `E0`; `None` means `0.4 ln k`.
    pub entropy_margin: Option<f64>,
    pub redundancy_epsilon: f64,
    pub subset: ParamSubset,
    /// Passes over the test data in offline mode.
    pub passes: usize,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            method: TtaMethod::Eta,
            learning_rate: 0.00025,
            momentum: 0.9,
            batch_size: 64,
            entropy_margin: None,
            redundancy_epsilon: 0.05,
            subset: ParamSubset::FinalLayer,
            passes: 1,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("tta learning rate must be >= 0".into()));
        }
        if !(self.momentum.is_finite() && self.momentum >= 0.0) {
            return Err(Error::Config("tta momentum must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("tta batch size must be >= 1".into()));
        }
        if let Some(e0) = self.entropy_margin {
            if !(e0 > 0.0) {
                return Err(Error::Config("entropy margin E0 must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.redundancy_epsilon) {
            return Err(Error::Config("redundancy epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn margin_for(&self, num_classes: usize) -> f64 {
        self.entropy_margin
            .unwrap_or_else(|| 0.4 * (num_classes as f64).ln())
    }
}

/// Mutable state carried across batches of one adaptation run.
#[derive(Debug, Clone, Default)]
pub struct AdaptationState {
    /// Moving average of retained softmax outputs; empty until first retention.
    pub memory: Option<Vec<f64>>,
    pub velocity: Option<Gradients>,
    pub batches_seen: usize,
    pub steps_taken: usize,
    pub skipped_steps: usize,
    pub retained_total: usize,
}

impl AdaptationState {
    pub fn new() -> Self {
        Self::default()
    }
}

fn apply_step(params: &mut ClassifierParams, mut grad: Gradients, cfg: &TtaConfig, state: &mut AdaptationState) -> Result<()> {
    grad.restrict_to(cfg.subset);
    if !grad.is_finite() {
        state.skipped_steps += 1;
        return Ok(());
    }
    let velocity = state
        .velocity
        .get_or_insert_with(|| Gradients::zeros_like(params));
    model::sgd_momentum_step(params, &grad, velocity, cfg.learning_rate, cfg.momentum)?;
    state.steps_taken += 1;
    Ok(())
}

/// One unweighted entropy-minimisation step on the batch.
pub fn tent_batch_update(
    params: &mut ClassifierParams,
    batch: &[&[f64]],
    cfg: &TtaConfig,
    state: &mut AdaptationState,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("TTA batch must be non-empty"));
    }
    let weights = vec![1.0; batch.len()];
    let (_, grad) = model::entropy_loss_and_grad(params, batch, &weights)?;
    state.batches_seen += 1;
    state.retained_total += batch.len();
    apply_step(params, grad, cfg, state)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).min(1.0)
    }
}

/// Outcome of the ETA sample-selection rule on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaSelection {
    pub retained: Vec<usize>,
    pub weights: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Apply the entropy filter, redundancy filter and `exp(E0 - h)` weighting.
pub fn eta_select(probs: &[ProbVector], margin: f64, epsilon: f64, memory: Option<&[f64]>) -> EtaSelection {
    let entropies: Vec<f64> = probs.iter().map(numkit::entropy).collect();
    let cutoff = 1.0 - epsilon;
    let mut retained = Vec::new();
    let mut weights = Vec::new();
    for (i, (p, &h)) in probs.iter().zip(&entropies).enumerate() {
        if h >= margin {
            continue;
        }
        if let Some(m) = memory {
            if cosine(p.as_slice(), m) > cutoff {
                continue;
            }
        }
        retained.push(i);
        weights.push((margin - h).exp());
    }
    EtaSelection {
        retained,
        weights,
        entropies,
    }
}

fn update_memory(memory: &mut Option<Vec<f64>>, probs: &[ProbVector], retained: &[usize]) {
    if retained.is_empty() {
        return;
    }
    let k = probs[retained[0]].num_classes();
    let mut mean = vec![0.0; k];
    for &i in retained {
        for (m, p) in mean.iter_mut().zip(probs[i].as_slice()) {
            *m += p;
        }
    }
    let n = retained.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    match memory {
        Some(avg) => {
            for (a, m) in avg.iter_mut().zip(&mean) {
                *a = MEMORY_DECAY * *a + (1.0 - MEMORY_DECAY) * m;
            }
        }
        None => *memory = Some(mean),
    }
}

/// One ETA step; returns how many samples contributed to the gradient.
pub fn eta_batch_update(
    params: &mut ClassifierParams,
    batch: &[&[f64]],
    cfg: &TtaConfig,
    state: &mut AdaptationState,
) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::invalid("TTA batch must be non-empty"));
    }
    let probs = params.predict_proba_rows(batch.iter().copied())?;
    let margin = cfg.margin_for(params.num_classes);
    let sel = eta_select(&probs, margin, cfg.redundancy_epsilon, state.memory.as_deref());
    state.batches_seen += 1;
    if sel.retained.is_empty() {
        return Ok(0);
    }
    let rows: Vec<&[f64]> = sel.retained.iter().map(|&i| batch[i]).collect();
    // The loss is normalised by the weight sum, so rescaling by the largest
    // weight leaves it unchanged and keeps exp() finite for wide margins.
    let h_min = sel.retained.iter().map(|&i| sel.entropies[i]).fold(f64::INFINITY, f64::min);
    let scaled: Vec<f64> = sel.retained.iter().map(|&i| (h_min - sel.entropies[i]).exp()).collect();
    let (_, grad) = model::entropy_loss_and_grad(params, &rows, &scaled)?;
    apply_step(params, grad, cfg, state)?;
    update_memory(&mut state.memory, &probs, &sel.retained);
    state.retained_total += sel.retained.len();
    Ok(sel.retained.len())
}

/// Dispatch on `cfg.method`; returns the number of samples used.
pub fn batch_update(
    params: &mut ClassifierParams,
    batch: &[&[f64]],
    cfg: &TtaConfig,
    state: &mut AdaptationState,
) -> Result<usize> {
    match cfg.method {
        TtaMethod::Tent => tent_batch_update(params, batch, cfg, state).map(|_| batch.len()),
        TtaMethod::Eta => eta_batch_update(params, batch, cfg, state),
    }
}

/// Adapt over `rows` in order, batch by batch, for `cfg.passes` passes.
pub fn adapt(mut params: ClassifierParams, rows: &[&[f64]], cfg: &TtaConfig) -> Result<(ClassifierParams, AdaptationState)> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(Error::invalid("cannot adapt on an empty test set"));
    }
    let mut state = AdaptationState::new();
    for _ in 0..cfg.passes {
        for batch in rows.chunks(cfg.batch_size) {
            batch_update(&mut params, batch, cfg, &mut state)?;
        }
    }
    Ok((params, state))
}

#[derive(Debug, Clone)]
pub struct EacpOutcome {
    pub params: ClassifierParams,
    pub state: AdaptationState,
    pub probs: Vec<ProbVector>,
    pub sets: Vec<PredictionSet>,
    pub profile: EntropyProfile,
}

/// Offline EaCP: adapt on the whole unlabeled test set, then recompute every
/// softmax output, the quantile `u_test`, and the scaled sets.
pub fn eacp_offline(
    params: ClassifierParams,
    rows: &[&[f64]],
    calib: &CalibrationResult,
    spec: ScalingSpec,
    cfg: &TtaConfig,
) -> Result<EacpOutcome> {
    let (params, state) = adapt(params, rows, cfg)?;
    let probs = params.predict_proba_rows(rows.iter().copied())?;
    let (sets, profile) = entropy_scaling::ecp_sets(&probs, calib, spec)?;
    Ok(EacpOutcome {
        params,
        state,
        probs,
        sets,
        profile,
    })
}

/// How the streaming `u_test` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantileMode {
    /// Over every uncertainty value seen so far.
    #[default]
    Running,
    /// Over the most recent `w` values.
    Window(usize),
}

impl fmt::Display for QuantileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantileMode::Running => f.write_str("running_quantile"),
            QuantileMode::Window(w) => write!(f, "window_quantile({w})"),
        }
    }
}

pub const DEFAULT_QUANTILE_WINDOW: usize = 1024;

/// Sorted multiset of recent values supporting order-statistic queries.
#[derive(Debug, Clone, Default)]
pub struct QuantileTracker {
    window: Option<usize>,
    arrival: VecDeque<f64>,
    sorted: Vec<f64>,
}

impl QuantileTracker {
    pub fn new(mode: QuantileMode) -> Result<Self> {
        let window = match mode {
            QuantileMode::Running => None,
            QuantileMode::Window(0) => return Err(Error::invalid("quantile window must be >= 1")),
            QuantileMode::Window(w) => Some(w),
        };
        Ok(Self {
            window,
            ..Default::default()
        })
    }

    pub fn push(&mut self, value: f64) {
        let at = self.sorted.partition_point(|v| v.total_cmp(&value).is_lt());
        self.sorted.insert(at, value);
        if let Some(w) = self.window {
            self.arrival.push_back(value);
            if self.arrival.len() > w {
                let old = self.arrival.pop_front().expect("non-empty window");
                let idx = self.sorted.partition_point(|v| v.total_cmp(&old).is_lt());
                self.sorted.remove(idx);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn quantile(&self, level: f64) -> Result<f64> {
        if self.sorted.is_empty() {
            return Err(Error::invalid("quantile of an empty tracker"));
        }
        if !(level > 0.0 && level <= 1.0) {
            return Err(Error::invalid(format!("quantile level must lie in (0, 1], got {level}")));
        }
        Ok(self.sorted[numkit::quantile_rank(self.sorted.len(), level) - 1])
    }
}

/// Per-point output of a streaming run.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamPointOutput {
    pub set: PredictionSet,
    pub uncertainty: f64,
    pub u_test: f64,
    pub factor: f64,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub params: ClassifierParams,
    pub state: AdaptationState,
    pub points: Vec<StreamPointOutput>,
    pub mode: QuantileMode,
}

impl StreamOutcome {
    pub fn sets(&self) -> Vec<PredictionSet> {
        self.points.iter().map(|p| p.set.clone()).collect()
    }
}

/// Streaming ECP / EaCP. For each batch: forward pass, update the quantile
/// tracker with the batch's uncertainties, emit scaled sets, and only then
/// (when `cfg` is given) take the adaptation step on that batch.
pub fn eacp_streaming(
    mut params: ClassifierParams,
    rows: &[&[f64]],
    batch_size: usize,
    calib: &CalibrationResult,
    spec: ScalingSpec,
    cfg: Option<&TtaConfig>,
    mode: QuantileMode,
) -> Result<StreamOutcome> {
    if rows.is_empty() {
        return Err(Error::invalid("stream must be non-empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("stream batch size must be >= 1"));
    }
    if let Some(cfg) = cfg {
        cfg.validate()?;
    }
    let mut tracker = QuantileTracker::new(mode)?;
    let mut state = AdaptationState::new();
    let mut points = Vec::with_capacity(rows.len());
    for (b, batch) in rows.chunks(batch_size).enumerate() {
        let probs = params.predict_proba_rows(batch.iter().copied())?;
        let values = entropy_scaling::uncertainty_values(&probs, spec.measure());
        values.iter().for_each(|&v| tracker.push(v));
        let u_test = tracker.quantile(spec.beta())?;
        let factor = entropy_scaling::scale_factor(u_test, &spec);
        for (p, &v) in probs.iter().zip(&values) {
            points.push(StreamPointOutput {
                set: entropy_scaling::ecp_set(p, calib, factor),
                uncertainty: v,
                u_test,
                factor,
                batch: b,
            });
        }
        if let Some(cfg) = cfg {
            batch_update(&mut params, batch, cfg, &mut state)?;
        }
    }
    Ok(StreamOutcome {
        params,
        state,
        points,
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_model(seed: u64) -> ClassifierParams {
        let mut p = ClassifierParams::init(Architecture::Linear, 3, 4, seed).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w *= 3.0);
        p
    }

    fn rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = numkit::rng_from_seed(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn mean_entropy(p: &ClassifierParams, batch: &[&[f64]]) -> f64 {
        batch
            .iter()
            .map(|x| numkit::entropy(&p.predict_proba(x).unwrap()))
            .sum::<f64>()
            / batch.len() as f64
    }

    #[test]
    fn tent_on_saturated_model_is_stationary() {
        let mut p = ClassifierParams::init(Architecture::Linear, 3, 4, 0).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        p.layers[0].bias = vec![80.0, 0.0, 0.0, 0.0];
        let before = p.clone();
        let data = rows(8, 3, 1);
        let batch: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cfg = TtaConfig { learning_rate: 1.0, ..Default::default() };
        tent_batch_update(&mut p, &batch, &cfg, &mut AdaptationState::new()).unwrap();
        for (a, b) in p.flatten().iter().zip(before.flatten()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn tent_with_zero_lr_is_noop() {
        let mut p = random_model(2);
        let before = p.clone();
        let data = rows(8, 3, 1);
        let batch: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cfg = TtaConfig { learning_rate: 0.0, ..Default::default() };
        tent_batch_update(&mut p, &batch, &cfg, &mut AdaptationState::new()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn tent_step_reduces_batch_entropy() {
        for seed in 0..5 {
            let mut p = random_model(seed);
            let data = rows(16, 3, seed + 10);
            let batch: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
            let before = mean_entropy(&p, &batch);
            let cfg = TtaConfig {
                method: TtaMethod::Tent,
                learning_rate: 1e-3,
                subset: ParamSubset::All,
                ..Default::default()
            };
            tent_batch_update(&mut p, &batch, &cfg, &mut AdaptationState::new()).unwrap();
            assert!(mean_entropy(&p, &batch) <= before);
        }
    }

    #[test]
    fn eta_full_filtering_skips_step() {
        let mut p = ClassifierParams::init(Architecture::Linear, 3, 4, 0).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        let before = p.clone();
        let data = rows(8, 3, 1);
        let batch: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cfg = TtaConfig { learning_rate: 1.0, ..Default::default() };
        let mut state = AdaptationState::new();
        let kept = eta_batch_update(&mut p, &batch, &cfg, &mut state).unwrap();
        assert_eq!(kept, 0);
        assert_eq!(p, before);
        assert!(state.memory.is_none());
        assert_eq!(state.steps_taken, 0);
    }

    #[test]
    fn eta_select_hand_example() {
        // Two-class vectors with entropies 0.1 and 0.5 (solved by bisection).
        let with_entropy = |target: f64| {
            let (mut lo, mut hi) = (1e-12, 0.5);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                let h = numkit::entropy_of(&[mid, 1.0 - mid]);
                if h < target { lo = mid } else { hi = mid }
            }
            ProbVector::new(vec![lo, 1.0 - lo]).unwrap()
        };
        let probs = [with_entropy(0.1), with_entropy(0.5)];
        let sel = eta_select(&probs, 0.4, 0.05, None);
        assert_eq!(sel.retained, vec![0]);
        assert!((sel.weights[0] - 0.3f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn eta_redundancy_filter_uses_memory() {
        let probs = [
            ProbVector::new(vec![0.98, 0.01, 0.01]).unwrap(),
            ProbVector::new(vec![0.01, 0.98, 0.01]).unwrap(),
        ];
        let memory = [0.9, 0.05, 0.05];
        let sel = eta_select(&probs, 1.0, 0.05, Some(&memory));
        assert_eq!(sel.retained, vec![1]);
        // epsilon = 0: cutoff 1 can never be exceeded.
        let sel = eta_select(&probs, 1.0, 0.0, Some(&[0.98, 0.01, 0.01]));
        assert_eq!(sel.retained, vec![0, 1]);
    }

    #[test]
    fn eta_weights_positive_and_filtered() {
        let p = random_model(4);
        let data = rows(64, 3, 5);
        let probs: Vec<ProbVector> = data.iter().map(|x| p.predict_proba(x).unwrap()).collect();
        let margin = 0.4 * 4f64.ln();
        let sel = eta_select(&probs, margin, 0.05, Some(&[0.25; 4]));
        for (&i, &w) in sel.retained.iter().zip(&sel.weights) {
            assert!(sel.entropies[i] < margin);
            assert!(w > 0.0);
        }
    }

    #[test]
    fn eta_without_filters_tracks_tent_direction() {
        let p = random_model(6);
        let data = rows(32, 3, 7);
        let batch: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let eta = TtaConfig {
            method: TtaMethod::Eta,
            entropy_margin: Some(1e3),
            redundancy_epsilon: 0.0,
            learning_rate: 1e-3,
            momentum: 0.0,
            subset: ParamSubset::All,
            ..Default::default()
        };
        let tent = TtaConfig { method: TtaMethod::Tent, ..eta.clone() };
        let start = p.flatten();
        let mut pe = p.clone();
        let mut pt = p.clone();
        eta_batch_update(&mut pe, &batch, &eta, &mut AdaptationState::new()).unwrap();
        tent_batch_update(&mut pt, &batch, &tent, &mut AdaptationState::new()).unwrap();
        let de: Vec<f64> = pe.flatten().iter().zip(&start).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = pt.flatten().iter().zip(&start).map(|(a, b)| a - b).collect();
        // Weights still vary as exp(-h), so the directions agree only roughly.
        assert!(cosine(&de, &dt) > 0.95, "cosine {}", cosine(&de, &dt));
    }

    #[test]
    fn eacp_zero_lr_equals_ecp() {
        let p = random_model(8);
        let data = rows(300, 3, 9);
        let test: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cal = CalibrationResult::with_tau(0.2, 0.1, 100).unwrap();
        let spec = ScalingSpec::for_alpha(0.1, 2.0).unwrap();
        let cfg = TtaConfig { learning_rate: 0.0, ..Default::default() };
        let out = eacp_offline(p.clone(), &test, &cal, spec, &cfg).unwrap();
        let probs = p.predict_proba_rows(test.iter().copied()).unwrap();
        let (sets, prof) = entropy_scaling::ecp_sets(&probs, &cal, spec).unwrap();
        assert_eq!(out.sets, sets);
        assert_eq!(out.profile, prof);
        let again = eacp_offline(p, &test, &cal, spec, &TtaConfig { learning_rate: 0.01, ..cfg }).unwrap();
        let twice = eacp_offline(random_model(8), &test, &cal, spec, &TtaConfig { learning_rate: 0.01, ..Default::default() }).unwrap();
        assert_eq!(again.sets, twice.sets);
        assert_eq!(again.params, twice.params);
    }

    #[test]
    fn quantile_tracker_matches_batch_quantile() {
        let mut rng = numkit::rng_from_seed(3);
        let vals: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let mut running = QuantileTracker::new(QuantileMode::Running).unwrap();
        let mut window = QuantileTracker::new(QuantileMode::Window(37)).unwrap();
        for (i, &v) in vals.iter().enumerate() {
            running.push(v);
            window.push(v);
            for level in [0.1, 0.5, 0.9, 1.0] {
                assert_eq!(running.quantile(level).unwrap(), numkit::empirical_quantile(&vals[..=i], level).unwrap());
                let lo = (i + 1).saturating_sub(37);
                assert_eq!(window.quantile(level).unwrap(), numkit::empirical_quantile(&vals[lo..=i], level).unwrap());
            }
        }
        assert!(QuantileTracker::new(QuantileMode::Window(0)).is_err());
    }

    #[test]
    fn single_batch_stream_matches_initial_model() {
        let p = random_model(11);
        let data = rows(40, 3, 12);
        let test: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cal = CalibrationResult::with_tau(0.2, 0.1, 100).unwrap();
        let spec = ScalingSpec::for_alpha(0.1, 1.0).unwrap();
        let cfg = TtaConfig { learning_rate: 0.1, ..Default::default() };
        let out = eacp_streaming(p.clone(), &test, 64, &cal, spec, Some(&cfg), QuantileMode::Running).unwrap();
        let probs = p.predict_proba_rows(test.iter().copied()).unwrap();
        let (sets, _) = entropy_scaling::ecp_sets(&probs, &cal, spec).unwrap();
        assert_eq!(out.sets(), sets);
    }

    #[test]
    fn stationary_stream_quantile_settles() {
        let p = random_model(13);
        let data = rows(6400, 3, 14);
        let test: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cal = CalibrationResult::with_tau(0.2, 0.1, 100).unwrap();
        let spec = ScalingSpec::for_alpha(0.1, 1.0).unwrap();
        let out = eacp_streaming(p, &test, 64, &cal, spec, None, QuantileMode::Running).unwrap();
        let per_batch: Vec<f64> = out.points.chunks(64).map(|c| c[0].u_test).collect();
        let late: f64 = per_batch.windows(2).skip(80).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
        assert!(late < 0.01, "late drift {late}");
    }

    #[test]
    fn stream_predicts_before_adapting() {
        // With a huge learning rate the second batch sees a changed model, but
        // the first batch's sets must come from the initial parameters.
        let p = random_model(15);
        let data = rows(128, 3, 16);
        let test: Vec<&[f64]> = data.iter().map(|r| r.as_slice()).collect();
        let cal = CalibrationResult::with_tau(0.2, 0.1, 100).unwrap();
        let spec = ScalingSpec::for_alpha(0.1, 1.0).unwrap();
        let cfg = TtaConfig { method: TtaMethod::Tent, learning_rate: 5.0, ..Default::default() };
        let out = eacp_streaming(p.clone(), &test, 64, &cal, spec, Some(&cfg), QuantileMode::Running).unwrap();
        let first: Vec<PredictionSet> = out.points[..64].iter().map(|pt| pt.set.clone()).collect();
        let probs = p.predict_proba_rows(test[..64].iter().copied()).unwrap();
        let (expected, _) = entropy_scaling::ecp_sets(&probs, &cal, spec).unwrap();
        assert_eq!(first, expected);
        assert_ne!(out.params, p);
        assert_eq!(out.state.steps_taken, 2);
    }

    #[test]
    fn config_validation() {
        assert!(TtaConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TtaConfig { redundancy_epsilon: 1.5, ..Default::default() }.validate().is_err());
        assert!(TtaConfig { entropy_margin: Some(0.0), ..Default::default() }.validate().is_err());
        assert!((TtaConfig::default().margin_for(10) - 0.4 * 10f64.ln()).abs() < 1e-15);
    }
}
