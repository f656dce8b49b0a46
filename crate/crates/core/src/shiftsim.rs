//! Synthetic Gaussian-class data, label-preserving covariate corruptions on
//! a 0..=5 severity ladder, and continuous-shift schedules.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numkit;

pub const MAX_SEVERITY: u8 = 5;
pub const DEFAULT_SEGMENT_LEN: usize = 500;

const NOISE_PER_LEVEL: f64 = 0.25;
const CONTRAST_PER_LEVEL: f64 = 0.15;
const MEAN_SHIFT_PER_LEVEL: f64 = 0.3;
const ROTATION_DEG_PER_LEVEL: f64 = 15.0;

const GRADUAL_TRACE: [u8; 10] = [1, 2, 3, 4, 5, 5, 4, 3, 2, 1];
const SUDDEN_TRACE: [u8; 2] = [1, 5];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    /// Radius of the sphere holding the class means.
    pub separation: f64,
    /// Within-class isotropic standard deviation.
    pub stddev: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 32,
            dim: 64,
            n_train: 4000,
            n_cal: 2000,
            n_test: 5000,
            separation: 3.0,
            stddev: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs k >= 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("synthetic data needs d >= 2 dimensions"));
        }
        if self.n_train == 0 || self.n_cal == 0 || self.n_test == 0 {
            return Err(Error::invalid("every split needs n >= 1 samples"));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation must be positive"));
        }
        if !(self.stddev > 0.0 && self.stddev.is_finite()) {
            return Err(Error::invalid("stddev must be positive"));
        }
        Ok(())
    }
}

/// Class means drawn once per spec; every split samples around them.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    spec: SyntheticSpec,
    means: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub cal: Dataset,
    pub test: Dataset,
}

const TAG_MEANS: u64 = 0x6d65616e;
const TAG_TRAIN: u64 = 1;
const TAG_CAL: u64 = 2;
const TAG_TEST: u64 = 3;
const TAG_STREAM: u64 = 0x5354;

impl SyntheticTask {
    /// Means sit on a regular simplex centred at the origin when `k <= d`,
    /// otherwise at seeded uniform directions; either way at radius `separation`.
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (k, d) = (spec.num_classes, spec.dim);
        let means = if k <= d {
            let norm = ((k as f64 - 1.0) / k as f64).sqrt();
            (0..k)
                .map(|j| {
                    (0..d)
                        .map(|i| {
                            if i >= k {
                                0.0
                            } else {
                                let e = if i == j { 1.0 } else { 0.0 };
                                spec.separation * (e - 1.0 / k as f64) / norm
                            }
                        })
                        .collect()
                })
                .collect()
        } else {
            let mut rng = numkit::rng_from_seed(numkit::derive_seed(spec.seed, TAG_MEANS));
            (0..k)
                .map(|_| {
                    let v = random_unit(&mut rng, d);
                    v.into_iter().map(|x| x * spec.separation).collect()
                })
                .collect()
        };
        Ok(Self { spec, means })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// `n` points with labels balanced to within one, in shuffled order.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::invalid("cannot sample an empty dataset"));
        }
        let (k, d) = (self.spec.num_classes, self.spec.dim);
        let mut rng = numkit::rng_from_seed(seed);
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n * d);
        for &y in &labels {
            for mu in &self.means[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + self.spec.stddev * z);
            }
        }
        Dataset::new(features, d, labels, k)
    }

    pub fn splits(&self) -> Result<SyntheticSplits> {
        let s = &self.spec;
        Ok(SyntheticSplits {
            train: self.sample(s.n_train, numkit::derive_seed(s.seed, TAG_TRAIN))?,
            cal: self.sample(s.n_cal, numkit::derive_seed(s.seed, TAG_CAL))?,
            test: self.sample(s.n_test, numkit::derive_seed(s.seed, TAG_TEST))?,
        })
    }
}

/// Train, calibration and test splits sharing one set of class means.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    SyntheticTask::new(spec.clone())?.splits()
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    AdditiveNoise,
    Contrast,
    MeanShift,
    Rotation,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::AdditiveNoise,
        CorruptionKind::Contrast,
        CorruptionKind::MeanShift,
        CorruptionKind::Rotation,
    ];
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorruptionKind::AdditiveNoise => "additive_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::MeanShift => "mean_shift",
            CorruptionKind::Rotation => "rotation",
        })
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive_noise" => Ok(Self::AdditiveNoise),
            "contrast" => Ok(Self::Contrast),
            "mean_shift" => Ok(Self::MeanShift),
            "rotation" => Ok(Self::Rotation),
            other => Err(Error::Config(format!("unknown corruption '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > MAX_SEVERITY {
            return Err(Error::invalid(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { kind, severity })
    }
}

/// Apply a label-preserving covariate corruption. Severity 0 is the identity.
///
/// * additive noise: `x + 0.25 s stddev N(0, I)`
/// * contrast: `x (1 - 0.15 s)`
/// * mean shift: `x + 0.3 s separation u` for one seeded unit vector `u`
/// * rotation: rotate one seeded 2-plane by `15 s` degrees
pub fn corrupt(data: &Dataset, c: Corruption, spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if c.severity > MAX_SEVERITY {
        return Err(Error::invalid(format!("severity {} outside 0..=5", c.severity)));
    }
    if c.severity == 0 {
        return Ok(data.clone());
    }
    let s = f64::from(c.severity);
    let d = data.dim();
    let mut rng = numkit::rng_from_seed(seed);
    let mut x = data.features().to_vec();
    match c.kind {
        CorruptionKind::AdditiveNoise => {
            let sigma = NOISE_PER_LEVEL * s * spec.stddev;
            for v in &mut x {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
        CorruptionKind::Contrast => {
            let factor = 1.0 - CONTRAST_PER_LEVEL * s;
            x.iter_mut().for_each(|v| *v *= factor);
        }
        CorruptionKind::MeanShift => {
            let u = random_unit(&mut rng, d);
            let mag = MEAN_SHIFT_PER_LEVEL * s * spec.separation;
            for row in x.chunks_exact_mut(d) {
                for (v, ui) in row.iter_mut().zip(&u) {
                    *v += mag * ui;
                }
            }
        }
        CorruptionKind::Rotation => {
            let a = random_unit(&mut rng, d);
            // Gram-Schmidt a second direction against the first.
            let b = loop {
                let cand = random_unit(&mut rng, d);
                let dot: f64 = cand.iter().zip(&a).map(|(c, a)| c * a).sum();
                let ortho: Vec<f64> = cand.iter().zip(&a).map(|(c, a)| c - dot * a).collect();
                let norm = ortho.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    break ortho.into_iter().map(|v| v / norm).collect::<Vec<f64>>();
                }
            };
            let theta = (ROTATION_DEG_PER_LEVEL * s).to_radians();
            let (sin, cos) = theta.sin_cos();
            for row in x.chunks_exact_mut(d) {
                let pa: f64 = row.iter().zip(&a).map(|(v, a)| v * a).sum();
                let pb: f64 = row.iter().zip(&b).map(|(v, b)| v * b).sum();
                let na = cos * pa - sin * pb;
                let nb = sin * pa + cos * pb;
                for ((v, ai), bi) in row.iter_mut().zip(&a).zip(&b) {
                    *v += (na - pa) * ai + (nb - pb) * bi;
                }
            }
        }
    }
    data.with_features(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    Stationary(u8),
    /// 1,2,3,4,5,5,4,3,2,1 repeated.
    Gradual,
    /// 1,5 repeated.
    Sudden,
}

impl ShiftMode {
    pub fn severity_of_segment(&self, segment: usize) -> u8 {
        match self {
            ShiftMode::Stationary(s) => *s,
            ShiftMode::Gradual => GRADUAL_TRACE[segment % GRADUAL_TRACE.len()],
            ShiftMode::Sudden => SUDDEN_TRACE[segment % SUDDEN_TRACE.len()],
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShiftMode::Stationary(s) => write!(f, "stationary({s})"),
            ShiftMode::Gradual => f.write_str("gradual"),
            ShiftMode::Sudden => f.write_str("sudden"),
        }
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradual" => Ok(Self::Gradual),
            "sudden" => Ok(Self::Sudden),
            _ => {
                let inner = s
                    .strip_prefix("stationary(")
                    .and_then(|r| r.strip_suffix(')'))
                    .or_else(|| s.strip_prefix("stationary:"))
                    .ok_or_else(|| Error::Config(format!("unknown shift mode '{s}'")))?;
                let sev: u8 = inner
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad severity in '{s}'")))?;
                if sev > MAX_SEVERITY {
                    return Err(Error::Config(format!("severity {sev} outside 0..=5")));
                }
                Ok(Self::Stationary(sev))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSchedule {
    pub mode: ShiftMode,
    pub segment_len: usize,
    pub pool: Vec<CorruptionKind>,
    pub seed: u64,
}

impl Default for ShiftSchedule {
    fn default() -> Self {
        Self {
            mode: ShiftMode::Stationary(0),
            segment_len: DEFAULT_SEGMENT_LEN,
            pool: CorruptionKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// A corrupted stream with per-point severity and corruption kind.
#[derive(Debug, Clone)]
pub struct ShiftStream {
    pub data: Dataset,
    pub severities: Vec<u8>,
    pub kinds: Vec<CorruptionKind>,
}

/// Unroll `schedule` into `total` points: each segment draws a kind from the
/// pool, fresh clean samples, and the schedule's severity for that segment.
pub fn schedule_stream(task: &SyntheticTask, schedule: &ShiftSchedule, total: usize) -> Result<ShiftStream> {
    if total == 0 {
        return Err(Error::invalid("stream needs at least one point"));
    }
    if schedule.segment_len == 0 {
        return Err(Error::invalid("segment length must be >= 1"));
    }
    if schedule.pool.is_empty() {
        return Err(Error::invalid("corruption pool is empty"));
    }
    let spec = task.spec();
    let mut features = Vec::with_capacity(total * spec.dim);
    let mut labels = Vec::with_capacity(total);
    let mut severities = Vec::with_capacity(total);
    let mut kinds = Vec::with_capacity(total);
    let mut segment = 0usize;
    while labels.len() < total {
        let len = schedule.segment_len.min(total - labels.len());
        let seg_seed = numkit::derive_seed(schedule.seed, segment as u64);
        let mut rng = numkit::rng_from_seed(seg_seed);
        let kind = schedule.pool[rng.random_range(0..schedule.pool.len())];
        let severity = schedule.mode.severity_of_segment(segment);
        let clean = task.sample(len, numkit::derive_seed(spec.seed ^ TAG_STREAM, seg_seed))?;
        let shifted = corrupt(&clean, Corruption::new(kind, severity)?, spec, numkit::derive_seed(seg_seed, 1))?;
        features.extend_from_slice(shifted.features());
        labels.extend_from_slice(shifted.labels());
        severities.extend(std::iter::repeat_n(severity, len));
        kinds.extend(std::iter::repeat_n(kind, len));
        segment += 1;
    }
    Ok(ShiftStream {
        data: Dataset::new(features, spec.dim, labels, spec.num_classes)?,
        severities,
        kinds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, train_supervised, TrainConfig};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            dim: 6,
            n_train: 400,
            n_cal: 100,
            n_test: 200,
            separation: 4.0,
            stddev: 0.5,
            seed: 9,
        }
    }

    #[test]
    fn separable_data_is_learnable() {
        let splits = generate(&small_spec()).unwrap();
        let out = train_supervised(&splits.train, &TrainConfig { epochs: 10, ..Default::default() }).unwrap();
        assert!(accuracy(&out.params, &splits.test).unwrap() >= 0.95);
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.test, b.test);
        let mut counts = [0usize; 4];
        a.train.labels().iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_ne!(a.cal, a.test);
    }

    #[test]
    fn means_on_sphere() {
        for spec in [small_spec(), SyntheticSpec { num_classes: 9, dim: 3, ..small_spec() }] {
            let task = SyntheticTask::new(spec.clone()).unwrap();
            for m in task.means() {
                let r = m.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((r - spec.separation).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_sized_spec_rejected() {
        let spec = SyntheticSpec { n_test: 0, ..small_spec() };
        assert!(generate(&spec).is_err());
        let task = SyntheticTask::new(small_spec()).unwrap();
        assert!(task.sample(0, 1).is_err());
    }

    #[test]
    fn severity_zero_is_identity() {
        let spec = small_spec();
        let data = generate(&spec).unwrap().test;
        for kind in CorruptionKind::ALL {
            let out = corrupt(&data, Corruption::new(kind, 0).unwrap(), &spec, 3).unwrap();
            assert_eq!(out, data);
        }
    }

    #[test]
    fn contrast_five_quarters_coordinates() {
        let spec = small_spec();
        let data = generate(&spec).unwrap().test;
        let out = corrupt(&data, Corruption::new(CorruptionKind::Contrast, 5).unwrap(), &spec, 3).unwrap();
        for (a, b) in out.features().iter().zip(data.features()) {
            assert!((a - 0.25 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn corruptions_keep_labels_and_are_seeded() {
        let spec = small_spec();
        let data = generate(&spec).unwrap().test;
        for kind in CorruptionKind::ALL {
            let c = Corruption::new(kind, 3).unwrap();
            let a = corrupt(&data, c, &spec, 11).unwrap();
            let b = corrupt(&data, c, &spec, 11).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.labels(), data.labels());
            assert_ne!(a.features(), data.features());
        }
    }

    #[test]
    fn rotation_preserves_norms() {
        let spec = small_spec();
        let data = generate(&spec).unwrap().test;
        let out = corrupt(&data, Corruption::new(CorruptionKind::Rotation, 4).unwrap(), &spec, 5).unwrap();
        for (a, b) in out.rows().zip(data.rows()) {
            let na: f64 = a.iter().map(|v| v * v).sum();
            let nb: f64 = b.iter().map(|v| v * v).sum();
            assert!((na - nb).abs() < 1e-9 * nb.max(1.0));
        }
    }

    #[test]
    fn mean_shift_moves_every_row_by_the_same_vector() {
        let spec = small_spec();
        let data = generate(&spec).unwrap().test;
        let out = corrupt(&data, Corruption::new(CorruptionKind::MeanShift, 2).unwrap(), &spec, 5).unwrap();
        let delta0: Vec<f64> = out.row(0).iter().zip(data.row(0)).map(|(a, b)| a - b).collect();
        let norm = delta0.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 2.0 * 0.3 * spec.separation).abs() < 1e-9);
        for i in 1..data.len() {
            for (j, (a, b)) in out.row(i).iter().zip(data.row(i)).enumerate() {
                assert!((a - b - delta0[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn schedule_traces() {
        let task = SyntheticTask::new(small_spec()).unwrap();
        let gradual = ShiftSchedule { mode: ShiftMode::Gradual, segment_len: 100, ..Default::default() };
        let s = schedule_stream(&task, &gradual, 1000).unwrap();
        let expected: Vec<u8> = [1, 2, 3, 4, 5, 5, 4, 3, 2, 1]
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, 100))
            .collect();
        assert_eq!(s.severities, expected);

        let sudden = ShiftSchedule { mode: ShiftMode::Sudden, segment_len: 100, ..Default::default() };
        let s = schedule_stream(&task, &sudden, 450).unwrap();
        let seg: Vec<u8> = s.severities.chunks(100).map(|c| c[0]).collect();
        assert_eq!(seg, vec![1, 5, 1, 5, 1]);
        assert_eq!(s.data.len(), 450);

        let clean = ShiftSchedule { mode: ShiftMode::Stationary(0), segment_len: 50, ..Default::default() };
        let s = schedule_stream(&task, &clean, 120).unwrap();
        assert!(s.severities.iter().all(|&v| v == 0));
    }

    #[test]
    fn shift_mode_parsing() {
        assert_eq!("gradual".parse::<ShiftMode>().unwrap(), ShiftMode::Gradual);
        assert_eq!("stationary(3)".parse::<ShiftMode>().unwrap(), ShiftMode::Stationary(3));
        assert_eq!("stationary:2".parse::<ShiftMode>().unwrap(), ShiftMode::Stationary(2));
        assert!("stationary(7)".parse::<ShiftMode>().is_err());
        assert_eq!(ShiftMode::Stationary(4).to_string().parse::<ShiftMode>().unwrap(), ShiftMode::Stationary(4));
    }
}
