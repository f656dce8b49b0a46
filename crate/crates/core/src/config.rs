//! Run configuration: flat `key = value` text with dotted section prefixes.
//!
//! ```text
//! # comments start with '#'
//! alpha = 0.1
//! methods = splitcp, ecp, eacp
//! tta.lr = 0.00025
//! shift.mode = stationary(3)
//! ```

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::entropy_scaling::UncertaintyMeasure;
use crate::error::{Error, Result};
use crate::io::Orientation;
use crate::metrics;
use crate::model::{Architecture, ParamSubset, TrainConfig, DEFAULT_HIDDEN};
use crate::shiftsim::{CorruptionKind, ShiftMode, SyntheticSpec, DEFAULT_SEGMENT_LEN};
use crate::tta::{QuantileMode, TtaConfig, TtaMethod, DEFAULT_QUANTILE_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Naive,
    SplitCp,
    EtaSplitCp,
    Ecp,
    Eacp,
    Aci,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Naive,
        Method::SplitCp,
        Method::EtaSplitCp,
        Method::Ecp,
        Method::Eacp,
        Method::Aci,
    ];

    /// Whether the method adapts model parameters at test time.
    pub fn adapts(&self) -> bool {
        matches!(self, Method::EtaSplitCp | Method::Eacp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Naive => "naive",
            Method::SplitCp => "splitcp",
            Method::EtaSplitCp => "eta_splitcp",
            Method::Ecp => "ecp",
            Method::Eacp => "eacp",
            Method::Aci => "aci",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Evaluation protocol on the shifted test data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalMode {
    /// Whole test set at once; `u_test` from every test point.
    #[default]
    Offline,
    /// Batches in order; `u_test` from a quantile tracker.
    Stream,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Offline => "offline",
            EvalMode::Stream => "stream",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Self::Offline),
            "stream" => Ok(Self::Stream),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Temperature {
    /// Fit by NLL on a held-out validation draw.
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temperature::Auto => f.write_str("auto"),
            Temperature::Fixed(t) => write!(f, "{t}"),
        }
    }
}

/// Where calibration and test scores come from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Input {
    #[default]
    Synthetic,
    LogitTable {
        path: PathBuf,
        /// Separate calibration table; otherwise `path` is split.
        cal_path: Option<PathBuf>,
        orientation: Orientation,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub alpha: f64,
    pub methods: Vec<Method>,
    pub order: f64,
    /// `None` means `1 - alpha`.
    pub beta: Option<f64>,
    pub measure: UncertaintyMeasure,
    pub window: usize,
    pub seeds: Vec<u64>,
    pub gamma: f64,
    pub mode: EvalMode,
    pub tta: TtaConfig,
    pub quantile: QuantileMode,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub temperature: Temperature,
    pub model_path: Option<PathBuf>,
    /// `None` picks `stationary(0)` offline and `sudden` in stream mode.
    pub shift_mode: Option<ShiftMode>,
    pub segment_len: usize,
    pub pool: Vec<CorruptionKind>,
    /// Number of test points drawn from the shift schedule; `None` means `n_test`.
    pub stream_len: Option<usize>,
    pub input: Input,
    /// Calibration fraction when one logit table is split.
    pub split: f64,
    pub dataset_name: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub per_point: bool,
    pub betas: Vec<f64>,
    pub diag_alphas: Vec<f64>,
    pub diag_range: (f64, f64),
    pub ece_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            methods: vec![Method::SplitCp, Method::Ecp, Method::Eacp],
            order: 1.0,
            beta: None,
            measure: UncertaintyMeasure::Entropy,
            window: metrics::DEFAULT_WINDOW,
            seeds: vec![0],
            gamma: 0.005,
            mode: EvalMode::Offline,
            tta: TtaConfig::default(),
            quantile: QuantileMode::Window(DEFAULT_QUANTILE_WINDOW),
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            temperature: Temperature::Auto,
            model_path: None,
            shift_mode: None,
            segment_len: DEFAULT_SEGMENT_LEN,
            pool: CorruptionKind::ALL.to_vec(),
            stream_len: None,
            input: Input::Synthetic,
            split: 0.5,
            dataset_name: None,
            output_dir: None,
            per_point: false,
            betas: vec![0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.99],
            diag_alphas: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            diag_range: metrics::DEFAULT_DIAG_ALPHA_RANGE,
            ece_bins: metrics::DEFAULT_ECE_BINS,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| value(key, s))
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

fn quantile_mode(raw: &str, current: QuantileMode) -> Result<QuantileMode> {
    match raw {
        "running" => Ok(QuantileMode::Running),
        "window" => Ok(match current {
            QuantileMode::Window(w) => QuantileMode::Window(w),
            QuantileMode::Running => QuantileMode::Window(DEFAULT_QUANTILE_WINDOW),
        }),
        other => Err(Error::Config(format!("stream.quantile: expected running or window, got '{other}'"))),
    }
}

impl RunConfig {
    /// Parse config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(key.trim(), val.trim())
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                    other => other,
                })?;
        }
        Ok(())
    }

    /// Set a single key; the same keys are used by the config file and CLI overrides.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = value(key, raw)?,
            "method" | "methods" => self.methods = list(key, raw)?,
            "order" => self.order = value(key, raw)?,
            "beta" => {
                self.beta = if raw == "auto" { None } else { Some(value(key, raw)?) };
            }
            "measure" => self.measure = value(key, raw)?,
            "window" => self.window = value(key, raw)?,
            "seed" | "seeds" => self.seeds = list(key, raw)?,
            "gamma" => self.gamma = value(key, raw)?,
            "mode" => self.mode = value(key, raw)?,

            "tta.method" => self.tta.method = value::<TtaMethod>(key, raw)?,
            "tta.lr" => self.tta.learning_rate = value(key, raw)?,
            "tta.momentum" => self.tta.momentum = value(key, raw)?,
            "tta.batch_size" => self.tta.batch_size = value(key, raw)?,
            "tta.e0" => {
                self.tta.entropy_margin = if raw == "auto" { None } else { Some(value(key, raw)?) };
            }
            "tta.epsilon" => self.tta.redundancy_epsilon = value(key, raw)?,
            "tta.subset" => {
                self.tta.subset = match raw {
                    "final_layer" => ParamSubset::FinalLayer,
                    "all" => ParamSubset::All,
                    other => return Err(Error::Config(format!("{key}: unknown subset '{other}'"))),
                }
            }
            "tta.passes" => self.tta.passes = value(key, raw)?,

            "stream.quantile" => self.quantile = quantile_mode(raw, self.quantile)?,
            "stream.window" => self.quantile = QuantileMode::Window(value(key, raw)?),

            "data.classes" => self.synthetic.num_classes = value(key, raw)?,
            "data.dim" => self.synthetic.dim = value(key, raw)?,
            "data.n_train" => self.synthetic.n_train = value(key, raw)?,
            "data.n_cal" => self.synthetic.n_cal = value(key, raw)?,
            "data.n_test" => self.synthetic.n_test = value(key, raw)?,
            "data.separation" => self.synthetic.separation = value(key, raw)?,
            "data.stddev" => self.synthetic.stddev = value(key, raw)?,

            "train.arch" => {
                self.train.architecture = match raw {
                    "linear" => Architecture::Linear,
                    "mlp" => Architecture::Mlp {
                        hidden: match self.train.architecture {
                            Architecture::Mlp { hidden } => hidden,
                            Architecture::Linear => DEFAULT_HIDDEN,
                        },
                    },
                    other => return Err(Error::Config(format!("{key}: unknown architecture '{other}'"))),
                }
            }
            "train.hidden" => self.train.architecture = Architecture::Mlp { hidden: value(key, raw)? },
            "train.epochs" => self.train.epochs = value(key, raw)?,
            "train.batch_size" => self.train.batch_size = value(key, raw)?,
            "train.lr" => self.train.learning_rate = value(key, raw)?,
            "train.momentum" => self.train.momentum = value(key, raw)?,

            "model.temperature" => {
                self.temperature = if raw == "auto" {
                    Temperature::Auto
                } else {
                    Temperature::Fixed(value(key, raw)?)
                }
            }
            "model.path" => self.model_path = Some(PathBuf::from(raw)),

            "shift.mode" => self.shift_mode = Some(value(key, raw)?),
            "shift.segment" => self.segment_len = value(key, raw)?,
            "shift.pool" => self.pool = list(key, raw)?,
            "shift.length" => self.stream_len = Some(value(key, raw)?),

            "input.logits" => match &mut self.input {
                Input::LogitTable { path, .. } => *path = PathBuf::from(raw),
                Input::Synthetic => {
                    self.input = Input::LogitTable {
                        path: PathBuf::from(raw),
                        cal_path: None,
                        orientation: Orientation::default(),
                    }
                }
            },
            "input.cal_logits" => match &mut self.input {
                Input::LogitTable { cal_path, .. } => *cal_path = Some(PathBuf::from(raw)),
                Input::Synthetic => {
                    return Err(Error::Config("input.cal_logits given without input.logits".into()))
                }
            },
            "input.orientation" => match &mut self.input {
                Input::LogitTable { orientation, .. } => *orientation = value(key, raw)?,
                Input::Synthetic => {
                    return Err(Error::Config("input.orientation given without input.logits".into()))
                }
            },
            "input.split" => self.split = value(key, raw)?,
            "input.name" => self.dataset_name = Some(raw.to_string()),

            "output.dir" => self.output_dir = Some(PathBuf::from(raw)),
            "output.per_point" => self.per_point = value(key, raw)?,

            "sweep.betas" => self.betas = list(key, raw)?,
            "diag.alphas" => self.diag_alphas = list(key, raw)?,
            "diag.alpha_min" => self.diag_range.0 = value(key, raw)?,
            "diag.alpha_max" => self.diag_range.1 = value(key, raw)?,
            "ece.bins" => self.ece_bins = value(key, raw)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn effective_beta(&self) -> f64 {
        self.beta.unwrap_or(1.0 - self.alpha)
    }

    pub fn effective_shift(&self) -> ShiftMode {
        self.shift_mode.unwrap_or(match self.mode {
            EvalMode::Offline => ShiftMode::Stationary(0),
            EvalMode::Stream => ShiftMode::Sudden,
        })
    }

    pub fn uses_logit_table(&self) -> bool {
        matches!(self.input, Input::LogitTable { .. })
    }

    /// Reject contradictory or out-of-range settings before any work is done.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if !(self.order >= 1.0 && self.order.is_finite()) {
            return bad(format!("order must be >= 1, got {}", self.order));
        }
        let beta = self.effective_beta();
        if !(beta > 0.0 && beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {beta}"));
        }
        if self.window == 0 {
            return bad("window must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be > 0, got {}", self.gamma));
        }
        self.tta.validate()?;
        if self.tta.passes == 0 {
            return bad("tta.passes must be >= 1".into());
        }
        if let QuantileMode::Window(0) = self.quantile {
            return bad("stream.window must be >= 1".into());
        }
        if self.segment_len == 0 {
            return bad("shift.segment must be >= 1".into());
        }
        if self.pool.is_empty() {
            return bad("shift.pool must name at least one corruption".into());
        }
        if self.stream_len == Some(0) {
            return bad("shift.length must be >= 1".into());
        }
        if let Temperature::Fixed(t) = self.temperature {
            if !(t > 0.0 && t.is_finite()) {
                return bad(format!("model.temperature must be positive, got {t}"));
            }
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("input.split must lie in (0, 1), got {}", self.split));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return bad("sweep.betas must lie in (0, 1)".into());
        }
        if self.diag_alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("diag.alphas must lie in (0, 1)".into());
        }
        if !(self.diag_range.0 < self.diag_range.1) {
            return bad("diag.alpha_min must be below diag.alpha_max".into());
        }
        if self.ece_bins == 0 {
            return bad("ece.bins must be >= 1".into());
        }
        if self.uses_logit_table() {
            if let Some(m) = self.methods.iter().find(|m| m.adapts()) {
                return bad(format!("method {m} adapts the model and cannot run on a logit table"));
            }
            if self.model_path.is_some() {
                return bad("model.path and input.logits are mutually exclusive".into());
            }
        } else {
            self.synthetic
                .validate()
                .map_err(|e| Error::Config(format!("data: {e}")))?;
            if self.train.epochs == 0 || self.train.batch_size == 0 {
                return bad("train.epochs and train.batch_size must be >= 1".into());
            }
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("alpha", self.alpha.to_string());
        kv("methods", join(&self.methods));
        kv("order", self.order.to_string());
        kv("beta", self.beta.map_or("auto".into(), |b| b.to_string()));
        kv("measure", self.measure.to_string());
        kv("window", self.window.to_string());
        kv("seeds", join(&self.seeds));
        kv("gamma", self.gamma.to_string());
        kv("mode", self.mode.to_string());
        kv("tta.method", self.tta.method.to_string());
        kv("tta.lr", self.tta.learning_rate.to_string());
        kv("tta.momentum", self.tta.momentum.to_string());
        kv("tta.batch_size", self.tta.batch_size.to_string());
        kv("tta.e0", self.tta.entropy_margin.map_or("auto".into(), |e| e.to_string()));
        kv("tta.epsilon", self.tta.redundancy_epsilon.to_string());
        kv(
            "tta.subset",
            match self.tta.subset {
                ParamSubset::FinalLayer => "final_layer".into(),
                ParamSubset::All => "all".into(),
            },
        );
        kv("tta.passes", self.tta.passes.to_string());
        match self.quantile {
            QuantileMode::Running => kv("stream.quantile", "running".into()),
            QuantileMode::Window(w) => kv("stream.window", w.to_string()),
        }
        let d = &self.synthetic;
        kv("data.classes", d.num_classes.to_string());
        kv("data.dim", d.dim.to_string());
        kv("data.n_train", d.n_train.to_string());
        kv("data.n_cal", d.n_cal.to_string());
        kv("data.n_test", d.n_test.to_string());
        kv("data.separation", d.separation.to_string());
        kv("data.stddev", d.stddev.to_string());
        match self.train.architecture {
            Architecture::Linear => kv("train.arch", "linear".into()),
            Architecture::Mlp { hidden } => kv("train.hidden", hidden.to_string()),
        }
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.lr", self.train.learning_rate.to_string());
        kv("train.momentum", self.train.momentum.to_string());
        kv("model.temperature", self.temperature.to_string());
        if let Some(p) = &self.model_path {
            kv("model.path", p.display().to_string());
        }
        if let Some(m) = self.shift_mode {
            kv("shift.mode", m.to_string());
        }
        kv("shift.segment", self.segment_len.to_string());
        kv("shift.pool", join(&self.pool));
        if let Some(n) = self.stream_len {
            kv("shift.length", n.to_string());
        }
        if let Input::LogitTable {
            path,
            cal_path,
            orientation,
        } = &self.input
        {
            kv("input.logits", path.display().to_string());
            if let Some(c) = cal_path {
                kv("input.cal_logits", c.display().to_string());
            }
            kv("input.orientation", orientation.to_string());
        }
        kv("input.split", self.split.to_string());
        if let Some(n) = &self.dataset_name {
            kv("input.name", n.clone());
        }
        if let Some(o) = &self.output_dir {
            kv("output.dir", o.display().to_string());
        }
        kv("output.per_point", self.per_point.to_string());
        kv("sweep.betas", join(&self.betas));
        kv("diag.alphas", join(&self.diag_alphas));
        kv("diag.alpha_min", self.diag_range.0.to_string());
        kv("diag.alpha_max", self.diag_range.1.to_string());
        kv("ece.bins", self.ece_bins.to_string());
        s
    }
}
