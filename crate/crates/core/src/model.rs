//! The base classifier: linear-softmax or a one-hidden-layer tanh network,
//! trained with mini-batch SGD and differentiated analytically for
//! entropy-minimisation updates.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{self, ProbVector};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Architecture::Linear => 0,
            Architecture::Mlp { hidden } => *hidden,
        }
    }
}

/// Which layers test-time adaptation may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamSubset {
    #[default]
    FinalLayer,
    All,
}

/// Dense affine layer; `weights` is `out_dim x in_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.bias) {
            out.push(row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b);
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

/// Parameters of the base model plus its inference temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    pub temperature: f64,
}

/// Gradient (or momentum buffer) with the same layer shapes as the params.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| v.is_finite()))
    }

    /// Zero every layer outside `subset`.
    pub fn restrict_to(&mut self, subset: ParamSubset) {
        if subset == ParamSubset::FinalLayer {
            let last = self.layers.len() - 1;
            for layer in &mut self.layers[..last] {
                layer.values_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.values())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn shape_matches(&self, params: &ClassifierParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.same_shape(p))
    }
}

/// Labelled covariates, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dataset dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::invalid(format!(
                "feature buffer holds {} values, expected {} x {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset covariates must be finite"));
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.features.chunks_exact(self.dim)
    }

    /// Rebuild with transformed covariates and unchanged labels.
    pub fn with_features(&self, features: Vec<f64>) -> Result<Self> {
        Self::new(features, self.dim, self.labels.clone(), self.num_classes)
    }

    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        seen.into_iter().filter(|s| *s).count()
    }
}

/// Per-layer activations kept for backpropagation.
struct ForwardCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ClassifierParams {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(architecture: Architecture, input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::invalid("model needs input_dim >= 1 and num_classes >= 2"));
        }
        let dims: Vec<usize> = match architecture {
            Architecture::Linear => vec![input_dim, num_classes],
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::invalid("hidden width must be positive"));
                }
                vec![input_dim, hidden, num_classes]
            }
        };
        let mut rng = numkit::rng_from_seed(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut layer = Layer::zeros(w[0], w[1]);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            architecture,
            input_dim,
            num_classes,
            layers,
            temperature: 1.0,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive and finite"));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.values().copied()).collect()
    }

    /// Mutable view of the `idx`-th scalar parameter in flatten order.
    pub fn param_mut(&mut self, mut idx: usize) -> Option<&mut f64> {
        for layer in &mut self.layers {
            let n = layer.weights.len() + layer.bias.len();
            if idx < n {
                return layer.values_mut().nth(idx);
            }
            idx -= n;
        }
        None
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> ForwardCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&current, &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut current, out.clone()));
        }
        ForwardCache {
            inputs,
            logits: current,
        }
    }

    /// Raw (pre-temperature) logits.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward(x).logits)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbVector> {
        let logits = self.logits(x)?;
        numkit::softmax(&logits, self.temperature)
            .map_err(|e| Error::Numeric(format!("forward pass produced invalid logits: {e}")))
    }

    pub fn predict_proba_rows<'a>(&self, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<ProbVector>> {
        rows.into_iter().map(|x| self.predict_proba(x)).collect()
    }

    /// Accumulate `dlogits`-driven gradients for one sample into `grad`.
    fn backward(&self, cache: &ForwardCache, dlogits: &[f64], scale: f64, grad: &mut Gradients) {
        let mut delta: Vec<f64> = dlogits.iter().map(|d| d * scale).collect();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache.inputs[li];
            let g = &mut grad.layers[li];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, v) in row.iter_mut().zip(input) {
                    *w += d * v;
                }
            }
            if li == 0 {
                break;
            }
            // Propagate through the weights, then through tanh of the previous layer.
            let mut next = vec![0.0; layer.in_dim];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (n, w) in next.iter_mut().zip(row) {
                    *n += d * w;
                }
            }
            for (n, a) in next.iter_mut().zip(input) {
                *n *= 1.0 - a * a;
            }
            delta = next;
        }
    }

    fn cross_entropy(&self, data: &Dataset) -> f64 {
        data.rows()
            .zip(data.labels())
            .map(|(x, &y)| {
                let cache = self.forward(x);
                let p = numkit::softmax_unchecked(&cache.logits, 1.0);
                -p[y].max(f64::MIN_POSITIVE).ln()
            })
            .sum::<f64>()
            / data.len() as f64
    }
}

/// Weighted mean prediction entropy over `batch` and its analytic gradient.
///
/// Temperature is a fixed constant of the forward pass.
pub fn entropy_loss_and_grad(
    params: &ClassifierParams,
    batch: &[&[f64]],
    weights: &[f64],
) -> Result<(f64, Gradients)> {
    if batch.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} weights for a batch of {}",
            weights.len(),
            batch.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("entropy weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("at least one entropy weight must be positive"));
    }
    let t = params.temperature;
    let mut grad = Gradients::zeros_like(params);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; params.num_classes];
    for (x, &w) in batch.iter().zip(weights) {
        params.check_input(x)?;
        if w == 0.0 {
            continue;
        }
        let cache = params.forward(x);
        let p = numkit::softmax_unchecked(&cache.logits, t);
        let h = numkit::entropy_of(&p);
        loss += w * h;
        // dh/du_j = -p_j (ln p_j + h) with u = z / T.
        for (d, &pj) in dlogits.iter_mut().zip(&p) {
            *d = if pj > 0.0 { -pj * (pj.ln() + h) / t } else { 0.0 };
        }
        params.backward(&cache, &dlogits, w / total, &mut grad);
    }
    Ok((loss / total, grad))
}

/// `v <- momentum * v + grad; theta <- theta - lr * v`.
pub fn sgd_momentum_step(
    params: &mut ClassifierParams,
    grad: &Gradients,
    state: &mut Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grad.shape_matches(params) || !state.shape_matches(params) {
        return Err(Error::invalid("gradient / momentum shapes do not match the model"));
    }
    for ((p, g), v) in params.layers.iter_mut().zip(&grad.layers).zip(&mut state.layers) {
        for ((pv, gv), vv) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp { hidden: DEFAULT_HIDDEN },
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ClassifierParams,
    /// Full-data mean cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Mini-batch SGD with momentum on mean cross-entropy (temperature 1).
pub fn train_supervised(data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut warnings = Vec::new();
    if data.distinct_labels() < 2 {
        warnings.push(format!(
            "training data contains a single class out of {}",
            data.num_classes()
        ));
    }
    let init_seed = numkit::derive_seed(config.seed, 0x1417);
    let mut params = ClassifierParams::init(config.architecture, data.dim(), data.num_classes(), init_seed)?;
    let mut velocity = Gradients::zeros_like(&params);
    let mut rng = numkit::rng_from_seed(numkit::derive_seed(config.seed, 0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut dlogits = vec![0.0; data.num_classes()];

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut grad = Gradients::zeros_like(&params);
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let cache = params.forward(data.row(i));
                let p = numkit::softmax_unchecked(&cache.logits, 1.0);
                for (j, (d, pj)) in dlogits.iter_mut().zip(&p).enumerate() {
                    *d = pj - if j == data.labels()[i] { 1.0 } else { 0.0 };
                }
                params.backward(&cache, &dlogits, scale, &mut grad);
            }
            if !grad.is_finite() {
                return Err(Error::Numeric("non-finite gradient during training".into()));
            }
            sgd_momentum_step(&mut params, &grad, &mut velocity, config.learning_rate, config.momentum)?;
        }
        epoch_losses.push(params.cross_entropy(data));
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
        warnings,
    })
}

/// Temperature minimising mean negative log-likelihood on `data`.
///
/// The NLL is convex in `1/T`, so a golden-section search over
/// `1/T in [0.02, 50]` converges to the global minimum.
pub fn fit_temperature(params: &ClassifierParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("temperature fitting needs at least one sample"));
    }
    let logits: Vec<Vec<f64>> = data.rows().map(|x| params.logits(x)).collect::<Result<_>>()?;
    let nll = |inv_t: f64| -> f64 {
        logits
            .iter()
            .zip(data.labels())
            .map(|(z, &y)| {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|v| ((v - m) * inv_t).exp()).sum::<f64>().ln();
                lse - (z[y] - m) * inv_t
            })
            .sum::<f64>()
    };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.02f64, 50.0f64);
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (nll(a), nll(b));
    while hi - lo > 1e-7 * (1.0 + lo) {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = nll(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = nll(b);
        }
    }
    let inv_t = 0.5 * (lo + hi);
    if !inv_t.is_finite() || !fa.is_finite() {
        return Err(Error::Numeric("temperature fit diverged".into()));
    }
    Ok(1.0 / inv_t)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(params: &ClassifierParams, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (x, &y) in data.rows().zip(data.labels()) {
        if params.predict_proba(x)?.argmax() == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

const CHECKPOINT_MAGIC: &str = "shiftcp-model v1";

/// Plain-text checkpoint.
///
/// ```text
/// shiftcp-model v1
/// <linear|mlp>
/// <input_dim> <hidden (0 for linear)> <num_classes>
/// <temperature>
/// then, per layer: one line per weight row (row-major), then one bias line
/// ```
///
/// Values are written in shortest round-trip form, so a reload is exact.
pub fn to_checkpoint_string(params: &ClassifierParams) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(out, "{}", params.architecture.tag());
    let _ = writeln!(
        out,
        "{} {} {}",
        params.input_dim,
        params.architecture.hidden(),
        params.num_classes
    );
    let _ = writeln!(out, "{}", params.temperature);
    let join = |vals: &[f64]| vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    for layer in &params.layers {
        for row in layer.weights.chunks_exact(layer.in_dim) {
            let _ = writeln!(out, "{}", join(row));
        }
        let _ = writeln!(out, "{}", join(&layer.bias));
    }
    out
}

pub fn from_checkpoint_str(text: &str) -> Result<ClassifierParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::parse(0, format!("checkpoint truncated before {what}")))
    };
    let (ln, magic) = next("header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(ln, format!("expected '{CHECKPOINT_MAGIC}'")));
    }
    let (ln, tag) = next("architecture")?;
    let tag = tag.to_string();
    let (dl, dims) = next("dimensions")?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(dl, format!("bad dimension '{t}'"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::parse(dl, "expected 'input_dim hidden num_classes'"));
    }
    let architecture = match tag.as_str() {
        "linear" => Architecture::Linear,
        "mlp" => Architecture::Mlp { hidden: dims[1] },
        other => return Err(Error::parse(ln, format!("unknown architecture '{other}'"))),
    };
    let (tl, temp) = next("temperature")?;
    let temperature: f64 = temp
        .parse()
        .map_err(|_| Error::parse(tl, format!("bad temperature '{temp}'")))?;
    let mut params = ClassifierParams::init(architecture, dims[0], dims[2], 0)
        .map_err(|e| Error::parse(dl, e.to_string()))?;
    params.temperature = temperature;
    for layer in &mut params.layers {
        let mut read_row = |len: usize| -> Result<Vec<f64>> {
            let (rl, row) = next("parameter row")?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::parse(rl, format!("bad value '{t}'"))))
                .collect::<Result<_>>()?;
            if vals.len() != len || vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(rl, format!("expected {len} finite values")));
            }
            Ok(vals)
        };
        let mut weights = Vec::with_capacity(layer.weights.len());
        for _ in 0..layer.out_dim {
            weights.extend(read_row(layer.in_dim)?);
        }
        layer.weights = weights;
        layer.bias = read_row(layer.out_dim)?;
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::parse(tl, "temperature must be positive"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ClassifierParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_checkpoint_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_identity() -> ClassifierParams {
        let mut p = ClassifierParams::init(Architecture::Linear, 2, 2, 0).unwrap();
        p.layers[0].weights = vec![1.0, 0.0, 0.0, 1.0];
        p
    }

    fn random_params(arch: Architecture, d: usize, k: usize, seed: u64) -> ClassifierParams {
        let mut p = ClassifierParams::init(arch, d, k, seed).unwrap();
        let mut rng = numkit::rng_from_seed(seed ^ 99);
        for layer in &mut p.layers {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.5..0.5);
            }
            for w in &mut layer.weights {
                *w *= 2.0;
            }
        }
        p
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = numkit::rng_from_seed(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = numkit::rng_from_seed(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 0 { -2.0 } else { 2.0 };
            for _ in 0..2 {
                let z: f64 = StandardNormal.sample(&mut rng);
                feats.push(c + 0.5 * z);
            }
            labels.push(y);
        }
        Dataset::new(feats, 2, labels, 2).unwrap()
    }

    #[test]
    fn zero_linear_model_is_uniform() {
        let mut p = ClassifierParams::init(Architecture::Linear, 3, 5, 1).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        let q = p.predict_proba(&[1.0, -2.0, 3.0]).unwrap();
        assert!(q.as_slice().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn identity_linear_model() {
        let p = linear_identity();
        let q = p.predict_proba(&[1.0, 0.0]).unwrap();
        let e = 1f64.exp();
        assert!((q.as_slice()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((q.as_slice()[0] - 0.7311).abs() < 1e-4);
        let hot = p.with_temperature(1e6).unwrap();
        let q = hot.predict_proba(&[1.0, 0.0]).unwrap();
        assert!((q.as_slice()[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn predict_rejects_wrong_dimension() {
        let p = linear_identity();
        assert!(matches!(p.predict_proba(&[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn training_separates_blobs() {
        let data = blobs(500, 3);
        let out = train_supervised(&data, &TrainConfig { epochs: 20, ..Default::default() }).unwrap();
        assert!(accuracy(&out.params, &data).unwrap() >= 0.95);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let data = blobs(50, 3);
        let cfg = TrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let out = train_supervised(&data, &cfg).unwrap();
        let init = ClassifierParams::init(cfg.architecture, 2, 2, numkit::derive_seed(11, 0x1417)).unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(200, 5);
        let cfg = TrainConfig {
            architecture: Architecture::Mlp { hidden: 8 },
            epochs: 3,
            seed: 42,
            ..Default::default()
        };
        let a = train_supervised(&data, &cfg).unwrap();
        let b = train_supervised(&data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn single_class_data_warns() {
        let data = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], 2, vec![1, 1], 3).unwrap();
        let out = train_supervised(&data, &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn full_batch_training_loss_descends() {
        let data = blobs(100, 8);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 100,
            learning_rate: 0.05,
            momentum: 0.0,
            ..Default::default()
        };
        let out = train_supervised(&data, &cfg).unwrap();
        for w in out.epoch_losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", out.epoch_losses);
        }
    }

    #[test]
    fn saturated_model_has_zero_entropy_gradient() {
        let mut p = ClassifierParams::init(Architecture::Linear, 2, 3, 0).unwrap();
        p.layers[0].weights.iter_mut().for_each(|w| *w = 0.0);
        p.layers[0].bias = vec![60.0, 0.0, 0.0];
        let x = [0.3, -0.4];
        let (loss, grad) = entropy_loss_and_grad(&p, &[&x], &[1.0]).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.max_abs() < 1e-20);
    }

    #[test]
    fn entropy_weights_are_normalised() {
        let p = random_params(Architecture::Mlp { hidden: 4 }, 3, 4, 5);
        let batch = random_batch(5, 3, 6);
        let rows: Vec<&[f64]> = batch.iter().map(|r| r.as_slice()).collect();
        let w1 = [0.5, 1.0, 0.2, 0.0, 3.0];
        let w2: Vec<f64> = w1.iter().map(|w| w * 2.0).collect();
        let (l1, g1) = entropy_loss_and_grad(&p, &rows, &w1).unwrap();
        let (l2, g2) = entropy_loss_and_grad(&p, &rows, &w2).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_loss_rejects_zero_weights() {
        let p = linear_identity();
        let x = [1.0, 0.0];
        assert!(entropy_loss_and_grad(&p, &[&x], &[0.0]).is_err());
        assert!(entropy_loss_and_grad(&p, &[&x], &[1.0, 1.0]).is_err());
    }

    /// Central finite differences on the flattened parameter vector.
    fn fd_gradient(p: &ClassifierParams, rows: &[&[f64]], w: &[f64], step: f64) -> Vec<f64> {
        (0..p.num_parameters())
            .map(|i| {
                let mut plus = p.clone();
                *plus.param_mut(i).unwrap() += step;
                let mut minus = p.clone();
                *minus.param_mut(i).unwrap() -= step;
                let lp = entropy_loss_and_grad(&plus, rows, w).unwrap().0;
                let lm = entropy_loss_and_grad(&minus, rows, w).unwrap().0;
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        for (seed, arch, t) in [
            (1, Architecture::Linear, 1.0),
            (2, Architecture::Mlp { hidden: 5 }, 1.0),
            (3, Architecture::Mlp { hidden: 3 }, 0.7),
        ] {
            let p = random_params(arch, 3, 4, seed).with_temperature(t).unwrap();
            let batch = random_batch(5, 3, seed + 100);
            let rows: Vec<&[f64]> = batch.iter().map(|r| r.as_slice()).collect();
            let w = [1.0, 0.3, 2.0, 0.5, 1.5];
            let (_, g) = entropy_loss_and_grad(&p, &rows, &w).unwrap();
            let fd = fd_gradient(&p, &rows, &w, 1e-5);
            let analytic = g.flatten();
            let num: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
            assert!(num / den <= 1e-5, "relative error {}", num / den);
        }
    }

    #[test]
    fn momentum_step_examples() {
        let mut p = linear_identity();
        let before = p.clone();
        let zero = Gradients::zeros_like(&p);
        let mut state = Gradients::zeros_like(&p);
        sgd_momentum_step(&mut p, &zero, &mut state, 0.1, 0.9).unwrap();
        assert_eq!(p, before);

        let mut g = Gradients::zeros_like(&p);
        g.layers[0].weights = vec![0.5, -1.0, 2.0, 0.25];
        g.layers[0].bias = vec![1.0, -1.0];
        sgd_momentum_step(&mut p, &g, &mut state, 1.0, 0.0).unwrap();
        assert_eq!(p.layers[0].weights, vec![0.5, 1.0, -2.0, 0.75]);
        assert_eq!(p.layers[0].bias, vec![-1.0, 1.0]);

        let mut p = linear_identity();
        let mut state = Gradients::zeros_like(&p);
        let lr = 0.1;
        sgd_momentum_step(&mut p, &g, &mut state, lr, 0.9).unwrap();
        sgd_momentum_step(&mut p, &g, &mut state, lr, 0.9).unwrap();
        let start = linear_identity().flatten();
        for ((a, s), gv) in p.flatten().iter().zip(&start).zip(g.flatten()) {
            assert!((s - a - lr * (gv + 1.9 * gv)).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_step_rejects_shape_mismatch() {
        let mut p = linear_identity();
        let other = ClassifierParams::init(Architecture::Linear, 3, 2, 0).unwrap();
        let g = Gradients::zeros_like(&other);
        let mut state = Gradients::zeros_like(&p);
        assert!(sgd_momentum_step(&mut p, &g, &mut state, 0.1, 0.9).is_err());
    }

    #[test]
    fn restrict_to_final_layer_zeroes_hidden() {
        let p = random_params(Architecture::Mlp { hidden: 4 }, 3, 3, 9);
        let batch = random_batch(4, 3, 1);
        let rows: Vec<&[f64]> = batch.iter().map(|r| r.as_slice()).collect();
        let (_, mut g) = entropy_loss_and_grad(&p, &rows, &[1.0; 4]).unwrap();
        g.restrict_to(ParamSubset::FinalLayer);
        assert!(g.layers[0].values().all(|v| *v == 0.0));
        assert!(g.layers[1].values().any(|v| *v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = random_params(Architecture::Mlp { hidden: 3 }, 4, 3, 2)
            .with_temperature(0.8)
            .unwrap();
        let text = to_checkpoint_string(&p);
        assert_eq!(from_checkpoint_str(&text).unwrap(), p);
        let lin = random_params(Architecture::Linear, 2, 2, 2);
        assert_eq!(from_checkpoint_str(&to_checkpoint_string(&lin)).unwrap(), lin);
    }

    #[test]
    fn checkpoint_parse_errors_carry_lines() {
        let p = linear_identity();
        let text = to_checkpoint_string(&p).replace("1 0\n", "1 x\n");
        match from_checkpoint_str(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(from_checkpoint_str("nope").is_err());
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], 2, vec![], 2).is_err());
        assert!(Dataset::new(vec![0.0, 1.0], 2, vec![2], 2).is_err());
        assert!(Dataset::new(vec![0.0, f64::NAN], 2, vec![0], 2).is_err());
        assert!(Dataset::new(vec![0.0], 2, vec![0], 2).is_err());
    }

    #[test]
    fn fit_temperature_recovers_sampling_temperature() {
        let p = random_params(Architecture::Linear, 4, 5, 21);
        let xs = random_batch(6000, 4, 22);
        let mut rng = numkit::rng_from_seed(23);
        let true_t = 2.5;
        let labels: Vec<usize> = xs
            .iter()
            .map(|x| {
                let probs = numkit::softmax_unchecked(&p.logits(x).unwrap(), true_t);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                probs.iter().position(|v| { acc += v; u < acc }).unwrap_or(4)
            })
            .collect();
        let data = Dataset::new(xs.concat(), 4, labels, 5).unwrap();
        let t = fit_temperature(&p, &data).unwrap();
        assert!((t - true_t).abs() < 0.25, "fitted {t}");
    }
}
