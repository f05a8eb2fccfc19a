// SPDX-License-Identifier: MIT OR Apache-2.0

//! Recurrent sleep-quality regressor with a nested-interval head.
//!
//! Pipeline: standardized window → missing-value gate → stacked LSTMs →
//! dense elu → `2·tanh(s·z + o)` for quality, plus a ten-output dense layer
//! giving an interval center and nine cumulative softplus half-widths.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use somnus_ad::{AdError, Graph, ParamStore, Tensor, Var};

use crate::diary::{
    build_window, BehaviourWindow, DiaryError, FeatureSchema, StandardizationStats, UserHistory,
    WINDOW_STEPS,
};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum QnetError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("no user has a reported quality on the anchor day")]
    NoLabeledUsers,
    #[error("{users} users cannot fill {folds} folds with at least 2 users each")]
    FoldTooSmall { users: usize, folds: usize },
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("checkpoint schema hash {found} does not match {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Diary(#[from] DiaryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Architecture and loss variants. `Baseline` is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Baseline,
    NoMissingMask,
    NoCyclicEncoding,
    NoRescaleIntervals,
    ExtraLstmLayer10,
    NoEluOnMask,
    NoRescaleQuality,
    NoLstms,
    NoZscore,
    QualityLossOnly,
    /// Fully linear in the input: no gate, no recurrence, no activations.
    /// Used to check that second derivatives vanish.
    LinearProbe,
}

impl Variant {
    pub const ABLATIONS: [Variant; 9] = [
        Variant::NoMissingMask,
        Variant::NoCyclicEncoding,
        Variant::NoRescaleIntervals,
        Variant::ExtraLstmLayer10,
        Variant::NoEluOnMask,
        Variant::NoRescaleQuality,
        Variant::NoLstms,
        Variant::NoZscore,
        Variant::QualityLossOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::NoMissingMask => "no_missing_mask",
            Variant::NoCyclicEncoding => "no_cyclic_encoding",
            Variant::NoRescaleIntervals => "no_rescale_intervals",
            Variant::ExtraLstmLayer10 => "extra_lstm_layer_10",
            Variant::NoEluOnMask => "no_elu_on_mask",
            Variant::NoRescaleQuality => "no_rescale_quality",
            Variant::NoLstms => "no_lstms",
            Variant::NoZscore => "no_zscore",
            Variant::QualityLossOnly => "quality_loss_only",
            Variant::LinearProbe => "linear_probe",
        }
    }

    fn recurrent(self) -> bool {
        !matches!(self, Variant::NoLstms | Variant::LinearProbe)
    }

    fn masked(self) -> bool {
        !matches!(self, Variant::NoMissingMask | Variant::LinearProbe)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = QnetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().replace('-', "_");
        [Variant::Baseline, Variant::LinearProbe]
            .into_iter()
            .chain(Variant::ABLATIONS)
            .find(|v| v.name() == norm)
            .ok_or_else(|| QnetError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub lstm_sizes: Vec<usize>,
    pub n_intervals: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Share of training users held out for early stopping.
    pub validation_fraction: f64,
    pub variant: Variant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            lstm_sizes: vec![50, 10],
            n_intervals: 9,
            learning_rate: 0.01,
            batch_size: 256,
            epochs: 30,
            seed: 0,
            patience: 10,
            validation_fraction: 0.1,
            variant: Variant::Baseline,
        }
    }
}

impl NetworkConfig {
    /// Nominal coverage `p(i) = i / (n + 1)`, i.e. 0.1..0.9 for nine intervals.
    pub fn nominal_p(&self) -> Vec<f64> {
        let n = self.n_intervals as f64;
        (1..=self.n_intervals)
            .map(|i| i as f64 / (n + 1.0))
            .collect()
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            cyclic: self.variant != Variant::NoCyclicEncoding,
        }
    }

    fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = self.lstm_sizes.clone();
        if self.variant == Variant::ExtraLstmLayer10 {
            sizes.push(10);
        }
        sizes
    }

    /// Width of the representation feeding both heads.
    fn top_width(&self) -> usize {
        if self.variant.recurrent() {
            *self.layer_sizes().last().expect("validated non-empty")
        } else {
            10
        }
    }

    pub fn validate(&self) -> Result<(), QnetError> {
        let bad = |m: &str| Err(QnetError::InvalidConfig(m.to_string()));
        if self.lstm_sizes.is_empty() || self.lstm_sizes.contains(&0) {
            return bad("lstm sizes must be non-empty and positive");
        }
        if self.n_intervals == 0 {
            return bad("need at least one interval");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `1 / (1 + e^{−10x})`, the steep logistic used to count interval misses.
pub fn soft_step(x: f64) -> f64 {
    1.0 / (1.0 + (-10.0 * x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalPrediction {
    pub center: f64,
    pub half_widths: Vec<f64>,
}

impl IntervalPrediction {
    pub fn low(&self, i: usize) -> f64 {
        self.center - self.half_widths[i]
    }

    pub fn high(&self, i: usize) -> f64 {
        self.center + self.half_widths[i]
    }

    pub fn contains(&self, i: usize, y: f64) -> bool {
        self.low(i) <= y && y <= self.high(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub quality: f64,
    pub interval: IntervalPrediction,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub quality_mse: f64,
    pub interval_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: Option<LossBreakdown>,
}

/// `epochs[0]` is the untrained model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean squared error over predictions and targets.
pub fn loss_quality(predictions: &[f64], targets: &[f64]) -> Result<f64, QnetError> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(QnetError::EmptyBatch);
    }
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / predictions.len() as f64)
}

/// Squared gap between the soft share of targets falling outside each
/// interval and its nominal outside probability `1 − p(i)`, summed over
/// intervals.
pub fn loss_intervals(
    intervals: &[IntervalPrediction],
    targets: &[f64],
    p: &[f64],
) -> Result<f64, QnetError> {
    if intervals.is_empty() || intervals.len() != targets.len() {
        return Err(QnetError::EmptyBatch);
    }
    let n = intervals.len() as f64;
    Ok(p.iter()
        .enumerate()
        .map(|(i, pi)| {
            let outside: f64 = intervals
                .iter()
                .zip(targets)
                .map(|(iv, y)| soft_step(iv.low(i) - y) + soft_step(y - iv.high(i)))
                .sum::<f64>()
                / n;
            (outside - (1.0 - pi)).powi(2)
        })
        .sum())
}

/// A labelled training example: window plus anchor-day quality.
#[derive(Clone, Debug)]
pub struct Sample {
    pub user_id: String,
    pub window: BehaviourWindow,
    pub target: f64,
}

/// Anchor windows for users whose last record carries a quality report.
pub fn labeled_samples(
    histories: &[UserHistory],
    stats: &StandardizationStats,
    schema: &FeatureSchema,
) -> Result<Vec<Sample>, QnetError> {
    let mut out = Vec::new();
    for h in histories {
        if let Some(q) = h.anchor_quality() {
            out.push(Sample {
                user_id: h.user_id.clone(),
                window: build_window(h, h.last().date, stats, schema)?,
                target: f64::from(q),
            });
        }
    }
    Ok(out)
}

/// Graph nodes of one forward pass.
pub struct ForwardVars {
    pub x: Vec<Var>,
    pub quality: Var,
    pub low: Var,
    pub high: Var,
    pub center: Var,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn steps_tensor(
    windows: &[&BehaviourWindow],
    step: usize,
    n_features: usize,
    miss: bool,
) -> Tensor {
    let mut data = Vec::with_capacity(windows.len() * n_features);
    for w in windows {
        if miss {
            data.extend(w.step_miss(step).iter().map(|&m| if m { 1.0 } else { 0.0 }));
        } else {
            data.extend_from_slice(w.step_x(step));
        }
    }
    Tensor::from_vec(windows.len(), n_features, data).expect("sized")
}

/// Prefix state for evaluating many last-step inputs of fixed windows.
pub struct LastStepContext {
    rows: usize,
    /// Recurrent variants: per layer `(h, c)` after step `T − 2`.
    states: Vec<(Tensor, Tensor)>,
    /// Flat variants: the first `T − 1` (gated) steps.
    prefix: Vec<(Tensor, Tensor)>,
}

impl LastStepContext {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Keeps only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> LastStepContext {
        let pick = |t: &Tensor| {
            let data = rows
                .iter()
                .flat_map(|&r| t.row_slice(r).iter().copied())
                .collect();
            Tensor::from_vec(rows.len(), t.cols(), data).expect("sized")
        };
        LastStepContext {
            rows: rows.len(),
            states: self
                .states
                .iter()
                .map(|(h, c)| (pick(h), pick(c)))
                .collect(),
            prefix: self
                .prefix
                .iter()
                .map(|(x, m)| (pick(x), pick(m)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityNet {
    pub config: NetworkConfig,
    pub schema: FeatureSchema,
    pub stats: StandardizationStats,
    pub params: ParamStore,
    pub trained: bool,
    pub fold: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: NetworkConfig,
    schema: FeatureSchema,
    schema_hash: String,
    stats: StandardizationStats,
    fold: Option<usize>,
    trained: bool,
}

const INFERENCE_CHUNK: usize = 256;

impl QualityNet {
    /// Fresh, seeded parameters for `stats`' feature layout.
    pub fn new(config: NetworkConfig, stats: StandardizationStats) -> Result<Self, QnetError> {
        config.validate()?;
        let schema = config.schema();
        let f = schema.len();
        if stats.len() != f {
            return Err(QnetError::InvalidConfig(format!(
                "stats cover {} features, schema has {f}",
                stats.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut params = ParamStore::new();
        if config.variant.masked() {
            let data = (0..f * f).map(|_| rng.random_range(-0.01..0.01)).collect();
            params.insert("mask.w", Tensor::from_vec(f, f, data)?);
            params.insert("mask.b", Tensor::zeros(1, f));
        }
        if config.variant.recurrent() {
            let mut input = f;
            for (l, &h) in config.layer_sizes().iter().enumerate() {
                params.insert(
                    format!("lstm{l}.w"),
                    xavier(&mut rng, input, 4 * h, input, h),
                );
                params.insert(format!("lstm{l}.u"), xavier(&mut rng, h, 4 * h, h, h));
                let mut b = Tensor::zeros(1, 4 * h);
                for j in h..2 * h {
                    b.set(0, j, 1.0);
                }
                params.insert(format!("lstm{l}.b"), b);
                input = h;
            }
        } else {
            let flat = WINDOW_STEPS * f;
            params.insert("flat.w", xavier(&mut rng, flat, 10, flat, 10));
            params.insert("flat.b", Tensor::zeros(1, 10));
        }
        let top = config.top_width();
        params.insert("head.w", xavier(&mut rng, top, 1, top, 1));
        params.insert("head.b", Tensor::zeros(1, 1));
        if !matches!(
            config.variant,
            Variant::NoRescaleQuality | Variant::LinearProbe
        ) {
            params.insert("rescale.s", Tensor::scalar(1.0));
            params.insert("rescale.o", Tensor::scalar(0.0));
        }
        let k = config.n_intervals + 1;
        params.insert("interval.w", xavier(&mut rng, top, k, top, k));
        params.insert("interval.b", Tensor::zeros(1, k));
        Ok(Self {
            config,
            schema,
            stats,
            params,
            trained: false,
            fold: None,
        })
    }

    /// Standardization statistics appropriate for `config` and `train`.
    pub fn fit_stats(
        config: &NetworkConfig,
        train: &[UserHistory],
    ) -> Result<StandardizationStats, QnetError> {
        let schema = config.schema();
        if config.variant == Variant::NoZscore {
            Ok(StandardizationStats::identity(&schema))
        } else {
            Ok(StandardizationStats::fit(train, &schema)?)
        }
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn window(&self, history: &UserHistory) -> BehaviourWindow {
        crate::diary::last_window(history, &self.stats, &self.schema)
    }

    fn gate(
        &self,
        g: &mut Graph,
        p: &dyn Fn(&str) -> Var,
        x: Var,
        miss: Var,
    ) -> Result<Var, QnetError> {
        if !self.config.variant.masked() {
            return Ok(x);
        }
        let pre = g.matmul(miss, p("mask.w"))?;
        let pre = g.add(pre, p("mask.b"))?;
        let act = if self.config.variant == Variant::NoEluOnMask {
            pre
        } else {
            g.elu(pre)
        };
        let gate = g.offset(act, 1.0);
        Ok(g.mul(x, gate)?)
    }

    fn lstm_step(
        &self,
        g: &mut Graph,
        p: &dyn Fn(&str) -> Var,
        layer: usize,
        input: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var), QnetError> {
        let hidden = self.config.layer_sizes()[layer];
        let out = g.lstm_cell(
            input,
            h,
            c,
            p(&format!("lstm{layer}.w")),
            p(&format!("lstm{layer}.u")),
            p(&format!("lstm{layer}.b")),
        )?;
        let h2 = g.slice_cols(out, 0, hidden)?;
        let c2 = g.slice_cols(out, hidden, 2 * hidden)?;
        Ok((h2, c2))
    }

    /// Heads on the top representation `top` (`B x width`).
    fn heads(
        &self,
        g: &mut Graph,
        p: &dyn Fn(&str) -> Var,
        top: Var,
    ) -> Result<(Var, Var, Var, Var), QnetError> {
        let variant = self.config.variant;
        let z = g.matmul(top, p("head.w"))?;
        let z = g.add(z, p("head.b"))?;
        let quality = match variant {
            Variant::LinearProbe => z,
            Variant::NoRescaleQuality => g.elu(z),
            _ => {
                let z = g.elu(z);
                let s = g.mul(z, p("rescale.s"))?;
                let s = g.add(s, p("rescale.o"))?;
                let t = g.tanh(s);
                g.scale(t, 2.0)
            }
        };

        let n = self.config.n_intervals;
        let raw = g.matmul(top, p("interval.w"))?;
        let raw = g.add(raw, p("interval.b"))?;
        let center_raw = g.slice_cols(raw, 0, 1)?;
        let width_raw = g.slice_cols(raw, 1, n + 1)?;
        let rescale = !matches!(variant, Variant::NoRescaleIntervals | Variant::LinearProbe);
        let (center, widths) = if rescale {
            let t = g.tanh(center_raw);
            (g.scale(t, 2.0), g.softplus(width_raw))
        } else {
            (center_raw, width_raw)
        };
        let mut tri = Tensor::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                tri.set(i, j, 1.0);
            }
        }
        let tri = g.leaf(tri);
        let half = g.matmul(widths, tri)?;
        let ones = g.leaf(Tensor::filled(1, n, 1.0));
        let center_b = g.matmul(center, ones)?;
        let low = g.sub(center_b, half)?;
        let high = g.add(center_b, half)?;
        Ok((quality, low, high, center))
    }

    /// Full forward pass; `p` resolves parameter names to graph nodes.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        p: &dyn Fn(&str) -> Var,
        windows: &[&BehaviourWindow],
    ) -> Result<ForwardVars, QnetError> {
        if windows.is_empty() {
            return Err(QnetError::EmptyBatch);
        }
        let f = self.n_features();
        let b = windows.len();
        let mut xs = Vec::with_capacity(WINDOW_STEPS);
        let mut gated = Vec::with_capacity(WINDOW_STEPS);
        for t in 0..WINDOW_STEPS {
            let x = g.leaf(steps_tensor(windows, t, f, false));
            let m = g.leaf(steps_tensor(windows, t, f, true));
            xs.push(x);
            gated.push(self.gate(g, p, x, m)?);
        }
        let top = if self.config.variant.recurrent() {
            let mut seq = gated;
            for (l, &hidden) in self.config.layer_sizes().iter().enumerate() {
                let mut h = g.leaf(Tensor::zeros(b, hidden));
                let mut c = g.leaf(Tensor::zeros(b, hidden));
                let mut out = Vec::with_capacity(WINDOW_STEPS);
                for input in &seq {
                    (h, c) = self.lstm_step(g, p, l, *input, h, c)?;
                    out.push(h);
                }
                seq = out;
            }
            *seq.last().expect("ten steps")
        } else {
            let flat = g.concat_cols(&gated)?;
            let d = g.matmul(flat, p("flat.w"))?;
            g.add(d, p("flat.b"))?
        };
        let (quality, low, high, center) = self.heads(g, p, top)?;
        Ok(ForwardVars {
            x: xs,
            quality,
            low,
            high,
            center,
        })
    }

    /// Scalar training loss on a graph. Returns `(total, mse, interval)`.
    pub fn loss_on_graph(
        &self,
        g: &mut Graph,
        out: &ForwardVars,
        targets: &[f64],
    ) -> Result<(Var, Var, Var), QnetError> {
        let b = targets.len();
        if b == 0 {
            return Err(QnetError::EmptyBatch);
        }
        let n = self.config.n_intervals;
        let y = g.leaf(Tensor::from_vec(b, 1, targets.to_vec())?);
        let diff = g.sub(out.quality, y)?;
        let sq = g.square(diff);
        let mse = g.mean(sq);

        let ones_row = g.leaf(Tensor::filled(1, n, 1.0));
        let y_b = g.matmul(y, ones_row)?;
        let below = g.sub(out.low, y_b)?;
        let below = g.scale(below, 10.0);
        let below = g.sigmoid(below);
        let above = g.sub(y_b, out.high)?;
        let above = g.scale(above, 10.0);
        let above = g.sigmoid(above);
        let outside = g.add(below, above)?;
        let avg = g.leaf(Tensor::filled(1, b, 1.0 / b as f64));
        let frac = g.matmul(avg, outside)?;
        let nominal_out: Vec<f64> = self.config.nominal_p().iter().map(|p| 1.0 - p).collect();
        let nominal = g.leaf(Tensor::row(&nominal_out));
        let dev = g.sub(frac, nominal)?;
        let dev = g.square(dev);
        let interval = g.sum(dev);

        let total = if self.config.variant == Variant::QualityLossOnly {
            mse
        } else {
            g.add(mse, interval)?
        };
        Ok((total, mse, interval))
    }

    fn read_outputs(&self, g: &Graph, out: &ForwardVars) -> Vec<Prediction> {
        let q = g.value(out.quality);
        let low = g.value(out.low);
        let center = g.value(out.center);
        (0..q.rows())
            .map(|r| {
                let c = center.get(r, 0);
                Prediction {
                    quality: q.get(r, 0),
                    interval: IntervalPrediction {
                        center: c,
                        half_widths: low.row_slice(r).iter().map(|l| c - l).collect(),
                    },
                }
            })
            .collect()
    }

    fn param_lookup<'a>(&self, g: &mut Graph) -> impl Fn(&str) -> Var + 'a {
        let bound = self.params.bind(g);
        move |name: &str| bound.var(name)
    }

    /// Predictions in fixed-size chunks; each row depends only on its own
    /// window, so results do not depend on how callers batch.
    pub fn predict(&self, windows: &[&BehaviourWindow]) -> Result<Vec<Prediction>, QnetError> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.param_lookup(&mut g);
            let fv = self.forward_with(&mut g, &p, chunk)?;
            out.extend(self.read_outputs(&g, &fv));
        }
        Ok(out)
    }

    pub fn predict_one(&self, window: &BehaviourWindow) -> Result<Prediction, QnetError> {
        Ok(self.predict(&[window])?.remove(0))
    }

    /// Per-window `(ŷ, dŷ/dx)` with the gradient laid out `T x F` in z-space.
    pub fn input_gradients(
        &self,
        windows: &[&BehaviourWindow],
    ) -> Result<Vec<(f64, Vec<f64>)>, QnetError> {
        let f = self.n_features();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.param_lookup(&mut g);
            let fv = self.forward_with(&mut g, &p, chunk)?;
            let total = g.sum(fv.quality);
            let grads = g.backward(total)?;
            let y = g.value(fv.quality).clone();
            let per_step: Vec<Tensor> =
                fv.x.iter()
                    .map(|x| grads.get_or_zeros(*x, (chunk.len(), f)))
                    .collect();
            for r in 0..chunk.len() {
                let mut gx = Vec::with_capacity(WINDOW_STEPS * f);
                for t in &per_step {
                    gx.extend_from_slice(t.row_slice(r));
                }
                out.push((y.get(r, 0), gx));
            }
        }
        Ok(out)
    }

    /// Runs every step but the last once, so the last step can be
    /// re-evaluated cheaply for many candidate inputs.
    pub fn last_step_context(
        &self,
        windows: &[&BehaviourWindow],
    ) -> Result<LastStepContext, QnetError> {
        if windows.is_empty() {
            return Err(QnetError::EmptyBatch);
        }
        let f = self.n_features();
        let b = windows.len();
        if !self.config.variant.recurrent() {
            let prefix = (0..WINDOW_STEPS - 1)
                .map(|t| {
                    (
                        steps_tensor(windows, t, f, false),
                        steps_tensor(windows, t, f, true),
                    )
                })
                .collect();
            return Ok(LastStepContext {
                rows: b,
                states: vec![],
                prefix,
            });
        }
        let mut g = Graph::new();
        let p = self.param_lookup(&mut g);
        let sizes = self.config.layer_sizes();
        let mut seq = Vec::with_capacity(WINDOW_STEPS - 1);
        for t in 0..WINDOW_STEPS - 1 {
            let x = g.leaf(steps_tensor(windows, t, f, false));
            let m = g.leaf(steps_tensor(windows, t, f, true));
            seq.push(self.gate(&mut g, &p, x, m)?);
        }
        let mut states = Vec::with_capacity(sizes.len());
        for (l, &hidden) in sizes.iter().enumerate() {
            let mut h = g.leaf(Tensor::zeros(b, hidden));
            let mut c = g.leaf(Tensor::zeros(b, hidden));
            let mut out = Vec::with_capacity(seq.len());
            for input in &seq {
                (h, c) = self.lstm_step(&mut g, &p, l, *input, h, c)?;
                out.push(h);
            }
            states.push((g.value(h).clone(), g.value(c).clone()));
            seq = out;
        }
        Ok(LastStepContext {
            rows: b,
            states,
            prefix: vec![],
        })
    }

    /// Quality and its gradient with respect to the last-step input for each
    /// context row, given that row's last-step `x` and `miss` (`B x F`).
    pub fn eval_last_step(
        &self,
        ctx: &LastStepContext,
        x_last: &Tensor,
        miss_last: &Tensor,
    ) -> Result<(Vec<f64>, Tensor), QnetError> {
        let mut g = Graph::new();
        let p = self.param_lookup(&mut g);
        let x = g.leaf(x_last.clone());
        let m = g.leaf(miss_last.clone());
        let gated = self.gate(&mut g, &p, x, m)?;
        let top = if self.config.variant.recurrent() {
            let mut input = gated;
            for (l, (h0, c0)) in ctx.states.iter().enumerate() {
                let h = g.leaf(h0.clone());
                let c = g.leaf(c0.clone());
                let (h2, _) = self.lstm_step(&mut g, &p, l, input, h, c)?;
                input = h2;
            }
            input
        } else {
            let mut parts = Vec::with_capacity(WINDOW_STEPS);
            for (px, pm) in &ctx.prefix {
                let xv = g.leaf(px.clone());
                let mv = g.leaf(pm.clone());
                parts.push(self.gate(&mut g, &p, xv, mv)?);
            }
            parts.push(gated);
            let flat = g.concat_cols(&parts)?;
            let d = g.matmul(flat, p("flat.w"))?;
            g.add(d, p("flat.b"))?
        };
        let (quality, ..) = self.heads(&mut g, &p, top)?;
        let total = g.sum(quality);
        let grads = g.backward(total)?;
        let y = g.value(quality).data().to_vec();
        Ok((y, grads.get_or_zeros(x, x_last.shape())))
    }

    /// Loss over a whole sample set (interval fractions pooled over all of it).
    pub fn evaluate(&self, samples: &[Sample]) -> Result<LossBreakdown, QnetError> {
        let windows: Vec<&BehaviourWindow> = samples.iter().map(|s| &s.window).collect();
        let preds = self.predict(&windows)?;
        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let q: Vec<f64> = preds.iter().map(|p| p.quality).collect();
        let iv: Vec<IntervalPrediction> = preds.into_iter().map(|p| p.interval).collect();
        let quality_mse = loss_quality(&q, &targets)?;
        let interval_loss = loss_intervals(&iv, &targets, &self.config.nominal_p())?;
        let total = if self.config.variant == Variant::QualityLossOnly {
            quality_mse
        } else {
            quality_mse + interval_loss
        };
        Ok(LossBreakdown {
            quality_mse,
            interval_loss,
            total,
        })
    }

    /// Gradients of the batch loss for every parameter.
    pub fn loss_gradients(
        &self,
        batch: &[&Sample],
    ) -> Result<(f64, BTreeMap<String, Tensor>), QnetError> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let windows: Vec<&BehaviourWindow> = batch.iter().map(|s| &s.window).collect();
        let targets: Vec<f64> = batch.iter().map(|s| s.target).collect();
        let fv = self.forward_with(&mut g, &|n| bound.var(n), &windows)?;
        let (total, ..) = self.loss_on_graph(&mut g, &fv, &targets)?;
        let grads = g.backward(total)?;
        let loss = g.value(total).item().expect("scalar");
        Ok((loss, bound.gradients(&grads)))
    }

    /// Mini-batch Adam over `samples`, early-stopping on a seeded validation
    /// split. The parameters of the best validation epoch are kept.
    pub fn train_on(&mut self, samples: &[Sample]) -> Result<TrainingHistory, QnetError> {
        if samples.is_empty() {
            return Err(QnetError::NoLabeledUsers);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let n_val = ((samples.len() as f64) * self.config.validation_fraction).floor() as usize;
        let n_val = if samples.len() - n_val < 1 { 0 } else { n_val };
        let (val_idx, train_idx) = order.split_at(n_val);
        let train: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
        let val: Vec<Sample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
        let train_owned: Vec<Sample> = train.iter().map(|s| (*s).clone()).collect();

        let eval = |net: &QualityNet| -> Result<EpochRecordParts, QnetError> {
            Ok((
                net.evaluate(&train_owned)?,
                if val.is_empty() {
                    None
                } else {
                    Some(net.evaluate(&val)?)
                },
            ))
        };
        type EpochRecordParts = (LossBreakdown, Option<LossBreakdown>);

        let mut history = TrainingHistory::default();
        let (t0, v0) = eval(self)?;
        history.epochs.push(EpochRecord {
            epoch: 0,
            train: t0,
            validation: v0,
        });
        let score = |t: &LossBreakdown, v: &Option<LossBreakdown>| v.as_ref().unwrap_or(t).total;
        let mut best_score = score(&t0, &v0);
        let mut best_params = self.params.clone();
        let mut since_best = 0;

        let mut batch_order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=self.config.epochs {
            batch_order.shuffle(&mut rng);
            for chunk in batch_order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
                let (_, grads) = self.loss_gradients(&batch)?;
                self.params.adam_step(&grads, self.config.learning_rate)?;
            }
            let (t, v) = eval(self)?;
            history.epochs.push(EpochRecord {
                epoch,
                train: t,
                validation: v,
            });
            let s = score(&t, &v);
            if s < best_score {
                best_score = s;
                best_params = self.params.clone();
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if self.config.patience > 0 && since_best >= self.config.patience {
                    history.stopped_early = true;
                    break;
                }
            }
        }
        if self.config.epochs > 0 {
            self.params = best_params;
        }
        self.trained = true;
        Ok(history)
    }

    /// Fits statistics on `train`, initializes and trains a network.
    pub fn train(
        config: &NetworkConfig,
        train: &[UserHistory],
    ) -> Result<(Self, TrainingHistory), QnetError> {
        let stats = Self::fit_stats(config, train)?;
        let mut net = Self::new(config.clone(), stats)?;
        let samples = labeled_samples(train, &net.stats, &net.schema)?;
        if samples.is_empty() {
            return Err(QnetError::NoLabeledUsers);
        }
        let history = net.train_on(&samples)?;
        Ok((net, history))
    }

    pub fn require_trained(&self) -> Result<(), QnetError> {
        if self.trained {
            Ok(())
        } else {
            Err(QnetError::UntrainedModel)
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), QnetError> {
        self.params.save(dir)?;
        let sidecar = Sidecar {
            config: self.config.clone(),
            schema: self.schema,
            schema_hash: self.schema.hash(),
            stats: self.stats.clone(),
            fold: self.fold,
            trained: self.trained,
        };
        fs::write(
            dir.join("sidecar.json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, QnetError> {
        let sidecar: Sidecar =
            serde_json::from_str(&fs::read_to_string(dir.join("sidecar.json"))?)?;
        let expected = sidecar.schema.hash();
        if sidecar.schema_hash != expected {
            return Err(QnetError::SchemaMismatch {
                expected,
                found: sidecar.schema_hash,
            });
        }
        let params = ParamStore::load(dir)?;
        Ok(Self {
            config: sidecar.config,
            schema: sidecar.schema,
            stats: sidecar.stats,
            params,
            trained: sidecar.trained,
            fold: sidecar.fold,
        })
    }
}

/// Fraction of targets inside each interval (ties count as inside).
pub fn coverage(preds: &[Prediction], targets: &[f64]) -> Vec<f64> {
    let n_int = preds.first().map_or(0, |p| p.interval.half_widths.len());
    (0..n_int)
        .map(|i| {
            let inside = preds
                .iter()
                .zip(targets)
                .filter(|(p, y)| p.interval.contains(i, **y))
                .count();
            inside as f64 / preds.len().max(1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub quality_mse: f64,
    pub coverage: Vec<f64>,
    pub calibration_r: Option<f64>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: Variant,
    pub folds: Vec<FoldMetrics>,
    pub mean_mse: f64,
    pub se_mse: Option<f64>,
}

/// Seeded assignment of users to `folds` test folds.
pub fn fold_assignment(n_users: usize, folds: usize, seed: u64) -> Result<Vec<usize>, QnetError> {
    if folds < 2 || n_users < 2 * folds {
        return Err(QnetError::FoldTooSmall {
            users: n_users,
            folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng);
    let mut fold = vec![0; n_users];
    for (pos, &u) in order.iter().enumerate() {
        fold[u] = pos % folds;
    }
    Ok(fold)
}

/// Held-out evaluation of one model on `test` users.
/// Seeded train/test split: `true` marks the `round(fraction · n)` held-out users.
pub fn holdout_split(n_users: usize, fraction: f64, seed: u64) -> Result<Vec<bool>, QnetError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(QnetError::InvalidConfig(format!(
            "holdout fraction {fraction} outside [0, 1)"
        )));
    }
    let n_test = (fraction * n_users as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut order: Vec<usize> = (0..n_users).collect();
    order.shuffle(&mut rng);
    let mut test = vec![false; n_users];
    for &u in &order[..n_test] {
        test[u] = true;
    }
    Ok(test)
}

pub fn held_out_metrics(
    net: &QualityNet,
    test: &[UserHistory],
) -> Result<(f64, Vec<f64>, Option<f64>, usize), QnetError> {
    let samples = labeled_samples(test, &net.stats, &net.schema)?;
    if samples.is_empty() {
        return Err(QnetError::NoLabeledUsers);
    }
    let windows: Vec<&BehaviourWindow> = samples.iter().map(|s| &s.window).collect();
    let preds = net.predict(&windows)?;
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let q: Vec<f64> = preds.iter().map(|p| p.quality).collect();
    let mse = loss_quality(&q, &targets)?;
    let cov = coverage(&preds, &targets);
    let r = stats::pearson(&net.config.nominal_p(), &cov).map(|c| c.r);
    Ok((mse, cov, r, samples.len()))
}

/// K-fold cross-validation over users; statistics are refit on every
/// training fold.
pub fn cross_validate(
    histories: &[UserHistory],
    config: &NetworkConfig,
    folds: usize,
) -> Result<CvReport, QnetError> {
    let assignment = fold_assignment(histories.len(), folds, config.seed)?;
    let mut out = Vec::with_capacity(folds);
    for k in 0..folds {
        let train: Vec<UserHistory> = histories
            .iter()
            .zip(&assignment)
            .filter(|(_, &f)| f != k)
            .map(|(h, _)| h.clone())
            .collect();
        let test: Vec<UserHistory> = histories
            .iter()
            .zip(&assignment)
            .filter(|(_, &f)| f == k)
            .map(|(h, _)| h.clone())
            .collect();
        let (mut net, hist) = QualityNet::train(config, &train)?;
        net.fold = Some(k);
        let (mse, cov, r, n_test) = held_out_metrics(&net, &test)?;
        out.push(FoldMetrics {
            fold: k,
            n_train: train.len(),
            n_test,
            quality_mse: mse,
            coverage: cov,
            calibration_r: r,
            epochs_run: hist.epochs.len() - 1,
        });
    }
    let mses: Vec<f64> = out.iter().map(|f| f.quality_mse).collect();
    Ok(CvReport {
        variant: config.variant,
        mean_mse: stats::mean(&mses).unwrap_or(f64::NAN),
        se_mse: stats::standard_error(&mses),
        folds: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub baseline: CvReport,
    pub ablated: CvReport,
    /// Mean over folds of `ablated − baseline` MSE.
    pub mean_difference: f64,
    /// Paired two-sided t-test over folds.
    pub p_value: f64,
}

/// Baseline and `variant` trained on identical folds, seed and budget.
pub fn ablate(
    histories: &[UserHistory],
    config: &NetworkConfig,
    variant: Variant,
    folds: usize,
) -> Result<AblationReport, QnetError> {
    let base_cfg = NetworkConfig {
        variant: Variant::Baseline,
        ..config.clone()
    };
    let var_cfg = NetworkConfig {
        variant,
        ..config.clone()
    };
    let baseline = cross_validate(histories, &base_cfg, folds)?;
    let ablated = if variant == Variant::Baseline {
        baseline.clone()
    } else {
        cross_validate(histories, &var_cfg, folds)?
    };
    let a: Vec<f64> = ablated.folds.iter().map(|f| f.quality_mse).collect();
    let b: Vec<f64> = baseline.folds.iter().map(|f| f.quality_mse).collect();
    let test = stats::paired_t_test(&a, &b).map_err(|e| QnetError::InvalidConfig(e.to_string()))?;
    Ok(AblationReport {
        variant,
        mean_difference: test.mean_difference,
        p_value: test.p,
        baseline,
        ablated,
    })
}
