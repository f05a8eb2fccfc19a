// SPDX-License-Identifier: MIT OR Apache-2.0

//! Behaviour recommenders and the ignored-recommendation rule.
//!
//! Four recommenders share one output type:
//! * gradient ascent on a trained [`QualityNet`] over the last-day inputs,
//! * the closed-form analogue on a stepwise [`LinearQualityModel`],
//! * the best-neighbourhood broadcast,
//! * the per-user best day.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diary::{
    encode_record, BehaviourWindow, DiaryRecord, FeatureSchema, StandardizationStats, UserHistory,
    Variable,
};
use crate::linear::{LinearQualityModel, Position};
use crate::qnet::{QnetError, QualityNet};
use crate::synthgen::Assignment;
use somnus_ad::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum RecommendError {
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("population has {got} eligible users, need at least {needed}")]
    PopulationTooSmall { needed: usize, got: usize },
    #[error("user {0} has no reported quality")]
    NoQualityReported(String),
    #[error("invalid ascent configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown advisable variant '{0}'")]
    UnknownVariant(String),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Minutes below which a numeric deviation still counts as followed.
pub const FOLLOW_TOLERANCE_MINUTES: f64 = 30.0;
pub const MAX_MINUTES: f64 = 720.0;
/// Threshold applied to de-standardized binary values.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvisableVariant {
    #[default]
    Base,
    PlusExercise,
    PlusPills,
    NoNoise,
}

impl AdvisableVariant {
    pub const ALL: [AdvisableVariant; 4] = [
        Self::Base,
        Self::PlusExercise,
        Self::PlusPills,
        Self::NoNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::PlusExercise => "plus-exercise",
            Self::PlusPills => "plus-pills",
            Self::NoNoise => "no-noise",
        }
    }
}

impl fmt::Display for AdvisableVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdvisableVariant {
    type Err = RecommendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| RecommendError::UnknownVariant(s.to_string()))
    }
}

/// Variables a recommender may change, in a fixed order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvisableSet {
    pub variables: Vec<Variable>,
}

impl AdvisableSet {
    /// Six binary and two minute variables.
    pub const BASE: [Variable; 8] = [
        Variable::Caffeine,
        Variable::Noise,
        Variable::Nicotine,
        Variable::LightsOn,
        Variable::Partner,
        Variable::Alcohol,
        Variable::SleepOnsetLatency,
        Variable::LightsOutDelay,
    ];

    pub fn base() -> Self {
        Self {
            variables: Self::BASE.to_vec(),
        }
    }

    pub fn for_variant(variant: AdvisableVariant) -> Self {
        let mut variables = Self::BASE.to_vec();
        match variant {
            AdvisableVariant::Base => {}
            AdvisableVariant::PlusExercise => variables.push(Variable::Exercise),
            AdvisableVariant::PlusPills => variables.push(Variable::SleepingPills),
            AdvisableVariant::NoNoise => variables.retain(|v| *v != Variable::Noise),
        }
        Self { variables }
    }

    pub fn custom(variables: Vec<Variable>) -> Self {
        Self { variables }
    }

    pub fn contains(&self, v: Variable) -> bool {
        self.variables.contains(&v)
    }

    pub fn binary(&self) -> Vec<Variable> {
        self.variables
            .iter()
            .copied()
            .filter(|v| v.is_binary())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecommenderKind {
    GradientNn,
    GradientLinear,
    BestNeighbourhood,
    BestDay,
}

impl RecommenderKind {
    pub const ALL: [RecommenderKind; 4] = [
        Self::GradientNn,
        Self::GradientLinear,
        Self::BestNeighbourhood,
        Self::BestDay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GradientNn => "nn",
            Self::GradientLinear => "linear",
            Self::BestNeighbourhood => "best-neighbourhood",
            Self::BestDay => "best-day",
        }
    }
}

impl fmt::Display for RecommenderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecommenderKind {
    type Err = RecommendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RecommendError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AscentTrace {
    pub iterations: usize,
    /// Model prediction at the user's current behaviour.
    pub start_quality: Option<f64>,
    /// Prediction at the continuous optimum, before binarization.
    pub relaxed_quality: Option<f64>,
    /// Prediction at the returned (binarized) behaviour.
    pub predicted_quality: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub user_id: String,
    pub kind: RecommenderKind,
    /// `None` means no advice for that variable.
    pub values: BTreeMap<Variable, Option<f64>>,
    /// Continuous values before binarization (gradient recommenders only).
    pub relaxed: BTreeMap<Variable, f64>,
    pub trace: AscentTrace,
    /// Set when the recommender could not move (e.g. no advisable column in a linear model).
    pub warning: bool,
}

impl Recommendation {
    fn new(user_id: &str, kind: RecommenderKind) -> Self {
        Self {
            user_id: user_id.to_string(),
            kind,
            values: BTreeMap::new(),
            relaxed: BTreeMap::new(),
            trace: AscentTrace::default(),
            warning: false,
        }
    }

    /// The advised values as an oracle action (variables without advice omitted).
    pub fn action(&self) -> Assignment {
        self.values
            .iter()
            .filter_map(|(v, x)| x.map(|x| (*v, x)))
            .collect()
    }

    /// Copy carrying another user's id; used when advice is reassigned.
    pub fn reassigned(&self, user_id: &str) -> Self {
        Self {
            user_id: user_id.to_string(),
            ..self.clone()
        }
    }
}

/// Binary mismatch, or a minute deviation above 30. Missing actuals and
/// variables without advice are skipped; only `advisable` variables count.
pub fn count_ignored(
    recommendation: &Recommendation,
    actual: &DiaryRecord,
    advisable: &AdvisableSet,
) -> usize {
    advisable
        .variables
        .iter()
        .filter(|v| {
            is_ignored(
                **v,
                recommendation.values.get(v).copied().flatten(),
                actual.get(**v),
            ) == Some(true)
        })
        .count()
}

/// `Some(ignored)` when both sides are present.
pub fn is_ignored(var: Variable, recommended: Option<f64>, actual: Option<f64>) -> Option<bool> {
    let (r, a) = (recommended?, actual?);
    Some(if var.is_binary() {
        r != a
    } else {
        (a - r).abs() > FOLLOW_TOLERANCE_MINUTES
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradientAscentConfig {
    /// Step size in z-space.
    pub step: f64,
    pub max_iterations: usize,
    /// Symmetric z-space bound on every advisable coordinate.
    pub clamp: f64,
}

impl Default for GradientAscentConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_iterations: 500,
            clamp: 4.0,
        }
    }
}

impl GradientAscentConfig {
    pub fn validate(&self) -> Result<(), RecommendError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(RecommendError::InvalidConfig(format!(
                "step {} must be positive",
                self.step
            )));
        }
        if self.max_iterations == 0 {
            return Err(RecommendError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        if !(self.clamp > 0.0) {
            return Err(RecommendError::InvalidConfig(format!(
                "clamp {} must be positive",
                self.clamp
            )));
        }
        Ok(())
    }
}

/// z-space interval for one advisable coordinate: the image of {0,1} for
/// binaries or [0, 720] minutes, intersected with `[−clamp, clamp]`.
fn z_box(var: Variable, to_z: impl Fn(f64) -> f64, clamp: f64) -> (f64, f64) {
    let (a, b) = if var.is_binary() {
        (to_z(0.0), to_z(1.0))
    } else {
        (to_z(0.0), to_z(MAX_MINUTES))
    };
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let (lo, hi) = (lo.max(-clamp), hi.min(clamp));
    if lo <= hi {
        (lo, hi)
    } else {
        // degenerate (e.g. zero-variance feature): pin to the nearest bound
        let p = lo.min(clamp).max(-clamp);
        (p, p)
    }
}

/// Maps a relaxed z-value back to a diary value.
fn finalize(var: Variable, value: f64) -> f64 {
    if var.is_binary() {
        if value >= BINARY_THRESHOLD {
            1.0
        } else {
            0.0
        }
    } else {
        value.clamp(0.0, MAX_MINUTES)
    }
}

struct Coord {
    var: Variable,
    feature: usize,
    lo: f64,
    hi: f64,
}

fn nn_coords(
    stats: &StandardizationStats,
    schema: &FeatureSchema,
    advisable: &AdvisableSet,
    clamp: f64,
) -> Vec<Coord> {
    advisable
        .variables
        .iter()
        .map(|&var| {
            let feature = schema.index_of(var);
            let (lo, hi) = z_box(var, |v| stats.standardize(feature, v), clamp);
            Coord {
                var,
                feature,
                lo,
                hi,
            }
        })
        .collect()
}

/// Writes the advisable coordinates of `points` into copies of the last-step rows.
fn last_step_inputs(
    base_x: &Tensor,
    base_m: &Tensor,
    coords: &[Coord],
    points: &[Vec<f64>],
    rows: &[usize],
) -> (Tensor, Tensor) {
    let f = base_x.cols();
    let mut x = Tensor::zeros(rows.len(), f);
    let mut m = Tensor::zeros(rows.len(), f);
    for (k, &r) in rows.iter().enumerate() {
        for j in 0..f {
            x.set(k, j, base_x.get(r, j));
            m.set(k, j, base_m.get(r, j));
        }
        for (c, z) in coords.iter().zip(&points[r]) {
            x.set(k, c.feature, *z);
            m.set(k, c.feature, 0.0);
        }
    }
    (x, m)
}

const NN_CHUNK: usize = 256;

/// Gradient ascent on the last-day advisable inputs of a trained network.
///
/// All users in a chunk step in lockstep, each with its own stop state:
/// a step that would lower the prediction is rejected and ends that user's
/// ascent, as does a clamped step that does not move, reaching +2, or the
/// iteration cap.
pub fn recommend_gradient_nn(
    net: &QualityNet,
    histories: &[&UserHistory],
    advisable: &AdvisableSet,
    cfg: &GradientAscentConfig,
) -> Result<Vec<Recommendation>, RecommendError> {
    if !net.trained {
        return Err(RecommendError::UntrainedModel);
    }
    cfg.validate()?;
    let coords = nn_coords(&net.stats, &net.schema, advisable, cfg.clamp);
    let mut out = Vec::with_capacity(histories.len());
    for chunk in histories.chunks(NN_CHUNK) {
        let windows: Vec<BehaviourWindow> = chunk.iter().map(|h| net.window(h)).collect();
        let refs: Vec<&BehaviourWindow> = windows.iter().collect();
        let ctx = net.last_step_context(&refs)?;
        let f = net.n_features();
        let last = BehaviourWindow::LAST;
        let mut base_x = Tensor::zeros(chunk.len(), f);
        let mut base_m = Tensor::zeros(chunk.len(), f);
        for (r, w) in windows.iter().enumerate() {
            for j in 0..f {
                base_x.set(r, j, w.x_at(last, j));
                base_m.set(r, j, if w.miss_at(last, j) { 1.0 } else { 0.0 });
            }
        }
        // start: current behaviour, missing entries at the mean, inside the box
        let mut points: Vec<Vec<f64>> = windows
            .iter()
            .map(|w| {
                coords
                    .iter()
                    .map(|c| {
                        let z = if w.miss_at(last, c.feature) {
                            0.0
                        } else {
                            w.x_at(last, c.feature)
                        };
                        z.clamp(c.lo, c.hi)
                    })
                    .collect()
            })
            .collect();
        let all: Vec<usize> = (0..chunk.len()).collect();
        let start_q = {
            let (x, m) = last_step_inputs(&base_x, &base_m, &coords, &points, &all);
            net.eval_last_step(&ctx, &x, &m)?
        };
        let mut quality = start_q.0.clone();
        let mut grad = start_q.1;
        let mut iterations = vec![0usize; chunk.len()];
        let mut active: Vec<usize> = all.iter().copied().filter(|&r| quality[r] < 2.0).collect();
        // gradient rows of `grad` are indexed by position in the previous active list
        let mut grad_row: Vec<usize> = all.clone();
        for _ in 0..cfg.max_iterations {
            if active.is_empty() {
                break;
            }
            let mut proposals = points.clone();
            let mut moving = Vec::with_capacity(active.len());
            for &r in &active {
                let gr = grad_row[r];
                let mut moved = false;
                for (k, c) in coords.iter().enumerate() {
                    let z = (points[r][k] + cfg.step * grad.get(gr, c.feature)).clamp(c.lo, c.hi);
                    moved |= z != points[r][k];
                    proposals[r][k] = z;
                }
                if moved {
                    moving.push(r);
                }
            }
            if moving.is_empty() {
                break;
            }
            let ctx_rows = ctx.select(&moving);
            let (x, m) = last_step_inputs(&base_x, &base_m, &coords, &proposals, &moving);
            let (q_new, g_new) = net.eval_last_step(&ctx_rows, &x, &m)?;
            let mut next_active = Vec::with_capacity(moving.len());
            for (k, &r) in moving.iter().enumerate() {
                if q_new[k] < quality[r] {
                    continue;
                }
                points[r] = proposals[r].clone();
                quality[r] = q_new[k];
                iterations[r] += 1;
                grad_row[r] = k;
                if quality[r] < 2.0 {
                    next_active.push(r);
                }
            }
            grad = g_new;
            active = next_active;
        }
        // final binarized behaviour and its prediction
        let mut finals: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
        let mut relaxed_values: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
        for r in 0..chunk.len() {
            let relaxed: Vec<f64> = coords
                .iter()
                .zip(&points[r])
                .map(|(c, z)| net.stats.destandardize(c.feature, *z))
                .collect();
            finals.push(
                coords
                    .iter()
                    .zip(&relaxed)
                    .map(|(c, v)| net.stats.standardize(c.feature, finalize(c.var, *v)))
                    .collect(),
            );
            relaxed_values.push(relaxed);
        }
        let (x, m) = last_step_inputs(&base_x, &base_m, &coords, &finals, &all);
        let (final_q, _) = net.eval_last_step(&ctx, &x, &m)?;
        for (r, h) in chunk.iter().enumerate() {
            let mut rec = Recommendation::new(&h.user_id, RecommenderKind::GradientNn);
            for (c, v) in coords.iter().zip(&relaxed_values[r]) {
                rec.values.insert(c.var, Some(finalize(c.var, *v)));
                rec.relaxed.insert(c.var, *v);
            }
            rec.trace = AscentTrace {
                iterations: iterations[r],
                start_quality: Some(start_q.0[r]),
                relaxed_quality: Some(quality[r]),
                predicted_quality: Some(final_q[r]),
            };
            out.push(rec);
        }
    }
    Ok(out)
}

/// Closed-form ascent on a linear model: moves along the (projected)
/// constant gradient until the prediction reaches +2 or every coordinate
/// sits on its bound.
pub fn recommend_gradient_linear(
    model: &LinearQualityModel,
    history: &UserHistory,
    advisable: &AdvisableSet,
    clamp: f64,
) -> Result<Recommendation, RecommendError> {
    let spec = &model.spec;
    let lm = &model.model;
    let mut row = spec.row(history);
    let mut rec = Recommendation::new(&history.user_id, RecommenderKind::GradientLinear);

    struct LinCoord {
        var: Variable,
        col: usize,
        mean: f64,
        std: f64,
        lo: f64,
        hi: f64,
        g: f64,
    }
    let mut coords = Vec::new();
    for &var in &advisable.variables {
        let Some(col) = spec.column_index(var, Position::Last, false) else {
            continue;
        };
        if let Some(ind) = spec.column_index(var, Position::Last, true) {
            row[ind] = 0.0;
        }
        let (mean, std) = (lm.x_mean[col], lm.x_std[col]);
        let to_z = |v: f64| if std > 0.0 { (v - mean) / std } else { 0.0 };
        let (lo, hi) = z_box(var, to_z, clamp);
        let g = lm.coefficient(col).unwrap_or(0.0) * std;
        // start inside the box
        let z0 = to_z(row[col]).clamp(lo, hi);
        row[col] = mean + z0 * std;
        coords.push(LinCoord {
            var,
            col,
            mean,
            std,
            lo,
            hi,
            g,
        });
    }
    let y0 = lm.predict(&row).expect("row from own spec");
    let z0: Vec<f64> = coords
        .iter()
        .map(|c| {
            if c.std > 0.0 {
                (row[c.col] - c.mean) / c.std
            } else {
                0.0
            }
        })
        .collect();
    rec.warning = coords.iter().all(|c| c.g == 0.0);

    // Piecewise-linear path z(t) = clamp(z0 + t·g); dy/dt = Σ g² over free coordinates.
    let mut t_stop = 0.0;
    if y0 < 2.0 && !rec.warning {
        let mut events: Vec<(f64, usize)> = coords
            .iter()
            .enumerate()
            .filter(|(_, c)| c.g != 0.0)
            .map(|(k, c)| {
                let bound = if c.g > 0.0 { c.hi } else { c.lo };
                (((bound - z0[k]) / c.g).max(0.0), k)
            })
            .collect();
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut rate: f64 = events.iter().map(|&(_, k)| coords[k].g * coords[k].g).sum();
        let (mut t, mut y) = (0.0, y0);
        let mut reached = false;
        for &(te, k) in &events {
            let reach = y + rate * (te - t);
            if reach >= 2.0 {
                t_stop = t + (2.0 - y) / rate;
                reached = true;
                break;
            }
            y = reach;
            t = te;
            rate -= coords[k].g * coords[k].g;
        }
        if !reached {
            // every moving coordinate is pinned before +2
            t_stop = t;
        }
    }
    let mut relaxed_row = row.clone();
    let mut final_row = row.clone();
    for (k, c) in coords.iter().enumerate() {
        let z = (z0[k] + t_stop * c.g).clamp(c.lo, c.hi);
        let v = c.mean + z * c.std;
        let fin = finalize(c.var, v);
        relaxed_row[c.col] = v;
        final_row[c.col] = fin;
        rec.values.insert(c.var, Some(fin));
        rec.relaxed.insert(c.var, v);
    }
    // advisable variables absent from the design (should not happen) get no advice
    for &var in &advisable.variables {
        rec.values.entry(var).or_insert(None);
    }
    rec.trace = AscentTrace {
        iterations: usize::from(t_stop > 0.0),
        start_quality: Some(y0),
        relaxed_quality: Some(lm.predict(&relaxed_row).expect("same width")),
        predicted_quality: Some(lm.predict(&final_row).expect("same width")),
    };
    Ok(rec)
}

/// Result of the population search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSleeper {
    pub user_id: String,
    pub neighbourhood_quality: f64,
    pub values: BTreeMap<Variable, Option<f64>>,
}

impl BestSleeper {
    /// The broadcast advice for one user.
    pub fn recommendation_for(&self, user_id: &str) -> Recommendation {
        let mut rec = Recommendation::new(user_id, RecommenderKind::BestNeighbourhood);
        rec.values = self.values.clone();
        rec
    }
}

pub const NEIGHBOURS: usize = 100;
pub const CANDIDATES: usize = 1000;

/// Searches seeded candidates for the user whose nearest neighbours (by
/// z-scored last-day behaviour, missing at 0) report the best mean quality.
pub fn recommend_best_neighbourhood(
    histories: &[UserHistory],
    advisable: &AdvisableSet,
    seed: u64,
) -> Result<BestSleeper, RecommendError> {
    let eligible: Vec<&UserHistory> = histories
        .iter()
        .filter(|h| h.anchor_quality().is_some())
        .collect();
    let needed = CANDIDATES + NEIGHBOURS;
    if eligible.len() < needed {
        return Err(RecommendError::PopulationTooSmall {
            needed,
            got: eligible.len(),
        });
    }
    let schema = FeatureSchema::default();
    let q = schema.quality_index();
    let encoded: Vec<(Vec<f64>, Vec<bool>)> = eligible
        .iter()
        .map(|h| encode_record(h.last(), &schema, false))
        .collect();
    let f = schema.len();
    let mut z = vec![vec![0.0; f]; eligible.len()];
    for j in (0..f).filter(|&j| j != q) {
        let vals: Vec<f64> = encoded.iter().filter(|e| !e.1[j]).map(|e| e.0[j]).collect();
        let Some(mean) = crate::stats::mean(&vals) else {
            continue;
        };
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        if sd == 0.0 {
            continue;
        }
        for (row, e) in z.iter_mut().zip(&encoded) {
            if !e.1[j] {
                row[j] = (e.0[j] - mean) / sd;
            }
        }
    }
    let quality: Vec<f64> = eligible
        .iter()
        .map(|h| f64::from(h.anchor_quality().expect("eligible")))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates = rand::seq::index::sample(&mut rng, eligible.len(), CANDIDATES).into_vec();
    candidates.sort_unstable();

    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&c| {
            let mut d: Vec<(f64, usize)> = (0..eligible.len())
                .filter(|&u| u != c)
                .map(|u| {
                    (
                        z[c].iter()
                            .zip(&z[u])
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>(),
                        u,
                    )
                })
                .collect();
            d.select_nth_unstable_by(NEIGHBOURS - 1, |a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| eligible[a.1].user_id.cmp(&eligible[b.1].user_id))
            });
            d[..NEIGHBOURS]
                .iter()
                .map(|&(_, u)| quality[u])
                .sum::<f64>()
                / NEIGHBOURS as f64
        })
        .collect();
    let mut best = 0;
    for k in 1..candidates.len() {
        let (a, b) = (scores[k], scores[best]);
        if a > b || (a == b && eligible[candidates[k]].user_id < eligible[candidates[best]].user_id)
        {
            best = k;
        }
    }
    let winner = eligible[candidates[best]];
    Ok(BestSleeper {
        user_id: winner.user_id.clone(),
        neighbourhood_quality: scores[best],
        values: advisable
            .variables
            .iter()
            .map(|&v| (v, winner.last().get(v)))
            .collect(),
    })
}

/// Behaviour of the user's best-rated day; ties go to the most recent day.
pub fn recommend_best_day(
    history: &UserHistory,
    advisable: &AdvisableSet,
) -> Result<Recommendation, RecommendError> {
    let best = history
        .records
        .iter()
        .filter(|r| r.quality.is_some())
        .max_by_key(|r| (r.quality, r.date))
        .ok_or_else(|| RecommendError::NoQualityReported(history.user_id.clone()))?;
    let mut rec = Recommendation::new(&history.user_id, RecommenderKind::BestDay);
    rec.values = advisable
        .variables
        .iter()
        .map(|&v| (v, best.get(v)))
        .collect();
    Ok(rec)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per (user, advisable variable). `histories` supplies the
/// actual last-day values, looked up by user id.
pub fn write_recommendations<W: Write>(
    writer: W,
    recommendations: &[Recommendation],
    histories: &[UserHistory],
    advisable: &AdvisableSet,
) -> Result<(), RecommendError> {
    let by_id: BTreeMap<&str, &UserHistory> =
        histories.iter().map(|h| (h.user_id.as_str(), h)).collect();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "user_id",
        "variable",
        "recommended_value",
        "actual_value",
        "ignored",
    ])?;
    for rec in recommendations {
        let actual = by_id.get(rec.user_id.as_str()).map(|h| h.last());
        for &var in &advisable.variables {
            let r = rec.values.get(&var).copied().flatten();
            let a = actual.and_then(|rec| rec.get(var));
            let ignored = match is_ignored(var, r, a) {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([
                rec.user_id.as_str(),
                var.name(),
                &fmt_opt(r),
                &fmt_opt(a),
                ignored,
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
