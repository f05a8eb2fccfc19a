// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation and explanation: effectiveness curves, recommender
//! comparisons, shuffle and flip robustness tests, interval calibration and
//! first/second-order input derivatives.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diary::{BehaviourWindow, UserHistory, Variable, WINDOW_STEPS};
use crate::qnet::{coverage, Prediction, QnetError, QualityNet};
use crate::recommend::{count_ignored, AdvisableSet, Recommendation};
use crate::stats::{self, Correlation, StatsError, TTest};
use crate::synthgen::{discretize, OracleModel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no users to evaluate")]
    NoUsers,
    #[error("no user followed every recommendation")]
    NoFullFollowers,
    #[error("no test users with a reported quality")]
    NoTestUsers,
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("recommendation for '{got}' does not match user '{expected}'")]
    RecommendationMismatch { expected: String, got: String },
    #[error("this scoring needs the synthetic oracle")]
    MissingOracle,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Qnet(#[from] QnetError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Where a user's quality comes from when a recommendation is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Scoring {
    /// The reported last-day quality (observational; real data).
    Reported,
    /// Oracle quality of the user's actual behaviour.
    OracleActual,
    /// Oracle quality with the advice substituted into the last day.
    Counterfactual,
    /// A fresh noisy, discretized report of the counterfactual quality.
    SimulatedReport { seed: u64 },
}

impl Scoring {
    pub fn name(self) -> &'static str {
        match self {
            Scoring::Reported => "reported",
            Scoring::OracleActual => "oracle-actual",
            Scoring::Counterfactual => "counterfactual",
            Scoring::SimulatedReport { .. } => "simulated-report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredUser {
    pub user_id: String,
    pub ignored: usize,
    pub quality: f64,
}

/// Scores each user under `scoring`. `recommendations[i]` must belong to
/// `histories[i]`; users without a reported quality are skipped when scoring
/// by reports.
pub fn score_users(
    recommendations: &[Recommendation],
    histories: &[&UserHistory],
    oracle: Option<&OracleModel>,
    advisable: &AdvisableSet,
    scoring: Scoring,
) -> Result<Vec<ScoredUser>, EvalError> {
    let mut out = Vec::with_capacity(histories.len());
    for (i, (rec, h)) in recommendations.iter().zip(histories).enumerate() {
        if rec.user_id != h.user_id {
            return Err(EvalError::RecommendationMismatch {
                expected: h.user_id.clone(),
                got: rec.user_id.clone(),
            });
        }
        let quality = match scoring {
            Scoring::Reported => match h.anchor_quality() {
                Some(q) => f64::from(q),
                None => continue,
            },
            Scoring::OracleActual => oracle.ok_or(EvalError::MissingOracle)?.quality(h, None),
            Scoring::Counterfactual => oracle
                .ok_or(EvalError::MissingOracle)?
                .quality(h, Some(&rec.action())),
            Scoring::SimulatedReport { seed } => {
                let o = oracle.ok_or(EvalError::MissingOracle)?;
                let clean = o.quality(h, Some(&rec.action()));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let noise = Normal::new(0.0, o.noise_sd)
                    .expect("finite sd")
                    .sample(&mut rng);
                f64::from(discretize(clean + noise))
            }
        };
        out.push(ScoredUser {
            user_id: h.user_id.clone(),
            ignored: count_ignored(rec, h.last(), advisable),
            quality,
        });
    }
    if recommendations.len() != histories.len() {
        return Err(EvalError::RecommendationMismatch {
            expected: format!("{} users", histories.len()),
            got: format!("{} recommendations", recommendations.len()),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub ignored: usize,
    pub n: usize,
    pub mean: f64,
    /// `None` for single-user buckets.
    pub se: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectivenessCurve {
    /// Non-empty buckets in ascending ignored count.
    pub buckets: Vec<Bucket>,
    pub users: Vec<ScoredUser>,
}

impl EffectivenessCurve {
    pub fn bucket(&self, ignored: usize) -> Option<&Bucket> {
        self.buckets.iter().find(|b| b.ignored == ignored)
    }

    pub fn qualities_in(&self, ignored: usize) -> Vec<f64> {
        self.users
            .iter()
            .filter(|u| u.ignored == ignored)
            .map(|u| u.quality)
            .collect()
    }

    pub fn qualities(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.quality).collect()
    }

    pub fn mean(&self) -> f64 {
        stats::mean(&self.qualities()).expect("curves are non-empty")
    }

    /// Spearman correlation between ignored count and quality over users.
    pub fn trend(&self) -> Option<Correlation> {
        let ig: Vec<f64> = self.users.iter().map(|u| u.ignored as f64).collect();
        stats::spearman(&ig, &self.qualities())
    }
}

pub fn effectiveness_curve(users: Vec<ScoredUser>) -> Result<EffectivenessCurve, EvalError> {
    if users.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let max = users.iter().map(|u| u.ignored).max().expect("non-empty");
    let buckets = (0..=max)
        .filter_map(|k| {
            let q: Vec<f64> = users
                .iter()
                .filter(|u| u.ignored == k)
                .map(|u| u.quality)
                .collect();
            (!q.is_empty()).then(|| Bucket {
                ignored: k,
                n: q.len(),
                mean: stats::mean(&q).expect("non-empty"),
                se: stats::standard_error(&q),
            })
        })
        .collect();
    Ok(EffectivenessCurve { buckets, users })
}

/// Two-sided Welch test between two groups of per-user qualities.
pub fn compare_recommenders(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    Ok(stats::welch_t_test(a, b)?)
}

/// Seeded single-cycle permutation (Sattolo), so no index maps to itself.
pub fn derangement(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub before: EffectivenessCurve,
    pub after: EffectivenessCurve,
    /// Bucket-0 qualities before vs after; `None` if a side has < 2 users.
    pub bucket0: Option<TTest>,
    /// All users before vs after.
    pub overall: TTest,
}

/// Gives each user another user's advice and rescores.
pub fn shuffle_test(
    recommendations: &[Recommendation],
    histories: &[&UserHistory],
    oracle: Option<&OracleModel>,
    advisable: &AdvisableSet,
    scoring: Scoring,
    seed: u64,
) -> Result<ShuffleReport, EvalError> {
    if histories.len() < 2 {
        return Err(EvalError::Stats(StatsError::InsufficientSamples {
            needed: 2,
            got: histories.len(),
        }));
    }
    let perm = derangement(recommendations.len(), seed);
    let shuffled: Vec<Recommendation> = perm
        .iter()
        .zip(histories)
        .map(|(&src, h)| recommendations[src].reassigned(&h.user_id))
        .collect();
    let before = effectiveness_curve(score_users(
        recommendations,
        histories,
        oracle,
        advisable,
        scoring,
    )?)?;
    let after = effectiveness_curve(score_users(
        &shuffled, histories, oracle, advisable, scoring,
    )?)?;
    let bucket0 = stats::welch_t_test(&before.qualities_in(0), &after.qualities_in(0)).ok();
    let overall = stats::welch_t_test(&before.qualities(), &after.qualities())?;
    Ok(ShuffleReport {
        before,
        after,
        bucket0,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipArm {
    /// `None` is the unswitched control.
    pub variable: Option<Variable>,
    pub n: usize,
    pub mean: f64,
    pub se: Option<f64>,
    /// Paired test of this arm against the control (switched − control).
    pub test: Option<TTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipReport {
    pub followers: usize,
    pub arms: Vec<FlipArm>,
}

impl FlipReport {
    pub fn arm(&self, v: Variable) -> Option<&FlipArm> {
        self.arms.iter().find(|a| a.variable == Some(v))
    }
}

/// For users who followed every recommendation, inverts one binary
/// recommendation at a time and rescores. Arms score the same users, so
/// each is tested against the control with a paired t-test. Simulated
/// reports draw independent noise for every arm.
pub fn flip_test(
    recommendations: &[Recommendation],
    histories: &[&UserHistory],
    oracle: Option<&OracleModel>,
    advisable: &AdvisableSet,
    scoring: Scoring,
) -> Result<FlipReport, EvalError> {
    let mut recs = Vec::new();
    let mut users = Vec::new();
    for (rec, h) in recommendations.iter().zip(histories) {
        if count_ignored(rec, h.last(), advisable) == 0 {
            recs.push(rec.clone());
            users.push(*h);
        }
    }
    if users.is_empty() {
        return Err(EvalError::NoFullFollowers);
    }
    let arm_scoring = |arm: u64| match scoring {
        Scoring::SimulatedReport { seed } => Scoring::SimulatedReport {
            seed: seed.wrapping_add(arm.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        },
        other => other,
    };
    let score = |rs: &[Recommendation], arm: u64| -> Result<Vec<f64>, EvalError> {
        Ok(
            score_users(rs, &users, oracle, advisable, arm_scoring(arm))?
                .into_iter()
                .map(|u| u.quality)
                .collect(),
        )
    };
    let control = score(&recs, 0)?;
    let mut arms = vec![FlipArm {
        variable: None,
        n: control.len(),
        mean: stats::mean(&control).expect("non-empty"),
        se: stats::standard_error(&control),
        test: None,
    }];
    for (k, var) in advisable.binary().into_iter().enumerate() {
        let flipped: Vec<Recommendation> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                if let Some(Some(v)) = r.values.get(&var).copied() {
                    r.values.insert(var, Some(1.0 - v));
                }
                r
            })
            .collect();
        let q = score(&flipped, k as u64 + 1)?;
        arms.push(FlipArm {
            variable: Some(var),
            n: q.len(),
            mean: stats::mean(&q).expect("non-empty"),
            se: stats::standard_error(&q),
            test: stats::paired_t_test(&q, &control).ok(),
        });
    }
    Ok(FlipReport {
        followers: users.len(),
        arms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub nominal: Vec<f64>,
    pub coverage: Vec<f64>,
    pub r: Option<f64>,
    pub p: Option<f64>,
    pub n: usize,
}

/// Coverage per interval and its correlation with the nominal levels.
pub fn calibration_from_predictions(
    predictions: &[Prediction],
    targets: &[f64],
    nominal: &[f64],
) -> Result<CalibrationReport, EvalError> {
    if targets.is_empty() {
        return Err(EvalError::NoTestUsers);
    }
    let cov = coverage(predictions, targets);
    let corr = stats::pearson(nominal, &cov);
    Ok(CalibrationReport {
        nominal: nominal.to_vec(),
        coverage: cov,
        r: corr.map(|c| c.r),
        p: corr.map(|c| c.p),
        n: targets.len(),
    })
}

pub fn calibration_report(
    net: &QualityNet,
    histories: &[&UserHistory],
) -> Result<CalibrationReport, EvalError> {
    let users: Vec<&UserHistory> = histories
        .iter()
        .copied()
        .filter(|h| h.anchor_quality().is_some())
        .collect();
    if users.is_empty() {
        return Err(EvalError::NoTestUsers);
    }
    let windows: Vec<BehaviourWindow> = users.iter().map(|h| net.window(h)).collect();
    let refs: Vec<&BehaviourWindow> = windows.iter().collect();
    let preds = net.predict(&refs)?;
    let targets: Vec<f64> = users
        .iter()
        .map(|h| f64::from(h.anchor_quality().expect("filtered")))
        .collect();
    calibration_from_predictions(&preds, &targets, &net.config.nominal_p())
}

/// Binary behaviour variables used by the derivative maps.
pub fn binary_variables() -> Vec<Variable> {
    Variable::ALL
        .into_iter()
        .filter(|v| v.is_binary())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub variables: Vec<Variable>,
    /// `mean[t][v]`: average dŷ/dz; `t = 9` is the anchor day.
    pub mean: Vec<Vec<f64>>,
    pub se: Vec<Vec<Option<f64>>>,
    pub n: usize,
}

/// Per-user dŷ/dz for every window step and binary variable, `[user][t][v]`.
pub fn saliency_samples(
    net: &QualityNet,
    histories: &[&UserHistory],
) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
    let vars = binary_variables();
    let f = net.n_features();
    let windows: Vec<BehaviourWindow> = histories.iter().map(|h| net.window(h)).collect();
    let refs: Vec<&BehaviourWindow> = windows.iter().collect();
    let cols: Vec<usize> = vars.iter().map(|v| net.schema.index_of(*v)).collect();
    Ok(net
        .input_gradients(&refs)?
        .into_iter()
        .map(|(_, g)| {
            (0..WINDOW_STEPS)
                .map(|t| cols.iter().map(|&c| g[t * f + c]).collect())
                .collect()
        })
        .collect())
}

pub fn first_order_saliency(
    net: &QualityNet,
    histories: &[&UserHistory],
) -> Result<SaliencyMap, EvalError> {
    if !net.trained {
        return Err(EvalError::UntrainedModel);
    }
    if histories.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let samples = saliency_samples(net, histories)?;
    let variables = binary_variables();
    let column = |t: usize, v: usize| -> Vec<f64> { samples.iter().map(|s| s[t][v]).collect() };
    let mean = (0..WINDOW_STEPS)
        .map(|t| {
            (0..variables.len())
                .map(|v| stats::mean(&column(t, v)).expect("non-empty"))
                .collect()
        })
        .collect();
    let se = (0..WINDOW_STEPS)
        .map(|t| {
            (0..variables.len())
                .map(|v| stats::standard_error(&column(t, v)))
                .collect()
        })
        .collect();
    Ok(SaliencyMap {
        variables,
        mean,
        se,
        n: samples.len(),
    })
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], reps: usize, level: f64, seed: u64) -> Option<(f64, f64)> {
    if values.is_empty() || reps == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..reps)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Some((
        stats::percentile_sorted(&means, tail)?,
        stats::percentile_sorted(&means, 1.0 - tail)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionMap {
    pub variables: Vec<Variable>,
    /// Signed mean d²ŷ/dz₁dz₂ at the anchor day, symmetrized.
    pub same_day: Vec<Vec<f64>>,
    /// `time_pairs[t1][t2]`: mean |d²ŷ/dz₁(t1)dz₂(t2)| over users and
    /// ordered pairs of distinct variables.
    pub time_pairs: Vec<Vec<f64>>,
    /// Largest |H[a,b] − H[b,a]| seen before symmetrizing.
    pub max_asymmetry: f64,
    pub n: usize,
}

impl InteractionMap {
    /// Mean of the diagonal (same-step) and off-diagonal cells of `time_pairs`.
    pub fn same_vs_cross(&self) -> (f64, f64) {
        let t = self.time_pairs.len();
        let (mut same, mut cross) = (0.0, 0.0);
        for a in 0..t {
            for b in 0..t {
                if a == b {
                    same += self.time_pairs[a][b];
                } else {
                    cross += self.time_pairs[a][b];
                }
            }
        }
        (same / t as f64, cross / (t * (t - 1)) as f64)
    }
}

/// Hessian over (step, binary variable) coordinates by central differences
/// of autodiff input gradients.
pub fn second_order_interactions(
    net: &QualityNet,
    histories: &[&UserHistory],
    h: f64,
) -> Result<InteractionMap, EvalError> {
    if !net.trained {
        return Err(EvalError::UntrainedModel);
    }
    if histories.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let variables = binary_variables();
    let v = variables.len();
    let f = net.n_features();
    let cols: Vec<usize> = variables.iter().map(|x| net.schema.index_of(*x)).collect();
    let coord = |t: usize, k: usize| t * v + k;
    let dim = WINDOW_STEPS * v;
    let base: Vec<BehaviourWindow> = histories.iter().map(|u| net.window(u)).collect();
    let n = base.len();
    // hess[u][a][b] = d/dz_a (dŷ/dz_b)
    let mut hess = vec![vec![vec![0.0; dim]; dim]; n];
    for t in 0..WINDOW_STEPS {
        for (k, &c) in cols.iter().enumerate() {
            let shifted = |delta: f64| -> Result<Vec<(f64, Vec<f64>)>, EvalError> {
                let ws: Vec<BehaviourWindow> = base
                    .iter()
                    .map(|w| {
                        let mut w = w.clone();
                        w.set_x(t, c, w.x_at(t, c) + delta);
                        w
                    })
                    .collect();
                let refs: Vec<&BehaviourWindow> = ws.iter().collect();
                Ok(net.input_gradients(&refs)?)
            };
            let plus = shifted(h)?;
            let minus = shifted(-h)?;
            let a = coord(t, k);
            for u in 0..n {
                for t2 in 0..WINDOW_STEPS {
                    for (k2, &c2) in cols.iter().enumerate() {
                        let idx = t2 * f + c2;
                        hess[u][a][coord(t2, k2)] = (plus[u].1[idx] - minus[u].1[idx]) / (2.0 * h);
                    }
                }
            }
        }
    }
    let mut max_asymmetry: f64 = 0.0;
    let mut same_day = vec![vec![0.0; v]; v];
    let mut time_pairs = vec![vec![0.0; WINDOW_STEPS]; WINDOW_STEPS];
    let last = BehaviourWindow::LAST;
    for hu in &hess {
        for a in 0..dim {
            for b in 0..dim {
                max_asymmetry = max_asymmetry.max((hu[a][b] - hu[b][a]).abs());
            }
        }
        for k1 in 0..v {
            for k2 in 0..v {
                let s = 0.5
                    * (hu[coord(last, k1)][coord(last, k2)] + hu[coord(last, k2)][coord(last, k1)]);
                same_day[k1][k2] += s / n as f64;
            }
        }
        for t1 in 0..WINDOW_STEPS {
            for t2 in 0..WINDOW_STEPS {
                let mut acc = 0.0;
                for k1 in 0..v {
                    for k2 in (0..v).filter(|&k2| k2 != k1) {
                        acc += hu[coord(t1, k1)][coord(t2, k2)].abs();
                    }
                }
                time_pairs[t1][t2] += acc / (v * (v - 1)) as f64 / n as f64;
            }
        }
    }
    Ok(InteractionMap {
        variables,
        same_day,
        time_pairs,
        max_asymmetry,
        n,
    })
}

/// `ignored,n,mean,se` rows.
pub fn write_curve<W: Write>(writer: W, curve: &EffectivenessCurve) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["ignored", "n", "mean", "se"])?;
    for b in &curve.buckets {
        w.write_record([
            b.ignored.to_string(),
            b.n.to_string(),
            b.mean.to_string(),
            b.se.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A labelled numeric matrix as CSV: header `row,<col names>`.
pub fn write_matrix<W: Write>(
    writer: W,
    row_names: &[String],
    col_names: &[String],
    values: &[Vec<f64>],
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string()];
    header.extend(col_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in row_names.iter().zip(values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diary::{DiaryRecord, FeatureSchema, StandardizationStats};
    use crate::qnet::{IntervalPrediction, NetworkConfig, Variant};
    use crate::recommend::{recommend_best_day, RecommenderKind};
    use chrono::NaiveDate;

    fn users(n: usize) -> Vec<UserHistory> {
        (0..n)
            .map(|i| {
                let mut recs = Vec::new();
                for d in 0..3u32 {
                    let mut r = DiaryRecord::empty(
                        format!("u{i}"),
                        NaiveDate::from_ymd_opt(2019, 1, 1 + d).unwrap(),
                    );
                    r.set_calendar_fields();
                    r.set(Variable::Alcohol, Some(f64::from(((i as u32) + d) % 2)));
                    r.set(Variable::Caffeine, Some(f64::from((i as u32 / 2) % 2)));
                    r.set(
                        Variable::SleepOnsetLatency,
                        Some(10.0 * f64::from(d) + i as f64),
                    );
                    r.quality = Some(((i + d as usize) % 5) as i8 - 2);
                    recs.push(r);
                }
                UserHistory::new(format!("u{i}"), recs).unwrap()
            })
            .collect()
    }

    fn echo(h: &UserHistory, adv: &AdvisableSet) -> Recommendation {
        let mut r = recommend_best_day(h, adv).unwrap();
        r.values = adv
            .variables
            .iter()
            .map(|&v| (v, h.last().get(v)))
            .collect();
        r
    }

    #[test]
    fn echo_recommender_fills_bucket_zero() {
        let hs = users(12);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let adv = AdvisableSet::base();
        let recs: Vec<Recommendation> = hs.iter().map(|h| echo(h, &adv)).collect();
        let curve =
            effectiveness_curve(score_users(&recs, &refs, None, &adv, Scoring::Reported).unwrap())
                .unwrap();
        assert_eq!(curve.buckets.len(), 1);
        assert_eq!(curve.buckets[0].n, 12);
        let mean = hs
            .iter()
            .map(|h| f64::from(h.anchor_quality().unwrap()))
            .sum::<f64>()
            / 12.0;
        assert!((curve.buckets[0].mean - mean).abs() < 1e-12);
    }

    #[test]
    fn single_user_bucket_has_no_se() {
        let c = effectiveness_curve(vec![
            ScoredUser {
                user_id: "a".into(),
                ignored: 0,
                quality: 1.0,
            },
            ScoredUser {
                user_id: "b".into(),
                ignored: 0,
                quality: 0.0,
            },
            ScoredUser {
                user_id: "c".into(),
                ignored: 2,
                quality: -1.0,
            },
        ])
        .unwrap();
        assert_eq!(c.buckets.iter().map(|b| b.n).sum::<usize>(), 3);
        assert_eq!(c.bucket(2).unwrap().se, None);
        assert!((c.bucket(0).unwrap().se.unwrap() - 0.5).abs() < 1e-12);
        assert!(c.bucket(1).is_none());
        assert!(matches!(
            effectiveness_curve(vec![]),
            Err(EvalError::NoUsers)
        ));
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for seed in 0..20 {
            let p = derangement(17, seed);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort_unstable();
            assert_eq!(s, (0..17).collect::<Vec<_>>());
        }
        assert_eq!(derangement(2, 5), vec![1, 0]);
    }

    #[test]
    fn broadcast_advice_is_shuffle_invariant() {
        let hs = users(10);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let adv = AdvisableSet::base();
        let mut recs: Vec<Recommendation> = hs.iter().map(|h| echo(h, &adv)).collect();
        let shared = recs[0].values.clone();
        for r in &mut recs {
            r.values = shared.clone();
            r.kind = RecommenderKind::BestNeighbourhood;
        }
        let rep = shuffle_test(&recs, &refs, None, &adv, Scoring::Reported, 3).unwrap();
        assert_eq!(rep.before, rep.after);
        assert_eq!(rep.overall.p, 1.0);
    }

    #[test]
    fn mismatched_recommendations_rejected() {
        let hs = users(3);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let adv = AdvisableSet::base();
        let mut recs: Vec<Recommendation> = hs.iter().map(|h| echo(h, &adv)).collect();
        recs.swap(0, 1);
        assert!(matches!(
            score_users(&recs, &refs, None, &adv, Scoring::Reported),
            Err(EvalError::RecommendationMismatch { .. })
        ));
        assert!(matches!(
            score_users(&recs[..0], &refs[..0], None, &adv, Scoring::Counterfactual),
            Ok(v) if v.is_empty()
        ));
    }

    #[test]
    fn welch_power_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..200).map(|_| n.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..200).map(|_| 1.0 + n.sample(&mut rng)).collect();
        assert!(compare_recommenders(&a, &b).unwrap().p < 1e-10);
        assert_eq!(compare_recommenders(&a, &a).unwrap().p, 1.0);
    }

    fn pred(center: f64, half: f64) -> Prediction {
        Prediction {
            quality: center,
            interval: IntervalPrediction {
                center,
                half_widths: vec![half; 9],
            },
        }
    }

    #[test]
    fn calibration_edges() {
        let nominal: Vec<f64> = (1..=9).map(|i| f64::from(i) / 10.0).collect();
        let targets = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let wide: Vec<Prediction> = targets.iter().map(|_| pred(0.0, 2.0)).collect();
        let rep = calibration_from_predictions(&wide, &targets, &nominal).unwrap();
        assert!(rep.coverage.iter().all(|&c| c == 1.0));
        assert_eq!(rep.r, None);
        let zero: Vec<Prediction> = targets.iter().map(|_| pred(0.5, 0.0)).collect();
        let rep = calibration_from_predictions(&zero, &targets, &nominal).unwrap();
        assert!(rep.coverage.iter().all(|&c| c == 0.0));
        let exact: Vec<Prediction> = targets.iter().map(|&t| pred(t, 0.0)).collect();
        let rep = calibration_from_predictions(&exact, &targets, &nominal).unwrap();
        assert!(rep.coverage.iter().all(|&c| c == 1.0));
        assert!(matches!(
            calibration_from_predictions(&[], &[], &nominal),
            Err(EvalError::NoTestUsers)
        ));
    }

    #[test]
    fn bootstrap_interval_brackets_mean() {
        let v: Vec<f64> = (0..50).map(|i| f64::from(i % 7) - 3.0).collect();
        let (lo, hi) = bootstrap_mean_ci(&v, 500, 0.95, 1).unwrap();
        let m = stats::mean(&v).unwrap();
        assert!(lo < m && m < hi);
        assert_eq!(bootstrap_mean_ci(&[], 10, 0.95, 1), None);
    }

    fn tiny_net(variant: Variant, hs: &[UserHistory]) -> QualityNet {
        let config = NetworkConfig {
            lstm_sizes: vec![6, 4],
            variant,
            epochs: 0,
            ..Default::default()
        };
        let stats = StandardizationStats::fit(hs, &config.schema()).unwrap();
        let mut net = QualityNet::new(config, stats).unwrap();
        net.trained = true;
        net
    }

    #[test]
    fn untrained_model_rejected() {
        let hs = users(4);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let mut net = tiny_net(Variant::Baseline, &hs);
        net.trained = false;
        assert!(matches!(
            first_order_saliency(&net, &refs),
            Err(EvalError::UntrainedModel)
        ));
        assert!(matches!(
            second_order_interactions(&net, &refs, 1e-3),
            Err(EvalError::UntrainedModel)
        ));
    }

    #[test]
    fn linear_probe_has_zero_hessian() {
        let hs = users(4);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let net = tiny_net(Variant::LinearProbe, &hs);
        let m = second_order_interactions(&net, &refs, 1e-3).unwrap();
        assert!(m.time_pairs.iter().flatten().all(|x| *x < 1e-5));
        assert!(m.same_day.iter().flatten().all(|x| x.abs() < 1e-5));
    }

    #[test]
    fn hessian_is_symmetric_and_maps_are_shaped() {
        let hs = users(3);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let net = tiny_net(Variant::Baseline, &hs);
        let m = second_order_interactions(&net, &refs, 1e-3).unwrap();
        assert!(m.max_asymmetry < 1e-4, "{}", m.max_asymmetry);
        assert_eq!(m.time_pairs.len(), WINDOW_STEPS);
        assert!(m.time_pairs.iter().flatten().all(|x| *x >= 0.0));
        for a in 0..m.same_day.len() {
            for b in 0..m.same_day.len() {
                assert_eq!(m.same_day[a][b], m.same_day[b][a]);
            }
        }
        let s = first_order_saliency(&net, &refs).unwrap();
        assert_eq!(s.mean.len(), WINDOW_STEPS);
        assert_eq!(s.mean[0].len(), 12);
        assert!(s.mean.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn saliency_unchanged_by_duplication() {
        let hs = users(5);
        let refs: Vec<&UserHistory> = hs.iter().collect();
        let doubled: Vec<&UserHistory> = hs.iter().chain(hs.iter()).collect();
        let net = tiny_net(Variant::Baseline, &hs);
        let a = first_order_saliency(&net, &refs).unwrap();
        let b = first_order_saliency(&net, &doubled).unwrap();
        for (ra, rb) in a.mean.iter().zip(&b.mean) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn curve_csv() {
        let c = effectiveness_curve(vec![
            ScoredUser {
                user_id: "a".into(),
                ignored: 0,
                quality: 1.0,
            },
            ScoredUser {
                user_id: "c".into(),
                ignored: 1,
                quality: -1.0,
            },
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_curve(&mut buf, &c).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "ignored,n,mean,se\n0,1,1,\n1,1,-1,\n"
        );
    }

    #[test]
    fn schema_is_default_for_maps() {
        assert_eq!(binary_variables().len(), 12);
        let s = FeatureSchema::default();
        assert!(binary_variables().iter().all(|v| s.index_of(*v) < s.len()));
    }
}
