// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic diary populations with a known quality function.
//!
//! Each user gets an independent ChaCha stream, so user `i` is the same
//! whatever the population size. Labels come from a second per-user stream,
//! which lets [`OracleModel::label_noise`] replay them exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::diary::{DiaryRecord, UserHistory, Variable, VariableKind, WINDOW_STEPS};

/// Values for a subset of last-day variables.
pub type Assignment = BTreeMap<Variable, f64>;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub seed: u64,
    pub missing_rate: f64,
    /// Median of the log-normal report-count distribution.
    pub reports_median: f64,
    /// Log-scale spread; 1.037 puts P10/P90 near 3 and 34 for a median of 9.
    pub reports_sigma: f64,
    pub max_reports: usize,
    /// Standard deviation of the per-report noise added before rounding.
    pub noise_sd: f64,
    pub bias_mean: f64,
    pub bias_sd: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            seed: 0,
            missing_rate: 0.1,
            reports_median: 9.0,
            reports_sigma: 1.037,
            max_reports: 200,
            noise_sd: 0.3,
            bias_mean: -0.2,
            bias_sd: 0.6,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 {
            return Err(SynthError::InvalidConfig(
                "n_users must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(SynthError::InvalidConfig(
                "missing_rate must lie in [0, 1)".into(),
            ));
        }
        if !(self.reports_median >= 1.0 && self.reports_sigma >= 0.0 && self.max_reports >= 1) {
            return Err(SynthError::InvalidConfig(
                "bad report-count parameters".into(),
            ));
        }
        if !(self.noise_sd >= 0.0 && self.bias_sd >= 0.0) {
            return Err(SynthError::InvalidConfig("negative spread".into()));
        }
        Ok(())
    }
}

/// Linear main effect of one variable: `weight * (value - reference) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub variable: Variable,
    pub weight: f64,
    pub reference: f64,
    pub scale: f64,
}

/// Same-day product of two transformed variables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: Variable,
    pub b: Variable,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleModel {
    pub seed: u64,
    pub effects: Vec<Effect>,
    pub interactions: Vec<Interaction>,
    /// Multiplier applied per step back in the window.
    pub decay: f64,
    pub noise_sd: f64,
    /// Per-user additive offset.
    pub user_bias: BTreeMap<String, f64>,
    /// Position of each user in the generation order (noise stream id).
    pub user_stream: BTreeMap<String, u64>,
}

fn binary(variable: Variable, weight: f64) -> Effect {
    Effect {
        variable,
        weight,
        reference: 0.0,
        scale: 1.0,
    }
}

fn minutes(variable: Variable, weight_per_hour: f64, reference: f64) -> Effect {
    Effect {
        variable,
        weight: weight_per_hour,
        reference,
        scale: 60.0,
    }
}

/// Population weights shared by every generated population.
pub fn default_effects() -> (Vec<Effect>, Vec<Interaction>) {
    use Variable::*;
    let effects = vec![
        minutes(LightsOutDelay, -0.3, 30.0),
        minutes(SleepOnsetLatency, -0.6, 30.0),
        minutes(TimeAwakeAtNight, -0.4, 30.0),
        minutes(TotalSleepTime, 0.3, 420.0),
        Effect {
            variable: TimesAwake,
            weight: -0.05,
            reference: 2.0,
            scale: 1.0,
        },
        binary(NoSleep, -1.0),
        binary(Alcohol, -0.4),
        binary(Caffeine, -0.5),
        binary(Exercise, 0.4),
        binary(LightsOn, -0.4),
        binary(Nicotine, 0.0),
        binary(Noise, -0.5),
        binary(Pain, -0.5),
        binary(Partner, 0.5),
        binary(SleepingPills, 0.3),
        binary(Temperature, -0.3),
    ];
    let interactions = vec![
        Interaction {
            a: Alcohol,
            b: SleepingPills,
            weight: -0.8,
        },
        Interaction {
            a: Partner,
            b: Pain,
            weight: -1.2,
        },
        Interaction {
            a: Caffeine,
            b: Exercise,
            weight: 1.0,
        },
        Interaction {
            a: LightsOutDelay,
            b: Temperature,
            weight: -1.0,
        },
    ];
    (effects, interactions)
}

const NOISE_STREAM_OFFSET: u64 = 1 << 40;

impl OracleModel {
    /// Default weights with no users registered.
    pub fn with_default_weights(seed: u64, noise_sd: f64) -> Self {
        let (effects, interactions) = default_effects();
        Self {
            seed,
            effects,
            interactions,
            decay: 0.5,
            noise_sd,
            user_bias: BTreeMap::new(),
            user_stream: BTreeMap::new(),
        }
    }

    fn transform(&self, var: Variable, value: Option<f64>) -> f64 {
        let Some(v) = value else { return 0.0 };
        match self.effects.iter().find(|e| e.variable == var) {
            Some(e) => (v - e.reference) / e.scale,
            None => v,
        }
    }

    fn day_score(&self, values: &[Option<f64>; Variable::COUNT]) -> f64 {
        let main: f64 = self
            .effects
            .iter()
            .map(|e| e.weight * self.transform(e.variable, values[e.variable.index()]))
            .sum();
        let pairs: f64 = self
            .interactions
            .iter()
            .map(|i| {
                i.weight
                    * self.transform(i.a, values[i.a.index()])
                    * self.transform(i.b, values[i.b.index()])
            })
            .sum();
        main + pairs
    }

    pub fn bias(&self, user_id: &str) -> f64 {
        self.user_bias.get(user_id).copied().unwrap_or(0.0)
    }

    /// Noise-free quality of the record at `index`, with `action` substituted
    /// into that day. Missing values contribute nothing. Clamped to [−2, 2].
    pub fn quality_at(
        &self,
        history: &UserHistory,
        index: usize,
        action: Option<&Assignment>,
    ) -> f64 {
        let mut s = self.bias(&history.user_id);
        let first = (index + 1).saturating_sub(WINDOW_STEPS);
        for (lag, record) in history.records[first..=index].iter().rev().enumerate() {
            let factor = self.decay.powi(lag as i32);
            let score = if lag == 0 {
                let mut values = record.values;
                if let Some(a) = action {
                    for (var, v) in a {
                        values[var.index()] = Some(*v);
                    }
                }
                self.day_score(&values)
            } else {
                self.day_score(&record.values)
            };
            s += factor * score;
        }
        s.clamp(-2.0, 2.0)
    }

    /// [`OracleModel::quality_at`] on the last record.
    pub fn quality(&self, history: &UserHistory, action: Option<&Assignment>) -> f64 {
        self.quality_at(history, history.records.len() - 1, action)
    }

    /// The per-record noise stream used for the stored labels of a user.
    pub fn label_noise(&self, user_id: &str, n_records: usize) -> Result<Vec<f64>, SynthError> {
        let stream = *self
            .user_stream
            .get(user_id)
            .ok_or_else(|| SynthError::UnknownUser(user_id.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(NOISE_STREAM_OFFSET + stream);
        let normal = Normal::new(0.0, self.noise_sd.max(0.0)).expect("finite sd");
        Ok((0..n_records).map(|_| normal.sample(&mut rng)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Rounds to the nearest quality level.
pub fn discretize(q: f64) -> i8 {
    q.round().clamp(-2.0, 2.0) as i8
}

/// Per-user behaviour tendencies.
struct Habits {
    binary_rate: [f64; Variable::COUNT],
    minutes_scale: f64,
    bed_hour: f64,
}

/// Population base rates for the binary variables. Alcohol, pills and the
/// no-sleep flag follow the reference table; the other rates are raised so
/// the planted effects are learnable from a few thousand users.
fn base_rate(var: Variable) -> f64 {
    use Variable::*;
    match var {
        NoSleep => 0.006,
        NoteWritten => 0.181,
        Alcohol => 0.046,
        Caffeine => 0.20,
        Exercise => 0.25,
        LightsOn => 0.08,
        Nicotine => 0.05,
        Noise => 0.10,
        Pain => 0.25,
        Partner => 0.40,
        SleepingPills => 0.042,
        Temperature => 0.20,
        _ => 0.0,
    }
}

fn draw_habits(rng: &mut ChaCha8Rng) -> Habits {
    let spread = 0.5_f64;
    let propensity = LogNormal::new(-spread * spread / 2.0, spread).expect("valid");
    let mut binary_rate = [0.0; Variable::COUNT];
    for var in Variable::ALL.iter().filter(|v| v.is_binary()) {
        binary_rate[var.index()] = (base_rate(*var) * propensity.sample(rng)).min(0.95);
    }
    let minutes_scale = LogNormal::new(-0.08, 0.4).expect("valid").sample(rng);
    let bed_hour = Normal::new(22.5, 1.0).expect("valid").sample(rng);
    Habits {
        binary_rate,
        minutes_scale,
        bed_hour,
    }
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

fn draw_record(
    rng: &mut ChaCha8Rng,
    user_id: &str,
    date: NaiveDate,
    habits: &Habits,
) -> DiaryRecord {
    use Variable::*;
    let mut r = DiaryRecord::empty(user_id, date);
    r.set_calendar_fields();
    let hour = (habits.bed_hour + Normal::new(0.0, 1.0).expect("valid").sample(rng)).round();
    r.set(BedTimeHour, Some(hour.rem_euclid(24.0)));
    r.set(BedTimeMins, Some(15.0 * rng.random_range(0..4) as f64));
    let exp_minutes = |mean: f64, cap: f64, rng: &mut ChaCha8Rng| {
        let e = Exp::new(1.0 / (mean * habits.minutes_scale)).expect("positive rate");
        round_to(e.sample(rng), 5.0).min(cap)
    };
    let delay = exp_minutes(24.0, 240.0, rng);
    let onset = exp_minutes(27.6, 240.0, rng);
    let awake = exp_minutes(30.0, 300.0, rng);
    let in_bed = exp_minutes(31.0, 300.0, rng);
    r.set(LightsOutDelay, Some(delay));
    r.set(SleepOnsetLatency, Some(onset));
    r.set(TimeAwakeAtNight, Some(awake));
    r.set(TotalTimeInBed, Some(in_bed));
    let wakes: f64 = Poisson::new(2.0).expect("valid").sample(rng);
    r.set(TimesAwake, Some(wakes.min(20.0)));
    for var in Variable::ALL.iter().filter(|v| v.is_binary()) {
        let on = rng.random_bool(habits.binary_rate[var.index()]);
        r.set(*var, Some(if on { 1.0 } else { 0.0 }));
    }
    let sleep = if r.get(NoSleep) == Some(1.0) {
        0.0
    } else {
        round_to(Normal::new(418.0, 90.0).expect("valid").sample(rng), 5.0).clamp(0.0, 1440.0)
    };
    r.set(TotalSleepTime, Some(sleep));
    r
}

fn report_count(rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> usize {
    let dist = LogNormal::new(config.reports_median.ln(), config.reports_sigma).expect("valid");
    (dist.sample(rng).ceil() as usize).clamp(1, config.max_reports)
}

/// Width of the zero-padded numeric part of generated user ids.
fn id_width(n_users: usize) -> usize {
    n_users.to_string().len().max(5)
}

pub fn user_id(index: usize, n_users: usize) -> String {
    format!("u{:0width$}", index, width = id_width(n_users))
}

/// Generates `config.n_users` histories plus the oracle that labelled them.
pub fn generate_population(
    config: &GeneratorConfig,
) -> Result<(Vec<UserHistory>, OracleModel), SynthError> {
    config.validate()?;
    let mut oracle = OracleModel::with_default_weights(config.seed, config.noise_sd);
    let epoch = NaiveDate::from_ymd_opt(2016, 1, 1).expect("valid date");
    let bias_dist = Normal::new(config.bias_mean, config.bias_sd).expect("finite sd");
    let mut histories = Vec::with_capacity(config.n_users);

    for index in 0..config.n_users {
        let id = user_id(index, config.n_users);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);

        let bias = bias_dist.sample(&mut rng);
        let habits = draw_habits(&mut rng);
        let n = report_count(&mut rng, config);
        let mut date = epoch + Days::new(rng.random_range(0..900));
        let mut records = Vec::with_capacity(n);
        let mut quality_missing = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                let gap = if rng.random_bool(0.7) {
                    1
                } else {
                    rng.random_range(2..=5)
                };
                date = date + Days::new(gap);
            }
            let mut record = draw_record(&mut rng, &id, date, &habits);
            for var in Variable::ALL {
                if rng.random_bool(config.missing_rate) {
                    record.set(var, None);
                }
            }
            quality_missing.push(rng.random_bool(config.missing_rate));
            records.push(record);
        }
        let mut history = UserHistory::new(id.clone(), records).expect("dates increase");
        oracle.user_bias.insert(id.clone(), bias);
        oracle.user_stream.insert(id.clone(), index as u64);

        let noise = oracle.label_noise(&id, n)?;
        for k in 0..n {
            let clean = oracle.quality_at(&history, k, None);
            history.records[k].quality =
                (!quality_missing[k]).then(|| discretize(clean + noise[k]));
        }
        histories.push(history);
    }
    Ok((histories, oracle))
}

/// Grid used for numeric variables by [`oracle_best_action`]: 0..=120 by 15.
pub const MINUTE_GRID: [f64; 9] = [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 105.0, 120.0];

/// Exhaustive search over `{0,1}` for binary variables and [`MINUTE_GRID`]
/// for numeric ones. Enumeration is lexicographic in `advisable` order with
/// ascending values, and only a strictly better action replaces the
/// incumbent, so ties go to the lexicographically smallest assignment.
pub fn oracle_best_action(
    oracle: &OracleModel,
    history: &UserHistory,
    advisable: &[Variable],
) -> (Assignment, f64) {
    let choices: Vec<&[f64]> = advisable
        .iter()
        .map(|v| match v.kind() {
            VariableKind::Binary => &[0.0, 1.0][..],
            _ => &MINUTE_GRID[..],
        })
        .collect();
    let mut digits = vec![0usize; advisable.len()];
    let mut best: Option<(Assignment, f64)> = None;
    loop {
        let action: Assignment = advisable
            .iter()
            .zip(&digits)
            .enumerate()
            .map(|(k, (v, &d))| (*v, choices[k][d]))
            .collect();
        let q = oracle.quality(history, Some(&action));
        if best.as_ref().is_none_or(|(_, bq)| q > *bq) {
            best = Some((action, q));
        }
        // odometer increment, last position fastest
        let mut pos = advisable.len();
        loop {
            if pos == 0 {
                return best.expect("at least one action");
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < choices[pos].len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> (Vec<UserHistory>, OracleModel) {
        generate_population(&GeneratorConfig {
            n_users: n,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn bare_oracle() -> OracleModel {
        OracleModel {
            seed: 0,
            effects: vec![],
            interactions: vec![],
            decay: 0.5,
            noise_sd: 0.0,
            user_bias: BTreeMap::new(),
            user_stream: BTreeMap::new(),
        }
    }

    fn one_day(values: &[(Variable, f64)]) -> UserHistory {
        let mut r = DiaryRecord::empty("x", NaiveDate::from_ymd_opt(2017, 1, 1).unwrap());
        for (v, x) in values {
            r.set(*v, Some(*x));
        }
        UserHistory::new("x", vec![r]).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = GeneratorConfig {
            n_users: 0,
            ..Default::default()
        };
        assert!(generate_population(&bad).is_err());
        let bad = GeneratorConfig {
            missing_rate: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let (a, oa) = small(7, 30);
        let (b, ob) = small(7, 30);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let (c, _) = small(8, 30);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_replay_from_noise_stream() {
        let (hs, oracle) = small(3, 40);
        for h in &hs {
            let noise = oracle.label_noise(&h.user_id, h.records.len()).unwrap();
            for (k, r) in h.records.iter().enumerate() {
                if let Some(q) = r.quality {
                    let clean = oracle.quality_at(h, k, None);
                    assert_eq!(q, discretize(clean + noise[k]));
                }
            }
        }
    }

    #[test]
    fn actual_behaviour_action_is_identity() {
        let (hs, oracle) = small(5, 20);
        for h in &hs {
            let last = h.last();
            let action: Assignment = [Variable::Alcohol, Variable::SleepOnsetLatency]
                .into_iter()
                .filter_map(|v| last.get(v).map(|x| (v, x)))
                .collect();
            assert_eq!(oracle.quality(h, Some(&action)), oracle.quality(h, None));
        }
    }

    #[test]
    fn single_alcohol_weight() {
        let mut oracle = bare_oracle();
        oracle.effects.push(binary(Variable::Alcohol, -0.5));
        let h = one_day(&[(Variable::Alcohol, 0.0)]);
        let on = oracle.quality(&h, Some(&Assignment::from([(Variable::Alcohol, 1.0)])));
        let off = oracle.quality(&h, Some(&Assignment::from([(Variable::Alcohol, 0.0)])));
        assert_eq!(on - off, -0.5);
    }

    #[test]
    fn random_actions_stay_in_range() {
        let (hs, oracle) = small(11, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let h = &hs[rng.random_range(0..hs.len())];
            let action = Assignment::from([
                (Variable::Alcohol, rng.random_range(0..2) as f64),
                (Variable::LightsOutDelay, rng.random_range(0.0..720.0)),
                (Variable::SleepOnsetLatency, rng.random_range(0.0..720.0)),
            ]);
            let q = oracle.quality(h, Some(&action));
            assert!((-2.0..=2.0).contains(&q));
        }
    }

    #[test]
    fn best_action_prefers_no_alcohol() {
        let mut oracle = bare_oracle();
        oracle.effects.push(binary(Variable::Alcohol, -0.5));
        let h = one_day(&[(Variable::Alcohol, 1.0)]);
        let (best, q) = oracle_best_action(&oracle, &h, &[Variable::Alcohol, Variable::Caffeine]);
        assert_eq!(best[&Variable::Alcohol], 0.0);
        // caffeine is irrelevant: tie goes to the smaller value
        assert_eq!(best[&Variable::Caffeine], 0.0);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn missing_values_contribute_nothing() {
        let mut oracle = bare_oracle();
        oracle
            .effects
            .push(minutes(Variable::SleepOnsetLatency, -0.6, 30.0));
        let h = one_day(&[]);
        assert_eq!(oracle.quality(&h, None), 0.0);
    }

    #[test]
    fn lag_weights_decay() {
        let mut oracle = bare_oracle();
        oracle.effects.push(binary(Variable::Noise, -1.0));
        let day = |d: u32, noise: f64| {
            let mut r = DiaryRecord::empty("x", NaiveDate::from_ymd_opt(2017, 1, d).unwrap());
            r.set(Variable::Noise, Some(noise));
            r
        };
        let h = UserHistory::new("x", vec![day(1, 1.0), day(2, 0.0), day(3, 0.0)]).unwrap();
        assert_eq!(oracle.quality(&h, None), -0.25);
    }

    #[test]
    fn oracle_json_round_trip() {
        let (_, oracle) = small(2, 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("oracle.json");
        oracle.save(&p).unwrap();
        assert_eq!(OracleModel::load(&p).unwrap(), oracle);
    }
}
