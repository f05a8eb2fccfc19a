// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diary records, the CSV interchange format, feature encoding,
//! standardization and 10-step behaviour windows.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Number of time steps in a behaviour window.
pub const WINDOW_STEPS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum DiaryError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("duplicate record for user `{user_id}` on {date}")]
    DuplicateUserDate { user_id: String, date: NaiveDate },
    #[error("line {line}: {reason}")]
    BadRow { line: u64, reason: String },
    #[error("user `{0}` has no records")]
    EmptyHistory(String),
    #[error("records of user `{0}` are not in strictly increasing date order")]
    UnorderedHistory(String),
    #[error("no record for user `{user_id}` on {date}")]
    AnchorNotFound { user_id: String, date: NaiveDate },
    #[error("standardization needs at least one training record")]
    EmptyTrainingSet,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum VariableKind {
    Numeric,
    Binary,
    /// Numeric with a period; encoded as a sine/cosine pair.
    Cyclic {
        period: f64,
    },
}

/// The 23 diary variables, in CSV column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    DateDay,
    DateMonth,
    DateYear,
    BedTimeHour,
    BedTimeMins,
    /// Time in bed with the lights still on.
    LightsOutDelay,
    /// Time in bed from lights off until asleep.
    SleepOnsetLatency,
    TimeAwakeAtNight,
    TotalSleepTime,
    TotalTimeInBed,
    TimesAwake,
    NoSleep,
    NoteWritten,
    Alcohol,
    Caffeine,
    Exercise,
    LightsOn,
    Nicotine,
    Noise,
    Pain,
    Partner,
    SleepingPills,
    Temperature,
}

impl Variable {
    pub const COUNT: usize = 23;

    pub const ALL: [Variable; Variable::COUNT] = [
        Variable::DateDay,
        Variable::DateMonth,
        Variable::DateYear,
        Variable::BedTimeHour,
        Variable::BedTimeMins,
        Variable::LightsOutDelay,
        Variable::SleepOnsetLatency,
        Variable::TimeAwakeAtNight,
        Variable::TotalSleepTime,
        Variable::TotalTimeInBed,
        Variable::TimesAwake,
        Variable::NoSleep,
        Variable::NoteWritten,
        Variable::Alcohol,
        Variable::Caffeine,
        Variable::Exercise,
        Variable::LightsOn,
        Variable::Nicotine,
        Variable::Noise,
        Variable::Pain,
        Variable::Partner,
        Variable::SleepingPills,
        Variable::Temperature,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Variable::DateDay => "date_day",
            Variable::DateMonth => "date_month",
            Variable::DateYear => "date_year",
            Variable::BedTimeHour => "bed_time_hour",
            Variable::BedTimeMins => "bed_time_mins",
            Variable::LightsOutDelay => "lights_out_delay",
            Variable::SleepOnsetLatency => "sleep_onset_latency",
            Variable::TimeAwakeAtNight => "time_awake_at_night",
            Variable::TotalSleepTime => "total_sleep_time",
            Variable::TotalTimeInBed => "total_time_in_bed",
            Variable::TimesAwake => "times_awake",
            Variable::NoSleep => "no_sleep",
            Variable::NoteWritten => "note_written",
            Variable::Alcohol => "alcohol",
            Variable::Caffeine => "caffeine",
            Variable::Exercise => "exercise",
            Variable::LightsOn => "lights_on",
            Variable::Nicotine => "nicotine",
            Variable::Noise => "noise",
            Variable::Pain => "pain",
            Variable::Partner => "partner",
            Variable::SleepingPills => "sleeping_pills",
            Variable::Temperature => "temperature",
        }
    }

    pub fn from_name(name: &str) -> Option<Variable> {
        Variable::ALL.iter().copied().find(|v| v.name() == name)
    }

    pub fn kind(self) -> VariableKind {
        use Variable::*;
        match self {
            DateDay => VariableKind::Cyclic { period: 31.0 },
            DateMonth => VariableKind::Cyclic { period: 12.0 },
            BedTimeHour => VariableKind::Cyclic { period: 24.0 },
            DateYear | BedTimeMins | LightsOutDelay | SleepOnsetLatency | TimeAwakeAtNight
            | TotalSleepTime | TotalTimeInBed | TimesAwake => VariableKind::Numeric,
            _ => VariableKind::Binary,
        }
    }

    pub fn unit(self) -> &'static str {
        use Variable::*;
        match self {
            DateDay => "day",
            DateMonth => "month",
            DateYear => "year",
            BedTimeHour => "hour",
            BedTimeMins | LightsOutDelay | SleepOnsetLatency | TimeAwakeAtNight
            | TotalSleepTime | TotalTimeInBed => "mins",
            TimesAwake => "count",
            _ => "flag",
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self.kind(), VariableKind::Binary)
    }

    pub fn is_minutes(self) -> bool {
        self.unit() == "mins"
    }

    /// Calendar fields, as opposed to sleep behaviour.
    pub fn is_calendar(self) -> bool {
        matches!(
            self,
            Variable::DateDay | Variable::DateMonth | Variable::DateYear
        )
    }

    /// Whether `value` is admissible for this variable.
    pub fn accepts(self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self.kind() {
            VariableKind::Binary => value == 0.0 || value == 1.0,
            _ if self == Variable::TotalSleepTime => (0.0..=24.0 * 60.0).contains(&value),
            _ if self.is_minutes() || self == Variable::TimesAwake => value >= 0.0,
            _ => true,
        }
    }
}

/// Reported sleep quality is an integer level in this range.
pub const QUALITY_MIN: i8 = -2;
pub const QUALITY_MAX: i8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiaryRecord {
    pub user_id: String,
    pub date: NaiveDate,
    pub values: [Option<f64>; Variable::COUNT],
    pub quality: Option<i8>,
}

impl DiaryRecord {
    pub fn empty(user_id: impl Into<String>, date: NaiveDate) -> Self {
        Self {
            user_id: user_id.into(),
            date,
            values: [None; Variable::COUNT],
            quality: None,
        }
    }

    pub fn get(&self, var: Variable) -> Option<f64> {
        self.values[var.index()]
    }

    pub fn set(&mut self, var: Variable, value: Option<f64>) {
        self.values[var.index()] = value;
    }

    /// Fills the three calendar variables from `date`.
    pub fn set_calendar_fields(&mut self) {
        self.set(Variable::DateDay, Some(self.date.day() as f64));
        self.set(Variable::DateMonth, Some(self.date.month() as f64));
        self.set(Variable::DateYear, Some(self.date.year() as f64));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub records: Vec<DiaryRecord>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, records: Vec<DiaryRecord>) -> Result<Self, DiaryError> {
        let user_id = user_id.into();
        if records.is_empty() {
            return Err(DiaryError::EmptyHistory(user_id));
        }
        if records.windows(2).any(|w| w[0].date >= w[1].date) {
            return Err(DiaryError::UnorderedHistory(user_id));
        }
        Ok(Self { user_id, records })
    }

    pub fn last(&self) -> &DiaryRecord {
        self.records.last().expect("history is never empty")
    }

    pub fn anchor_quality(&self) -> Option<i8> {
        self.last().quality
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.records.binary_search_by_key(&date, |r| r.date).ok()
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn csv_header() -> Vec<&'static str> {
    let mut h = vec!["user_id", "date"];
    h.extend(Variable::ALL.iter().map(|v| v.name()));
    h.push("quality");
    h
}

fn parse_cell(var: Variable, cell: &str) -> Option<f64> {
    let v: f64 = cell.trim().parse().ok()?;
    var.accepts(v).then_some(v)
}

fn parse_quality(cell: &str) -> Option<i8> {
    let v: f64 = cell.trim().parse().ok()?;
    let q = v as i8;
    (v.fract() == 0.0 && (QUALITY_MIN..=QUALITY_MAX).contains(&q)).then_some(q)
}

/// Reads diary CSV. Users come out in order of first appearance with records
/// sorted by date; unparseable or out-of-range cells become missing.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<UserHistory>, DiaryError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let expected = csv_header();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a.trim() != *b) {
        return Err(DiaryError::MalformedHeader(format!(
            "expected `{}`",
            expected.join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<DiaryRecord>> = HashMap::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let user_id = row[0].trim().to_string();
        if user_id.is_empty() {
            return Err(DiaryError::BadRow {
                line,
                reason: "empty user_id".into(),
            });
        }
        let date = NaiveDate::parse_from_str(row[1].trim(), "%Y-%m-%d").map_err(|e| {
            DiaryError::BadRow {
                line,
                reason: format!("date `{}`: {e}", &row[1]),
            }
        })?;
        let mut record = DiaryRecord::empty(user_id.clone(), date);
        for (i, var) in Variable::ALL.iter().enumerate() {
            record.values[i] = parse_cell(*var, &row[2 + i]);
        }
        record.quality = parse_quality(&row[2 + Variable::COUNT]);
        grouped
            .entry(user_id.clone())
            .or_insert_with(|| {
                order.push(user_id.clone());
                Vec::new()
            })
            .push(record);
    }

    let mut histories = Vec::with_capacity(order.len());
    for user_id in order {
        let mut records = grouped.remove(&user_id).expect("grouped by id");
        records.sort_by_key(|r| r.date);
        if let Some(w) = records.windows(2).find(|w| w[0].date == w[1].date) {
            return Err(DiaryError::DuplicateUserDate {
                user_id,
                date: w[0].date,
            });
        }
        histories.push(UserHistory::new(user_id, records)?);
    }
    Ok(histories)
}

pub fn parse_dataset(path: &Path) -> Result<Vec<UserHistory>, DiaryError> {
    read_dataset(File::open(path)?)
}

fn format_value(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_dataset<W: Write>(writer: W, histories: &[UserHistory]) -> Result<(), DiaryError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(csv_header())?;
    for h in histories {
        for r in &h.records {
            let mut row: Vec<String> = Vec::with_capacity(Variable::COUNT + 3);
            row.push(r.user_id.clone());
            row.push(r.date.format("%Y-%m-%d").to_string());
            row.extend(r.values.iter().map(|v| format_value(*v)));
            row.push(r.quality.map(|q| q.to_string()).unwrap_or_default());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, histories: &[UserHistory]) -> Result<(), DiaryError> {
    write_dataset(File::create(path)?, histories)
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeaturePart {
    Raw,
    Sin,
    Cos,
}

/// One encoded input column. `variable == None` is the reported-quality slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    pub variable: Option<Variable>,
    pub part: FeaturePart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    /// Expand cyclic variables into sine/cosine pairs.
    pub cyclic: bool,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        Self { cyclic: true }
    }
}

impl FeatureSchema {
    pub fn features(&self) -> Vec<Feature> {
        let mut out = Vec::new();
        for var in Variable::ALL {
            match var.kind() {
                VariableKind::Cyclic { .. } if self.cyclic => {
                    for (part, suffix) in [(FeaturePart::Sin, "sin"), (FeaturePart::Cos, "cos")] {
                        out.push(Feature {
                            name: format!("{}_{suffix}", var.name()),
                            variable: Some(var),
                            part,
                        });
                    }
                }
                _ => out.push(Feature {
                    name: var.name().to_string(),
                    variable: Some(var),
                    part: FeaturePart::Raw,
                }),
            }
        }
        out.push(Feature {
            name: "quality".into(),
            variable: None,
            part: FeaturePart::Raw,
        });
        out
    }

    pub fn len(&self) -> usize {
        Variable::COUNT + 1 + if self.cyclic { 3 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn quality_index(&self) -> usize {
        self.len() - 1
    }

    /// Index of the first encoded slot of `var`.
    pub fn index_of(&self, var: Variable) -> usize {
        let extra = if self.cyclic {
            Variable::ALL[..var.index()]
                .iter()
                .filter(|v| matches!(v.kind(), VariableKind::Cyclic { .. }))
                .count()
        } else {
            0
        };
        var.index() + extra
    }

    /// Stable digest of the encoded column names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in self.features() {
            h.update(f.name.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// `(sin(2πv/P), cos(2πv/P))`.
pub fn cyclic_pair(value: f64, period: f64) -> (f64, f64) {
    let angle = 2.0 * PI * value / period;
    (angle.sin(), angle.cos())
}

/// Encodes one record into raw (unstandardized) feature values and missing
/// flags. Missing slots hold 0. Both cyclic slots share the variable's flag.
pub fn encode_record(
    record: &DiaryRecord,
    schema: &FeatureSchema,
    include_quality: bool,
) -> (Vec<f64>, Vec<bool>) {
    let n = schema.len();
    let mut values = Vec::with_capacity(n);
    let mut miss = Vec::with_capacity(n);
    for var in Variable::ALL {
        let v = record.get(var);
        match var.kind() {
            VariableKind::Cyclic { period } if schema.cyclic => {
                let (s, c) = v.map_or((0.0, 0.0), |x| cyclic_pair(x, period));
                values.extend([s, c]);
                miss.extend([v.is_none(), v.is_none()]);
            }
            _ => {
                values.push(v.unwrap_or(0.0));
                miss.push(v.is_none());
            }
        }
    }
    let q = if include_quality {
        record.quality
    } else {
        None
    };
    values.push(q.map_or(0.0, f64::from));
    miss.push(q.is_none());
    (values, miss)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

const ZERO_VARIANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Features without spread; these pass through as 0.
    pub zero_variance: Vec<bool>,
}

impl StandardizationStats {
    /// Population mean and standard deviation of every encoded feature over
    /// all non-missing entries, pooled across users and days.
    pub fn fit(histories: &[UserHistory], schema: &FeatureSchema) -> Result<Self, DiaryError> {
        let n = schema.len();
        let mut count = vec![0usize; n];
        let mut sum = vec![0.0; n];
        for h in histories {
            for r in &h.records {
                let (v, m) = encode_record(r, schema, true);
                for i in 0..n {
                    if !m[i] {
                        count[i] += 1;
                        sum[i] += v[i];
                    }
                }
            }
        }
        if count.iter().all(|&c| c == 0) {
            return Err(DiaryError::EmptyTrainingSet);
        }
        let means: Vec<f64> = (0..n)
            .map(|i| {
                if count[i] > 0 {
                    sum[i] / count[i] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let mut sq = vec![0.0; n];
        for h in histories {
            for r in &h.records {
                let (v, m) = encode_record(r, schema, true);
                for i in 0..n {
                    if !m[i] {
                        sq[i] += (v[i] - means[i]).powi(2);
                    }
                }
            }
        }
        let stds: Vec<f64> = (0..n)
            .map(|i| {
                if count[i] > 0 {
                    (sq[i] / count[i] as f64).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let zero_variance = stds.iter().map(|&s| s < ZERO_VARIANCE).collect();
        Ok(Self {
            feature_names: schema.features().into_iter().map(|f| f.name).collect(),
            means,
            stds,
            zero_variance,
        })
    }

    /// Pass-through statistics (mean 0, std 1) for running without z-scoring.
    pub fn identity(schema: &FeatureSchema) -> Self {
        let n = schema.len();
        Self {
            feature_names: schema.features().into_iter().map(|f| f.name).collect(),
            means: vec![0.0; n],
            stds: vec![1.0; n],
            zero_variance: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn standardize(&self, feature: usize, value: f64) -> f64 {
        if self.zero_variance[feature] {
            0.0
        } else {
            (value - self.means[feature]) / self.stds[feature]
        }
    }

    pub fn destandardize(&self, feature: usize, z: f64) -> f64 {
        if self.zero_variance[feature] {
            self.means[feature]
        } else {
            self.means[feature] + z * self.stds[feature]
        }
    }
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// Standardized `WINDOW_STEPS x F` input. Step `WINDOW_STEPS - 1` is the
/// anchor day; missing entries hold 0 with their flag set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviourWindow {
    pub n_features: usize,
    pub x: Vec<f64>,
    pub miss: Vec<bool>,
    pub anchor_date: NaiveDate,
}

impl BehaviourWindow {
    pub const STEPS: usize = WINDOW_STEPS;
    pub const LAST: usize = WINDOW_STEPS - 1;

    pub fn x_at(&self, step: usize, feature: usize) -> f64 {
        self.x[step * self.n_features + feature]
    }

    pub fn miss_at(&self, step: usize, feature: usize) -> bool {
        self.miss[step * self.n_features + feature]
    }

    pub fn step_x(&self, step: usize) -> &[f64] {
        &self.x[step * self.n_features..(step + 1) * self.n_features]
    }

    pub fn step_miss(&self, step: usize) -> &[bool] {
        &self.miss[step * self.n_features..(step + 1) * self.n_features]
    }

    pub fn set_x(&mut self, step: usize, feature: usize, value: f64) {
        self.x[step * self.n_features + feature] = value;
    }

    pub fn set_miss(&mut self, step: usize, feature: usize, missing: bool) {
        self.miss[step * self.n_features + feature] = missing;
    }
}

/// The ten most recent records at or before `anchor`, oldest first, padded
/// at the front with fully-missing steps. The anchor day's quality is never
/// part of the input.
pub fn build_window(
    history: &UserHistory,
    anchor: NaiveDate,
    stats: &StandardizationStats,
    schema: &FeatureSchema,
) -> Result<BehaviourWindow, DiaryError> {
    let pos = history
        .position(anchor)
        .ok_or_else(|| DiaryError::AnchorNotFound {
            user_id: history.user_id.clone(),
            date: anchor,
        })?;
    let n = schema.len();
    let mut window = BehaviourWindow {
        n_features: n,
        x: vec![0.0; WINDOW_STEPS * n],
        miss: vec![true; WINDOW_STEPS * n],
        anchor_date: anchor,
    };
    let start = (pos + 1).saturating_sub(WINDOW_STEPS);
    let taken = &history.records[start..=pos];
    let offset = WINDOW_STEPS - taken.len();
    for (k, record) in taken.iter().enumerate() {
        let step = offset + k;
        let (values, miss) = encode_record(record, schema, step != BehaviourWindow::LAST);
        for f in 0..n {
            if !miss[f] {
                window.set_x(step, f, stats.standardize(f, values[f]));
                window.set_miss(step, f, false);
            }
        }
    }
    Ok(window)
}

/// Window anchored at the user's most recent record.
pub fn last_window(
    history: &UserHistory,
    stats: &StandardizationStats,
    schema: &FeatureSchema,
) -> BehaviourWindow {
    build_window(history, history.last().date, stats, schema).expect("last record exists")
}

// ---------------------------------------------------------------------------
// Descriptive statistics
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    pub unit: String,
    pub present: usize,
    pub mean: Option<f64>,
    pub p10: Option<f64>,
    pub p90: Option<f64>,
    /// Count of 1s for binary variables.
    pub positives: Option<usize>,
    pub proportion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub users: usize,
    pub records: usize,
    pub reports_mean: f64,
    pub reports_p10: f64,
    pub reports_p50: f64,
    pub reports_p90: f64,
    pub variables: Vec<VariableSummary>,
}

fn summarize(name: &str, unit: &str, binary: bool, mut values: Vec<f64>) -> VariableSummary {
    let present = values.len();
    values.sort_by(f64::total_cmp);
    let mean = (present > 0).then(|| values.iter().sum::<f64>() / present as f64);
    let positives = binary.then(|| values.iter().filter(|&&v| v == 1.0).count());
    VariableSummary {
        name: name.to_string(),
        unit: unit.to_string(),
        present,
        mean,
        p10: crate::stats::percentile_sorted(&values, 0.1),
        p90: crate::stats::percentile_sorted(&values, 0.9),
        positives,
        proportion: positives
            .filter(|_| present > 0)
            .map(|p| p as f64 / present as f64),
    }
}

pub fn descriptive_stats(histories: &[UserHistory]) -> DescriptiveStats {
    let mut counts: Vec<f64> = histories.iter().map(|h| h.records.len() as f64).collect();
    counts.sort_by(f64::total_cmp);
    let records: usize = histories.iter().map(|h| h.records.len()).sum();
    let mut variables = Vec::with_capacity(Variable::COUNT + 1);
    for var in Variable::ALL {
        let values: Vec<f64> = histories
            .iter()
            .flat_map(|h| h.records.iter().filter_map(move |r| r.get(var)))
            .collect();
        variables.push(summarize(var.name(), var.unit(), var.is_binary(), values));
    }
    let qualities: Vec<f64> = histories
        .iter()
        .flat_map(|h| h.records.iter().filter_map(|r| r.quality.map(f64::from)))
        .collect();
    variables.push(summarize("quality", "level", false, qualities));
    DescriptiveStats {
        users: histories.len(),
        records,
        reports_mean: if histories.is_empty() {
            0.0
        } else {
            records as f64 / histories.len() as f64
        },
        reports_p10: crate::stats::percentile_sorted(&counts, 0.1).unwrap_or(0.0),
        reports_p50: crate::stats::percentile_sorted(&counts, 0.5).unwrap_or(0.0),
        reports_p90: crate::stats::percentile_sorted(&counts, 0.9).unwrap_or(0.0),
        variables,
    }
}
