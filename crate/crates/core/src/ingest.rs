//! Raw device-event ingestion: parse pump/CGM streams, apply cohort
//! filters, snap events onto the uniform 5-minute grid, fill glucose gaps by
//! logarithmic interpolation and label self-reported events.

use chrono::{DateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use thiserror::Error;

/// Grid resolution.
pub const SLOT_SECONDS: i64 = 300;
/// CGM plausibility range; readings outside are treated as missing.
pub const CGM_MIN_MGDL: f64 = 20.0;
pub const CGM_MAX_MGDL: f64 = 600.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile document: {0}")]
    ProfileFormat(String),
    #[error("profile is missing required field `{0}`")]
    MissingProfileField(&'static str),
    #[error("profile schedule invalid: {0}")]
    InvalidSchedule(String),
    #[error("fewer than {needed} plausible glucose readings (found {found})")]
    NotEnoughGlucose { needed: usize, found: usize },
    #[error("nutrient table: {0}")]
    NutrientTable(String),
    #[error("grid csv: {0}")]
    GridCsv(String),
}

// ---------------------------------------------------------------------------
// Raw events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Cgm,
    Bolus,
    TempBasal,
    DefaultBasalSchedule,
    Carbs,
    Note,
}

impl EventKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cgm" => Some(Self::Cgm),
            "bolus" => Some(Self::Bolus),
            "temp_basal" => Some(Self::TempBasal),
            "default_basal_schedule" => Some(Self::DefaultBasalSchedule),
            "carbs" => Some(Self::Carbs),
            "note" => Some(Self::Note),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Cgm => "cgm",
            Self::Bolus => "bolus",
            Self::TempBasal => "temp_basal",
            Self::DefaultBasalSchedule => "default_basal_schedule",
            Self::Carbs => "carbs",
            Self::Note => "note",
        }
    }
}

/// One timestamped device event. Values are mg/dl for CGM readings, units
/// for boluses, U/h for basal rates and grams for carbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    #[serde(rename = "ts", alias = "timestamp")]
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    #[serde(default)]
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Why a row was rejected during parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RowIssueKind {
    UnknownKind,
    NegativeValue,
    MissingField,
    BadTimestamp,
    DurationRule,
    OutOfRangeCgm,
    BadFormat,
}

#[derive(Debug, Clone)]
pub struct RowIssue {
    /// 1-based line number in the input stream.
    pub line: usize,
    pub kind: RowIssueKind,
    pub detail: String,
}

/// Malformed rows are counted and reported, never silently dropped.
#[derive(Debug, Default, Clone)]
pub struct ParseReport {
    pub accepted: usize,
    pub issues: Vec<RowIssue>,
}

impl ParseReport {
    pub fn count(&self, kind: &RowIssueKind) -> usize {
        self.issues.iter().filter(|i| i.kind == *kind).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamFormat {
    Jsonl,
    Csv,
}

#[derive(Deserialize)]
struct WireEvent {
    #[serde(alias = "timestamp")]
    ts: String,
    kind: String,
    value: Option<f64>,
    duration_min: Option<i64>,
    text: Option<String>,
}

fn validate_wire(line_no: usize, wire: WireEvent) -> Result<RawEvent, RowIssue> {
    let issue = |kind: RowIssueKind, detail: String| RowIssue {
        line: line_no,
        kind,
        detail,
    };
    let kind = EventKind::parse(&wire.kind)
        .ok_or_else(|| issue(RowIssueKind::UnknownKind, format!("kind `{}`", wire.kind)))?;
    let timestamp = DateTime::parse_from_rfc3339(&wire.ts)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| issue(RowIssueKind::BadTimestamp, format!("`{}`: {e}", wire.ts)))?;
    let value = match (kind, wire.value) {
        (EventKind::Note, v) => v.unwrap_or(0.0),
        (_, Some(v)) => v,
        (_, None) => {
            return Err(issue(
                RowIssueKind::MissingField,
                format!("{} row without value", kind.as_str()),
            ))
        }
    };
    if value < 0.0 || !value.is_finite() {
        return Err(issue(RowIssueKind::NegativeValue, format!("value {value}")));
    }
    match (kind, wire.duration_min) {
        (EventKind::TempBasal, None) => {
            return Err(issue(
                RowIssueKind::DurationRule,
                "temp_basal requires duration_min".into(),
            ))
        }
        (EventKind::TempBasal, Some(d)) if d < 0 => {
            return Err(issue(RowIssueKind::DurationRule, format!("duration {d}")))
        }
        (k, Some(_)) if k != EventKind::TempBasal => {
            return Err(issue(
                RowIssueKind::DurationRule,
                format!("duration_min not allowed on {}", k.as_str()),
            ))
        }
        _ => {}
    }
    if kind == EventKind::Note && wire.text.as_deref().unwrap_or("").is_empty() {
        return Err(issue(RowIssueKind::MissingField, "note without text".into()));
    }
    if kind == EventKind::Cgm && !(CGM_MIN_MGDL..=CGM_MAX_MGDL).contains(&value) {
        return Err(issue(
            RowIssueKind::OutOfRangeCgm,
            format!("{value} mg/dl outside [{CGM_MIN_MGDL}, {CGM_MAX_MGDL}]"),
        ));
    }
    Ok(RawEvent {
        timestamp,
        kind,
        value,
        duration_min: wire.duration_min.map(|d| d as u32),
        text: wire.text,
    })
}

/// Parse one participant's event stream. Events come back sorted by
/// timestamp; per-row problems land in the report instead of aborting.
pub fn parse_events<R: Read>(
    reader: R,
    format: StreamFormat,
) -> Result<(Vec<RawEvent>, ParseReport), IngestError> {
    let mut events = Vec::new();
    let mut report = ParseReport::default();
    match format {
        StreamFormat::Jsonl => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line?;
                let line_no = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<WireEvent>(&line) {
                    Ok(wire) => match validate_wire(line_no, wire) {
                        Ok(ev) => {
                            events.push(ev);
                            report.accepted += 1;
                        }
                        Err(issue) => report.issues.push(issue),
                    },
                    Err(e) => report.issues.push(RowIssue {
                        line: line_no,
                        kind: RowIssueKind::BadFormat,
                        detail: e.to_string(),
                    }),
                }
            }
        }
        StreamFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .flexible(true)
                .from_reader(reader);
            for (i, rec) in rdr.records().enumerate() {
                let line_no = i + 2; // header occupies line 1
                match rec {
                    Ok(rec) => {
                        let get = |idx: usize| rec.get(idx).unwrap_or("").trim().to_string();
                        let parse_opt = |s: String| {
                            if s.is_empty() {
                                Ok(None)
                            } else {
                                s.parse::<f64>().map(Some).map_err(|e| e.to_string())
                            }
                        };
                        let value = match parse_opt(get(2)) {
                            Ok(v) => v,
                            Err(e) => {
                                report.issues.push(RowIssue {
                                    line: line_no,
                                    kind: RowIssueKind::BadFormat,
                                    detail: format!("value: {e}"),
                                });
                                continue;
                            }
                        };
                        let duration = match parse_opt(get(3)) {
                            Ok(v) => v.map(|d| d as i64),
                            Err(e) => {
                                report.issues.push(RowIssue {
                                    line: line_no,
                                    kind: RowIssueKind::BadFormat,
                                    detail: format!("duration_min: {e}"),
                                });
                                continue;
                            }
                        };
                        let text = get(4);
                        let wire = WireEvent {
                            ts: get(0),
                            kind: get(1),
                            value,
                            duration_min: duration,
                            text: if text.is_empty() { None } else { Some(text) },
                        };
                        match validate_wire(line_no, wire) {
                            Ok(ev) => {
                                events.push(ev);
                                report.accepted += 1;
                            }
                            Err(issue) => report.issues.push(issue),
                        }
                    }
                    Err(e) => report.issues.push(RowIssue {
                        line: line_no,
                        kind: RowIssueKind::BadFormat,
                        detail: e.to_string(),
                    }),
                }
            }
        }
    }
    events.sort_by_key(|e| e.timestamp);
    Ok((events, report))
}

// ---------------------------------------------------------------------------
// Patient profile
// ---------------------------------------------------------------------------

/// A half-hour block of the default basal schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBlock {
    /// Minutes since midnight; must be a multiple of 30.
    pub start_minute: u32,
    pub rate_u_per_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientProfile {
    pub participant_id: String,
    #[serde(default)]
    pub weight_kg: Option<f64>,
    #[serde(default, rename = "mean_basal_rate")]
    pub mean_basal_rate_u_per_h: Option<f64>,
    #[serde(default, rename = "mean_total_daily_insulin")]
    pub mean_total_daily_insulin_u: Option<f64>,
    #[serde(default, rename = "mean_daily_carbs")]
    pub mean_daily_carbs_g: Option<f64>,
    #[serde(default)]
    pub used_hcls: bool,
    pub default_basal_schedule: Vec<ScheduleBlock>,
}

impl PatientProfile {
    pub fn from_json_str(json: &str) -> Result<Self, IngestError> {
        let value: serde_json::Value = serde_json::from_str(json)
            .map_err(|e| IngestError::ProfileFormat(e.to_string()))?;
        if value.get("participant_id").is_none() {
            return Err(IngestError::MissingProfileField("participant_id"));
        }
        if value.get("default_basal_schedule").is_none() {
            return Err(IngestError::MissingProfileField("default_basal_schedule"));
        }
        let profile: Self = serde_json::from_value(value)
            .map_err(|e| IngestError::ProfileFormat(e.to_string()))?;
        profile.validate_schedule()?;
        Ok(profile)
    }

    pub fn validate_schedule(&self) -> Result<(), IngestError> {
        let s = &self.default_basal_schedule;
        if s.is_empty() {
            return Err(IngestError::InvalidSchedule("empty schedule".into()));
        }
        if s[0].start_minute != 0 {
            return Err(IngestError::InvalidSchedule(
                "schedule must start at midnight so the full day is covered".into(),
            ));
        }
        for w in s.windows(2) {
            if w[1].start_minute <= w[0].start_minute {
                return Err(IngestError::InvalidSchedule(
                    "schedule blocks must be strictly increasing".into(),
                ));
            }
        }
        for b in s {
            if b.start_minute % 30 != 0 || b.start_minute >= 24 * 60 {
                return Err(IngestError::InvalidSchedule(format!(
                    "block start {} not a half-hour graduation inside the day",
                    b.start_minute
                )));
            }
            if !(b.rate_u_per_h >= 0.0) || !b.rate_u_per_h.is_finite() {
                return Err(IngestError::InvalidSchedule(format!(
                    "rate {} must be non-negative",
                    b.rate_u_per_h
                )));
            }
        }
        if let Some(w) = self.weight_kg {
            if !(w > 0.0) {
                return Err(IngestError::ProfileFormat(format!(
                    "weight_kg must be positive, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Scheduled default rate at a minute-of-day.
    pub fn scheduled_rate(&self, minute_of_day: u32) -> f64 {
        let mut rate = self.default_basal_schedule[0].rate_u_per_h;
        for b in &self.default_basal_schedule {
            if b.start_minute <= minute_of_day {
                rate = b.rate_u_per_h;
            } else {
                break;
            }
        }
        rate
    }

    /// Mean scheduled basal rate, weighted by block duration.
    pub fn mean_schedule_rate(&self) -> f64 {
        let s = &self.default_basal_schedule;
        let mut total = 0.0;
        for (i, b) in s.iter().enumerate() {
            let end = if i + 1 < s.len() {
                s[i + 1].start_minute
            } else {
                24 * 60
            };
            total += b.rate_u_per_h * f64::from(end - b.start_minute);
        }
        total / (24.0 * 60.0)
    }
}

// ---------------------------------------------------------------------------
// Cohort filters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct CohortFlags {
    pub requires_hcls: bool,
    pub requires_androidaps_style_basal_log: bool,
    pub requires_demographics: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CohortDecision {
    Accept,
    Reject { reason: String },
}

/// Rejection is a value, not an error; the reason names the failed criterion.
pub fn apply_cohort_filters(profile: &PatientProfile, flags: &CohortFlags) -> CohortDecision {
    if flags.requires_hcls && !profile.used_hcls {
        return CohortDecision::Reject {
            reason: "hcls".into(),
        };
    }
    if flags.requires_androidaps_style_basal_log && profile.default_basal_schedule.is_empty() {
        return CohortDecision::Reject {
            reason: "basal_log".into(),
        };
    }
    if flags.requires_demographics
        && (profile.weight_kg.is_none()
            || profile.mean_total_daily_insulin_u.is_none()
            || profile.mean_daily_carbs_g.is_none())
    {
        return CohortDecision::Reject {
            reason: "demographics".into(),
        };
    }
    CohortDecision::Accept
}

// ---------------------------------------------------------------------------
// Grid
// ---------------------------------------------------------------------------

/// Slot index for a timestamp: nearest 5-minute boundary, half-way ties
/// rounding up to the later slot.
pub fn slot_of(ts: DateTime<Utc>) -> i64 {
    (ts.timestamp() + SLOT_SECONDS / 2).div_euclid(SLOT_SECONDS)
}

pub fn slot_time(slot: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(slot * SLOT_SECONDS, 0).unwrap()
}

/// Assign each event to its nearest 5-minute slot.
pub fn snap_to_grid(events: &[RawEvent]) -> Vec<(i64, RawEvent)> {
    events
        .iter()
        .map(|e| (slot_of(e.timestamp), e.clone()))
        .collect()
}

/// Binary event labels on one grid row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFlags(pub u8);

impl EventFlags {
    pub const EXERCISE: u8 = 1 << 0;
    pub const HIGH_FAT: u8 = 1 << 1;
    pub const HIGH_PROTEIN: u8 = 1 << 2;
    pub const ALCOHOL: u8 = 1 << 3;
    pub const CAFFEINE: u8 = 1 << 4;
    pub const EXERCISE_HI: u8 = 1 << 5;
    pub const EXERCISE_LO: u8 = 1 << 6;

    pub fn set(&mut self, bit: u8) {
        self.0 |= bit;
    }

    pub fn has(&self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub glucose_mgdl: Option<f64>,
    pub interpolated: bool,
    pub basal_u_per_h: f64,
    pub bolus_u: f64,
    pub carbs_g: f64,
    pub flags: EventFlags,
}

/// Uniform 5-minute per-participant series. Rows are spaced exactly
/// `SLOT_SECONDS` apart starting from `start_slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlucoseGrid {
    pub participant_id: String,
    pub start_slot: i64,
    pub rows: Vec<GridRow>,
}

impl GlucoseGrid {
    pub fn start_time(&self) -> DateTime<Utc> {
        slot_time(self.start_slot)
    }

    pub fn row_time(&self, idx: usize) -> DateTime<Utc> {
        slot_time(self.start_slot + idx as i64)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_bolus(&self) -> f64 {
        self.rows.iter().map(|r| r.bolus_u).sum()
    }

    pub fn total_carbs(&self) -> f64 {
        self.rows.iter().map(|r| r.carbs_g).sum()
    }
}

#[derive(Debug, Default, Clone)]
pub struct GridBuildReport {
    /// Overlapping temp basals resolved later-issued-wins; logged, not fatal.
    pub overlap_warnings: Vec<String>,
    pub duplicate_cgm_slots: usize,
}

/// Build the channel grid from snapped events.
///
/// Per slot: basal is the most recent instruction in effect (temp basals
/// fill every slot of their duration, later-issued wins on overlap; a logged
/// default-schedule rate covers its own slot; otherwise the profile schedule
/// for that time of day applies). Bolus and carbs are summed within the
/// slot. The grid spans the first to the last plausible CGM reading.
pub fn build_grid(
    events: &[RawEvent],
    profile: &PatientProfile,
) -> Result<(GlucoseGrid, GridBuildReport), IngestError> {
    let snapped = snap_to_grid(events);
    let cgm_slots: Vec<i64> = snapped
        .iter()
        .filter(|(_, e)| e.kind == EventKind::Cgm)
        .map(|(s, _)| *s)
        .collect();
    if cgm_slots.len() < 2 {
        return Err(IngestError::NotEnoughGlucose {
            needed: 2,
            found: cgm_slots.len(),
        });
    }
    let start_slot = *cgm_slots.iter().min().unwrap();
    let end_slot = *cgm_slots.iter().max().unwrap();
    let n = (end_slot - start_slot + 1) as usize;

    let mut report = GridBuildReport::default();
    let mut rows: Vec<GridRow> = (0..n)
        .map(|i| {
            let minute_of_day = ((start_slot + i as i64) * SLOT_SECONDS).rem_euclid(86_400) / 60;
            GridRow {
                glucose_mgdl: None,
                interpolated: false,
                basal_u_per_h: profile.scheduled_rate(minute_of_day as u32),
                bolus_u: 0.0,
                carbs_g: 0.0,
                flags: EventFlags::default(),
            }
        })
        .collect();

    // Default-schedule log entries cover their own slot.
    // Track the issue time so the most recent instruction wins.
    let mut default_issue: Vec<Option<DateTime<Utc>>> = vec![None; n];
    for (slot, ev) in &snapped {
        let idx = slot - start_slot;
        if idx < 0 || idx >= n as i64 {
            continue;
        }
        let idx = idx as usize;
        match ev.kind {
            EventKind::Cgm => {
                if rows[idx].glucose_mgdl.is_some() {
                    report.duplicate_cgm_slots += 1;
                }
                // Events are sorted, so the latest reading in a slot wins.
                rows[idx].glucose_mgdl = Some(ev.value);
            }
            EventKind::Bolus => rows[idx].bolus_u += ev.value,
            EventKind::Carbs => rows[idx].carbs_g += ev.value,
            EventKind::DefaultBasalSchedule => {
                if default_issue[idx].map_or(true, |t| ev.timestamp >= t) {
                    rows[idx].basal_u_per_h = ev.value;
                    default_issue[idx] = Some(ev.timestamp);
                }
            }
            EventKind::TempBasal | EventKind::Note => {}
        }
    }

    // Temp basals override everything for their duration.
    let mut temp_issue: Vec<Option<DateTime<Utc>>> = vec![None; n];
    for (slot, ev) in &snapped {
        if ev.kind != EventKind::TempBasal {
            continue;
        }
        let duration = ev.duration_min.unwrap_or(0) as i64;
        let covered = (duration * 60 + SLOT_SECONDS - 1) / SLOT_SECONDS;
        for k in 0..covered.max(1) {
            let idx = slot + k - start_slot;
            if idx < 0 || idx >= n as i64 {
                continue;
            }
            let idx = idx as usize;
            match temp_issue[idx] {
                Some(prev) => {
                    report.overlap_warnings.push(format!(
                        "temp basal overlap at {}: instruction from {} overrides {}",
                        slot_time(start_slot + idx as i64),
                        ev.timestamp,
                        prev
                    ));
                    if ev.timestamp >= prev {
                        rows[idx].basal_u_per_h = ev.value;
                        temp_issue[idx] = Some(ev.timestamp);
                    }
                }
                None => {
                    rows[idx].basal_u_per_h = ev.value;
                    temp_issue[idx] = Some(ev.timestamp);
                }
            }
        }
    }

    Ok((
        GlucoseGrid {
            participant_id: profile.participant_id.clone(),
            start_slot,
            rows,
        },
        report,
    ))
}

/// Fill glucose gaps between consecutive real readings by geometric
/// progression (linear in log-glucose). Filled rows are flagged
/// `interpolated`; real readings are preserved bit-exactly and the grid is
/// never extrapolated past the first or last reading.
pub fn interpolate_glucose(mut grid: GlucoseGrid) -> GlucoseGrid {
    let real: Vec<usize> = grid
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.glucose_mgdl.is_some() && !r.interpolated)
        .map(|(i, _)| i)
        .collect();
    for pair in real.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a <= 1 {
            continue;
        }
        let ga = grid.rows[a].glucose_mgdl.unwrap();
        let gb = grid.rows[b].glucose_mgdl.unwrap();
        let log_a = ga.ln();
        let log_b = gb.ln();
        let span = (b - a) as f64;
        for k in 1..(b - a) {
            let alpha = k as f64 / span;
            let row = &mut grid.rows[a + k];
            if row.glucose_mgdl.is_none() {
                row.glucose_mgdl = Some((log_a + alpha * (log_b - log_a)).exp());
                row.interpolated = true;
            }
        }
    }
    grid
}

// ---------------------------------------------------------------------------
// Event labelling
// ---------------------------------------------------------------------------

/// One row of the nutrient reference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientEntry {
    pub name_pattern: String,
    pub protein_g_per_100g: f64,
    pub fat_g_per_100g: f64,
    pub alcohol_g_per_100g: f64,
    pub caffeine_mg_per_100g: f64,
    /// Disambiguation weight when several patterns match.
    pub composition_pct: f64,
}

/// Labelling thresholds per 100 g of the matched item.
pub const PROTEIN_THRESHOLD_G: f64 = 12.5;
pub const FAT_THRESHOLD_G: f64 = 20.0;
pub const ALCOHOL_THRESHOLD_G: f64 = 1.0;
pub const CAFFEINE_THRESHOLD_MG: f64 = 1.0;

/// Load a nutrient table from CSV with header
/// `name_pattern,protein_g_per_100g,fat_g_per_100g,alcohol_g_per_100g,caffeine_mg_per_100g,composition_pct`.
pub fn load_nutrient_table<R: Read>(reader: R) -> Result<Vec<NutrientEntry>, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<NutrientEntry>() {
        let mut entry = rec.map_err(|e| IngestError::NutrientTable(e.to_string()))?;
        entry.name_pattern = entry.name_pattern.to_lowercase();
        for v in [
            entry.protein_g_per_100g,
            entry.fat_g_per_100g,
            entry.alcohol_g_per_100g,
            entry.caffeine_mg_per_100g,
            entry.composition_pct,
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(IngestError::NutrientTable(format!(
                    "negative nutrient value in `{}`",
                    entry.name_pattern
                )));
            }
        }
        out.push(entry);
    }
    Ok(out)
}

/// Exercise keyword stems, split into intensity classes. A note is
/// high-intensity when it names anything more strenuous than walking.
#[derive(Debug, Clone)]
pub struct ExerciseKeywords {
    pub low_intensity: Vec<String>,
    pub high_intensity: Vec<String>,
}

impl Default for ExerciseKeywords {
    fn default() -> Self {
        let low = ["walk", "stroll", "yoga", "stretch"];
        let high = [
            "run", "jog", "sprint", "cycl", "bik", "swim", "gym", "workout", "hiit", "hike",
            "hiking", "football", "tennis", "ski", "climb", "spin", "exercis",
        ];
        Self {
            low_intensity: low.iter().map(|s| s.to_string()).collect(),
            high_intensity: high.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn note_tokens(note: &str) -> Vec<String> {
    note.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn matches_keyword(tokens: &[String], stems: &[String]) -> bool {
    tokens
        .iter()
        .any(|t| stems.iter().any(|s| t.starts_with(s.as_str())))
}

#[derive(Debug, Default, Clone)]
pub struct LabelReport {
    /// Notes the classifier could not resolve; written to the review file.
    pub unmatched: Vec<String>,
    /// Notes matched to a nutrient entry under every threshold.
    pub matched_no_flag: usize,
    /// Notes whose slot falls outside the grid span.
    pub out_of_span: usize,
    pub labelled: usize,
}

/// Classify one note in isolation: exercise keywords take precedence, then
/// the longest matching nutrient pattern (ties broken by highest
/// composition percentage).
pub fn classify_note(
    note: &str,
    table: &[NutrientEntry],
    keywords: &ExerciseKeywords,
) -> Option<EventFlags> {
    let tokens = note_tokens(note);
    let mut flags = EventFlags::default();
    if matches_keyword(&tokens, &keywords.high_intensity) {
        flags.set(EventFlags::EXERCISE);
        flags.set(EventFlags::EXERCISE_HI);
        return Some(flags);
    }
    if matches_keyword(&tokens, &keywords.low_intensity) {
        flags.set(EventFlags::EXERCISE);
        flags.set(EventFlags::EXERCISE_LO);
        return Some(flags);
    }
    let lower = note.to_lowercase();
    let best = table
        .iter()
        .filter(|e| !e.name_pattern.is_empty() && lower.contains(&e.name_pattern))
        .max_by(|a, b| {
            (a.name_pattern.len(), a.composition_pct)
                .partial_cmp(&(b.name_pattern.len(), b.composition_pct))
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
    if best.protein_g_per_100g > PROTEIN_THRESHOLD_G {
        flags.set(EventFlags::HIGH_PROTEIN);
    }
    if best.fat_g_per_100g > FAT_THRESHOLD_G {
        flags.set(EventFlags::HIGH_FAT);
    }
    if best.alcohol_g_per_100g > ALCOHOL_THRESHOLD_G {
        flags.set(EventFlags::ALCOHOL);
    }
    if best.caffeine_mg_per_100g > CAFFEINE_THRESHOLD_MG {
        flags.set(EventFlags::CAFFEINE);
    }
    Some(flags)
}

/// Apply note classifications as event flags on the note's slot.
pub fn label_events(
    grid: &mut GlucoseGrid,
    notes: &[RawEvent],
    table: &[NutrientEntry],
    keywords: &ExerciseKeywords,
) -> LabelReport {
    let mut report = LabelReport::default();
    for ev in notes {
        if ev.kind != EventKind::Note {
            continue;
        }
        let text = ev.text.as_deref().unwrap_or("");
        let idx = slot_of(ev.timestamp) - grid.start_slot;
        if idx < 0 || idx >= grid.rows.len() as i64 {
            report.out_of_span += 1;
            continue;
        }
        match classify_note(text, table, keywords) {
            Some(flags) if !flags.is_empty() => {
                grid.rows[idx as usize].flags.0 |= flags.0;
                report.labelled += 1;
            }
            Some(_) => report.matched_no_flag += 1,
            None => report.unmatched.push(text.to_string()),
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Grid CSV round trip
// ---------------------------------------------------------------------------

pub const GRID_CSV_HEADER: &str = "timestamp,glucose,interpolated,basal,bolus,carbs,exercise,high_fat,high_protein,alcohol,caffeine,exercise_hi,exercise_lo";

pub fn write_grid_csv<W: Write>(grid: &GlucoseGrid, mut w: W) -> Result<(), IngestError> {
    writeln!(w, "{GRID_CSV_HEADER}")?;
    for (i, row) in grid.rows.iter().enumerate() {
        let ts = grid.row_time(i).to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        let glucose = row
            .glucose_mgdl
            .map(|g| format!("{g}"))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            ts,
            glucose,
            u8::from(row.interpolated),
            row.basal_u_per_h,
            row.bolus_u,
            row.carbs_g,
            u8::from(row.flags.has(EventFlags::EXERCISE)),
            u8::from(row.flags.has(EventFlags::HIGH_FAT)),
            u8::from(row.flags.has(EventFlags::HIGH_PROTEIN)),
            u8::from(row.flags.has(EventFlags::ALCOHOL)),
            u8::from(row.flags.has(EventFlags::CAFFEINE)),
            u8::from(row.flags.has(EventFlags::EXERCISE_HI)),
            u8::from(row.flags.has(EventFlags::EXERCISE_LO)),
        )?;
    }
    Ok(())
}

pub fn read_grid_csv<R: Read>(
    participant_id: &str,
    reader: R,
) -> Result<GlucoseGrid, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    let mut start_slot: Option<i64> = None;
    let mut prev_slot: Option<i64> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IngestError::GridCsv(e.to_string()))?;
        let get = |i: usize| rec.get(i).unwrap_or("").trim();
        let ts = DateTime::parse_from_rfc3339(get(0))
            .map_err(|e| IngestError::GridCsv(format!("timestamp: {e}")))?
            .with_timezone(&Utc);
        let slot = ts.timestamp() / SLOT_SECONDS;
        if ts.timestamp() % SLOT_SECONDS != 0 {
            return Err(IngestError::GridCsv(format!(
                "timestamp {ts} not on a 5-minute boundary"
            )));
        }
        if let Some(prev) = prev_slot {
            if slot != prev + 1 {
                return Err(IngestError::GridCsv(format!(
                    "rows not contiguous at {ts}"
                )));
            }
        }
        start_slot.get_or_insert(slot);
        prev_slot = Some(slot);
        let parse = |i: usize, name: &str| -> Result<f64, IngestError> {
            get(i)
                .parse::<f64>()
                .map_err(|e| IngestError::GridCsv(format!("{name}: {e}")))
        };
        let glucose = if get(1).is_empty() {
            None
        } else {
            Some(parse(1, "glucose")?)
        };
        let flag = |i: usize| get(i) == "1" || get(i) == "true";
        let mut flags = EventFlags::default();
        for (col, bit) in [
            (6, EventFlags::EXERCISE),
            (7, EventFlags::HIGH_FAT),
            (8, EventFlags::HIGH_PROTEIN),
            (9, EventFlags::ALCOHOL),
            (10, EventFlags::CAFFEINE),
            (11, EventFlags::EXERCISE_HI),
            (12, EventFlags::EXERCISE_LO),
        ] {
            if flag(col) {
                flags.set(bit);
            }
        }
        rows.push(GridRow {
            glucose_mgdl: glucose,
            interpolated: flag(2),
            basal_u_per_h: parse(3, "basal")?,
            bolus_u: parse(4, "bolus")?,
            carbs_g: parse(5, "carbs")?,
            flags,
        });
    }
    let start_slot = start_slot.ok_or_else(|| IngestError::GridCsv("empty grid".into()))?;
    Ok(GlucoseGrid {
        participant_id: participant_id.to_string(),
        start_slot,
        rows,
    })
}
