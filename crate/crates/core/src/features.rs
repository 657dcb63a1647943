//! Model-ready features: per-slot activity metrics (IOB/COB), overlapping
//! 4-hour windows with a 5-minute-ahead target, scenario tags, chronological
//! splits and window persistence.
//!
//! Windows are handles into shared per-participant feature tables and are
//! materialized into a `48 × F` row-major matrix on demand, so a month of
//! overlapping windows costs table memory, not window memory.

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::Arc;
use thiserror::Error;

use crate::ingest::{EventFlags, GlucoseGrid, PatientProfile};

/// Steps per window: 4 hours at 5-minute resolution.
pub const WINDOW_STEPS: usize = 48;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("profile has no weight but the weight channel was requested")]
    MissingWeight,
    #[error("grid row {0} has no glucose value; interpolate before windowing")]
    MissingGlucose(usize),
    #[error("channel list invalid: {0}")]
    BadChannels(String),
    #[error("split fractions invalid: {0}")]
    BadFractions(String),
    #[error("split produced an empty partition ({0})")]
    EmptySplit(&'static str),
    #[error("window sets have different channel schemas")]
    SchemaMismatch,
    #[error("windows file: {0}")]
    FileFormat(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Channels
// ---------------------------------------------------------------------------

/// Input channels of a feature window. The first nine follow the standard
/// feature set; the binary event channels are optional extras.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Glucose,
    HclsBasal,
    TotalInsulin,
    InsulinActivity,
    Carbs,
    CarbActivity,
    MeanBasalRate,
    WeightKg,
    HourOfDay,
    Exercise,
    HighFat,
    HighProtein,
    Alcohol,
    Caffeine,
    ExerciseHigh,
    ExerciseLow,
}

impl Channel {
    pub const BASE: [Channel; 9] = [
        Channel::Glucose,
        Channel::HclsBasal,
        Channel::TotalInsulin,
        Channel::InsulinActivity,
        Channel::Carbs,
        Channel::CarbActivity,
        Channel::MeanBasalRate,
        Channel::WeightKg,
        Channel::HourOfDay,
    ];

    pub const EVENT: [Channel; 7] = [
        Channel::Exercise,
        Channel::HighFat,
        Channel::HighProtein,
        Channel::Alcohol,
        Channel::Caffeine,
        Channel::ExerciseHigh,
        Channel::ExerciseLow,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Channel::Glucose => "glucose",
            Channel::HclsBasal => "hcls_basal",
            Channel::TotalInsulin => "total_insulin",
            Channel::InsulinActivity => "insulin_activity",
            Channel::Carbs => "carbs",
            Channel::CarbActivity => "carb_activity",
            Channel::MeanBasalRate => "mean_basal_rate",
            Channel::WeightKg => "weight_kg",
            Channel::HourOfDay => "hour_of_day",
            Channel::Exercise => "exercise",
            Channel::HighFat => "high_fat",
            Channel::HighProtein => "high_protein",
            Channel::Alcohol => "alcohol",
            Channel::Caffeine => "caffeine",
            Channel::ExerciseHigh => "exercise_hi",
            Channel::ExerciseLow => "exercise_lo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::BASE
            .iter()
            .chain(Self::EVENT.iter())
            .copied()
            .find(|c| c.as_str() == s)
    }

    fn code(&self) -> u8 {
        match self {
            Channel::Glucose => 0,
            Channel::HclsBasal => 1,
            Channel::TotalInsulin => 2,
            Channel::InsulinActivity => 3,
            Channel::Carbs => 4,
            Channel::CarbActivity => 5,
            Channel::MeanBasalRate => 6,
            Channel::WeightKg => 7,
            Channel::HourOfDay => 8,
            Channel::Exercise => 9,
            Channel::HighFat => 10,
            Channel::HighProtein => 11,
            Channel::Alcohol => 12,
            Channel::Caffeine => 13,
            Channel::ExerciseHigh => 14,
            Channel::ExerciseLow => 15,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        [
            Channel::Glucose,
            Channel::HclsBasal,
            Channel::TotalInsulin,
            Channel::InsulinActivity,
            Channel::Carbs,
            Channel::CarbActivity,
            Channel::MeanBasalRate,
            Channel::WeightKg,
            Channel::HourOfDay,
            Channel::Exercise,
            Channel::HighFat,
            Channel::HighProtein,
            Channel::Alcohol,
            Channel::Caffeine,
            Channel::ExerciseHigh,
            Channel::ExerciseLow,
        ]
        .get(code as usize)
        .copied()
    }

    fn flag_bit(&self) -> Option<u8> {
        match self {
            Channel::Exercise => Some(EventFlags::EXERCISE),
            Channel::HighFat => Some(EventFlags::HIGH_FAT),
            Channel::HighProtein => Some(EventFlags::HIGH_PROTEIN),
            Channel::Alcohol => Some(EventFlags::ALCOHOL),
            Channel::Caffeine => Some(EventFlags::CAFFEINE),
            Channel::ExerciseHigh => Some(EventFlags::EXERCISE_HI),
            Channel::ExerciseLow => Some(EventFlags::EXERCISE_LO),
            _ => None,
        }
    }
}

/// The standard nine-channel schema.
pub fn base_channels() -> Vec<Channel> {
    Channel::BASE.to_vec()
}

/// Standard schema plus the given event channels.
pub fn channels_with_events(events: &[Channel]) -> Vec<Channel> {
    let mut v = base_channels();
    v.extend_from_slice(events);
    v
}

// ---------------------------------------------------------------------------
// Scenario tags
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    None,
    Meal,
    Night,
    HighBg,
    LowBg,
    Exercise,
    HighFat,
    HighProtein,
    Alcohol,
    Caffeine,
}

impl ScenarioTag {
    pub const ALL: [ScenarioTag; 10] = [
        ScenarioTag::None,
        ScenarioTag::Meal,
        ScenarioTag::Night,
        ScenarioTag::HighBg,
        ScenarioTag::LowBg,
        ScenarioTag::Exercise,
        ScenarioTag::HighFat,
        ScenarioTag::HighProtein,
        ScenarioTag::Alcohol,
        ScenarioTag::Caffeine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioTag::None => "none",
            ScenarioTag::Meal => "meal",
            ScenarioTag::Night => "night",
            ScenarioTag::HighBg => "high_bg",
            ScenarioTag::LowBg => "low_bg",
            ScenarioTag::Exercise => "exercise",
            ScenarioTag::HighFat => "high_fat",
            ScenarioTag::HighProtein => "high_protein",
            ScenarioTag::Alcohol => "alcohol",
            ScenarioTag::Caffeine => "caffeine",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    fn bit(&self) -> u16 {
        match self {
            ScenarioTag::None => 1 << 0,
            ScenarioTag::Meal => 1 << 1,
            ScenarioTag::Night => 1 << 2,
            ScenarioTag::HighBg => 1 << 3,
            ScenarioTag::LowBg => 1 << 4,
            ScenarioTag::Exercise => 1 << 5,
            ScenarioTag::HighFat => 1 << 6,
            ScenarioTag::HighProtein => 1 << 7,
            ScenarioTag::Alcohol => 1 << 8,
            ScenarioTag::Caffeine => 1 << 9,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSet(pub u16);

impl TagSet {
    pub fn set(&mut self, tag: ScenarioTag) {
        self.0 |= tag.bit();
    }

    pub fn has(&self, tag: ScenarioTag) -> bool {
        self.0 & tag.bit() != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = ScenarioTag> + '_ {
        ScenarioTag::ALL.iter().copied().filter(|t| self.has(*t))
    }
}

// ---------------------------------------------------------------------------
// Activity metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKernel {
    /// `w(age) = max(0, 1 − age/duration)`.
    Linear,
    /// `w(age) = exp(−3·age/duration)`, cropped at the duration.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub duration_min: f64,
    pub kernel: DecayKernel,
}

impl Default for DecayConfig {
    fn default() -> Self {
        Self {
            duration_min: 240.0,
            kernel: DecayKernel::Linear,
        }
    }
}

impl DecayConfig {
    fn weight(&self, age_min: f64) -> f64 {
        if age_min >= self.duration_min {
            return 0.0;
        }
        match self.kernel {
            DecayKernel::Linear => 1.0 - age_min / self.duration_min,
            DecayKernel::Exponential => (-3.0 * age_min / self.duration_min).exp(),
        }
    }
}

fn decay_accumulate(doses: &[f64], cfg: &DecayConfig) -> Vec<f64> {
    let horizon = (cfg.duration_min / 5.0).ceil() as usize;
    let mut out = vec![0.0; doses.len()];
    for (t, slot) in out.iter_mut().enumerate() {
        let lo = t.saturating_sub(horizon);
        let mut acc = 0.0;
        for (s, dose) in doses.iter().enumerate().take(t + 1).skip(lo) {
            if *dose != 0.0 {
                acc += dose * cfg.weight((t - s) as f64 * 5.0);
            }
        }
        *slot = acc;
    }
    out
}

/// Insulin on board per slot: boluses plus the basal rate as 5-minute
/// micro-doses, each decaying over the duration of insulin action.
pub fn compute_iob(grid: &GlucoseGrid, cfg: &DecayConfig) -> Vec<f64> {
    let doses: Vec<f64> = grid
        .rows
        .iter()
        .map(|r| r.bolus_u + r.basal_u_per_h * 5.0 / 60.0)
        .collect();
    decay_accumulate(&doses, cfg)
}

/// Carbohydrates on board per slot.
pub fn compute_cob(grid: &GlucoseGrid, cfg: &DecayConfig) -> Vec<f64> {
    let doses: Vec<f64> = grid.rows.iter().map(|r| r.carbs_g).collect();
    decay_accumulate(&doses, cfg)
}

// ---------------------------------------------------------------------------
// Feature table and window set
// ---------------------------------------------------------------------------

/// Uniform window access for both handle-based sets and owned stores.
pub trait WindowAccess: Sync {
    fn channels(&self) -> &[Channel];
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn matrix_len(&self) -> usize {
        WINDOW_STEPS * self.channels().len()
    }
    /// Fill `out` (length `48 × F`, row-major steps × channels) with the raw
    /// window matrix.
    fn materialize_into(&self, idx: usize, out: &mut [f64]);
    fn target(&self, idx: usize) -> f64;
    fn last_glucose(&self, idx: usize) -> f64;
    fn end_time(&self, idx: usize) -> DateTime<Utc>;
    fn participant(&self, idx: usize) -> &str;
    fn tags(&self, idx: usize) -> TagSet;
}

/// Dense per-slot feature columns for one participant's grid.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub participant_id: String,
    pub start_slot: i64,
    pub glucose: Vec<f64>,
    pub interpolated: Vec<bool>,
    pub basal: Vec<f64>,
    pub total_insulin: Vec<f64>,
    pub iob: Vec<f64>,
    pub carbs: Vec<f64>,
    pub cob: Vec<f64>,
    pub flags: Vec<EventFlags>,
    pub mean_basal_rate: f64,
    pub weight_kg: f64,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.glucose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glucose.is_empty()
    }

    pub fn row_time(&self, idx: usize) -> DateTime<Utc> {
        crate::ingest::slot_time(self.start_slot + idx as i64)
    }

    fn hour_of(&self, idx: usize) -> f64 {
        let t = self.row_time(idx);
        f64::from(t.hour()) + f64::from(t.minute()) / 60.0
    }

    pub fn from_grid(
        grid: &GlucoseGrid,
        profile: &PatientProfile,
        iob_cfg: &DecayConfig,
        cob_cfg: &DecayConfig,
        need_weight: bool,
    ) -> Result<Self, FeatureError> {
        let weight = match (profile.weight_kg, need_weight) {
            (Some(w), _) => w,
            (None, false) => 0.0,
            (None, true) => return Err(FeatureError::MissingWeight),
        };
        let mut glucose = Vec::with_capacity(grid.len());
        for (i, row) in grid.rows.iter().enumerate() {
            match row.glucose_mgdl {
                Some(g) => glucose.push(g),
                None => return Err(FeatureError::MissingGlucose(i)),
            }
        }
        let iob = compute_iob(grid, iob_cfg);
        let cob = compute_cob(grid, cob_cfg);
        Ok(Self {
            participant_id: grid.participant_id.clone(),
            start_slot: grid.start_slot,
            glucose,
            interpolated: grid.rows.iter().map(|r| r.interpolated).collect(),
            basal: grid.rows.iter().map(|r| r.basal_u_per_h).collect(),
            total_insulin: grid
                .rows
                .iter()
                .map(|r| r.basal_u_per_h * 5.0 / 60.0 + r.bolus_u)
                .collect(),
            iob,
            carbs: grid.rows.iter().map(|r| r.carbs_g).collect(),
            cob,
            flags: grid.rows.iter().map(|r| r.flags).collect(),
            mean_basal_rate: profile
                .mean_basal_rate_u_per_h
                .unwrap_or_else(|| profile.mean_schedule_rate()),
            weight_kg: weight,
        })
    }
}

/// One window: the last input row plus scenario tags; the target sits one
/// row past `end_row`.
#[derive(Debug, Clone, Copy)]
pub struct WindowHandle {
    pub table: usize,
    pub end_row: usize,
    pub tags: TagSet,
}

/// A channel schema plus windows over shared feature tables.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub channels: Vec<Channel>,
    pub tables: Vec<Arc<FeatureTable>>,
    pub windows: Vec<WindowHandle>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn matrix_len(&self) -> usize {
        WINDOW_STEPS * self.channels.len()
    }

    fn table_of(&self, idx: usize) -> (&FeatureTable, &WindowHandle) {
        let h = &self.windows[idx];
        (&self.tables[h.table], h)
    }

    /// Fill `out` (length `48 × F`, row-major steps × channels) with the raw
    /// window matrix. Broadcast channels replicate the window-end value.
    pub fn materialize_into(&self, idx: usize, out: &mut [f64]) {
        let (t, h) = self.table_of(idx);
        let f = self.channels.len();
        assert_eq!(out.len(), WINDOW_STEPS * f);
        let start = h.end_row + 1 - WINDOW_STEPS;
        let end_hour = t.hour_of(h.end_row);
        for (ci, ch) in self.channels.iter().enumerate() {
            match ch {
                Channel::Glucose => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.glucose[start + s];
                    }
                }
                Channel::HclsBasal => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.basal[start + s];
                    }
                }
                Channel::TotalInsulin => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.total_insulin[start + s];
                    }
                }
                Channel::InsulinActivity => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.iob[start + s];
                    }
                }
                Channel::Carbs => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.carbs[start + s];
                    }
                }
                Channel::CarbActivity => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.cob[start + s];
                    }
                }
                Channel::MeanBasalRate => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.mean_basal_rate;
                    }
                }
                Channel::WeightKg => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = t.weight_kg;
                    }
                }
                Channel::HourOfDay => {
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = end_hour;
                    }
                }
                other => {
                    let bit = other.flag_bit().expect("event channel");
                    for s in 0..WINDOW_STEPS {
                        out[s * f + ci] = f64::from(u8::from(t.flags[start + s].has(bit)));
                    }
                }
            }
        }
    }

    pub fn materialize(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.matrix_len()];
        self.materialize_into(idx, &mut out);
        out
    }

    /// Glucose at +5 minutes (the prediction target), raw mg/dl.
    pub fn target(&self, idx: usize) -> f64 {
        let (t, h) = self.table_of(idx);
        t.glucose[h.end_row + 1]
    }

    pub fn last_glucose(&self, idx: usize) -> f64 {
        let (t, h) = self.table_of(idx);
        t.glucose[h.end_row]
    }

    pub fn end_time(&self, idx: usize) -> DateTime<Utc> {
        let (t, h) = self.table_of(idx);
        t.row_time(h.end_row)
    }

    pub fn participant(&self, idx: usize) -> &str {
        let (t, _) = self.table_of(idx);
        &t.participant_id
    }

    pub fn tags(&self, idx: usize) -> TagSet {
        self.windows[idx].tags
    }

    /// Start time of the window's input span.
    pub fn start_time(&self, idx: usize) -> DateTime<Utc> {
        let (t, h) = self.table_of(idx);
        t.row_time(h.end_row + 1 - WINDOW_STEPS)
    }

    /// Merge several window sets (same schema) into one.
    pub fn merge(sets: Vec<WindowSet>) -> Result<WindowSet, FeatureError> {
        let mut iter = sets.into_iter();
        let mut merged = iter
            .next()
            .ok_or_else(|| FeatureError::BadChannels("no window sets to merge".into()))?;
        for set in iter {
            if set.channels != merged.channels {
                return Err(FeatureError::SchemaMismatch);
            }
            let offset = merged.tables.len();
            merged.tables.extend(set.tables);
            merged
                .windows
                .extend(set.windows.into_iter().map(|mut h| {
                    h.table += offset;
                    h
                }));
        }
        Ok(merged)
    }

    /// A new set holding the given window indices (tables shared).
    pub fn subset(&self, indices: &[usize]) -> WindowSet {
        WindowSet {
            channels: self.channels.clone(),
            tables: self.tables.clone(),
            windows: indices.iter().map(|i| self.windows[*i]).collect(),
        }
    }

    /// Materialize into owned windows (for persistence or hand inspection).
    pub fn to_store(&self) -> WindowStore {
        WindowStore {
            channels: self.channels.clone(),
            windows: (0..self.len())
                .map(|i| FeatureWindow {
                    participant_id: self.participant(i).to_string(),
                    end_time: self.end_time(i),
                    matrix: self.materialize(i),
                    target_mgdl: self.target(i),
                    tags: self.tags(i),
                })
                .collect(),
        }
    }
}

impl WindowAccess for WindowSet {
    fn channels(&self) -> &[Channel] {
        &self.channels
    }
    fn len(&self) -> usize {
        self.windows.len()
    }
    fn materialize_into(&self, idx: usize, out: &mut [f64]) {
        WindowSet::materialize_into(self, idx, out)
    }
    fn target(&self, idx: usize) -> f64 {
        WindowSet::target(self, idx)
    }
    fn last_glucose(&self, idx: usize) -> f64 {
        WindowSet::last_glucose(self, idx)
    }
    fn end_time(&self, idx: usize) -> DateTime<Utc> {
        WindowSet::end_time(self, idx)
    }
    fn participant(&self, idx: usize) -> &str {
        WindowSet::participant(self, idx)
    }
    fn tags(&self, idx: usize) -> TagSet {
        WindowSet::tags(self, idx)
    }
}

impl WindowAccess for WindowStore {
    fn channels(&self) -> &[Channel] {
        &self.channels
    }
    fn len(&self) -> usize {
        self.windows.len()
    }
    fn materialize_into(&self, idx: usize, out: &mut [f64]) {
        WindowStore::materialize_into(self, idx, out)
    }
    fn target(&self, idx: usize) -> f64 {
        WindowStore::target(self, idx)
    }
    fn last_glucose(&self, idx: usize) -> f64 {
        WindowStore::last_glucose(self, idx)
    }
    fn end_time(&self, idx: usize) -> DateTime<Utc> {
        self.windows[idx].end_time
    }
    fn participant(&self, idx: usize) -> &str {
        &self.windows[idx].participant_id
    }
    fn tags(&self, idx: usize) -> TagSet {
        self.windows[idx].tags
    }
}

/// Maximum tolerated stretch between real (non-interpolated) readings inside
/// a window, in slots (30 minutes).
const MAX_REAL_GAP_SLOTS: usize = 6;

/// Cut a grid into overlapping 48-step windows with a +5-minute target.
///
/// Windows are excluded when any stretch between real readings inside their
/// span exceeds 30 minutes, or when the target row is interpolated.
pub fn windowize(
    grid: &GlucoseGrid,
    profile: &PatientProfile,
    channels: &[Channel],
    iob_cfg: &DecayConfig,
    cob_cfg: &DecayConfig,
) -> Result<WindowSet, FeatureError> {
    validate_channels(channels)?;
    let need_weight = channels.contains(&Channel::WeightKg);
    let table = FeatureTable::from_grid(grid, profile, iob_cfg, cob_cfg, need_weight)?;
    let n = table.len();
    let mut set = WindowSet {
        channels: channels.to_vec(),
        tables: vec![Arc::new(table)],
        windows: Vec::new(),
    };
    if n < WINDOW_STEPS + 1 {
        return Ok(set);
    }
    let table = set.tables[0].clone();

    // Real-reading positions; gaps longer than 30 minutes poison every
    // window whose span touches their interior.
    let real: Vec<usize> = (0..n).filter(|i| !table.interpolated[*i]).collect();
    let mut poisoned = vec![false; n];
    for pair in real.windows(2) {
        if pair[1] - pair[0] > MAX_REAL_GAP_SLOTS {
            for p in poisoned.iter_mut().take(pair[1]).skip(pair[0] + 1) {
                *p = true;
            }
        }
    }
    // Prefix sums for O(1) span queries.
    let mut poisoned_prefix = vec![0usize; n + 1];
    for i in 0..n {
        poisoned_prefix[i + 1] = poisoned_prefix[i] + usize::from(poisoned[i]);
    }

    for end_row in (WINDOW_STEPS - 1)..(n - 1) {
        let target_row = end_row + 1;
        if table.interpolated[target_row] {
            continue;
        }
        let span_start = end_row + 1 - WINDOW_STEPS;
        if poisoned_prefix[target_row + 1] - poisoned_prefix[span_start] > 0 {
            continue;
        }
        let mut handle = WindowHandle {
            table: 0,
            end_row,
            tags: TagSet::default(),
        };
        handle.tags = tag_window(&table, end_row);
        set.windows.push(handle);
    }
    Ok(set)
}

fn validate_channels(channels: &[Channel]) -> Result<(), FeatureError> {
    if channels.is_empty() {
        return Err(FeatureError::BadChannels("empty channel list".into()));
    }
    if !channels.contains(&Channel::Glucose) {
        return Err(FeatureError::BadChannels(
            "schema must include the glucose channel".into(),
        ));
    }
    for (i, c) in channels.iter().enumerate() {
        if channels[i + 1..].contains(c) {
            return Err(FeatureError::BadChannels(format!(
                "duplicate channel {}",
                c.as_str()
            )));
        }
    }
    Ok(())
}

/// Scenario lookback for meal and event tags: 30 minutes (6 slots).
const TAG_LOOKBACK_SLOTS: usize = 6;

fn tag_window(table: &FeatureTable, end_row: usize) -> TagSet {
    let mut tags = TagSet::default();
    let lo = end_row + 1 - TAG_LOOKBACK_SLOTS.min(end_row + 1);
    let recent = lo..=end_row;
    if table.carbs[recent.clone()].iter().any(|c| *c > 0.0) {
        tags.set(ScenarioTag::Meal);
    }
    let hour = table.row_time(end_row).hour();
    if hour >= 21 || hour < 4 {
        tags.set(ScenarioTag::Night);
    }
    let g = table.glucose[end_row];
    if g > 180.0 {
        tags.set(ScenarioTag::HighBg);
    }
    if g < 70.0 {
        tags.set(ScenarioTag::LowBg);
    }
    for (tag, bit) in [
        (ScenarioTag::Exercise, EventFlags::EXERCISE),
        (ScenarioTag::HighFat, EventFlags::HIGH_FAT),
        (ScenarioTag::HighProtein, EventFlags::HIGH_PROTEIN),
        (ScenarioTag::Alcohol, EventFlags::ALCOHOL),
        (ScenarioTag::Caffeine, EventFlags::CAFFEINE),
    ] {
        if table.flags[recent.clone()].iter().any(|f| f.has(bit)) {
            tags.set(tag);
        }
    }
    if tags.0 == 0 {
        tags.set(ScenarioTag::None);
    }
    tags
}

/// Scenario tags from the final rows of a window: a pure function of the
/// window contents.
pub fn tag_scenarios(set: &WindowSet, idx: usize) -> TagSet {
    let (table, h) = (&set.tables[set.windows[idx].table], &set.windows[idx]);
    tag_window(table, h.end_row)
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, FeatureError> {
        let spec = Self {
            train_frac: train,
            val_frac: val,
            test_frac: test,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FeatureError::BadFractions(format!("fractions sum to {sum}")));
        }
        for f in [self.train_frac, self.val_frac, self.test_frac] {
            if !(0.0..1.0).contains(&f) && f != 0.0 {
                return Err(FeatureError::BadFractions(format!("fraction {f}")));
            }
        }
        Ok(())
    }
}

/// Chronological train/validation/test split, per participant. Validation
/// and test take the most recent windows; windows whose input span crosses a
/// partition boundary are dropped so no partition sees another's rows.
pub fn split(
    set: &WindowSet,
    spec: &SplitSpec,
) -> Result<(WindowSet, WindowSet, WindowSet), FeatureError> {
    spec.validate()?;
    let mut by_participant: std::collections::BTreeMap<&str, Vec<usize>> =
        std::collections::BTreeMap::new();
    for i in 0..set.len() {
        by_participant.entry(set.participant(i)).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (_, mut idxs) in by_participant {
        idxs.sort_by_key(|i| set.end_time(*i));
        let n = idxs.len();
        let n_train = (n as f64 * spec.train_frac).floor() as usize;
        let rem = n - n_train;
        // Remainder divided evenly, validation first in time.
        let n_val = if spec.val_frac == 0.0 && spec.test_frac > 0.0 {
            0
        } else if spec.test_frac == 0.0 && spec.val_frac > 0.0 {
            rem
        } else {
            rem / 2
        };
        let val_boundary = n_train;
        let test_boundary = n_train + n_val;
        train.extend_from_slice(&idxs[..n_train]);
        if val_boundary < n {
            let b1 = set.end_time(idxs[val_boundary]);
            for &i in &idxs[val_boundary..test_boundary.min(n)] {
                if set.start_time(i) >= b1 {
                    val.push(i);
                }
            }
        }
        if test_boundary < n {
            let b2 = set.end_time(idxs[test_boundary]);
            for &i in &idxs[test_boundary..] {
                if set.start_time(i) >= b2 {
                    test.push(i);
                }
            }
        }
    }
    let partitions = [
        ("train", &train, spec.train_frac),
        ("val", &val, spec.val_frac),
        ("test", &test, spec.test_frac),
    ];
    for (name, part, frac) in partitions {
        if frac > 0.0 && part.is_empty() {
            return Err(FeatureError::EmptySplit(name));
        }
    }
    if train.is_empty() || (val.is_empty() && test.is_empty()) {
        return Err(FeatureError::EmptySplit("train"));
    }
    Ok((set.subset(&train), set.subset(&val), set.subset(&test)))
}

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Per-channel z-score statistics, fitted on training windows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: Vec<Channel>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(set: &WindowSet) -> Self {
        let f = set.channels.len();
        let mut count = 0u64;
        let mut mean = vec![0.0; f];
        let mut m2 = vec![0.0; f];
        let mut buf = vec![0.0; set.matrix_len()];
        for w in 0..set.len() {
            set.materialize_into(w, &mut buf);
            count += WINDOW_STEPS as u64;
            for s in 0..WINDOW_STEPS {
                for c in 0..f {
                    let x = buf[s * f + c];
                    let delta = x - mean[c];
                    mean[c] += delta / count as f64;
                    m2[c] += delta * (x - mean[c]);
                }
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let sd = (v / count.max(1) as f64).sqrt();
                if sd < 1e-9 {
                    1.0 // constant channel: leave centred values at zero
                } else {
                    sd
                }
            })
            .collect();
        Self {
            channels: set.channels.clone(),
            mean,
            std,
        }
    }

    /// In-place z-score of a raw `48 × F` matrix.
    pub fn normalize(&self, matrix: &mut [f64]) {
        let f = self.channels.len();
        for s in 0..matrix.len() / f {
            for c in 0..f {
                matrix[s * f + c] = (matrix[s * f + c] - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, FeatureError> {
        serde_json::from_str(json).map_err(|e| FeatureError::FileFormat(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Materialized windows and persistence
// ---------------------------------------------------------------------------

/// One owned window, as stored in the binary windows file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub participant_id: String,
    pub end_time: DateTime<Utc>,
    /// Row-major `48 × F` raw matrix.
    pub matrix: Vec<f64>,
    pub target_mgdl: f64,
    pub tags: TagSet,
}

/// Owned windows sharing one channel schema.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStore {
    pub channels: Vec<Channel>,
    pub windows: Vec<FeatureWindow>,
}

impl WindowStore {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn matrix_len(&self) -> usize {
        WINDOW_STEPS * self.channels.len()
    }

    pub fn materialize_into(&self, idx: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.windows[idx].matrix);
    }

    pub fn target(&self, idx: usize) -> f64 {
        self.windows[idx].target_mgdl
    }

    pub fn last_glucose(&self, idx: usize) -> f64 {
        let f = self.channels.len();
        let g = self
            .channels
            .iter()
            .position(|c| *c == Channel::Glucose)
            .expect("schema contains glucose");
        self.windows[idx].matrix[(WINDOW_STEPS - 1) * f + g]
    }
}

const WINDOWS_MAGIC: &[u8; 4] = b"GWIN";
const WINDOWS_VERSION: u32 = 1;

/// Write a window set as the binary columnar windows file.
pub fn write_windows<W: Write>(set: &WindowSet, mut w: W) -> Result<(), FeatureError> {
    w.write_all(WINDOWS_MAGIC)?;
    w.write_all(&WINDOWS_VERSION.to_le_bytes())?;
    w.write_all(&(set.channels.len() as u16).to_le_bytes())?;
    for c in &set.channels {
        w.write_all(&[c.code()])?;
    }
    w.write_all(&(WINDOW_STEPS as u16).to_le_bytes())?;
    w.write_all(&(set.len() as u64).to_le_bytes())?;
    let mut buf = vec![0.0; set.matrix_len()];
    for i in 0..set.len() {
        let pid = set.participant(i).as_bytes();
        w.write_all(&(pid.len() as u16).to_le_bytes())?;
        w.write_all(pid)?;
        w.write_all(&set.end_time(i).timestamp().to_le_bytes())?;
        w.write_all(&set.target(i).to_le_bytes())?;
        w.write_all(&set.tags(i).0.to_le_bytes())?;
        set.materialize_into(i, &mut buf);
        for v in &buf {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a binary windows file back into owned windows.
pub fn read_windows<R: Read>(mut r: R) -> Result<WindowStore, FeatureError> {
    let bad = |m: &str| FeatureError::FileFormat(m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WINDOWS_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    if u32::from_le_bytes(u32b) != WINDOWS_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut u16b = [0u8; 2];
    r.read_exact(&mut u16b)?;
    let n_channels = u16::from_le_bytes(u16b) as usize;
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let mut c = [0u8; 1];
        r.read_exact(&mut c)?;
        channels.push(Channel::from_code(c[0]).ok_or_else(|| bad("unknown channel code"))?);
    }
    r.read_exact(&mut u16b)?;
    let steps = u16::from_le_bytes(u16b) as usize;
    if steps != WINDOW_STEPS {
        return Err(bad("unexpected step count"));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let count = u64::from_le_bytes(u64b) as usize;
    let mut windows = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u16b)?;
        let pid_len = u16::from_le_bytes(u16b) as usize;
        let mut pid = vec![0u8; pid_len];
        r.read_exact(&mut pid)?;
        r.read_exact(&mut u64b)?;
        let ts = i64::from_le_bytes(u64b);
        r.read_exact(&mut u64b)?;
        let target = f64::from_le_bytes(u64b);
        r.read_exact(&mut u16b)?;
        let tags = TagSet(u16::from_le_bytes(u16b));
        let mut matrix = vec![0.0; WINDOW_STEPS * n_channels];
        for v in matrix.iter_mut() {
            r.read_exact(&mut u64b)?;
            *v = f64::from_le_bytes(u64b);
        }
        windows.push(FeatureWindow {
            participant_id: String::from_utf8(pid).map_err(|_| bad("participant utf8"))?,
            end_time: chrono::TimeZone::timestamp_opt(&Utc, ts, 0).unwrap(),
            matrix,
            target_mgdl: target,
            tags,
        });
    }
    Ok(WindowStore { channels, windows })
}

/// CSV export for inspection: one row per (window, step).
pub fn export_windows_csv<W: Write>(set: &WindowSet, mut w: W) -> Result<(), FeatureError> {
    let mut header = String::from("window,participant,end_time,target,tags,step");
    for c in &set.channels {
        header.push(',');
        header.push_str(c.as_str());
    }
    writeln!(w, "{header}")?;
    let f = set.channels.len();
    let mut buf = vec![0.0; set.matrix_len()];
    for i in 0..set.len() {
        set.materialize_into(i, &mut buf);
        let tags: Vec<&str> = set.tags(i).iter().map(|t| t.as_str()).collect();
        for s in 0..WINDOW_STEPS {
            write!(
                w,
                "{},{},{},{},{},{}",
                i,
                set.participant(i),
                set.end_time(i).to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                set.target(i),
                tags.join("|"),
                s
            )?;
            for c in 0..f {
                write!(w, ",{}", buf[s * f + c])?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}
