//! Compartmental glucose–insulin ODE simulator.
//!
//! Two gut absorption compartments, two subcutaneous insulin depots, plasma
//! insulin, three insulin-action states and two glucose masses, after the
//! Hovorka model. Internally glucose is tracked in mmol; the public surface
//! reports mg/dl. Parameter defaults ship as data in
//! `data/hovorka_params.json` so they stay versioned and auditable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ImpactCurve;

/// mg/dl per mmol/L (glucose molar mass 180.16 g/mol over 10 dl/L).
pub const MGDL_PER_MMOL_L: f64 = 18.016;
/// mmol of glucose per gram of carbohydrate.
pub const MMOL_PER_GRAM: f64 = 1000.0 / 180.16;
/// Plasma insulin is tracked in mU/L while depots are in U.
const MILLI_UNITS_PER_UNIT: f64 = 1000.0;
/// Glucose concentration below which non-insulin-dependent consumption
/// scales linearly with glucose (mmol/L).
const F01_SATURATION_MMOL: f64 = 4.5;
/// Renal clearance threshold (mmol/L) and rate constant (1/min).
const RENAL_THRESHOLD_MMOL: f64 = 9.0;
const RENAL_RATE_PER_MIN: f64 = 0.003;

const DEFAULT_PARAMS_JSON: &str = include_str!("../data/hovorka_params.json");

#[derive(Debug, Error)]
pub enum HovorkaError {
    #[error("non-finite state at t = {t_min} min")]
    NonFiniteState { t_min: f64 },
    #[error("no equilibrium with non-negative basal for target {target_mgdl} mg/dl")]
    NoEquilibrium { target_mgdl: f64 },
    #[error("equilibrium target {0} mg/dl outside supported range [90, 180]")]
    TargetOutOfRange(f64),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("parameter file: {0}")]
    ParamFile(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid integration request: {0}")]
    InvalidIntegration(String),
    #[error("invalid replay window: {0}")]
    InvalidWindow(String),
}

/// Weight-scaled parameter set. Rates are per minute, volumes per kg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HovorkaParams {
    pub weight_kg: f64,
    /// Carbohydrate absorption time constant (min).
    pub t_max_g_min: f64,
    /// Subcutaneous insulin absorption time constant (min).
    pub t_max_i_min: f64,
    /// Carbohydrate bioavailability in (0, 1].
    pub a_g: f64,
    pub k12_per_min: f64,
    pub ka1_per_min: f64,
    pub ka2_per_min: f64,
    pub ka3_per_min: f64,
    /// Insulin sensitivity of transport (1/min per mU/L).
    pub s_it: f64,
    /// Insulin sensitivity of disposal (1/min per mU/L).
    pub s_id: f64,
    /// Insulin sensitivity of endogenous production (per mU/L).
    pub s_ie: f64,
    pub k_e_per_min: f64,
    pub v_i_l_per_kg: f64,
    pub v_g_l_per_kg: f64,
    pub egp0_mmol_per_kg_min: f64,
    pub f01_mmol_per_kg_min: f64,
}

impl HovorkaParams {
    /// Published population defaults at the given body weight.
    pub fn for_weight(weight_kg: f64) -> Self {
        let mut p = Self::defaults();
        p.weight_kg = weight_kg;
        p
    }

    /// The bundled parameter file verbatim (70 kg nominal weight).
    pub fn defaults() -> Self {
        Self::from_json_str(DEFAULT_PARAMS_JSON)
            .expect("bundled parameter file is valid")
    }

    /// Parse a versioned parameter file: a JSON document mapping each symbol
    /// to `{value, unit, source}`.
    pub fn from_json_str(json: &str) -> Result<Self, HovorkaError> {
        #[derive(Deserialize)]
        struct Entry {
            value: f64,
            #[allow(dead_code)]
            #[serde(default)]
            unit: String,
            #[allow(dead_code)]
            #[serde(default)]
            source: String,
        }
        #[derive(Deserialize)]
        struct File {
            version: u32,
            params: std::collections::BTreeMap<String, Entry>,
        }
        let file: File = serde_json::from_str(json)
            .map_err(|e| HovorkaError::ParamFile(e.to_string()))?;
        if file.version != 1 {
            return Err(HovorkaError::ParamFile(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut get = |name: &str| -> Result<f64, HovorkaError> {
            file.params
                .get(name)
                .map(|e| e.value)
                .ok_or_else(|| HovorkaError::ParamFile(format!("missing parameter {name}")))
        };
        let p = Self {
            weight_kg: get("weight_kg")?,
            t_max_g_min: get("t_max_g_min")?,
            t_max_i_min: get("t_max_i_min")?,
            a_g: get("a_g")?,
            k12_per_min: get("k12_per_min")?,
            ka1_per_min: get("ka1_per_min")?,
            ka2_per_min: get("ka2_per_min")?,
            ka3_per_min: get("ka3_per_min")?,
            s_it: get("s_it")?,
            s_id: get("s_id")?,
            s_ie: get("s_ie")?,
            k_e_per_min: get("k_e_per_min")?,
            v_i_l_per_kg: get("v_i_l_per_kg")?,
            v_g_l_per_kg: get("v_g_l_per_kg")?,
            egp0_mmol_per_kg_min: get("egp0_mmol_per_kg_min")?,
            f01_mmol_per_kg_min: get("f01_mmol_per_kg_min")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, HovorkaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HovorkaError::ParamFile(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), HovorkaError> {
        let checks: [(&'static str, f64); 16] = [
            ("weight_kg", self.weight_kg),
            ("t_max_g_min", self.t_max_g_min),
            ("t_max_i_min", self.t_max_i_min),
            ("a_g", self.a_g),
            ("k12_per_min", self.k12_per_min),
            ("ka1_per_min", self.ka1_per_min),
            ("ka2_per_min", self.ka2_per_min),
            ("ka3_per_min", self.ka3_per_min),
            ("s_it", self.s_it),
            ("s_id", self.s_id),
            ("s_ie", self.s_ie),
            ("k_e_per_min", self.k_e_per_min),
            ("v_i_l_per_kg", self.v_i_l_per_kg),
            ("v_g_l_per_kg", self.v_g_l_per_kg),
            ("egp0_mmol_per_kg_min", self.egp0_mmol_per_kg_min),
            ("f01_mmol_per_kg_min", self.f01_mmol_per_kg_min),
        ];
        for (name, v) in checks {
            if !(v > 0.0) || !v.is_finite() {
                return Err(HovorkaError::InvalidParam {
                    name,
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if self.a_g > 1.0 {
            return Err(HovorkaError::InvalidParam {
                name: "a_g",
                reason: format!("bioavailability must be in (0, 1], got {}", self.a_g),
            });
        }
        Ok(())
    }

    /// Glucose distribution volume in litres.
    fn glucose_volume_l(&self) -> f64 {
        self.v_g_l_per_kg * self.weight_kg
    }
}

/// Full compartment state. Gut carbs in grams, insulin depots in units,
/// plasma insulin in mU/L, glucose masses in mmol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HovorkaState {
    pub d1_g: f64,
    pub d2_g: f64,
    pub s1_u: f64,
    pub s2_u: f64,
    pub i_mu_per_l: f64,
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
    pub q1_mmol: f64,
    pub q2_mmol: f64,
}

impl HovorkaState {
    pub const DIM: usize = 10;

    pub fn zero() -> Self {
        Self::from_array([0.0; Self::DIM])
    }

    pub fn to_array(self) -> [f64; Self::DIM] {
        [
            self.d1_g,
            self.d2_g,
            self.s1_u,
            self.s2_u,
            self.i_mu_per_l,
            self.x1,
            self.x2,
            self.x3,
            self.q1_mmol,
            self.q2_mmol,
        ]
    }

    pub fn from_array(a: [f64; Self::DIM]) -> Self {
        Self {
            d1_g: a[0],
            d2_g: a[1],
            s1_u: a[2],
            s2_u: a[3],
            i_mu_per_l: a[4],
            x1: a[5],
            x2: a[6],
            x3: a[7],
            q1_mmol: a[8],
            q2_mmol: a[9],
        }
    }

    pub fn glucose_mmol_per_l(&self, params: &HovorkaParams) -> f64 {
        self.q1_mmol / params.glucose_volume_l()
    }

    pub fn glucose_mgdl(&self, params: &HovorkaParams) -> f64 {
        self.glucose_mmol_per_l(params) * MGDL_PER_MMOL_L
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Gut glucose flux U_G in g/min.
    pub fn gut_flux_g_per_min(&self, params: &HovorkaParams) -> f64 {
        self.d2_g / params.t_max_g_min
    }
}

/// Continuous exogenous inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Inputs {
    pub carb_rate_g_per_min: f64,
    pub insulin_rate_u_per_min: f64,
}

/// Time derivative of every state component under the given inputs.
pub fn derivatives(state: &HovorkaState, params: &HovorkaParams, inputs: &Inputs) -> HovorkaState {
    let w = params.weight_kg;
    let glucose_mmol = state.glucose_mmol_per_l(params);

    // Gut absorption chain (grams).
    let dd1 = params.a_g * inputs.carb_rate_g_per_min - state.d1_g / params.t_max_g_min;
    let dd2 = (state.d1_g - state.d2_g) / params.t_max_g_min;
    let gut_flux_mmol = state.gut_flux_g_per_min(params) * MMOL_PER_GRAM;

    // Subcutaneous insulin chain (units) into plasma insulin (mU/L).
    let ds1 = inputs.insulin_rate_u_per_min - state.s1_u / params.t_max_i_min;
    let ds2 = (state.s1_u - state.s2_u) / params.t_max_i_min;
    let plasma_appearance =
        state.s2_u / params.t_max_i_min * MILLI_UNITS_PER_UNIT / (params.v_i_l_per_kg * w);
    let di = plasma_appearance - params.k_e_per_min * state.i_mu_per_l;

    // Insulin action states.
    let dx1 = params.ka1_per_min * (params.s_it * state.i_mu_per_l - state.x1);
    let dx2 = params.ka2_per_min * (params.s_id * state.i_mu_per_l - state.x2);
    let dx3 = params.ka3_per_min * (params.s_ie * state.i_mu_per_l - state.x3);

    // Glucose kinetics (mmol).
    let f01_total = params.f01_mmol_per_kg_min * w;
    let f01_c = f01_total * (glucose_mmol / F01_SATURATION_MMOL).min(1.0);
    let renal = if glucose_mmol > RENAL_THRESHOLD_MMOL {
        RENAL_RATE_PER_MIN * (glucose_mmol - RENAL_THRESHOLD_MMOL) * params.glucose_volume_l()
    } else {
        0.0
    };
    let egp = params.egp0_mmol_per_kg_min * w * (1.0 - state.x3);
    let dq1 = -f01_c - state.x1 * state.q1_mmol + params.k12_per_min * state.q2_mmol - renal
        + gut_flux_mmol
        + egp;
    let dq2 = state.x1 * state.q1_mmol - (params.k12_per_min + state.x2) * state.q2_mmol;

    HovorkaState {
        d1_g: dd1,
        d2_g: dd2,
        s1_u: ds1,
        s2_u: ds2,
        i_mu_per_l: di,
        x1: dx1,
        x2: dx2,
        x3: dx3,
        q1_mmol: dq1,
        q2_mmol: dq2,
    }
}

/// One row of a piecewise-constant input schedule. The basal rate holds from
/// `t_min` until the next entry; bolus and carbs are impulses applied at
/// `t_min` (added to the subcutaneous and gut depots directly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub t_min: f64,
    pub basal_u_per_h: f64,
    pub bolus_u: f64,
    pub carbs_g: f64,
}

/// Sorted, validated input schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    entries: Vec<ScheduleEntry>,
}

impl Schedule {
    pub fn new(mut entries: Vec<ScheduleEntry>) -> Result<Self, HovorkaError> {
        if entries.is_empty() {
            return Err(HovorkaError::InvalidSchedule("empty schedule".into()));
        }
        for e in &entries {
            if !(e.t_min.is_finite() && e.basal_u_per_h.is_finite()) {
                return Err(HovorkaError::InvalidSchedule("non-finite entry".into()));
            }
            if e.basal_u_per_h < 0.0 || e.bolus_u < 0.0 || e.carbs_g < 0.0 {
                return Err(HovorkaError::InvalidSchedule(format!(
                    "negative input at t = {} min",
                    e.t_min
                )));
            }
        }
        entries.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        Ok(Self { entries })
    }

    pub fn constant_basal(basal_u_per_h: f64) -> Self {
        Self::new(vec![ScheduleEntry {
            t_min: 0.0,
            basal_u_per_h,
            bolus_u: 0.0,
            carbs_g: 0.0,
        }])
        .expect("constant schedule is valid")
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }
}

/// Integration output sampled at every step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times_min: Vec<f64>,
    pub states: Vec<HovorkaState>,
    pub glucose_mgdl: Vec<f64>,
    /// Number of state components clamped to zero across all steps.
    pub clamp_events: usize,
    /// Total number of (step, component) opportunities, for clamp-rate checks.
    pub clamp_opportunities: usize,
}

impl Trajectory {
    /// Glucose samples every `every_min` minutes (must be a multiple of the
    /// integration step).
    pub fn sample_glucose_every(&self, every_min: f64) -> Vec<(f64, f64)> {
        self.times_min
            .iter()
            .zip(&self.glucose_mgdl)
            .filter(|(t, _)| {
                let r = *t / every_min;
                (r - r.round()).abs() < 1e-9
            })
            .map(|(t, g)| (*t, *g))
            .collect()
    }
}

fn rk4_step(
    state: &HovorkaState,
    params: &HovorkaParams,
    inputs: &Inputs,
    dt: f64,
) -> HovorkaState {
    let add = |s: &HovorkaState, k: &HovorkaState, h: f64| -> HovorkaState {
        let a = s.to_array();
        let b = k.to_array();
        let mut out = [0.0; HovorkaState::DIM];
        for idx in 0..HovorkaState::DIM {
            out[idx] = a[idx] + h * b[idx];
        }
        HovorkaState::from_array(out)
    };
    let k1 = derivatives(state, params, inputs);
    let k2 = derivatives(&add(state, &k1, dt / 2.0), params, inputs);
    let k3 = derivatives(&add(state, &k2, dt / 2.0), params, inputs);
    let k4 = derivatives(&add(state, &k3, dt), params, inputs);
    let a = state.to_array();
    let (b1, b2, b3, b4) = (k1.to_array(), k2.to_array(), k3.to_array(), k4.to_array());
    let mut out = [0.0; HovorkaState::DIM];
    for idx in 0..HovorkaState::DIM {
        out[idx] = a[idx] + dt / 6.0 * (b1[idx] + 2.0 * b2[idx] + 2.0 * b3[idx] + b4[idx]);
    }
    HovorkaState::from_array(out)
}

/// Fixed-step fourth-order integration of the model under a schedule.
///
/// Impulse entries are applied at the step boundary nearest their timestamp.
/// State components are clamped at zero after every step and clamps counted.
pub fn integrate(
    initial: &HovorkaState,
    params: &HovorkaParams,
    schedule: &Schedule,
    duration_min: f64,
    step_min: f64,
) -> Result<Trajectory, HovorkaError> {
    if !(step_min > 0.0 && step_min <= 5.0) {
        return Err(HovorkaError::InvalidIntegration(format!(
            "step must be in (0, 5] min, got {step_min}"
        )));
    }
    let n_steps_f = duration_min / step_min;
    let n_steps = n_steps_f.round() as usize;
    if duration_min < 0.0 || (n_steps_f - n_steps_f.round()).abs() > 1e-9 {
        return Err(HovorkaError::InvalidIntegration(format!(
            "duration {duration_min} min is not a multiple of step {step_min} min"
        )));
    }

    let mut state = *initial;
    let mut traj = Trajectory {
        times_min: Vec::with_capacity(n_steps + 1),
        states: Vec::with_capacity(n_steps + 1),
        glucose_mgdl: Vec::with_capacity(n_steps + 1),
        clamp_events: 0,
        clamp_opportunities: 0,
    };

    let entries = schedule.entries();
    let mut next_entry = 0usize;
    let mut basal_u_per_h = entries[0].basal_u_per_h;

    for step in 0..=n_steps {
        let t = step as f64 * step_min;
        // Apply every entry whose time falls at or before this boundary.
        while next_entry < entries.len() && entries[next_entry].t_min <= t + step_min / 2.0 {
            let e = &entries[next_entry];
            basal_u_per_h = e.basal_u_per_h;
            state.s1_u += e.bolus_u;
            state.d1_g += params.a_g * e.carbs_g;
            next_entry += 1;
        }
        if !state.is_finite() {
            return Err(HovorkaError::NonFiniteState { t_min: t });
        }
        traj.times_min.push(t);
        traj.states.push(state);
        traj.glucose_mgdl.push(state.glucose_mgdl(params));
        if step == n_steps {
            break;
        }
        let inputs = Inputs {
            carb_rate_g_per_min: 0.0,
            insulin_rate_u_per_min: basal_u_per_h / 60.0,
        };
        state = rk4_step(&state, params, &inputs, step_min);
        let mut arr = state.to_array();
        for v in arr.iter_mut() {
            traj.clamp_opportunities += 1;
            if *v < 0.0 {
                *v = 0.0;
                traj.clamp_events += 1;
            }
        }
        state = HovorkaState::from_array(arr);
    }
    Ok(traj)
}

fn equilibrium_state_for(
    params: &HovorkaParams,
    basal_u_per_min: f64,
    q1_mmol: f64,
) -> HovorkaState {
    let s = basal_u_per_min * params.t_max_i_min;
    let i = basal_u_per_min * MILLI_UNITS_PER_UNIT
        / (params.v_i_l_per_kg * params.weight_kg * params.k_e_per_min);
    let x1 = params.s_it * i;
    let x2 = params.s_id * i;
    let x3 = params.s_ie * i;
    let q2 = x1 * q1_mmol / (params.k12_per_min + x2);
    HovorkaState {
        d1_g: 0.0,
        d2_g: 0.0,
        s1_u: s,
        s2_u: s,
        i_mu_per_l: i,
        x1,
        x2,
        x3,
        q1_mmol,
        q2_mmol: q2,
    }
}

fn equilibrium_unchecked(
    params: &HovorkaParams,
    target_mgdl: f64,
) -> Result<(HovorkaState, f64), HovorkaError> {
    let q1 = target_mgdl / MGDL_PER_MMOL_L * params.glucose_volume_l();
    let residual = |u: f64| -> f64 {
        let s = equilibrium_state_for(params, u, q1);
        derivatives(&s, params, &Inputs::default()).q1_mmol
    };
    let mut lo = 0.0;
    if residual(lo) < 0.0 {
        // Even zero insulin drains glucose below the target.
        return Err(HovorkaError::NoEquilibrium {
            target_mgdl,
        });
    }
    let mut hi = 1.0 / 60.0; // 1 U/h
    let mut tries = 0;
    while residual(hi) > 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 20 {
            return Err(HovorkaError::NoEquilibrium { target_mgdl });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if residual(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-18 {
            break;
        }
    }
    let u = 0.5 * (lo + hi);
    Ok((equilibrium_state_for(params, u, q1), u * 60.0))
}

/// Steady state and the constant basal rate (U/h) that sustains the target
/// glucose. Solved by bisection on the basal rate with the linear sub-states
/// back-substituted algebraically.
pub fn find_equilibrium(
    params: &HovorkaParams,
    target_mgdl: f64,
) -> Result<(HovorkaState, f64), HovorkaError> {
    if !(90.0..=180.0).contains(&target_mgdl) {
        return Err(HovorkaError::TargetOutOfRange(target_mgdl));
    }
    equilibrium_unchecked(params, target_mgdl)
}

/// Equilibrium re-anchored to an observed glucose value, used to initialise
/// window replays. The anchor is clamped into the range where a non-negative
/// basal solution exists.
pub fn anchored_equilibrium(
    params: &HovorkaParams,
    glucose_mgdl: f64,
) -> Result<(HovorkaState, f64), HovorkaError> {
    let target = glucose_mgdl.clamp(25.0, 395.0);
    equilibrium_unchecked(params, target)
}

/// Number of 5-minute offsets in an activity curve (0–240 min inclusive).
pub const ACTIVITY_CURVE_LEN: usize = 49;

/// Theoretical carbohydrate and insulin activity curves over 0–240 min at
/// 5-minute resolution, z-score normalized.
///
/// The carb curve is the gut glucose flux response to a unit carbohydrate
/// impulse. The insulin curve is the incremental insulin-action pathway flux
/// (transport, disposal and endogenous-production suppression evaluated at
/// the equilibrium operating point) after a unit insulin impulse, expressed
/// as a glucose rate so it is non-positive before normalization.
pub fn theoretical_activity_curves(
    params: &HovorkaParams,
) -> Result<(ImpactCurve, ImpactCurve), HovorkaError> {
    let (carb_raw, ins_raw) = raw_activity_curves(params)?;
    Ok((
        ImpactCurve::theoretical(zscore(&carb_raw)),
        ImpactCurve::theoretical(zscore(&ins_raw)),
    ))
}

/// Raw (unnormalized) activity curves, exposed for tests that check signs
/// and peak locations before normalization.
pub fn raw_activity_curves(
    params: &HovorkaParams,
) -> Result<(Vec<f64>, Vec<f64>), HovorkaError> {
    let (eq, basal) = equilibrium_unchecked(params, 120.0)?;
    let schedule = Schedule::constant_basal(basal);
    let mut carb_state = eq;
    carb_state.d1_g += params.a_g * 1.0;
    let carb_traj = integrate(&carb_state, params, &schedule, 240.0, 1.0)?;
    let mut ins_state = eq;
    ins_state.s1_u += 1.0;
    let ins_traj = integrate(&ins_state, params, &schedule, 240.0, 1.0)?;
    let to_mgdl_rate = MGDL_PER_MMOL_L / params.glucose_volume_l();
    let mut carb = Vec::with_capacity(ACTIVITY_CURVE_LEN);
    let mut ins = Vec::with_capacity(ACTIVITY_CURVE_LEN);
    for k in 0..ACTIVITY_CURVE_LEN {
        let idx = k * 5;
        carb.push(carb_traj.states[idx].gut_flux_g_per_min(params));
        let s = &ins_traj.states[idx];
        let action_flux = (s.x1 - eq.x1) * eq.q1_mmol
            + (s.x2 - eq.x2) * eq.q2_mmol
            + params.egp0_mmol_per_kg_min * params.weight_kg * (s.x3 - eq.x3);
        ins.push(-action_flux * to_mgdl_rate);
    }
    Ok((carb, ins))
}

fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return values.iter().map(|v| v - mean).collect();
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Raw per-slot inputs of a grid window for simulator replay. All slices
/// must have the same length; slot `k` covers minutes `[5k, 5k+5)` from the
/// window start and its bolus/carbs are applied at the slot boundary.
#[derive(Debug, Clone)]
pub struct ReplayWindow<'a> {
    pub first_glucose_mgdl: f64,
    pub basal_u_per_h: &'a [f64],
    pub bolus_u: &'a [f64],
    pub carbs_g: &'a [f64],
}

/// Simulate one step past the window: initialise at an equilibrium anchored
/// to the first observed glucose, replay the recorded inputs, and report the
/// glucose reached 5 minutes after the final slot.
pub fn predict_next(
    window: &ReplayWindow<'_>,
    params: &HovorkaParams,
    step_min: f64,
) -> Result<f64, HovorkaError> {
    let n = window.basal_u_per_h.len();
    if n == 0 || window.bolus_u.len() != n || window.carbs_g.len() != n {
        return Err(HovorkaError::InvalidWindow(format!(
            "channel lengths differ: basal {}, bolus {}, carbs {}",
            n,
            window.bolus_u.len(),
            window.carbs_g.len()
        )));
    }
    if !window.first_glucose_mgdl.is_finite() || window.first_glucose_mgdl <= 0.0 {
        return Err(HovorkaError::InvalidWindow(format!(
            "first glucose must be positive, got {}",
            window.first_glucose_mgdl
        )));
    }
    let (state, _) = anchored_equilibrium(params, window.first_glucose_mgdl)?;
    let entries: Vec<ScheduleEntry> = (0..n)
        .map(|k| ScheduleEntry {
            t_min: k as f64 * 5.0,
            basal_u_per_h: window.basal_u_per_h[k],
            bolus_u: window.bolus_u[k],
            carbs_g: window.carbs_g[k],
        })
        .collect();
    let schedule = Schedule::new(entries)?;
    let traj = integrate(&state, params, &schedule, n as f64 * 5.0, step_min)?;
    Ok(*traj.glucose_mgdl.last().expect("trajectory is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params70() -> HovorkaParams {
        HovorkaParams::for_weight(70.0)
    }

    #[test]
    fn equilibrium_matches_target_and_derivatives_vanish() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        assert!((state.glucose_mgdl(&p) - 120.0).abs() < 0.01);
        assert!(basal > 0.0 && basal < 3.0, "basal {basal} U/h out of range");
        let d = derivatives(&state, &p, &Inputs::default()).to_array();
        for (i, v) in d.iter().enumerate() {
            assert!(v.abs() < 1e-8, "component {i} derivative {v}");
        }
    }

    #[test]
    fn equilibrium_basal_regression_value() {
        // Frozen from the bisection oracle on the bundled defaults.
        let p = params70();
        let (_, basal) = find_equilibrium(&p, 120.0).unwrap();
        assert!(
            (basal - EQ_BASAL_70KG_120).abs() < 1e-6,
            "basal {basal} drifted from frozen {EQ_BASAL_70KG_120}"
        );
    }

    // Regression constant recorded from the first verified build.
    const EQ_BASAL_70KG_120: f64 = 0.37036975128466534;

    #[test]
    fn equilibrium_target_range_is_enforced() {
        let p = params70();
        assert!(matches!(
            find_equilibrium(&p, 60.0),
            Err(HovorkaError::TargetOutOfRange(_))
        ));
        assert!(matches!(
            find_equilibrium(&p, 200.0),
            Err(HovorkaError::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn equilibrium_holds_for_24_hours() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let traj = integrate(
            &state,
            &p,
            &Schedule::constant_basal(basal),
            24.0 * 60.0,
            1.0,
        )
        .unwrap();
        let max_dev = traj
            .glucose_mgdl
            .iter()
            .map(|g| (g - 120.0).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 1.0, "drift {max_dev} mg/dl");
    }

    #[test]
    fn carb_impulse_deriv_sign() {
        let p = params70();
        let (mut state, _) = find_equilibrium(&p, 120.0).unwrap();
        state.d1_g = 50.0;
        let d = derivatives(&state, &p, &Inputs::default());
        assert!(d.d2_g > 0.0);
    }

    #[test]
    fn derivatives_match_trajectory_finite_differences() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let mut s = state;
        s.d1_g += 30.0;
        s.s1_u += 1.0;
        // March a short distance so the state is generic, then compare the
        // analytic derivative against a centered difference of the fine-step
        // trajectory.
        let sched = Schedule::constant_basal(basal);
        let traj = integrate(&s, &p, &sched, 60.0, 0.01).unwrap();
        let idx = traj.times_min.len() / 2;
        let h = 0.01;
        let before = traj.states[idx - 1].to_array();
        let after = traj.states[idx + 1].to_array();
        let inputs = Inputs {
            carb_rate_g_per_min: 0.0,
            insulin_rate_u_per_min: basal / 60.0,
        };
        let analytic = derivatives(&traj.states[idx], &p, &inputs).to_array();
        for i in 0..HovorkaState::DIM {
            let fd = (after[i] - before[i]) / (2.0 * h);
            let scale = analytic[i].abs().max(fd.abs()).max(1e-9);
            assert!(
                ((fd - analytic[i]) / scale).abs() < 1e-6,
                "component {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gut_flux_peaks_at_t_max_g() {
        let p = params70();
        let (mut state, basal) = find_equilibrium(&p, 120.0).unwrap();
        state.d1_g += p.a_g * 50.0;
        let traj = integrate(&state, &p, &Schedule::constant_basal(basal), 240.0, 0.5).unwrap();
        let (peak_idx, _) = traj
            .states
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.gut_flux_g_per_min(&p)
                    .total_cmp(&b.1.gut_flux_g_per_min(&p))
            })
            .unwrap();
        let peak_t = traj.times_min[peak_idx];
        assert!(
            (peak_t - p.t_max_g_min).abs() <= 2.5,
            "gut flux peak at {peak_t} min"
        );
    }

    #[test]
    fn s2_peaks_at_t_max_i() {
        let p = params70();
        let (mut state, basal) = find_equilibrium(&p, 120.0).unwrap();
        state.s1_u += 1.0;
        let traj = integrate(&state, &p, &Schedule::constant_basal(basal), 240.0, 0.5).unwrap();
        // Subtract the constant equilibrium depot so the impulse response is
        // isolated.
        let base = equilibrium_state_for(&p, basal / 60.0, state.q1_mmol).s2_u;
        let (peak_idx, _) = traj
            .states
            .iter()
            .enumerate()
            .max_by(|a, b| (a.1.s2_u - base).total_cmp(&(b.1.s2_u - base)))
            .unwrap();
        let peak_t = traj.times_min[peak_idx];
        assert!(
            (peak_t - p.t_max_i_min).abs() <= 2.5,
            "S2 peak at {peak_t} min"
        );
    }

    #[test]
    fn carb_mass_balance_within_one_percent() {
        let p = params70();
        let (mut state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let grams = 60.0;
        state.d1_g += p.a_g * grams;
        let step = 0.5;
        let traj = integrate(&state, &p, &Schedule::constant_basal(basal), 720.0, step).unwrap();
        let total_flux: f64 = traj
            .states
            .iter()
            .map(|s| s.gut_flux_g_per_min(&p) * step)
            .sum();
        let expected = p.a_g * grams;
        assert!(
            ((total_flux - expected) / expected).abs() < 0.01,
            "gut flux integral {total_flux} vs {expected}"
        );
    }

    #[test]
    fn insulin_mass_balance_within_one_percent() {
        let p = params70();
        let (state, _) = find_equilibrium(&p, 120.0).unwrap();
        let mut s = state;
        s.s1_u += 2.0;
        let step = 0.5;
        // Zero basal going forward: all plasma appearance stems from the
        // equilibrium depots plus the 2 U impulse.
        let traj = integrate(&s, &p, &Schedule::constant_basal(0.0), 1440.0, step).unwrap();
        let infused = 2.0 + state.s1_u + state.s2_u;
        let appeared: f64 = traj
            .states
            .iter()
            .map(|st| st.s2_u / p.t_max_i_min * step)
            .sum();
        assert!(
            ((appeared - infused) / infused).abs() < 0.01,
            "appeared {appeared} vs infused {infused}"
        );
    }

    #[test]
    fn larger_bolus_lowers_glucose_at_two_hours() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let run = |bolus: f64| {
            let entries = vec![
                ScheduleEntry {
                    t_min: 0.0,
                    basal_u_per_h: basal,
                    bolus_u: bolus,
                    carbs_g: 40.0,
                },
            ];
            let traj = integrate(&state, &p, &Schedule::new(entries).unwrap(), 120.0, 1.0).unwrap();
            *traj.glucose_mgdl.last().unwrap()
        };
        assert!(run(2.0) < run(1.0));
    }

    #[test]
    fn step_halving_changes_trajectory_less_than_tenth_mgdl() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let entries = vec![
            ScheduleEntry {
                t_min: 0.0,
                basal_u_per_h: basal,
                bolus_u: 0.0,
                carbs_g: 0.0,
            },
            ScheduleEntry {
                t_min: 60.0,
                basal_u_per_h: basal,
                bolus_u: 3.0,
                carbs_g: 45.0,
            },
            ScheduleEntry {
                t_min: 600.0,
                basal_u_per_h: basal * 1.5,
                bolus_u: 1.0,
                carbs_g: 20.0,
            },
        ];
        let sched = Schedule::new(entries).unwrap();
        let coarse = integrate(&state, &p, &sched, 1440.0, 1.0).unwrap();
        let fine = integrate(&state, &p, &sched, 1440.0, 0.5).unwrap();
        let coarse5 = coarse.sample_glucose_every(5.0);
        let fine5 = fine.sample_glucose_every(5.0);
        assert_eq!(coarse5.len(), fine5.len());
        let max_dev = coarse5
            .iter()
            .zip(&fine5)
            .map(|(a, b)| (a.1 - b.1).abs())
            .fold(0.0, f64::max);
        assert!(max_dev < 0.1, "step halving deviation {max_dev} mg/dl");
    }

    #[test]
    fn fuzzed_schedules_keep_state_nonnegative() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let mut rng = crate::seeds::rng(7, "hovorka-nonneg");
        let mut clamps = 0usize;
        let mut opportunities = 0usize;
        for _ in 0..10 {
            let mut entries = vec![ScheduleEntry {
                t_min: 0.0,
                basal_u_per_h: basal,
                bolus_u: 0.0,
                carbs_g: 0.0,
            }];
            for _ in 0..12 {
                entries.push(ScheduleEntry {
                    t_min: (rng.gen_range(0..288) * 5) as f64,
                    basal_u_per_h: rng.gen_range(0.0..2.0),
                    bolus_u: rng.gen_range(0.0..4.0),
                    carbs_g: rng.gen_range(0.0..80.0),
                });
            }
            let traj =
                integrate(&state, &p, &Schedule::new(entries).unwrap(), 1440.0, 1.0).unwrap();
            for s in &traj.states {
                for v in s.to_array() {
                    assert!(v >= 0.0, "negative component {v}");
                }
            }
            clamps += traj.clamp_events;
            opportunities += traj.clamp_opportunities;
        }
        assert!(
            (clamps as f64) < 0.001 * opportunities as f64,
            "clamp rate {clamps}/{opportunities}"
        );
    }

    #[test]
    fn theoretical_curves_shape() {
        let p = params70();
        let (carb_raw, ins_raw) = raw_activity_curves(&p).unwrap();
        assert_eq!(carb_raw.len(), ACTIVITY_CURVE_LEN);
        assert_eq!(ins_raw.len(), ACTIVITY_CURVE_LEN);
        // Carb flux peaks at t_max_g = 40 min → offset index 8.
        let argmax = carb_raw
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax as f64 * 5.0, 40.0);
        // Insulin action lowers glucose: non-positive before normalization.
        for v in &ins_raw {
            assert!(*v <= 1e-12, "insulin curve value {v} > 0");
        }
        let (carb, ins) = theoretical_activity_curves(&p).unwrap();
        assert_eq!(carb.offsets_min.len(), ACTIVITY_CURVE_LEN);
        assert_eq!(ins.offsets_min.len(), ACTIVITY_CURVE_LEN);
        // z-scored: mean ~0, sd ~1.
        let mean: f64 = carb.mean_impact.iter().sum::<f64>() / carb.mean_impact.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn predict_next_holds_steady_state() {
        let p = params70();
        let (_, basal) = find_equilibrium(&p, 120.0).unwrap();
        let basals = vec![basal; 48];
        let zeros = vec![0.0; 48];
        let window = ReplayWindow {
            first_glucose_mgdl: 120.0,
            basal_u_per_h: &basals,
            bolus_u: &zeros,
            carbs_g: &zeros,
        };
        let g = predict_next(&window, &p, 1.0).unwrap();
        assert!((g - 120.0).abs() < 1.0, "prediction {g}");
    }

    #[test]
    fn predict_next_meal_raises_glucose() {
        let p = params70();
        let (_, basal) = find_equilibrium(&p, 120.0).unwrap();
        let basals = vec![basal; 48];
        let bolus = vec![0.0; 48];
        let mut carbs = vec![0.0; 48];
        carbs[42] = 50.0; // unbolused meal 30 min before the window end
        let window = ReplayWindow {
            first_glucose_mgdl: 120.0,
            basal_u_per_h: &basals,
            bolus_u: &bolus,
            carbs_g: &carbs,
        };
        let g = predict_next(&window, &p, 1.0).unwrap();
        assert!(g > 120.0, "prediction {g} should exceed last observed");
    }

    #[test]
    fn predict_next_matches_fine_step_oracle() {
        let p = params70();
        let (_, basal) = find_equilibrium(&p, 120.0).unwrap();
        let mut rng = crate::seeds::rng(11, "hovorka-predict-oracle");
        let mut basals = vec![basal; 48];
        let mut bolus = vec![0.0; 48];
        let mut carbs = vec![0.0; 48];
        for k in 0..48 {
            if rng.gen_bool(0.05) {
                carbs[k] = rng.gen_range(10.0..50.0);
                bolus[k] = carbs[k] / 15.0;
            }
            if rng.gen_bool(0.1) {
                basals[k] = basal * rng.gen_range(0.5..1.5);
            }
        }
        let window = ReplayWindow {
            first_glucose_mgdl: 135.0,
            basal_u_per_h: &basals,
            bolus_u: &bolus,
            carbs_g: &carbs,
        };
        let coarse = predict_next(&window, &p, 1.0).unwrap();
        let fine = predict_next(&window, &p, 0.1).unwrap();
        assert!(
            (coarse - fine).abs() < 0.5,
            "coarse {coarse} vs fine-step oracle {fine}"
        );
    }

    #[test]
    fn param_file_round_trip_and_validation() {
        let p = HovorkaParams::defaults();
        assert_eq!(p.t_max_g_min, 40.0);
        assert_eq!(p.t_max_i_min, 55.0);
        let mut bad = p.clone();
        bad.a_g = 1.5;
        assert!(bad.validate().is_err());
        let mut neg = p;
        neg.k_e_per_min = 0.0;
        assert!(neg.validate().is_err());
    }

    #[test]
    fn integrate_rejects_bad_step_and_duration() {
        let p = params70();
        let (state, basal) = find_equilibrium(&p, 120.0).unwrap();
        let sched = Schedule::constant_basal(basal);
        assert!(integrate(&state, &p, &sched, 60.0, 6.0).is_err());
        assert!(integrate(&state, &p, &sched, 61.3, 2.0).is_err());
    }

    #[test]
    fn non_finite_state_is_reported_with_time() {
        let p = params70();
        let mut state = HovorkaState::zero();
        state.q1_mmol = f64::NAN;
        let err = integrate(&state, &p, &Schedule::constant_basal(0.5), 10.0, 1.0).unwrap_err();
        assert!(matches!(err, HovorkaError::NonFiniteState { .. }));
    }
}
