//! Severity scoring: SOFA, SIRS, and Shock Index, plus horizon deltas.
//!
//! The scores are computed from a [`RawClinicalState`] holding the channels
//! the standard criteria tables need. The cardiovascular SOFA tier uses a
//! single norepinephrine-equivalent rate; the dopamine-specific tiers
//! collapse into it.

use crate::error::{Error, Result};
use crate::trajectory::{
    Channel, NormalizationStats, PatientTrajectory, SeverityMetric, SeveritySnapshot,
};

/// Systolic pressure floor applied before the Shock Index division.
pub const SBP_FLOOR_MMHG: f64 = 30.0;

/// The clinical channels feeding the three severity scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawClinicalState {
    pub heart_rate: f64,
    pub systolic_bp: f64,
    pub mean_arterial_pressure: f64,
    pub temperature: f64,
    pub respiratory_rate: f64,
    pub paco2: f64,
    pub pao2: f64,
    /// Inspired oxygen fraction, (0, 1].
    pub fio2: f64,
    /// White blood cells, 10^9/L.
    pub wbc: f64,
    /// Platelets, 10^9/L.
    pub platelets: f64,
    /// mg/dL.
    pub bilirubin: f64,
    /// mg/dL.
    pub creatinine: f64,
    /// Glasgow Coma Scale, 3..=15.
    pub gcs: u8,
    /// Urine output over the trailing 24h, mL.
    pub urine_output_24h: f64,
    pub on_mech_vent: bool,
    /// Norepinephrine-equivalent rate, µg/kg/min.
    pub vasopressor_rate: f64,
}

/// Canonical observation-channel layout emitted by the cohort generator and
/// consumed by the score functions. Order matters: it fixes the CSV columns.
pub const OBS_CHANNEL_NAMES: [&str; 16] = [
    "heart_rate",
    "systolic_bp",
    "mean_arterial_pressure",
    "temperature",
    "respiratory_rate",
    "paco2",
    "pao2",
    "fio2",
    "wbc",
    "platelets",
    "bilirubin",
    "creatinine",
    "gcs",
    "urine_output_24h",
    "on_mech_vent",
    "pressor_support",
];

pub const DEMOGRAPHIC_NAMES: [&str; 4] = ["age", "gender", "comorbidity_a", "comorbidity_b"];

impl RawClinicalState {
    /// Build from an observation vector laid out per [`OBS_CHANNEL_NAMES`].
    pub fn from_channels(v: &[f64]) -> Result<Self> {
        if v.len() < OBS_CHANNEL_NAMES.len() {
            return Err(Error::InvalidConfig(format!(
                "observation vector has {} channels, need {}",
                v.len(),
                OBS_CHANNEL_NAMES.len()
            )));
        }
        Ok(RawClinicalState {
            heart_rate: v[0],
            systolic_bp: v[1],
            mean_arterial_pressure: v[2],
            temperature: v[3],
            respiratory_rate: v[4],
            paco2: v[5],
            pao2: v[6],
            fio2: v[7],
            wbc: v[8],
            platelets: v[9],
            bilirubin: v[10],
            creatinine: v[11],
            gcs: (v[12].round() as i64).clamp(3, 15) as u8,
            urine_output_24h: v[13],
            on_mech_vent: v[14] >= 0.5,
            vasopressor_rate: v[15],
        })
    }

    /// Serialize back into the canonical channel order.
    pub fn to_channels(&self) -> Vec<f64> {
        vec![
            self.heart_rate,
            self.systolic_bp,
            self.mean_arterial_pressure,
            self.temperature,
            self.respiratory_rate,
            self.paco2,
            self.pao2,
            self.fio2,
            self.wbc,
            self.platelets,
            self.bilirubin,
            self.creatinine,
            f64::from(self.gcs),
            self.urine_output_24h,
            if self.on_mech_vent { 1.0 } else { 0.0 },
            self.vasopressor_rate,
        ]
    }
}

/// SIRS criteria count, 0..=4. One point per satisfied criterion.
pub fn compute_sirs(state: &RawClinicalState) -> u8 {
    let mut score = 0;
    if state.temperature > 38.0 || state.temperature < 36.0 {
        score += 1;
    }
    if state.heart_rate > 90.0 {
        score += 1;
    }
    if state.respiratory_rate > 20.0 || state.paco2 < 32.0 {
        score += 1;
    }
    if state.wbc > 12.0 || state.wbc < 4.0 {
        score += 1;
    }
    score
}

/// Heart rate over systolic pressure, with the systolic floored at 30 mmHg.
pub fn compute_shock_index(state: &RawClinicalState) -> f64 {
    state.heart_rate / state.systolic_bp.max(SBP_FLOOR_MMHG)
}

fn sofa_respiration(state: &RawClinicalState) -> u8 {
    let ratio = state.pao2 / state.fio2;
    if ratio < 100.0 && state.on_mech_vent {
        4
    } else if ratio < 200.0 && state.on_mech_vent {
        3
    } else if ratio < 300.0 {
        2
    } else if ratio < 400.0 {
        1
    } else {
        0
    }
}

fn sofa_coagulation(state: &RawClinicalState) -> u8 {
    let p = state.platelets;
    if p < 20.0 {
        4
    } else if p < 50.0 {
        3
    } else if p < 100.0 {
        2
    } else if p < 150.0 {
        1
    } else {
        0
    }
}

fn sofa_liver(state: &RawClinicalState) -> u8 {
    let b = state.bilirubin;
    if b >= 12.0 {
        4
    } else if b >= 6.0 {
        3
    } else if b >= 2.0 {
        2
    } else if b >= 1.2 {
        1
    } else {
        0
    }
}

fn sofa_cardiovascular(state: &RawClinicalState) -> u8 {
    let rate = state.vasopressor_rate;
    if rate > 0.1 {
        4
    } else if rate > 0.0 {
        3
    } else if state.mean_arterial_pressure < 70.0 {
        1
    } else {
        0
    }
}

fn sofa_cns(state: &RawClinicalState) -> u8 {
    match state.gcs {
        15 => 0,
        13..=14 => 1,
        10..=12 => 2,
        6..=9 => 3,
        _ => 4,
    }
}

fn sofa_renal(state: &RawClinicalState) -> u8 {
    let c = state.creatinine;
    let creat_score = if c >= 5.0 {
        4
    } else if c >= 3.5 {
        3
    } else if c >= 2.0 {
        2
    } else if c >= 1.2 {
        1
    } else {
        0
    };
    let uo_score = if state.urine_output_24h < 200.0 {
        4
    } else if state.urine_output_24h < 500.0 {
        3
    } else {
        0
    };
    creat_score.max(uo_score)
}

/// SOFA total, 0..=24: sum of the six organ sub-scores.
pub fn compute_sofa(state: &RawClinicalState) -> u8 {
    sofa_respiration(state)
        + sofa_coagulation(state)
        + sofa_liver(state)
        + sofa_cardiovascular(state)
        + sofa_cns(state)
        + sofa_renal(state)
}

/// All three metrics at once.
pub fn snapshot(state: &RawClinicalState) -> SeveritySnapshot {
    SeveritySnapshot {
        sofa: compute_sofa(state),
        sirs: compute_sirs(state),
        shock_index: compute_shock_index(state),
    }
}

/// z-scaled severity change y_{t+h} - y_t for one trajectory window, using
/// the per-(metric, horizon) delta statistics.
pub fn severity_delta(
    traj: &PatientTrajectory,
    t: usize,
    horizon: usize,
    metric: SeverityMetric,
    stats: &NormalizationStats,
) -> Result<f64> {
    if t + horizon >= traj.len() {
        return Err(Error::HorizonOutOfRange { t, horizon, len: traj.len() });
    }
    let raw = metric.value(&traj.steps[t + horizon].severity) - metric.value(&traj.steps[t].severity);
    crate::trajectory::apply_normalization(raw, Channel::Delta(metric, horizon), stats)
}
