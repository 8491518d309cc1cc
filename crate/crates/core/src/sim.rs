//! Synthetic sepsis-like cohort generator with known causal structure.
//!
//! Three hidden axes drive each patient: `illness` (overall severity),
//! `volume_deficit` (dehydration, relieved by IV fluids) and `tone_deficit`
//! (vasodilation, relieved by vasopressors). Observations are affine
//! functions of the hidden axes plus noise; a stochastic dosing policy reads
//! a bedside severity estimate. Every causal pathway from actions back into
//! the patient is scaled by `action_effect_strength` (alpha), so an alpha=0
//! cohort is exactly action-inert: replaying a trajectory with different
//! actions but the same noise stream reproduces identical hidden states and
//! observations.
//!
//! Generation is deterministic per seed and parallel across patients: each
//! patient gets an independent counter-mode RNG stream keyed by (seed,
//! patient index), so worker count cannot change the output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::severity::{self, RawClinicalState, DEMOGRAPHIC_NAMES, OBS_CHANNEL_NAMES};
use crate::trajectory::{
    ActionRecord, CohortMeta, Demographics, PatientTrajectory, StateObservation, TrajectoryStep,
    MAX_STAY_HOURS,
};

/// Knobs for cohort generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorConfig {
    pub n_patients: usize,
    /// Trajectory cap in hours; must not exceed 336.
    pub max_hours: usize,
    /// Alpha: how strongly actions causally move the patient. 0 = inert.
    pub action_effect_strength: f64,
    /// Sigma_pi: log-normal dosing noise scale. 0 = deterministic policy.
    pub policy_diversity: f64,
    /// Kappa in [0,1]: how much the policy reads the hidden illness axis
    /// instead of the bedside estimate.
    pub confounding: f64,
    /// Per-channel probability that an hourly measurement is missing.
    pub missingness_rate: f64,
    /// Probability that the vasopressor dose is forced to exactly 0 when the
    /// hidden illness is mild (< 5).
    pub vasopressor_sparsity: f64,
    pub seed: u64,
    /// Generative coefficient table; defaults are tuned only to keep scores
    /// in range.
    #[serde(default)]
    pub constants: GenerativeConstants,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        SimulatorConfig {
            n_patients: 100,
            max_hours: 72,
            action_effect_strength: 0.0,
            policy_diversity: 1.0,
            confounding: 0.0,
            missingness_rate: 0.05,
            vasopressor_sparsity: 0.5,
            seed: 42,
            constants: GenerativeConstants::default(),
        }
    }
}

impl SimulatorConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(msg.to_string()))
            }
        };
        c(self.n_patients >= 1, "n_patients must be >= 1")?;
        c(self.max_hours >= 1 && self.max_hours <= MAX_STAY_HOURS, "max_hours must be in [1, 336]")?;
        c(self.action_effect_strength >= 0.0, "action_effect_strength must be >= 0")?;
        c(self.policy_diversity >= 0.0, "policy_diversity must be >= 0")?;
        c((0.0..=1.0).contains(&self.confounding), "confounding must be in [0, 1]")?;
        c(
            (0.0..1.0).contains(&self.missingness_rate),
            "missingness_rate must be in [0, 1)",
        )?;
        c(
            (0.0..=1.0).contains(&self.vasopressor_sparsity),
            "vasopressor_sparsity must be in [0, 1]",
        )?;
        Ok(())
    }
}

/// Hidden generative state for one patient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    /// Unobserved severity driver, clamped to [0, 10] each step.
    pub illness: f64,
    /// Dehydration axis; IV fluids reduce it (scaled by alpha).
    pub volume_deficit: f64,
    /// Vasodilation axis; vasopressors reduce it (scaled by alpha).
    pub tone_deficit: f64,
}

/// Affine observation model for one channel:
/// value = base + w_ill*illness + w_vol*volume + w_tone*tone + noise, clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsChannelModel {
    pub base: f64,
    pub w_ill: f64,
    pub w_vol: f64,
    pub w_tone: f64,
    pub noise: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Every generative coefficient in one place. Overridable through the
/// simulator config JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerativeConstants {
    // Illness drift: weak pull toward a baseline plus load from the deficits.
    pub illness_reversion: f64,
    pub illness_baseline: f64,
    pub illness_noise: f64,
    pub illness_vol_load: f64,
    pub illness_tone_load: f64,
    /// Probability per hour of an acute event (an unpredictable jump in the
    /// illness axis).
    pub acute_event_rate: f64,
    pub acute_event_scale: f64,

    // Deficits revert toward illness-dependent targets.
    pub deficit_reversion: f64,
    pub deficit_noise: f64,
    pub vol_target_slope: f64,
    pub vol_target_onset: f64,
    pub tone_target_slope: f64,
    pub tone_target_onset: f64,
    pub deficit_cap: f64,

    // Treatment effect terms (all multiplied by alpha).
    pub fluid_uptake_scale: f64,
    pub pressor_uptake_scale: f64,
    pub fluid_benefit: f64,
    pub fluid_harm: f64,
    pub fluid_overdose_margin: f64,
    pub pressor_benefit: f64,
    pub fluid_deficit_relief: f64,
    pub pressor_deficit_relief: f64,

    // Dosing policy.
    pub maintenance_fluid: f64,
    pub fluid_dose_slope: f64,
    /// Multiplicative dose escalation per severity unit above onset
    /// (log-linear dosing); 0 keeps the response purely additive.
    pub fluid_dose_log_slope: f64,
    pub fluid_dose_onset: f64,
    /// Extra volume ordered once the severity signal crosses
    /// `fluid_bolus_onset` (resuscitation-style step dosing; 0 disables).
    pub fluid_bolus_volume: f64,
    pub fluid_bolus_onset: f64,
    pub pressor_dose_slope: f64,
    pub pressor_dose_onset: f64,
    pub mild_illness_threshold: f64,
    /// State-independent chance that a vasopressor order is deferred this
    /// hour (dose forced to 0 regardless of severity).
    pub pressor_deferral_rate: f64,

    // Admission state.
    pub init_illness_lo: f64,
    pub init_illness_hi: f64,
    pub init_deficit_jitter: f64,
    pub comorbidity_illness_shift: f64,
    pub age_illness_shift_per_decade: f64,

    // Termination rules.
    pub discharge_illness: f64,
    pub discharge_hours: usize,
    pub death_illness_margin: f64,
    pub death_hours: usize,

    // Mechanical-ventilation gate: vent iff illness + noise > threshold.
    pub vent_threshold: f64,
    pub vent_noise: f64,

    /// Observation table in [`OBS_CHANNEL_NAMES`] order.
    pub obs: Vec<ObsChannelModel>,
}

impl Default for GenerativeConstants {
    fn default() -> Self {
        let ch = |base, w_ill, w_vol, w_tone, noise, lo, hi| ObsChannelModel {
            base,
            w_ill,
            w_vol,
            w_tone,
            noise,
            lo,
            hi,
        };
        GenerativeConstants {
            illness_reversion: 0.006,
            illness_baseline: 3.0,
            illness_noise: 0.10,
            illness_vol_load: 0.010,
            illness_tone_load: 0.010,
            acute_event_rate: 0.006,
            acute_event_scale: 3.2,

            deficit_reversion: 0.08,
            deficit_noise: 0.05,
            vol_target_slope: 0.30,
            vol_target_onset: 1.0,
            tone_target_slope: 0.35,
            tone_target_onset: 2.0,
            deficit_cap: 5.0,

            fluid_uptake_scale: 0.8,
            pressor_uptake_scale: 3.0,
            fluid_benefit: 0.22,
            fluid_harm: 0.30,
            fluid_overdose_margin: 1.0,
            pressor_benefit: 0.22,
            fluid_deficit_relief: 0.5,
            pressor_deficit_relief: 0.6,

            maintenance_fluid: 60.0,
            fluid_dose_slope: 20.0,
            fluid_dose_log_slope: 0.0,
            fluid_dose_onset: 1.0,
            fluid_bolus_volume: 0.0,
            fluid_bolus_onset: 6.0,
            pressor_dose_slope: 0.10,
            pressor_dose_onset: 3.0,
            mild_illness_threshold: 5.0,
            pressor_deferral_rate: 0.15,

            init_illness_lo: 0.5,
            init_illness_hi: 9.5,
            init_deficit_jitter: 0.4,
            comorbidity_illness_shift: 0.3,
            age_illness_shift_per_decade: 0.05,

            discharge_illness: 0.5,
            discharge_hours: 6,
            death_illness_margin: 1e-9,
            death_hours: 3,

            vent_threshold: 6.5,
            vent_noise: 0.25,

            obs: vec![
                // heart_rate = 72 + 5*ill + 4*vol
                ch(72.0, 5.0, 4.0, 0.0, 0.25, 30.0, 220.0),
                // systolic_bp = 118 - 7*tone - 4*vol
                ch(118.0, 0.0, -4.0, -7.0, 0.4, 40.0, 220.0),
                // mean_arterial_pressure
                ch(88.0, 0.0, -3.0, -5.5, 0.35, 25.0, 160.0),
                // temperature
                ch(36.7, 0.19, 0.0, 0.0, 0.02, 33.0, 42.0),
                // respiratory_rate
                ch(14.0, 1.3, 0.2, 0.0, 0.18, 6.0, 50.0),
                // paco2
                ch(40.0, -1.1, 0.0, 0.0, 0.3, 15.0, 80.0),
                // pao2
                ch(95.0, -5.0, 0.0, 0.0, 0.8, 35.0, 250.0),
                // fio2
                ch(0.21, 0.035, 0.0, 0.0, 0.002, 0.21, 1.0),
                // wbc
                ch(8.0, 1.0, 0.0, 0.0, 0.12, 0.5, 50.0),
                // platelets
                ch(250.0, -20.0, 0.0, 0.0, 6.0, 5.0, 600.0),
                // bilirubin
                ch(0.6, 0.45, 0.0, 0.0, 0.025, 0.1, 30.0),
                // creatinine
                ch(0.85, 0.35, 0.0, 0.0, 0.018, 0.2, 15.0),
                // gcs (rounded to an integer after clamping)
                ch(15.0, -1.05, 0.0, 0.0, 0.35, 3.0, 15.0),
                // urine_output_24h
                ch(2100.0, -160.0, -50.0, 0.0, 18.0, 0.0, 4000.0),
                // on_mech_vent (thresholded; table noise unused)
                ch(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0),
                // pressor_support (norepinephrine-equivalent requirement)
                ch(-0.19, 0.02, 0.0, 0.06, 0.001, 0.0, 3.0),
            ],
        }
    }
}

impl GenerativeConstants {
    /// Copy with all noise scales zeroed; used by tests that need the
    /// deterministic skeleton of the generator.
    pub fn noise_free(&self) -> Self {
        let mut k = self.clone();
        k.illness_noise = 0.0;
        k.deficit_noise = 0.0;
        k.acute_event_rate = 0.0;
        k.vent_noise = 0.0;
        for ch in &mut k.obs {
            ch.noise = 0.0;
        }
        k
    }

    fn vol_target(&self, illness: f64) -> f64 {
        (self.vol_target_slope * (illness - self.vol_target_onset).max(0.0)).min(self.deficit_cap)
    }

    fn tone_target(&self, illness: f64) -> f64 {
        (self.tone_target_slope * (illness - self.tone_target_onset).max(0.0)).min(self.deficit_cap)
    }
}

/// Bedside severity estimate in illness units, computed from the
/// continuously monitored channels (heart rate, systolic and mean pressure).
pub fn bedside_severity(obs: &StateObservation) -> f64 {
    let hr = obs.observed[0];
    let sbp = obs.observed[1];
    let map = obs.observed[2];
    let s = ((hr - 72.0) / 5.0 + (118.0 - sbp) / 7.0 + (88.0 - map) / 5.5) / 3.0;
    s.clamp(0.0, 10.0)
}

/// Stochastic dosing policy.
///
/// The base dose is an increasing function of a severity signal blending the
/// bedside estimate with the hidden illness axis (weight = confounding). The
/// final dose multiplies the base by exp(sigma_pi * eps). When the hidden
/// illness is mild, the vasopressor dose is zeroed with probability
/// `vasopressor_sparsity`.
pub fn clinician_policy(
    obs: &StateObservation,
    latent: &LatentState,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> ActionRecord {
    let k = &config.constants;
    let signal =
        (1.0 - config.confounding) * bedside_severity(obs) + config.confounding * latent.illness;

    let excess = (signal - k.fluid_dose_onset).max(0.0);
    let mut base_fluid =
        (k.maintenance_fluid + k.fluid_dose_slope * excess) * (k.fluid_dose_log_slope * excess).exp();
    if signal > k.fluid_bolus_onset {
        base_fluid += k.fluid_bolus_volume;
    }
    let base_pressor = k.pressor_dose_slope * (signal - k.pressor_dose_onset).max(0.0);

    // Fixed draw count per call keeps patient streams replayable.
    let e_fluid: f64 = rng.sample(StandardNormal);
    let e_pressor: f64 = rng.sample(StandardNormal);
    let sparsity_coin: f64 = rng.gen();
    let deferral_coin: f64 = rng.gen();

    let iv_fluid = base_fluid * (config.policy_diversity * e_fluid).exp();
    let mut vasopressor = base_pressor * (config.policy_diversity * e_pressor).exp();
    if latent.illness < k.mild_illness_threshold && sparsity_coin < config.vasopressor_sparsity {
        vasopressor = 0.0;
    }
    if deferral_coin < k.pressor_deferral_rate {
        vasopressor = 0.0;
    }
    ActionRecord { iv_fluid, vasopressor }
}

/// Treatment appropriateness: positive when doses line up with the deficits,
/// negative for gross fluid over-dosing.
fn treatment_benefit(k: &GenerativeConstants, action: &ActionRecord, latent: &LatentState) -> f64 {
    let uf = k.fluid_uptake_scale
        * (action.iv_fluid.ln_1p() - k.maintenance_fluid.ln_1p()).max(0.0);
    let up = k.pressor_uptake_scale * action.vasopressor;
    let vol_uptake = uf.min(latent.volume_deficit);
    let tone_uptake = up.min(latent.tone_deficit);
    k.fluid_benefit * vol_uptake + k.pressor_benefit * tone_uptake
        - k.fluid_harm * (uf - latent.volume_deficit - k.fluid_overdose_margin).max(0.0)
}

/// Advance the hidden state by one hour.
///
/// With `action_effect_strength` = 0 the action terms vanish entirely: two
/// calls from the same latent and RNG state yield bit-equal results for any
/// two actions.
pub fn step_latent(
    latent: &LatentState,
    action: &ActionRecord,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> LatentState {
    let k = &config.constants;
    let alpha = config.action_effect_strength;
    let e_vol: f64 = rng.sample(StandardNormal);
    let e_tone: f64 = rng.sample(StandardNormal);
    let e_ill: f64 = rng.sample(StandardNormal);
    // Acute events: draws always happen so patient streams stay replayable.
    let u_event: f64 = rng.gen();
    let e_event: f64 = rng.sample(StandardNormal);
    let event_jump = if u_event < k.acute_event_rate { k.acute_event_scale * e_event } else { 0.0 };

    let uf = k.fluid_uptake_scale
        * (action.iv_fluid.ln_1p() - k.maintenance_fluid.ln_1p()).max(0.0);
    let up = k.pressor_uptake_scale * action.vasopressor;
    let vol_uptake = uf.min(latent.volume_deficit);
    let tone_uptake = up.min(latent.tone_deficit);

    let volume_deficit = (latent.volume_deficit
        + k.deficit_reversion * (k.vol_target(latent.illness) - latent.volume_deficit)
        + k.deficit_noise * e_vol
        - alpha * k.fluid_deficit_relief * vol_uptake)
        .clamp(0.0, k.deficit_cap);
    let tone_deficit = (latent.tone_deficit
        + k.deficit_reversion * (k.tone_target(latent.illness) - latent.tone_deficit)
        + k.deficit_noise * e_tone
        - alpha * k.pressor_deficit_relief * tone_uptake)
        .clamp(0.0, k.deficit_cap);
    let illness = (latent.illness
        + k.illness_reversion * (k.illness_baseline - latent.illness)
        + k.illness_vol_load * latent.volume_deficit
        + k.illness_tone_load * latent.tone_deficit
        - alpha * treatment_benefit(k, action, latent)
        + k.illness_noise * e_ill
        + event_jump)
        .clamp(0.0, 10.0);

    LatentState { illness, volume_deficit, tone_deficit }
}

/// Emit the full clinical state for one hour plus its missingness mask.
///
/// Each channel is an affine function of the hidden axes plus Gaussian
/// noise, clamped to a physiological range; each is then independently
/// masked missing with probability `missingness_rate`.
pub fn emit_observation(
    latent: &LatentState,
    config: &SimulatorConfig,
    rng: &mut ChaCha8Rng,
) -> (RawClinicalState, Vec<bool>) {
    let k = &config.constants;
    let n = k.obs.len();
    let mut values = Vec::with_capacity(n);
    for (idx, ch) in k.obs.iter().enumerate() {
        let noise: f64 = rng.sample(StandardNormal);
        let v = if idx == 14 {
            // Ventilation gate.
            let vent_noise: f64 = noise;
            if latent.illness + k.vent_noise * vent_noise > k.vent_threshold {
                1.0
            } else {
                0.0
            }
        } else {
            let raw = ch.base
                + ch.w_ill * latent.illness
                + ch.w_vol * latent.volume_deficit
                + ch.w_tone * latent.tone_deficit
                + ch.noise * noise;
            let clamped = raw.clamp(ch.lo, ch.hi);
            if idx == 12 {
                clamped.round()
            } else {
                clamped
            }
        };
        values.push(v);
    }
    let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= config.missingness_rate).collect();
    let state = RawClinicalState::from_channels(&values).expect("canonical channel table");
    (state, mask)
}

fn patient_rng(seed: u64, patient_idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient_idx as u64);
    rng
}

fn draw_demographics(k: &GenerativeConstants, rng: &mut ChaCha8Rng) -> Demographics {
    let age_raw: f64 = rng.sample(StandardNormal);
    let age = (65.0 + 12.0 * age_raw).clamp(20.0, 95.0).round();
    let gender = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let com_a = if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 };
    let com_b = if rng.gen::<f64>() < 0.3 { 1.0 } else { 0.0 };
    let _ = k;
    Demographics { values: vec![age, gender, com_a, com_b] }
}

fn initial_latent(k: &GenerativeConstants, demo: &Demographics, rng: &mut ChaCha8Rng) -> LatentState {
    let u: f64 = rng.gen();
    let mut illness = k.init_illness_lo + u * (k.init_illness_hi - k.init_illness_lo);
    illness += k.comorbidity_illness_shift * (demo.values[2] + demo.values[3]);
    illness += k.age_illness_shift_per_decade * (demo.values[0] - 65.0) / 10.0;
    let illness = illness.clamp(0.0, 10.0);
    let jv: f64 = rng.gen();
    let jt: f64 = rng.gen();
    let jitter = |u: f64| 1.0 - k.init_deficit_jitter + 2.0 * k.init_deficit_jitter * u;
    LatentState {
        illness,
        volume_deficit: (k.vol_target(illness) * jitter(jv)).clamp(0.0, k.deficit_cap),
        tone_deficit: (k.tone_target(illness) * jitter(jt)).clamp(0.0, k.deficit_cap),
    }
}

/// Generate one patient. When `action_override` is provided, the policy's
/// random draws still happen (keeping the noise stream aligned) but the
/// recorded and applied actions come from the override; this is how the
/// action-inertness property is checked.
pub fn simulate_patient_with_actions(
    config: &SimulatorConfig,
    patient_idx: usize,
    action_override: Option<&[ActionRecord]>,
) -> PatientTrajectory {
    let k = &config.constants;
    let mut rng = patient_rng(config.seed, patient_idx);
    let demographics = draw_demographics(k, &mut rng);
    let mut latent = initial_latent(k, &demographics, &mut rng);

    let mut steps = Vec::new();
    let mut calm_hours = 0usize;
    let mut critical_hours = 0usize;

    for hour in 0..config.max_hours {
        let (raw, mask) = emit_observation(&latent, config, &mut rng);
        let values = raw.to_channels();
        let severity = severity::snapshot(&raw);

        let full_obs = StateObservation { observed: values.clone(), observed_mask: vec![true; values.len()] };
        let mut action = clinician_policy(&full_obs, &latent, config, &mut rng);
        if let Some(ov) = action_override {
            if let Some(a) = ov.get(hour) {
                action = *a;
            }
        }

        let masked: Vec<f64> = values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { f64::NAN })
            .collect();
        steps.push(TrajectoryStep {
            obs: StateObservation { observed: masked, observed_mask: mask },
            action,
            severity,
        });

        latent = step_latent(&latent, &action, config, &mut rng);
        if latent.illness < k.discharge_illness {
            calm_hours += 1;
        } else {
            calm_hours = 0;
        }
        if latent.illness >= 10.0 - k.death_illness_margin {
            critical_hours += 1;
        } else {
            critical_hours = 0;
        }
        if calm_hours >= k.discharge_hours || critical_hours >= k.death_hours {
            break;
        }
    }

    PatientTrajectory {
        patient_id: format!("p{patient_idx:06}"),
        demographics,
        steps,
    }
}

pub fn simulate_patient(config: &SimulatorConfig, patient_idx: usize) -> PatientTrajectory {
    simulate_patient_with_actions(config, patient_idx, None)
}

/// Generate the whole cohort, in parallel across patients. Output is
/// identical for any worker count.
pub fn simulate_cohort(config: &SimulatorConfig) -> Result<Vec<PatientTrajectory>> {
    config.validate()?;
    let cohort: Vec<PatientTrajectory> = (0..config.n_patients)
        .into_par_iter()
        .map(|idx| simulate_patient(config, idx))
        .collect();
    Ok(cohort)
}

/// Sidecar metadata for a simulated cohort.
pub fn cohort_meta(config: &SimulatorConfig, cohort: &[PatientTrajectory]) -> CohortMeta {
    CohortMeta {
        channel_names: OBS_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        demographic_names: DEMOGRAPHIC_NAMES.iter().map(|s| s.to_string()).collect(),
        demographics: cohort
            .iter()
            .map(|t| (t.patient_id.clone(), t.demographics.values.clone()))
            .collect(),
        simulator: Some(config.clone()),
    }
}
