//! Patient trajectory data model, z-normalization, and cohort file I/O.
//!
//! A cohort is a collection of [`PatientTrajectory`] values, one per ICU stay,
//! sampled on an hourly grid. All downstream modules (preprocessing, model
//! training, evaluation) consume this representation. Normalization statistics
//! are always fitted on the training split alone and applied everywhere else.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SimulatorConfig;

/// Hard cap on stay length: 14 days of hourly steps.
pub const MAX_STAY_HOURS: usize = 336;

/// One hour's worth of observed clinical channels, plus a measurement mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StateObservation {
    /// Raw clinical units, one entry per observation channel.
    pub observed: Vec<f64>,
    /// True where the channel was actually measured this hour.
    pub observed_mask: Vec<bool>,
}

impl StateObservation {
    pub fn is_complete(&self) -> bool {
        self.observed_mask.iter().all(|&m| m)
    }
}

/// Fixed per-patient covariates (age, gender indicator, comorbidity flags).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub values: Vec<f64>,
}

/// Treatment dosages for one hour, in raw clinical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionRecord {
    /// IV fluid rate, mL/hour. Non-negative.
    pub iv_fluid: f64,
    /// Norepinephrine-equivalent vasopressor rate, µg/kg/min. Non-negative.
    pub vasopressor: f64,
}

impl ActionRecord {
    pub fn dose(&self, drug: Drug) -> f64 {
        match drug {
            Drug::IvFluid => self.iv_fluid,
            Drug::Vasopressor => self.vasopressor,
        }
    }
}

/// Outcome severity values for one hour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeveritySnapshot {
    /// Sequential Organ Failure Assessment, 0..=24.
    pub sofa: u8,
    /// Systemic Inflammatory Response Syndrome criteria count, 0..=4.
    pub sirs: u8,
    /// Heart rate / systolic blood pressure (systolic clamped away from 0).
    pub shock_index: f64,
}

/// One hourly step: what was seen, what was given, how sick the patient was.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub obs: StateObservation,
    pub action: ActionRecord,
    pub severity: SeveritySnapshot,
}

/// A single patient's hourly trajectory from ICU admission.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTrajectory {
    pub patient_id: String,
    pub demographics: Demographics,
    pub steps: Vec<TrajectoryStep>,
}

impl PatientTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Bit-level equality that treats NaN (a masked-out value) as equal to
    /// itself, unlike `==`.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn feq(a: f64, b: f64) -> bool {
            a.to_bits() == b.to_bits()
        }
        self.patient_id == other.patient_id
            && self.demographics.values.len() == other.demographics.values.len()
            && self
                .demographics
                .values
                .iter()
                .zip(&other.demographics.values)
                .all(|(&a, &b)| feq(a, b))
            && self.steps.len() == other.steps.len()
            && self.steps.iter().zip(&other.steps).all(|(s, o)| {
                s.obs.observed_mask == o.obs.observed_mask
                    && s.obs.observed.len() == o.obs.observed.len()
                    && s.obs.observed.iter().zip(&o.obs.observed).all(|(&a, &b)| feq(a, b))
                    && feq(s.action.iv_fluid, o.action.iv_fluid)
                    && feq(s.action.vasopressor, o.action.vasopressor)
                    && s.severity.sofa == o.severity.sofa
                    && s.severity.sirs == o.severity.sirs
                    && feq(s.severity.shock_index, o.severity.shock_index)
            })
    }
}

/// NaN-aware bitwise equality over whole cohorts.
pub fn cohorts_bitwise_eq(a: &[PatientTrajectory], b: &[PatientTrajectory]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

/// The three outcome metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeverityMetric {
    Sofa,
    Sirs,
    ShockIndex,
}

impl SeverityMetric {
    pub const ALL: [SeverityMetric; 3] =
        [SeverityMetric::Sofa, SeverityMetric::Sirs, SeverityMetric::ShockIndex];

    pub fn name(self) -> &'static str {
        match self {
            SeverityMetric::Sofa => "sofa",
            SeverityMetric::Sirs => "sirs",
            SeverityMetric::ShockIndex => "shock_index",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sofa" => Some(SeverityMetric::Sofa),
            "sirs" => Some(SeverityMetric::Sirs),
            "shock_index" => Some(SeverityMetric::ShockIndex),
            _ => None,
        }
    }

    /// Extract this metric's value from a snapshot as a real number.
    pub fn value(self, s: &SeveritySnapshot) -> f64 {
        match self {
            SeverityMetric::Sofa => f64::from(s.sofa),
            SeverityMetric::Sirs => f64::from(s.sirs),
            SeverityMetric::ShockIndex => s.shock_index,
        }
    }
}

impl std::fmt::Display for SeverityMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The two continuous drugs in the action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drug {
    IvFluid,
    Vasopressor,
}

impl Drug {
    pub const ALL: [Drug; 2] = [Drug::IvFluid, Drug::Vasopressor];

    pub fn name(self) -> &'static str {
        match self {
            Drug::IvFluid => "iv_fluid",
            Drug::Vasopressor => "vasopressor",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Drug::IvFluid => 0,
            Drug::Vasopressor => 1,
        }
    }
}

/// Identifies a normalized quantity: an observation channel, a demographic
/// entry, a (log-transformed) drug dose, or a per-(metric, horizon) severity
/// delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Obs(usize),
    Demo(usize),
    Action(Drug),
    Delta(SeverityMetric, usize),
}

impl Channel {
    pub fn key(&self) -> String {
        match self {
            Channel::Obs(i) => format!("obs:{i}"),
            Channel::Demo(i) => format!("demo:{i}"),
            Channel::Action(d) => format!("action:{}", d.name()),
            Channel::Delta(m, h) => format!("delta:{}:{h}", m.name()),
        }
    }
}

/// Mean and standard deviation for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Training-split normalization statistics for every channel kind.
///
/// Action statistics are computed over log(1+dose). Severity statistics are
/// computed over the raw change y_{t+h} - y_t for each (metric, horizon)
/// pair. Degenerate (zero-variance) channels get std = 1 and are listed in
/// `degenerate_channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub obs: Vec<ChannelStats>,
    pub demo: Vec<ChannelStats>,
    /// Indexed by `Drug::index()`; statistics of log(1+dose).
    pub action: Vec<ChannelStats>,
    /// Keyed by `"<metric>:<horizon>"`.
    pub delta: BTreeMap<String, ChannelStats>,
    pub degenerate_channels: Vec<String>,
}

impl NormalizationStats {
    pub fn lookup(&self, channel: Channel) -> Result<ChannelStats> {
        let found = match channel {
            Channel::Obs(i) => self.obs.get(i).copied(),
            Channel::Demo(i) => self.demo.get(i).copied(),
            Channel::Action(d) => self.action.get(d.index()).copied(),
            Channel::Delta(m, h) => self.delta.get(&format!("{}:{h}", m.name())).copied(),
        };
        found.ok_or_else(|| Error::UnknownChannel(channel.key()))
    }

    pub fn delta_stats(&self, metric: SeverityMetric, horizon: usize) -> Result<ChannelStats> {
        self.lookup(Channel::Delta(metric, horizon))
    }

    /// Short content hash; used to pair checkpoints with the dataset that
    /// produced them.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("stats serialize");
        crate::manifest::short_hash(json.as_bytes())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Single-pass mean/variance accumulator (Welford). Population variance.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

fn finalize(channel: Channel, m: &RunningMoments, degenerate: &mut Vec<String>) -> ChannelStats {
    let std = m.std();
    if std <= 1e-12 {
        degenerate.push(channel.key());
        ChannelStats { mean: m.mean(), std: 1.0 }
    } else {
        ChannelStats { mean: m.mean(), std }
    }
}

/// Fit normalization statistics on the training split only.
///
/// Severity-delta statistics are fitted for every horizon in `horizons`
/// across all three metrics, over every valid (t, t+h) window.
pub fn fit_normalization(
    train_split: &[PatientTrajectory],
    horizons: &[usize],
) -> Result<NormalizationStats> {
    if train_split.is_empty() {
        return Err(Error::EmptyTrainingSplit);
    }
    let n_obs = train_split[0].steps[0].obs.observed.len();
    let n_demo = train_split[0].demographics.values.len();

    let mut obs_m = vec![RunningMoments::default(); n_obs];
    let mut demo_m = vec![RunningMoments::default(); n_demo];
    let mut act_m = vec![RunningMoments::default(); 2];
    let mut delta_m: BTreeMap<(SeverityMetric, usize), RunningMoments> = BTreeMap::new();
    for m in SeverityMetric::ALL {
        for &h in horizons {
            delta_m.insert((m, h), RunningMoments::default());
        }
    }

    for traj in train_split {
        for (i, v) in traj.demographics.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    patient: traj.patient_id.clone(),
                    step: 0,
                    channel: Channel::Demo(i).key(),
                });
            }
        }
        for (t, step) in traj.steps.iter().enumerate() {
            for (c, &v) in step.obs.observed.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        patient: traj.patient_id.clone(),
                        step: t,
                        channel: Channel::Obs(c).key(),
                    });
                }
                obs_m[c].push(v);
            }
            for drug in Drug::ALL {
                let dose = step.action.dose(drug);
                if !dose.is_finite() || dose < 0.0 {
                    return Err(Error::NonFinite {
                        patient: traj.patient_id.clone(),
                        step: t,
                        channel: Channel::Action(drug).key(),
                    });
                }
                act_m[drug.index()].push(dose.ln_1p());
            }
        }
        // Demographics once per step would overweight long stays; once per
        // patient matches how they enter the model.
        for (i, &v) in traj.demographics.values.iter().enumerate() {
            demo_m[i].push(v);
        }
        for metric in SeverityMetric::ALL {
            for &h in horizons {
                let acc = delta_m.get_mut(&(metric, h)).expect("prefilled");
                if traj.len() > h {
                    for t in 0..traj.len() - h {
                        let y0 = metric.value(&traj.steps[t].severity);
                        let y1 = metric.value(&traj.steps[t + h].severity);
                        acc.push(y1 - y0);
                    }
                }
            }
        }
    }

    let mut degenerate = Vec::new();
    let obs = obs_m
        .iter()
        .enumerate()
        .map(|(i, m)| finalize(Channel::Obs(i), m, &mut degenerate))
        .collect();
    let demo = demo_m
        .iter()
        .enumerate()
        .map(|(i, m)| finalize(Channel::Demo(i), m, &mut degenerate))
        .collect();
    let action = Drug::ALL
        .iter()
        .map(|&d| finalize(Channel::Action(d), &act_m[d.index()], &mut degenerate))
        .collect();
    let mut delta = BTreeMap::new();
    for ((metric, h), m) in &delta_m {
        delta.insert(
            format!("{}:{h}", metric.name()),
            finalize(Channel::Delta(*metric, *h), m, &mut degenerate),
        );
    }

    Ok(NormalizationStats { obs, demo, action, delta, degenerate_channels: degenerate })
}

/// Map a raw value into z-units. Action channels are first passed through
/// log(1+dose).
pub fn apply_normalization(value: f64, channel: Channel, stats: &NormalizationStats) -> Result<f64> {
    let cs = stats.lookup(channel)?;
    let x = match channel {
        Channel::Action(_) => value.ln_1p(),
        _ => value,
    };
    Ok((x - cs.mean) / cs.std)
}

/// Exact inverse of [`apply_normalization`]; action channels are mapped back
/// through exp(x)-1 and clamped at zero.
pub fn invert_normalization(z: f64, channel: Channel, stats: &NormalizationStats) -> Result<f64> {
    let cs = stats.lookup(channel)?;
    let x = z * cs.std + cs.mean;
    Ok(match channel {
        Channel::Action(_) => x.exp_m1().max(0.0),
        _ => x,
    })
}

/// Partition a cohort into train/val/test at the patient level.
///
/// Deterministic for a given seed; sizes follow the fractions with rounding
/// and the remainder going to the test split.
pub fn split_cohort(
    cohort: Vec<PatientTrajectory>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<PatientTrajectory>, Vec<PatientTrajectory>, Vec<PatientTrajectory>)> {
    let (ft, fv, fe) = fractions;
    let sum = ft + fv + fe;
    if !(ft > 0.0 && fv > 0.0 && fe > 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(sum));
    }
    if cohort.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "cohort of {} patients cannot be split three ways",
            cohort.len()
        )));
    }
    let n = cohort.len();
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut slots: Vec<Option<PatientTrajectory>> = cohort.into_iter().map(Some).collect();
    let mut take = |idxs: &[usize]| -> Vec<PatientTrajectory> {
        idxs.iter().map(|&i| slots[i].take().expect("each index used once")).collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// Cohort file format: CSV + JSON sidecar
// ---------------------------------------------------------------------------

/// JSON sidecar accompanying a cohort CSV: channel naming, per-patient
/// demographics, and the generator configuration when the cohort is
/// synthetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortMeta {
    pub channel_names: Vec<String>,
    pub demographic_names: Vec<String>,
    /// patient id -> demographic vector, ordered by id.
    pub demographics: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulator: Option<SimulatorConfig>,
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation keeps the CSV lossless.
    format!("{v}")
}

/// Write a cohort as `<path>.csv` content plus its JSON sidecar.
///
/// Missing observations (mask false) are written as empty fields.
pub fn write_cohort_csv(csv_path: &Path, meta_path: &Path, cohort: &[PatientTrajectory], meta: &CohortMeta) -> Result<()> {
    let file = std::fs::File::create(csv_path)?;
    let mut w = BufWriter::new(file);

    let mut header = vec!["patient_id".to_string(), "hour".to_string()];
    header.extend(meta.channel_names.iter().cloned());
    header.extend(meta.channel_names.iter().map(|c| format!("mask_{c}")));
    header.extend(["iv_fluid", "vasopressor", "sofa", "sirs", "shock_index"].map(String::from));
    writeln!(w, "{}", header.join(","))?;

    for traj in cohort {
        for (hour, step) in traj.steps.iter().enumerate() {
            let mut fields: Vec<String> = Vec::with_capacity(header.len());
            fields.push(traj.patient_id.clone());
            fields.push(hour.to_string());
            for (v, m) in step.obs.observed.iter().zip(&step.obs.observed_mask) {
                fields.push(if *m { fmt_f64(*v) } else { String::new() });
            }
            for m in &step.obs.observed_mask {
                fields.push(if *m { "1".into() } else { "0".into() });
            }
            fields.push(fmt_f64(step.action.iv_fluid));
            fields.push(fmt_f64(step.action.vasopressor));
            fields.push(step.severity.sofa.to_string());
            fields.push(step.severity.sirs.to_string());
            fields.push(fmt_f64(step.severity.shock_index));
            writeln!(w, "{}", fields.join(","))?;
        }
    }
    w.flush()?;

    let meta_file = std::fs::File::create(meta_path)?;
    let mut mw = BufWriter::new(meta_file);
    serde_json::to_writer_pretty(&mut mw, meta)?;
    mw.write_all(b"\n")?;
    mw.flush()?;
    Ok(())
}

/// Read a cohort CSV + sidecar back into trajectories.
pub fn read_cohort_csv(csv_path: &Path, meta_path: &Path) -> Result<(Vec<PatientTrajectory>, CohortMeta)> {
    let meta: CohortMeta = serde_json::from_slice(&std::fs::read(meta_path)?)?;
    let n_ch = meta.channel_names.len();

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(csv_path)?;
    let malformed = |detail: String| Error::MalformedFile {
        path: csv_path.display().to_string(),
        detail,
    };

    let mut cohort: Vec<PatientTrajectory> = Vec::new();
    for record in reader.records() {
        let rec = record?;
        let expected = 2 + 2 * n_ch + 5;
        if rec.len() != expected {
            return Err(malformed(format!("expected {expected} fields, got {}", rec.len())));
        }
        let pid = rec[0].to_string();
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| malformed(format!("bad {what} value {s:?}: {e}")))
        };

        let mut observed = Vec::with_capacity(n_ch);
        let mut mask = Vec::with_capacity(n_ch);
        for c in 0..n_ch {
            let m = &rec[2 + n_ch + c] == "1";
            mask.push(m);
            observed.push(if m { parse(&rec[2 + c], &meta.channel_names[c])? } else { f64::NAN });
        }
        let base = 2 + 2 * n_ch;
        let step = TrajectoryStep {
            obs: StateObservation { observed, observed_mask: mask },
            action: ActionRecord {
                iv_fluid: parse(&rec[base], "iv_fluid")?,
                vasopressor: parse(&rec[base + 1], "vasopressor")?,
            },
            severity: SeveritySnapshot {
                sofa: rec[base + 2]
                    .parse()
                    .map_err(|e| malformed(format!("bad sofa: {e}")))?,
                sirs: rec[base + 3]
                    .parse()
                    .map_err(|e| malformed(format!("bad sirs: {e}")))?,
                shock_index: parse(&rec[base + 4], "shock_index")?,
            },
        };

        match cohort.last_mut() {
            Some(t) if t.patient_id == pid => t.steps.push(step),
            _ => {
                let demo = meta
                    .demographics
                    .get(&pid)
                    .cloned()
                    .ok_or_else(|| malformed(format!("patient {pid} missing from sidecar")))?;
                cohort.push(PatientTrajectory {
                    patient_id: pid,
                    demographics: Demographics { values: demo },
                    steps: vec![step],
                });
            }
        }
    }
    Ok((cohort, meta))
}
