//! Preprocessing pipeline: hourly binning, long-stay exclusion, imputation,
//! and assembly of z-scaled model datasets.
//!
//! Every statistic used here (imputation means, normalization) comes from
//! the training split alone; the interfaces only accept the training split
//! when fitting, which makes leakage structurally impossible.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::TrainingScheme;
use crate::manifest::short_hash;
use crate::nn::SeqExample;
use crate::severity::OBS_CHANNEL_NAMES;
use crate::sim::GenerativeConstants;
use crate::trajectory::{
    apply_normalization, Channel, Drug, NormalizationStats, PatientTrajectory, SeverityMetric,
    MAX_STAY_HOURS,
};

// ---------------------------------------------------------------------------
// Hourly binning of raw event streams
// ---------------------------------------------------------------------------

/// A timestamped channel measurement (time in hours since admission).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementEvent {
    pub time_hours: f64,
    pub channel: usize,
    pub value: f64,
}

/// A timestamped treatment record: a fluid volume given at that moment plus
/// the vasopressor rate observed at that moment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseEvent {
    pub time_hours: f64,
    pub iv_fluid_volume: f64,
    pub vasopressor_rate: f64,
}

/// One patient's hourly grid after binning. Missing cells hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyGrid {
    pub n_hours: usize,
    pub n_channels: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// Fluid volumes summed within each hour (mL -> mL/hour on a 1h grid).
    pub iv_fluid: Vec<f64>,
    /// Vasopressor rate readings averaged within each hour.
    pub vasopressor: Vec<f64>,
}

/// Aggregate event streams onto a one-hour grid: channel values are averaged
/// within each hour (mask false when none), fluid volumes are summed, and
/// vasopressor rates are averaged.
pub fn bin_hourly(
    measurements: &[MeasurementEvent],
    doses: &[DoseEvent],
    n_channels: usize,
    n_hours: usize,
) -> Result<HourlyGrid> {
    let check_sorted = |times: &mut dyn Iterator<Item = f64>| -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for t in times {
            if t < prev {
                return Err(Error::EventsOutOfOrder { prev, t });
            }
            prev = t;
        }
        Ok(())
    };
    check_sorted(&mut measurements.iter().map(|e| e.time_hours))?;
    check_sorted(&mut doses.iter().map(|e| e.time_hours))?;

    let mut sums = vec![0.0; n_hours * n_channels];
    let mut counts = vec![0u32; n_hours * n_channels];
    for e in measurements {
        let hour = e.time_hours.floor() as usize;
        if hour >= n_hours || e.channel >= n_channels {
            continue;
        }
        sums[hour * n_channels + e.channel] += e.value;
        counts[hour * n_channels + e.channel] += 1;
    }
    let mut values = vec![f64::NAN; n_hours * n_channels];
    let mut mask = vec![false; n_hours * n_channels];
    for i in 0..values.len() {
        if counts[i] > 0 {
            values[i] = sums[i] / f64::from(counts[i]);
            mask[i] = true;
        }
    }

    let mut iv_fluid = vec![0.0; n_hours];
    let mut vaso_sum = vec![0.0; n_hours];
    let mut vaso_n = vec![0u32; n_hours];
    for e in doses {
        let hour = e.time_hours.floor() as usize;
        if hour >= n_hours {
            continue;
        }
        iv_fluid[hour] += e.iv_fluid_volume;
        vaso_sum[hour] += e.vasopressor_rate;
        vaso_n[hour] += 1;
    }
    let vasopressor = vaso_sum
        .iter()
        .zip(&vaso_n)
        .map(|(&s, &n)| if n > 0 { s / f64::from(n) } else { 0.0 })
        .collect();

    Ok(HourlyGrid { n_hours, n_channels, values, mask, iv_fluid, vasopressor })
}

// ---------------------------------------------------------------------------
// Exclusion and imputation
// ---------------------------------------------------------------------------

/// Drop stays longer than 14 days (336 hourly steps). Returns the survivors
/// and the number removed.
pub fn exclude_long_stays(cohort: Vec<PatientTrajectory>) -> (Vec<PatientTrajectory>, usize) {
    let before = cohort.len();
    let kept: Vec<_> = cohort.into_iter().filter(|t| t.len() <= MAX_STAY_HOURS).collect();
    let removed = before - kept.len();
    (kept, removed)
}

/// Per-channel means of the *observed* training-split values, used to fill
/// leading gaps. Channels never observed anywhere fall back to the
/// generator's population defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationStats {
    pub channel_means: Vec<f64>,
    pub fallback_channels: Vec<String>,
}

pub fn fit_imputation(train_split: &[PatientTrajectory]) -> Result<ImputationStats> {
    if train_split.is_empty() {
        return Err(Error::EmptyTrainingSplit);
    }
    let n_ch = train_split[0].steps[0].obs.observed.len();
    let mut sums = vec![0.0; n_ch];
    let mut counts = vec![0u64; n_ch];
    for traj in train_split {
        for step in &traj.steps {
            for c in 0..n_ch {
                if step.obs.observed_mask[c] {
                    sums[c] += step.obs.observed[c];
                    counts[c] += 1;
                }
            }
        }
    }
    let defaults = GenerativeConstants::default();
    let mut fallback = Vec::new();
    let channel_means = (0..n_ch)
        .map(|c| {
            if counts[c] > 0 {
                sums[c] / counts[c] as f64
            } else {
                let name = OBS_CHANNEL_NAMES.get(c).copied().unwrap_or("?");
                fallback.push(format!("obs:{c} ({name})"));
                defaults.obs.get(c).map(|m| m.base).unwrap_or(0.0)
            }
        })
        .collect();
    Ok(ImputationStats { channel_means, fallback_channels: fallback })
}

/// Last-observation-carried-forward within each trajectory; leading gaps are
/// filled with the training-split channel means. Masks are preserved for
/// audit. The output contains no missing values.
pub fn impute_missing(cohort: &mut [PatientTrajectory], stats: &ImputationStats) {
    for traj in cohort.iter_mut() {
        let n_ch = stats.channel_means.len();
        let mut last: Vec<Option<f64>> = vec![None; n_ch];
        for step in &mut traj.steps {
            for c in 0..n_ch {
                if step.obs.observed_mask[c] && step.obs.observed[c].is_finite() {
                    last[c] = Some(step.obs.observed[c]);
                } else {
                    step.obs.observed[c] = last[c].unwrap_or(stats.channel_means[c]);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prepared (z-scaled) splits
// ---------------------------------------------------------------------------

/// One trajectory's model-ready tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTrajectory {
    pub patient_id: String,
    pub t_len: usize,
    /// t_len x n_obs, z-units.
    pub obs_z: Vec<f64>,
    /// n_demo, z-units.
    pub demo_z: Vec<f64>,
    /// t_len x 2, z-scaled log(1+dose) per drug.
    pub act_z: Vec<f64>,
    /// Raw severity values per metric, indexed by `SeverityMetric::ALL` order.
    pub severity: [Vec<f64>; 3],
}

/// A fully preprocessed split: complete, z-scaled, ready for windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSplit {
    pub trajectories: Vec<PreparedTrajectory>,
    pub n_obs: usize,
    pub n_demo: usize,
    pub stats_fingerprint: String,
}

impl PreparedSplit {
    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.t_len).sum()
    }

    /// Number of (patient, anchor) samples available at a horizon:
    /// sum over trajectories of max(0, len - h).
    pub fn sample_count(&self, horizon: usize) -> usize {
        self.trajectories.iter().map(|t| t.t_len.saturating_sub(horizon)).sum()
    }
}

/// z-scale a complete cohort split with training-split statistics.
pub fn prepare_split(cohort: &[PatientTrajectory], stats: &NormalizationStats) -> Result<PreparedSplit> {
    let n_obs = stats.obs.len();
    let n_demo = stats.demo.len();
    let mut trajectories = Vec::with_capacity(cohort.len());
    for traj in cohort {
        let t_len = traj.len();
        let mut obs_z = Vec::with_capacity(t_len * n_obs);
        let mut act_z = Vec::with_capacity(t_len * 2);
        let mut severity: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (t, step) in traj.steps.iter().enumerate() {
            if step.obs.observed.len() != n_obs {
                return Err(Error::InvalidConfig(format!(
                    "trajectory {} has {} channels, stats expect {n_obs}",
                    traj.patient_id,
                    step.obs.observed.len()
                )));
            }
            for c in 0..n_obs {
                let v = step.obs.observed[c];
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        patient: traj.patient_id.clone(),
                        step: t,
                        channel: Channel::Obs(c).key(),
                    });
                }
                obs_z.push(apply_normalization(v, Channel::Obs(c), stats)?);
            }
            for drug in Drug::ALL {
                act_z.push(apply_normalization(step.action.dose(drug), Channel::Action(drug), stats)?);
            }
            for (mi, metric) in SeverityMetric::ALL.iter().enumerate() {
                severity[mi].push(metric.value(&step.severity));
            }
        }
        let demo_z = traj
            .demographics
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| apply_normalization(v, Channel::Demo(i), stats))
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(PreparedTrajectory {
            patient_id: traj.patient_id.clone(),
            t_len,
            obs_z,
            demo_z,
            act_z,
            severity,
        });
    }
    Ok(PreparedSplit {
        trajectories,
        n_obs,
        n_demo,
        stats_fingerprint: stats.fingerprint(),
    })
}

// ---------------------------------------------------------------------------
// Model dataset: windows + per-anchor targets for one grid cell
// ---------------------------------------------------------------------------

/// A contiguous chunk of one trajectory that fits the model context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
}

/// Per-cell dataset: shared prepared tensors plus windowing, targets, and
/// the input scheme.
#[derive(Debug, Clone)]
pub struct ModelDataset {
    pub split: Arc<PreparedSplit>,
    pub metric: SeverityMetric,
    pub horizon: usize,
    pub scheme: TrainingScheme,
    pub windows: Vec<Window>,
    /// z-scaled severity-change target per (trajectory, position); NaN where
    /// the window exceeds the stay.
    pub targets: Vec<Vec<f64>>,
    pub n_records: usize,
    /// Keep demographics visible to actions-only models (off by default).
    pub actions_only_keep_demographics: bool,
    /// Seed for the deterministic adjacency-pair sampling.
    pub pair_seed: u64,
}

/// Chunk every trajectory into consecutive windows no longer than `context`.
pub fn chunk_windows(split: &PreparedSplit, context: usize) -> Vec<Window> {
    let mut windows = Vec::new();
    for (ti, traj) in split.trajectories.iter().enumerate() {
        let mut start = 0;
        while start < traj.t_len {
            let len = context.min(traj.t_len - start);
            windows.push(Window { traj: ti, start, len });
            start += len;
        }
    }
    windows
}

/// Build the dataset for one (metric, horizon, scheme) cell.
pub fn build_model_dataset(
    split: Arc<PreparedSplit>,
    metric: SeverityMetric,
    horizon: usize,
    scheme: TrainingScheme,
    stats: &NormalizationStats,
    context: usize,
    pair_seed: u64,
) -> Result<ModelDataset> {
    if stats.fingerprint() != split.stats_fingerprint {
        return Err(Error::NormalizationMismatch {
            model: stats.fingerprint(),
            data: split.stats_fingerprint.clone(),
        });
    }
    let ds = stats.delta_stats(metric, horizon)?;
    let mi = SeverityMetric::ALL.iter().position(|&m| m == metric).expect("metric index");
    let mut targets = Vec::with_capacity(split.trajectories.len());
    let mut n_records = 0usize;
    for traj in &split.trajectories {
        let y = &traj.severity[mi];
        let mut tv = vec![f64::NAN; traj.t_len];
        for t in 0..traj.t_len.saturating_sub(horizon) {
            tv[t] = (y[t + horizon] - y[t] - ds.mean) / ds.std;
            n_records += 1;
        }
        targets.push(tv);
    }
    if n_records == 0 {
        return Err(Error::NoUsableSamples { horizon });
    }
    let windows = chunk_windows(&split, context);
    Ok(ModelDataset {
        split,
        metric,
        horizon,
        scheme,
        windows,
        targets,
        n_records,
        actions_only_keep_demographics: false,
        pair_seed,
    })
}

/// Action tensors substituted at evaluation time; one entry per trajectory,
/// shaped like `PreparedTrajectory::act_z`.
pub type ActionTensors = Vec<Vec<f64>>;

impl ModelDataset {
    /// The z-value a raw dose of zero maps to, per drug.
    pub fn zero_dose_z(stats: &NormalizationStats) -> [f64; 2] {
        [
            (0.0f64.ln_1p() - stats.action[0].mean) / stats.action[0].std,
            (0.0f64.ln_1p() - stats.action[1].mean) / stats.action[1].std,
        ]
    }

    /// Assemble the model input/target sequence for one window, optionally
    /// reading actions from substituted tensors.
    pub fn example(&self, window: Window, actions_override: Option<&ActionTensors>) -> SeqExample {
        let split = &self.split;
        let traj = &split.trajectories[window.traj];
        let n_obs = split.n_obs;
        let w = self.horizon;
        let t_len = window.len;
        let zero_states = self.scheme == TrainingScheme::ActionsOnly;
        let neutral_actions = self.scheme == TrainingScheme::StatesOnly;

        let true_obs: Vec<f64> =
            traj.obs_z[window.start * n_obs..(window.start + t_len) * n_obs].to_vec();
        let obs = if zero_states { vec![0.0; t_len * n_obs] } else { true_obs.clone() };
        let demo = if zero_states && !self.actions_only_keep_demographics {
            vec![0.0; split.n_demo]
        } else {
            traj.demo_z.clone()
        };

        let act_source: &[f64] = match actions_override {
            Some(tensors) => &tensors[window.traj],
            None => &traj.act_z,
        };
        // Future-action window per position: hours p+1..p+w, zero-padded
        // (the training-split mean in z-space) past the end of the stay.
        let mut actions = vec![0.0; t_len * 2 * w];
        if !neutral_actions {
            for t in 0..t_len {
                let p = window.start + t;
                for k in 1..=w {
                    if p + k < traj.t_len {
                        let src = (p + k) * 2;
                        let dst = t * 2 * w + (k - 1) * 2;
                        actions[dst] = act_source[src];
                        actions[dst + 1] = act_source[src + 1];
                    }
                }
            }
        }

        let mut sev_target = vec![0.0; t_len];
        let mut sev_mask = vec![false; t_len];
        for t in 0..t_len {
            let p = window.start + t;
            let z = self.targets[window.traj][p];
            if z.is_finite() {
                sev_target[t] = z;
                sev_mask[t] = true;
            }
        }

        let terminal: Vec<f64> = (0..t_len)
            .map(|t| if window.start + t == traj.t_len - 1 { 1.0 } else { 0.0 })
            .collect();

        // Deterministic 1:1 positive/negative adjacency pairs.
        let mut pair_rng = ChaCha8Rng::seed_from_u64(
            self.pair_seed ^ (window.traj as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                ^ (window.start as u64).wrapping_mul(0xd1b5_4a32_d192_ed03),
        );
        let mut adj_pairs = Vec::new();
        if t_len >= 3 {
            for t in 0..t_len - 1 {
                if pair_rng.gen_bool(0.5) {
                    adj_pairs.push((t, t + 1, 1.0));
                } else {
                    // A non-adjacent partner in the same window.
                    let mut p = pair_rng.gen_range(0..t_len);
                    let mut guard = 0;
                    while (p == t || p == t + 1 || p + 1 == t) && guard < 16 {
                        p = pair_rng.gen_range(0..t_len);
                        guard += 1;
                    }
                    if p != t && p != t + 1 && p + 1 != t {
                        adj_pairs.push((t, p, 0.0));
                    }
                }
            }
        }

        SeqExample {
            t_len,
            obs,
            demo,
            actions,
            sev_target,
            sev_mask,
            recon_target: true_obs,
            terminal,
            adj_pairs,
            bc_target: Vec::new(),
            bc_mask: Vec::new(),
        }
    }
}

/// Dataset for behavior cloning: inputs are states only; targets are the
/// z-scaled log-doses 1..=horizons hours ahead for both drugs.
#[derive(Debug, Clone)]
pub struct CloneDataset {
    pub split: Arc<PreparedSplit>,
    pub horizons: usize,
    pub windows: Vec<Window>,
    pub n_records: usize,
}

pub fn build_clone_dataset(split: Arc<PreparedSplit>, horizons: usize, context: usize) -> Result<CloneDataset> {
    let windows = chunk_windows(&split, context);
    let n_records: usize = split.trajectories.iter().map(|t| t.t_len.saturating_sub(1)).sum();
    if n_records == 0 {
        return Err(Error::NoUsableSamples { horizon: 1 });
    }
    Ok(CloneDataset { split, horizons, windows, n_records })
}

impl CloneDataset {
    pub fn example(&self, window: Window) -> SeqExample {
        let split = &self.split;
        let traj = &split.trajectories[window.traj];
        let n_obs = split.n_obs;
        let t_len = window.len;
        let h = self.horizons;

        let obs = traj.obs_z[window.start * n_obs..(window.start + t_len) * n_obs].to_vec();
        let mut bc_target = vec![0.0; t_len * 2 * h];
        let mut bc_mask = vec![false; t_len * 2 * h];
        for t in 0..t_len {
            let p = window.start + t;
            for k in 1..=h {
                if p + k < traj.t_len {
                    let dst = t * 2 * h + (k - 1) * 2;
                    bc_target[dst] = traj.act_z[(p + k) * 2];
                    bc_target[dst + 1] = traj.act_z[(p + k) * 2 + 1];
                    bc_mask[dst] = true;
                    bc_mask[dst + 1] = true;
                }
            }
        }
        SeqExample {
            t_len,
            obs,
            demo: traj.demo_z.clone(),
            actions: Vec::new(),
            sev_target: vec![0.0; t_len],
            sev_mask: vec![false; t_len],
            recon_target: Vec::new(),
            terminal: Vec::new(),
            adj_pairs: Vec::new(),
            bc_target,
            bc_mask,
        }
    }
}

// ---------------------------------------------------------------------------
// Prepared-split binary file
// ---------------------------------------------------------------------------

const DATASET_MAGIC: &[u8; 8] = b"ASLDATA1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    n_trajectories: usize,
    n_obs: usize,
    n_demo: usize,
    total_steps: usize,
    stats_fingerprint: String,
    /// horizon -> number of (patient, anchor) records.
    record_counts: std::collections::BTreeMap<usize, usize>,
}

/// Persist a prepared split: JSON header (record counts, shapes, stats
/// fingerprint) followed by little-endian f64 tensors.
pub fn save_prepared_split(path: &Path, split: &PreparedSplit, horizons: &[usize]) -> Result<()> {
    let header = DatasetHeader {
        n_trajectories: split.trajectories.len(),
        n_obs: split.n_obs,
        n_demo: split.n_demo,
        total_steps: split.total_steps(),
        stats_fingerprint: split.stats_fingerprint.clone(),
        record_counts: horizons.iter().map(|&h| (h, split.sample_count(h))).collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    let write_f64s = |w: &mut BufWriter<std::fs::File>, xs: &[f64]| -> Result<()> {
        for v in xs {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for traj in &split.trajectories {
        let id = traj.patient_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&(traj.t_len as u32).to_le_bytes())?;
        write_f64s(&mut w, &traj.obs_z)?;
        write_f64s(&mut w, &traj.demo_z)?;
        write_f64s(&mut w, &traj.act_z)?;
        for sv in &traj.severity {
            write_f64s(&mut w, sv)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_prepared_split(path: &Path) -> Result<PreparedSplit> {
    let corrupt = |detail: String| Error::CorruptResult { path: path.display().to_string(), detail };
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes)?;
    let header: DatasetHeader = serde_json::from_slice(&hbytes)?;

    let read_f64s = |r: &mut BufReader<std::fs::File>, n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    for _ in 0..header.n_trajectories {
        r.read_exact(&mut len4)?;
        let id_len = u32::from_le_bytes(len4) as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        r.read_exact(&mut len4)?;
        let t_len = u32::from_le_bytes(len4) as usize;
        let obs_z = read_f64s(&mut r, t_len * header.n_obs)?;
        let demo_z = read_f64s(&mut r, header.n_demo)?;
        let act_z = read_f64s(&mut r, t_len * 2)?;
        let severity = [
            read_f64s(&mut r, t_len)?,
            read_f64s(&mut r, t_len)?,
            read_f64s(&mut r, t_len)?,
        ];
        trajectories.push(PreparedTrajectory {
            patient_id: String::from_utf8(id).map_err(|e| corrupt(format!("bad id: {e}")))?,
            t_len,
            obs_z,
            demo_z,
            act_z,
            severity,
        });
    }
    let split = PreparedSplit {
        trajectories,
        n_obs: header.n_obs,
        n_demo: header.n_demo,
        stats_fingerprint: header.stats_fingerprint.clone(),
    };
    if split.total_steps() != header.total_steps {
        return Err(corrupt("step count mismatch".into()));
    }
    for (&h, &n) in &header.record_counts {
        if split.sample_count(h) != n {
            return Err(corrupt(format!("record count mismatch at horizon {h}")));
        }
    }
    Ok(split)
}

/// Short content fingerprint of a prepared split (identity of the tensors).
pub fn split_fingerprint(split: &PreparedSplit) -> String {
    let mut bytes = Vec::new();
    for t in &split.trajectories {
        bytes.extend_from_slice(t.patient_id.as_bytes());
        bytes.extend_from_slice(&(t.t_len as u64).to_le_bytes());
        for v in t.obs_z.iter().take(4) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    short_hash(&bytes)
}
