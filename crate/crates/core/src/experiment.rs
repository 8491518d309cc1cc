//! The dynamics experiment grid: train models under three input schemes and
//! score each under four test-time action substitutions.
//!
//! A grid cell is (severity metric, horizon, scheme, seed); the default grid
//! is 3 x 3 x 3 x 3 = 81 models, each evaluated under 4 conditions for 324
//! RMSE entries. Cells run in parallel and are merged by coordinate, so the
//! report is identical for any worker count.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    backward_and_step, dynamics_forward, AdamConfig, AdamState, DataShape,
    DynamicsModelConfig, LossWeights, ModelKind, ModelStructure, ParameterSet,
};
use crate::preprocess::{build_model_dataset, ActionTensors, ModelDataset, PreparedSplit};
use crate::trajectory::{NormalizationStats, SeverityMetric};

/// Which inputs the model sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingScheme {
    ActionsOnly,
    StatesOnly,
    StatesAndActions,
}

impl TrainingScheme {
    pub const ALL: [TrainingScheme; 3] =
        [TrainingScheme::ActionsOnly, TrainingScheme::StatesOnly, TrainingScheme::StatesAndActions];

    pub fn name(self) -> &'static str {
        match self {
            TrainingScheme::ActionsOnly => "actions_only",
            TrainingScheme::StatesOnly => "states_only",
            TrainingScheme::StatesAndActions => "states_and_actions",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "actions_only" => Some(TrainingScheme::ActionsOnly),
            "states_only" => Some(TrainingScheme::StatesOnly),
            "states_and_actions" => Some(TrainingScheme::StatesAndActions),
            _ => None,
        }
    }
}

impl std::fmt::Display for TrainingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Test-time action substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCondition {
    True,
    Zero,
    Shuffled,
    Mean,
}

impl EvalCondition {
    pub const ALL: [EvalCondition; 4] =
        [EvalCondition::True, EvalCondition::Zero, EvalCondition::Shuffled, EvalCondition::Mean];

    pub fn name(self) -> &'static str {
        match self {
            EvalCondition::True => "true",
            EvalCondition::Zero => "zero",
            EvalCondition::Shuffled => "shuffled",
            EvalCondition::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "true" => Some(EvalCondition::True),
            "zero" => Some(EvalCondition::Zero),
            "shuffled" => Some(EvalCondition::Shuffled),
            "mean" => Some(EvalCondition::Mean),
            _ => None,
        }
    }
}

impl std::fmt::Display for EvalCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How the shuffled condition permutes hourly action vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleScope {
    /// Permute across every (trajectory, hour) slot of the split.
    #[default]
    Split,
    /// Permute hours within each trajectory.
    Trajectory,
}

/// Grid definition: the cross product of these axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub metrics: Vec<SeverityMetric>,
    pub horizons: Vec<usize>,
    pub schemes: Vec<TrainingScheme>,
    pub seeds: Vec<u64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            metrics: SeverityMetric::ALL.to_vec(),
            horizons: vec![6, 12, 18],
            schemes: TrainingScheme::ALL.to_vec(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl GridSpec {
    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::new();
        for &metric in &self.metrics {
            for &horizon in &self.horizons {
                for &scheme in &self.schemes {
                    for &seed in &self.seeds {
                        out.push(GridCell { metric, horizon, scheme, seed });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub metric: SeverityMetric,
    pub horizon: usize,
    pub scheme: TrainingScheme,
    pub seed: u64,
}

impl GridCell {
    /// Directory-friendly identifier: `<metric>_<h>h_<scheme>_s<seed>`.
    pub fn key(&self) -> String {
        format!("{}_{}h_{}_s{}", self.metric.name(), self.horizon, self.scheme.name(), self.seed)
    }
}

/// Training hyperparameters for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub model: DynamicsModelConfig,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Let actions-only models keep the demographic inputs.
    pub actions_only_keep_demographics: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: DynamicsModelConfig::default(),
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            actions_only_keep_demographics: false,
        }
    }
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the concatenated parts.
    let mut acc = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = acc ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}

fn cell_rng_seed(run_seed: u64, cell: &GridCell) -> u64 {
    mix_seed(&[
        run_seed,
        cell.metric as u64,
        cell.horizon as u64,
        cell.scheme as u64,
        cell.seed,
    ])
}

// ---------------------------------------------------------------------------
// Action perturbation
// ---------------------------------------------------------------------------

/// Build the substituted action tensors for one evaluation condition.
///
/// True copies the originals; Zero maps a raw dose of 0 through log(1+x) and
/// the z-transform (a specific negative value per drug); Mean uses the
/// training-split mean, which is the zero vector in z-space; Shuffled
/// permutes hourly action vectors (both drugs moving together) across the
/// whole split, or within each trajectory when so scoped.
pub fn perturb_actions(
    split: &PreparedSplit,
    condition: EvalCondition,
    stats: &NormalizationStats,
    scope: ShuffleScope,
    rng: &mut ChaCha8Rng,
) -> ActionTensors {
    match condition {
        EvalCondition::True => split.trajectories.iter().map(|t| t.act_z.clone()).collect(),
        EvalCondition::Zero => {
            let z0 = ModelDataset::zero_dose_z(stats);
            split
                .trajectories
                .iter()
                .map(|t| {
                    let mut a = vec![0.0; t.act_z.len()];
                    for h in 0..t.t_len {
                        a[h * 2] = z0[0];
                        a[h * 2 + 1] = z0[1];
                    }
                    a
                })
                .collect()
        }
        EvalCondition::Mean => split.trajectories.iter().map(|t| vec![0.0; t.act_z.len()]).collect(),
        EvalCondition::Shuffled => {
            let mut tensors: ActionTensors =
                split.trajectories.iter().map(|t| t.act_z.clone()).collect();
            match scope {
                ShuffleScope::Split => {
                    let mut slots: Vec<(usize, usize)> = Vec::new();
                    for (ti, t) in split.trajectories.iter().enumerate() {
                        for h in 0..t.t_len {
                            slots.push((ti, h));
                        }
                    }
                    let mut order: Vec<usize> = (0..slots.len()).collect();
                    order.shuffle(rng);
                    let pool: Vec<[f64; 2]> = slots
                        .iter()
                        .map(|&(ti, h)| {
                            let a = &split.trajectories[ti].act_z;
                            [a[h * 2], a[h * 2 + 1]]
                        })
                        .collect();
                    for (dst, &src) in order.iter().enumerate() {
                        let (ti, h) = slots[dst];
                        tensors[ti][h * 2] = pool[src][0];
                        tensors[ti][h * 2 + 1] = pool[src][1];
                    }
                }
                ShuffleScope::Trajectory => {
                    for (ti, t) in split.trajectories.iter().enumerate() {
                        let mut order: Vec<usize> = (0..t.t_len).collect();
                        order.shuffle(rng);
                        for (dst, &src) in order.iter().enumerate() {
                            tensors[ti][dst * 2] = t.act_z[src * 2];
                            tensors[ti][dst * 2 + 1] = t.act_z[src * 2 + 1];
                        }
                    }
                }
            }
            tensors
        }
    }
}

// ---------------------------------------------------------------------------
// Per-cell training and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_severity_mse: f64,
    pub val_severity_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_severity_mse: f64,
    pub steps: usize,
}

pub struct TrainedCell {
    pub params: ParameterSet,
    pub log: TrainingLog,
    pub stats_fingerprint: String,
}

/// Mean squared severity error of the model over a dataset (true actions).
fn severity_mse(params: &ParameterSet, ds: &ModelDataset, actions: Option<&ActionTensors>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &w in &ds.windows {
        let ex = ds.example(w, actions);
        let out = dynamics_forward(params, &ex)?;
        for t in 0..ex.t_len {
            if ex.sev_mask[t] {
                sum += (out.severity[t] - ex.sev_target[t]).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

/// Train one grid cell to convergence (early stopping on validation
/// severity MSE), returning the best parameters and the per-epoch log.
pub fn train_dynamics_model(
    cell: &GridCell,
    train: &ModelDataset,
    val: &ModelDataset,
    cfg: &TrainingConfig,
    run_seed: u64,
) -> Result<TrainedCell> {
    let shape = DataShape {
        n_obs: train.split.n_obs,
        n_demo: train.split.n_demo,
        action_window: cell.horizon,
    };
    let structure = ModelStructure::new(cfg.model.clone(), shape, ModelKind::Dynamics)?;
    let seed = cell_rng_seed(run_seed, cell);
    let mut params = ParameterSet::init(structure, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 1]));

    let batches_per_epoch = train.windows.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.max_epochs;
    let mut opt = AdamState::new(params.n_params(), cfg.adam, total_steps);

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.windows.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut train_sev = 0.0;
        let mut train_sev_n = 0usize;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train.example(train.windows[i], None)).collect();
            let loss = backward_and_step(&mut params, &mut opt, &batch, &cfg.loss_weights)?;
            train_loss += loss.total;
            train_sev += loss.severity * loss.n_severity as f64;
            train_sev_n += loss.n_severity;
            n_batches += 1;
        }
        log.steps = opt.step;
        let val_mse = severity_mse(&params, val, None)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: train_loss / n_batches.max(1) as f64,
            train_severity_mse: if train_sev_n > 0 { train_sev / train_sev_n as f64 } else { f64::NAN },
            val_severity_mse: val_mse,
        });
        let improved = best.as_ref().map(|(b, _, _)| val_mse < *b).unwrap_or(true);
        if improved {
            best = Some((val_mse, params.values.clone(), epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }

    let (best_val, best_values, best_epoch) = best.expect("at least one epoch");
    params.values = best_values;
    log.best_epoch = best_epoch;
    log.best_val_severity_mse = best_val;
    Ok(TrainedCell {
        params,
        log,
        stats_fingerprint: train.split.stats_fingerprint.clone(),
    })
}

/// Root-mean-squared severity error in z-units over all test records under
/// substituted actions. Optionally retains (prediction, target) pairs.
pub fn evaluate_rmse(
    params: &ParameterSet,
    model_fingerprint: &str,
    test: &ModelDataset,
    actions: &ActionTensors,
    mut retain: Option<&mut Vec<(f64, f64)>>,
) -> Result<f64> {
    if model_fingerprint != test.split.stats_fingerprint {
        return Err(Error::NormalizationMismatch {
            model: model_fingerprint.to_string(),
            data: test.split.stats_fingerprint.clone(),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for &w in &test.windows {
        let ex = test.example(w, Some(actions));
        let out = dynamics_forward(params, &ex)?;
        for t in 0..ex.t_len {
            if ex.sev_mask[t] {
                let (p, y) = (out.severity[t], ex.sev_target[t]);
                sum += (p - y).powi(2);
                n += 1;
                if let Some(pairs) = retain.as_deref_mut() {
                    pairs.push((p, y));
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::NoUsableSamples { horizon: test.horizon });
    }
    Ok((sum / n as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Grid orchestration and the diagnostic report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub metric: SeverityMetric,
    pub horizon: usize,
    pub scheme: TrainingScheme,
    pub seed: u64,
    pub status: CellStatus,
    /// Condition name -> RMSE in z-units.
    pub rmse: BTreeMap<String, f64>,
    pub log: TrainingLog,
    pub wall_seconds: f64,
    /// Retained (prediction, target) pairs per condition, when requested.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub samples: BTreeMap<String, Vec<(f64, f64)>>,
}

/// Cross-seed aggregate for one (metric, horizon, scheme, condition).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateEntry {
    pub metric: SeverityMetric,
    pub horizon: usize,
    pub scheme: TrainingScheme,
    pub condition: EvalCondition,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub n_seeds: usize,
}

/// The informative-actions statistic for one (metric, horizon).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictCell {
    pub metric: SeverityMetric,
    pub horizon: usize,
    /// Mean over seeds of RMSE(states_only, true) - RMSE(states_and_actions, true).
    pub gap: f64,
    pub pooled_std: f64,
    /// Mean over seeds of RMSE(states_and_actions, shuffled) - RMSE(states_and_actions, true).
    pub shuffled_degradation: f64,
    pub shuffled_pooled_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verdict {
    pub per_cell: Vec<VerdictCell>,
    pub overall_gap: f64,
    pub overall_pooled_std: f64,
    pub overall_shuffled_degradation: f64,
    pub overall_shuffled_pooled_std: f64,
    /// Absolute floor under which a gap is treated as noise.
    pub min_gap: f64,
    pub informative: bool,
    pub label: String,
}

pub const VERDICT_INFORMATIVE: &str = "actions informative";
pub const VERDICT_NOT_INFORMATIVE: &str = "actions not informative";
pub const VERDICT_MIN_GAP: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub grid: GridSpec,
    pub run_seed: u64,
    pub stats_fingerprint: String,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<AggregateEntry>,
    pub verdict: Verdict,
    pub n_failed: usize,
}

/// Which cell's prediction/target pairs to keep for histogram rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRetention {
    pub metric: SeverityMetric,
    pub horizon: usize,
    pub scheme: TrainingScheme,
    pub seed: u64,
    pub conditions: Vec<EvalCondition>,
    pub max_samples: usize,
}

impl Default for SampleRetention {
    fn default() -> Self {
        SampleRetention {
            metric: SeverityMetric::Sofa,
            horizon: 12,
            scheme: TrainingScheme::StatesAndActions,
            seed: 0,
            conditions: vec![EvalCondition::True, EvalCondition::Shuffled],
            max_samples: 4000,
        }
    }
}

pub struct GridRunInputs<'a> {
    pub train: Arc<PreparedSplit>,
    pub val: Arc<PreparedSplit>,
    pub test: Arc<PreparedSplit>,
    pub stats: &'a NormalizationStats,
}

/// Run every cell of the grid (in parallel), evaluate all four conditions,
/// aggregate across seeds, and compute the verdict. When `artifacts_dir` is
/// given, each cell's checkpoint and training log are persisted under
/// `cells/<cell key>/`.
pub fn run_experiment_grid(
    grid: &GridSpec,
    inputs: &GridRunInputs<'_>,
    training: &TrainingConfig,
    run_seed: u64,
    shuffle_scope: ShuffleScope,
    retention: Option<&SampleRetention>,
    artifacts_dir: Option<&Path>,
) -> Result<DiagnosticReport> {
    let cells = grid.cells();
    if let Some(dir) = artifacts_dir {
        std::fs::create_dir_all(dir.join("cells"))?;
    }

    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| run_cell(cell, inputs, training, run_seed, shuffle_scope, retention, artifacts_dir))
        .collect();

    let n_failed = results.iter().filter(|r| r.status != CellStatus::Ok).count();
    let aggregates = aggregate(&results);
    let verdict = compute_verdict(&aggregates, &results);
    Ok(DiagnosticReport {
        grid: grid.clone(),
        run_seed,
        stats_fingerprint: inputs.stats.fingerprint(),
        cells: results,
        aggregates,
        verdict,
        n_failed,
    })
}

fn run_cell(
    cell: &GridCell,
    inputs: &GridRunInputs<'_>,
    training: &TrainingConfig,
    run_seed: u64,
    shuffle_scope: ShuffleScope,
    retention: Option<&SampleRetention>,
    artifacts_dir: Option<&Path>,
) -> CellResult {
    let start = Instant::now();
    let mut result = CellResult {
        metric: cell.metric,
        horizon: cell.horizon,
        scheme: cell.scheme,
        seed: cell.seed,
        status: CellStatus::Ok,
        rmse: BTreeMap::new(),
        log: TrainingLog::default(),
        wall_seconds: 0.0,
        samples: BTreeMap::new(),
    };

    let outcome = (|| -> Result<()> {
        let context = training.model.context;
        let pair_seed = mix_seed(&[run_seed, 2, cell.seed]);
        let mut train_ds = build_model_dataset(
            inputs.train.clone(),
            cell.metric,
            cell.horizon,
            cell.scheme,
            inputs.stats,
            context,
            pair_seed,
        )?;
        let mut val_ds = build_model_dataset(
            inputs.val.clone(),
            cell.metric,
            cell.horizon,
            cell.scheme,
            inputs.stats,
            context,
            mix_seed(&[pair_seed, 3]),
        )?;
        let mut test_ds = build_model_dataset(
            inputs.test.clone(),
            cell.metric,
            cell.horizon,
            cell.scheme,
            inputs.stats,
            context,
            mix_seed(&[pair_seed, 4]),
        )?;
        train_ds.actions_only_keep_demographics = training.actions_only_keep_demographics;
        val_ds.actions_only_keep_demographics = training.actions_only_keep_demographics;
        test_ds.actions_only_keep_demographics = training.actions_only_keep_demographics;

        let trained = train_dynamics_model(cell, &train_ds, &val_ds, training, run_seed)?;
        result.log = trained.log.clone();

        for condition in EvalCondition::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[run_seed, 5, cell.seed, condition as u64]));
            let actions = perturb_actions(&inputs.test, condition, inputs.stats, shuffle_scope, &mut rng);
            let retain_here = retention.map_or(false, |r| {
                r.metric == cell.metric
                    && r.horizon == cell.horizon
                    && r.scheme == cell.scheme
                    && r.seed == cell.seed
                    && r.conditions.contains(&condition)
            });
            let mut pairs = Vec::new();
            let rmse = evaluate_rmse(
                &trained.params,
                &trained.stats_fingerprint,
                &test_ds,
                &actions,
                retain_here.then_some(&mut pairs),
            )?;
            result.rmse.insert(condition.name().to_string(), rmse);
            if retain_here {
                let cap = retention.map(|r| r.max_samples).unwrap_or(4000);
                if pairs.len() > cap {
                    let stride = pairs.len().div_ceil(cap);
                    pairs = pairs.into_iter().step_by(stride).collect();
                }
                result.samples.insert(condition.name().to_string(), pairs);
            }
        }

        if let Some(dir) = artifacts_dir {
            let cell_dir = dir.join("cells").join(cell.key());
            std::fs::create_dir_all(&cell_dir)?;
            crate::nn::save_checkpoint(
                &cell_dir.join("checkpoint.bin"),
                &trained.params,
                trained.log.steps,
                &trained.stats_fingerprint,
            )?;
            let log_file = std::fs::File::create(cell_dir.join("log.json"))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(log_file), &trained.log)?;
        }
        Ok(())
    })();

    if let Err(e) = outcome {
        result.status = CellStatus::Failed(e.to_string());
    }
    result.wall_seconds = start.elapsed().as_secs_f64();
    result
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Cross-seed mean and standard deviation per (metric, horizon, scheme,
/// condition).
pub fn aggregate(cells: &[CellResult]) -> Vec<AggregateEntry> {
    let mut grouped: BTreeMap<(SeverityMetric, usize, TrainingScheme, EvalCondition), Vec<f64>> =
        BTreeMap::new();
    for c in cells {
        if c.status != CellStatus::Ok {
            continue;
        }
        for condition in EvalCondition::ALL {
            if let Some(&rmse) = c.rmse.get(condition.name()) {
                grouped
                    .entry((c.metric, c.horizon, c.scheme, condition))
                    .or_default()
                    .push(rmse);
            }
        }
    }
    grouped
        .into_iter()
        .map(|((metric, horizon, scheme, condition), v)| {
            let (mean_rmse, std_rmse) = mean_std(&v);
            AggregateEntry { metric, horizon, scheme, condition, mean_rmse, std_rmse, n_seeds: v.len() }
        })
        .collect()
}

fn compute_verdict(aggregates: &[AggregateEntry], cells: &[CellResult]) -> Verdict {
    let mut per_cell = Vec::new();
    let mut pairs: BTreeMap<(SeverityMetric, usize), ()> = BTreeMap::new();
    for a in aggregates {
        pairs.insert((a.metric, a.horizon), ());
    }
    let seed_rmses = |metric, horizon, scheme, condition: EvalCondition| -> Vec<f64> {
        cells
            .iter()
            .filter(|c| {
                c.status == CellStatus::Ok
                    && c.metric == metric
                    && c.horizon == horizon
                    && c.scheme == scheme
            })
            .filter_map(|c| c.rmse.get(condition.name()).copied())
            .collect()
    };
    for (metric, horizon) in pairs.keys().copied() {
        let so = seed_rmses(metric, horizon, TrainingScheme::StatesOnly, EvalCondition::True);
        let sa = seed_rmses(metric, horizon, TrainingScheme::StatesAndActions, EvalCondition::True);
        let sh = seed_rmses(metric, horizon, TrainingScheme::StatesAndActions, EvalCondition::Shuffled);
        if so.is_empty() || sa.is_empty() {
            continue;
        }
        let (m_so, s_so) = mean_std(&so);
        let (m_sa, s_sa) = mean_std(&sa);
        let (m_sh, s_sh) = mean_std(&sh);
        per_cell.push(VerdictCell {
            metric,
            horizon,
            gap: m_so - m_sa,
            pooled_std: ((s_so * s_so + s_sa * s_sa) / 2.0).sqrt(),
            shuffled_degradation: m_sh - m_sa,
            shuffled_pooled_std: ((s_sh * s_sh + s_sa * s_sa) / 2.0).sqrt(),
        });
    }
    let n = per_cell.len().max(1) as f64;
    let overall_gap = per_cell.iter().map(|c| c.gap).sum::<f64>() / n;
    let overall_pooled_std =
        (per_cell.iter().map(|c| c.pooled_std * c.pooled_std).sum::<f64>() / n).sqrt();
    let overall_shuffled_degradation =
        per_cell.iter().map(|c| c.shuffled_degradation).sum::<f64>() / n;
    let overall_shuffled_pooled_std =
        (per_cell.iter().map(|c| c.shuffled_pooled_std * c.shuffled_pooled_std).sum::<f64>() / n).sqrt();
    let informative = overall_gap > (2.0 * overall_pooled_std).max(VERDICT_MIN_GAP);
    Verdict {
        per_cell,
        overall_gap,
        overall_pooled_std,
        overall_shuffled_degradation,
        overall_shuffled_pooled_std,
        min_gap: VERDICT_MIN_GAP,
        informative,
        label: if informative { VERDICT_INFORMATIVE } else { VERDICT_NOT_INFORMATIVE }.to_string(),
    }
}
