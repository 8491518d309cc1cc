//! Behavior cloning: predict the clinician's next 1..=6 hours of dosing from
//! the state history, and quantify predictability with per-drug, per-horizon
//! R-squared on held-out patients.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    backward_and_step, clone_forward, AdamConfig, AdamState, DataShape, DynamicsModelConfig,
    LossWeights, ModelKind, ModelStructure, ParameterSet,
};
use crate::preprocess::{build_clone_dataset, CloneDataset, PreparedSplit};
use crate::trajectory::Drug;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BCConfig {
    pub model: DynamicsModelConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Prediction horizons 1..=bc_horizons, in hours.
    pub bc_horizons: usize,
    pub seeds: Vec<u64>,
    /// Retained (prediction, target) pairs per (drug, horizon), from the
    /// first seed, for histogramming.
    pub max_retained_samples: usize,
    /// Optional dynamics checkpoint whose state encoder (embeddings and
    /// first block) warm-starts the clone model instead of fresh weights.
    #[serde(default)]
    pub warm_start_encoder: Option<std::path::PathBuf>,
}

impl Default for BCConfig {
    fn default() -> Self {
        BCConfig {
            model: DynamicsModelConfig::default(),
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            bc_horizons: 6,
            seeds: vec![0, 1, 2],
            max_retained_samples: 4000,
            warm_start_encoder: None,
        }
    }
}

/// Copy the state-encoder segments (embeddings, positions, first block)
/// from a dynamics checkpoint into a clone model, matching segments by name.
fn warm_start_from_dynamics(params: &mut ParameterSet, checkpoint: &std::path::Path) -> Result<()> {
    let (source, _) = crate::nn::load_checkpoint(checkpoint)?;
    let reusable = |name: &str| {
        name.starts_with("embed.state")
            || name.starts_with("embed.demo")
            || name.starts_with("embed.pos")
            || name.starts_with("b0.")
    };
    let src_segments: std::collections::BTreeMap<&str, &std::ops::Range<usize>> = source
        .structure
        .layout
        .segments
        .iter()
        .map(|(n, r)| (n.as_str(), r))
        .collect();
    for (name, range) in params.structure.layout.segments.clone() {
        if !reusable(&name) {
            continue;
        }
        let Some(src_range) = src_segments.get(name.as_str()) else {
            continue;
        };
        if src_range.len() != range.len() {
            return Err(Error::InvalidConfig(format!(
                "encoder segment {name} has {} values in the checkpoint but {} here",
                src_range.len(),
                range.len()
            )));
        }
        params.values[range].copy_from_slice(&source.values[(*src_range).clone()]);
    }
    Ok(())
}

fn bc_mse(params: &ParameterSet, ds: &CloneDataset) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &w in &ds.windows {
        let ex = ds.example(w);
        let out = clone_forward(params, &ex)?;
        for i in 0..ex.bc_target.len() {
            if ex.bc_mask[i] {
                sum += (out.bc[i] - ex.bc_target[i]).powi(2);
                n += 1;
            }
        }
    }
    Ok(if n > 0 { sum / n as f64 } else { f64::NAN })
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct BCTrainingLog {
    pub epochs: Vec<(usize, f64, f64)>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
}

pub struct TrainedClone {
    pub params: ParameterSet,
    pub log: BCTrainingLog,
    pub stats_fingerprint: String,
}

/// Train one behavior-cloning replicate: the shared state encoder plus a
/// two-layer feed-forward head predicting both drugs at 1..=H hours ahead.
pub fn train_behavior_clone(
    train: &CloneDataset,
    val: &CloneDataset,
    cfg: &BCConfig,
    seed: u64,
) -> Result<TrainedClone> {
    let shape = DataShape { n_obs: train.split.n_obs, n_demo: train.split.n_demo, action_window: 0 };
    let structure = ModelStructure::new(
        cfg.model.clone(),
        shape,
        ModelKind::BehaviorClone { bc_horizons: cfg.bc_horizons },
    )?;
    let mut params = ParameterSet::init(structure, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xbc);
    if let Some(path) = &cfg.warm_start_encoder {
        warm_start_from_dynamics(&mut params, path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc10e);

    let batches_per_epoch = train.windows.len().div_ceil(cfg.batch_size);
    let mut opt = AdamState::new(params.n_params(), cfg.adam, batches_per_epoch * cfg.max_epochs);
    let weights = LossWeights { recon: 0.0, terminal: 0.0, adjacency: 0.0 };

    let mut log = BCTrainingLog::default();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.windows.len()).collect();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train.example(train.windows[i])).collect();
            train_loss += backward_and_step(&mut params, &mut opt, &batch, &weights)?.total;
            n_batches += 1;
        }
        log.steps = opt.step;
        let val_mse = bc_mse(&params, val)?;
        log.epochs.push((epoch, train_loss / n_batches.max(1) as f64, val_mse));
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
    log.best_val_mse = best_val;
    Ok(TrainedClone { params, log, stats_fingerprint: train.split.stats_fingerprint.clone() })
}

/// Coefficient of determination plus squared Pearson correlation for one
/// output. `r2` is `None` when the target variance is zero (undefined).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitQuality {
    pub r2: Option<f64>,
    pub pearson_r2: Option<f64>,
    pub n: usize,
}

/// R-squared per (drug, horizon) over a test split, computed in z-scaled
/// log-dose space: 1 - SS_res / SS_tot against the test-set mean.
pub fn evaluate_r2(
    params: &ParameterSet,
    model_fingerprint: &str,
    test: &CloneDataset,
    retain: Option<(usize, &mut BTreeMap<(Drug, usize), Vec<(f64, f64)>>)>,
) -> Result<BTreeMap<(Drug, usize), FitQuality>> {
    if model_fingerprint != test.split.stats_fingerprint {
        return Err(Error::NormalizationMismatch {
            model: model_fingerprint.to_string(),
            data: test.split.stats_fingerprint.clone(),
        });
    }
    let h = test.horizons;
    // Collected (prediction, target) per output.
    let mut collected: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 2 * h];
    for &w in &test.windows {
        let ex = test.example(w);
        let out = clone_forward(params, &ex)?;
        for t in 0..ex.t_len {
            for o in 0..2 * h {
                let idx = t * 2 * h + o;
                if ex.bc_mask[idx] {
                    collected[o].push((out.bc[idx], ex.bc_target[idx]));
                }
            }
        }
    }

    let mut result = BTreeMap::new();
    let mut retain = retain;
    for k in 1..=h {
        for drug in Drug::ALL {
            let o = (k - 1) * 2 + drug.index();
            let pairs = &collected[o];
            let n = pairs.len();
            let quality = if n < 2 {
                FitQuality { r2: None, pearson_r2: None, n }
            } else {
                let ym = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
                let pm = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
                let ss_tot: f64 = pairs.iter().map(|p| (p.1 - ym).powi(2)).sum();
                let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
                // Degenerate target: no variance to explain.
                if ss_tot <= 1e-12 {
                    FitQuality { r2: None, pearson_r2: None, n }
                } else {
                    let cov: f64 = pairs.iter().map(|p| (p.0 - pm) * (p.1 - ym)).sum();
                    let var_p: f64 = pairs.iter().map(|p| (p.0 - pm).powi(2)).sum();
                    let pearson_r2 =
                        if var_p > 0.0 { Some((cov * cov) / (var_p * ss_tot)) } else { None };
                    FitQuality { r2: Some(1.0 - ss_res / ss_tot), pearson_r2, n }
                }
            };
            result.insert((drug, k), quality);
            if let Some((cap, store)) = retain.as_mut() {
                let mut kept = pairs.clone();
                if kept.len() > *cap {
                    let stride = kept.len().div_ceil(*cap);
                    kept = kept.into_iter().step_by(stride).collect();
                }
                store.insert((drug, k), kept);
            }
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BCEntry {
    pub seed: u64,
    pub drug: Drug,
    pub horizon: usize,
    pub r2: Option<f64>,
    pub pearson_r2: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BCSummary {
    pub drug: Drug,
    pub horizon: usize,
    pub mean_r2: f64,
    pub std_r2: f64,
    pub n_seeds: usize,
}

/// Full behavior-cloning result: per-seed fits, cross-seed summaries, and
/// retained sample pairs from the first seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BCReport {
    pub horizons: usize,
    pub seeds: Vec<u64>,
    pub entries: Vec<BCEntry>,
    pub summaries: Vec<BCSummary>,
    /// `"<drug>:<horizon>"` -> (prediction, target) pairs.
    #[serde(default)]
    pub samples: BTreeMap<String, Vec<(f64, f64)>>,
}

impl BCReport {
    pub fn mean_r2(&self, drug: Drug, horizon: usize) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.drug == drug && s.horizon == horizon)
            .map(|s| s.mean_r2)
    }
}

/// Train all replicates (parallel across seeds) and evaluate them on the
/// test split. Checkpoints are written under `artifacts_dir/bc/seed<k>/`
/// when a directory is given.
pub fn run_behavior_cloning(
    train: Arc<PreparedSplit>,
    val: Arc<PreparedSplit>,
    test: Arc<PreparedSplit>,
    cfg: &BCConfig,
    artifacts_dir: Option<&Path>,
) -> Result<BCReport> {
    let context = cfg.model.context;
    let train_ds = build_clone_dataset(train, cfg.bc_horizons, context)?;
    let val_ds = build_clone_dataset(val, cfg.bc_horizons, context)?;
    let test_ds = build_clone_dataset(test, cfg.bc_horizons, context)?;

    let trained: Vec<Result<TrainedClone>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_behavior_clone(&train_ds, &val_ds, cfg, seed))
        .collect();

    let mut entries = Vec::new();
    let mut samples: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, t) in trained.into_iter().enumerate() {
        let t = t?;
        let seed = cfg.seeds[i];
        let mut retained: BTreeMap<(Drug, usize), Vec<(f64, f64)>> = BTreeMap::new();
        let retain = if i == 0 { Some((cfg.max_retained_samples, &mut retained)) } else { None };
        let fits = evaluate_r2(&t.params, &t.stats_fingerprint, &test_ds, retain)?;
        for ((drug, horizon), q) in fits {
            entries.push(BCEntry {
                seed,
                drug,
                horizon,
                r2: q.r2,
                pearson_r2: q.pearson_r2,
                n: q.n,
            });
        }
        for ((drug, horizon), pairs) in retained {
            samples.insert(format!("{}:{horizon}", drug.name()), pairs);
        }
        if let Some(dir) = artifacts_dir {
            let seed_dir = dir.join("bc").join(format!("seed{seed}"));
            std::fs::create_dir_all(&seed_dir)?;
            crate::nn::save_checkpoint(
                &seed_dir.join("checkpoint.bin"),
                &t.params,
                t.log.steps,
                &t.stats_fingerprint,
            )?;
            let log_file = std::fs::File::create(seed_dir.join("log.json"))?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(log_file), &t.log)?;
        }
    }

    let mut summaries = Vec::new();
    for drug in Drug::ALL {
        for horizon in 1..=cfg.bc_horizons {
            let vals: Vec<f64> = entries
                .iter()
                .filter(|e| e.drug == drug && e.horizon == horizon)
                .filter_map(|e| e.r2)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            summaries.push(BCSummary { drug, horizon, mean_r2: mean, std_r2: std, n_seeds: vals.len() });
        }
    }

    Ok(BCReport { horizons: cfg.bc_horizons, seeds: cfg.seeds.clone(), entries, summaries, samples })
}
