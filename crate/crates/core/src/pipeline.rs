//! End-to-end pipeline stages behind the command-line interface: simulate,
//! preprocess, train-dynamics, train-bc, report. Every stage reads only
//! manifested inputs, writes deterministic bytes, and records its outputs in
//! the run manifest with content hashes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bc::{run_behavior_cloning, BCConfig, BCReport};
use crate::error::{Error, Result};
use crate::experiment::{
    run_experiment_grid, DiagnosticReport, GridRunInputs, GridSpec, SampleRetention, ShuffleScope,
    TrainingConfig,
};
use crate::manifest::RunManifest;
use crate::preprocess::{
    exclude_long_stays, fit_imputation, impute_missing, load_prepared_split, prepare_split,
    save_prepared_split, PreparedSplit,
};
use crate::reporting::{emit_histograms, emit_report, EmitOutcome};
use crate::sim::{cohort_meta, simulate_cohort, SimulatorConfig};
use crate::trajectory::{
    fit_normalization, read_cohort_csv, split_cohort, write_cohort_csv, NormalizationStats,
};

/// Everything a full run needs, loadable from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub simulator: SimulatorConfig,
    /// Patient-level train/val/test fractions.
    pub split_fractions: (f64, f64, f64),
    pub split_seed: u64,
    pub grid: GridSpec,
    pub training: TrainingConfig,
    pub bc: BCConfig,
    pub shuffle_scope: ShuffleScope,
    pub retention: SampleRetention,
    /// Seed for model initialization, shuffling, and evaluation draws.
    pub run_seed: u64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            simulator: SimulatorConfig::default(),
            split_fractions: (0.8, 0.1, 0.1),
            split_seed: 17,
            grid: GridSpec::default(),
            training: TrainingConfig::default(),
            bc: BCConfig::default(),
            shuffle_scope: ShuffleScope::default(),
            retention: SampleRetention::default(),
            run_seed: 42,
            workers: 1,
        }
    }
}

impl RunConfig {
    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.training.model.validate()?;
        self.bc.model.validate()?;
        if self.workers < 1 {
            return Err(Error::InvalidConfig("workers must be >= 1".into()));
        }
        if self.grid.metrics.is_empty()
            || self.grid.horizons.is_empty()
            || self.grid.schemes.is_empty()
            || self.grid.seeds.is_empty()
        {
            return Err(Error::InvalidConfig("grid axes must be non-empty".into()));
        }
        Ok(())
    }

    /// Horizons the normalization statistics must cover.
    fn stat_horizons(&self) -> Vec<usize> {
        let mut h = self.grid.horizons.clone();
        h.sort_unstable();
        h.dedup();
        h
    }
}

/// Run a closure inside a rayon pool of the configured width.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool");
    pool.install(f)
}

pub const COHORT_CSV: &str = "cohort.csv";
pub const COHORT_META: &str = "cohort_meta.json";
pub const STATS_JSON: &str = "splits/stats.json";
pub const GRID_REPORT: &str = "dynamics/grid_report.json";
pub const BC_REPORT: &str = "bc/bc_report.json";

fn split_csv(name: &str) -> String {
    format!("splits/{name}.csv")
}

fn split_bin(name: &str) -> String {
    format!("splits/dataset_{name}.bin")
}

/// Generate the synthetic cohort and write it as CSV + JSON sidecar.
pub fn stage_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let cohort = with_workers(cfg.workers, || simulate_cohort(&cfg.simulator))?;
    let meta = cohort_meta(&cfg.simulator, &cohort);
    let csv_path = out_dir.join(COHORT_CSV);
    let meta_path = out_dir.join(COHORT_META);
    write_cohort_csv(&csv_path, &meta_path, &cohort, &meta)?;

    let mut manifest = RunManifest::load_or_default(out_dir)?;
    manifest.record_stage(
        "simulate",
        cfg,
        cfg.simulator.seed,
        out_dir,
        &[&csv_path, &meta_path],
        &[],
    )?;
    manifest.save(out_dir)?;
    Ok(())
}

/// Split, impute, normalize, and persist the prepared tensors.
pub fn stage_preprocess(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let manifest = RunManifest::load_or_default(out_dir)?;
    let csv_path = manifest.verify_input(out_dir, "simulate", COHORT_CSV)?;
    let meta_path = manifest.verify_input(out_dir, "simulate", COHORT_META)?;
    let (cohort, meta) = read_cohort_csv(&csv_path, &meta_path)?;

    let (cohort, _removed) = exclude_long_stays(cohort);
    let (mut train, mut val, mut test) = split_cohort(cohort, cfg.split_fractions, cfg.split_seed)?;

    let imputation = fit_imputation(&train)?;
    impute_missing(&mut train, &imputation);
    impute_missing(&mut val, &imputation);
    impute_missing(&mut test, &imputation);

    let stats = fit_normalization(&train, &cfg.stat_horizons())?;

    std::fs::create_dir_all(out_dir.join("splits"))?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
        let csv = out_dir.join(split_csv(name));
        let meta_out = out_dir.join(format!("splits/{name}_meta.json"));
        let mut split_meta = meta.clone();
        split_meta.demographics = split
            .iter()
            .map(|t| (t.patient_id.clone(), t.demographics.values.clone()))
            .collect();
        write_cohort_csv(&csv, &meta_out, split, &split_meta)?;
        outputs.push(csv);
        outputs.push(meta_out);

        let prepared = prepare_split(split, &stats)?;
        let bin = out_dir.join(split_bin(name));
        save_prepared_split(&bin, &prepared, &cfg.stat_horizons())?;
        outputs.push(bin);
    }
    let stats_path = out_dir.join(STATS_JSON);
    stats.save_json(&stats_path)?;
    outputs.push(stats_path);

    let mut manifest = RunManifest::load_or_default(out_dir)?;
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    manifest.record_stage(
        "preprocess",
        cfg,
        cfg.split_seed,
        out_dir,
        &output_refs,
        &[&csv_path, &meta_path],
    )?;
    manifest.save(out_dir)?;
    Ok(())
}

fn load_splits(
    cfg_workers_unused: usize,
    out_dir: &Path,
    manifest: &RunManifest,
) -> Result<(Arc<PreparedSplit>, Arc<PreparedSplit>, Arc<PreparedSplit>, NormalizationStats)> {
    let _ = cfg_workers_unused;
    let stats_path = manifest.verify_input(out_dir, "preprocess", STATS_JSON)?;
    let stats = NormalizationStats::load_json(&stats_path)?;
    let mut splits = Vec::new();
    for name in ["train", "val", "test"] {
        let p = manifest.verify_input(out_dir, "preprocess", &split_bin(name))?;
        splits.push(Arc::new(load_prepared_split(&p)?));
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok((train, val, test, stats))
}

/// Train the full grid and write the diagnostic report.
pub fn stage_train_dynamics(cfg: &RunConfig, out_dir: &Path) -> Result<DiagnosticReport> {
    let manifest = RunManifest::load_or_default(out_dir)?;
    let (train, val, test, stats) = load_splits(cfg.workers, out_dir, &manifest)?;

    let dynamics_dir = out_dir.join("dynamics");
    std::fs::create_dir_all(&dynamics_dir)?;
    let inputs = GridRunInputs { train, val, test, stats: &stats };
    let report = with_workers(cfg.workers, || {
        run_experiment_grid(
            &cfg.grid,
            &inputs,
            &cfg.training,
            cfg.run_seed,
            cfg.shuffle_scope,
            Some(&cfg.retention),
            Some(&dynamics_dir),
        )
    })?;

    let report_path = out_dir.join(GRID_REPORT);
    let file = std::fs::File::create(&report_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;

    let mut manifest = RunManifest::load_or_default(out_dir)?;
    manifest.record_stage(
        "train-dynamics",
        cfg,
        cfg.run_seed,
        out_dir,
        &[&report_path],
        &[],
    )?;
    manifest.save(out_dir)?;
    Ok(report)
}

/// Train the behavior-cloning replicates and write their report.
pub fn stage_train_bc(cfg: &RunConfig, out_dir: &Path) -> Result<BCReport> {
    let manifest = RunManifest::load_or_default(out_dir)?;
    let (train, val, test, _stats) = load_splits(cfg.workers, out_dir, &manifest)?;

    let report = with_workers(cfg.workers, || {
        run_behavior_cloning(train, val, test, &cfg.bc, Some(out_dir))
    })?;
    std::fs::create_dir_all(out_dir.join("bc"))?;
    let report_path = out_dir.join(BC_REPORT);
    let file = std::fs::File::create(&report_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;

    let mut manifest = RunManifest::load_or_default(out_dir)?;
    manifest.record_stage("train-bc", cfg, cfg.run_seed, out_dir, &[&report_path], &[])?;
    manifest.save(out_dir)?;
    Ok(report)
}

/// Emit the report tables, verdict, and histograms from stored results.
pub fn stage_report(cfg: &RunConfig, out_dir: &Path) -> Result<EmitOutcome> {
    let mut outcome = emit_report(out_dir)?;
    let hist = emit_histograms(out_dir)?;
    outcome.files.extend(hist.files);
    outcome.warnings.extend(hist.warnings);

    let mut manifest = RunManifest::load_or_default(out_dir)?;
    let refs: Vec<&Path> = outcome.files.iter().map(|p| p.as_path()).collect();
    manifest.record_stage("report", cfg, cfg.run_seed, out_dir, &refs, &[])?;
    manifest.save(out_dir)?;
    Ok(outcome)
}

/// Outcome of a full pipeline run.
pub struct FullRunOutcome {
    pub grid: DiagnosticReport,
    pub bc: BCReport,
    pub report: EmitOutcome,
}

/// All stages in order.
pub fn full_run(cfg: &RunConfig, out_dir: &Path) -> Result<FullRunOutcome> {
    stage_simulate(cfg, out_dir)?;
    stage_preprocess(cfg, out_dir)?;
    let grid = stage_train_dynamics(cfg, out_dir)?;
    let bc = stage_train_bc(cfg, out_dir)?;
    let report = stage_report(cfg, out_dir)?;
    Ok(FullRunOutcome { grid, bc, report })
}
