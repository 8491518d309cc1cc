//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p asl-core --test acceptance -- --nocapture` to see
//! the per-criterion lines. The heavyweight fixtures (the two full grid
//! runs) execute once and are shared across criteria; a global lock keeps
//! them from running concurrently so each gets the whole worker pool.
//!
//! Criteria at a glance:
//!   1. analytic gradients match central differences on the canonical tiny
//!      model (max relative error < 1e-4, < 1 minute);
//!   2. score functions match independent table-lookup oracles exactly;
//!   3. on an action-inert cohort the full grid's RMSE spread across
//!      {true, zero, shuffled} x schemes stays below 0.05 z and the verdict
//!      is "actions not informative" (within the stated compute budget);
//!   4. on a strong-action cohort the states+actions model beats states-only
//!      by more than twice the seed noise, shuffling degrades it, and the
//!      verdict flips;
//!   5. the mean condition shows the anomalous cross-seed variance for
//!      action-trained models;
//!   6. behavior cloning reproduces the horizon decay, the drug asymmetry,
//!      and near-perfect 1-hour fits under a deterministic policy;
//!   7. full runs are byte-identical across repeats and worker counts;
//!   8. grid and dataset counting contracts hold;
//!   9. causal masking and shuffle multiset preservation hold.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use asl_core::bc::BCReport;
use asl_core::experiment::{
    CellStatus, DiagnosticReport, EvalCondition, GridSpec, TrainingScheme,
    VERDICT_INFORMATIVE, VERDICT_NOT_INFORMATIVE,
};
use asl_core::nn::{
    finite_difference_check, DataShape, DynamicsModelConfig, LossWeights, ModelKind,
    ModelStructure, ParameterSet,
};
use asl_core::pipeline::{
    stage_preprocess, stage_report, stage_simulate, stage_train_bc, stage_train_dynamics,
    RunConfig,
};
use asl_core::severity::{compute_shock_index, compute_sirs, compute_sofa, RawClinicalState};
use asl_core::trajectory::{Drug, SeverityMetric};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Serializes the expensive grid runs so each gets the full machine.
static HEAVY: Mutex<()> = Mutex::new(());

struct PipelineRun {
    _dir: tempfile::TempDir,
    out: PathBuf,
    grid: DiagnosticReport,
    grid_wall_seconds: f64,
    cell_wall_sum: f64,
}

fn run_grid_pipeline(config_name: &str) -> PipelineRun {
    let _guard = HEAVY.lock().unwrap();
    let cfg = RunConfig::load_json(&configs_dir().join(config_name)).expect("config loads");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    stage_simulate(&cfg, &out).expect("simulate");
    stage_preprocess(&cfg, &out).expect("preprocess");
    let start = Instant::now();
    let grid = stage_train_dynamics(&cfg, &out).expect("train-dynamics");
    let grid_wall_seconds = start.elapsed().as_secs_f64();
    let cell_wall_sum = grid.cells.iter().map(|c| c.wall_seconds).sum();
    stage_report(&cfg, &out).expect("report");
    PipelineRun { _dir: dir, out, grid, grid_wall_seconds, cell_wall_sum }
}

fn null_run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| run_grid_pipeline("desk.json"))
}

fn sensitivity_run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| run_grid_pipeline("sensitivity.json"))
}

fn run_bc_pipeline(config_name: &str) -> BCReport {
    let _guard = HEAVY.lock().unwrap();
    let cfg = RunConfig::load_json(&configs_dir().join(config_name)).expect("config loads");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_path_buf();
    stage_simulate(&cfg, &out).expect("simulate");
    stage_preprocess(&cfg, &out).expect("preprocess");
    stage_train_bc(&cfg, &out).expect("train-bc")
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness
// ---------------------------------------------------------------------------

#[test]
fn acceptance_1_gradient_correctness() {
    let start = Instant::now();
    let config = DynamicsModelConfig::tiny();
    assert_eq!((config.embed_dim, config.heads, config.layers_per_block), (8, 2, 1));
    // Real data shape: 16 observation channels, 4 demographics, 6h windows.
    let shape = DataShape { n_obs: 16, n_demo: 4, action_window: 6 };
    let structure = ModelStructure::new(config, shape, ModelKind::Dynamics).unwrap();
    let n_params = structure.n_params();
    assert!(n_params < 10_000, "tiny model has {n_params} parameters");
    let params = ParameterSet::init_dense_random(structure, 42, 0.2);

    // Two short sequences assembled from a real prepared cohort.
    let batch = real_tiny_batch();
    let err = finite_difference_check(&params, &batch, &LossWeights::default(), 1e-4).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(err < 1e-4, "max relative gradient error {err}");
    assert!(elapsed < 60.0, "gradient check took {elapsed:.1}s");
    println!(
        "ACCEPTANCE 1 gradient-correctness: PASS (max rel err {err:.2e}, {n_params} params, {elapsed:.1}s)"
    );
}

fn real_tiny_batch() -> Vec<asl_core::nn::SeqExample> {
    use asl_core::preprocess::{
        build_model_dataset, fit_imputation, impute_missing, prepare_split,
    };
    use asl_core::sim::{simulate_cohort, SimulatorConfig};
    use asl_core::trajectory::fit_normalization;
    let sim = SimulatorConfig { n_patients: 4, max_hours: 14, seed: 5, ..SimulatorConfig::default() };
    let mut cohort = simulate_cohort(&sim).unwrap();
    let imp = fit_imputation(&cohort).unwrap();
    impute_missing(&mut cohort, &imp);
    let stats = fit_normalization(&cohort, &[6]).unwrap();
    let split = std::sync::Arc::new(prepare_split(&cohort, &stats).unwrap());
    let ds = build_model_dataset(
        split,
        SeverityMetric::Sofa,
        6,
        TrainingScheme::StatesAndActions,
        &stats,
        16,
        3,
    )
    .unwrap();
    ds.windows.iter().take(2).map(|&w| ds.example(w, None)).collect()
}

// ---------------------------------------------------------------------------
// 2. Score oracles
// ---------------------------------------------------------------------------

/// Independent SOFA implementation: data-driven threshold tables rather than
/// branch chains.
fn oracle_sofa(s: &RawClinicalState) -> u8 {
    let band = |value: f64, edges: &[f64]| -> u8 {
        // edges descending; score = index of first edge the value is below.
        let mut score = 0u8;
        for &e in edges {
            if value < e {
                score += 1;
            }
        }
        score
    };
    let ratio = s.pao2 / s.fio2;
    let resp_unvented = band(ratio, &[400.0, 300.0]);
    let resp = if s.on_mech_vent { band(ratio, &[400.0, 300.0, 200.0, 100.0]) } else { resp_unvented };
    let coag = band(s.platelets, &[150.0, 100.0, 50.0, 20.0]);
    let liver = [(12.0, 4u8), (6.0, 3), (2.0, 2), (1.2, 1)]
        .iter()
        .find(|(edge, _)| s.bilirubin >= *edge)
        .map(|(_, sc)| *sc)
        .unwrap_or(0);
    let cardio = if s.vasopressor_rate > 0.1 {
        4
    } else if s.vasopressor_rate > 0.0 {
        3
    } else {
        u8::from(s.mean_arterial_pressure < 70.0)
    };
    let cns = match s.gcs {
        g if g >= 15 => 0,
        g if g >= 13 => 1,
        g if g >= 10 => 2,
        g if g >= 6 => 3,
        _ => 4,
    };
    let creat = [(5.0, 4u8), (3.5, 3), (2.0, 2), (1.2, 1)]
        .iter()
        .find(|(edge, _)| s.creatinine >= *edge)
        .map(|(_, sc)| *sc)
        .unwrap_or(0);
    let uo = if s.urine_output_24h < 200.0 {
        4
    } else if s.urine_output_24h < 500.0 {
        3
    } else {
        0
    };
    resp + coag + liver + cardio + cns + creat.max(uo)
}

fn oracle_sirs(s: &RawClinicalState) -> u8 {
    let criteria = [
        s.temperature > 38.0 || s.temperature < 36.0,
        s.heart_rate > 90.0,
        s.respiratory_rate > 20.0 || s.paco2 < 32.0,
        s.wbc > 12.0 || s.wbc < 4.0,
    ];
    criteria.iter().map(|&c| u8::from(c)).sum()
}

fn fuzz_state(rng: &mut ChaCha8Rng) -> RawClinicalState {
    // Occasionally pin values exactly at criteria boundaries.
    fn pick(rng: &mut ChaCha8Rng, lo: f64, hi: f64, boundaries: &[f64]) -> f64 {
        if !boundaries.is_empty() && rng.gen_bool(0.15) {
            boundaries[rng.gen_range(0..boundaries.len())]
        } else {
            rng.gen_range(lo..hi)
        }
    }
    RawClinicalState {
        heart_rate: pick(rng, 30.0, 200.0, &[90.0]),
        systolic_bp: pick(rng, 40.0, 220.0, &[30.0]),
        mean_arterial_pressure: pick(rng, 25.0, 160.0, &[70.0]),
        temperature: pick(rng, 33.0, 42.0, &[36.0, 38.0]),
        respiratory_rate: pick(rng, 6.0, 50.0, &[20.0]),
        paco2: pick(rng, 15.0, 80.0, &[32.0]),
        pao2: pick(rng, 35.0, 250.0, &[]),
        fio2: pick(rng, 0.21, 1.0, &[]).clamp(0.21, 1.0),
        wbc: pick(rng, 0.5, 50.0, &[4.0, 12.0]),
        platelets: pick(rng, 5.0, 600.0, &[20.0, 50.0, 100.0, 150.0]),
        bilirubin: pick(rng, 0.1, 30.0, &[1.2, 2.0, 6.0, 12.0]),
        creatinine: pick(rng, 0.2, 15.0, &[1.2, 2.0, 3.5, 5.0]),
        gcs: rng.gen_range(3..=15),
        urine_output_24h: pick(rng, 0.0, 4000.0, &[200.0, 500.0]),
        on_mech_vent: rng.gen_bool(0.3),
        vasopressor_rate: if rng.gen_bool(0.4) { 0.0 } else { pick(rng, 0.0, 2.0, &[0.1]) },
    }
}

#[test]
fn acceptance_2_score_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..10_000 {
        let s = fuzz_state(&mut rng);
        let sofa = compute_sofa(&s);
        let sirs = compute_sirs(&s);
        assert_eq!(sofa, oracle_sofa(&s), "SOFA mismatch at case {i}: {s:?}");
        assert_eq!(sirs, oracle_sirs(&s), "SIRS mismatch at case {i}: {s:?}");
        assert!(sofa <= 24 && sirs <= 4);
        let si = compute_shock_index(&s);
        let expected = s.heart_rate / s.systolic_bp.max(30.0);
        assert!((si - expected).abs() < 1e-12, "shock index at case {i}");
    }
    println!("ACCEPTANCE 2 score-oracles: PASS (10000 fuzzed states, exact match)");
}

// ---------------------------------------------------------------------------
// 3. Null reproduction (specificity)
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_null_reproduction() {
    let run = null_run();
    assert_eq!(run.grid.cells.len(), 81, "full desk grid");
    assert_eq!(run.grid.n_failed, 0, "all cells trained");

    // Per (metric, horizon): range of cross-seed mean RMSE over the three
    // schemes and the {true, zero, shuffled} conditions.
    let mut worst: (f64, String) = (0.0, String::new());
    for metric in SeverityMetric::ALL {
        for &h in &[6usize, 12, 18] {
            let vals: Vec<f64> = run
                .grid
                .aggregates
                .iter()
                .filter(|a| a.metric == metric && a.horizon == h && a.condition != EvalCondition::Mean)
                .map(|a| a.mean_rmse)
                .collect();
            assert_eq!(vals.len(), 9, "3 schemes x 3 conditions");
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let spread = hi - lo;
            if spread > worst.0 {
                worst = (spread, format!("{} h={h}", metric.name()));
            }
            assert!(
                spread < 0.05,
                "RMSE spread {spread:.4} for {} at h={h} exceeds 0.05",
                metric.name()
            );
        }
    }

    // Machine-readable verdict.
    let verdict: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.out.join("report/verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["label"], VERDICT_NOT_INFORMATIVE);
    assert_eq!(run.grid.verdict.label, VERDICT_NOT_INFORMATIVE);

    // Compute budget: the bound is stated for 8 workers. On hosts without 8
    // hardware threads the cells (independent, single-threaded) are summed
    // and divided by 8, plus the serial overhead actually observed.
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let overhead = (run.grid_wall_seconds - run.cell_wall_sum).max(0.0);
    let estimated_8w = run.cell_wall_sum / 8.0 + overhead;
    if hw >= 8 {
        assert!(
            run.grid_wall_seconds < 1800.0,
            "grid took {:.0}s on {hw} threads",
            run.grid_wall_seconds
        );
    }
    assert!(
        estimated_8w < 1800.0,
        "estimated 8-worker wall {estimated_8w:.0}s exceeds 30 minutes (cells {:.0}s)",
        run.cell_wall_sum
    );
    println!(
        "ACCEPTANCE 3 null-reproduction: PASS (worst spread {:.4} at {}, verdict '{}', cells {:.0}s, est. 8-worker wall {estimated_8w:.0}s)",
        worst.0, worst.1, run.grid.verdict.label, run.cell_wall_sum
    );
}

// ---------------------------------------------------------------------------
// 4. Sensitivity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_sensitivity() {
    let run = sensitivity_run();
    assert_eq!(run.grid.n_failed, 0);
    let v = &run.grid.verdict;
    let threshold = (2.0 * v.overall_pooled_std).max(v.min_gap);
    assert!(
        v.overall_gap > threshold,
        "states+actions does not beat states-only: gap {:.4} vs threshold {threshold:.4}",
        v.overall_gap
    );
    let sh_threshold = (2.0 * v.overall_shuffled_pooled_std).max(v.min_gap);
    assert!(
        v.overall_shuffled_degradation > sh_threshold,
        "shuffling does not degrade the action-trained model: {:.4} vs {sh_threshold:.4}",
        v.overall_shuffled_degradation
    );
    assert_eq!(v.label, VERDICT_INFORMATIVE);
    let verdict: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.out.join("report/verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict["label"], VERDICT_INFORMATIVE);
    println!(
        "ACCEPTANCE 4 sensitivity: PASS (gap {:.4} > {threshold:.4}, shuffled degradation {:.4} > {sh_threshold:.4}, verdict '{}')",
        v.overall_gap, v.overall_shuffled_degradation, v.label
    );
}

// ---------------------------------------------------------------------------
// 5. Mean-condition anomaly
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_mean_condition_anomaly() {
    let run = sensitivity_run();
    // Cross-seed RMSE variance for action-trained schemes under the mean
    // condition versus the true condition, averaged over (metric, horizon).
    let var_for = |condition: EvalCondition| -> f64 {
        let entries: Vec<f64> = run
            .grid
            .aggregates
            .iter()
            .filter(|a| {
                a.condition == condition
                    && (a.scheme == TrainingScheme::StatesAndActions
                        || a.scheme == TrainingScheme::ActionsOnly)
            })
            .map(|a| a.std_rmse * a.std_rmse)
            .collect();
        entries.iter().sum::<f64>() / entries.len() as f64
    };
    let mean_var = var_for(EvalCondition::Mean);
    let true_var = var_for(EvalCondition::True);
    assert!(
        mean_var > true_var,
        "mean-condition cross-seed variance {mean_var:.6} not above true-condition {true_var:.6}"
    );
    println!(
        "ACCEPTANCE 5 mean-condition-anomaly: PASS (mean-condition var {mean_var:.2e} > true-condition var {true_var:.2e})"
    );
}

// ---------------------------------------------------------------------------
// 6. Behavior cloning
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_behavior_cloning() {
    let diverse = run_bc_pipeline("bc_diverse.json");
    let r2 = |report: &BCReport, drug: Drug, h: usize| -> f64 {
        report.mean_r2(drug, h).unwrap_or(f64::NAN)
    };
    for drug in Drug::ALL {
        let early = r2(&diverse, drug, 1);
        let late = r2(&diverse, drug, 6);
        assert!(
            late < early,
            "{}: R2 at 6h ({late:.3}) not below 1h ({early:.3})",
            drug.name()
        );
    }
    let fluid = r2(&diverse, Drug::IvFluid, 1);
    let vaso = r2(&diverse, Drug::Vasopressor, 1);
    // Drug asymmetry holds across the horizon curve, not just at one point.
    let mean_over = |drug: Drug| -> f64 {
        (1..=6).map(|h| r2(&diverse, drug, h)).sum::<f64>() / 6.0
    };
    assert!(
        mean_over(Drug::Vasopressor) > mean_over(Drug::IvFluid),
        "vasopressor R2 {:.3} not above fluid {:.3}",
        mean_over(Drug::Vasopressor),
        mean_over(Drug::IvFluid)
    );

    let deterministic = run_bc_pipeline("bc_deterministic.json");
    let det_fluid = r2(&deterministic, Drug::IvFluid, 1);
    let det_vaso = r2(&deterministic, Drug::Vasopressor, 1);
    assert!(det_fluid > 0.95, "deterministic-policy fluid 1h R2 {det_fluid:.3}");
    assert!(det_vaso > 0.95, "deterministic-policy vasopressor 1h R2 {det_vaso:.3}");
    println!(
        "ACCEPTANCE 6 behavior-cloning: PASS (decay {:.3}->{:.3} fluid / {:.3}->{:.3} vaso; asymmetry vaso {vaso:.3} > fluid {fluid:.3}; deterministic 1h R2 {det_fluid:.3}/{det_vaso:.3})",
        r2(&diverse, Drug::IvFluid, 1),
        r2(&diverse, Drug::IvFluid, 6),
        r2(&diverse, Drug::Vasopressor, 1),
        r2(&diverse, Drug::Vasopressor, 6)
    );
}

// ---------------------------------------------------------------------------
// 7. Determinism
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_determinism() {
    let _guard = HEAVY.lock().unwrap();
    let mut cfg = RunConfig::load_json(&configs_dir().join("desk.json")).unwrap();
    // Same pipeline and configuration shape, scaled down so three complete
    // runs stay affordable; determinism is structural (per-cell seeding and
    // ordered merges), not scale-dependent.
    cfg.simulator.n_patients = 60;
    cfg.simulator.max_hours = 48;
    cfg.grid = GridSpec {
        metrics: vec![SeverityMetric::Sofa, SeverityMetric::ShockIndex],
        horizons: vec![6],
        schemes: vec![TrainingScheme::StatesOnly, TrainingScheme::StatesAndActions],
        seeds: vec![0, 1],
    };
    cfg.training.max_epochs = 3;
    cfg.bc.max_epochs = 3;
    cfg.bc.seeds = vec![0, 1];

    let artifacts = |workers: usize| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg.clone();
        c.workers = workers;
        asl_core::pipeline::full_run(&c, dir.path()).unwrap();
        let read = |rel: &str| std::fs::read(dir.path().join(rel)).unwrap();
        let svgs: std::collections::BTreeMap<String, Vec<u8>> =
            std::fs::read_dir(dir.path().join("report/histograms"))
                .unwrap()
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
                })
                .collect();
        (read("report/rmse_table.csv"), read("report/bc_r2.csv"), svgs)
    };

    let a = artifacts(2);
    let b = artifacts(2);
    let c = artifacts(7);
    assert_eq!(a.0, b.0, "rmse_table.csv differs between identical runs");
    assert_eq!(a.1, b.1, "bc_r2.csv differs between identical runs");
    assert_eq!(a.2, b.2, "SVG outputs differ between identical runs");
    assert_eq!(a.0, c.0, "rmse_table.csv depends on worker count");
    assert_eq!(a.1, c.1, "bc_r2.csv depends on worker count");
    assert_eq!(a.2, c.2, "SVG outputs depend on worker count");
    println!(
        "ACCEPTANCE 7 determinism: PASS (byte-identical tables and {} SVGs across repeats and worker counts 2/7)",
        a.2.len()
    );
}

// ---------------------------------------------------------------------------
// 8. Counting contracts
// ---------------------------------------------------------------------------

#[test]
fn acceptance_8_counting_contracts() {
    // Grid structure.
    let grid = GridSpec::default();
    assert_eq!(grid.cells().len(), 81);

    // The full null run produced 81 cells x 4 conditions = 324 RMSE rows.
    let run = null_run();
    let table = std::fs::read_to_string(run.out.join("report/rmse_table.csv")).unwrap();
    let rows = table.lines().count() - 1;
    assert_eq!(rows, 324, "expected 324 RMSE rows, found {rows}");

    // Dataset sample counts match the window formula on the actual splits.
    let split =
        asl_core::preprocess::load_prepared_split(&run.out.join("splits/dataset_train.bin")).unwrap();
    for h in [6usize, 12, 18] {
        let expected: usize =
            split.trajectories.iter().map(|t| t.t_len.saturating_sub(h)).sum();
        assert_eq!(split.sample_count(h), expected);
        assert!(expected > 0);
    }
    println!("ACCEPTANCE 8 counting-contracts: PASS (81 cells, {rows} RMSE rows, window formula holds)");
}

// ---------------------------------------------------------------------------
// 9. Causality and perturbation invariants
// ---------------------------------------------------------------------------

#[test]
fn acceptance_9_causality_and_perturbation() {
    use asl_core::nn::dynamics_forward;
    use asl_core::preprocess::{
        build_model_dataset, fit_imputation, impute_missing, prepare_split,
    };
    use asl_core::sim::{simulate_cohort, SimulatorConfig};
    use asl_core::trajectory::fit_normalization;

    // Randomized models over real data windows: outputs at anchor t must be
    // bitwise invariant to mutations of any input at positions > t.
    let sim = SimulatorConfig { n_patients: 10, max_hours: 40, seed: 77, ..SimulatorConfig::default() };
    let mut cohort = simulate_cohort(&sim).unwrap();
    let imp = fit_imputation(&cohort).unwrap();
    impute_missing(&mut cohort, &imp);
    let stats = fit_normalization(&cohort, &[6]).unwrap();
    let split = std::sync::Arc::new(prepare_split(&cohort, &stats).unwrap());
    let ds = build_model_dataset(
        split.clone(),
        SeverityMetric::Sofa,
        6,
        TrainingScheme::StatesAndActions,
        &stats,
        48,
        9,
    )
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0usize;
    for model_seed in [1u64, 2, 3] {
        let structure = ModelStructure::new(
            DynamicsModelConfig {
                embed_dim: 16,
                heads: 2,
                layers_per_block: 2,
                context: 48,
                head_width: 8,
                ff_mult: 2,
                dropout: 0.0,
            },
            DataShape { n_obs: split.n_obs, n_demo: split.n_demo, action_window: 6 },
            ModelKind::Dynamics,
        )
        .unwrap();
        let params = ParameterSet::init_dense_random(structure, model_seed, 0.15);
        for &w in ds.windows.iter().take(4) {
            let ex = ds.example(w, None);
            if ex.t_len < 4 {
                continue;
            }
            let base = dynamics_forward(&params, &ex).unwrap();
            let anchor = rng.gen_range(1..ex.t_len - 1);
            let mut mutated = ex.clone();
            for t in anchor + 1..ex.t_len {
                for c in 0..split.n_obs {
                    mutated.obs[t * split.n_obs + c] = rng.gen_range(-4.0..4.0);
                }
                for c in 0..12 {
                    mutated.actions[t * 12 + c] = rng.gen_range(-4.0..4.0);
                }
            }
            let out = dynamics_forward(&params, &mutated).unwrap();
            for t in 0..=anchor {
                assert_eq!(
                    base.severity[t].to_bits(),
                    out.severity[t].to_bits(),
                    "future mutation leaked into anchor {t}"
                );
            }
            assert_ne!(
                base.severity[ex.t_len - 1].to_bits(),
                out.severity[ex.t_len - 1].to_bits(),
                "mutation should reach later positions"
            );
            checked += 1;
        }
    }
    assert!(checked >= 9);

    // Shuffled perturbation preserves the exact multiset of hourly action
    // vectors; zero and mean produce two distinct constants.
    use asl_core::experiment::{perturb_actions, ShuffleScope};
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let shuffled = perturb_actions(&split, EvalCondition::Shuffled, &stats, ShuffleScope::Split, &mut rng);
    let multiset = |tensors: &[Vec<f64>]| {
        let mut v: Vec<(u64, u64)> = tensors
            .iter()
            .flat_map(|t| t.chunks(2).map(|c| (c[0].to_bits(), c[1].to_bits())))
            .collect();
        v.sort_unstable();
        v
    };
    let original: Vec<Vec<f64>> = split.trajectories.iter().map(|t| t.act_z.clone()).collect();
    assert_eq!(multiset(&original), multiset(&shuffled));
    assert_ne!(original, shuffled);

    let zero = perturb_actions(&split, EvalCondition::Zero, &stats, ShuffleScope::Split, &mut rng);
    let mean = perturb_actions(&split, EvalCondition::Mean, &stats, ShuffleScope::Split, &mut rng);
    let constant_of = |tensors: &[Vec<f64>]| -> Option<(u64, u64)> {
        let first = (tensors[0][0].to_bits(), tensors[0][1].to_bits());
        tensors
            .iter()
            .all(|t| t.chunks(2).all(|c| (c[0].to_bits(), c[1].to_bits()) == first))
            .then_some(first)
    };
    let zc = constant_of(&zero).expect("zero condition is constant");
    let mc = constant_of(&mean).expect("mean condition is constant");
    assert_ne!(zc, mc, "zero-dose and mean-dose constants must differ");

    println!(
        "ACCEPTANCE 9 causality-and-perturbation: PASS ({checked} causal mutation checks, multiset preserved, zero != mean)"
    );
}
