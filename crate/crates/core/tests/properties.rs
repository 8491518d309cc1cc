//! Property tests for the score functions, normalization, splitting, and
//! the dosing policy.

use asl_core::severity::{compute_shock_index, compute_sirs, compute_sofa, RawClinicalState};
use asl_core::sim::{clinician_policy, LatentState, SimulatorConfig};
use asl_core::trajectory::{
    apply_normalization, fit_normalization, invert_normalization, split_cohort, ActionRecord,
    Channel, Demographics, Drug, PatientTrajectory, SeverityMetric, SeveritySnapshot,
    StateObservation, TrajectoryStep,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state_strategy() -> impl Strategy<Value = RawClinicalState> {
    (
        (30.0f64..200.0, 40.0f64..220.0, 25.0f64..160.0, 33.0f64..42.0),
        (6.0f64..50.0, 15.0f64..80.0, 35.0f64..250.0, 0.21f64..1.0),
        (0.5f64..50.0, 5.0f64..600.0, 0.1f64..30.0, 0.2f64..15.0),
        (3u8..=15, 0.0f64..4000.0, proptest::bool::ANY, 0.0f64..2.0),
    )
        .prop_map(
            |(
                (heart_rate, systolic_bp, mean_arterial_pressure, temperature),
                (respiratory_rate, paco2, pao2, fio2),
                (wbc, platelets, bilirubin, creatinine),
                (gcs, urine_output_24h, on_mech_vent, vasopressor_rate),
            )| RawClinicalState {
                heart_rate,
                systolic_bp,
                mean_arterial_pressure,
                temperature,
                respiratory_rate,
                paco2,
                pao2,
                fio2,
                wbc,
                platelets,
                bilirubin,
                creatinine,
                gcs,
                urine_output_24h,
                on_mech_vent,
                vasopressor_rate,
            },
        )
}

proptest! {
    #[test]
    fn score_bounds_hold(s in state_strategy()) {
        prop_assert!(compute_sofa(&s) <= 24);
        prop_assert!(compute_sirs(&s) <= 4);
        prop_assert!(compute_shock_index(&s).is_finite());
        prop_assert!(compute_shock_index(&s) > 0.0);
    }

    /// Worsening any single channel in its deranging direction never lowers
    /// either score.
    #[test]
    fn scores_are_monotone_under_derangement(s in state_strategy(), step in 0.01f64..0.6) {
        let sofa0 = compute_sofa(&s);
        let sirs0 = compute_sirs(&s);

        let worsened: Vec<RawClinicalState> = vec![
            { let mut w = s; w.platelets *= 1.0 - step; w },
            { let mut w = s; w.bilirubin *= 1.0 + step; w },
            { let mut w = s; w.creatinine *= 1.0 + step; w },
            { let mut w = s; w.urine_output_24h *= 1.0 - step; w },
            { let mut w = s; w.mean_arterial_pressure *= 1.0 - step; w },
            { let mut w = s; w.vasopressor_rate += step; w },
            { let mut w = s; w.gcs = w.gcs.saturating_sub(1).max(3); w },
            { let mut w = s; w.pao2 *= 1.0 - step; w },
            { let mut w = s; w.fio2 = (w.fio2 * (1.0 + step)).min(1.0); w },
            { let mut w = s; w.on_mech_vent = true; w },
            { let mut w = s; w.heart_rate *= 1.0 + step; w },
            { let mut w = s; w.respiratory_rate *= 1.0 + step; w },
            { let mut w = s; w.wbc = if w.wbc >= 8.0 { w.wbc * (1.0 + step) } else { w.wbc * (1.0 - step) }; w },
            // Temperature deranges away from normothermia on whichever side
            // it already sits.
            { let mut w = s; w.temperature = if w.temperature >= 37.0 { w.temperature + step } else { w.temperature - step }; w },
        ];
        for w in worsened {
            prop_assert!(compute_sofa(&w) >= sofa0, "SOFA dropped: {s:?} -> {w:?}");
            prop_assert!(compute_sirs(&w) >= sirs0, "SIRS dropped: {s:?} -> {w:?}");
        }
    }

    /// Doubling the heart rate doubles the shock index.
    #[test]
    fn shock_index_scales_with_heart_rate(s in state_strategy()) {
        let base = compute_shock_index(&s);
        let mut doubled = s;
        doubled.heart_rate *= 2.0;
        prop_assert!((compute_shock_index(&doubled) - 2.0 * base).abs() < 1e-9);
    }
}

fn tiny_cohort(n: usize, seed: u64) -> Vec<PatientTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    (0..n)
        .map(|i| {
            let len = rng.gen_range(2..12);
            let steps = (0..len)
                .map(|_| TrajectoryStep {
                    obs: StateObservation {
                        observed: vec![rng.gen_range(-3.0..9.0), rng.gen_range(50.0..150.0)],
                        observed_mask: vec![true, true],
                    },
                    action: ActionRecord {
                        iv_fluid: rng.gen_range(0.0..400.0),
                        vasopressor: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0) },
                    },
                    severity: SeveritySnapshot {
                        sofa: rng.gen_range(0..25),
                        sirs: rng.gen_range(0..5),
                        shock_index: rng.gen_range(0.3..2.0),
                    },
                })
                .collect();
            PatientTrajectory {
                patient_id: format!("p{i:06}"),
                demographics: Demographics { values: vec![rng.gen_range(20.0..95.0), 1.0] },
                steps,
            }
        })
        .collect()
}

proptest! {
    /// Splits partition the cohort at the patient level for every seed and
    /// every (coarse) fraction choice.
    #[test]
    fn splits_partition_patients(n in 3usize..60, seed in any::<u64>(), ft in 5u32..9) {
        let f_train = f64::from(ft) / 10.0;
        let rest = (1.0 - f_train) / 2.0;
        let cohort = tiny_cohort(n, seed ^ 0x51);
        let all_ids: std::collections::BTreeSet<String> =
            cohort.iter().map(|t| t.patient_id.clone()).collect();
        let (tr, va, te) = split_cohort(cohort, (f_train, rest, rest), seed).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for t in tr.iter().chain(&va).chain(&te) {
            prop_assert!(seen.insert(t.patient_id.clone()), "patient {} in two splits", t.patient_id);
        }
        prop_assert_eq!(seen, all_ids);
    }

    /// apply . invert is the identity for every channel kind.
    #[test]
    fn normalization_roundtrip(seed in any::<u64>(), v in -500.0f64..500.0, dose in 0.0f64..800.0) {
        let cohort = tiny_cohort(6, seed ^ 0x2a);
        let stats = fit_normalization(&cohort, &[1, 2]).unwrap();
        for channel in [Channel::Obs(0), Channel::Obs(1), Channel::Demo(0),
                        Channel::Delta(SeverityMetric::Sofa, 1), Channel::Delta(SeverityMetric::ShockIndex, 2)] {
            let z = apply_normalization(v, channel, &stats).unwrap();
            let back = invert_normalization(z, channel, &stats).unwrap();
            prop_assert!((back - v).abs() <= 1e-9 * v.abs().max(1.0), "{channel:?}: {v} -> {back}");
        }
        for drug in Drug::ALL {
            let z = apply_normalization(dose, Channel::Action(drug), &stats).unwrap();
            let back = invert_normalization(z, Channel::Action(drug), &stats).unwrap();
            prop_assert!((back - dose).abs() <= 1e-9 * dose.max(1.0));
        }
    }

    /// R-squared never exceeds one, whatever the predictions.
    #[test]
    fn r2_never_exceeds_one(pairs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..200)) {
        let ym = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
        let ss_tot: f64 = pairs.iter().map(|p| (p.1 - ym).powi(2)).sum();
        prop_assume!(ss_tot > 1e-9);
        let ss_res: f64 = pairs.iter().map(|p| (p.0 - p.1).powi(2)).sum();
        prop_assert!(1.0 - ss_res / ss_tot <= 1.0);
    }
}

/// Empirical log-dose spread is non-decreasing in the diversity knob.
#[test]
fn policy_diversity_is_monotone() {
    let latent = LatentState { illness: 6.0, volume_deficit: 1.4, tone_deficit: 1.3 };
    let obs = StateObservation {
        observed: {
            let mut v = vec![0.0; 16];
            v[0] = 104.0;
            v[1] = 104.0;
            v[2] = 77.0;
            v
        },
        observed_mask: vec![true; 16],
    };
    let mut prev = -1.0;
    for (i, sigma) in [0.0f64, 0.3, 0.7, 1.2, 2.0].into_iter().enumerate() {
        let cfg = SimulatorConfig {
            policy_diversity: sigma,
            vasopressor_sparsity: 0.0,
            ..SimulatorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let n = 20_000;
        let logs: Vec<f64> =
            (0..n).map(|_| clinician_policy(&obs, &latent, &cfg, &mut rng).iv_fluid.ln()).collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(
            var >= prev - 1e-9,
            "log-dose variance fell from {prev} to {var} as sigma rose to {sigma}"
        );
        prev = var;
    }
}

/// Severity bounds hold on every step of a simulated, preprocessed cohort.
#[test]
fn simulated_cohorts_respect_severity_bounds() {
    use asl_core::preprocess::{fit_imputation, impute_missing};
    use asl_core::sim::simulate_cohort;
    let cfg = SimulatorConfig { n_patients: 50, max_hours: 60, seed: 31, ..SimulatorConfig::default() };
    let mut cohort = simulate_cohort(&cfg).unwrap();
    let imp = fit_imputation(&cohort).unwrap();
    impute_missing(&mut cohort, &imp);
    for t in &cohort {
        assert!(!t.is_empty() && t.len() <= 336);
        for s in &t.steps {
            assert!(s.severity.sofa <= 24);
            assert!(s.severity.sirs <= 4);
            assert!(s.severity.shock_index.is_finite() && s.severity.shock_index > 0.0);
            assert!(s.obs.observed.iter().all(|v| v.is_finite()));
        }
    }
}
