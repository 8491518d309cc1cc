//! Minimal f64 neural stack: tensors, the two-block causal encoder with
//! hand-written backprop, Adam, checkpoints, and finite-difference gradient
//! verification.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod model;
pub mod tensor;

pub use adam::{backward_and_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gradcheck::finite_difference_check;
pub use model::{
    batch_gradients, batch_loss, clone_forward, compute_losses, dynamics_forward, encoder_forward,
    BatchCounts, DataShape, DynamicsModelConfig, LossParts, LossWeights, ModelKind, ModelStructure,
    ParameterSet, SeqExample, SeqOutputs,
};
pub use tensor::TensorBuffer;

#[cfg(test)]
mod tests {
    use super::model::*;
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_shape() -> DataShape {
        DataShape { n_obs: 6, n_demo: 2, action_window: 3 }
    }

    fn random_example(shape: &DataShape, t_len: usize, seed: u64) -> SeqExample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect() };
        let obs = r(t_len * shape.n_obs);
        let demo = r(shape.n_demo);
        let actions = r(t_len * shape.n_action_inputs());
        let sev_target = r(t_len);
        let recon_target = obs.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let sev_mask: Vec<bool> = (0..t_len).map(|t| t + 2 < t_len || t == 0).collect();
        let terminal: Vec<f64> = (0..t_len).map(|t| if t == t_len - 1 { 1.0 } else { 0.0 }).collect();
        let mut adj_pairs = Vec::new();
        for t in 0..t_len.saturating_sub(1) {
            if rng2.gen_bool(0.5) {
                adj_pairs.push((t, t + 1, 1.0));
            } else {
                let far = (t + 3).min(t_len - 1);
                adj_pairs.push((t, far, if far == t + 1 { 1.0 } else { 0.0 }));
            }
        }
        SeqExample {
            t_len,
            obs,
            demo,
            actions,
            sev_target,
            sev_mask,
            recon_target,
            terminal,
            adj_pairs,
            bc_target: Vec::new(),
            bc_mask: Vec::new(),
        }
    }

    fn tiny_model(seed: u64) -> ParameterSet {
        let structure =
            ModelStructure::new(DynamicsModelConfig::tiny(), tiny_shape(), ModelKind::Dynamics).unwrap();
        ParameterSet::init_dense_random(structure, seed, 0.2)
    }

    // -----------------------------------------------------------------
    // Independent straight-line reference forward pass (test oracle)
    // -----------------------------------------------------------------

    fn ref_rmsnorm(x: &[f64]) -> Vec<f64> {
        let d = x.len() as f64;
        let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
        let ri = 1.0 / (ms + 1e-5).sqrt();
        x.iter().map(|v| v * ri).collect()
    }

    fn ref_linear(values: &[f64], seg: &LinearSeg, x: &[f64]) -> Vec<f64> {
        let w = &values[seg.w.clone()];
        let mut out = vec![0.0; seg.out];
        for o in 0..seg.out {
            for i in 0..seg.inp {
                out[o] += x[i] * w[i * seg.out + o];
            }
        }
        if let Some(b) = &seg.b {
            for (o, bv) in out.iter_mut().zip(&values[b.clone()]) {
                *o += bv;
            }
        }
        out
    }

    fn ref_mat(values: &[f64], w: &std::ops::Range<usize>, d: usize, x: &[f64]) -> Vec<f64> {
        let wv = &values[w.clone()];
        let mut out = vec![0.0; d];
        for o in 0..d {
            for i in 0..d {
                out[o] += x[i] * wv[i * d + o];
            }
        }
        out
    }

    /// Naive per-position forward of the whole dynamics model.
    fn reference_forward(params: &ParameterSet, ex: &SeqExample) -> Vec<f64> {
        let s = &params.structure;
        let cfg = &s.config;
        let d = cfg.embed_dim;
        let heads = cfg.heads;
        let hd = d / heads;
        let t_len = ex.t_len;
        let vals = &params.values;

        let demo_e = ref_linear(vals, &s.demo_embed, &ex.demo);
        let pos = &vals[s.pos.clone()];
        let mut x: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                let se = ref_linear(vals, &s.state_embed, &ex.obs[t * s.shape.n_obs..(t + 1) * s.shape.n_obs]);
                (0..d).map(|i| se[i] + demo_e[i] + pos[t * d + i]).collect()
            })
            .collect();

        let mut run_block = |x: &mut Vec<Vec<f64>>, layers: &[LayerSeg]| {
            for layer in layers {
                let a: Vec<Vec<f64>> = x.iter().map(|row| ref_rmsnorm(row)).collect();
                let q: Vec<Vec<f64>> = a.iter().map(|r| ref_mat(vals, &layer.wq, d, r)).collect();
                let k: Vec<Vec<f64>> = a.iter().map(|r| ref_mat(vals, &layer.wk, d, r)).collect();
                let v: Vec<Vec<f64>> = a.iter().map(|r| ref_mat(vals, &layer.wv, d, r)).collect();
                for t in 0..x.len() {
                    let mut ho = vec![0.0; d];
                    for h in 0..heads {
                        let hs = h * hd;
                        let logits: Vec<f64> = (0..=t)
                            .map(|u| {
                                (0..hd).map(|i| q[t][hs + i] * k[u][hs + i]).sum::<f64>()
                                    / (hd as f64).sqrt()
                            })
                            .collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                        let z: f64 = exps.iter().sum();
                        for u in 0..=t {
                            let p = exps[u] / z;
                            for i in 0..hd {
                                ho[hs + i] += p * v[u][hs + i];
                            }
                        }
                    }
                    let proj = ref_mat(vals, &layer.wo, d, &ho);
                    for i in 0..d {
                        x[t][i] += proj[i];
                    }
                }
                for t in 0..x.len() {
                    let m = ref_rmsnorm(&x[t]);
                    let h1 = ref_linear(vals, &layer.ff1, &m);
                    let h1a: Vec<f64> = h1.iter().map(|&p| super::tensor::gelu(p)).collect();
                    let f = ref_linear(vals, &layer.ff2, &h1a);
                    for i in 0..d {
                        x[t][i] += f[i];
                    }
                }
            }
        };

        run_block(&mut x, &s.blocks[0]);
        let act_seg = s.action_embed.as_ref().unwrap();
        for t in 0..t_len {
            let ae = ref_linear(vals, act_seg, &ex.actions[t * act_seg.inp..(t + 1) * act_seg.inp]);
            for i in 0..d {
                x[t][i] += ae[i];
            }
        }
        run_block(&mut x, &s.blocks[1]);

        let sev = s.sev_head.as_ref().unwrap();
        (0..t_len)
            .map(|t| {
                let zn = ref_rmsnorm(&x[t]);
                let h = ref_linear(vals, &sev.l1, &zn);
                let ha: Vec<f64> = h.iter().map(|&p| super::tensor::gelu(p)).collect();
                ref_linear(vals, &sev.l2, &ha)[0]
            })
            .collect()
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let params = tiny_model(5);
        let ex = random_example(&tiny_shape(), 7, 11);
        let out = dynamics_forward(&params, &ex).unwrap();
        let reference = reference_forward(&params, &ex);
        for (a, b) in out.severity.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn single_timestep_attention_is_identity_weighted() {
        let params = tiny_model(6);
        let ex = random_example(&tiny_shape(), 1, 3);
        let out = dynamics_forward(&params, &ex).unwrap();
        let reference = reference_forward(&params, &ex);
        assert!((out.severity[0] - reference[0]).abs() < 1e-10);
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let params = tiny_model(7);
        let shape = tiny_shape();
        let t_len = 9;
        let ex = random_example(&shape, t_len, 21);
        let base = dynamics_forward(&params, &ex).unwrap();

        // Mutate every input belonging to positions > anchor.
        let anchor = 4;
        let mut mutated = ex.clone();
        for t in anchor + 1..t_len {
            for c in 0..shape.n_obs {
                mutated.obs[t * shape.n_obs + c] = 9.0 + t as f64 + c as f64;
            }
            for c in 0..shape.n_action_inputs() {
                mutated.actions[t * shape.n_action_inputs() + c] = -7.5 - c as f64;
            }
        }
        let out = dynamics_forward(&params, &mutated).unwrap();
        for t in 0..=anchor {
            assert_eq!(base.severity[t].to_bits(), out.severity[t].to_bits(), "position {t}");
            for c in 0..shape.n_obs {
                assert_eq!(
                    base.recon[t * shape.n_obs + c].to_bits(),
                    out.recon[t * shape.n_obs + c].to_bits()
                );
            }
        }
        // Later positions must actually change (the mutation reaches them).
        assert_ne!(base.severity[t_len - 1].to_bits(), out.severity[t_len - 1].to_bits());
    }

    #[test]
    fn zero_init_head_predicts_zero() {
        let structure =
            ModelStructure::new(DynamicsModelConfig::tiny(), tiny_shape(), ModelKind::Dynamics).unwrap();
        let params = ParameterSet::init(structure, 3);
        let ex = random_example(&tiny_shape(), 5, 1);
        let out = dynamics_forward(&params, &ex).unwrap();
        assert!(out.severity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_pure() {
        let params = tiny_model(8);
        let ex = random_example(&tiny_shape(), 6, 2);
        let a = dynamics_forward(&params, &ex).unwrap();
        let b = dynamics_forward(&params, &ex).unwrap();
        assert_eq!(
            a.severity.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.severity.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn context_overflow_errors() {
        let params = tiny_model(9);
        let ex = random_example(&tiny_shape(), 17, 2); // context is 16
        let err = dynamics_forward(&params, &ex).unwrap_err();
        assert!(err.to_string().contains("sequence too long"));
    }

    #[test]
    fn action_shape_mismatch_errors() {
        let params = tiny_model(10);
        let mut ex = random_example(&tiny_shape(), 5, 2);
        ex.actions.pop();
        let err = dynamics_forward(&params, &ex).unwrap_err();
        assert!(err.to_string().contains("action tensor shape mismatch"));
    }

    #[test]
    fn actions_only_outputs_respond_to_action_changes() {
        let params = tiny_model(11);
        let shape = tiny_shape();
        let mut ex = random_example(&shape, 6, 4);
        // Zero the state path, as the actions-only scheme does.
        ex.obs.iter_mut().for_each(|v| *v = 0.0);
        ex.demo.iter_mut().for_each(|v| *v = 0.0);
        let base = dynamics_forward(&params, &ex).unwrap();

        // Identical actions -> identical outputs.
        let same = dynamics_forward(&params, &ex).unwrap();
        assert_eq!(base.severity[5].to_bits(), same.severity[5].to_bits());

        // Different actions -> different outputs.
        let mut changed = ex.clone();
        changed.actions[0] += 1.0;
        let out = dynamics_forward(&params, &changed).unwrap();
        assert_ne!(base.severity[0].to_bits(), out.severity[0].to_bits());
    }

    #[test]
    fn compute_losses_matches_scalar_loop() {
        let params = tiny_model(12);
        let ex = random_example(&tiny_shape(), 8, 5);
        let out = dynamics_forward(&params, &ex).unwrap();
        let w = LossWeights::default();
        let parts = compute_losses(&out, &ex, &w);

        // Plain scalar recomputation.
        let mut sev = 0.0;
        let mut n_sev = 0;
        for t in 0..ex.t_len {
            if ex.sev_mask[t] {
                sev += (out.severity[t] - ex.sev_target[t]).powi(2);
                n_sev += 1;
            }
        }
        let mut rec = 0.0;
        for i in 0..out.recon.len() {
            rec += (out.recon[i] - ex.recon_target[i]).powi(2);
        }
        let mut term = 0.0;
        for t in 0..ex.t_len {
            let l = out.terminal_logits[t];
            let y = ex.terminal[t];
            let p = 1.0 / (1.0 + (-l as f64).exp());
            term += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        let mut adj = 0.0;
        for (i, &(_, _, y)) in ex.adj_pairs.iter().enumerate() {
            let l = out.adjacency_logits[i];
            let p = 1.0 / (1.0 + (-l as f64).exp());
            adj += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        let total = sev / n_sev as f64
            + 0.1 * rec / out.recon.len() as f64
            + 0.1 * term / ex.t_len as f64
            + 0.1 * adj / ex.adj_pairs.len() as f64;
        assert!((parts.total - total).abs() < 1e-10, "{} vs {total}", parts.total);

        // Perfect predictions give zero loss on the regression parts.
        let mut perfect = ex.clone();
        perfect.sev_target = out.severity.clone();
        perfect.recon_target = out.recon.clone();
        let p2 = compute_losses(&out, &perfect, &LossWeights { recon: 0.0, terminal: 0.0, adjacency: 0.0 });
        assert!(p2.total.abs() < 1e-12);
    }

    #[test]
    fn batch_forward_equals_per_sequence_forward() {
        let params = tiny_model(13);
        let exs: Vec<SeqExample> =
            (0..3).map(|i| random_example(&tiny_shape(), 4 + i, 100 + i as u64)).collect();
        let w = LossWeights::default();
        let batch = batch_loss(&params, &exs, &w).unwrap();
        let mut parts = Vec::new();
        for ex in &exs {
            let out = dynamics_forward(&params, ex).unwrap();
            parts.push(compute_losses(&out, ex, &w));
        }
        let reduced = super::model::reduce_losses(&parts, &w);
        assert!((batch.total - reduced.total).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_dynamics() {
        let params = tiny_model(14);
        assert!(params.n_params() < 10_000, "n_params {}", params.n_params());
        let batch = vec![random_example(&tiny_shape(), 6, 31), random_example(&tiny_shape(), 4, 32)];
        let err =
            finite_difference_check(&params, &batch, &LossWeights::default(), 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradients_match_finite_differences_clone_model() {
        let shape = DataShape { n_obs: 6, n_demo: 2, action_window: 0 };
        let structure = ModelStructure::new(
            DynamicsModelConfig::tiny(),
            shape,
            ModelKind::BehaviorClone { bc_horizons: 3 },
        )
        .unwrap();
        let params = ParameterSet::init_dense_random(structure, 4, 0.2);
        let mut ex = random_example(&shape, 5, 41);
        ex.actions.clear();
        ex.adj_pairs.clear();
        ex.sev_mask.iter_mut().for_each(|m| *m = false);
        ex.recon_target.clear();
        ex.terminal.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        ex.bc_target = (0..5 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ex.bc_mask = (0..5 * 6).map(|i| i % 7 != 0).collect();
        let err = finite_difference_check(&params, &[ex], &LossWeights::default(), 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let params = tiny_model(15);
        let batch = vec![random_example(&tiny_shape(), 5, 51)];
        // Corrupt a weight inside the first attention projection.
        let idx = params.structure.blocks[0][0].wq.start + 3;
        let err = gradcheck::finite_difference_check_with_fault(
            &params,
            &batch,
            &LossWeights::default(),
            1e-4,
            idx,
        )
        .unwrap();
        assert!(err > 0.3, "fault not detected: {err}");
    }

    #[test]
    fn training_step_reduces_loss_and_is_deterministic() {
        let structure =
            ModelStructure::new(DynamicsModelConfig::tiny(), tiny_shape(), ModelKind::Dynamics).unwrap();
        let run = || {
            let mut params = ParameterSet::init(structure.clone(), 7);
            let mut opt = AdamState::new(params.n_params(), AdamConfig::default(), 0);
            let batch: Vec<SeqExample> =
                (0..4).map(|i| random_example(&tiny_shape(), 6, 200 + i)).collect();
            let w = LossWeights::default();
            let first = batch_loss(&params, &batch, &w).unwrap().total;
            let mut last = 0.0;
            for _ in 0..60 {
                last = backward_and_step(&mut params, &mut opt, &batch, &w).unwrap().total;
            }
            (first, last, params.values)
        };
        let (first, last, p1) = run();
        assert!(last < first * 0.8, "no training progress: {first} -> {last}");
        let (_, _, p2) = run();
        assert_eq!(
            p1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_lr_step_keeps_parameters() {
        let structure =
            ModelStructure::new(DynamicsModelConfig::tiny(), tiny_shape(), ModelKind::Dynamics).unwrap();
        let mut params = ParameterSet::init(structure, 3);
        let before = params.values.clone();
        let mut opt = AdamState::new(
            params.n_params(),
            AdamConfig { learning_rate: 0.0, ..AdamConfig::default() },
            0,
        );
        let batch = vec![random_example(&tiny_shape(), 5, 3)];
        backward_and_step(&mut params, &mut opt, &batch, &LossWeights::default()).unwrap();
        assert_eq!(before, params.values);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let params = tiny_model(16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        checkpoint::save_checkpoint(&path, &params, 123, "fingerprint00").unwrap();
        let (loaded, header) = checkpoint::load_checkpoint(&path).unwrap();
        assert_eq!(header.step, 123);
        assert_eq!(header.stats_fingerprint, "fingerprint00");
        assert_eq!(loaded.values, params.values);

        // Forward pass identical after reload.
        let ex = random_example(&tiny_shape(), 5, 9);
        let a = dynamics_forward(&params, &ex).unwrap();
        let b = dynamics_forward(&loaded, &ex).unwrap();
        assert_eq!(a.severity, b.severity);
    }
}
