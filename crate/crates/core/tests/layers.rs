use mumoe::activation::{GateActivation, Pointwise};
use mumoe::gradcheck::{check, DEFAULT_STEP};
use mumoe::layer::{
    block_forward, init_block, init_layer, param_count, rank_bound, Coefficients, Gating, InitConfig, LayerConfig, LayerKind,
    MoeBlock, MoeLayer, Weights,
};
use mumoe::norm::{Mode, NormKind};
use mumoe::tensor::{numerical_rank, FactorMatrix, Tensor, TrCore, DEFAULT_RANK_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random simplex rows (Dirichlet-like via normalized uniforms).
fn random_coeffs(rows: usize, experts: &[usize], rng: &mut ChaCha8Rng) -> Coefficients {
    Coefficients {
        levels: experts
            .iter()
            .map(|&n| {
                let mut t = Tensor::from_fn(&[rows, n], |_| rng.random_range(0.0..1.0));
                for r in 0..rows {
                    let s: f64 = t.row(r).iter().sum();
                    t.row_mut(r).iter_mut().for_each(|x| *x /= s);
                }
                t
            })
            .collect(),
    }
}

/// `y_o = Σ_{n…, i} W[n…, i, o] · ∏ a_e[n_e] · z̃[i]` by explicit enumeration.
fn naive_output(w: &Tensor<f64>, coeffs: &Coefficients, z: &Tensor<f64>, bias: bool) -> Tensor<f64> {
    let shape = w.shape().to_vec();
    let e = shape.len() - 2;
    let o = shape[e + 1];
    let rows = z.rows();
    let mut out = Tensor::zeros(&[rows, o]);
    for b in 0..rows {
        let mut zt = z.row(b).to_vec();
        if bias {
            zt.push(1.0);
        }
        let total: usize = shape[..=e].iter().product();
        for flat in 0..total {
            let mut rem = flat;
            let mut idx = vec![0; e + 1];
            for k in (0..=e).rev() {
                idx[k] = rem % shape[k];
                rem /= shape[k];
            }
            let mut coef = zt[idx[e]];
            for l in 0..e {
                coef *= coeffs.row(l, b)[idx[l]];
            }
            for oi in 0..o {
                let mut full = idx.clone();
                full.push(oi);
                let v = out.get(&[b, oi]) + coef * w.get(&full);
                out.set(&[b, oi], v);
            }
        }
    }
    out
}

fn dense_twin(layer: &MoeLayer<f64>) -> MoeLayer<f64> {
    let mut cfg = layer.config.clone();
    cfg.kind = LayerKind::Dense;
    MoeLayer::from_parts(cfg, layer.gating.clone(), Weights::Dense(layer.weights.materialize().unwrap())).unwrap()
}

fn config(kind: LayerKind, i: usize, o: usize, experts: &[usize], rng: &mut ChaCha8Rng) -> LayerConfig {
    match kind {
        LayerKind::Dense => LayerConfig::dense(i, o, experts),
        LayerKind::Cp => LayerConfig::cp(i, o, experts, rng.random_range(1..=4)),
        LayerKind::Tr => {
            let ranks: Vec<usize> = (0..experts.len() + 2).map(|_| rng.random_range(1..=3)).collect();
            LayerConfig::tr(i, o, experts, &ranks)
        }
    }
}

fn all_sigma(levels: usize) -> Vec<f64> {
    vec![1.0; levels]
}

#[test]
fn single_expert_dense_is_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = LayerConfig::dense(3, 2, &[1]);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(5)).unwrap();
    let z = random(&[4, 3], &mut rng);
    let y = layer.predict(&z).unwrap();
    let w = layer.materialize_expert(&[0]).unwrap();
    for b in 0..4 {
        for o in 0..2 {
            let mut want = w.get(&[3, o]);
            for i in 0..3 {
                want += w.get(&[i, o]) * z.get(&[b, i]);
            }
            assert!((y.get(&[b, o]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn dense_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LayerConfig::dense(4, 2, &[3]);
    let mut layer: MoeLayer = init_layer(&cfg, &InitConfig::new(9)).unwrap();
    layer.weights = Weights::Dense(random(&[3, 5, 2], &mut rng));
    let z = random(&[5, 4], &mut rng);
    let coeffs = random_coeffs(5, &[3], &mut rng);
    let y = layer.forward_with_coefficients(&coeffs, &z).unwrap();
    let Weights::Dense(w) = &layer.weights else { unreachable!() };
    assert!(y.rel_l2_error(&naive_output(w, &coeffs, &z, true)) < 1e-14);
}

#[test]
fn factorized_forward_matches_materialized() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [LayerKind::Cp, LayerKind::Tr] {
        for levels in 1..=3 {
            for _ in 0..20 {
                let experts: Vec<usize> = (0..levels).map(|_| rng.random_range(1..=4)).collect();
                let (i, o) = (rng.random_range(1..=6), rng.random_range(1..=6));
                let cfg = config(kind, i, o, &experts, &mut rng).with_bias(rng.random_bool(0.5));
                let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(rng.random()).with_sigma(&all_sigma(levels))).unwrap();
                let z = random(&[3, i], &mut rng);
                let coeffs = random_coeffs(3, &experts, &mut rng);
                let fast = layer.forward_with_coefficients(&coeffs, &z).unwrap();
                let slow = dense_twin(&layer).forward_with_coefficients(&coeffs, &z).unwrap();
                assert!(fast.rel_l2_error(&slow) < 1e-10, "{kind:?} E={levels}");
                let Weights::Dense(w) = &dense_twin(&layer).weights else { unreachable!() };
                assert!(slow.rel_l2_error(&naive_output(w, &coeffs, &z, cfg.bias)) < 1e-12);
            }
        }
    }
}

#[test]
fn f32_storage_matches_within_single_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = LayerConfig::tr(5, 4, &[3, 2], &[2, 3, 2, 2]);
    let init = InitConfig::new(17).with_sigma(&[1.0, 1.0]);
    let l64: MoeLayer<f64> = init_layer(&cfg, &init).unwrap();
    let l32: MoeLayer<f32> = init_layer(&cfg, &init).unwrap();
    let z = random(&[6, 5], &mut rng);
    let coeffs = random_coeffs(6, &[3, 2], &mut rng);
    let a = l64.forward_with_coefficients(&coeffs, &z).unwrap();
    let b = l32.forward_with_coefficients(&coeffs, &z).unwrap();
    assert!(b.rel_l2_error(&a) < 1e-4);
}

#[test]
fn cp_rank_one_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LayerConfig::cp(3, 2, &[4], 1).with_bias(false);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(1)).unwrap();
    let Weights::Cp(f) = &layer.weights else { unreachable!() };
    let z = random(&[1, 3], &mut rng);
    let coeffs = random_coeffs(1, &[4], &mut rng);
    let y = layer.forward_with_coefficients(&coeffs, &z).unwrap();
    let ua: f64 = (0..4).map(|n| f[0].at(0, n) * coeffs.row(0, 0)[n]).sum();
    let uz: f64 = (0..3).map(|i| f[1].at(0, i) * z.get(&[0, i])).sum();
    for o in 0..2 {
        assert!((y.get(&[0, o]) - f[2].at(0, o) * ua * uz).abs() < 1e-15);
    }
}

#[test]
fn degenerate_level_reduces_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let deep_cfg = LayerConfig::cp(4, 3, &[3, 1], 2);
    let deep: MoeLayer = init_layer(&deep_cfg, &InitConfig::new(2).with_sigma(&[1.0, 1.0])).unwrap();
    let Weights::Cp(f) = &deep.weights else { unreachable!() };
    // fold the single second-level column into the first-level factor
    let folded = Tensor::from_fn(&[2, 3], |ix| f[0].at(ix[0], ix[1]) * f[1].at(ix[0], 0));
    let flat_cfg = LayerConfig::cp(4, 3, &[3], 2);
    let flat_gating = Gating { weights: vec![deep.gating.weights[0].clone()], norms: vec![deep.gating.norms[0].clone()], activation: deep.gating.activation };
    let flat = MoeLayer::from_parts(
        flat_cfg,
        flat_gating,
        Weights::Cp(vec![FactorMatrix::new(folded).unwrap(), f[2].clone(), f[3].clone()]),
    )
    .unwrap();
    let z = random(&[4, 4], &mut rng);
    let mut coeffs = random_coeffs(4, &[3, 1], &mut rng);
    assert!(coeffs.levels[1].data().iter().all(|&x| x == 1.0));
    let a = deep.forward_with_coefficients(&coeffs, &z).unwrap();
    coeffs.levels.pop();
    let b = flat.forward_with_coefficients(&coeffs, &z).unwrap();
    assert!(a.rel_l2_error(&b) < 1e-14);
}

#[test]
fn tr_unit_ranks_and_train_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = LayerConfig::tr(3, 2, &[2], &[1, 1, 1]).with_bias(false);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(4)).unwrap();
    let Weights::Tr(c) = &layer.weights else { unreachable!() };
    let z = random(&[1, 3], &mut rng);
    let coeffs = random_coeffs(1, &[2], &mut rng);
    let y = layer.forward_with_coefficients(&coeffs, &z).unwrap();
    let sa: f64 = (0..2).map(|n| c[0].at(0, n, 0) * coeffs.row(0, 0)[n]).sum();
    let sz: f64 = (0..3).map(|i| c[1].at(0, i, 0) * z.get(&[0, i])).sum();
    for o in 0..2 {
        assert!((y.get(&[0, o]) - sa * sz * c[2].at(0, o, 0)).abs() < 1e-15);
    }

    // R_1 = 1: left-to-right vector chain
    let cfg = LayerConfig::tr(3, 2, &[2], &[1, 3, 2]).with_bias(false);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(8).with_sigma(&[1.0])).unwrap();
    let Weights::Tr(c) = &layer.weights else { unreachable!() };
    let y = layer.forward_with_coefficients(&coeffs, &z).unwrap();
    let a = coeffs.row(0, 0);
    let v1: Vec<f64> = (0..3).map(|s| (0..2).map(|n| c[0].at(0, n, s) * a[n]).sum()).collect();
    let v2: Vec<f64> = (0..2)
        .map(|t| (0..3).map(|s| v1[s] * (0..3).map(|i| c[1].at(s, i, t) * z.get(&[0, i])).sum::<f64>()).sum())
        .collect();
    for o in 0..2 {
        let want: f64 = (0..2).map(|t| v2[t] * c[2].at(t, o, 0)).sum();
        assert!((y.get(&[0, o]) - want).abs() < 1e-14);
    }
}

#[test]
fn selection_and_materialized_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in LayerKind::ALL {
        let cfg = config(kind, 4, 3, &[3, 2], &mut rng);
        let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(3).with_sigma(&[1.0, 1.0])).unwrap();
        let full = layer.weights.materialize().unwrap().to_f64();
        let z = random(&[1, 4], &mut rng);
        for n1 in 0..3 {
            for n2 in 0..2 {
                let wn = layer.materialize_expert(&[n1, n2]).unwrap();
                for i in 0..5 {
                    for o in 0..3 {
                        assert!((wn.get(&[i, o]) - full.get(&[n1, n2, i, o])).abs() < 1e-14);
                    }
                }
                let coeffs = Coefficients {
                    levels: vec![
                        Tensor::from_fn(&[1, 3], |ix| f64::from(ix[1] == n1)),
                        Tensor::from_fn(&[1, 2], |ix| f64::from(ix[1] == n2)),
                    ],
                };
                let y = layer.forward_with_coefficients(&coeffs, &z).unwrap();
                for o in 0..3 {
                    let want: f64 = (0..4).map(|i| wn.get(&[i, o]) * z.get(&[0, i])).sum::<f64>() + wn.get(&[4, o]);
                    assert!((y.get(&[0, o]) - want).abs() < 1e-10);
                }
            }
        }
        assert!(layer.materialize_expert(&[3, 0]).is_err());
    }
}

#[test]
fn cp_rank_one_expert_is_scaled_outer_product() {
    let cfg = LayerConfig::cp(3, 4, &[2], 1);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(6)).unwrap();
    let Weights::Cp(f) = &layer.weights else { unreachable!() };
    let w = layer.materialize_expert(&[1]).unwrap();
    for i in 0..4 {
        for o in 0..4 {
            assert!((w.get(&[i, o]) - f[0].at(0, 1) * f[1].at(0, i) * f[2].at(0, o)).abs() < 1e-15);
        }
    }
}

#[test]
fn expert_rank_respects_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in LayerKind::ALL {
        for _ in 0..10 {
            let cfg = config(kind, 6, 5, &[2], &mut rng);
            let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(rng.random())).unwrap();
            let w = layer.materialize_expert(&[rng.random_range(0..2)]).unwrap();
            let r = numerical_rank(&w, DEFAULT_RANK_TOL).unwrap();
            assert!(r <= rank_bound(&cfg));
            if rank_bound(&cfg) < 5 {
                assert_eq!(r, rank_bound(&cfg), "{kind:?}");
            }
        }
    }
}

#[test]
fn init_replication_and_determinism() {
    for kind in LayerKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = config(kind, 4, 3, &[3, 2], &mut rng);
        let init = InitConfig::new(77).with_sigma(&[0.0, 0.0]);
        let layer: MoeLayer = init_layer(&cfg, &init).unwrap();
        let first = layer.materialize_expert(&[0, 0]).unwrap();
        for n in [[1, 0], [2, 1], [0, 1]] {
            assert_eq!(layer.materialize_expert(&n).unwrap(), first, "{kind:?}");
        }
        let again: MoeLayer = init_layer(&cfg, &init).unwrap();
        assert_eq!(layer, again);
        let differ: MoeLayer = init_layer(&cfg, &InitConfig::new(77)).unwrap();
        assert_ne!(differ.materialize_expert(&[0, 0]).unwrap(), differ.materialize_expert(&[1, 0]).unwrap());
    }
}

#[test]
fn cp_experts_share_column_space() {
    let cfg = LayerConfig::cp(6, 8, &[4], 3);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(12)).unwrap();
    let Weights::Cp(f) = &layer.weights else { unreachable!() };
    let basis = f[1].tensor().transpose();
    for n in 0..4 {
        let w = layer.materialize_expert(&[n]).unwrap();
        // appending W_n's columns to the input factor's span must not raise the rank
        let joined = Tensor::from_fn(&[7, 3 + 8], |ix| if ix[1] < 3 { basis.get(&[ix[0], ix[1]]) } else { w.get(&[ix[0], ix[1] - 3]) });
        assert_eq!(numerical_rank(&joined, DEFAULT_RANK_TOL).unwrap(), 3);
    }
    assert_ne!(layer.materialize_expert(&[0]).unwrap(), layer.materialize_expert(&[1]).unwrap());
}

#[test]
fn stored_parameters_match_cost_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in LayerKind::ALL {
        for norm in [NormKind::None, NormKind::Batch, NormKind::Layer] {
            let experts: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
            let cfg = config(kind, 5, 4, &experts, &mut rng).with_gating(GateActivation::Entmax15, norm);
            let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(1)).unwrap();
            assert_eq!(layer.stored_param_count(), param_count(&cfg));
        }
    }
}

#[test]
fn gating_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = LayerConfig::cp(3, 2, &[4], 2);
    let mut layer: MoeLayer = init_layer(&cfg, &InitConfig::new(1)).unwrap();
    let z = random(&[5, 3], &mut rng);
    layer.gating.weights[0] = Tensor::zeros(&[3, 4]);
    let a = layer.coefficients(&z, Mode::Eval).unwrap();
    assert!(a.levels[0].data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

    layer.gating.weights[0] = Tensor::from_fn(&[3, 4], |ix| if ix[1] == 2 { 100.0 } else { 0.0 });
    let one = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
    assert_eq!(layer.coefficients(&one, Mode::Eval).unwrap().levels[0].data(), &[0.0, 0.0, 1.0, 0.0]);

    let g = random(&[3, 4], &mut rng);
    layer.gating.weights[0] = g.clone();
    let base = layer.coefficients(&z, Mode::Eval).unwrap();
    let perm = [2, 0, 3, 1];
    layer.gating.weights[0] = Tensor::from_fn(&[3, 4], |ix| g.get(&[ix[0], perm[ix[1]]]));
    let permuted = layer.coefficients(&z, Mode::Eval).unwrap();
    for b in 0..5 {
        for c in 0..4 {
            assert_eq!(permuted.row(0, b)[c], base.row(0, b)[perm[c]]);
        }
    }
}

#[test]
fn linear_in_input_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in LayerKind::ALL {
        let cfg = config(kind, 4, 3, &[3], &mut rng).with_bias(false);
        let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(2)).unwrap();
        let coeffs = random_coeffs(2, &[3], &mut rng);
        let (z1, z2) = (random(&[2, 4], &mut rng), random(&[2, 4], &mut rng));
        let (alpha, beta) = (0.7, -1.3);
        let mix = Tensor::from_fn(&[2, 4], |ix| alpha * z1.get(ix) + beta * z2.get(ix));
        let lhs = layer.forward_with_coefficients(&coeffs, &mix).unwrap();
        let y1 = layer.forward_with_coefficients(&coeffs, &z1).unwrap();
        let y2 = layer.forward_with_coefficients(&coeffs, &z2).unwrap();
        let rhs = Tensor::from_fn(&[2, 3], |ix| alpha * y1.get(ix) + beta * y2.get(ix));
        assert!(lhs.rel_l2_error(&rhs) < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for kind in LayerKind::ALL {
        for (act, norm) in [
            (GateActivation::Entmax15, NormKind::None),
            (GateActivation::Entmax15, NormKind::Batch),
            (GateActivation::Softmax, NormKind::Layer),
        ] {
            let experts: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=4)).collect();
            let cfg = config(kind, 4, 3, &experts, &mut rng).with_gating(act, norm);
            let mut layer: MoeLayer = init_layer(&cfg, &InitConfig::new(rng.random()).with_sigma(&[1.0, 1.0])).unwrap();
            for g in layer.gating.weights.iter_mut() {
                *g = g.map(|x| 3.0 * x);
            }
            let z = random(&[5, 4], &mut rng);
            let u = random(&[5, 3], &mut rng);
            for c in check(&layer, &z, &u, DEFAULT_STEP).unwrap() {
                assert!(c.rel_error < 1e-5, "{kind:?} {act:?} {norm:?} {}: {}", c.name, c.rel_error);
            }
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = LayerConfig::tr(4, 3, &[3], &[2, 2, 2]).with_gating(GateActivation::Entmax15, NormKind::Batch);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(1)).unwrap();
    let z = random(&[4, 4], &mut rng);
    let out = layer.forward(&z, Mode::Training).unwrap();
    let g = layer.backward(&out.cache, &Tensor::zeros(&[4, 3])).unwrap();
    assert!(g.params.iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    assert!(g.input.data().iter().all(|&x| x == 0.0));
    assert!(layer.backward(&out.cache, &Tensor::zeros(&[3, 3])).is_err());
}

#[test]
fn cp_gradient_is_dense_gradient_through_materialization() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let cfg = LayerConfig::cp(2, 2, &[3], 2);
    let layer: MoeLayer = init_layer(&cfg, &InitConfig::new(3)).unwrap();
    let dense = dense_twin(&layer);
    let z = random(&[3, 2], &mut rng);
    let u = random(&[3, 2], &mut rng);
    let gc = layer.backward(&layer.forward(&z, Mode::Training).unwrap().cache, &u).unwrap();
    let gd = dense.backward(&dense.forward(&z, Mode::Training).unwrap().cache, &u).unwrap();
    let dw = gd.params.last().unwrap();
    let Weights::Cp(f) = &layer.weights else { unreachable!() };
    let shape = [3, 3, 2];
    // ∂L/∂U_k[r, j] = Σ_{idx: idx_k = j} ∂L/∂W[idx] · ∏_{l≠k} U_l[r, idx_l]
    for k in 0..3 {
        let analytic = &gc.params[gc.params.len() - 3 + k];
        for r in 0..2 {
            for j in 0..shape[k] {
                let mut want = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        for c in 0..2 {
                            let idx = [a, b, c];
                            if idx[k] != j {
                                continue;
                            }
                            let others: f64 = (0..3).filter(|&l| l != k).map(|l| f[l].at(r, idx[l])).product();
                            want += dw.get(&idx) * others;
                        }
                    }
                }
                assert!((analytic.get(&[r, j]) - want).abs() < 1e-12);
            }
        }
    }
    assert!(gc.input.rel_l2_error(&gd.input) < 1e-12);
}

#[test]
fn block_reduces_to_mlp_and_matches_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let first = LayerConfig::dense(3, 4, &[1]);
    let second = LayerConfig::dense(4, 2, &[1]);
    let block: MoeBlock = init_block(&first, &second, Pointwise::Gelu, &InitConfig::new(5)).unwrap();
    let z = random(&[3, 3], &mut rng);
    let y = block.predict(&z).unwrap();
    let Weights::Dense(a) = &block.first else { unreachable!() };
    let Weights::Dense(b) = &block.second else { unreachable!() };
    for s in 0..3 {
        let h: Vec<f64> = (0..4)
            .map(|j| {
                let pre = (0..3).map(|i| a.get(&[0, i, j]) * z.get(&[s, i])).sum::<f64>() + a.get(&[0, 3, j]);
                Pointwise::Gelu.apply(pre)
            })
            .collect();
        for o in 0..2 {
            let want = (0..4).map(|j| b.get(&[0, j, o]) * h[j]).sum::<f64>() + b.get(&[0, 4, o]);
            assert!((y.get(&[s, o]) - want).abs() < 1e-13);
        }
    }

    // identity activation: a single layer whose expert n is W1_n W2_n, coefficients applied twice
    let first = LayerConfig::cp(3, 4, &[3], 2).with_bias(false);
    let second = LayerConfig::cp(4, 2, &[3], 3).with_bias(false);
    let block: MoeBlock = init_block(&first, &second, Pointwise::Identity, &InitConfig::new(6)).unwrap();
    let z = random(&[2, 3], &mut rng);
    let coeffs = block.coefficients(&z, Mode::Eval).unwrap();
    let y = block.predict(&z).unwrap();
    let l1 = MoeLayer::from_parts(first.clone(), block.gating.clone(), block.first.clone()).unwrap();
    let unused_gate = Gating::zeros(4, &[3], GateActivation::Entmax15, NormKind::None, 1e-5, 0.1);
    let l2 = MoeLayer::from_parts(second.clone(), unused_gate, block.second.clone()).unwrap();
    for s in 0..2 {
        let a = coeffs.row(0, s);
        for o in 0..2 {
            let mut want = 0.0;
            for n in 0..3 {
                for m in 0..3 {
                    let (p, q) = (l1.materialize_expert(&[n]).unwrap(), l2.materialize_expert(&[m]).unwrap());
                    let prod: f64 = (0..3).map(|i| z.get(&[s, i]) * (0..4).map(|j| p.get(&[i, j]) * q.get(&[j, o])).sum::<f64>()).sum();
                    want += a[n] * a[m] * prod;
                }
            }
            assert!((y.get(&[s, o]) - want).abs() < 1e-12);
        }
    }
    let free = block_forward(&l1, &l2, &z, Pointwise::Identity).unwrap();
    assert_eq!(free, y);
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for kind in LayerKind::ALL {
        let first = config(kind, 3, 4, &[3], &mut rng).with_gating(GateActivation::Entmax15, NormKind::Layer);
        let second = config(kind, 4, 2, &[3], &mut rng);
        let block: MoeBlock = init_block(&first, &second, Pointwise::Gelu, &InitConfig::new(rng.random())).unwrap();
        let z = random(&[4, 3], &mut rng);
        let u = random(&[4, 2], &mut rng);
        for c in check(&block, &z, &u, DEFAULT_STEP).unwrap() {
            assert!(c.rel_error < 1e-5, "{kind:?} {}: {}", c.name, c.rel_error);
        }
    }
}

#[test]
fn block_rejects_mismatched_layers() {
    let first = LayerConfig::cp(3, 4, &[3], 2);
    let second = LayerConfig::cp(5, 2, &[3], 2);
    assert!(init_block::<f64>(&first, &second, Pointwise::Gelu, &InitConfig::new(1)).is_err());
    let second = LayerConfig::cp(4, 2, &[2], 2);
    assert!(init_block::<f64>(&first, &second, Pointwise::Gelu, &InitConfig::new(1)).is_err());
}

#[test]
fn ring_violation_is_rejected() {
    let cfg = LayerConfig::tr(2, 2, &[2], &[2, 2, 2]);
    let gating = Gating::zeros(2, &[2], GateActivation::Entmax15, NormKind::None, 1e-5, 0.1);
    let cores = vec![
        TrCore::new(Tensor::zeros(&[2, 2, 2])).unwrap(),
        TrCore::new(Tensor::zeros(&[2, 3, 3])).unwrap(),
        TrCore::new(Tensor::zeros(&[2, 2, 2])).unwrap(),
    ];
    assert!(MoeLayer::<f64>::from_parts(cfg, gating, Weights::Tr(cores)).is_err());
}
