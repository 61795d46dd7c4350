use std::sync::Arc;

use ndarray::{Array2, Axis};

use super::gradcheck::run_gradcheck;
use super::*;
use crate::coarsen::{build_hierarchy, Hierarchy};
use crate::lbo::assemble_operator;
use crate::tetmesh::jittered_box_mesh;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Toy sample: jittered grid (~27-36 vertices), LBO operator, 2-stage
/// hierarchy for a two-block model.
fn toy_sample(seed: u64, stages: usize, target: Target) -> MeshSample {
    let mesh = jittered_box_mesh(3, 3, 3, [1.0, 1.0, 1.0], 0.15, seed);
    let op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).unwrap();
    let hierarchy = Arc::new(build_hierarchy(&op, stages, seed).unwrap());
    let feats = mesh.min_max_normalize();
    let features = Array2::from_shape_fn((mesh.n_vertices(), 3), |(i, c)| feats[i][c]);
    MeshSample::new(format!("toy-{seed}"), features.view(), hierarchy, target).unwrap()
}

fn toy_config(task: Task) -> ModelConfig {
    ModelConfig {
        task,
        order: 1,
        in_features: 3,
        widths: vec![4, 8],
        fc_hidden: 8,
        operator: OperatorKind::Lbo,
        lumping: Lumping::FemQuarter,
    }
}

#[test]
fn parameter_count_matches_hand_arithmetic() {
    // Standard widths, K=1, 3 input features, hidden 128:
    // conv: 2*(3*16 + 16*32 + 32*64 + 64*128 + 128*128) = 2*27184 = 54368
    // bn: 2*(16+32+64+128+128) = 736
    // fc1: 128*128 + 128 = 16512; fc2: 128 + 1 = 129.
    let model = build_model(&ModelConfig::standard(Task::Classify, 1), 0);
    assert_eq!(model.parameter_count(), 54368 + 736 + 16512 + 129);

    // Layer specs shape: 5 conv blocks with pools after 1-4, GAP, FC, output.
    let specs = model.layer_specs();
    let pools = specs.iter().filter(|s| s.kind == LayerKind::Pool).count();
    assert_eq!(pools, 4);
    assert_eq!(specs.last().unwrap().kind, LayerKind::Output);
    assert_eq!(model.config.stages_needed(), 8);
}

#[test]
fn k0_model_is_pointwise_before_pooling() {
    // With K=0 every conv is a per-vertex linear map: the first block's
    // pre-BN output at a vertex depends only on that vertex's features.
    let sample = toy_sample(3, 2, Target::Label(1));
    let mut config = toy_config(Task::Classify);
    config.order = 0;
    let model = build_model(&config, 7);
    let lvl0 = &sample.hierarchy.levels[0];
    let scaled = lvl0.op.scaled().unwrap();
    let (y, _) = crate::spectral::cheb_conv_forward(
        &model.blocks[0].conv,
        &scaled,
        sample.padded_features.view(),
    )
    .unwrap();
    let want = sample
        .padded_features
        .dot(&model.blocks[0].conv.theta.index_axis(Axis(0), 0));
    for (a, b) in y.iter().zip(want.iter()) {
        assert!(close(*a, *b, 1e-14));
    }
}

#[test]
fn forward_deterministic_and_zero_input_depends_only_on_biases() {
    let sample = toy_sample(5, 2, Target::Label(0));
    let model = build_model(&toy_config(Task::Classify), 11);
    let zeroed = MeshSample {
        id: sample.id.clone(),
        padded_features: Array2::zeros(sample.padded_features.raw_dim()),
        hierarchy: sample.hierarchy.clone(),
        target: sample.target,
    };
    let a = forward(&model, &zeroed, BnMode::Batch).unwrap();
    let b = forward(&model, &zeroed, BnMode::Batch).unwrap();
    assert_eq!(a.output, b.output);
    assert!(a.output.is_finite());
}

#[test]
fn gap_ignores_extra_fake_padding() {
    // Appending fake rows to the GAP input leaves the average unchanged:
    // simulate by comparing against a hierarchy-free direct computation.
    let sample = toy_sample(9, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 2);
    let cache = forward(&model, &sample, BnMode::Batch).unwrap();
    let lvl = &sample.hierarchy.levels[cache.gap_level()];
    // The last block pools nothing: its activations are the GAP input.
    let acts = cache.last_conv_activations();
    let mut mean = vec![0.0; acts.ncols()];
    for (slot, &is_real) in lvl.real.iter().enumerate() {
        if is_real {
            for c in 0..acts.ncols() {
                mean[c] += acts[(slot, c)];
            }
        }
    }
    for m in &mut mean {
        *m /= lvl.n_real as f64;
    }
    for c in 0..mean.len() {
        assert!(close(cache.gap_out[c], mean[c], 1e-12));
    }
    // Appending extra fake rows (zeros) must not move the average, because
    // only real rows enter it: recompute with doubled padding.
    let mut widened = Array2::zeros((acts.nrows() * 2, acts.ncols()));
    widened.slice_mut(ndarray::s![..acts.nrows(), ..]).assign(acts);
    let mut wide_mean = vec![0.0; acts.ncols()];
    for (slot, &is_real) in lvl.real.iter().enumerate() {
        if is_real {
            for c in 0..acts.ncols() {
                wide_mean[c] += widened[(slot, c)];
            }
        }
    }
    for (c, m) in wide_mean.iter_mut().enumerate() {
        *m /= lvl.n_real as f64;
        assert!(close(*m, mean[c], 0.0));
    }
}

#[test]
fn fake_slots_stay_zero_through_the_network() {
    let sample = toy_sample(13, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 5);
    let cache = forward(&model, &sample, BnMode::Batch).unwrap();
    for (b, bc) in cache.block_caches.iter().enumerate() {
        let lvl = &sample.hierarchy.levels[bc.level];
        for (slot, &is_real) in lvl.real.iter().enumerate() {
            if !is_real {
                for c in 0..bc.relu_out.ncols() {
                    assert_eq!(bc.relu_out[(slot, c)], 0.0, "block {b} slot {slot}");
                }
            }
        }
    }
}

#[test]
fn bn_batch_statistics_are_normalized() {
    // Pre-affine activations over real vertices: mean 0, variance 1 (within
    // the epsilon-regularized tolerance).
    let sample = toy_sample(17, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 3);
    let cache = forward(&model, &sample, BnMode::Batch).unwrap();
    for bc in &cache.block_caches {
        let lvl = &sample.hierarchy.levels[bc.level];
        let xhat = &bc.bn.xhat;
        for c in 0..xhat.ncols() {
            let mut mean = 0.0;
            let mut var = 0.0;
            for (slot, &is_real) in lvl.real.iter().enumerate() {
                if is_real {
                    mean += xhat[(slot, c)];
                }
            }
            mean /= lvl.n_real as f64;
            for (slot, &is_real) in lvl.real.iter().enumerate() {
                if is_real {
                    let d = xhat[(slot, c)] - mean;
                    var += d * d;
                }
            }
            var /= lvl.n_real as f64;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            // Variance of xhat = var/(var+eps) <= 1, equality up to eps.
            assert!(var <= 1.0 + 1e-6, "var {var}");
        }
    }
}

#[test]
fn loss_closed_forms_and_stability() {
    assert!(close(loss(0.0, &Target::Label(1)).unwrap(), 2.0f64.ln(), 1e-12));
    assert!(close(loss(0.0, &Target::Label(0)).unwrap(), 2.0f64.ln(), 1e-12));
    assert_eq!(loss(3.5, &Target::Value(3.5)).unwrap(), 0.0);
    // Stable at extreme logits.
    let l = loss(100.0, &Target::Label(1)).unwrap();
    assert!(l >= 0.0 && l < 1e-10, "loss {l}");
    let l = loss(-100.0, &Target::Label(1)).unwrap();
    assert!(close(l, 100.0, 1e-9), "loss {l}");
    let l = loss(100.0, &Target::Label(0)).unwrap();
    assert!(close(l, 100.0, 1e-9));
    assert!(loss(f64::NAN, &Target::Label(0)).is_err());
}

#[test]
fn adam_single_step_hand_trace_and_zero_grad_fixpoint() {
    let config = toy_config(Task::Classify);
    let mut model = build_model(&config, 1);
    let reference = model.clone();
    let mut grads = Gradients::zeros_like(&model);
    let mut state = AdamState::new(&model);
    let adam = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };

    // Zero gradient, zero decay: parameters unchanged.
    adam_step(&mut model, &grads, &mut state, &adam).unwrap();
    assert_eq!(model, reference);

    // Single step with gradient g on one element:
    // m = (1-b1) g, v = (1-b2) g^2, m^ = g, v^ = g^2,
    // delta = -lr * g / (|g| + eps).
    let g = 0.37;
    grads.blocks[0].theta[(0, 0, 0)] = g;
    let before = model.blocks[0].conv.theta[(0, 0, 0)];
    let mut state = AdamState::new(&model);
    adam_step(&mut model, &grads, &mut state, &adam).unwrap();
    let after = model.blocks[0].conv.theta[(0, 0, 0)];
    let want = before - adam.lr * g / (g.abs() + adam.epsilon);
    assert!(close(after, want, 1e-15), "{after} vs {want}");

    // Non-finite gradient is an error.
    grads.blocks[0].theta[(0, 0, 0)] = f64::NAN;
    assert!(matches!(
        adam_step(&mut model, &grads, &mut state, &adam),
        Err(NetworkError::NonFinite { .. })
    ));
}

#[test]
fn adam_weight_decay_gradient_is_linear() {
    // With zero loss-gradient, one step moves weights by -lr * wd * w exactly
    // (decoupled decay; moments stay zero).
    let config = toy_config(Task::Classify);
    let mut model = build_model(&config, 2);
    let w_before = model.fc1.weight.clone();
    let gamma_before = model.blocks[0].bn.gamma.clone();
    let grads = Gradients::zeros_like(&model);
    let mut state = AdamState::new(&model);
    let adam = AdamConfig::default();
    adam_step(&mut model, &grads, &mut state, &adam).unwrap();
    for (a, b) in model.fc1.weight.iter().zip(w_before.iter()) {
        assert!(close(*a, b * (1.0 - adam.lr * adam.weight_decay), 1e-15));
    }
    // BN parameters are exempt from decay.
    assert_eq!(model.blocks[0].bn.gamma, gamma_before);
}

#[test]
fn adam_is_deterministic_over_repeated_runs() {
    let sample = toy_sample(23, 2, Target::Label(1));
    let run = || -> Model {
        let mut model = build_model(&toy_config(Task::Classify), 9);
        let mut state = AdamState::new(&model);
        for _ in 0..10 {
            let cache = forward(&model, &sample, BnMode::Batch).unwrap();
            let (grads, _) =
                backward(&model, &sample, &cache, loss_grad(cache.output, &sample.target))
                    .unwrap();
            apply_bn_updates(&mut model, &cache);
            adam_step(&mut model, &grads, &mut state, &AdamConfig::default()).unwrap();
        }
        model
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "10 optimizer steps must be bit-identical");
}

#[test]
fn gradcheck_toy_classification_model() {
    let sample = toy_sample(31, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 31);
    let report = run_gradcheck(&model, &sample, &Faults::default()).unwrap();
    assert!(
        report.passes(1e-5),
        "max relative error {:.3e} (per tensor: {:?})",
        report.max_relative_error,
        report.per_tensor
    );
}

#[test]
fn gradcheck_toy_regression_model() {
    let sample = toy_sample(37, 2, Target::Value(0.8));
    let model = build_model(&toy_config(Task::Regress), 37);
    let report = run_gradcheck(&model, &sample, &Faults::default()).unwrap();
    assert!(report.passes(1e-5), "max relative error {:.3e}", report.max_relative_error);
}

#[test]
fn gradcheck_detects_injected_pooling_sign_bug() {
    let sample = toy_sample(41, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 41);
    let report = run_gradcheck(
        &model,
        &sample,
        &Faults { pool_backward_sign_flip: true },
    )
    .unwrap();
    assert!(!report.passes(1e-5), "harness failed to catch the injected bug");
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let sample = toy_sample(43, 2, Target::Label(1));
    let model = build_model(&toy_config(Task::Classify), 43);
    let cache = forward(&model, &sample, BnMode::Batch).unwrap();
    let (grads, grad_x) = backward(&model, &sample, &cache, 0.0).unwrap();
    for s in grads.param_slices() {
        assert!(s.iter().all(|&v| v == 0.0));
    }
    assert!(grad_x.iter().all(|&v| v == 0.0));
}

#[test]
fn permutation_equivariance_via_transported_hierarchy() {
    // Relabel the original vertices and transport the hierarchy's level-0
    // slot map through the permutation; outputs agree to rounding.
    use rand::seq::SliceRandom;
    let mesh = jittered_box_mesh(3, 3, 3, [1.0, 1.0, 1.0], 0.15, 47);
    let op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).unwrap();
    let hierarchy = Arc::new(build_hierarchy(&op, 2, 47).unwrap());
    let n = mesh.n_vertices();
    let feats = mesh.min_max_normalize();
    let features = Array2::from_shape_fn((n, 3), |(i, c)| feats[i][c]);
    let sample =
        MeshSample::new("orig", features.view(), hierarchy.clone(), Target::Label(1)).unwrap();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut crate::rng::stream(48, crate::rng::Purpose::Test, 0));
    // perm[old] = new label; permuted features indexed by new label.
    let mut features_new = Array2::zeros((n, 3));
    for old in 0..n {
        for c in 0..3 {
            features_new[(perm[old], c)] = features[(old, c)];
        }
    }
    let mut transported = (*hierarchy).clone();
    for slot in transported.levels[0].slots.iter_mut() {
        if let Some(v) = slot {
            *v = perm[*v];
        }
    }
    let sample2 = MeshSample::new(
        "permuted",
        features_new.view(),
        Arc::new(transported),
        Target::Label(1),
    )
    .unwrap();

    let model = build_model(&toy_config(Task::Classify), 49);
    let out1 = forward(&model, &sample, BnMode::Batch).unwrap().output;
    let out2 = forward(&model, &sample2, BnMode::Batch).unwrap().output;
    assert!(close(out1, out2, 1e-12 * out1.abs().max(1.0)), "{out1} vs {out2}");
}

#[test]
fn lbo_model_separates_fig1_pair_but_graph_model_cannot() {
    // Two meshes with identical connectivity, different geometry, identical
    // input features: the graph-Laplacian pipeline produces identical outputs
    // while the LBO pipeline differs.
    let mesh_a = jittered_box_mesh(3, 3, 3, [1.0, 1.0, 1.0], 0.2, 53);
    let mesh_b = jittered_box_mesh(3, 3, 3, [1.0, 1.0, 1.0], 0.2, 54);
    assert_eq!(mesh_a.tets, mesh_b.tets);
    let feats = mesh_a.min_max_normalize();
    let features = Array2::from_shape_fn((mesh_a.n_vertices(), 3), |(i, c)| feats[i][c]);

    let build = |mesh: &crate::tetmesh::TetMesh, kind: OperatorKind| -> Arc<Hierarchy> {
        let op = assemble_operator(mesh, kind, Lumping::FemQuarter).unwrap();
        Arc::new(build_hierarchy(&op, 2, 99).unwrap())
    };

    let gl_a = MeshSample::new(
        "gl-a",
        features.view(),
        build(&mesh_a, OperatorKind::Graph),
        Target::Label(0),
    )
    .unwrap();
    let gl_b = MeshSample::new(
        "gl-b",
        features.view(),
        build(&mesh_b, OperatorKind::Graph),
        Target::Label(0),
    )
    .unwrap();
    let lbo_a = MeshSample::new(
        "lbo-a",
        features.view(),
        build(&mesh_a, OperatorKind::Lbo),
        Target::Label(0),
    )
    .unwrap();
    let lbo_b = MeshSample::new(
        "lbo-b",
        features.view(),
        build(&mesh_b, OperatorKind::Lbo),
        Target::Label(0),
    )
    .unwrap();

    let mut config = toy_config(Task::Classify);
    config.operator = OperatorKind::Graph;
    let gl_model = build_model(&config, 60);
    let g1 = forward(&gl_model, &gl_a, BnMode::Batch).unwrap().output;
    let g2 = forward(&gl_model, &gl_b, BnMode::Batch).unwrap().output;
    assert_eq!(g1, g2, "graph Laplacian is blind to geometry");

    let lbo_model = build_model(&toy_config(Task::Classify), 60);
    let l1 = forward(&lbo_model, &lbo_a, BnMode::Batch).unwrap().output;
    let l2 = forward(&lbo_model, &lbo_b, BnMode::Batch).unwrap().output;
    assert!((l1 - l2).abs() > 1e-12, "LBO outputs should differ: {l1} vs {l2}");
}

#[test]
fn insufficient_hierarchy_is_an_error() {
    let sample = toy_sample(61, 1, Target::Label(0));
    let model = build_model(&toy_config(Task::Classify), 61);
    assert!(matches!(
        forward(&model, &sample, BnMode::Batch),
        Err(NetworkError::InsufficientHierarchy { available: 1, needed: 2 })
    ));
}

#[test]
fn fold_split_is_stratified_and_validation_preserves_classes() {
    let targets: Vec<Target> = (0..53)
        .map(|i| Target::Label(u8::from(i % 2 == 0)))
        .collect();
    let folds = fold_split(&targets, 10, 7);
    let total: usize = folds.iter().map(|f| f.len()).sum();
    assert_eq!(total, 53);
    let count_class = |fold: &[usize], class: u8| {
        fold.iter()
            .filter(|&&i| matches!(targets[i], Target::Label(c) if c == class))
            .count()
    };
    let ones: Vec<usize> = folds.iter().map(|f| count_class(f, 1)).collect();
    let zeros: Vec<usize> = folds.iter().map(|f| count_class(f, 0)).collect();
    // 27 positives and 26 negatives over 10 folds: per-fold class counts stay
    // within one of each other across folds.
    assert!(ones.iter().max().unwrap() - ones.iter().min().unwrap() <= 1);
    assert!(zeros.iter().max().unwrap() - zeros.iter().min().unwrap() <= 1);
    // No overlap between folds.
    let mut seen = vec![false; 53];
    for f in &folds {
        for &i in f {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    let rest: Vec<usize> = folds[1..].iter().flatten().copied().collect();
    let (train, val) = validation_split(&rest, &targets, 0.15, 7, 0);
    assert_eq!(train.len() + val.len(), rest.len());
    assert!(count_class(&val, 0) >= 1 && count_class(&val, 1) >= 1);
}

#[test]
fn checkpoint_round_trips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = build_model(&toy_config(Task::Classify), 71);
    // Dirty the running stats so they are exercised too.
    model.blocks[0].bn.running_mean[0] = 0.25;
    model.blocks[1].bn.running_var[3] = 2.5;
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(model, loaded);
    // Saving twice produces identical bytes.
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&model, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = build_model(&toy_config(Task::Regress), 73);
    save_checkpoint(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 9);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Format { .. })));
}

#[test]
fn overfit_smoke_test_reaches_full_training_accuracy() {
    // Capacity sanity: 8 tiny meshes, enough epochs, training accuracy 1.0.
    let mut samples = Vec::new();
    for i in 0..8u64 {
        let label = u8::from(i % 2 == 0);
        // Classes differ in geometry: stretched vs compact boxes.
        let extent = if label == 1 { [1.0, 1.0, 1.0] } else { [2.5, 0.6, 0.9] };
        let mesh = jittered_box_mesh(3, 3, 3, extent, 0.15, 80 + i);
        let op = assemble_operator(&mesh, OperatorKind::Lbo, Lumping::FemQuarter).unwrap();
        let hierarchy = Arc::new(build_hierarchy(&op, 2, 80 + i).unwrap());
        let feats = mesh.min_max_normalize();
        let features = Array2::from_shape_fn((mesh.n_vertices(), 3), |(i, c)| feats[i][c]);
        samples.push(
            MeshSample::new(format!("o{i}"), features.view(), hierarchy, Target::Label(label))
                .unwrap(),
        );
    }
    let mut model = build_model(&toy_config(Task::Classify), 91);
    let mut state = AdamState::new(&model);
    let adam = AdamConfig::default();
    for _ in 0..200 {
        let mut accum = Gradients::zeros_like(&model);
        for sample in &samples {
            let cache = forward(&model, sample, BnMode::Batch).unwrap();
            let (grads, _) =
                backward(&model, sample, &cache, loss_grad(cache.output, &sample.target)).unwrap();
            accum.add_scaled(&grads, 1.0 / samples.len() as f64);
            apply_bn_updates(&mut model, &cache);
        }
        adam_step(&mut model, &accum, &mut state, &adam).unwrap();
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let (metrics, _) = evaluate(&model, &samples, &idx).unwrap();
    match metrics {
        EvalMetrics::Classification { acc, .. } => assert_eq!(acc, 1.0, "overfit failed"),
        _ => unreachable!(),
    }
}
