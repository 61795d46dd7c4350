use super::*;

fn small_config(kind: DatasetKind, per_class: usize, seed: u64) -> GenConfig {
    let mut c = GenConfig::standard(kind, per_class, seed);
    c.subdivision = 2;
    c
}

#[test]
fn generated_meshes_pass_validation_with_zero_findings() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(DatasetKind::ThicknessClasses, 2, 5);
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    assert_eq!(manifest.records.len(), 4);
    for record in &manifest.records {
        let node = std::fs::read_to_string(dir.path().join(&record.node_path)).unwrap();
        let ele = std::fs::read_to_string(dir.path().join(&record.ele_path)).unwrap();
        let mesh = parse_tetgen_with_id(&node, &ele, &record.id).unwrap();
        let report = mesh.validate();
        assert!(report.is_clean(), "{}: {report:?}", record.id);
        assert_eq!(sha256_hex(&node), record.node_hash);
        assert_eq!(sha256_hex(&ele), record.ele_hash);
    }
}

#[test]
fn manifest_bytes_are_reproducible_and_round_trip() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let config = small_config(DatasetKind::ThicknessClasses, 2, 9);
    generate_dataset(&config, dir_a.path()).unwrap();
    generate_dataset(&config, dir_b.path()).unwrap();
    let a = std::fs::read(dir_a.path().join("manifest.txt")).unwrap();
    let b = std::fs::read(dir_b.path().join("manifest.txt")).unwrap();
    assert_eq!(a, b, "same seed, same manifest bytes");

    let parsed = read_manifest(&dir_a.path().join("manifest.txt")).unwrap();
    assert_eq!(parsed.kind, DatasetKind::ThicknessClasses);
    assert_eq!(parsed.records.len(), 4);
    let labels: Vec<u8> = parsed
        .records
        .iter()
        .map(|r| match r.target {
            Target::Label(l) => l,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 2);
}

#[test]
fn class_thickness_distributions_are_well_separated() {
    // Realized mean thickness across meshes: the class gap dwarfs the
    // within-class spread from the smooth noise field.
    let config = small_config(DatasetKind::ThicknessClasses, 12, 31);
    let mut thin = Vec::new();
    let mut thick = Vec::new();
    for (index, label) in record_plan(&config) {
        let spec = spec_for_record(&config, index, label);
        let surfaces = shell_surfaces(&spec).unwrap();
        match label.unwrap() {
            0 => thin.push(surfaces.mean_thickness()),
            _ => thick.push(surfaces.mean_thickness()),
        }
    }
    let max_thin = thin.iter().cloned().fold(f64::MIN, f64::max);
    let min_thick = thick.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        max_thin < min_thick,
        "distribution overlap: max thin {max_thin} vs min thick {min_thick}"
    );
}

#[test]
fn regression_targets_span_the_configured_range() {
    let config = small_config(DatasetKind::Regression, 40, 17);
    let mut targets = Vec::new();
    for (index, label) in record_plan(&config) {
        let spec = spec_for_record(&config, index, label);
        targets.push(spec.mean_thickness);
    }
    let lo = targets.iter().cloned().fold(f64::MAX, f64::min);
    let hi = targets.iter().cloned().fold(f64::MIN, f64::max);
    assert!(lo >= config.regress_range[0] && hi <= config.regress_range[1]);
    assert!(hi - lo > 0.6 * (config.regress_range[1] - config.regress_range[0]));
}

#[test]
fn anomaly_split_marks_heldout_test_meshes() {
    let mut config = small_config(DatasetKind::AnomalyClasses, 4, 3);
    config.holdout_per_class = 1;
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let test: Vec<&SampleRecord> =
        manifest.records.iter().filter(|r| r.split == "test").collect();
    assert_eq!(test.len(), 2);
    // One heldout per class.
    let test_labels: Vec<u8> = test
        .iter()
        .map(|r| match r.target {
            Target::Label(l) => l,
            _ => unreachable!(),
        })
        .collect();
    assert!(test_labels.contains(&0) && test_labels.contains(&1));
}

#[test]
fn precompute_is_idempotent_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(DatasetKind::ThicknessClasses, 1, 21);
    let manifest = generate_dataset(&config, dir.path()).unwrap();
    let first =
        precompute(&manifest, OperatorKind::Lbo, Lumping::FemQuarter, 2, 7).unwrap();
    assert_eq!(first.built, 2);
    assert_eq!(first.skipped, 0);
    assert!(first.failed.is_empty(), "{:?}", first.failed);

    // Rerun: nothing rebuilt.
    let second =
        precompute(&manifest, OperatorKind::Lbo, Lumping::FemQuarter, 2, 7).unwrap();
    assert_eq!(second.built, 0);
    assert_eq!(second.skipped, 2);

    // Changing the operator kind rebuilds.
    let graph = precompute(&manifest, OperatorKind::Graph, Lumping::FemQuarter, 2, 7).unwrap();
    assert_eq!(graph.built, 2);

    // Cached operators equal an in-memory rebuild exactly.
    let record = &manifest.records[0];
    let cache_file = record.cache_file(OperatorKind::Graph);
    let node = std::fs::read_to_string(dir.path().join(&record.node_path)).unwrap();
    let ele = std::fs::read_to_string(dir.path().join(&record.ele_path)).unwrap();
    let mesh = parse_tetgen_with_id(&node, &ele, &record.id).unwrap();
    let op = assemble_operator(&mesh, OperatorKind::Graph, Lumping::FemQuarter).unwrap();
    let mesh_seed = subseed(7, Purpose::Matching, 0);
    let rebuilt = build_hierarchy(&op, 2, mesh_seed).unwrap();
    let cached = load_cache(&dir.path().join(&cache_file)).unwrap();
    for (a, b) in cached.hierarchy.levels.iter().zip(&rebuilt.levels) {
        assert_eq!(a.op.s, b.op.s);
        assert_eq!(a.op.d, b.op.d);
        assert_eq!(a.slots, b.slots);
    }
    assert_eq!(cached.hierarchy.lambda_max, rebuilt.lambda_max);

    let samples = load_samples(&manifest, OperatorKind::Graph).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(
        samples[0].sample.padded_features.nrows(),
        cached.hierarchy.levels[0].padded_n()
    );
}
