use d2a_core::harness::eval::default_test_seeds;
use d2a_core::harness::{
    ModelPredictor, OraclePredictor, TrainConfig, evaluate, load_run, predict, save_run, synth_scene, train,
};

#[test]
fn saved_checkpoint_predicts_like_the_trained_one() {
    let cfg = TrainConfig { steps: 6, ..TrainConfig::reduced() };
    let result = train(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_run(tmp.path(), &cfg, &result).unwrap();
    let (loaded_cfg, loaded) = load_run(tmp.path()).unwrap();
    assert_eq!(loaded_cfg, cfg);

    let scene = synth_scene(1_000_000, &cfg.synth()).unwrap();
    let (j_mem, v_mem) = predict(&result.params, &cfg, &scene).unwrap();
    let (j_disk, v_disk) = predict(&loaded, &loaded_cfg, &scene).unwrap();
    // Checkpoints store f32, so predictions agree to single precision.
    assert!(j_mem.max_abs_diff(&j_disk) < 1e-5);
    assert!(v_mem.max_abs_diff(&v_disk) < 1e-5);
}

#[test]
fn trained_model_metrics_are_finite_and_bounded_by_the_oracle() {
    let cfg = TrainConfig { steps: 10, ..TrainConfig::reduced() };
    let result = train(&cfg).unwrap();
    let seeds = default_test_seeds(8);
    let model = evaluate(&ModelPredictor { params: &result.params, config: &cfg }, &cfg, &seeds).unwrap();
    let oracle = evaluate(&OraclePredictor, &cfg, &seeds).unwrap();
    for (m, o) in model.values().into_iter().zip(oracle.values()) {
        assert!(m.is_finite() && m > 0.0);
        assert!(o.abs() < 1e-9);
    }
}
