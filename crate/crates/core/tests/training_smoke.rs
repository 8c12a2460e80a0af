use stdplane::config::ExperimentConfig;
use stdplane::harness::{evaluate, load_samples, train, Sample};
use stdplane::phantom::generate_dataset;
use stdplane::rng::SeededRng;

fn easy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("dims", "24"),
        ("spacing_mm", "6.6"),
        ("phantom_dims", "24"),
        ("phantom_spacing_mm", "6.6"),
        ("phantom_volumes_per_patient", "1"),
        ("phantom_max_rot_deg", "15"),
        ("phantom_max_shift_mm", "5"),
        ("phantom_truncation_prob", "0"),
        ("aug_rot_deg", "0"),
        ("aug_scale_min", "1"),
        ("aug_scale_max", "1"),
        ("aug_trans_mm", "0"),
        ("aug_mirror_prob", "0"),
        ("aug_intensity_min", "1"),
        ("aug_intensity_max", "1"),
        ("channels", "4,8,16"),
        ("hidden", "32"),
        ("epochs", "50"),
        ("batch_size", "4"),
        ("lr_step", "1000"),
        ("seed", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn loss_falls_on_easy_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = easy_config();
    let m = generate_dataset(&cfg.dataset_options(20), dir.path()).unwrap();
    let samples = load_samples(&m).unwrap();
    let set: Vec<&Sample> = samples.iter().collect();
    let out = train(&cfg, &set, &SeededRng::new(cfg.seed)).unwrap();
    let (first, last) = (out.loss_curve[0], *out.loss_curve.last().unwrap());
    assert!(last < 0.2 * first, "loss {first} -> {last}");

    // The fit carries over to the geometry of the training volumes.
    let ev = evaluate(&out.model, &set).unwrap();
    assert!(ev.report.mean().eps_n < 20.0, "{}", ev.report.to_csv());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = easy_config();
    cfg.set("epochs", "2").unwrap();
    let m = generate_dataset(&cfg.dataset_options(6), dir.path()).unwrap();
    let samples = load_samples(&m).unwrap();
    let set: Vec<&Sample> = samples.iter().collect();
    let a = train(&cfg, &set, &SeededRng::new(1)).unwrap();
    let b = train(&cfg, &set, &SeededRng::new(1)).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.model.networks[0].params(), b.model.networks[0].params());
}
