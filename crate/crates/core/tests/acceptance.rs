//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Everything runs inside a single test so the report prints in order and
//! the heavy training criteria do not compete for cores.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use stdplane::augmentation::{apply_augmentation, sample_augmentation, AugmentConfig, GridSpec};
use stdplane::config::ExperimentConfig;
use stdplane::geometry::{
    decode_rotation, decode_values, encode_rotation, quaternion_to_matrix, transform_plane, PlaneFrame, RigidTransform,
    RotMat3, RotationKind, Vec3,
};
use stdplane::harness::{ablation_driver, evaluate, load_samples, split_kfold_grouped, train, Ablation, Sample};
use stdplane::loss_metrics::{loss, score, LossConfig, LossWeights};
use stdplane::model::{Network, NetworkConfig};
use stdplane::phantom::{
    canonical_planes, generate_dataset, generate_phantom, Manifest, ManifestEntry, Mode, OriginClass, PhantomSpec,
};
use stdplane::rng::{uniform, SeededRng};
use stdplane::volume::{clip_rescale, resample_pass_count, window, Volume, WindowConfig};

/// Writes straight to stderr so the lines survive libtest output capture.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stderr(), $($arg)*);
    }};
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_rotation(rng: &mut impl Rng) -> RotMat3 {
    loop {
        let q = [(); 4].map(|_| uniform(rng, -1.0, 1.0));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return quaternion_to_matrix(q.map(|x| x / n));
        }
    }
}

fn orthonormality(r: &RotMat3) -> f64 {
    r.transpose().mul_mat(r).frobenius_distance(&RotMat3::IDENTITY)
}

/// (d, ε_n, ε_i, score) per method row of the three summary tables, for
/// calcaneus and ankle.
const TABLE_ROWS: [(&str, [f64; 4], [f64; 4]); 9] = [
    ("euler", [14.39, 8.93, 11.05, 10.45], [7.78, 6.99, 8.37, 7.42]),
    ("quaternion", [9.93, 9.96, 9.54, 9.87], [5.00, 8.16, 8.31, 7.56]),
    ("sixd", [9.94, 8.77, 8.34, 8.92], [5.43, 7.11, 6.58, 6.67]),
    ("64^3", [9.74, 8.98, 8.33, 9.01], [6.18, 7.12, 6.49, 6.80]),
    ("72^3", [9.94, 8.77, 8.34, 8.92], [5.43, 7.11, 6.58, 6.67]),
    ("128^3", [10.48, 8.48, 8.49, 8.88], [4.86, 7.75, 7.04, 7.03]),
    ("three", [9.46, 9.26, 8.94, 9.24], [6.52, 7.55, 6.77, 7.19]),
    ("comb", [9.94, 8.77, 8.34, 8.92], [5.43, 7.11, 6.58, 6.67]),
    ("opt-comb", [10.38, 8.14, 7.91, 8.54], [5.20, 6.93, 6.86, 6.57]),
];

/// Per-plane rows of the opt-comb breakdown; informational only, one ankle
/// cell is inconsistent with its components.
const PER_PLANE_ROWS: [(&str, [f64; 4]); 6] = [
    ("calcaneus axial", [10.35, 7.38, 7.69, 8.04]),
    ("calcaneus semicoronal", [13.11, 8.71, 7.49, 9.35]),
    ("calcaneus sagittal", [7.77, 8.65, 8.34, 8.41]),
    ("ankle axial", [6.61, 5.20, 7.76, 5.89]),
    ("ankle coronal", [4.56, 7.57, 6.05, 6.67]),
    ("ankle sagittal", [4.73, 9.18, 6.89, 7.83]),
];

fn c1_score_arithmetic() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for (_, calc, ankle) in TABLE_ROWS {
        for r in [calc, ankle] {
            worst = worst.max((score(r[0], r[1], r[2]) - r[3]).abs());
            cells += 1;
        }
    }
    let mut per_plane_ok = 0;
    for (name, r) in PER_PLANE_ROWS {
        let dev = (score(r[0], r[1], r[2]) - r[3]).abs();
        if dev < 0.01 {
            per_plane_ok += 1;
        } else {
            report!("      note: per-plane row '{name}' deviates by {dev:.3} (not gated)");
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 0.01 && secs < 1.0,
        format!("{cells} table cells, max |score - reported| = {worst:.4}; per-plane rows {per_plane_ok}/6 consistent; {secs:.3}s"),
    )
}

fn c2_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = SeededRng::new(2).stream("rotations", 0);
    let mut worst = [0.0f64; 3];
    for _ in 0..100_000 {
        let r = random_rotation(&mut rng);
        for (k, kind) in RotationKind::ALL.into_iter().enumerate() {
            let back = decode_rotation(&encode_rotation(&r, kind)).expect("valid encoding");
            worst[k] = worst[k].max(back.frobenius_distance(&r));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst.iter().all(|&w| w < 1e-9) && secs < 10.0,
        format!("1e5 rotations, max Frobenius error euler {:.1e}, quaternion {:.1e}, sixd {:.1e}; {secs:.2}s", worst[0], worst[1], worst[2]),
    )
}

fn c3_sixd_robustness() -> Outcome {
    let mut rng = SeededRng::new(3).stream("sixd", 0);
    let (mut worst_orth, mut worst_det, mut rejected) = (0.0f64, 0.0f64, 0usize);
    let mut accepted = 0;
    while accepted < 100_000 {
        let v: Vec<f64> = (0..6).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        match decode_values(RotationKind::SixD, &v) {
            Ok(r) => {
                worst_orth = worst_orth.max(orthonormality(&r));
                worst_det = worst_det.max((r.det() - 1.0).abs());
                accepted += 1;
            }
            Err(_) => rejected += 1,
        }
    }
    outcome(
        worst_orth < 1e-6 && worst_det <= 1e-6,
        format!("1e5 decodes ({rejected} degenerate draws rejected), max |R^T R - I| {worst_orth:.1e}, max |det - 1| {worst_det:.1e}"),
    )
}

fn c4_gradient_oracle() -> Outcome {
    let cfg = NetworkConfig {
        input_dims: 8,
        channels: vec![2, 3],
        hidden: vec![6],
        kind: RotationKind::SixD,
        n_planes: 3,
        combined: true,
    };
    let loss_cfg = LossConfig::new(LossWeights::new(0.4, 0.4, 0.2).unwrap(), RotationKind::SixD, 3);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..5u64 {
        let root = SeededRng::new(100 + seed);
        let mut net: Network<f64> = Network::new(cfg.clone(), &root).unwrap();
        let mut g = root.stream("data", 0);
        let x: Vec<f64> = (0..512).map(|_| uniform(&mut g, 0.0, 1.0)).collect();
        let planes: Vec<PlaneFrame> = (0..3)
            .map(|_| {
                let c = Vec3::new(uniform(&mut g, -20.0, 20.0), uniform(&mut g, -20.0, 20.0), uniform(&mut g, -20.0, 20.0));
                PlaneFrame::from_rotation(c, &random_rotation(&mut g)).unwrap()
            })
            .collect();
        let target = stdplane::augmentation::encode_targets(&planes, 100.0, RotationKind::SixD);
        let objective = |n: &Network<f64>| loss(&n.infer(&x).unwrap(), &target, &loss_cfg).unwrap().total;

        let out = net.forward(&x).unwrap();
        let l = loss(&out, &target, &loss_cfg).unwrap();
        net.backward(&l.grad).unwrap();
        let analytic = net.grads().to_vec();
        for _ in 0..50 {
            let i = g.random_range(0..analytic.len());
            let h = 1e-4 * net.params()[i].abs().max(1e-2);
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = objective(&p);
            p.params_mut()[i] -= 2.0 * h;
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    outcome(worst < 1e-5, format!("{checked} parameters over 5 seeds, max relative deviation {worst:.1e}"))
}

fn c5_label_consistency() -> Outcome {
    let spec = PhantomSpec::new(0, Mode::Calcaneus);
    let (volume, named) = generate_phantom(&spec, [24, 24, 24], Vec3::new(8.0, 8.0, 8.0), &SeededRng::new(5)).unwrap();
    let planes: Vec<PlaneFrame> = named.iter().map(|p| p.frame).collect();
    let grid = GridSpec::new(16, 10.0);
    let aug_cfg = AugmentConfig { grid, ..AugmentConfig::default() };
    let rng = SeededRng::new(55);
    let window = WindowConfig::default();
    let (mut worst, mut mirrored, mut passes_ok, mut worst_mirror_normal) = (0.0f64, 0, 0, 0.0f64);
    for i in 0..1000u64 {
        let aug = sample_augmentation(&aug_cfg, &rng, i);
        let before = resample_pass_count();
        let s = apply_augmentation(&volume, &planes, &aug, grid, &window, RotationKind::SixD).unwrap();
        if resample_pass_count() - before == 1 {
            passes_ok += 1;
        }
        let inv = aug.transform.inverse().unwrap();
        for (p, t) in planes.iter().zip(&s.targets) {
            let back = transform_plane(&inv, t);
            if aug.mirror {
                // Handedness is re-established after mirroring, so only the
                // center and the plane itself are recovered.
                worst_mirror_normal = worst_mirror_normal.max(1.0 - back.normal().dot(p.normal()).abs());
                worst_mirror_normal = worst_mirror_normal.max((back.center() - p.center()).norm());
            } else {
                let e = (back.center() - p.center()).norm()
                    + (back.e_u() - p.e_u()).norm()
                    + (back.e_v() - p.e_v()).norm();
                worst = worst.max(e);
            }
        }
        mirrored += aug.mirror as usize;
    }
    outcome(
        worst < 1e-9 && worst_mirror_normal < 1e-9 && passes_ok == 1000,
        format!(
            "1000 augmentations ({mirrored} mirrored), max round-trip error {worst:.1e} (mirrored planes {worst_mirror_normal:.1e}), single interpolation pass in {passes_ok}/1000"
        ),
    )
}

fn c6_affine_resampling() -> Outcome {
    let a = Vec3::new(3.0, -2.0, 1.5);
    let c = 500.0;
    let field = move |p: Vec3| a.dot(p) + c;
    let spacing = Vec3::new(2.0, 2.5, 3.0);
    let vol: Volume<f64> = Volume::from_fn([30, 28, 26], spacing, field).unwrap();
    let mut rng = SeededRng::new(6).stream("transforms", 0);
    let (mut worst, mut points) = (0.0f64, 0usize);
    for _ in 0..20 {
        let r = random_rotation(&mut rng);
        let t = Vec3::new(uniform(&mut rng, -5.0, 5.0), uniform(&mut rng, -5.0, 5.0), uniform(&mut rng, -5.0, 5.0));
        let tf = RigidTransform::from_linear(&r, t);
        let out: Volume<f64> = vol.resample(&tf, [20, 20, 20], Vec3::new(2.0, 2.0, 2.0)).unwrap();
        let inv = tf.inverse().unwrap();
        let [nx, ny, nz] = vol.dims();
        for k in 0..20 {
            for j in 0..20 {
                for i in 0..20 {
                    let src = inv.apply_point(out.voxel_center(i, j, k));
                    let idx = vol.world_to_index(src);
                    let inside = idx.x >= 1.0
                        && idx.y >= 1.0
                        && idx.z >= 1.0
                        && idx.x <= (nx - 2) as f64
                        && idx.y <= (ny - 2) as f64
                        && idx.z <= (nz - 2) as f64;
                    if inside {
                        let expected = field(src);
                        worst = worst.max((out.get(i, j, k) - expected).abs() / expected.abs());
                        points += 1;
                    }
                }
            }
        }
    }
    outcome(worst < 1e-6 && points > 10_000, format!("{points} interior points over 20 transforms, max relative error {worst:.1e}"))
}

fn desk_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [
        ("mode", "ankle"),
        ("kind", "sixd"),
        ("combined", "true"),
        ("dims", "48"),
        ("spacing_mm", "3.3"),
        ("phantom_dims", "48"),
        ("phantom_spacing_mm", "3.3"),
        ("phantom_volumes_per_patient", "2"),
        ("epochs", "150"),
        ("channels", "8,16,32,64"),
        ("hidden", "256,128"),
        ("seed", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn load_phantoms(cfg: &ExperimentConfig, n_patients: usize, dir: &std::path::Path) -> (Manifest, Vec<Sample>) {
    let m = generate_dataset(&cfg.dataset_options(n_patients), dir).unwrap();
    let samples = load_samples(&m).unwrap();
    (m, samples)
}

fn c7_desk_training(scratch: &std::path::Path) -> Outcome {
    let t = Instant::now();
    let cfg = desk_config();
    let (m, samples) = load_phantoms(&cfg, 100, &scratch.join("desk"));
    let a = split_kfold_grouped(&m, cfg.folds, cfg.seed).unwrap();
    let train_set: Vec<&Sample> = a.train_indices(0).into_iter().map(|i| &samples[i]).collect();
    let test_set: Vec<&Sample> = a.test_indices(0).into_iter().map(|i| &samples[i]).collect();
    let trained = train(&cfg, &train_set, &SeededRng::new(cfg.seed)).unwrap();
    let ev = evaluate(&trained.model, &test_set).unwrap();
    for row in &ev.report.rows {
        report!(
            "      {:<10} d {:6.2} mm  eps_n {:6.2} deg  eps_i {:6.2} deg",
            row.plane, row.errors.d, row.errors.eps_n, row.errors.eps_i
        );
    }
    let mean = ev.report.mean();
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    outcome(
        mean.eps_n < 10.0 && mean.eps_i < 12.0 && mean.d < 16.0 && minutes < 45.0,
        format!(
            "{} train / {} test volumes, held-out medians d {:.2} mm, eps_n {:.2} deg, eps_i {:.2} deg; {minutes:.1} min",
            train_set.len(),
            test_set.len(),
            mean.d,
            mean.eps_n,
            mean.eps_i
        ),
    )
}

fn c8_representation_ablation(scratch: &std::path::Path) -> Outcome {
    let t = Instant::now();
    // Determinism: the whole comparison twice on a tiny set.
    let mut tiny = desk_config();
    for (k, v) in [("dims", "24"), ("spacing_mm", "6.6"), ("phantom_dims", "24"), ("phantom_spacing_mm", "6.6"), ("epochs", "3"), ("channels", "4,8"), ("hidden", "16")] {
        tiny.set(k, v).unwrap();
    }
    let (m, samples) = load_phantoms(&tiny, 10, &scratch.join("ablation_tiny"));
    let a = split_kfold_grouped(&m, tiny.folds, tiny.seed).unwrap();
    let first = ablation_driver(Ablation::Representation, &tiny, &samples, &a, &[0], None, 1).unwrap().to_csv();
    let second = ablation_driver(Ablation::Representation, &tiny, &samples, &a, &[0], None, 1).unwrap().to_csv();
    let deterministic = first == second;

    // Trend at desk scale, on the same 100 patients as the training criterion.
    let desk = desk_config();
    let (m, samples) = load_phantoms(&desk, 100, &scratch.join("ablation_desk"));
    let a = split_kfold_grouped(&m, desk.folds, desk.seed).unwrap();
    let out = scratch.join("ablation_out");
    let table = ablation_driver(Ablation::Representation, &desk, &samples, &a, &[0], Some(&out), 1).unwrap();
    for line in table.to_csv().lines() {
        report!("      {line}");
    }
    let csv_written = std::fs::read_to_string(out.join("ablation.csv")).map(|s| s == table.to_csv()).unwrap_or(false);
    let (six, quat) = (table.score("sixd").unwrap(), table.score("quaternion").unwrap());
    let trend = if six <= quat { "holds" } else { "does not hold" };
    outcome(
        deterministic && csv_written && table.rows.len() == 3,
        format!(
            "repeat runs identical: {deterministic}; mean/std CSV written: {csv_written}; sixd {six:.3} vs quaternion {quat:.3}, trend {trend} (not gated); {:.1} min",
            t.elapsed().as_secs_f64() / 60.0
        ),
    )
}

fn c9_grouped_kfold() -> Outcome {
    let mut rng = SeededRng::new(9).stream("manifests", 0);
    let (mut leaks, mut worst_spread, mut worst_count_spread) = (0usize, 0usize, 0usize);
    for trial in 0..100u64 {
        let k = rng.random_range(2..=6);
        let n_patients = rng.random_range(k..=60);
        let mut entries = Vec::new();
        for p in 0..n_patients as u32 {
            let class = OriginClass::ALL[rng.random_range(0..3)];
            for v in 0..rng.random_range(1..=4) {
                entries.push(ManifestEntry { path: PathBuf::from(format!("p{p}_{v}.vhdr")), patient_id: p, class, mode: Mode::Ankle });
            }
        }
        let m = Manifest { root: PathBuf::from("."), entries };
        let a = split_kfold_grouped(&m, k, trial).unwrap();
        let mut fold_of: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
        for (e, &f) in m.entries.iter().zip(&a.folds) {
            fold_of.entry(e.patient_id).or_default().insert(f);
        }
        leaks += fold_of.values().filter(|s| s.len() > 1).count();
        let class_of: BTreeMap<u32, OriginClass> = m.entries.iter().map(|e| (e.patient_id, e.class)).collect();
        for class in OriginClass::ALL {
            let mut per_fold = vec![0usize; k];
            for (p, folds) in &fold_of {
                if class_of[p] == class {
                    per_fold[*folds.iter().next().unwrap()] += 1;
                }
            }
            worst_spread = worst_spread.max(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap());
        }
        let mut patients_per_fold = vec![0usize; k];
        for folds in fold_of.values() {
            patients_per_fold[*folds.iter().next().unwrap()] += 1;
        }
        worst_count_spread = worst_count_spread.max(patients_per_fold.iter().max().unwrap() - patients_per_fold.iter().min().unwrap());
    }
    outcome(
        leaks == 0 && worst_spread <= 1,
        format!("100 manifests: {leaks} leaked patients, max per-class fold spread {worst_spread} patients, max fold size spread {worst_count_spread}"),
    )
}

fn c10_window() -> Outcome {
    let w = WindowConfig::default();
    let mid_exact = window(0.5, w.gain) == 0.5;
    let mut rng = SeededRng::new(10).stream("window", 0);
    let mut xs: Vec<f64> = (0..10_000).map(|_| uniform(&mut rng, -3000.0, 4000.0)).collect();
    xs.sort_by(f64::total_cmp);
    let ys: Vec<f64> = xs.iter().map(|&x| w.apply(x)).collect();
    let monotone = ys.windows(2).all(|p| p[0] <= p[1]);
    let ends = clip_rescale(w.clip_lo, &w) == 0.0
        && clip_rescale(w.clip_hi, &w) == 1.0
        && clip_rescale(-5000.0, &w) == 0.0
        && clip_rescale(9000.0, &w) == 1.0;
    outcome(mid_exact && monotone && ends, format!("w(0.5) exact: {mid_exact}; monotone over 1e4 points: {monotone}; clip endpoints to 0/1: {ends}"))
}

#[test]
fn acceptance() {
    let _ = canonical_planes(Mode::Ankle, 0.0);
    let scratch = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("score arithmetic against the reported tables", Box::new(c1_score_arithmetic)),
        ("rotation encode/decode round trip", Box::new(c2_round_trip)),
        ("6D decode robustness", Box::new(c3_sixd_robustness)),
        ("gradient oracle through loss and network", Box::new(c4_gradient_oracle)),
        ("augmentation label consistency", Box::new(c5_label_consistency)),
        ("affine-field resampling", Box::new(c6_affine_resampling)),
        ("desk-scale end-to-end training", Box::new(|| c7_desk_training(scratch.path()))),
        ("representation ablation harness", Box::new(|| c8_representation_ablation(scratch.path()))),
        ("grouped k-fold invariants", Box::new(c9_grouped_kfold)),
        ("windowing pipeline", Box::new(c10_window)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        report!("{} criterion {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
