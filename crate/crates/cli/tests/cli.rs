use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use stdplane::config::KEYS;
use stdplane::geometry::read_planes;
use stdplane::phantom::Manifest;
use stdplane::volume::GrayImage;

const SUBCOMMANDS: [&str; 8] = ["phantom-gen", "train", "eval", "xval", "ablate", "search", "infer", "mpr-export"];

/// Small and fast: 24³ phantoms, a two-block network, two epochs.
const TINY: [&str; 14] = [
    "--set", "phantom_dims=24",
    "--set", "phantom_spacing_mm=6.6",
    "--set", "dims=24",
    "--set", "spacing_mm=6.6",
    "--set", "channels=4,8",
    "--set", "hidden=16",
    "--set", "epochs=2",
];

fn stdplane(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdplane")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend_from_slice(&TINY);
    args
}

#[test]
fn every_subcommand_documents_every_key() {
    let expected: BTreeSet<&str> = KEYS.iter().map(|(k, _)| *k).collect();
    for sub in SUBCOMMANDS {
        let out = stdplane(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help");
        let text = String::from_utf8(out.stdout).unwrap();
        let section = text.split("Config keys").nth(1).unwrap_or_else(|| panic!("{sub}: no key section"));
        let listed: BTreeSet<&str> = section.lines().skip(1).filter_map(|l| l.split_whitespace().next()).collect();
        assert_eq!(listed, expected, "{sub}");
    }
}

#[test]
fn invalid_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(stdplane(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(stdplane(&["train", "--bogus-flag"]).status.code(), Some(1));
    let r = stdplane(&["phantom-gen", "--n", "4", "--out", out, "--set", "epoch=3"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("epoch"));
    let r = stdplane(&["train", "--out", out, "--manifest", "/nonexistent/manifest.txt"]);
    assert_eq!(r.status.code(), Some(1));
    // Odd volume count with two volumes per patient.
    assert_eq!(stdplane(&["phantom-gen", "--n", "5", "--out", out]).status.code(), Some(1));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 3\nlr = fast\n").unwrap();
    let r = stdplane(&["train", "--out", out, "--config", s(&cfg)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("bad.cfg:2"));
}

#[test]
fn end_to_end_generate_train_infer_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let r = stdplane(&with_tiny(vec!["phantom-gen", "--n", "12", "--seed", "3", "--out", s(&data)]));
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = data.join("manifest.txt");
    let m = Manifest::read(&manifest).unwrap();
    assert_eq!(m.entries.len(), 12);
    assert_eq!(m.patient_ids().len(), 6);
    let lock = std::fs::read_to_string(data.join("run.lock")).unwrap();
    assert!(lock.starts_with("# command:"));
    assert!(lock.contains("phantom_dims = 24"));

    let run = dir.path().join("run");
    let r = stdplane(&with_tiny(vec!["train", "--manifest", s(&manifest), "--fold", "0", "--out", s(&run)]));
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let ckpt = run.join("model_0.ckpt");
    assert!(ckpt.exists());
    let curve = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);

    let r = stdplane(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--fold", "0", "--out", s(&run)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let report = String::from_utf8(r.stdout).unwrap();
    assert!(report.starts_with("plane,d_mm,eps_n_deg,eps_i_deg,score"));
    assert_eq!(report.lines().count(), 5);

    let volume = m.resolve(&m.entries[0]);
    let planes = dir.path().join("pred.planes");
    let r = stdplane(&["infer", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--output", s(&planes), "--out", s(&run)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let pred = read_planes(&planes).unwrap();
    let names: Vec<&str> = pred.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(names, ["axial", "coronal", "sagittal"]);
    assert!(pred.iter().all(|p| p.frame.axis_error() < 1e-6));

    let pgm = dir.path().join("pgm");
    let r = stdplane(&["mpr-export", "--volume", s(&volume), "--planes", s(&planes), "--size", "40", "--out", s(&pgm)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    for name in names {
        let img = GrayImage::from_pgm(&std::fs::read(pgm.join(format!("{name}.pgm"))).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (40, 40));
    }
}

#[test]
fn divergent_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let r = stdplane(&with_tiny(vec!["phantom-gen", "--n", "4", "--out", s(&data)]));
    assert_eq!(r.status.code(), Some(0));
    let r = stdplane(&with_tiny(vec![
        "train", "--manifest", s(&data.join("manifest.txt")), "--out", s(&dir.path().join("run")),
        "--set", "lr=1e30", "--set", "epochs=5",
    ]));
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn run_lock_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let r = stdplane(&with_tiny(vec!["phantom-gen", "--n", "4", "--mode", "calcaneus", "--seed", "7", "--out", s(&first)]));
    assert_eq!(r.status.code(), Some(0));
    let second = dir.path().join("second");
    let r = stdplane(&["phantom-gen", "--n", "4", "--config", s(&first.join("run.lock")), "--out", s(&second)]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    for name in ["manifest.txt", "vol_0000.vraw", "vol_0003.vraw", "vol_0002.planes"] {
        assert_eq!(std::fs::read(first.join(name)).unwrap(), std::fs::read(second.join(name)).unwrap(), "{name}");
    }
}
