//! `stdplane` command-line entry point.
//!
//! Exit codes: 0 success, 1 invalid input (config, arguments, files),
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use stdplane::config::{ExperimentConfig, KEYS};
use stdplane::geometry::{read_planes, write_planes, NamedPlane};
use stdplane::harness::{
    ablation_driver, cross_validate, evaluate, hyperparam_search, load_samples, split_kfold_grouped, train,
    weight_grid_search, Ablation, Sample, SearchSpace, TrainedModel,
};
use stdplane::io::write_atomic;
use stdplane::phantom::{generate_dataset, Manifest};
use stdplane::rng::SeededRng;
use stdplane::volume::{extract_mpr_slice, read_volume};
use stdplane::{Error, Result};

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (set in --config files as `key = value`, or with --set key=value):\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:<30} {doc}\n"));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "stdplane", version, about = "Standard-plane regression from 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Master seed (overrides the `seed` key).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; receives `run.lock` and all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; folds run in parallel for xval and ablate.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    #[command(after_help = config_keys_help())]
    PhantomGen {
        /// Total number of volumes.
        #[arg(long)]
        n: usize,
        /// ankle | calcaneus (overrides the `mode` key).
        #[arg(long)]
        mode: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on a manifest (optionally leaving one fold out).
    #[command(after_help = config_keys_help())]
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Hold out this fold of the grouped split.
        #[arg(long)]
        fold: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate checkpoints on a manifest or on one fold of it.
    #[command(after_help = config_keys_help())]
    Eval {
        /// One combined or three per-plane checkpoints.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate only this fold of the grouped split.
        #[arg(long)]
        fold: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Grouped k-fold cross-validation.
    #[command(after_help = config_keys_help())]
    Xval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated subset of folds (default: all).
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compare representations, resolutions or network schemes.
    #[command(after_help = config_keys_help())]
    Ablate {
        /// representation | resolution | combined-vs-separate
        #[arg(long)]
        which: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        folds: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Random hyperparameter search or loss-weight grid search on one fold.
    #[command(after_help = config_keys_help())]
    Search {
        /// hyperparams | weights
        #[arg(long)]
        what: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Predict the planes of one volume.
    #[command(after_help = config_keys_help())]
    Infer {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        /// Plane file to write (default: <out>/<volume stem>.planes).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Export one PGM slice per plane.
    #[command(after_help = config_keys_help())]
    MprExport {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        planes: PathBuf,
        /// Image edge in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Pixel size in mm (default: largest volume extent / size).
        #[arg(long)]
        pixel_mm: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::PhantomGen { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Xval { common, .. }
            | Command::Ablate { common, .. }
            | Command::Search { common, .. }
            | Command::Infer { common, .. }
            | Command::MprExport { common, .. } => common,
        }
    }
}

fn resolve_config(cmd: &Command) -> Result<ExperimentConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    match cmd {
        Command::PhantomGen { mode: Some(m), .. } => cfg.set("mode", m)?,
        Command::Train { manifest: Some(m), .. }
        | Command::Eval { manifest: Some(m), .. }
        | Command::Xval { manifest: Some(m), .. }
        | Command::Ablate { manifest: Some(m), .. }
        | Command::Search { manifest: Some(m), .. } => cfg.manifest = Some(m.clone()),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run_lock(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let text = format!("# command: {}\n{}", args.join(" "), cfg.to_text());
    write_atomic(&out.join("run.lock"), text.as_bytes())
}

fn manifest_of(cfg: &ExperimentConfig) -> Result<Manifest> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset given: pass --manifest or set 'manifest'".into()))?;
    Manifest::read(path)
}

fn load(cfg: &ExperimentConfig) -> Result<(Manifest, Vec<Sample>)> {
    let m = manifest_of(cfg)?;
    let samples = load_samples(&m)?;
    if samples.is_empty() {
        return Err(Error::Empty("manifest lists no volumes"));
    }
    Ok((m, samples))
}

fn fold_list(requested: &[usize], k: usize) -> Result<Vec<usize>> {
    if let Some(&bad) = requested.iter().find(|&&f| f >= k) {
        return Err(Error::Config(format!("fold {bad} does not exist with folds = {k}")));
    }
    Ok(if requested.is_empty() { (0..k).collect() } else { requested.to_vec() })
}

fn run(cmd: Command) -> Result<()> {
    let cfg = resolve_config(&cmd)?;
    let common = cmd.common().clone();
    if let Some(j) = common.jobs {
        // Fails harmlessly if a pool already exists (e.g. repeated calls in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
    let jobs = common.jobs.unwrap_or(1);
    let out = common.out.as_path();
    write_run_lock(out, &cfg)?;

    match cmd {
        Command::PhantomGen { n, .. } => {
            let per = cfg.phantom.volumes_per_patient;
            if n == 0 || n % per != 0 {
                return Err(Error::Config(format!("--n {n} is not a positive multiple of phantom_volumes_per_patient = {per}")));
            }
            let m = generate_dataset(&cfg.dataset_options(n / per), out)?;
            info!("wrote {} volumes of {} patients to {}", m.entries.len(), n / per, out.display());
        }
        Command::Train { fold, .. } => {
            let (m, samples) = load(&cfg)?;
            let idx: Vec<usize> = match fold {
                Some(f) => {
                    fold_list(&[f], cfg.folds)?;
                    split_kfold_grouped(&m, cfg.folds, cfg.seed)?.train_indices(f)
                }
                None => (0..samples.len()).collect(),
            };
            let set: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let outcome = train(&cfg, &set, &SeededRng::new(cfg.seed))?;
            let curve: String = std::iter::once("epoch,loss\n".to_string())
                .chain(outcome.loss_curve.iter().enumerate().map(|(e, l)| format!("{e},{l:.8}\n")))
                .collect();
            write_atomic(&out.join("loss.csv"), curve.as_bytes())?;
            for p in outcome.model.save(out)? {
                info!("saved {}", p.display());
            }
        }
        Command::Eval { checkpoint, fold, .. } => {
            let model = TrainedModel::load(&checkpoint)?;
            let (m, samples) = load(&cfg)?;
            let idx: Vec<usize> = match fold {
                Some(f) => {
                    fold_list(&[f], cfg.folds)?;
                    split_kfold_grouped(&m, cfg.folds, cfg.seed)?.test_indices(f)
                }
                None => (0..samples.len()).collect(),
            };
            let set: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let ev = evaluate(&model, &set)?;
            write_atomic(&out.join("report.csv"), ev.report.to_csv().as_bytes())?;
            print!("{}", ev.report.to_csv());
        }
        Command::Xval { folds, .. } => {
            let (m, samples) = load(&cfg)?;
            let assignment = split_kfold_grouped(&m, cfg.folds, cfg.seed)?;
            let (_, summary) = cross_validate(&cfg, &samples, &assignment, &fold_list(&folds, cfg.folds)?, Some(out), jobs)?;
            print!("{}", stdplane::harness::summary_csv(&summary));
        }
        Command::Ablate { which, folds, .. } => {
            let which: Ablation = which.parse()?;
            let (m, samples) = load(&cfg)?;
            let assignment = split_kfold_grouped(&m, cfg.folds, cfg.seed)?;
            let table = ablation_driver(which, &cfg, &samples, &assignment, &fold_list(&folds, cfg.folds)?, Some(out), jobs)?;
            print!("{}", table.to_csv());
        }
        Command::Search { what, fold, .. } => {
            let (m, samples) = load(&cfg)?;
            fold_list(&[fold], cfg.folds)?;
            let assignment = split_kfold_grouped(&m, cfg.folds, cfg.seed)?;
            let text = match what.as_str() {
                "hyperparams" => {
                    let r = hyperparam_search(&cfg, &samples, &assignment, fold, &SearchSpace::default())?;
                    let mut s = String::from("lr,lr_decay,lr_step,momentum,batch_size,score\n");
                    for (h, score) in &r.trials {
                        s += &format!("{},{},{},{},{},{score:.6}\n", h.lr, h.lr_decay, h.lr_step, h.momentum, h.batch_size);
                    }
                    s
                }
                "weights" => {
                    let r = weight_grid_search(&cfg, &samples, &assignment, fold)?;
                    let mut s = String::from("alpha,beta,gamma,score\n");
                    for (w, score) in &r.trials {
                        s += &format!("{},{},{},{score:.6}\n", w.alpha, w.beta, w.gamma);
                    }
                    s
                }
                other => return Err(Error::Config(format!("unknown search '{other}' (expected hyperparams or weights)"))),
            };
            write_atomic(&out.join("search.csv"), text.as_bytes())?;
            print!("{text}");
        }
        Command::Infer { checkpoint, volume, output, .. } => {
            let model = TrainedModel::load(&checkpoint)?;
            let v = read_volume(&volume)?;
            let frames = model.predict(&v)?;
            let planes: Vec<NamedPlane> = model
                .mode
                .plane_names()
                .iter()
                .zip(frames)
                .map(|(n, frame)| NamedPlane { name: n.to_string(), frame })
                .collect();
            let stem = volume.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "volume".into());
            let path = output.unwrap_or_else(|| out.join(format!("{stem}.planes")));
            write_planes(&path, &planes)?;
            info!("wrote {}", path.display());
        }
        Command::MprExport { volume, planes, size, pixel_mm, .. } => {
            if size == 0 {
                return Err(Error::Config("--size must be positive".into()));
            }
            let v = read_volume(&volume)?;
            let e = v.extent();
            let px = pixel_mm.unwrap_or(e.x.max(e.y).max(e.z) / size as f64);
            if !(px > 0.0 && px.is_finite()) {
                return Err(Error::Config(format!("invalid pixel size {px}")));
            }
            for p in read_planes(&planes)? {
                let img = extract_mpr_slice(&v, &p.frame, (size, size), px, &cfg.window);
                let path = out.join(format!("{}.pgm", p.name));
                img.write_pgm(&path)?;
                info!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
