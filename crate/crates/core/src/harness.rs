//! Cross-validation, training, evaluation, searches and ablation drivers.
//!
//! Results land in `<out>/fold_<f>/report.csv` (plus checkpoints and the
//! loss curve) and `<out>/summary.csv`; every file is written atomically.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::augmentation::{augment_sample, decode_targets, encode_targets, prepare_input, GridSpec};
use crate::config::{ExperimentConfig, WeightChoice};
use crate::error::{Error, Result};
use crate::geometry::{read_planes, PlaneFrame, RotMat3, RotationKind};
use crate::io::write_atomic;
use crate::loss_metrics::{aggregate_errors, loss, plane_errors, LossWeights, PlaneErrors, Report, WeightPreset};
use crate::model::{lr_schedule, sgd_momentum_step, Checkpoint, Network, SgdState};
use crate::phantom::{Manifest, Mode, OriginClass};
use crate::rng::{uniform, SeededRng};
use crate::volume::{read_volume, Volume};

/// One annotated volume in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Manifest path, used as the volume's identity.
    pub id: String,
    pub patient_id: u32,
    pub class: OriginClass,
    pub volume: Volume<i16>,
    pub planes: Vec<PlaneFrame>,
    pub plane_names: Vec<String>,
}

/// Loads every manifest entry with its annotation file, in manifest order.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<Sample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let volume = read_volume(&path)?;
            let named = read_planes(&path.with_extension("planes"))?;
            if named.len() != 3 {
                return Err(Error::InvalidVolume(format!("{}: expected 3 planes, found {}", path.display(), named.len())));
            }
            Ok(Sample {
                id: e.path.display().to_string(),
                patient_id: e.patient_id,
                class: e.class,
                volume,
                planes: named.iter().map(|p| p.frame).collect(),
                plane_names: named.into_iter().map(|p| p.name).collect(),
            })
        })
        .collect()
}

/// Fold index per manifest entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Class of a patient: the most frequent class among its volumes, ties to
/// the lower class.
pub fn patient_classes(patients: impl IntoIterator<Item = (u32, OriginClass)>) -> BTreeMap<u32, OriginClass> {
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (p, c) in patients {
        counts.entry(p).or_default()[c.index()] += 1;
    }
    counts
        .into_iter()
        .map(|(p, n)| {
            let best = (0..3).fold(0, |b, i| if n[i] > n[b] { i } else { b });
            (p, OriginClass::ALL[best])
        })
        .collect()
}

/// Stratified grouped split. Patients of each class are shuffled and dealt
/// round-robin, the dealing position carrying over between classes, so
/// per-class and total patient counts differ by at most one between folds.
pub fn split_kfold_grouped(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    split_entries(manifest.entries.iter().map(|e| (e.patient_id, e.class)).collect(), k, seed)
}

fn split_entries(entries: Vec<(u32, OriginClass)>, k: usize, seed: u64) -> Result<FoldAssignment> {
    let classes = patient_classes(entries.iter().copied());
    if k < 2 || classes.len() < k {
        return Err(Error::Config(format!("{} patients cannot form {k} folds", classes.len())));
    }
    let rng = SeededRng::new(seed);
    let mut fold_of = BTreeMap::new();
    let mut next = 0;
    for class in OriginClass::ALL {
        let mut ids: Vec<u32> = classes.iter().filter(|(_, &c)| c == class).map(|(&p, _)| p).collect();
        ids.shuffle(&mut rng.stream("kfold", class.index() as u64));
        for p in ids {
            fold_of.insert(p, next % k);
            next += 1;
        }
    }
    Ok(FoldAssignment {
        k,
        folds: entries.iter().map(|(p, _)| fold_of[p]).collect(),
    })
}

/// Networks plus what is needed to turn their outputs into planes.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub mode: Mode,
    pub kind: RotationKind,
    pub grid: GridSpec,
    pub window: crate::volume::WindowConfig,
    /// One combined network, or one network per plane.
    pub networks: Vec<Network<f32>>,
}

impl TrainedModel {
    pub fn combined(&self) -> bool {
        self.networks.len() == 1
    }

    /// Raw concatenated outputs for a network-ready input.
    pub fn raw_outputs(&self, input: &[f32]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for n in &self.networks {
            out.extend(n.infer(input)?.into_iter().map(|v| v as f64));
        }
        Ok(out)
    }

    /// Predicted planes; an undecodable rotation falls back to identity.
    pub fn predict(&self, volume: &Volume<i16>) -> Result<Vec<PlaneFrame>> {
        let input = prepare_input(volume, self.grid, &self.window)?;
        let out = self.raw_outputs(&input)?;
        Ok(decode_planes(&out, self.grid.extent_mm(), self.kind))
    }

    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        self.networks
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut meta = BTreeMap::new();
                meta.insert("mode".to_string(), self.mode.to_string());
                meta.insert("grid_dims".to_string(), self.grid.dims.to_string());
                meta.insert("grid_spacing_mm".to_string(), self.grid.spacing_mm.to_string());
                meta.insert("clip_lo".to_string(), self.window.clip_lo.to_string());
                meta.insert("clip_hi".to_string(), self.window.clip_hi.to_string());
                meta.insert("window_gain".to_string(), self.window.gain.to_string());
                meta.insert("plane_index".to_string(), i.to_string());
                Checkpoint { network: n.clone(), meta }
            })
            .collect()
    }

    /// Writes `model_<i>.ckpt` files into `dir` and returns their paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        self.checkpoints()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = dir.join(format!("model_{i}.ckpt"));
                c.save(&p)?;
                Ok(p)
            })
            .collect()
    }

    /// Rebuilds a model from one combined or three per-plane checkpoints.
    pub fn load(paths: &[PathBuf]) -> Result<Self> {
        let mut cks: Vec<(usize, Checkpoint)> = Vec::new();
        for p in paths {
            let c = Checkpoint::load(p)?;
            let idx = meta_value(&c, "plane_index", p)?;
            cks.push((idx, c));
        }
        cks.sort_by_key(|(i, _)| *i);
        let first = &cks.first().ok_or(Error::Empty("no checkpoints given"))?.1;
        let src = &paths[0];
        let combined = first.network.config().combined;
        if (combined && cks.len() != 1) || (!combined && cks.len() != first.network.config().n_planes) {
            return Err(Error::Config(format!("got {} checkpoint(s) for a {} model", cks.len(), if combined { "combined" } else { "per-plane" })));
        }
        let mode: Mode = first.meta.get("mode").ok_or_else(|| Error::parse(src, 1, "missing meta.mode"))?.parse()?;
        let grid = GridSpec::new(meta_value(first, "grid_dims", src)?, meta_value(first, "grid_spacing_mm", src)?);
        let window = crate::volume::WindowConfig {
            clip_lo: meta_value(first, "clip_lo", src)?,
            clip_hi: meta_value(first, "clip_hi", src)?,
            gain: meta_value(first, "window_gain", src)?,
        };
        Ok(TrainedModel {
            mode,
            kind: first.network.config().kind,
            grid,
            window,
            networks: cks.into_iter().map(|(_, c)| c.network).collect(),
        })
    }
}

fn meta_value<T: std::str::FromStr>(c: &Checkpoint, key: &str, src: &Path) -> Result<T> {
    c.meta
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse(src, 1, format!("missing or invalid meta.{key}")))
}

/// Decodes concatenated per-plane outputs; degenerate rotations become the
/// identity so evaluation can still score the translation.
pub fn decode_planes(out: &[f64], extent_mm: f64, kind: RotationKind) -> Vec<PlaneFrame> {
    let stride = 3 + kind.len();
    out.chunks(stride)
        .map(|chunk| match decode_targets(chunk, extent_mm, kind) {
            Ok(mut v) => v.remove(0),
            Err(e) => {
                warn!("undecodable prediction ({e}); using identity rotation");
                let mut fallback = encode_targets(&[PlaneFrame::from_rotation(Default::default(), &RotMat3::IDENTITY).expect("identity")], extent_mm, kind);
                fallback[..3].copy_from_slice(&chunk[..3]);
                decode_targets(&fallback, extent_mm, kind).expect("identity decodes").remove(0)
            }
        })
        .collect()
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Mean training loss per epoch (over samples and networks).
    pub loss_curve: Vec<f64>,
}

/// Trains from scratch on `samples` with fresh augmentations every epoch.
pub fn train(cfg: &ExperimentConfig, samples: &[&Sample], seed: &SeededRng) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples"));
    }
    let net_cfg = cfg.network_config();
    let n_nets = if cfg.combined { 1 } else { 3 };
    let mut networks: Vec<Network<f32>> = (0..n_nets)
        .map(|i| Network::new(net_cfg.clone(), &seed.child("network", i as u64)))
        .collect::<Result<_>>()?;
    let mut states: Vec<SgdState<f32>> = vec![SgdState::default(); n_nets];
    let loss_cfgs: Vec<_> = (0..n_nets).map(|i| cfg.loss_config(i)).collect();
    let stride = 3 + cfg.kind.len();
    let mut augment = cfg.augment;
    augment.grid = cfg.grid;

    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.lr_decay, cfg.lr_step, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed.stream("shuffle", epoch as u64));
        let aug_rng = seed.child("augment", epoch as u64);
        let mut epoch_loss = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let augmented = batch
                .par_iter()
                .map(|&i| {
                    let s = samples[i];
                    augment_sample(&s.volume, &s.planes, &augment, &cfg.window, cfg.kind, &aug_rng, i as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            let inputs: Vec<&[f32]> = augmented.iter().map(|a| a.input.as_slice()).collect();
            for (n, net) in networks.iter_mut().enumerate() {
                let lc = &loss_cfgs[n];
                let losses = net.batch_gradient(&inputs, |j, out| {
                    let t = &augmented[j].target_vector;
                    let target = if n_nets == 1 { &t[..] } else { &t[n * stride..(n + 1) * stride] };
                    let pred: Vec<f64> = out.iter().map(|&v| v as f64).collect();
                    let l = loss(&pred, target, lc)?;
                    Ok((l.total, l.grad.iter().map(|&g| g as f32).collect()))
                })?;
                let batch_loss: f64 = losses.iter().sum();
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no, lr });
                }
                epoch_loss += batch_loss / n_nets as f64;
                let (params, grads) = net.params_and_grads();
                sgd_momentum_step(params, grads, &mut states[n], lr, cfg.momentum)?;
                // ReLU's max() hides NaN, so check the weights themselves.
                if !net.params().iter().all(|p| p.is_finite()) {
                    return Err(Error::NonFiniteLoss { epoch, batch: batch_no, lr });
                }
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        info!("epoch {epoch}: loss {mean:.5} (lr {lr:.2e})");
        curve.push(mean);
    }
    Ok(TrainOutcome {
        model: TrainedModel {
            mode: cfg.mode,
            kind: cfg.kind,
            grid: cfg.grid,
            window: cfg.window,
            networks,
        },
        loss_curve: curve,
    })
}

/// Errors of a set of predictions against their ground truth.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: Report,
    pub per_volume: Vec<Vec<PlaneErrors>>,
    /// Seconds per volume for input preparation and inference.
    pub infer_seconds: Vec<f64>,
}

pub fn evaluate_predictions(predicted: &[Vec<PlaneFrame>], truth: &[Vec<PlaneFrame>], plane_names: &[&str]) -> Result<(Report, Vec<Vec<PlaneErrors>>)> {
    let per_volume: Vec<Vec<PlaneErrors>> = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| plane_errors(a, b)).collect())
        .collect();
    Ok((aggregate_errors(&per_volume, plane_names)?, per_volume))
}

/// Test-time evaluation: centered resample, no augmentation.
pub fn evaluate(model: &TrainedModel, samples: &[&Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("no test samples"));
    }
    let mut predicted = Vec::with_capacity(samples.len());
    let mut infer_seconds = Vec::with_capacity(samples.len());
    for s in samples {
        let t = Instant::now();
        predicted.push(model.predict(&s.volume)?);
        infer_seconds.push(t.elapsed().as_secs_f64());
    }
    let truth: Vec<Vec<PlaneFrame>> = samples.iter().map(|s| s.planes.clone()).collect();
    let names: Vec<&str> = samples[0].plane_names.iter().map(String::as_str).collect();
    let (report, per_volume) = evaluate_predictions(&predicted, &truth, &names)?;
    let mean_t = infer_seconds.iter().sum::<f64>() / infer_seconds.len() as f64;
    info!("inference: {:.4} s per volume", mean_t);
    Ok(Evaluation {
        report,
        per_volume,
        infer_seconds,
    })
}

/// One trained and evaluated fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub report: Report,
    pub loss_curve: Vec<f64>,
    pub mean_infer_seconds: f64,
    pub per_volume: Vec<Vec<PlaneErrors>>,
}

/// Trains on all folds but `fold` and evaluates on `fold`.
pub fn run_fold(cfg: &ExperimentConfig, samples: &[Sample], assignment: &FoldAssignment, fold: usize, out: Option<&Path>) -> Result<FoldResult> {
    let train_idx = assignment.train_indices(fold);
    let test_idx = assignment.test_indices(fold);
    check_partition(samples, &train_idx, &test_idx)?;
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let test_set: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
    info!("fold {fold}: {} training / {} test volumes", train_set.len(), test_set.len());
    let seed = SeededRng::new(cfg.seed).child("fold", fold as u64);
    let outcome = train(cfg, &train_set, &seed)?;
    let eval = evaluate(&outcome.model, &test_set)?;
    if let Some(dir) = out {
        let d = dir.join(format!("fold_{fold}"));
        write_atomic(&d.join("report.csv"), eval.report.to_csv().as_bytes())?;
        let curve: String = std::iter::once("epoch,loss\n".to_string())
            .chain(outcome.loss_curve.iter().enumerate().map(|(e, l)| format!("{e},{l:.8}\n")))
            .collect();
        write_atomic(&d.join("loss.csv"), curve.as_bytes())?;
        outcome.model.save(&d)?;
    }
    Ok(FoldResult {
        fold,
        mean_infer_seconds: eval.infer_seconds.iter().sum::<f64>() / eval.infer_seconds.len() as f64,
        report: eval.report,
        loss_curve: outcome.loss_curve,
        per_volume: eval.per_volume,
    })
}

/// Fails unless training and test volumes and patients are disjoint.
pub fn check_partition(samples: &[Sample], train: &[usize], test: &[usize]) -> Result<()> {
    let ids = |idx: &[usize]| -> (BTreeSet<&str>, BTreeSet<u32>) {
        (idx.iter().map(|&i| samples[i].id.as_str()).collect(), idx.iter().map(|&i| samples[i].patient_id).collect())
    };
    let (train_v, train_p) = ids(train);
    let (test_v, test_p) = ids(test);
    if !train_v.is_disjoint(&test_v) || !train_p.is_disjoint(&test_p) {
        return Err(Error::Precondition("training and test folds share data".into()));
    }
    Ok(())
}

/// Mean and standard deviation (n − 1) of the fold results.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

pub const SUMMARY_HEADER: &str = "d_mm_mean,d_mm_std,eps_n_deg_mean,eps_n_deg_std,eps_i_deg_mean,eps_i_deg_std,score_mean,score_std";

impl SummaryRow {
    pub fn from_errors(label: &str, rows: &[PlaneErrors]) -> Self {
        let cols: Vec<[f64; 4]> = rows.iter().map(|e| [e.d, e.eps_n, e.eps_i, e.score()]).collect();
        let n = cols.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for c in 0..4 {
            mean[c] = cols.iter().map(|r| r[c]).sum::<f64>() / n;
            if cols.len() > 1 {
                std[c] = (cols.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            }
        }
        SummaryRow {
            label: label.to_string(),
            mean,
            std,
        }
    }

    pub fn csv_fields(&self) -> String {
        (0..4).map(|c| format!("{:.6},{:.6}", self.mean[c], self.std[c])).collect::<Vec<_>>().join(",")
    }
}

/// Per-plane and mean rows across folds.
pub fn summarize(results: &[FoldResult]) -> Result<Vec<SummaryRow>> {
    let first = results.first().ok_or(Error::Empty("no fold results"))?;
    Ok(first
        .report
        .rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            let errs: Vec<PlaneErrors> = results.iter().map(|f| f.report.rows[r].errors).collect();
            SummaryRow::from_errors(&row.plane, &errs)
        })
        .collect())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = format!("plane,{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.label, r.csv_fields()));
    }
    s
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} jobs: {e}")))?;
    Ok(pool.install(f))
}

/// Runs the given folds (in parallel with `jobs > 1`) and writes
/// `summary.csv` when `out` is given.
pub fn cross_validate(cfg: &ExperimentConfig, samples: &[Sample], assignment: &FoldAssignment, folds: &[usize], out: Option<&Path>, jobs: usize) -> Result<(Vec<FoldResult>, Vec<SummaryRow>)> {
    let results = with_jobs(jobs, || {
        folds
            .par_iter()
            .map(|&f| run_fold(cfg, samples, assignment, f, out))
            .collect::<Result<Vec<_>>>()
    })??;
    let summary = summarize(&results)?;
    if let Some(dir) = out {
        write_atomic(&dir.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    }
    Ok((results, summary))
}

/// Splits the training part of `fold` into (train, validation) by patient.
pub fn validation_split(samples: &[Sample], assignment: &FoldAssignment, fold: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let train = assignment.train_indices(fold);
    let mut patients: Vec<u32> = train.iter().map(|&i| samples[i].patient_id).collect::<BTreeSet<_>>().into_iter().collect();
    patients.shuffle(&mut SeededRng::new(seed).stream("validation", fold as u64));
    let n_val = ((patients.len() as f64 * fraction).round() as usize).clamp(1, patients.len().saturating_sub(1).max(1));
    let val: BTreeSet<u32> = patients[..n_val].iter().copied().collect();
    train.into_iter().partition(|&i| !val.contains(&samples[i].patient_id))
}

/// Trains on `train` and returns the validation report.
fn validate_once(cfg: &ExperimentConfig, samples: &[Sample], train_idx: &[usize], val_idx: &[usize], seed: &SeededRng) -> Result<Report> {
    check_partition(samples, train_idx, val_idx)?;
    let t: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let v: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();
    let outcome = train(cfg, &t, seed)?;
    Ok(evaluate(&outcome.model, &v)?.report)
}

/// Bounds of the random hyperparameter search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchSpace {
    /// Sampled log-uniformly.
    pub lr: (f64, f64),
    pub lr_decay: (f64, f64),
    pub lr_step: (usize, usize),
    pub momentum: (f64, f64),
    pub batch_size: (usize, usize),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: (1e-4, 1e-1),
            lr_decay: (0.1, 0.9),
            lr_step: (50, 200),
            momentum: (0.8, 0.99),
            batch_size: (4, 16),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Hyperparams {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.lr = self.lr;
        cfg.lr_decay = self.lr_decay;
        cfg.lr_step = self.lr_step;
        cfg.momentum = self.momentum;
        cfg.batch_size = self.batch_size;
    }
}

impl SearchSpace {
    pub fn sample(&self, rng: &mut impl Rng) -> Hyperparams {
        Hyperparams {
            lr: uniform(rng, self.lr.0.ln(), self.lr.1.ln()).exp(),
            lr_decay: uniform(rng, self.lr_decay.0, self.lr_decay.1),
            lr_step: rng.random_range(self.lr_step.0..=self.lr_step.1),
            momentum: uniform(rng, self.momentum.0, self.momentum.1),
            batch_size: rng.random_range(self.batch_size.0..=self.batch_size.1),
        }
    }
}

/// Scored candidates of a search, in draw order.
#[derive(Clone, Debug)]
pub struct SearchResult<T> {
    pub best: T,
    pub best_score: f64,
    pub trials: Vec<(T, f64)>,
}

fn argmin<T: Copy>(trials: Vec<(T, f64)>) -> Result<SearchResult<T>> {
    let (best, best_score) = trials
        .iter()
        .copied()
        .fold(None, |acc: Option<(T, f64)>, t| match acc {
            Some(a) if a.1 <= t.1 => Some(a),
            _ => Some(t),
        })
        .ok_or(Error::Empty("search without trials"))?;
    Ok(SearchResult { best, best_score, trials })
}

/// Random search scored on a held-out quarter of the training part of `fold`.
/// `score_fn` lets tests replace training with a cheap oracle.
pub fn hyperparam_search_with<F>(space: &SearchSpace, n_trials: usize, seed: u64, mut score_fn: F) -> Result<SearchResult<Hyperparams>>
where
    F: FnMut(&Hyperparams, usize) -> Result<f64>,
{
    let rng = SeededRng::new(seed);
    let trials = (0..n_trials)
        .map(|t| {
            let h = space.sample(&mut rng.stream("hyperparams", t as u64));
            let s = score_fn(&h, t)?;
            info!("trial {t}: {h:?} -> score {s:.4}");
            Ok((h, s))
        })
        .collect::<Result<Vec<_>>>()?;
    argmin(trials)
}

pub fn hyperparam_search(cfg: &ExperimentConfig, samples: &[Sample], assignment: &FoldAssignment, fold: usize, space: &SearchSpace) -> Result<SearchResult<Hyperparams>> {
    let (train, val) = validation_split(samples, assignment, fold, cfg.val_fraction, cfg.seed);
    hyperparam_search_with(space, cfg.search_trials, cfg.seed, |h, t| {
        let mut c = cfg.clone();
        h.apply(&mut c);
        let seed = SeededRng::new(cfg.seed).child("search", t as u64);
        Ok(validate_once(&c, samples, &train, &val, &seed)?.mean().score())
    })
}

/// Feasible loss weights on a grid: `α, β ∈ {step, …, 1 − step}` with
/// `γ = 1 − α − β ≥ 0` for a combined network, `(α, 1 − α, 0)` per plane.
pub fn weight_grid(step: f64, combined: bool) -> Vec<LossWeights> {
    let n = (1.0 / step).round() as usize;
    let round = |x: f64| (x * 1e9).round() / 1e9;
    let mut out = Vec::new();
    for a in 1..n {
        if !combined {
            out.push(LossWeights { alpha: round(a as f64 * step), beta: round(1.0 - a as f64 * step), gamma: 0.0 });
            continue;
        }
        for b in 1..n.saturating_sub(a) + 1 {
            let (alpha, beta) = (round(a as f64 * step), round(b as f64 * step));
            out.push(LossWeights { alpha, beta, gamma: round((1.0 - alpha - beta).max(0.0)) });
        }
    }
    out
}

pub fn weight_grid_search_with<F>(step: f64, combined: bool, mut score_fn: F) -> Result<SearchResult<LossWeights>>
where
    F: FnMut(&LossWeights, usize) -> Result<f64>,
{
    let trials = weight_grid(step, combined)
        .into_iter()
        .enumerate()
        .map(|(t, w)| Ok((w, score_fn(&w, t)?)))
        .collect::<Result<Vec<_>>>()?;
    argmin(trials)
}

/// Grid search over loss weights, validated like [`hyperparam_search`].
/// For per-plane networks every plane shares the candidate `(α, 1 − α, 0)`.
pub fn weight_grid_search(cfg: &ExperimentConfig, samples: &[Sample], assignment: &FoldAssignment, fold: usize) -> Result<SearchResult<LossWeights>> {
    let (train, val) = validation_split(samples, assignment, fold, cfg.val_fraction, cfg.seed);
    weight_grid_search_with(cfg.grid_step, cfg.combined, |w, t| {
        let mut c = cfg.clone();
        c.weights = WeightChoice::Custom(*w);
        let seed = SeededRng::new(cfg.seed).child("weights", t as u64);
        let s = validate_once(&c, samples, &train, &val, &seed)?.mean().score();
        info!("weights {w}: score {s:.4}");
        Ok(s)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Representation,
    Resolution,
    CombinedVsSeparate,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" => Ok(Ablation::Representation),
            "resolution" => Ok(Ablation::Resolution),
            "combined" | "combined-vs-separate" => Ok(Ablation::CombinedVsSeparate),
            other => Err(Error::Config(format!("unknown ablation '{other}' (expected representation, resolution or combined-vs-separate)"))),
        }
    }
}

/// Named configurations compared by an ablation.
pub fn ablation_variants(which: Ablation, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match which {
        Ablation::Representation => RotationKind::ALL
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.kind = k;
                (k.name().to_string(), c)
            })
            .collect(),
        Ablation::Resolution => GridSpec::PRESETS
            .iter()
            .map(|&g| {
                let mut c = base.clone();
                c.grid = g;
                c.augment.grid = g;
                (format!("{}^3@{}mm", g.dims, g.spacing_mm), c)
            })
            .collect(),
        Ablation::CombinedVsSeparate => [
            ("three", false, WeightPreset::Three(0)),
            ("comb", true, WeightPreset::Comb),
            ("opt-comb", true, WeightPreset::OptComb),
        ]
        .into_iter()
        .map(|(name, combined, preset)| {
            let mut c = base.clone();
            c.combined = combined;
            c.weights = WeightChoice::Preset(preset);
            (name.to_string(), c)
        })
        .collect(),
    }
}

/// One row per variant: mean ± std of the fold mean rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<SummaryRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("variant,{SUMMARY_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}\n", r.label, r.csv_fields()));
        }
        s
    }

    pub fn score(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == variant).map(|r| r.mean[3])
    }
}

/// Cross-validates every variant over `folds`; writes
/// `<out>/<variant>/...` and `<out>/ablation.csv`.
pub fn ablation_driver(which: Ablation, base: &ExperimentConfig, samples: &[Sample], assignment: &FoldAssignment, folds: &[usize], out: Option<&Path>, jobs: usize) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(which, base) {
        let dir = out.map(|d| d.join(name.replace(['^', '@'], "_")));
        let (results, _) = cross_validate(&cfg, samples, assignment, folds, dir.as_deref(), jobs)?;
        let means: Vec<PlaneErrors> = results.iter().map(|r| *r.report.mean()).collect();
        let row = SummaryRow::from_errors(&name, &means);
        info!("{name}: score {:.3} ± {:.3}", row.mean[3], row.std[3]);
        rows.push(row);
    }
    let table = AblationTable { rows };
    if let Some(d) = out {
        write_atomic(&d.join("ablation.csv"), table.to_csv().as_bytes())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{canonical_planes, generate_dataset, ManifestEntry};

    fn manifest(classes: &[(u32, OriginClass)]) -> Manifest {
        Manifest {
            root: PathBuf::from("."),
            entries: classes
                .iter()
                .map(|&(p, c)| ManifestEntry {
                    path: PathBuf::from(format!("v{p}.vhdr")),
                    patient_id: p,
                    class: c,
                    mode: Mode::Ankle,
                })
                .collect(),
        }
    }

    #[test]
    fn ten_patients_five_folds() {
        let entries: Vec<_> = (0..20).map(|i| (i / 2, OriginClass::ALL[(i as usize / 2) % 3])).collect();
        let a = split_kfold_grouped(&manifest(&entries), 5, 1).unwrap();
        for f in 0..5 {
            let test = a.test_indices(f);
            assert_eq!(test.len(), 4);
            let patients: BTreeSet<u32> = test.iter().map(|&i| entries[i].0).collect();
            assert_eq!(patients.len(), 2);
        }
        assert_eq!(a, split_kfold_grouped(&manifest(&entries), 5, 1).unwrap());
    }

    #[test]
    fn too_few_patients() {
        let entries: Vec<_> = (0..8).map(|i| (i / 2, OriginClass::Metal)).collect();
        assert!(split_kfold_grouped(&manifest(&entries), 5, 1).is_err());
    }

    #[test]
    fn majority_class_per_patient() {
        let c = patient_classes([(1, OriginClass::NoMetal), (1, OriginClass::Metal), (2, OriginClass::MetalOutside), (2, OriginClass::MetalOutside), (2, OriginClass::Metal)]);
        assert_eq!(c[&1], OriginClass::Metal);
        assert_eq!(c[&2], OriginClass::MetalOutside);
    }

    #[test]
    fn weight_grid_counts() {
        let g = weight_grid(0.1, true);
        assert_eq!(g.len(), 45);
        assert_eq!(g.iter().filter(|w| w.gamma > 1e-9).count(), 36);
        assert!(g.iter().all(|w| w.validate().is_ok()));
        assert!(g.contains(&LossWeights::new(0.2, 0.8, 0.0).unwrap()));
        assert!(g.contains(&LossWeights::new(0.6, 0.3, 0.1).unwrap()));
        let per_plane = weight_grid(0.1, false);
        assert_eq!(per_plane.len(), 9);
        assert!(per_plane.iter().all(|w| w.gamma == 0.0 && w.validate().is_ok()));
    }

    #[test]
    fn searches_pick_the_minimum_deterministically() {
        let space = SearchSpace::default();
        let score = |h: &Hyperparams, _| Ok((h.lr.ln() - 0.01f64.ln()).abs() + h.momentum);
        let one = hyperparam_search_with(&space, 1, 3, score).unwrap();
        assert_eq!(one.trials.len(), 1);
        assert_eq!(one.best, one.trials[0].0);
        let a = hyperparam_search_with(&space, 12, 3, score).unwrap();
        let b = hyperparam_search_with(&space, 12, 3, score).unwrap();
        assert_eq!(a.best, b.best);
        assert!(a.trials.iter().all(|(_, s)| a.best_score <= *s));
        for (h, _) in &a.trials {
            assert!((1e-4..=1e-1).contains(&h.lr) && (4..=16).contains(&h.batch_size));
        }
        let w = weight_grid_search_with(0.1, true, |w, _| Ok((w.alpha - 0.6).abs() + (w.beta - 0.3).abs())).unwrap();
        assert_eq!(w.best, LossWeights::new(0.6, 0.3, 0.1).unwrap());
    }

    #[test]
    fn ablation_variant_sets() {
        let base = ExperimentConfig::default();
        let rep = ablation_variants(Ablation::Representation, &base);
        assert_eq!(rep.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["euler", "quaternion", "sixd"]);
        let res = ablation_variants(Ablation::Resolution, &base);
        let grids: Vec<(usize, f64)> = res.iter().map(|(_, c)| (c.grid.dims, c.grid.spacing_mm)).collect();
        assert_eq!(grids, [(64, 2.5), (72, 2.2), (128, 1.2)]);
        let cs = ablation_variants(Ablation::CombinedVsSeparate, &base);
        assert_eq!(cs.iter().map(|(_, c)| c.combined).collect::<Vec<_>>(), [false, true, true]);
        assert_eq!(cs[2].1.loss_weights(0), LossWeights::new(0.2, 0.8, 0.0).unwrap());
    }

    #[test]
    fn ground_truth_evaluates_to_zero() {
        let gt: Vec<PlaneFrame> = canonical_planes(Mode::Calcaneus, 25.0).into_iter().map(|p| p.frame).collect();
        for kind in RotationKind::ALL {
            let round_trip = decode_planes(&encode_targets(&gt, 158.4, kind), 158.4, kind);
            let (report, _) = evaluate_predictions(&[round_trip], &[gt.clone()], &["axial", "semicoronal", "sagittal"]).unwrap();
            assert_eq!(report.rows.len(), 4);
            for r in &report.rows {
                assert!(r.errors.d < 1e-6 && r.errors.eps_n < 1e-6 && r.errors.eps_i < 1e-6, "{kind}: {r:?}");
            }
        }
    }

    #[test]
    fn degenerate_prediction_still_decodes() {
        let planes = decode_planes(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 100.0, RotationKind::Quaternion);
        assert_eq!(planes.len(), 1);
        assert!((planes[0].center().x - 10.0).abs() < 1e-12);
    }

    fn tiny_setup(dir: &Path) -> (ExperimentConfig, Vec<Sample>) {
        let mut cfg = ExperimentConfig::default();
        for (k, v) in [
            ("dims", "16"),
            ("spacing_mm", "10"),
            ("channels", "2,4"),
            ("hidden", "8"),
            ("epochs", "2"),
            ("batch_size", "4"),
            ("phantom_dims", "20"),
            ("phantom_spacing_mm", "8"),
            ("folds", "3"),
            ("seed", "5"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let m = generate_dataset(&cfg.dataset_options(6), dir).unwrap();
        (cfg, load_samples(&m).unwrap())
    }

    #[test]
    fn zero_epochs_returns_initial_network() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, samples) = tiny_setup(dir.path());
        cfg.epochs = 0;
        let refs: Vec<&Sample> = samples.iter().collect();
        let seed = SeededRng::new(1);
        let out = train(&cfg, &refs, &seed).unwrap();
        let fresh: Network<f32> = Network::new(cfg.network_config(), &seed.child("network", 0)).unwrap();
        assert_eq!(out.model.networks[0].params(), fresh.params());
        assert!(out.loss_curve.is_empty());
    }

    #[test]
    fn fold_runs_are_reproducible_and_write_results() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, samples) = tiny_setup(&dir.path().join("data"));
        let m = Manifest::read(&dir.path().join("data/manifest.txt")).unwrap();
        let a = split_kfold_grouped(&m, cfg.folds, cfg.seed).unwrap();
        let out1 = dir.path().join("r1");
        let out2 = dir.path().join("r2");
        let (r1, s1) = cross_validate(&cfg, &samples, &a, &[0], Some(&out1), 1).unwrap();
        let (r2, s2) = cross_validate(&cfg, &samples, &a, &[0], Some(&out2), 1).unwrap();
        assert_eq!(r1[0].loss_curve, r2[0].loss_curve);
        assert_eq!(s1, s2);
        assert_eq!(r1[0].report.rows.len(), 4);
        assert_eq!(std::fs::read(out1.join("fold_0/model_0.ckpt")).unwrap(), std::fs::read(out2.join("fold_0/model_0.ckpt")).unwrap());
        assert!(out1.join("summary.csv").exists());
        let model = TrainedModel::load(&[out1.join("fold_0/model_0.ckpt")]).unwrap();
        let p = model.predict(&samples[0].volume).unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn per_plane_scheme_trains_three_networks() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, samples) = tiny_setup(dir.path());
        cfg.combined = false;
        cfg.set("weights", "three").unwrap();
        cfg.epochs = 1;
        let refs: Vec<&Sample> = samples.iter().collect();
        let out = train(&cfg, &refs, &SeededRng::new(2)).unwrap();
        assert_eq!(out.model.networks.len(), 3);
        assert!(out.model.networks.iter().all(|n| n.config().n_out() == 9));
        let eval = evaluate(&out.model, &refs[..2]).unwrap();
        assert_eq!(eval.report.rows.len(), 4);
        assert_eq!(eval.infer_seconds.len(), 2);
    }

    #[test]
    fn diverging_training_reports_where() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, samples) = tiny_setup(dir.path());
        cfg.lr = 1e30;
        cfg.epochs = 5;
        let refs: Vec<&Sample> = samples.iter().collect();
        match train(&cfg, &refs, &SeededRng::new(2)) {
            Err(Error::NonFiniteLoss { lr, .. }) => assert_eq!(lr, 1e30),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }
}
