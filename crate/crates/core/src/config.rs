//! Experiment configuration as `key = value` text.
//!
//! Every key has a default; a config file only lists overrides. Unknown
//! keys are rejected and errors name the offending key and line.

use std::path::{Path, PathBuf};

use crate::augmentation::{AugmentConfig, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::RotationKind;
use crate::loss_metrics::{preset_weights, LossConfig, LossWeights, OrthoForm, WeightPreset};
use crate::model::NetworkConfig;
use crate::phantom::{DatasetOptions, Mode};
use crate::volume::WindowConfig;

/// How the loss weights are chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightChoice {
    /// Table of tuned values for the mode and network scheme.
    Preset(WeightPreset),
    Custom(LossWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub kind: RotationKind,
    pub grid: GridSpec,
    pub combined: bool,
    pub weights: WeightChoice,
    pub ortho: OrthoForm,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub channels: Vec<usize>,
    pub hidden: Vec<usize>,
    pub augment: AugmentConfig,
    pub window: WindowConfig,
    pub val_fraction: f64,
    pub search_trials: usize,
    pub grid_step: f64,
    pub manifest: Option<PathBuf>,
    pub phantom: PhantomKeys,
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomKeys {
    pub volumes_per_patient: usize,
    pub dims: usize,
    pub spacing_mm: f64,
    pub truncation_prob: f64,
    pub max_rot_deg: f64,
    pub max_shift_mm: f64,
}

impl Default for PhantomKeys {
    fn default() -> Self {
        PhantomKeys {
            volumes_per_patient: 2,
            dims: 64,
            spacing_mm: 2.5,
            truncation_prob: 0.2,
            max_rot_deg: 45.0,
            max_shift_mm: 10.0,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let net = NetworkConfig::default();
        ExperimentConfig {
            mode: Mode::Ankle,
            kind: RotationKind::SixD,
            grid: GridSpec::default(),
            combined: true,
            weights: WeightChoice::Preset(WeightPreset::Comb),
            ortho: OrthoForm::Cross,
            epochs: 400,
            lr: 0.01,
            lr_decay: 0.5,
            lr_step: 100,
            momentum: 0.9,
            batch_size: 8,
            folds: 5,
            seed: 0,
            channels: net.channels,
            hidden: net.hidden,
            augment: AugmentConfig::default(),
            window: WindowConfig::default(),
            val_fraction: 0.25,
            search_trials: 10,
            grid_step: 0.1,
            manifest: None,
            phantom: PhantomKeys::default(),
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("mode", "body region: ankle | calcaneus"),
    ("kind", "rotation encoding: sixd | quaternion | euler"),
    ("dims", "edge length of the network input grid in voxels"),
    ("spacing_mm", "voxel size of the network input grid"),
    ("combined", "true: one network for all planes; false: one network per plane"),
    ("weights", "loss weights: comb | opt-comb | three | alpha,beta,gamma"),
    ("ortho", "orthogonality penalty: cross | dot"),
    ("epochs", "training epochs"),
    ("lr", "initial learning rate"),
    ("lr_decay", "learning-rate factor applied every lr_step epochs"),
    ("lr_step", "epochs between learning-rate decays"),
    ("momentum", "SGD momentum"),
    ("batch_size", "samples per gradient step"),
    ("folds", "number of cross-validation folds"),
    ("seed", "master seed for all randomness"),
    ("channels", "conv channels per block, comma separated"),
    ("hidden", "hidden dense widths, comma separated"),
    ("aug_rot_deg", "max absolute rotation per axis in degrees"),
    ("aug_scale_min", "lower bound of the isotropic scale factor"),
    ("aug_scale_max", "upper bound of the isotropic scale factor"),
    ("aug_trans_mm", "max absolute translation per axis in mm"),
    ("aug_mirror_prob", "probability of mirroring along x"),
    ("aug_intensity_min", "lower bound of the intensity jitter factor"),
    ("aug_intensity_max", "upper bound of the intensity jitter factor"),
    ("clip_lo", "lower HU clip bound"),
    ("clip_hi", "upper HU clip bound"),
    ("window_gain", "steepness of the sigmoid window"),
    ("val_fraction", "share of the search fold's patients held out for validation"),
    ("search_trials", "random hyperparameter draws"),
    ("grid_step", "step of the loss weight grid"),
    ("manifest", "dataset manifest path"),
    ("phantom_volumes_per_patient", "volumes generated per synthetic patient"),
    ("phantom_dims", "edge length of generated volumes in voxels"),
    ("phantom_spacing_mm", "voxel size of generated volumes"),
    ("phantom_truncation_prob", "probability that a generated volume is truncated"),
    ("phantom_max_rot_deg", "max absolute pose rotation per axis in degrees"),
    ("phantom_max_shift_mm", "max absolute pose translation per axis in mm"),
];

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| bad_value(key, v)))
        .collect()
}

fn bad_value(key: &str, v: &str) -> Error {
    Error::Config(format!("invalid value for '{key}': '{v}'"))
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| bad_value(key, v))
        }
        match key {
            "mode" => self.mode = v.parse().map_err(|_| bad_value(key, v))?,
            "kind" => self.kind = v.parse().map_err(|_| bad_value(key, v))?,
            "dims" => self.grid.dims = num(key, v)?,
            "spacing_mm" => self.grid.spacing_mm = num(key, v)?,
            "combined" => self.combined = num(key, v)?,
            "weights" => {
                self.weights = match v {
                    "comb" => WeightChoice::Preset(WeightPreset::Comb),
                    "opt-comb" => WeightChoice::Preset(WeightPreset::OptComb),
                    "three" => WeightChoice::Preset(WeightPreset::Three(0)),
                    _ => WeightChoice::Custom(v.parse().map_err(|_| bad_value(key, v))?),
                }
            }
            "ortho" => self.ortho = v.parse().map_err(|_| bad_value(key, v))?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_decay" => self.lr_decay = num(key, v)?,
            "lr_step" => self.lr_step = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "folds" => self.folds = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "channels" => self.channels = parse_list(key, v)?,
            "hidden" => self.hidden = if v.is_empty() { Vec::new() } else { parse_list(key, v)? },
            "aug_rot_deg" => self.augment.rot_deg = num(key, v)?,
            "aug_scale_min" => self.augment.scale_min = num(key, v)?,
            "aug_scale_max" => self.augment.scale_max = num(key, v)?,
            "aug_trans_mm" => self.augment.trans_mm = num(key, v)?,
            "aug_mirror_prob" => self.augment.mirror_prob = num(key, v)?,
            "aug_intensity_min" => self.augment.intensity_min = num(key, v)?,
            "aug_intensity_max" => self.augment.intensity_max = num(key, v)?,
            "clip_lo" => self.window.clip_lo = num(key, v)?,
            "clip_hi" => self.window.clip_hi = num(key, v)?,
            "window_gain" => self.window.gain = num(key, v)?,
            "val_fraction" => self.val_fraction = num(key, v)?,
            "search_trials" => self.search_trials = num(key, v)?,
            "grid_step" => self.grid_step = num(key, v)?,
            "manifest" => self.manifest = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "phantom_volumes_per_patient" => self.phantom.volumes_per_patient = num(key, v)?,
            "phantom_dims" => self.phantom.dims = num(key, v)?,
            "phantom_spacing_mm" => self.phantom.spacing_mm = num(key, v)?,
            "phantom_truncation_prob" => self.phantom.truncation_prob = num(key, v)?,
            "phantom_max_rot_deg" => self.phantom.max_rot_deg = num(key, v)?,
            "phantom_max_shift_mm" => self.phantom.max_shift_mm = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        self.augment.grid = self.grid;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "mode" => self.mode.to_string(),
            "kind" => self.kind.to_string(),
            "dims" => self.grid.dims.to_string(),
            "spacing_mm" => self.grid.spacing_mm.to_string(),
            "combined" => self.combined.to_string(),
            "weights" => match self.weights {
                WeightChoice::Preset(WeightPreset::Comb) => "comb".into(),
                WeightChoice::Preset(WeightPreset::OptComb) => "opt-comb".into(),
                WeightChoice::Preset(WeightPreset::Three(_)) => "three".into(),
                WeightChoice::Custom(w) => format!("{},{},{}", w.alpha, w.beta, w.gamma),
            },
            "ortho" => self.ortho.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "lr_step" => self.lr_step.to_string(),
            "momentum" => self.momentum.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "folds" => self.folds.to_string(),
            "seed" => self.seed.to_string(),
            "channels" => list(&self.channels),
            "hidden" => list(&self.hidden),
            "aug_rot_deg" => self.augment.rot_deg.to_string(),
            "aug_scale_min" => self.augment.scale_min.to_string(),
            "aug_scale_max" => self.augment.scale_max.to_string(),
            "aug_trans_mm" => self.augment.trans_mm.to_string(),
            "aug_mirror_prob" => self.augment.mirror_prob.to_string(),
            "aug_intensity_min" => self.augment.intensity_min.to_string(),
            "aug_intensity_max" => self.augment.intensity_max.to_string(),
            "clip_lo" => self.window.clip_lo.to_string(),
            "clip_hi" => self.window.clip_hi.to_string(),
            "window_gain" => self.window.gain.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "search_trials" => self.search_trials.to_string(),
            "grid_step" => self.grid_step.to_string(),
            "manifest" => self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "phantom_volumes_per_patient" => self.phantom.volumes_per_patient.to_string(),
            "phantom_dims" => self.phantom.dims.to_string(),
            "phantom_spacing_mm" => self.phantom.spacing_mm.to_string(),
            "phantom_truncation_prob" => self.phantom.truncation_prob.to_string(),
            "phantom_max_rot_deg" => self.phantom.max_rot_deg.to_string(),
            "phantom_max_shift_mm" => self.phantom.max_shift_mm.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, n + 1, format!("expected 'key = value', got '{line}'")))?;
            self.set(k.trim(), v).map_err(|e| Error::parse(source, n + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Fully resolved config; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.window.validate()?;
        self.network_config().validate()?;
        if let WeightChoice::Custom(w) = self.weights {
            w.validate()?;
        }
        let positive = [
            ("epochs lr_step batch_size folds", self.lr_step.min(self.batch_size).min(self.folds) > 0),
            ("lr", self.lr > 0.0 && self.lr.is_finite()),
            ("lr_decay", self.lr_decay > 0.0 && self.lr_decay <= 1.0),
            ("momentum", (0.0..1.0).contains(&self.momentum)),
            ("val_fraction", self.val_fraction > 0.0 && self.val_fraction < 1.0),
            ("grid_step", self.grid_step > 0.0 && self.grid_step < 1.0),
            ("phantom_dims", self.phantom.dims >= 2 && self.phantom.spacing_mm > 0.0),
            ("phantom_volumes_per_patient", self.phantom.volumes_per_patient > 0),
            ("phantom_truncation_prob", (0.0..=1.0).contains(&self.phantom.truncation_prob)),
        ];
        for (key, ok) in positive {
            if !ok {
                return Err(Error::Config(format!("invalid value for '{key}'")));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config("'folds' must be at least 2".into()));
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            input_dims: self.grid.dims,
            channels: self.channels.clone(),
            hidden: self.hidden.clone(),
            kind: self.kind,
            n_planes: 3,
            combined: self.combined,
        }
    }

    /// Loss weights of the combined network, or of the network for
    /// `plane` when each plane has its own network (orthogonality off).
    pub fn loss_weights(&self, plane: usize) -> LossWeights {
        let w = match self.weights {
            WeightChoice::Preset(WeightPreset::Three(_)) if self.combined => preset_weights(self.mode, WeightPreset::Comb),
            WeightChoice::Preset(WeightPreset::Three(_)) => preset_weights(self.mode, WeightPreset::Three(plane)),
            WeightChoice::Preset(p) => preset_weights(self.mode, p),
            WeightChoice::Custom(w) => w,
        };
        if self.combined {
            w
        } else {
            LossWeights {
                alpha: w.alpha,
                beta: 1.0 - w.alpha,
                gamma: 0.0,
            }
        }
    }

    pub fn loss_config(&self, plane: usize) -> LossConfig {
        let n_planes = if self.combined { 3 } else { 1 };
        let mut c = LossConfig::new(self.loss_weights(plane), self.kind, n_planes);
        c.ortho = self.ortho;
        c
    }

    pub fn dataset_options(&self, n_patients: usize) -> DatasetOptions {
        let mut o = DatasetOptions::new(n_patients, self.phantom.volumes_per_patient, self.mode, self.seed);
        o.dims = self.phantom.dims;
        o.spacing_mm = self.phantom.spacing_mm;
        o.truncation_prob = self.phantom.truncation_prob;
        o.max_rot_deg = self.phantom.max_rot_deg;
        o.max_shift_mm = self.phantom.max_shift_mm;
        o
    }
}
