//! Training loss over encoded plane parameters and the weighted evaluation
//! metric over decoded planes.
//!
//! Prediction and target vectors are laid out per plane as
//! `[A/extent (3), rotation encoding]`, planes concatenated.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::{angle_deg, decode_normal_with_jacobian, PlaneFrame, RotationKind, Vec3};
use crate::phantom::Mode;

/// Weights of the rotation, translation and orthogonality terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self}")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("loss weights must sum to 1: {self}")));
        }
        Ok(())
    }

    /// Named presets: `<mode>-comb`, `<mode>-opt-comb`, `<mode>-three-<plane>`.
    pub fn preset(name: &str) -> Result<Self> {
        let unknown = || Error::Config(format!("unknown loss weight preset '{name}'"));
        let (mode, rest) = name.split_once('-').ok_or_else(unknown)?;
        let mode: Mode = mode.parse().map_err(|_| unknown())?;
        let preset = match rest {
            "comb" => WeightPreset::Comb,
            "opt-comb" => WeightPreset::OptComb,
            _ => {
                let plane = rest.strip_prefix("three-").ok_or_else(unknown)?;
                let index = match plane {
                    "axial" => 0,
                    "coronal" | "semicoronal" => 1,
                    "sagittal" => 2,
                    _ => return Err(unknown()),
                };
                WeightPreset::Three(index)
            }
        };
        Ok(preset_weights(mode, preset))
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.alpha, self.beta, self.gamma)
    }
}

impl FromStr for LossWeights {
    type Err = Error;
    /// Either a preset name or `alpha,beta,gamma`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() == 3 {
            let v: Vec<f64> = parts
                .iter()
                .map(|p| p.parse::<f64>().map_err(|_| Error::Config(format!("bad loss weight '{p}'"))))
                .collect::<Result<_>>()?;
            return LossWeights::new(v[0], v[1], v[2]);
        }
        LossWeights::preset(s)
    }
}

/// Tuned weight settings per network scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightPreset {
    /// Combined network, equal rotation and translation weight.
    Comb,
    /// Combined network, tuned weights including orthogonality.
    OptComb,
    /// Single-plane network for plane index 0..3 (axial, coronal, sagittal).
    Three(usize),
}

pub fn preset_weights(mode: Mode, preset: WeightPreset) -> LossWeights {
    let (a, b, g) = match (mode, preset) {
        (_, WeightPreset::Comb) => (0.5, 0.5, 0.0),
        (Mode::Calcaneus, WeightPreset::OptComb) => (0.6, 0.3, 0.1),
        (Mode::Ankle, WeightPreset::OptComb) => (0.2, 0.8, 0.0),
        (Mode::Calcaneus, WeightPreset::Three(i)) => [(0.2, 0.8, 0.0), (0.2, 0.8, 0.0), (0.6, 0.4, 0.0)][i.min(2)],
        (Mode::Ankle, WeightPreset::Three(i)) => [(0.6, 0.4, 0.0), (0.2, 0.8, 0.0), (0.8, 0.2, 0.0)][i.min(2)],
    };
    LossWeights { alpha: a, beta: b, gamma: g }
}

/// Penalty applied to each pair of predicted normals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OrthoForm {
    /// `1 − |n_i × n_j|`.
    #[default]
    Cross,
    /// `|n_i · n_j|`.
    Dot,
}

impl FromStr for OrthoForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(OrthoForm::Cross),
            "dot" => Ok(OrthoForm::Dot),
            other => Err(Error::Config(format!("unknown orthogonality form '{other}' (expected cross or dot)"))),
        }
    }
}

impl fmt::Display for OrthoForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrthoForm::Cross => "cross",
            OrthoForm::Dot => "dot",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub kind: RotationKind,
    pub n_planes: usize,
    pub ortho: OrthoForm,
}

impl LossConfig {
    pub fn new(weights: LossWeights, kind: RotationKind, n_planes: usize) -> Self {
        LossConfig {
            weights,
            kind,
            n_planes,
            ortho: OrthoForm::Cross,
        }
    }

    pub fn per_plane_len(&self) -> usize {
        3 + self.kind.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub rotation: f64,
    pub translation: f64,
    pub orthogonality: f64,
    /// ∂total/∂pred.
    pub grad: Vec<f64>,
    /// Plane pairs skipped because a decoded normal was degenerate.
    pub degenerate_pairs: usize,
}

/// Euclidean distance and its gradient with respect to `a` (zero at the kink).
fn distance_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    let g = if n > 0.0 { diff.iter().map(|d| d / n).collect() } else { vec![0.0; diff.len()] };
    (n, g)
}

/// Weighted loss and its gradient with respect to `pred`.
pub fn loss(pred: &[f64], target: &[f64], cfg: &LossConfig) -> Result<LossOutput> {
    let stride = cfg.per_plane_len();
    let expected = stride * cfg.n_planes;
    if cfg.n_planes == 0 {
        return Err(Error::Precondition("loss needs at least one plane".into()));
    }
    for len in [pred.len(), target.len()] {
        if len != expected {
            return Err(Error::ShapeMismatch { expected: vec![expected], actual: vec![len] });
        }
    }
    let w = cfg.weights;
    let p_count = cfg.n_planes as f64;
    let mut grad = vec![0.0; expected];
    let mut rotation = 0.0;
    let mut translation = 0.0;

    for p in 0..cfg.n_planes {
        let base = p * stride;
        let (dt, gt) = distance_with_grad(&pred[base..base + 3], &target[base..base + 3]);
        translation += dt / p_count;
        for (k, g) in gt.iter().enumerate() {
            grad[base + k] += w.beta * g / p_count;
        }
        let (dr, gr) = distance_with_grad(&pred[base + 3..base + stride], &target[base + 3..base + stride]);
        rotation += dr / p_count;
        for (k, g) in gr.iter().enumerate() {
            grad[base + 3 + k] += w.alpha * g / p_count;
        }
    }

    let mut orthogonality = 0.0;
    let mut degenerate_pairs = 0;
    if cfg.n_planes > 1 {
        let normals: Vec<Option<(Vec3, Vec<Vec3>)>> = (0..cfg.n_planes)
            .map(|p| decode_normal_with_jacobian(cfg.kind, &pred[p * stride + 3..(p + 1) * stride]).ok())
            .collect();
        let pairs = cfg.n_planes * (cfg.n_planes - 1) / 2;
        let scale = w.gamma / pairs as f64;
        let mut dn = vec![Vec3::ZERO; cfg.n_planes];
        for i in 0..cfg.n_planes {
            for j in i + 1..cfg.n_planes {
                let (Some((ni, _)), Some((nj, _))) = (&normals[i], &normals[j]) else {
                    orthogonality += 1.0 / pairs as f64;
                    degenerate_pairs += 1;
                    continue;
                };
                let (value, gi, gj) = pair_penalty(*ni, *nj, cfg.ortho);
                orthogonality += value / pairs as f64;
                dn[i] += gi * scale;
                dn[j] += gj * scale;
            }
        }
        for (p, entry) in normals.iter().enumerate() {
            if let Some((_, jac)) = entry {
                for (k, col) in jac.iter().enumerate() {
                    grad[p * stride + 3 + k] += dn[p].dot(*col);
                }
            }
        }
    }

    let total = w.alpha * rotation + w.beta * translation + w.gamma * orthogonality;
    Ok(LossOutput {
        total,
        rotation,
        translation,
        orthogonality,
        grad,
        degenerate_pairs,
    })
}

/// Penalty for one pair of unit normals and its gradients.
fn pair_penalty(ni: Vec3, nj: Vec3, form: OrthoForm) -> (f64, Vec3, Vec3) {
    match form {
        OrthoForm::Cross => {
            let c = ni.cross(nj);
            let s = c.norm();
            if s == 0.0 {
                return (1.0, Vec3::ZERO, Vec3::ZERO);
            }
            let u = c * (1.0 / s);
            (1.0 - s, -(nj.cross(u)), -(u.cross(ni)))
        }
        OrthoForm::Dot => {
            let d = ni.dot(nj);
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (d.abs(), nj * sign, ni * sign)
        }
    }
}

/// Errors of one predicted plane against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PlaneErrors {
    /// Center offset along the ground-truth normal, mm.
    pub d: f64,
    /// Angle between normals, degrees.
    pub eps_n: f64,
    /// Mean angle of the in-plane axes, degrees.
    pub eps_i: f64,
}

impl PlaneErrors {
    pub fn score(&self) -> f64 {
        score(self.d, self.eps_n, self.eps_i)
    }
}

pub fn plane_errors(pred: &PlaneFrame, gt: &PlaneFrame) -> PlaneErrors {
    PlaneErrors {
        d: (pred.center() - gt.center()).dot(gt.normal()).abs(),
        eps_n: angle_deg(pred.normal(), gt.normal()),
        eps_i: 0.5 * (angle_deg(pred.e_u(), gt.e_u()) + angle_deg(pred.e_v(), gt.e_v())),
    }
}

pub const SCORE_WEIGHTS: [f64; 3] = [0.2, 0.6, 0.2];

/// Weighted error score (lower is better).
pub fn score(d: f64, eps_n: f64, eps_i: f64) -> f64 {
    SCORE_WEIGHTS[0] * d + SCORE_WEIGHTS[1] * eps_n + SCORE_WEIGHTS[2] * eps_i
}

pub fn median(values: &mut [f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values"));
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Ok(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Componentwise median.
pub fn median_errors(samples: &[PlaneErrors]) -> Result<PlaneErrors> {
    if samples.is_empty() {
        return Err(Error::Empty("no plane errors to aggregate"));
    }
    let col = |f: fn(&PlaneErrors) -> f64| median(&mut samples.iter().map(f).collect::<Vec<_>>());
    Ok(PlaneErrors {
        d: col(|e| e.d)?,
        eps_n: col(|e| e.eps_n)?,
        eps_i: col(|e| e.eps_i)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub plane: String,
    pub errors: PlaneErrors,
}

impl ReportRow {
    pub fn score(&self) -> f64 {
        self.errors.score()
    }
}

/// Per-plane median rows followed by a `mean` row.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "plane,d_mm,eps_n_deg,eps_i_deg,score";

impl Report {
    /// Builds the mean row from the given per-plane rows.
    pub fn from_plane_rows(mut rows: Vec<ReportRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("report without planes"));
        }
        let n = rows.len() as f64;
        let mean = PlaneErrors {
            d: rows.iter().map(|r| r.errors.d).sum::<f64>() / n,
            eps_n: rows.iter().map(|r| r.errors.eps_n).sum::<f64>() / n,
            eps_i: rows.iter().map(|r| r.errors.eps_i).sum::<f64>() / n,
        };
        rows.push(ReportRow {
            plane: "mean".into(),
            errors: mean,
        });
        Ok(Report { rows })
    }

    pub fn mean(&self) -> &PlaneErrors {
        &self.rows.last().expect("report has a mean row").errors
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let e = r.errors;
            s.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", r.plane, e.d, e.eps_n, e.eps_i, r.score()));
        }
        s
    }
}

/// Aggregates `per_volume[v][p]` (volume `v`, plane `p`) by median per plane.
pub fn aggregate_errors(per_volume: &[Vec<PlaneErrors>], plane_names: &[&str]) -> Result<Report> {
    if per_volume.is_empty() {
        return Err(Error::Empty("no evaluated volumes"));
    }
    let rows = plane_names
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let column: Vec<PlaneErrors> = per_volume
                .iter()
                .map(|v| {
                    v.get(p).copied().ok_or(Error::ShapeMismatch {
                        expected: vec![plane_names.len()],
                        actual: vec![v.len()],
                    })
                })
                .collect::<Result<_>>()?;
            Ok(ReportRow {
                plane: name.to_string(),
                errors: median_errors(&column)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Report::from_plane_rows(rows)
}
