//! Online spatial and intensity augmentation.
//!
//! One augmentation draw is folded into a single composite transform
//! `translate ∘ scale ∘ rotate ∘ mirror` (mirror applied first), the volume
//! is interpolated exactly once onto the output grid, and the plane labels
//! are carried through the same transform.

use log::warn;

pub use crate::rng::SeededRng;

use crate::error::{Error, Result};
use crate::geometry::{
    compose_transforms, decode_values, denormalize_translation, encode_rotation, normalize_translation,
    transform_plane, PlaneFrame, RigidTransform, RotMat3, RotationKind, Vec3,
};
use crate::rng::uniform;
use crate::volume::{intensity_jitter, Volume, WindowConfig};

/// Cubic network input grid: `dims³` voxels of `spacing_mm`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: usize,
    pub spacing_mm: f64,
}

impl GridSpec {
    /// The three evaluated input resolutions.
    pub const PRESETS: [GridSpec; 3] = [
        GridSpec { dims: 64, spacing_mm: 2.5 },
        GridSpec { dims: 72, spacing_mm: 2.2 },
        GridSpec { dims: 128, spacing_mm: 1.2 },
    ];

    pub const fn new(dims: usize, spacing_mm: f64) -> Self {
        GridSpec { dims, spacing_mm }
    }

    /// Edge length in mm; the regression targets are normalized by it.
    pub fn extent_mm(&self) -> f64 {
        self.dims as f64 * self.spacing_mm
    }

    pub fn voxel_count(&self) -> usize {
        self.dims * self.dims * self.dims
    }

    pub fn dims3(&self) -> [usize; 3] {
        [self.dims; 3]
    }

    pub fn spacing3(&self) -> Vec3 {
        Vec3::new(self.spacing_mm, self.spacing_mm, self.spacing_mm)
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::PRESETS[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Per-axis rotation half-range in degrees.
    pub rot_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Per-axis translation half-range in mm.
    pub trans_mm: f64,
    pub mirror_prob: f64,
    pub grid: GridSpec,
    pub intensity_min: f64,
    pub intensity_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_deg: 45.0,
            scale_min: 0.95,
            scale_max: 1.05,
            trans_mm: 12.0,
            mirror_prob: 0.5,
            grid: GridSpec::default(),
            intensity_min: 0.95,
            intensity_max: 1.05,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all: a plain centered resample onto `grid`.
    pub fn disabled(grid: GridSpec) -> Self {
        AugmentConfig {
            rot_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            trans_mm: 0.0,
            mirror_prob: 0.0,
            grid,
            intensity_min: 1.0,
            intensity_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=180.0).contains(&self.rot_deg) {
            return bad(format!("aug_rot_deg {} outside [0, 180]", self.rot_deg));
        }
        if !(0.9 <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.1) {
            return bad(format!(
                "scale range [{}, {}] must be ordered and inside [0.9, 1.1]",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.trans_mm >= 0.0 && self.trans_mm.is_finite()) {
            return bad(format!("aug_trans_mm {} must be >= 0", self.trans_mm));
        }
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return bad(format!("aug_mirror_prob {} outside [0, 1]", self.mirror_prob));
        }
        if !(0.0 < self.intensity_min && self.intensity_min <= self.intensity_max) {
            return bad(format!(
                "intensity range [{}, {}] must be positive and ordered",
                self.intensity_min, self.intensity_max
            ));
        }
        if self.grid.dims < 2 || !(self.grid.spacing_mm > 0.0) {
            return bad(format!("invalid grid {:?}", self.grid));
        }
        Ok(())
    }
}

/// One augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub transform: RigidTransform,
    pub mirror: bool,
    pub intensity_factor: f64,
    /// Z, Y, X rotation angles in degrees.
    pub angles_deg: [f64; 3],
    pub scale: f64,
    pub translation: Vec3,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation::from_parts(false, [0.0; 3], 1.0, Vec3::ZERO, 1.0)
    }

    pub fn from_parts(mirror: bool, angles_deg: [f64; 3], scale: f64, translation: Vec3, intensity_factor: f64) -> Self {
        let [rz, ry, rx] = angles_deg.map(f64::to_radians);
        let mut parts = Vec::with_capacity(4);
        if mirror {
            parts.push(RigidTransform::mirror_x());
        }
        parts.push(RigidTransform::rotation(&RotMat3::from_euler_zyx(rz, ry, rx)));
        parts.push(RigidTransform::uniform_scale(scale));
        parts.push(RigidTransform::translation(translation));
        Augmentation {
            transform: compose_transforms(&parts),
            mirror,
            intensity_factor,
            angles_deg,
            scale,
            translation,
        }
    }
}

/// Draws the augmentation for `sample_index` from the `spatial`,
/// `intensity` and `mirror` substreams of `rng`.
pub fn sample_augmentation(cfg: &AugmentConfig, rng: &SeededRng, sample_index: u64) -> Augmentation {
    let mut spatial = rng.stream("spatial", sample_index);
    let mut intensity = rng.stream("intensity", sample_index);
    let mut mirror_rng = rng.stream("mirror", sample_index);

    let mirror = uniform(&mut mirror_rng, 0.0, 1.0) < cfg.mirror_prob;
    let angles = [(); 3].map(|_| uniform(&mut spatial, -cfg.rot_deg, cfg.rot_deg));
    let scale = uniform(&mut spatial, cfg.scale_min, cfg.scale_max);
    let t = [(); 3].map(|_| uniform(&mut spatial, -cfg.trans_mm, cfg.trans_mm));
    let factor = uniform(&mut intensity, cfg.intensity_min, cfg.intensity_max);
    Augmentation::from_parts(mirror, angles, scale, Vec3::new(t[0], t[1], t[2]), factor)
}

/// Per-plane layout of a regression target: normalized center (3 values)
/// followed by the rotation encoding.
pub fn encode_targets(planes: &[PlaneFrame], extent_mm: f64, kind: RotationKind) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes.len() * (3 + kind.len()));
    for p in planes {
        out.extend_from_slice(&normalize_translation(p.center(), extent_mm).to_array());
        out.extend(encode_rotation(&p.rotation(), kind).values);
    }
    out
}

/// Inverse of [`encode_targets`] for any finite, non-degenerate vector
/// (e.g. raw network output).
pub fn decode_targets(values: &[f64], extent_mm: f64, kind: RotationKind) -> Result<Vec<PlaneFrame>> {
    let stride = 3 + kind.len();
    if values.is_empty() || values.len() % stride != 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![stride],
            actual: vec![values.len()],
        });
    }
    values
        .chunks(stride)
        .map(|chunk| {
            let center = denormalize_translation(Vec3::from_slice(&chunk[..3]), extent_mm);
            let r = decode_values(kind, &chunk[3..])?;
            PlaneFrame::from_rotation(center, &r)
        })
        .collect()
}

/// Network-ready sample.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    /// `dims³` windowed intensities in `[0, 1]`, x fastest.
    pub input: Vec<f32>,
    pub targets: Vec<PlaneFrame>,
    pub target_vector: Vec<f64>,
    /// Plane centers that left the normalized cube `[−0.5, 0.5]³`.
    pub out_of_cube: usize,
    pub augmentation: Augmentation,
}

/// Resamples `volume` once through `aug.transform`, applies jitter, clip,
/// rescale and window, and carries the labels through the same transform.
pub fn apply_augmentation(
    volume: &Volume<i16>,
    planes: &[PlaneFrame],
    aug: &Augmentation,
    grid: GridSpec,
    window: &WindowConfig,
    kind: RotationKind,
) -> Result<AugmentedSample> {
    let resampled: Volume<f32> = volume.resample(&aug.transform, grid.dims3(), grid.spacing3())?;
    let factor = aug.intensity_factor;
    let input = resampled
        .into_data()
        .into_iter()
        .map(|hu| window.apply(intensity_jitter(hu as f64, factor)) as f32)
        .collect();

    let targets: Vec<PlaneFrame> = planes.iter().map(|p| transform_plane(&aug.transform, p)).collect();
    let extent = grid.extent_mm();
    let out_of_cube = targets
        .iter()
        .filter(|p| normalize_translation(p.center(), extent).max_abs() > 0.5)
        .count();
    if out_of_cube > 0 {
        warn!("{out_of_cube} plane center(s) left the normalized cube after augmentation");
    }
    let target_vector = encode_targets(&targets, extent, kind);
    Ok(AugmentedSample {
        input,
        targets,
        target_vector,
        out_of_cube,
        augmentation: *aug,
    })
}

/// Draws an augmentation for `sample_index` and applies it.
pub fn augment_sample(
    volume: &Volume<i16>,
    planes: &[PlaneFrame],
    cfg: &AugmentConfig,
    window: &WindowConfig,
    kind: RotationKind,
    rng: &SeededRng,
    sample_index: u64,
) -> Result<AugmentedSample> {
    let aug = sample_augmentation(cfg, rng, sample_index);
    apply_augmentation(volume, planes, &aug, cfg.grid, window, kind)
}

/// Deterministic test-time input: centered resample, no augmentation.
pub fn prepare_input(volume: &Volume<i16>, grid: GridSpec, window: &WindowConfig) -> Result<Vec<f32>> {
    let resampled: Volume<f32> = volume.resample(&RigidTransform::IDENTITY, grid.dims3(), grid.spacing3())?;
    Ok(resampled.into_data().into_iter().map(|hu| window.apply(hu as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_deg;
    use crate::volume::resample_pass_count;

    fn test_volume() -> Volume<i16> {
        Volume::from_fn([20, 20, 20], Vec3::new(4.0, 4.0, 4.0), |p| {
            if p.norm() < 20.0 { 700.0 } else { -1000.0 }
        })
        .unwrap()
    }

    fn test_planes() -> Vec<PlaneFrame> {
        vec![
            PlaneFrame::new(Vec3::new(1.0, 2.0, 3.0), Vec3::X, Vec3::Y).unwrap(),
            PlaneFrame::new(Vec3::new(-5.0, 0.0, 4.0), Vec3::X, Vec3::Z).unwrap(),
        ]
    }

    #[test]
    fn degenerate_config_gives_identity() {
        let cfg = AugmentConfig::disabled(GridSpec::new(8, 2.0));
        let a = sample_augmentation(&cfg, &SeededRng::new(9), 0);
        assert!(!a.mirror);
        assert_eq!(a.intensity_factor, 1.0);
        assert!(a.transform.max_abs_diff(&RigidTransform::IDENTITY) == 0.0);
    }

    #[test]
    fn seeded_draws_repeat() {
        let cfg = AugmentConfig::default();
        let r = SeededRng::new(42);
        assert_eq!(sample_augmentation(&cfg, &r, 5), sample_augmentation(&cfg, &SeededRng::new(42), 5));
        assert_ne!(sample_augmentation(&cfg, &r, 5), sample_augmentation(&cfg, &r, 6));
    }

    #[test]
    fn draws_stay_in_range() {
        let cfg = AugmentConfig::default();
        let r = SeededRng::new(3);
        for i in 0..500 {
            let a = sample_augmentation(&cfg, &r, i);
            assert!(a.angles_deg.iter().all(|x| x.abs() <= 45.0));
            assert!((0.95..=1.05).contains(&a.scale));
            assert!(a.translation.max_abs() <= 12.0);
            assert!((0.95..=1.05).contains(&a.intensity_factor));
            a.transform.validate().unwrap();
            assert_eq!(a.transform.is_mirroring(), a.mirror);
        }
    }

    #[test]
    fn mirror_frequency_near_half() {
        let cfg = AugmentConfig::default();
        let r = SeededRng::new(11);
        let n = 10_000;
        let hits = (0..n).filter(|&i| sample_augmentation(&cfg, &r, i).mirror).count();
        let freq = hits as f64 / n as f64;
        assert!((0.47..=0.53).contains(&freq), "{freq}");
    }

    #[test]
    fn mirror_twice_is_identity() {
        let m = RigidTransform::mirror_x();
        assert!(compose_transforms(&[m, m]).max_abs_diff(&RigidTransform::IDENTITY) < 1e-12);
    }

    #[test]
    fn identity_augmentation_keeps_targets() {
        let v = test_volume();
        let planes = test_planes();
        let grid = GridSpec::new(16, 4.0);
        let s = apply_augmentation(&v, &planes, &Augmentation::identity(), grid, &WindowConfig::default(), RotationKind::SixD)
            .unwrap();
        for (a, b) in s.targets.iter().zip(&planes) {
            assert!((a.center() - b.center()).max_abs() < 1e-12);
            assert!((a.e_u() - b.e_u()).max_abs() < 1e-12);
            assert!((a.e_v() - b.e_v()).max_abs() < 1e-12);
        }
        assert_eq!(s.input.len(), 16 * 16 * 16);
        assert!(s.input.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(s.target_vector, encode_targets(&planes, grid.extent_mm(), RotationKind::SixD));
    }

    #[test]
    fn rotation_tilts_normal_by_its_angle() {
        let v = test_volume();
        let planes = test_planes();
        let aug = Augmentation::from_parts(false, [30.0, 0.0, 0.0], 1.0, Vec3::ZERO, 1.0);
        let s = apply_augmentation(&v, &planes, &aug, GridSpec::new(8, 4.0), &WindowConfig::default(), RotationKind::SixD)
            .unwrap();
        // Second plane's normal (−y) is perpendicular to the z rotation axis.
        let a = angle_deg(planes[1].normal(), s.targets[1].normal());
        assert!((a - 30.0).abs() < 1e-9, "{a}");
    }

    #[test]
    fn translation_shifts_normalized_center() {
        let v = test_volume();
        let planes = test_planes();
        let grid = GridSpec::new(10, 8.0);
        let aug = Augmentation::from_parts(false, [0.0; 3], 1.0, Vec3::new(12.0, 0.0, 0.0), 1.0);
        let s = apply_augmentation(&v, &planes, &aug, grid, &WindowConfig::default(), RotationKind::Quaternion).unwrap();
        let base = encode_targets(&planes, grid.extent_mm(), RotationKind::Quaternion);
        let d: Vec<f64> = s.target_vector.iter().zip(&base).map(|(a, b)| a - b).collect();
        assert!((d[0] - 12.0 / 80.0).abs() < 1e-15);
        assert!(d[1].abs() < 1e-15 && d[2].abs() < 1e-15);
        assert!(d[3..7].iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn one_interpolation_per_sample() {
        let v = test_volume();
        let cfg = AugmentConfig { grid: GridSpec::new(8, 4.0), ..Default::default() };
        let before = resample_pass_count();
        for i in 0..5 {
            augment_sample(&v, &test_planes(), &cfg, &WindowConfig::default(), RotationKind::EulerSinCos, &SeededRng::new(1), i)
                .unwrap();
        }
        assert_eq!(resample_pass_count() - before, 5);
    }

    #[test]
    fn out_of_cube_centers_are_flagged() {
        let v = test_volume();
        let far = vec![PlaneFrame::new(Vec3::new(30.0, 0.0, 0.0), Vec3::Y, Vec3::Z).unwrap()];
        let s = apply_augmentation(&v, &far, &Augmentation::identity(), GridSpec::new(6, 4.0), &WindowConfig::default(), RotationKind::SixD)
            .unwrap();
        assert_eq!(s.out_of_cube, 1);
    }

    #[test]
    fn target_codec_round_trip() {
        let planes = test_planes();
        for kind in RotationKind::ALL {
            let t = encode_targets(&planes, 150.0, kind);
            assert_eq!(t.len(), 2 * (3 + kind.len()));
            let back = decode_targets(&t, 150.0, kind).unwrap();
            for (a, b) in back.iter().zip(&planes) {
                assert!((a.center() - b.center()).max_abs() < 1e-12);
                assert!(a.rotation().frobenius_distance(&b.rotation()) < 1e-12);
            }
        }
        assert!(decode_targets(&[0.0; 8], 1.0, RotationKind::SixD).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { scale_min: 1.2, scale_max: 1.3, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { mirror_prob: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
