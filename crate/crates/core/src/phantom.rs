//! Procedural bone-like phantoms with exactly known standard planes.
//!
//! The canonical scene is an elliptical "shaft" along +z centered at the
//! origin, two unequal spherical "condyles" at its lower end on the ±x side,
//! and a flat "plate" on the +y flank. Together they have no rotational or
//! mirror symmetry, so the pose (and handedness) of a rendered phantom is
//! recoverable from the image alone.
//!
//! Ground-truth planes all pass through the canonical origin:
//!
//! | plane                  | e_u | e_v                 | normal              |
//! |------------------------|-----|---------------------|---------------------|
//! | axial                  | x   | y                   | z                   |
//! | coronal                | y   | z                   | x                   |
//! | semicoronal (tilt t)   | y   | (−sin t, 0, cos t)  | (cos t, 0, sin t)   |
//! | sagittal               | x   | z                   | −y                  |
//!
//! The semicoronal plane is the coronal plane rotated about its `e_u`, so
//! its normal makes `90° − t` with the axial normal and stays orthogonal to
//! the sagittal normal.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{transform_plane, write_planes, NamedPlane, PlaneFrame, RigidTransform, RotMat3, Vec3};
use crate::rng::{uniform, SeededRng};
use crate::volume::{write_volume, Volume, HU_MAX, HU_MIN};

pub const AIR_HU: f64 = -1000.0;
pub const TISSUE_HU: f64 = 40.0;
pub const BONE_HU: f64 = 700.0;
pub const METAL_HU: f64 = 3000.0;
/// Thickness of the soft-tissue shell around the bone.
pub const TISSUE_MARGIN_MM: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Ankle,
    Calcaneus,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ankle => "ankle",
            Mode::Calcaneus => "calcaneus",
        }
    }

    pub fn plane_names(self) -> [&'static str; 3] {
        match self {
            Mode::Ankle => ["axial", "coronal", "sagittal"],
            Mode::Calcaneus => ["axial", "semicoronal", "sagittal"],
        }
    }

    /// Per-patient class proportions `[metal, metal_outside, no_metal]` of
    /// the clinical cohorts (cadaver + clinical implants pooled as metal).
    pub fn default_class_fractions(self) -> [f64; 3] {
        match self {
            Mode::Ankle => [103.0 / 220.0, 61.0 / 220.0, 56.0 / 220.0],
            Mode::Calcaneus => [35.0 / 160.0, 63.0 / 160.0, 62.0 / 160.0],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ankle" => Ok(Mode::Ankle),
            "calcaneus" => Ok(Mode::Calcaneus),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected ankle or calcaneus)"))),
        }
    }
}

/// Origin class of a volume, used for stratified splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OriginClass {
    /// Implants inside the bone.
    Metal,
    /// Instruments lying outside the body.
    MetalOutside,
    NoMetal,
}

impl OriginClass {
    pub const ALL: [OriginClass; 3] = [OriginClass::Metal, OriginClass::MetalOutside, OriginClass::NoMetal];

    pub fn name(self) -> &'static str {
        match self {
            OriginClass::Metal => "metal",
            OriginClass::MetalOutside => "metal_outside",
            OriginClass::NoMetal => "no_metal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for OriginClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OriginClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OriginClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown origin class '{s}'")))
    }
}

/// Anatomy dimensions in mm (tilt in degrees).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anatomy {
    pub shaft_length: f64,
    pub shaft_radius: f64,
    /// Radii of the +x and −x condyles; must differ.
    pub condyle_radii: [f64; 2],
    pub condyle_offset: f64,
    pub plate_thickness: f64,
    pub plate_width: f64,
    pub plate_height: f64,
    /// Semicoronal tilt about the coronal `e_u`; 0 in ankle mode.
    pub tilt_deg: f64,
}

impl Default for Anatomy {
    fn default() -> Self {
        Anatomy {
            shaft_length: 90.0,
            shaft_radius: 11.0,
            condyle_radii: [17.0, 12.0],
            condyle_offset: 16.0,
            plate_thickness: 5.0,
            plate_width: 18.0,
            plate_height: 40.0,
            tilt_deg: 0.0,
        }
    }
}

impl Anatomy {
    /// Default anatomy with every length scaled by an independent factor
    /// in `[0.9, 1.1]`; calcaneus mode draws a tilt in `[20°, 30°]`.
    pub fn random(mode: Mode, rng: &mut impl Rng) -> Self {
        let d = Anatomy::default();
        let mut j = |x: f64| x * uniform(rng, 0.9, 1.1);
        let mut a = Anatomy {
            shaft_length: j(d.shaft_length),
            shaft_radius: j(d.shaft_radius),
            condyle_radii: [j(d.condyle_radii[0]), j(d.condyle_radii[1])],
            condyle_offset: j(d.condyle_offset),
            plate_thickness: j(d.plate_thickness),
            plate_width: j(d.plate_width),
            plate_height: j(d.plate_height),
            tilt_deg: 0.0,
        };
        if mode == Mode::Calcaneus {
            a.tilt_deg = uniform(rng, 20.0, 30.0);
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [
            self.shaft_length,
            self.shaft_radius,
            self.condyle_radii[0],
            self.condyle_radii[1],
            self.condyle_offset,
            self.plate_thickness,
            self.plate_width,
            self.plate_height,
        ];
        if lengths.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Precondition(format!("anatomy lengths must be positive: {self:?}")));
        }
        if !(0.0..=45.0).contains(&self.tilt_deg) {
            return Err(Error::Precondition(format!("tilt {}° outside [0°, 45°]", self.tilt_deg)));
        }
        Ok(())
    }
}

/// A metal cylinder in canonical coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rod {
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
}

impl Rod {
    fn distance(&self, p: Vec3) -> f64 {
        let axis = self.end - self.start;
        let len = axis.norm();
        let dir = axis * (1.0 / len);
        let rel = p - self.start;
        let along = rel.dot(dir);
        let radial = (rel - dir * along).norm() - self.radius;
        let cap = (along - len / 2.0).abs() - len / 2.0;
        let outside = Vec3::new(radial.max(0.0), cap.max(0.0), 0.0).norm();
        outside + radial.max(cap).min(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub patient_id: u32,
    pub mode: Mode,
    /// Canonical → world placement.
    pub pose: RigidTransform,
    pub anatomy: Anatomy,
    pub class: OriginClass,
    /// Fraction of the volume's z extent kept; the rest is set to air.
    pub truncation: f64,
}

impl PhantomSpec {
    pub fn new(patient_id: u32, mode: Mode) -> Self {
        let mut anatomy = Anatomy::default();
        if mode == Mode::Calcaneus {
            anatomy.tilt_deg = 25.0;
        }
        PhantomSpec {
            patient_id,
            mode,
            pose: RigidTransform::IDENTITY,
            anatomy,
            class: OriginClass::NoMetal,
            truncation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anatomy.validate()?;
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::Precondition(format!("truncation {} outside (0, 1]", self.truncation)));
        }
        if self.mode == Mode::Ankle && self.anatomy.tilt_deg != 0.0 {
            return Err(Error::Precondition("ankle phantoms have no semicoronal tilt".into()));
        }
        if self.pose.is_mirroring() {
            return Err(Error::Precondition("phantom pose must not mirror".into()));
        }
        self.pose.validate()
    }
}

/// Random rigid placement: per-axis Z-Y-X angles in `±max_rot_deg` and a
/// translation in `±max_shift_mm` per axis.
pub fn random_pose(rng: &mut impl Rng, max_rot_deg: f64, max_shift_mm: f64) -> RigidTransform {
    let a = [(); 3].map(|_| uniform(rng, -max_rot_deg, max_rot_deg).to_radians());
    let t = [(); 3].map(|_| uniform(rng, -max_shift_mm, max_shift_mm));
    let r = RotMat3::from_euler_zyx(a[0], a[1], a[2]);
    RigidTransform::from_linear(&r, Vec3::new(t[0], t[1], t[2]))
}

/// Canonical-frame geometry of one phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub anatomy: Anatomy,
    pub rods: Vec<Rod>,
}

impl Scene {
    pub fn new(anatomy: Anatomy, class: OriginClass, rng: &mut impl Rng) -> Self {
        let rods = match class {
            OriginClass::NoMetal => Vec::new(),
            OriginClass::Metal => (0..rng.random_range(2..=6))
                .map(|_| {
                    // Screws crossing the shaft at random heights.
                    let z = uniform(rng, -0.4, 0.4) * anatomy.shaft_length;
                    let phi = uniform(rng, 0.0, std::f64::consts::TAU);
                    let dir = Vec3::new(phi.cos(), phi.sin(), uniform(rng, -0.3, 0.3)).normalized();
                    let half = uniform(rng, 10.0, 20.0);
                    let c = Vec3::new(0.0, 0.0, z);
                    Rod {
                        start: c - dir * half,
                        end: c + dir * half,
                        radius: uniform(rng, 1.5, 2.5),
                    }
                })
                .collect(),
            OriginClass::MetalOutside => (0..rng.random_range(2..=6))
                .map(|_| {
                    // Instruments lying on top of the soft tissue.
                    let phi = uniform(rng, 0.0, std::f64::consts::TAU);
                    let dist = anatomy.shaft_radius + anatomy.condyle_radii[0] + TISSUE_MARGIN_MM + uniform(rng, 12.0, 25.0);
                    let c = Vec3::new(phi.cos() * dist, phi.sin() * dist, uniform(rng, -30.0, 30.0));
                    let dir = Vec3::new(uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), 1.0).normalized();
                    let half = uniform(rng, 30.0, 50.0);
                    Rod {
                        start: c - dir * half,
                        end: c + dir * half,
                        radius: uniform(rng, 2.0, 3.5),
                    }
                })
                .collect(),
        };
        Scene { anatomy, rods }
    }

    /// Approximate signed distance (mm) to the bone surface; negative inside.
    pub fn bone_distance(&self, p: Vec3) -> f64 {
        let a = &self.anatomy;
        let rx = a.shaft_radius * 1.15;
        let ry = a.shaft_radius;
        let rz = a.shaft_length / 2.0;
        let q = Vec3::new(p.x / rx, p.y / ry, p.z / rz);
        let shaft = (q.norm() - 1.0) * ry;

        let zc = -a.shaft_length / 2.0;
        let big = (p - Vec3::new(a.condyle_offset, 0.0, zc)).norm() - a.condyle_radii[0];
        let small = (p - Vec3::new(-a.condyle_offset, 0.0, zc)).norm() - a.condyle_radii[1];

        let plate_center = Vec3::new(0.0, ry + a.plate_thickness / 2.0 - 1.0, a.shaft_length / 5.0);
        let half = Vec3::new(a.plate_width / 2.0, a.plate_thickness / 2.0, a.plate_height / 2.0);
        let d = p - plate_center;
        let e = Vec3::new(d.x.abs() - half.x, d.y.abs() - half.y, d.z.abs() - half.z);
        let plate = Vec3::new(e.x.max(0.0), e.y.max(0.0), e.z.max(0.0)).norm() + e.x.max(e.y).max(e.z).min(0.0);

        shaft.min(big).min(small).min(plate)
    }

    pub fn metal_distance(&self, p: Vec3) -> f64 {
        self.rods.iter().map(|r| r.distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// HU at canonical point `p`; `edge` is the anti-aliasing width (mm).
    pub fn hu(&self, p: Vec3, edge: f64) -> f64 {
        let frac = |sd: f64| (0.5 - sd / edge).clamp(0.0, 1.0);
        let bone_sd = self.bone_distance(p);
        let bone = frac(bone_sd);
        let tissue = frac(bone_sd - TISSUE_MARGIN_MM);
        let mut hu = AIR_HU + tissue * (TISSUE_HU - AIR_HU) + bone * (BONE_HU - TISSUE_HU);
        if !self.rods.is_empty() {
            let m = frac(self.metal_distance(p));
            hu = hu * (1.0 - m) + METAL_HU * m;
        }
        hu
    }
}

/// Ground-truth planes in canonical coordinates.
pub fn canonical_planes(mode: Mode, tilt_deg: f64) -> Vec<NamedPlane> {
    let t = tilt_deg.to_radians();
    let axial = PlaneFrame::new(Vec3::ZERO, Vec3::X, Vec3::Y).expect("unit axes");
    let coronal_v = match mode {
        Mode::Ankle => Vec3::Z,
        Mode::Calcaneus => Vec3::new(-t.sin(), 0.0, t.cos()),
    };
    let coronal = PlaneFrame::new(Vec3::ZERO, Vec3::Y, coronal_v).expect("unit axes");
    let sagittal = PlaneFrame::new(Vec3::ZERO, Vec3::X, Vec3::Z).expect("unit axes");
    mode.plane_names()
        .into_iter()
        .zip([axial, coronal, sagittal])
        .map(|(name, frame)| NamedPlane { name: name.to_string(), frame })
        .collect()
}

/// Renders `spec` onto a `dims` grid and returns the volume with its three
/// annotated planes in world coordinates. `rng` places the metal.
pub fn generate_phantom(
    spec: &PhantomSpec,
    dims: [usize; 3],
    spacing: Vec3,
    rng: &SeededRng,
) -> Result<(Volume<i16>, Vec<NamedPlane>)> {
    spec.validate()?;
    let scene = Scene::new(spec.anatomy, spec.class, &mut rng.stream("metal", spec.patient_id as u64));
    let to_canonical = spec.pose.inverse()?;
    let edge = spacing.x.min(spacing.y).min(spacing.z);
    let half_slab = spec.truncation * dims[2] as f64 * spacing.z / 2.0;
    let volume = Volume::<i16>::from_fn(dims, spacing, |q| {
        if q.z.abs() > half_slab {
            return HU_MIN as f64;
        }
        scene.hu(to_canonical.apply_point(q), edge).clamp(HU_MIN as f64, HU_MAX as f64)
    })?;
    let bone_threshold = (BONE_HU + TISSUE_HU) / 2.0;
    if !volume.data().iter().any(|&v| v as f64 >= bone_threshold && (v as f64) < METAL_HU - 500.0) {
        return Err(Error::AnatomyOutsideVolume);
    }
    let planes = canonical_planes(spec.mode, spec.anatomy.tilt_deg)
        .into_iter()
        .map(|p| NamedPlane {
            name: p.name,
            frame: transform_plane(&spec.pose, &p.frame),
        })
        .collect();
    Ok((volume, planes))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Volume path (header stem), relative to the manifest's directory
    /// unless absolute.
    pub path: PathBuf,
    pub patient_id: u32,
    pub class: OriginClass,
    pub mode: Mode,
}

impl ManifestEntry {
    pub fn annotation_path(&self) -> PathBuf {
        self.path.with_extension("planes")
    }
}

/// Dataset index: text, one line per volume, `path patient_id class mode`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# path patient_id class mode\n");
        for e in &self.entries {
            s.push_str(&format!("{} {} {} {}\n", e.path.display(), e.patient_id, e.class, e.mode));
        }
        s
    }

    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::parse(source, n + 1, "expected 'path patient_id class mode'"));
            }
            let patient_id = f[1]
                .parse()
                .map_err(|_| Error::parse(source, n + 1, format!("bad patient id '{}'", f[1])))?;
            let class = f[2].parse().map_err(|e: Error| Error::parse(source, n + 1, e.to_string()))?;
            let mode = f[3].parse().map_err(|e: Error| Error::parse(source, n + 1, e.to_string()))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(f[0]),
                patient_id,
                class,
                mode,
            });
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Manifest::parse(&text, &root, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        }
    }

    pub fn patient_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.patient_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub n_patients: usize,
    pub volumes_per_patient: usize,
    pub mode: Mode,
    pub seed: u64,
    pub dims: usize,
    pub spacing_mm: f64,
    /// Per-patient proportions of `[metal, metal_outside, no_metal]`.
    pub class_fractions: [f64; 3],
    pub max_rot_deg: f64,
    pub max_shift_mm: f64,
    /// Probability that a volume is truncated to a central slab.
    pub truncation_prob: f64,
}

impl DatasetOptions {
    pub fn new(n_patients: usize, volumes_per_patient: usize, mode: Mode, seed: u64) -> Self {
        DatasetOptions {
            n_patients,
            volumes_per_patient,
            mode,
            seed,
            dims: 64,
            spacing_mm: 2.5,
            class_fractions: mode.default_class_fractions(),
            max_rot_deg: 45.0,
            max_shift_mm: 10.0,
            truncation_prob: 0.2,
        }
    }
}

/// Number of patients per class: largest-remainder rounding of
/// `fractions · n`, exact whenever the products are integral.
pub fn class_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f >= 0.0)) || !(total > 0.0) {
        return Err(Error::Config(format!("invalid class fractions {fractions:?}")));
    }
    let ideal = fractions.map(|f| f / total * n as f64);
    let mut counts = ideal.map(|x| (x + 1e-9).floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - counts[a] as f64;
        let rb = ideal[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    Ok(counts)
}

/// Everything needed to render one dataset volume.
#[derive(Clone, Debug)]
pub struct VolumePlan {
    pub index: usize,
    pub spec: PhantomSpec,
}

/// Deterministic per-volume specs for a dataset; volume `i` belongs to
/// patient `i / volumes_per_patient`.
pub fn plan_dataset(opts: &DatasetOptions) -> Result<Vec<VolumePlan>> {
    if opts.n_patients == 0 || opts.volumes_per_patient == 0 {
        return Err(Error::Config("dataset needs at least one patient and one volume per patient".into()));
    }
    let rng = SeededRng::new(opts.seed);
    let counts = class_counts(opts.n_patients, opts.class_fractions)?;
    let mut classes: Vec<OriginClass> = OriginClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| std::iter::repeat_n(c, n))
        .collect();
    rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng.stream("classes", 0));

    let mut plans = Vec::with_capacity(opts.n_patients * opts.volumes_per_patient);
    for (patient, &class) in classes.iter().enumerate() {
        let anatomy = Anatomy::random(opts.mode, &mut rng.stream("anatomy", patient as u64));
        for k in 0..opts.volumes_per_patient {
            let index = patient * opts.volumes_per_patient + k;
            let mut g = rng.stream("volume", index as u64);
            let pose = random_pose(&mut g, opts.max_rot_deg, opts.max_shift_mm);
            let truncation = if uniform(&mut g, 0.0, 1.0) < opts.truncation_prob {
                uniform(&mut g, 0.7, 0.95)
            } else {
                1.0
            };
            plans.push(VolumePlan {
                index,
                spec: PhantomSpec {
                    patient_id: patient as u32,
                    mode: opts.mode,
                    pose,
                    anatomy,
                    class,
                    truncation,
                },
            });
        }
    }
    Ok(plans)
}

/// Renders one planned volume; metal placement is keyed by volume index.
pub fn render_plan(plan: &VolumePlan, opts: &DatasetOptions) -> Result<(Volume<i16>, Vec<NamedPlane>)> {
    let rng = SeededRng::new(opts.seed).child("render", plan.index as u64);
    let s = opts.spacing_mm;
    generate_phantom(&plan.spec, [opts.dims; 3], Vec3::new(s, s, s), &rng)
}

/// Writes volumes, annotation files and `manifest.txt` into `out_dir`.
pub fn generate_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<Manifest> {
    let plans = plan_dataset(opts)?;
    let mut entries = Vec::with_capacity(plans.len());
    for plan in &plans {
        let (volume, planes) = render_plan(plan, opts)?;
        let rel = PathBuf::from(format!("vol_{:04}.vhdr", plan.index));
        let abs = out_dir.join(&rel);
        write_volume(&abs, &volume)?;
        write_planes(&abs.with_extension("planes"), &planes)?;
        entries.push(ManifestEntry {
            path: rel,
            patient_id: plan.spec.patient_id,
            class: plan.spec.class,
            mode: opts.mode,
        });
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}
