//! Voxel grids, trilinear resampling, the HU intensity pipeline and MPR
//! slice extraction.
//!
//! Voxel `(i, j, k)` has its center at world
//! `((i − (nx−1)/2)·sx, (j − (ny−1)/2)·sy, (k − (nz−1)/2)·sz)`, so the grid
//! center is the world origin. Samples are stored x-fastest, then y, then z.
//!
//! On disk a volume is a `<name>.vhdr` text header
//!
//! ```text
//! dims: nx ny nz
//! spacing_mm: sx sy sz
//! dtype: int16le
//! ```
//!
//! next to `<name>.vraw`, the raw little-endian `i16` samples.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PlaneFrame, RigidTransform, Vec3};

/// Value returned for samples outside the grid (air).
pub const FILL_HU: f64 = -1024.0;
pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = 3071;

/// Element type of a [`Volume`].
pub trait Voxel: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn is_valid(self) -> bool;
}

impl Voxel for i16 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(HU_MIN as f64, HU_MAX as f64) as i16
    }
    fn is_valid(self) -> bool {
        (HU_MIN..=HU_MAX).contains(&self)
    }
}

impl Voxel for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}

impl Voxel for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = i16> {
    dims: [usize; 3],
    spacing: Vec3,
    data: Vec<T>,
}

impl<T: Voxel> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: Vec3, data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidVolume(format!("dims {dims:?} must be >= 2 per axis")));
        }
        if !(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidVolume(format!("spacing {spacing:?} must be positive")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidVolume(format!(
                "{} samples for dims {dims:?} (expected {n})",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::InvalidVolume(format!(
                "sample {pos} = {} outside the valid range",
                data[pos].to_f64()
            )));
        }
        Ok(Volume { dims, spacing, data })
    }

    /// Builds a volume by evaluating `f` at every voxel center (world mm).
    pub fn from_fn(dims: [usize; 3], spacing: Vec3, f: impl Fn(Vec3) -> f64 + Sync) -> Result<Self> {
        let proto: Volume<T> = Volume {
            dims,
            spacing,
            data: Vec::new(),
        };
        let plane = dims[0] * dims[1];
        let mut data = vec![T::from_f64(0.0); dims[0] * dims[1] * dims[2]];
        data.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    slab[i + dims[0] * j] = T::from_f64(f(proto.voxel_center(i, j, k)));
                }
            }
        });
        Volume::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Physical edge lengths `n · spacing` per axis.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64 * self.spacing.x,
            self.dims[1] as f64 * self.spacing.y,
            self.dims[2] as f64 * self.spacing.z,
        )
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let c = |idx: usize, n: usize, s: f64| (idx as f64 - (n as f64 - 1.0) / 2.0) * s;
        Vec3::new(
            c(i, self.dims[0], self.spacing.x),
            c(j, self.dims[1], self.spacing.y),
            c(k, self.dims[2], self.spacing.z),
        )
    }

    /// Continuous voxel index of a world point.
    pub fn world_to_index(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x / self.spacing.x + (self.dims[0] as f64 - 1.0) / 2.0,
            p.y / self.spacing.y + (self.dims[1] as f64 - 1.0) / 2.0,
            p.z / self.spacing.z + (self.dims[2] as f64 - 1.0) / 2.0,
        )
    }

    /// Trilinear interpolation between the 8 surrounding voxel centers.
    ///
    /// Points more than half a voxel beyond the outermost voxel centers
    /// return [`FILL_HU`]; inside that margin the edge voxels are
    /// replicated.
    pub fn trilinear_sample(&self, p: Vec3) -> f64 {
        let f = self.world_to_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for axis in 0..3 {
            let n = self.dims[axis];
            let x = f[axis];
            if !(x > -0.5 && x < n as f64 - 0.5) {
                return FILL_HU;
            }
            let x = x.clamp(0.0, (n - 1) as f64);
            let b = (x.floor() as usize).min(n - 2);
            base[axis] = b;
            frac[axis] = x - b as f64;
        }
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let v = |di, dj, dk| self.get(i + di, j + dj, k + dk).to_f64();
        let c00 = v(0, 0, 0) * (1.0 - fx) + v(1, 0, 0) * fx;
        let c10 = v(0, 1, 0) * (1.0 - fx) + v(1, 1, 0) * fx;
        let c01 = v(0, 0, 1) * (1.0 - fx) + v(1, 0, 1) * fx;
        let c11 = v(0, 1, 1) * (1.0 - fx) + v(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Resamples onto a new centered grid: the output voxel at world point
    /// `q` takes `trilinear_sample(T⁻¹ · q)`. This is a single interpolation
    /// pass however many transforms were folded into `t`.
    pub fn resample<U: Voxel>(&self, t: &RigidTransform, out_dims: [usize; 3], out_spacing: Vec3) -> Result<Volume<U>> {
        let inv = t.inverse()?;
        RESAMPLE_PASSES.with(|c| c.set(c.get() + 1));
        Volume::from_fn(out_dims, out_spacing, |q| self.trilinear_sample(inv.apply_point(q)))
    }

    pub fn map<U: Voxel>(&self, f: impl Fn(f64) -> f64 + Sync) -> Result<Volume<U>> {
        let data = self.data.par_iter().map(|v| U::from_f64(f(v.to_f64()))).collect();
        Volume::new(self.dims, self.spacing, data)
    }
}

thread_local! {
    static RESAMPLE_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`Volume::resample`] passes run on the current thread.
pub fn resample_pass_count() -> u64 {
    RESAMPLE_PASSES.with(|c| c.get())
}

/// Multiplicative HU jitter about −1000 HU: `(hu + 1000)·factor − 1000`.
pub fn intensity_jitter(hu: f64, factor: f64) -> f64 {
    (hu + 1000.0) * factor - 1000.0
}

/// Clipping window and logistic gain of the intensity pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub gain: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            clip_lo: -490.0,
            clip_hi: 1040.0,
            gain: default_gain(),
        }
    }
}

/// `2·ln 99`, which puts `w(0) ≈ 0.01` and `w(1) ≈ 0.99`.
pub fn default_gain() -> f64 {
    2.0 * 99f64.ln()
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::Config(format!(
                "clip_lo ({}) must be below clip_hi ({})",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(Error::Config(format!("window gain must be positive, got {}", self.gain)));
        }
        Ok(())
    }

    /// Clip, rescale and window in one go.
    pub fn apply(&self, hu: f64) -> f64 {
        window(clip_rescale(hu, self), self.gain)
    }
}

/// Clamps to `[clip_lo, clip_hi]` and maps that range affinely onto `[0, 1]`.
pub fn clip_rescale(hu: f64, cfg: &WindowConfig) -> f64 {
    let c = hu.clamp(cfg.clip_lo, cfg.clip_hi);
    (c - cfg.clip_lo) / (cfg.clip_hi - cfg.clip_lo)
}

/// Logistic window `1 / (1 + e^{g(0.5 − x)})`.
pub fn window(x: f64, g: f64) -> f64 {
    1.0 / (1.0 + (g * (0.5 - x)).exp())
}

/// 8-bit grayscale image, row 0 at the top.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidVolume(format!("PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("only 8-bit P5 is supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?.to_vec();
        if pixels.len() != width * height {
            return Err(bad("pixel count does not match header"));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_pgm())
    }
}

/// Raw HU samples of an MPR plane, `width × height`, row 0 at the top.
/// Pixel `(i, j)` (j counted upward) samples
/// `A + (i − (w−1)/2)·s·e_u + (j − (h−1)/2)·s·e_v`.
pub fn sample_plane<T: Voxel>(v: &Volume<T>, p: &PlaneFrame, width: usize, height: usize, px_spacing: f64) -> Vec<f64> {
    let (a, eu, ev) = (p.center(), p.e_u(), p.e_v());
    let mut out = vec![0.0; width * height];
    out.par_chunks_mut(width).enumerate().for_each(|(row, line)| {
        let j = (height - 1 - row) as f64 - (height as f64 - 1.0) / 2.0;
        for (col, px) in line.iter_mut().enumerate() {
            let i = col as f64 - (width as f64 - 1.0) / 2.0;
            *px = v.trilinear_sample(a + eu * (i * px_spacing) + ev * (j * px_spacing));
        }
    });
    out
}

/// Renders an MPR slice as 8-bit grayscale after clip/rescale/window.
pub fn extract_mpr_slice<T: Voxel>(
    v: &Volume<T>,
    p: &PlaneFrame,
    size: (usize, usize),
    px_spacing: f64,
    cfg: &WindowConfig,
) -> GrayImage {
    let (width, height) = size;
    let pixels = sample_plane(v, p, width, height, px_spacing)
        .into_iter()
        .map(|hu| (cfg.apply(hu) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage { width, height, pixels }
}

fn header_path(path: &Path) -> PathBuf {
    path.with_extension("vhdr")
}

fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("vraw")
}

/// Writes `<stem>.vhdr` and `<stem>.vraw`. `path` may carry either
/// extension or none.
pub fn write_volume(path: &Path, v: &Volume<i16>) -> Result<()> {
    let [nx, ny, nz] = v.dims;
    let s = v.spacing;
    let header = format!(
        "dims: {nx} {ny} {nz}\nspacing_mm: {} {} {}\ndtype: int16le\n",
        s.x, s.y, s.z
    );
    let mut raw = Vec::with_capacity(v.data.len() * 2);
    for x in &v.data {
        raw.extend_from_slice(&x.to_le_bytes());
    }
    crate::io::write_atomic(&raw_path(path), &raw)?;
    crate::io::write_atomic(&header_path(path), header.as_bytes())
}

pub fn read_volume(path: &Path) -> Result<Volume<i16>> {
    let hdr = header_path(path);
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(&hdr, n + 1, "expected 'key: value'"))?;
        let nums = |count: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = value
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(&hdr, n + 1, format!("bad numbers in '{key}'")))?;
            if v.len() != count {
                return Err(Error::parse(&hdr, n + 1, format!("'{key}' needs {count} values")));
            }
            Ok(v)
        };
        match key.trim() {
            "dims" => {
                let v = nums(3)?;
                if v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
                    return Err(Error::parse(&hdr, n + 1, "dims must be non-negative integers"));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "spacing_mm" => {
                let v = nums(3)?;
                spacing = Some(Vec3::new(v[0], v[1], v[2]));
            }
            "dtype" => dtype = Some(value.trim().to_string()),
            other => return Err(Error::parse(&hdr, n + 1, format!("unknown header key '{other}'"))),
        }
    }
    let dims = dims.ok_or_else(|| Error::parse(&hdr, 0, "missing 'dims'"))?;
    let spacing = spacing.ok_or_else(|| Error::parse(&hdr, 0, "missing 'spacing_mm'"))?;
    match dtype.as_deref() {
        Some("int16le") => {}
        other => {
            return Err(Error::parse(&hdr, 0, format!("unsupported dtype {other:?} (expected int16le)")));
        }
    }
    let rawp = raw_path(path);
    let raw = fs::read(&rawp).map_err(|e| Error::io(&rawp, e))?;
    let expected = dims.iter().product::<usize>() * 2;
    if raw.len() != expected {
        return Err(Error::InvalidVolume(format!(
            "{} holds {} bytes, header implies {expected}",
            rawp.display(),
            raw.len()
        )));
    }
    let data = raw.chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    Volume::new(dims, spacing, data)
}
