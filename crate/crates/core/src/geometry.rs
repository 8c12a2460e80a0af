//! Plane parameterization, rotation encodings and homogeneous transforms.
//!
//! World space is right-handed, in millimetres, with the origin at the
//! volume center and axes aligned with the voxel axes. A standard plane is
//! described by its center `A` and the in-plane unit vectors `e_u` (screen
//! right) and `e_v` (screen up); the normal is `e_w = e_u × e_v`, and the
//! matrix with columns `[e_u, e_v, e_w]` is the plane's rotation.
//!
//! Rotations are regressed through one of three encodings:
//!
//! * [`RotationKind::Quaternion`]: `(w, x, y, z)`, canonical sign `w >= 0`.
//! * [`RotationKind::EulerSinCos`]: `(sin a, cos a, sin b, cos b, sin c, cos c)`
//!   for intrinsic Z-Y-X angles, `R = Rz(a) Ry(b) Rx(c)`.
//! * [`RotationKind::SixD`]: the first two columns of `R`, decoded with
//!   Gram-Schmidt and a cross product.

use std::fmt;
use std::fs;
use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Tolerance accepted on unit length / orthogonality of user-supplied axes.
pub const AXIS_TOLERANCE: f64 = 1e-6;
/// Smallest norm a decoded encoding component may have.
pub const DEGENERATE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Vec3::new(s[0], s[1], s[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Componentwise product.
    pub fn scale_by(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Angle between two non-zero vectors in degrees, computed with atan2 so
/// it stays accurate near 0° and 180°.
pub fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// 3×3 matrix stored as three columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotMat3 {
    cols: [Vec3; 3],
}

impl RotMat3 {
    pub const IDENTITY: RotMat3 = RotMat3 {
        cols: [Vec3::X, Vec3::Y, Vec3::Z],
    };

    pub fn from_columns(c1: Vec3, c2: Vec3, c3: Vec3) -> Self {
        RotMat3 { cols: [c1, c2, c3] }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        RotMat3::from_columns(
            Vec3::new(rows[0][0], rows[1][0], rows[2][0]),
            Vec3::new(rows[0][1], rows[1][1], rows[2][1]),
            Vec3::new(rows[0][2], rows[1][2], rows[2][2]),
        )
    }

    /// Rotation of `angle` radians about the unit vector `axis` (Rodrigues).
    pub fn about_axis(axis: Vec3, angle: f64) -> Self {
        let k = axis.normalized();
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        RotMat3::from_rows([
            [
                c + k.x * k.x * t,
                k.x * k.y * t - k.z * s,
                k.x * k.z * t + k.y * s,
            ],
            [
                k.y * k.x * t + k.z * s,
                c + k.y * k.y * t,
                k.y * k.z * t - k.x * s,
            ],
            [
                k.z * k.x * t - k.y * s,
                k.z * k.y * t + k.x * s,
                c + k.z * k.z * t,
            ],
        ])
    }

    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`, angles in radians.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let (sa, ca) = yaw.sin_cos();
        let (sb, cb) = pitch.sin_cos();
        let (sg, cg) = roll.sin_cos();
        RotMat3::from_rows([
            [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
            [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
            [-sb, cb * sg, cb * cg],
        ])
    }

    /// Intrinsic Z-Y-X angles `(yaw, pitch, roll)` in radians, pitch in
    /// `[-π/2, π/2]`. At gimbal lock yaw is set to zero.
    pub fn to_euler_zyx(&self) -> (f64, f64, f64) {
        let r = |i, j| self.get(i, j);
        let cb = r(0, 0).hypot(r(1, 0));
        let pitch = (-r(2, 0)).atan2(cb);
        if cb > 1e-12 {
            (r(1, 0).atan2(r(0, 0)), pitch, r(2, 1).atan2(r(2, 2)))
        } else {
            let sb = pitch.sin().signum();
            (0.0, pitch, (sb * r(0, 1)).atan2(r(1, 1)))
        }
    }

    pub fn col(&self, j: usize) -> Vec3 {
        self.cols[j]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cols[col][row]
    }

    pub fn transpose(&self) -> RotMat3 {
        RotMat3::from_columns(self.row(0), self.row(1), self.row(2))
    }

    pub fn row(&self, i: usize) -> Vec3 {
        Vec3::new(self.cols[0][i], self.cols[1][i], self.cols[2][i])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        self.cols[0] * v.x + self.cols[1] * v.y + self.cols[2] * v.z
    }

    pub fn mul_mat(&self, o: &RotMat3) -> RotMat3 {
        RotMat3::from_columns(self.mul_vec(o.cols[0]), self.mul_vec(o.cols[1]), self.mul_vec(o.cols[2]))
    }

    pub fn det(&self) -> f64 {
        self.cols[0].dot(self.cols[1].cross(self.cols[2]))
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &RotMat3) -> f64 {
        (0..3)
            .map(|j| {
                let d = self.cols[j] - other.cols[j];
                d.dot(d)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius norm of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = self.cols[i].dot(self.cols[j]) - target;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    /// True when the matrix is a proper rotation within `tol`.
    pub fn is_rotation(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol && (self.det() - 1.0).abs() < tol
    }

    /// Rotation angle in degrees of `selfᵀ · other`.
    pub fn angle_to_deg(&self, other: &RotMat3) -> f64 {
        let rel = self.transpose().mul_mat(other);
        let trace = rel.get(0, 0) + rel.get(1, 1) + rel.get(2, 2);
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Which wire encoding a rotation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RotationKind {
    Quaternion,
    EulerSinCos,
    SixD,
}

impl RotationKind {
    pub const ALL: [RotationKind; 3] = [
        RotationKind::EulerSinCos,
        RotationKind::Quaternion,
        RotationKind::SixD,
    ];

    /// Number of values in the encoding.
    pub fn len(self) -> usize {
        match self {
            RotationKind::Quaternion => 4,
            RotationKind::EulerSinCos | RotationKind::SixD => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RotationKind::Quaternion => "quaternion",
            RotationKind::EulerSinCos => "euler",
            RotationKind::SixD => "sixd",
        }
    }
}

impl fmt::Display for RotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quaternion" | "quat" => Ok(RotationKind::Quaternion),
            "euler" | "eulersincos" | "euler_sincos" => Ok(RotationKind::EulerSinCos),
            "sixd" | "6d" => Ok(RotationKind::SixD),
            other => Err(Error::Config(format!(
                "unknown rotation representation '{other}' (expected quaternion, euler or sixd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RotationEncoding {
    pub kind: RotationKind,
    pub values: Vec<f64>,
}

impl RotationEncoding {
    pub fn new(kind: RotationKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != kind.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![kind.len()],
                actual: vec![values.len()],
            });
        }
        Ok(RotationEncoding { kind, values })
    }
}

pub fn encode_rotation(r: &RotMat3, kind: RotationKind) -> RotationEncoding {
    let values = match kind {
        RotationKind::Quaternion => quaternion_from_matrix(r).to_vec(),
        RotationKind::EulerSinCos => {
            let (a, b, c) = r.to_euler_zyx();
            let (sa, ca) = a.sin_cos();
            let (sb, cb) = b.sin_cos();
            let (sc, cc) = c.sin_cos();
            vec![sa, ca, sb, cb, sc, cc]
        }
        RotationKind::SixD => {
            let (c1, c2) = (r.col(0), r.col(1));
            vec![c1.x, c1.y, c1.z, c2.x, c2.y, c2.z]
        }
    };
    RotationEncoding { kind, values }
}

pub fn decode_rotation(enc: &RotationEncoding) -> Result<RotMat3> {
    decode_values(enc.kind, &enc.values)
}

/// Decode a raw slice (e.g. a network output segment) of the given kind.
pub fn decode_values(kind: RotationKind, v: &[f64]) -> Result<RotMat3> {
    check_decodable(kind, v)?;
    Ok(match kind {
        RotationKind::Quaternion => {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
            quaternion_to_matrix([v[0] / n, v[1] / n, v[2] / n, v[3] / n])
        }
        RotationKind::EulerSinCos => {
            RotMat3::from_euler_zyx(v[0].atan2(v[1]), v[2].atan2(v[3]), v[4].atan2(v[5]))
        }
        RotationKind::SixD => {
            let (u, w) = gram_schmidt(Vec3::from_slice(&v[0..3]), Vec3::from_slice(&v[3..6]));
            RotMat3::from_columns(u, w, u.cross(w))
        }
    })
}

fn gram_schmidt(a: Vec3, b: Vec3) -> (Vec3, Vec3) {
    let u = a.normalized();
    let w = (b - u * b.dot(u)).normalized();
    (u, w)
}

fn check_decodable(kind: RotationKind, v: &[f64]) -> Result<()> {
    if v.len() != kind.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![kind.len()],
            actual: vec![v.len()],
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateEncoding("non-finite value".into()));
    }
    match kind {
        RotationKind::Quaternion => {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n <= DEGENERATE_EPS {
                return Err(Error::DegenerateEncoding(format!("quaternion norm {n:e}")));
            }
        }
        RotationKind::EulerSinCos => {
            for (i, p) in v.chunks(2).enumerate() {
                let m = p[0] * p[0] + p[1] * p[1];
                if m <= DEGENERATE_EPS {
                    return Err(Error::DegenerateEncoding(format!(
                        "sin/cos pair {i} has squared magnitude {m:e}"
                    )));
                }
            }
        }
        RotationKind::SixD => {
            let a = Vec3::from_slice(&v[0..3]);
            let b = Vec3::from_slice(&v[3..6]);
            let na = a.norm();
            if na <= DEGENERATE_EPS {
                return Err(Error::DegenerateEncoding(format!("first column norm {na:e}")));
            }
            let u = a * (1.0 / na);
            let rest = (b - u * b.dot(u)).norm();
            if rest <= DEGENERATE_EPS {
                return Err(Error::DegenerateEncoding(
                    "second column parallel to the first".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Unit quaternion `(w, x, y, z)` with `w >= 0`.
pub fn quaternion_from_matrix(r: &RotMat3) -> [f64; 4] {
    let m = |i, j| r.get(i, j);
    let trace = m(0, 0) + m(1, 1) + m(2, 2);
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m(2, 1) - m(1, 2)) / s,
            (m(0, 2) - m(2, 0)) / s,
            (m(1, 0) - m(0, 1)) / s,
        ]
    } else if m(0, 0) > m(1, 1) && m(0, 0) > m(2, 2) {
        let s = (1.0 + m(0, 0) - m(1, 1) - m(2, 2)).sqrt() * 2.0;
        [
            (m(2, 1) - m(1, 2)) / s,
            0.25 * s,
            (m(0, 1) + m(1, 0)) / s,
            (m(0, 2) + m(2, 0)) / s,
        ]
    } else if m(1, 1) > m(2, 2) {
        let s = (1.0 + m(1, 1) - m(0, 0) - m(2, 2)).sqrt() * 2.0;
        [
            (m(0, 2) - m(2, 0)) / s,
            (m(0, 1) + m(1, 0)) / s,
            0.25 * s,
            (m(1, 2) + m(2, 1)) / s,
        ]
    } else {
        let s = (1.0 + m(2, 2) - m(0, 0) - m(1, 1)).sqrt() * 2.0;
        [
            (m(1, 0) - m(0, 1)) / s,
            (m(0, 2) + m(2, 0)) / s,
            (m(1, 2) + m(2, 1)) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|x| sign * x / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix(q: [f64; 4]) -> RotMat3 {
    let [w, x, y, z] = q;
    RotMat3::from_rows([
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ])
}

/// Decoded plane normal (third rotation column) together with its Jacobian
/// with respect to the encoding values: `jac[i]` is `∂normal / ∂values[i]`.
pub fn decode_normal_with_jacobian(kind: RotationKind, v: &[f64]) -> Result<(Vec3, Vec<Vec3>)> {
    check_decodable(kind, v)?;
    let mut jac = Vec::with_capacity(v.len());
    let normal = match kind {
        RotationKind::SixD => {
            let a = Vec3::from_slice(&v[0..3]);
            let b = Vec3::from_slice(&v[3..6]);
            let na = a.norm();
            let u = a * (1.0 / na);
            let bp = b - u * b.dot(u);
            let nbp = bp.norm();
            let w = bp * (1.0 / nbp);
            let n = u.cross(w);
            let unit = [Vec3::X, Vec3::Y, Vec3::Z];
            // Forward-mode sweep, one seed direction per input value.
            for (i, &e) in unit.iter().chain(unit.iter()).enumerate() {
                let (da, db) = if i < 3 { (e, Vec3::ZERO) } else { (Vec3::ZERO, e) };
                let du = (da - u * u.dot(da)) * (1.0 / na);
                let dbp = db - (u * db.dot(u) + u * b.dot(du) + du * b.dot(u));
                let dw = (dbp - w * w.dot(dbp)) * (1.0 / nbp);
                jac.push(du.cross(w) + u.cross(dw));
            }
            n
        }
        RotationKind::Quaternion => {
            let nq = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let q = [v[0] / nq, v[1] / nq, v[2] / nq, v[3] / nq];
            let [w, x, y, z] = q;
            for i in 0..4 {
                let mut dq = [0.0; 4];
                for (j, d) in dq.iter_mut().enumerate() {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    *d = (delta - q[j] * q[i]) / nq;
                }
                let [dw, dx, dy, dz] = dq;
                jac.push(Vec3::new(
                    2.0 * (dx * z + x * dz + dw * y + w * dy),
                    2.0 * (dy * z + y * dz - dw * x - w * dx),
                    -4.0 * (x * dx + y * dy),
                ));
            }
            Vec3::new(2.0 * (x * z + w * y), 2.0 * (y * z - w * x), 1.0 - 2.0 * (x * x + y * y))
        }
        RotationKind::EulerSinCos => {
            let (a, b, c) = (v[0].atan2(v[1]), v[2].atan2(v[3]), v[4].atan2(v[5]));
            let (sa, ca) = a.sin_cos();
            let (sb, cb) = b.sin_cos();
            let (sc, cc) = c.sin_cos();
            let d_angle = [
                Vec3::new(-sa * sb * cc + ca * sc, ca * sb * cc + sa * sc, 0.0),
                Vec3::new(ca * cb * cc, sa * cb * cc, -sb * cc),
                Vec3::new(-ca * sb * sc + sa * cc, -sa * sb * sc - ca * cc, -cb * sc),
            ];
            for (k, pair) in v.chunks(2).enumerate() {
                let (s, co) = (pair[0], pair[1]);
                let m = s * s + co * co;
                // d atan2(s, c) = (c ds − s dc) / (s² + c²)
                jac.push(d_angle[k] * (co / m));
                jac.push(d_angle[k] * (-s / m));
            }
            Vec3::new(ca * sb * cc + sa * sc, sa * sb * cc - ca * sc, cb * cc)
        }
    };
    Ok((normal, jac))
}

/// `e_u × e_v` for unit, orthogonal inputs.
pub fn plane_normal(e_u: Vec3, e_v: Vec3) -> Result<Vec3> {
    check_axes(e_u, e_v, AXIS_TOLERANCE)?;
    Ok(e_u.cross(e_v))
}

fn check_axes(e_u: Vec3, e_v: Vec3, tol: f64) -> Result<()> {
    if !(e_u.is_finite() && e_v.is_finite()) {
        return Err(Error::Precondition("non-finite plane axis".into()));
    }
    let (nu, nv, d) = (e_u.norm(), e_v.norm(), e_u.dot(e_v));
    if (nu - 1.0).abs() > tol || (nv - 1.0).abs() > tol {
        return Err(Error::Precondition(format!(
            "plane axes must be unit length (|e_u| = {nu}, |e_v| = {nv})"
        )));
    }
    if d.abs() > tol {
        return Err(Error::Precondition(format!("plane axes not orthogonal (e_u·e_v = {d:e})")));
    }
    Ok(())
}

/// A standard plane: center `A` plus in-plane right/up unit vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneFrame {
    center: Vec3,
    e_u: Vec3,
    e_v: Vec3,
}

impl PlaneFrame {
    /// Builds a frame from axes that are unit and orthogonal within
    /// [`AXIS_TOLERANCE`]; the stored axes are re-orthonormalized.
    pub fn new(center: Vec3, e_u: Vec3, e_v: Vec3) -> Result<Self> {
        if !center.is_finite() {
            return Err(Error::Precondition("non-finite plane center".into()));
        }
        check_axes(e_u, e_v, AXIS_TOLERANCE)?;
        let (u, v) = gram_schmidt(e_u, e_v);
        Ok(PlaneFrame { center, e_u: u, e_v: v })
    }

    /// Frame whose axes are the first two columns of a rotation matrix.
    pub fn from_rotation(center: Vec3, r: &RotMat3) -> Result<Self> {
        PlaneFrame::new(center, r.col(0), r.col(1))
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn e_u(&self) -> Vec3 {
        self.e_u
    }

    pub fn e_v(&self) -> Vec3 {
        self.e_v
    }

    pub fn normal(&self) -> Vec3 {
        self.e_u.cross(self.e_v)
    }

    /// `R = [e_u, e_v, e_u × e_v]`.
    pub fn rotation(&self) -> RotMat3 {
        RotMat3::from_columns(self.e_u, self.e_v, self.normal())
    }

    pub fn with_center(&self, center: Vec3) -> Self {
        PlaneFrame { center, ..*self }
    }

    /// Largest deviation of the stored axes from orthonormality.
    pub fn axis_error(&self) -> f64 {
        let n = self.normal();
        [
            (self.e_u.norm() - 1.0).abs(),
            (self.e_v.norm() - 1.0).abs(),
            (n.norm() - 1.0).abs(),
            self.e_u.dot(self.e_v).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn frame_to_rotation(p: &PlaneFrame) -> RotMat3 {
    p.rotation()
}

pub fn rotation_to_frame(center: Vec3, r: &RotMat3) -> Result<PlaneFrame> {
    PlaneFrame::from_rotation(center, r)
}

/// Maps a world point (volume center at the origin) into the unit cube
/// coordinates used for regression targets.
pub fn normalize_translation(a: Vec3, extent_mm: f64) -> Vec3 {
    a * (1.0 / extent_mm)
}

pub fn denormalize_translation(n: Vec3, extent_mm: f64) -> Vec3 {
    n * extent_mm
}

/// Homogeneous 4×4 transform, row-major. Rigid motion optionally combined
/// with a uniform scale and an x-mirror.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    m: [[f64; 4]; 4],
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        m: [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
    };

    pub fn from_linear(linear: &RotMat3, translation: Vec3) -> Self {
        let mut m = RigidTransform::IDENTITY.m;
        for (i, row) in m.iter_mut().take(3).enumerate() {
            for (j, x) in row.iter_mut().take(3).enumerate() {
                *x = linear.get(i, j);
            }
            row[3] = translation[i];
        }
        RigidTransform { m }
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform::from_linear(&RotMat3::IDENTITY, t)
    }

    pub fn rotation(r: &RotMat3) -> Self {
        RigidTransform::from_linear(r, Vec3::ZERO)
    }

    pub fn uniform_scale(s: f64) -> Self {
        let l = RotMat3::from_columns(Vec3::X * s, Vec3::Y * s, Vec3::Z * s);
        RigidTransform::from_linear(&l, Vec3::ZERO)
    }

    /// Reflection `x → −x`.
    pub fn mirror_x() -> Self {
        let l = RotMat3::from_columns(-Vec3::X, Vec3::Y, Vec3::Z);
        RigidTransform::from_linear(&l, Vec3::ZERO)
    }

    pub fn matrix(&self) -> &[[f64; 4]; 4] {
        &self.m
    }

    pub fn linear(&self) -> RotMat3 {
        RotMat3::from_rows([
            [self.m[0][0], self.m[0][1], self.m[0][2]],
            [self.m[1][0], self.m[1][1], self.m[1][2]],
            [self.m[2][0], self.m[2][1], self.m[2][2]],
        ])
    }

    pub fn translation_part(&self) -> Vec3 {
        Vec3::new(self.m[0][3], self.m[1][3], self.m[2][3])
    }

    /// Matrix product `self · rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &RigidTransform) -> RigidTransform {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (0..4).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        RigidTransform { m }
    }

    /// `next ∘ self`: apply `self`, then `next`.
    pub fn then(&self, next: &RigidTransform) -> RigidTransform {
        next.mul(self)
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z + m[0][3],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z + m[1][3],
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z + m[2][3],
        )
    }

    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn linear_det(&self) -> f64 {
        self.linear().det()
    }

    pub fn is_mirroring(&self) -> bool {
        self.linear_det() < 0.0
    }

    /// Inverse of the affine map; fails when the linear part is singular.
    pub fn inverse(&self) -> Result<RigidTransform> {
        let l = self.linear();
        let det = l.det();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(Error::SingularTransform(det));
        }
        // inverse = adjugate / det; rows of the inverse are cross products of columns.
        let (c0, c1, c2) = (l.col(0), l.col(1), l.col(2));
        let inv = RotMat3::from_rows([
            (c1.cross(c2) * (1.0 / det)).to_array(),
            (c2.cross(c0) * (1.0 / det)).to_array(),
            (c0.cross(c1) * (1.0 / det)).to_array(),
        ]);
        let t = -inv.mul_vec(self.translation_part());
        Ok(RigidTransform::from_linear(&inv, t))
    }

    /// Largest absolute entry difference.
    pub fn max_abs_diff(&self, o: &RigidTransform) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        d
    }

    /// Checks the bottom row and that the linear part is orthogonal times a
    /// uniform scale in `[0.9, 1.1]`.
    pub fn validate(&self) -> Result<()> {
        if self.m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Precondition("bottom row must be (0, 0, 0, 1)".into()));
        }
        let l = self.linear();
        let s = l.det().abs().cbrt();
        if !(0.9 - 1e-9..=1.1 + 1e-9).contains(&s) {
            return Err(Error::Precondition(format!("scale {s} outside [0.9, 1.1]")));
        }
        let unit = RotMat3::from_columns(l.col(0) * (1.0 / s), l.col(1) * (1.0 / s), l.col(2) * (1.0 / s));
        if unit.orthonormality_error() > 1e-6 {
            return Err(Error::Precondition("linear part is not a scaled orthogonal matrix".into()));
        }
        Ok(())
    }
}

/// Ordered product: the composite applies `ts[0]` first, then `ts[1]`, ...
/// An empty list gives the identity.
pub fn compose_transforms(ts: &[RigidTransform]) -> RigidTransform {
    ts.iter()
        .fold(RigidTransform::IDENTITY, |acc, t| acc.then(t))
}

/// Carries a plane through `t`: the center as a point, the in-plane axes as
/// directions (re-normalized). Under a mirror the axes are kept as
/// transformed, so the implied normal `e_u' × e_v'` stays right-handed.
pub fn transform_plane(t: &RigidTransform, p: &PlaneFrame) -> PlaneFrame {
    let center = t.apply_point(p.center);
    let u = t.apply_vector(p.e_u).normalized();
    let v = t.apply_vector(p.e_v);
    // Uniform scale keeps the axes orthogonal; this only removes rounding.
    let v = (v - u * v.dot(u)).normalized();
    PlaneFrame { center, e_u: u, e_v: v }
}

/// A plane together with its anatomical name, as stored in annotation files.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedPlane {
    pub name: String,
    pub frame: PlaneFrame,
}

/// Parses the annotation text format: one plane per line,
/// `name Ax Ay Az ux uy uz vx vy vz` in world millimetres; `#` starts a comment.
pub fn parse_planes(text: &str, source: &Path) -> Result<Vec<NamedPlane>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(Error::parse(
                source,
                lineno + 1,
                format!("expected 10 fields (name + 9 numbers), found {}", fields.len()),
            ));
        }
        let mut nums = [0.0; 9];
        for (k, f) in fields[1..].iter().enumerate() {
            nums[k] = f
                .parse::<f64>()
                .map_err(|_| Error::parse(source, lineno + 1, format!("'{f}' is not a number")))?;
        }
        let frame = PlaneFrame::new(
            Vec3::from_slice(&nums[0..3]),
            Vec3::from_slice(&nums[3..6]),
            Vec3::from_slice(&nums[6..9]),
        )
        .map_err(|e| Error::parse(source, lineno + 1, e.to_string()))?;
        out.push(NamedPlane {
            name: fields[0].to_string(),
            frame,
        });
    }
    Ok(out)
}

pub fn format_planes(planes: &[NamedPlane]) -> String {
    let mut s = String::from("# name Ax Ay Az ux uy uz vx vy vz (mm, world coordinates)\n");
    for p in planes {
        let (a, u, v) = (p.frame.center(), p.frame.e_u(), p.frame.e_v());
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {}\n",
            p.name, a.x, a.y, a.z, u.x, u.y, u.z, v.x, v.y, v.z
        ));
    }
    s
}

pub fn read_planes(path: &Path) -> Result<Vec<NamedPlane>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_planes(&text, path)
}

pub fn write_planes(path: &Path, planes: &[NamedPlane]) -> Result<()> {
    crate::io::write_atomic(path, format_planes(planes).as_bytes())
}
