//! World to pixel projection and extrinsic calibration.
//!
//! The camera follows the homogeneous row-vector convention
//!
//! ```text
//! w · [u v 1] = [X Y Z 1] · [R; T] · K
//! ```
//!
//! where `[R; T]` is the 4×3 stack of the rotation rows and the translation
//! row, and `K` carries the focal terms on its diagonal with the principal
//! point in its bottom row. In column form this is `h = Kᵀ (Rᵀ p + T)`, with
//! `Kᵀ` the usual upper-triangular intrinsic matrix.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum homogeneous scale accepted by [`project_world_to_pixel`].
pub const MIN_HOMOGENEOUS_SCALE: f64 = 1e-12;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("homogeneous scale {w:e} is too close to zero")]
    DegenerateProjection { w: f64 },
    #[error("point lies behind the camera (w = {w:e})")]
    BehindCamera { w: f64 },
    #[error("need at least {needed} correspondences, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },
    #[error("calibration system is rank deficient")]
    RankDeficientGeometry,
    #[error("invalid camera model: {0}")]
    InvalidCamera(String),
    #[error("camera file: {0}")]
    Io(#[from] std::io::Error),
    #[error("camera file: {0}")]
    Parse(String),
}

/// A point in the local ENU frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl WorldPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &WorldPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    pub in_frame: bool,
}

/// Pinhole camera in the row-vector convention described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsic: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
}

impl CameraModel {
    pub fn new(
        intrinsic: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        validate_intrinsic(&intrinsic)?;
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err < ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not orthonormal (max deviation {err:e})"
            )));
        }
        if translation.iter().any(|t| !t.is_finite()) {
            return Err(GeometryError::InvalidCamera(
                "translation is not finite".into(),
            ));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::InvalidCamera(
                "image size must be non-zero".into(),
            ));
        }
        Ok(Self {
            intrinsic,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Row-vector intrinsic matrix `[[f_u,0,0],[0,f_v,0],[c_u,c_v,1]]`.
    pub fn row_intrinsic(f_u: f64, f_v: f64, c_u: f64, c_v: f64) -> Matrix3<f64> {
        Matrix3::new(f_u, 0.0, 0.0, 0.0, f_v, 0.0, c_u, c_v, 1.0)
    }

    /// Camera at `position` looking along the horizontal `azimuth` (radians,
    /// counter-clockwise from east) and tilted up by `elevation` radians.
    /// Image `u` grows to the right of the view and `v` grows downward.
    pub fn looking_from(
        position: WorldPoint,
        azimuth: f64,
        elevation: f64,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let (sa, ca) = azimuth.sin_cos();
        let (se, ce) = elevation.sin_cos();
        let forward = Vector3::new(ca * ce, sa * ce, se);
        let right = Vector3::new(sa, -ca, 0.0);
        let down = forward.cross(&right);
        // Columns of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        let translation = -(rotation.transpose() * position.to_vector());
        let k = Self::row_intrinsic(focal, focal, width as f64 / 2.0, height as f64 / 2.0);
        Self::new(k, rotation, translation, width, height)
    }

    pub fn intrinsic(&self) -> &Matrix3<f64> {
        &self.intrinsic
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> WorldPoint {
        WorldPoint::from_vector(&(-(self.rotation * self.translation)))
    }

    /// The homogeneous triple `(w·u, w·v, w)`.
    pub fn homogeneous(&self, p: &WorldPoint) -> Vector3<f64> {
        self.intrinsic.transpose() * (self.rotation.transpose() * p.to_vector() + self.translation)
    }

    pub fn project(&self, p: &WorldPoint) -> Result<PixelPoint, GeometryError> {
        project_world_to_pixel(p, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path)?;
        let file: CameraFile =
            toml::from_str(&text).map_err(|e| GeometryError::Parse(e.to_string()))?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GeometryError> {
        let text = toml::to_string(&CameraFile::from(self))
            .map_err(|e| GeometryError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn validate_intrinsic(k: &Matrix3<f64>) -> Result<(), GeometryError> {
    if k.iter().any(|x| !x.is_finite()) {
        return Err(GeometryError::InvalidCamera(
            "intrinsic is not finite".into(),
        ));
    }
    if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
        return Err(GeometryError::InvalidCamera(
            "focal entries must be positive".into(),
        ));
    }
    if k[(0, 2)] != 0.0 || k[(1, 2)] != 0.0 || k[(2, 2)] != 1.0 {
        return Err(GeometryError::InvalidCamera(
            "last column of K must be (0, 0, 1)".into(),
        ));
    }
    Ok(())
}

/// On-disk camera description. Matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    #[serde(rename = "K")]
    pub k: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl TryFrom<CameraFile> for CameraModel {
    type Error = GeometryError;

    fn try_from(f: CameraFile) -> Result<Self, Self::Error> {
        CameraModel::new(
            Matrix3::from_row_slice(&f.k),
            Matrix3::from_row_slice(&f.r),
            Vector3::from_row_slice(&f.t),
            f.width,
            f.height,
        )
    }
}

impl From<&CameraModel> for CameraFile {
    fn from(c: &CameraModel) -> Self {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for col in 0..3 {
                    out[r * 3 + col] = m[(r, col)];
                }
            }
            out
        };
        CameraFile {
            k: row_major(&c.intrinsic),
            r: row_major(&c.rotation),
            t: [c.translation.x, c.translation.y, c.translation.z],
            width: c.width,
            height: c.height,
        }
    }
}

impl Serialize for CameraModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        CameraFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = CameraFile::deserialize(d)?;
        f.try_into().map_err(serde::de::Error::custom)
    }
}

pub fn project_world_to_pixel(
    p: &WorldPoint,
    cam: &CameraModel,
) -> Result<PixelPoint, GeometryError> {
    let h = cam.homogeneous(p);
    let w = h.z;
    if w.abs() <= MIN_HOMOGENEOUS_SCALE {
        return Err(GeometryError::DegenerateProjection { w });
    }
    if w < 0.0 {
        return Err(GeometryError::BehindCamera { w });
    }
    let u = h.x / w;
    let v = h.y / w;
    Ok(PixelPoint {
        u,
        v,
        in_frame: cam.contains(u, v),
    })
}

#[derive(Debug, Clone)]
pub struct ExtrinsicCalibration {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Mean Euclidean reprojection error over the input correspondences, pixels.
    pub mean_reprojection_error: f64,
}

pub const MIN_CORRESPONDENCES: usize = 6;

/// Estimate `(R, T)` from world/pixel correspondences with known intrinsics.
///
/// A normalized direct linear transform gives the initial pose, its 3×3 block
/// is projected onto the nearest rotation, and a short Levenberg–Marquardt
/// pass then minimizes the squared pixel reprojection error.
pub fn calibrate_extrinsics(
    correspondences: &[(WorldPoint, PixelPoint)],
    intrinsic: &Matrix3<f64>,
) -> Result<ExtrinsicCalibration, GeometryError> {
    if correspondences.len() < MIN_CORRESPONDENCES {
        return Err(GeometryError::InsufficientCorrespondences {
            needed: MIN_CORRESPONDENCES,
            got: correspondences.len(),
        });
    }
    validate_intrinsic(intrinsic)?;
    let k_col = intrinsic.transpose();
    let k_inv = k_col
        .try_inverse()
        .ok_or(GeometryError::RankDeficientGeometry)?;

    // Normalize world points to zero mean, unit RMS distance.
    let n = correspondences.len() as f64;
    let centroid = correspondences
        .iter()
        .fold(Vector3::zeros(), |acc, (p, _)| acc + p.to_vector())
        / n;
    let rms = (correspondences
        .iter()
        .map(|(p, _)| (p.to_vector() - centroid).norm_squared())
        .sum::<f64>()
        / n)
        .sqrt();
    if !(rms > 0.0) {
        return Err(GeometryError::RankDeficientGeometry);
    }
    let scale = 1.0 / rms;

    let mut design = DMatrix::<f64>::zeros(2 * correspondences.len(), 12);
    for (i, (p, px)) in correspondences.iter().enumerate() {
        let q = (p.to_vector() - centroid) * scale;
        let ray = k_inv * Vector3::new(px.u, px.v, 1.0);
        let (nx, ny) = (ray.x / ray.z, ray.y / ray.z);
        let hom = [q.x, q.y, q.z, 1.0];
        for j in 0..4 {
            design[(2 * i, j)] = hom[j];
            design[(2 * i, 8 + j)] = -nx * hom[j];
            design[(2 * i + 1, 4 + j)] = hom[j];
            design[(2 * i + 1, 8 + j)] = -ny * hom[j];
        }
    }
    let svd = (design.transpose() * &design).symmetric_eigen();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| svd.eigenvalues[a].total_cmp(&svd.eigenvalues[b]));
    let largest = svd.eigenvalues[order[11]].max(f64::MIN_POSITIVE);
    // Null space must be one-dimensional.
    if svd.eigenvalues[order[1]] / largest < 1e-20 {
        return Err(GeometryError::RankDeficientGeometry);
    }
    let h = svd.eigenvectors.column(order[0]).into_owned();

    // h holds rows of [s·A | t'] where A = Rᵀ for the normalized points.
    let mut a = Matrix3::zeros();
    let mut t = Vector3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            a[(r, c)] = h[r * 4 + c];
        }
        t[r] = h[r * 4 + 3];
    }
    let det = a.determinant();
    if det.abs() < 1e-300 {
        return Err(GeometryError::RankDeficientGeometry);
    }
    let sign = det.signum();
    a *= sign;
    t *= sign;
    let a_svd = a.svd(true, true);
    let (u, vt) = (a_svd.u.unwrap(), a_svd.v_t.unwrap());
    let sigma_mean = a_svd.singular_values.mean();
    let mut a_rot = u * vt;
    if a_rot.determinant() < 0.0 {
        a_rot = -a_rot;
    }
    // A_n·s(p − c) + t_n = sσ̄·(R·p + t_n/(sσ̄) − R·c)
    let t_init = t / (sigma_mean * scale) - a_rot * centroid;

    let (a_ref, t_ref) = refine_pose(correspondences, &k_col, a_rot, t_init);
    let rotation = a_ref.transpose();
    let mean_reprojection_error = mean_reprojection(correspondences, &k_col, &a_ref, &t_ref);
    if !mean_reprojection_error.is_finite() {
        return Err(GeometryError::RankDeficientGeometry);
    }
    Ok(ExtrinsicCalibration {
        rotation,
        translation: t_ref,
        mean_reprojection_error,
    })
}

fn reproject(
    k_col: &Matrix3<f64>,
    a: &Matrix3<f64>,
    t: &Vector3<f64>,
    p: &WorldPoint,
) -> (f64, f64) {
    let h = k_col * (a * p.to_vector() + t);
    (h.x / h.z, h.y / h.z)
}

fn mean_reprojection(
    corr: &[(WorldPoint, PixelPoint)],
    k_col: &Matrix3<f64>,
    a: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> f64 {
    corr.iter()
        .map(|(p, px)| {
            let (u, v) = reproject(k_col, a, t, p);
            ((u - px.u).powi(2) + (v - px.v).powi(2)).sqrt()
        })
        .sum::<f64>()
        / corr.len() as f64
}

fn sum_sq_reprojection(
    corr: &[(WorldPoint, PixelPoint)],
    k_col: &Matrix3<f64>,
    a: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> f64 {
    corr.iter()
        .map(|(p, px)| {
            let (u, v) = reproject(k_col, a, t, p);
            (u - px.u).powi(2) + (v - px.v).powi(2)
        })
        .sum()
}

fn perturbed(a: &Matrix3<f64>, t: &Vector3<f64>, delta: &[f64; 6]) -> (Matrix3<f64>, Vector3<f64>) {
    let rot = Rotation3::from_scaled_axis(Vector3::new(delta[0], delta[1], delta[2]));
    (
        rot.matrix() * a,
        t + Vector3::new(delta[3], delta[4], delta[5]),
    )
}

/// Levenberg–Marquardt over a left-multiplied rotation increment and T.
fn refine_pose(
    corr: &[(WorldPoint, PixelPoint)],
    k_col: &Matrix3<f64>,
    mut a: Matrix3<f64>,
    mut t: Vector3<f64>,
) -> (Matrix3<f64>, Vector3<f64>) {
    let m = corr.len() * 2;
    let residuals = |a: &Matrix3<f64>, t: &Vector3<f64>| {
        let mut r = nalgebra::DVector::zeros(m);
        for (i, (p, px)) in corr.iter().enumerate() {
            let (u, v) = reproject(k_col, a, t, p);
            r[2 * i] = u - px.u;
            r[2 * i + 1] = v - px.v;
        }
        r
    };
    let mut cost = sum_sq_reprojection(corr, k_col, &a, &t);
    let mut damping = 1e-3;
    for _ in 0..100 {
        let r0 = residuals(&a, &t);
        let mut jac = DMatrix::<f64>::zeros(m, 6);
        for j in 0..6 {
            let step = if j < 3 { 1e-7 } else { 1e-6 * (1.0 + t.norm()) };
            let mut d = [0.0; 6];
            d[j] = step;
            let (ap, tp) = perturbed(&a, &t, &d);
            d[j] = -step;
            let (am, tm) = perturbed(&a, &t, &d);
            let col = (residuals(&ap, &tp) - residuals(&am, &tm)) / (2.0 * step);
            jac.set_column(j, &col);
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r0;
        let mut improved = false;
        for _ in 0..10 {
            let mut lhs = jtj.clone();
            for d in 0..6 {
                lhs[(d, d)] += damping * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = lhs.lu().solve(&(-&g)) else {
                break;
            };
            let delta = [step[0], step[1], step[2], step[3], step[4], step[5]];
            let (an, tn) = perturbed(&a, &t, &delta);
            let new_cost = sum_sq_reprojection(corr, k_col, &an, &tn);
            if new_cost.is_finite() && new_cost <= cost {
                let done = cost - new_cost <= 1e-15 * (1.0 + cost);
                a = an;
                t = tn;
                cost = new_cost;
                damping = (damping * 0.3).max(1e-12);
                improved = !done;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, t)
}
