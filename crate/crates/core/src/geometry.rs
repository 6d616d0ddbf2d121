//! Camera models, reprojection residuals, and analytic Jacobians.
//!
//! The projection follows the BAL convention: a world point is rotated by an
//! angle-axis vector, translated, divided by the negated depth, radially
//! distorted and scaled by the focal length. Two camera parameterizations are
//! supported: 9 parameters (rotation, translation, focal, k1, k2) and 11
//! parameters (adding the principal point cx, cy).

use nalgebra::{Matrix2x3, Matrix2xX, Matrix3, Point3, Vector2, Vector3};
use thiserror::Error;

/// Transformed depths closer to the camera plane than this are rejected.
pub const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate projection: transformed depth {depth:e} is below {MIN_DEPTH:e}")]
    DegenerateProjection { depth: f64 },
}

/// Number of camera unknowns per image block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    /// 3 rotation + 3 translation + focal + k1 + k2 (BAL files).
    Bal9,
    /// Bal9 plus principal point cx, cy.
    Full11,
}

impl CameraModel {
    pub fn param_count(self) -> usize {
        match self {
            CameraModel::Bal9 => 9,
            CameraModel::Full11 => 11,
        }
    }

    /// Number of interior parameters (focal and distortion, plus cx/cy in 11-mode).
    pub fn intrinsic_count(self) -> usize {
        self.param_count() - 6
    }
}

/// Exterior orientation: angle-axis rotation and translation, both in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }
}

/// Interior parameters. `cx`/`cy` take part only in [`CameraModel::Full11`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub focal: f64,
    pub k1: f64,
    pub k2: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn from_focal(focal: f64) -> Self {
        CameraIntrinsics {
            focal,
            k1: 0.0,
            k2: 0.0,
            cx: 0.0,
            cy: 0.0,
        }
    }
}

/// One image measurement of a 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub camera_id: usize,
    pub point_id: usize,
    pub pixel: Vector2<f64>,
}

/// Residual and its derivatives for a single observation.
///
/// `j_cam` has one column per camera parameter in block order (rotation,
/// translation, then intrinsics); `j_pt` differentiates with respect to the
/// point coordinates. `residual` is predicted minus observed, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianPair {
    pub j_cam: Matrix2xX<f64>,
    pub j_pt: Matrix2x3<f64>,
    pub residual: Vector2<f64>,
}

/// Rotate `x` by the angle-axis vector `omega` (Rodrigues formula).
pub fn rotate(omega: &Vector3<f64>, x: &Vector3<f64>) -> Vector3<f64> {
    let theta_sq = omega.norm_squared();
    if theta_sq < 1e-16 {
        // Second-order Taylor expansion keeps the small-angle branch smooth.
        return x + omega.cross(x) + 0.5 * omega.cross(&omega.cross(x));
    }
    let theta = theta_sq.sqrt();
    let axis = omega / theta;
    let (sin, cos) = theta.sin_cos();
    x * cos + axis.cross(x) * sin + axis * (axis.dot(x) * (1.0 - cos))
}

/// Rotation matrix for an angle-axis vector.
pub fn rotation_matrix(omega: &Vector3<f64>) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for col in 0..3 {
        let e = Vector3::from_fn(|r, _| if r == col { 1.0 } else { 0.0 });
        m.set_column(col, &rotate(omega, &e));
    }
    m
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotated vector together with its derivative in the angle-axis parameters.
///
/// The derivative comes from differentiating the Rodrigues form
/// `R(w)x = cos(t) x + sin(t)/t (w × x) + (1-cos(t))/t^2 w (wᵀx)` in `w`
/// directly, with series limits below t^2 = 1e-16.
fn rotate_with_jacobian(omega: &Vector3<f64>, x: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let theta_sq = omega.norm_squared();
    let wx = omega.cross(x);
    let wdx = omega.dot(x);
    if theta_sq < 1e-16 {
        let y = x + wx + 0.5 * omega.cross(&wx);
        let jac = -skew(x)
            + 0.5 * (omega * x.transpose() + Matrix3::identity() * wdx)
            - x * omega.transpose();
        return (y, jac);
    }
    let theta = theta_sq.sqrt();
    let (sin, cos) = theta.sin_cos();
    // Coefficients and their directional derivatives along omega.
    let b = sin / theta;
    let c = (1.0 - cos) / theta_sq;
    let da = -b; // d(cos t)/dt / t   times omega^T applied below
    let db = (theta * cos - sin) / (theta_sq * theta);
    let dc = (theta * sin - 2.0 * (1.0 - cos)) / (theta_sq * theta_sq);

    let y = x * cos + wx * b + omega * (wdx * c);
    let omega_t = omega.transpose();
    let jac = x * (da * omega_t)
        + wx * (db * omega_t)
        - b * skew(x)
        + omega * (wdx * dc * omega_t)
        + c * (omega * x.transpose() + Matrix3::identity() * wdx);
    (y, jac)
}

/// Predicted pixel for a world point.
///
/// Fails with [`GeometryError::DegenerateProjection`] when the transformed
/// depth is smaller than [`MIN_DEPTH`] in magnitude.
pub fn project(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    model: CameraModel,
    point: &Point3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let p = rotate(&pose.rotation, &point.coords) + pose.translation;
    if p.z.abs() < MIN_DEPTH {
        return Err(GeometryError::DegenerateProjection { depth: p.z });
    }
    let u = -p.x / p.z;
    let v = -p.y / p.z;
    let rho_sq = u * u + v * v;
    let distortion = 1.0 + rho_sq * (intr.k1 + intr.k2 * rho_sq);
    let mut pixel = Vector2::new(u, v) * (intr.focal * distortion);
    if model == CameraModel::Full11 {
        pixel += Vector2::new(intr.cx, intr.cy);
    }
    Ok(pixel)
}

/// Residual (predicted minus observed) and analytic Jacobians for one observation.
pub fn residual_and_jacobian(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    model: CameraModel,
    point: &Point3<f64>,
    observed: &Vector2<f64>,
) -> Result<JacobianPair, GeometryError> {
    let (rotated, dr_domega) = rotate_with_jacobian(&pose.rotation, &point.coords);
    let p = rotated + pose.translation;
    if p.z.abs() < MIN_DEPTH {
        return Err(GeometryError::DegenerateProjection { depth: p.z });
    }

    let inv_z = 1.0 / p.z;
    let u = -p.x * inv_z;
    let v = -p.y * inv_z;
    let rho_sq = u * u + v * v;
    let distortion = 1.0 + rho_sq * (intr.k1 + intr.k2 * rho_sq);
    let predicted_xy = Vector2::new(u, v);
    let mut predicted = predicted_xy * (intr.focal * distortion);
    if model == CameraModel::Full11 {
        predicted += Vector2::new(intr.cx, intr.cy);
    }

    // d(u,v)/dP: perspective divide with negated depth.
    let duv_dp = Matrix2x3::new(
        -inv_z,
        0.0,
        p.x * inv_z * inv_z,
        0.0,
        -inv_z,
        p.y * inv_z * inv_z,
    );
    // d(pixel)/d(u,v): focal times distorted identity plus the radial term.
    let dr_drho = intr.k1 + 2.0 * intr.k2 * rho_sq; // d(distortion)/d(rho_sq)
    let radial = 2.0 * dr_drho;
    let dpix_duv = intr.focal
        * nalgebra::Matrix2::new(
            distortion + radial * u * u,
            radial * u * v,
            radial * u * v,
            distortion + radial * v * v,
        );
    let dpix_dp = dpix_duv * duv_dp;

    let c = model.param_count();
    let mut j_cam = Matrix2xX::zeros(c);
    // Rotation and translation columns.
    let j_rot = dpix_dp * dr_domega;
    let j_trans = dpix_dp;
    for col in 0..3 {
        j_cam.set_column(col, &j_rot.column(col).into_owned());
        j_cam.set_column(3 + col, &j_trans.column(col).into_owned());
    }
    // Intrinsics columns: focal, k1, k2 (and cx, cy in 11-mode).
    j_cam.set_column(6, &(predicted_xy * distortion));
    j_cam.set_column(7, &(predicted_xy * (intr.focal * rho_sq)));
    j_cam.set_column(8, &(predicted_xy * (intr.focal * rho_sq * rho_sq)));
    if model == CameraModel::Full11 {
        j_cam[(0, 9)] = 1.0;
        j_cam[(1, 10)] = 1.0;
    }

    let rotation = rotation_matrix(&pose.rotation);
    let j_pt = dpix_dp * rotation;

    Ok(JacobianPair {
        j_cam,
        j_pt,
        residual: predicted - observed,
    })
}
