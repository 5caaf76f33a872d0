//! Sensor-frame to map-frame calibration as a single global 2D affine
//! transform, declared in config instead of hand-matched against video.

use super::{normalize_angle, IngestError, TrackRecord};
use crate::exec;
use serde::{Deserialize, Serialize};

const DET_EPS: f64 = 1e-9;

/// 2x3 affine map from sensor (x, y) to map (x, y), meters.
///
/// `affine = [[a, b, tx], [c, d, ty]]` maps `p` to `(a*x + b*y + tx,
/// c*x + d*y + ty)`. The 2x2 linear part must be invertible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub affine: [[f64; 3]; 2],
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self::identity()
    }
}

impl CalibrationConfig {
    pub fn identity() -> Self {
        CalibrationConfig {
            affine: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    /// Rotation by `angle` radians, uniform scale, then translation.
    pub fn similarity(angle: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        CalibrationConfig {
            affine: [[scale * c, -scale * s, tx], [scale * s, scale * c, ty]],
        }
    }

    pub fn det(&self) -> f64 {
        let a = &self.affine;
        a[0][0] * a[1][1] - a[0][1] * a[1][0]
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let det = self.det();
        if det.abs() <= DET_EPS || !det.is_finite() {
            return Err(IngestError::SingularCalibration { det });
        }
        Ok(())
    }

    /// Angle the linear part rotates the x-axis by.
    pub fn rotation_angle(&self) -> f64 {
        self.affine[1][0].atan2(self.affine[0][0])
    }

    /// Uniform in-plane scale factor, `sqrt(|det|)`.
    pub fn scale_factor(&self) -> f64 {
        self.det().abs().sqrt()
    }

    pub fn transform_point(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.affine;
        (
            a[0][0] * x + a[0][1] * y + a[0][2],
            a[1][0] * x + a[1][1] * y + a[1][2],
        )
    }

    /// Linear part only; what velocities transform by.
    pub fn transform_vector(&self, x: f64, y: f64) -> (f64, f64) {
        let a = &self.affine;
        (a[0][0] * x + a[0][1] * y, a[1][0] * x + a[1][1] * y)
    }

    /// `self` after `other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &CalibrationConfig) -> CalibrationConfig {
        let a = &self.affine;
        let b = &other.affine;
        let mut out = [[0.0; 3]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
            out[i][2] = a[i][0] * b[0][2] + a[i][1] * b[1][2] + a[i][2];
        }
        CalibrationConfig { affine: out }
    }
}

/// Calibrate records into the map frame: positions through the full affine,
/// velocities through the linear part, yaw shifted by the rotation angle,
/// in-plane box dims scaled by the uniform scale factor. Height is
/// untouched by a 2D calibration.
pub fn apply_calibration(
    records: &[TrackRecord],
    cal: &CalibrationConfig,
) -> Result<Vec<TrackRecord>, IngestError> {
    cal.validate()?;
    let rot = cal.rotation_angle();
    let scale = cal.scale_factor();
    Ok(exec::map_collect(records, |r| {
        let (pos_x, pos_y) = cal.transform_point(r.pos_x, r.pos_y);
        let (vel_x, vel_y) = cal.transform_vector(r.vel_x, r.vel_y);
        TrackRecord {
            pos_x,
            pos_y,
            vel_x,
            vel_y,
            yaw: normalize_angle(r.yaw + rot),
            box_length: r.box_length * scale,
            box_width: r.box_width * scale,
            ..r.clone()
        }
    }))
}
