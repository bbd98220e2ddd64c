//! Contact pose labels and symmetry-aware angle handling.
//!
//! A pose is the contact centre in pixel coordinates plus an in-plane angle in
//! degrees. Objects with rotational symmetry make absolute angles ambiguous,
//! so angles are always stored canonicalized to `[0, period)` where `period`
//! is the object's smallest self-coincidence rotation. A period of 0 marks a
//! rotation-invariant object (sphere): its canonical angle is always 0.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mask::{frame_centre, MaskTransform};

/// Rotational symmetry of a contact shape, given by its period in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSymmetry {
    pub period_deg: f64,
}

impl ObjectSymmetry {
    /// No rotational symmetry: angles live in `[0, 360)`.
    pub const ASYMMETRIC: ObjectSymmetry = ObjectSymmetry { period_deg: 360.0 };
    /// Two-fold symmetry (cylinders): angles live in `[0, 180)`.
    pub const TWO_FOLD: ObjectSymmetry = ObjectSymmetry { period_deg: 180.0 };
    /// Four-fold symmetry (cross): angles live in `[0, 90)`.
    pub const FOUR_FOLD: ObjectSymmetry = ObjectSymmetry { period_deg: 90.0 };
    /// Full rotation invariance (sphere): the angle is always 0.
    pub const ROTATION_INVARIANT: ObjectSymmetry = ObjectSymmetry { period_deg: 0.0 };

    pub fn canonicalize(&self, theta_deg: f64) -> f64 {
        if self.period_deg == 0.0 {
            return 0.0;
        }
        let t = theta_deg.rem_euclid(self.period_deg);
        // rem_euclid can return the period itself through rounding.
        if t >= self.period_deg {
            0.0
        } else {
            t
        }
    }

    /// Smallest angular distance between two angles modulo the period.
    pub fn angle_error_deg(&self, a: f64, b: f64) -> f64 {
        if self.period_deg == 0.0 {
            return 0.0;
        }
        let d = (a - b).rem_euclid(self.period_deg);
        d.min(self.period_deg - d)
    }
}

impl Default for ObjectSymmetry {
    fn default() -> Self {
        Self::ASYMMETRIC
    }
}

/// Contact centre (column `cx`, row `cy`, in pixels) and canonical angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactPose {
    pub cx: f64,
    pub cy: f64,
    pub theta_deg: f64,
}

impl ContactPose {
    pub fn new(cx: f64, cy: f64, theta_deg: f64) -> Self {
        Self { cx, cy, theta_deg }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.cx, self.cy, self.theta_deg]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn in_frame(&self, w: usize, h: usize) -> bool {
        self.cx >= 0.0 && self.cx < w as f64 && self.cy >= 0.0 && self.cy < h as f64
    }
}

/// Pose of a contact after applying `t` to its mask in a `w`x`h` frame: the
/// centre rotates about the frame centre and translates with the mask, the
/// angle advances by `dtheta` and is re-canonicalized. Errors if the new
/// centre leaves the frame.
pub fn pose_from_transform(
    pose: &ContactPose,
    t: &MaskTransform,
    sym: ObjectSymmetry,
    w: usize,
    h: usize,
) -> Result<ContactPose> {
    t.validate(w, h)?;
    let (cx0, cy0) = frame_centre(w, h);
    let rad = (t.dtheta as f64).to_radians();
    let (sin, cos) = (rad.sin(), rad.cos());
    let px = pose.cx - cx0;
    let py = pose.cy - cy0;
    let nx = cos * px - sin * py + cx0 + t.dx as f64;
    let ny = sin * px + cos * py + cy0 + t.dy as f64;
    if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
        return Err(CoreError::PoseOffFrame { cx: nx, cy: ny, w, h });
    }
    let theta = sym.canonicalize(pose.theta_deg + t.dtheta as f64);
    Ok(ContactPose::new(nx, ny, theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_transform_keeps_pose() {
        let p = ContactPose::new(20.0, 40.0, 30.0);
        let q = pose_from_transform(&p, &MaskTransform::IDENTITY, ObjectSymmetry::ASYMMETRIC, 64, 64)
            .unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn centre_pose_only_rotates_angle() {
        let p = ContactPose::new(31.5, 31.5, 10.0);
        let q =
            pose_from_transform(&p, &MaskTransform::new(0, 0, 45), ObjectSymmetry::ASYMMETRIC, 64, 64)
                .unwrap();
        assert!((q.cx - 31.5).abs() < 1e-9 && (q.cy - 31.5).abs() < 1e-9);
        assert!((q.theta_deg - 55.0).abs() < 1e-9);
    }

    #[test]
    fn two_fold_symmetry_wraps_at_half_turn() {
        let sym = ObjectSymmetry::TWO_FOLD;
        assert!((sym.canonicalize(190.0) - 10.0).abs() < 1e-12);
        assert!((sym.canonicalize(-10.0) - 170.0).abs() < 1e-12);
        assert!(sym.angle_error_deg(179.0, 1.0) - 2.0 < 1e-12);
    }

    #[test]
    fn rotation_invariant_angle_is_pinned_to_zero() {
        let sym = ObjectSymmetry::ROTATION_INVARIANT;
        assert_eq!(sym.canonicalize(123.0), 0.0);
        assert_eq!(sym.angle_error_deg(45.0, 300.0), 0.0);
    }

    #[test]
    fn off_frame_centre_is_an_error() {
        let p = ContactPose::new(60.0, 32.0, 0.0);
        let r = pose_from_transform(&p, &MaskTransform::new(10, 0, 0), ObjectSymmetry::ASYMMETRIC, 64, 64);
        assert!(r.is_err());
    }

    #[test]
    fn quarter_turn_matches_mask_rotation_convention() {
        // Same map as transform_mask: (x, y) -> (63 - y, x) at 90 degrees.
        let p = ContactPose::new(10.0, 20.0, 0.0);
        let q =
            pose_from_transform(&p, &MaskTransform::new(0, 0, 90), ObjectSymmetry::ASYMMETRIC, 64, 64)
                .unwrap();
        assert!((q.cx - 43.0).abs() < 1e-9, "cx = {}", q.cx);
        assert!((q.cy - 10.0).abs() < 1e-9, "cy = {}", q.cy);
        assert!((q.theta_deg - 90.0).abs() < 1e-9);
    }
}
