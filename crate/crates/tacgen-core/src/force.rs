//! Contact force labels.

use serde::{Deserialize, Serialize};

/// Maximum normal force a sensor label may carry, in newtons.
pub const FZ_MAX: f64 = 10.0;

/// 3-axis contact force in newtons: `fx`, `fy` shear, `fz` normal (>= 0 for
/// real contact; exactly 0 only for no-contact frames).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct ForceVector {
    pub fx: f64,
    pub fy: f64,
    pub fz: f64,
}

impl ForceVector {
    pub const ZERO: ForceVector = ForceVector { fx: 0.0, fy: 0.0, fz: 0.0 };

    pub fn new(fx: f64, fy: f64, fz: f64) -> Self {
        Self { fx, fy, fz }
    }

    /// Force change from `initial` to `target` (target minus initial).
    pub fn delta(target: ForceVector, initial: ForceVector) -> ForceVector {
        ForceVector::new(target.fx - initial.fx, target.fy - initial.fy, target.fz - initial.fz)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.fx, self.fy, self.fz]
    }

    pub fn norm(self) -> f64 {
        (self.fx * self.fx + self.fy * self.fy + self.fz * self.fz).sqrt()
    }
}

impl From<[f64; 3]> for ForceVector {
    fn from(a: [f64; 3]) -> Self {
        ForceVector::new(a[0], a[1], a[2])
    }
}

impl From<ForceVector> for [f64; 3] {
    fn from(f: ForceVector) -> Self {
        f.to_array()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_is_target_minus_initial() {
        let i = ForceVector::new(0.5, -0.25, 2.0);
        let t = ForceVector::new(-0.5, 0.25, 8.0);
        let d = ForceVector::delta(t, i);
        assert_eq!(d.to_array(), [-1.0, 0.5, 6.0]);
    }

    #[test]
    fn serializes_as_triple() {
        let f = ForceVector::new(0.1, 0.2, 3.0);
        let s = serde_json::to_string(&f).unwrap();
        assert_eq!(s, "[0.1,0.2,3.0]");
        let back: ForceVector = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }
}
