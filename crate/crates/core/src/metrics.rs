//! Per-task performance α_t: classification accuracy and pose correctness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the orthonormality and determinant checks.
pub const ROTATION_TOLERANCE: f64 = 1e-5;

/// Default pose threshold in degrees; a prediction must be strictly below it.
pub const POSE_THRESHOLD_DEG: f64 = 20.0;

/// A proper rotation, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Rotation([[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NotARotation("non-finite entry".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ROTATION_TOLERANCE {
                    return Err(Error::NotARotation(format!(
                        "(RᵀR)[{i}][{j}] = {dot}, expected {expect}"
                    )));
                }
            }
        }
        let det = det3(&m);
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::NotARotation(format!("determinant {det}")));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.0
    }

    /// Rotation by `degrees` about `axis` (normalized internally).
    pub fn from_axis_angle(axis: [f64; 3], degrees: f64) -> Result<Self> {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if !(n > 0.0) || !n.is_finite() || !degrees.is_finite() {
            return Err(Error::InvalidValue("axis must be a finite nonzero vector".into()));
        }
        let [x, y, z] = axis.map(|v| v / n);
        let (s, c) = degrees.to_radians().sin_cos();
        let t = 1.0 - c;
        Ok(Self([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]))
    }

    pub fn rz(degrees: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], degrees).expect("z axis is valid")
    }

    /// Rotation of the quaternion `[w, x, y, z]` after normalization.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::InvalidValue("quaternion norm must be positive".into()));
        }
        let [w, x, y, z] = q.map(|v| v / n);
        Ok(Self([
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]))
    }

    /// Unit quaternion `[w, x, y, z]` with `w ≥ 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            [0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            [(m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s]
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            [(m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s]
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            [(m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s]
        };
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        q.map(|v| sign * v / n)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Rotation(m)
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        Rotation(std::array::from_fn(|i| std::array::from_fn(|j| m[j][i])))
    }
}

impl TryFrom<[[f64; 3]; 3]> for Rotation {
    type Error = Error;

    fn try_from(m: [[f64; 3]; 3]) -> Result<Self> {
        Rotation::new(m)
    }
}

impl From<Rotation> for [[f64; 3]; 3] {
    fn from(r: Rotation) -> Self {
        r.0
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub class_label: usize,
    pub rotation: Rotation,
}

/// Fraction of exact label matches.
pub fn classification_accuracy<T: PartialEq>(predictions: &[T], truth: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Angle of `R_predᵀ·R_gt` in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(2·sin θ, 2·cos θ)` from the skew part and the trace of
/// the relative rotation. On valid rotations this equals
/// `acos(clamp((tr − 1)/2, −1, 1))` but keeps full precision near 0° and 180°,
/// where the arccosine of a rounded trace loses half the digits.
pub fn geodesic_error(pred: &Rotation, gt: &Rotation) -> f64 {
    let (a, b) = (&pred.0, &gt.0);
    let m: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[k][i] * b[k][j]).sum()));
    let cos2 = m[0][0] + m[1][1] + m[2][2] - 1.0;
    let (sx, sy, sz) = (m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]);
    let sin2 = (sx * sx + sy * sy + sz * sz).sqrt();
    sin2.atan2(cos2).to_degrees()
}

/// Reference form `acos(clamp((trace(R_predᵀ·R_gt) − 1)/2, −1, 1))` in degrees.
pub fn geodesic_error_acos(pred: &Rotation, gt: &Rotation) -> f64 {
    let (a, b) = (&pred.0, &gt.0);
    let trace: f64 = (0..3).flat_map(|i| (0..3).map(move |j| a[i][j] * b[i][j])).sum();
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Fraction of samples whose class is right and whose geodesic error is
/// strictly below `threshold_deg`.
pub fn pose_accuracy(
    predictions: &[PosePrediction],
    truth: &[PosePrediction],
    threshold_deg: f64,
) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| pose_correct(p, t, threshold_deg))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

pub fn pose_correct(pred: &PosePrediction, truth: &PosePrediction, threshold_deg: f64) -> bool {
    pred.class_label == truth.class_label && geodesic_error(&pred.rotation, &truth.rotation) < threshold_deg
}

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_rotation() -> impl Strategy<Value = Rotation> {
        (prop::array::uniform4(-1.0f64..1.0))
            .prop_filter("nonzero", |q| q.iter().map(|v| v * v).sum::<f64>() > 1e-3)
            .prop_map(|q| Rotation::from_quaternion(q).unwrap())
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(classification_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(classification_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(classification_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            classification_accuracy(&[1], &[1, 2]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
        assert!(matches!(classification_accuracy::<u8>(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn geodesic_examples() {
        assert_eq!(geodesic_error(&Rotation::IDENTITY, &Rotation::IDENTITY), 0.0);
        assert!((geodesic_error(&Rotation::IDENTITY, &Rotation::rz(180.0)) - 180.0).abs() < 1e-9);
        let e = geodesic_error(&Rotation::rz(10.0), &Rotation::rz(40.0));
        assert!((e - 30.0).abs() < 1e-9);
        // Independent route: the relative rotation's quaternion angle.
        let rel = Rotation::rz(10.0).transpose().compose(&Rotation::rz(40.0));
        let q = rel.to_quaternion();
        assert!((2.0 * q[0].clamp(-1.0, 1.0).acos().to_degrees() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_invalid_rotations() {
        assert!(Rotation::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]).is_err());
        assert!(Rotation::new([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(Rotation::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        let json = "[[1,0,0],[0,1,0],[0,0,2]]";
        assert!(serde_json::from_str::<Rotation>(json).is_err());
        assert!(Rotation::from_quaternion([0.0; 4]).is_err());
    }

    #[test]
    fn pose_examples() {
        let truth = PosePrediction { class_label: 1, rotation: Rotation::IDENTITY };
        let exact = truth;
        let off = PosePrediction { class_label: 1, rotation: Rotation::rz(25.0) };
        let wrong = PosePrediction { class_label: 2, rotation: Rotation::IDENTITY };
        assert!(pose_correct(&exact, &truth, POSE_THRESHOLD_DEG));
        assert!(!pose_correct(&off, &truth, POSE_THRESHOLD_DEG));
        assert!(!pose_correct(&wrong, &truth, POSE_THRESHOLD_DEG));
        let acc = pose_accuracy(&[exact, off, wrong, exact], &[truth; 4], 20.0).unwrap();
        assert_eq!(acc, 0.5);
    }

    proptest! {
        #[test]
        fn quaternion_round_trip(r in arb_rotation()) {
            let back = Rotation::from_quaternion(r.to_quaternion()).unwrap();
            prop_assert!(geodesic_error(&r, &back) < 1e-5);
            prop_assert!(Rotation::new(*r.matrix()).is_ok());
        }

        #[test]
        fn geodesic_is_symmetric_and_left_invariant(
            a in arb_rotation(), b in arb_rotation(), q in arb_rotation()
        ) {
            let e = geodesic_error(&a, &b);
            prop_assert!((0.0..=180.0).contains(&e));
            prop_assert!((e - geodesic_error(&b, &a)).abs() < 1e-6);
            prop_assert!((e - geodesic_error(&q.compose(&a), &q.compose(&b))).abs() < 1e-5);
            prop_assert!((e - geodesic_error_acos(&a, &b)).abs() < 1e-5);
        }

        #[test]
        fn common_axis_difference_is_folded(
            axis in prop::array::uniform3(-1.0f64..1.0), t1 in -360.0f64..360.0, t2 in -360.0f64..360.0
        ) {
            prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-2);
            let a = Rotation::from_axis_angle(axis, t1).unwrap();
            let b = Rotation::from_axis_angle(axis, t2).unwrap();
            let d = (t1 - t2).rem_euclid(360.0);
            let folded = if d > 180.0 { 360.0 - d } else { d };
            prop_assert!((geodesic_error(&a, &b) - folded).abs() < 1e-5);
        }

        #[test]
        fn pose_accuracy_monotone_in_threshold(
            angles in prop::collection::vec(0.0f64..180.0, 1..20), lo in 0.0f64..90.0, extra in 0.0f64..90.0
        ) {
            let truth: Vec<_> = angles.iter().map(|_| PosePrediction { class_label: 0, rotation: Rotation::IDENTITY }).collect();
            let preds: Vec<_> = angles.iter().map(|&a| PosePrediction { class_label: 0, rotation: Rotation::rz(a) }).collect();
            let tight = pose_accuracy(&preds, &truth, lo).unwrap();
            let loose = pose_accuracy(&preds, &truth, lo + extra).unwrap();
            prop_assert!(tight <= loose);
        }
    }
}
