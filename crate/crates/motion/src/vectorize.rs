use crate::pose::{Pose, JOINT_COUNT};
use crate::quat::UnitQuat;
use crate::MotionError;

/// Flattened pose width: translation (3) + root quaternion (4) + 6 per joint.
pub const POSE_DIM: usize = 3 + 4 + 6 * JOINT_COUNT;

/// Per-feature mean and standard deviation, computed over training frames.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Identity statistics (no-op normalization).
    pub fn identity() -> Self {
        NormStats {
            mean: vec![0.0; POSE_DIM],
            std: vec![1.0; POSE_DIM],
        }
    }

    pub fn normalize(&self, v: &mut [f64]) {
        for i in 0..v.len() {
            v[i] = (v[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn denormalize(&self, v: &mut [f64]) {
        for i in 0..v.len() {
            v[i] = v[i] * self.std[i] + self.mean[i];
        }
    }
}

/// Flatten a pose; when `norm` is given the result is in normalized
/// feature space.
pub fn pose_vectorize(p: &Pose, norm: Option<&NormStats>) -> Vec<f64> {
    let mut v = Vec::with_capacity(POSE_DIM);
    v.extend_from_slice(&p.root_translation);
    v.extend_from_slice(&[
        p.root_orientation.w,
        p.root_orientation.x,
        p.root_orientation.y,
        p.root_orientation.z,
    ]);
    for j in &p.joint_rotations {
        v.extend_from_slice(j);
    }
    if let Some(n) = norm {
        n.normalize(&mut v);
    }
    v
}

/// Rebuild a pose from a flattened vector, inverting `norm` when given.
/// The root quaternion is renormalized.
pub fn pose_devectorize(v: &[f64], norm: Option<&NormStats>) -> Result<Pose, MotionError> {
    if v.len() != POSE_DIM {
        return Err(MotionError::WrongLength {
            expected: POSE_DIM,
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(MotionError::NonFinite("pose vector"));
    }
    let mut v = v.to_vec();
    if let Some(n) = norm {
        n.denormalize(&mut v);
    }
    let q = UnitQuat {
        w: v[3],
        x: v[4],
        y: v[5],
        z: v[6],
    };
    if q.norm() < 1e-9 {
        return Err(MotionError::NonFinite("degenerate root quaternion"));
    }
    let mut joints = Vec::with_capacity(JOINT_COUNT);
    for j in 0..JOINT_COUNT {
        let base = 7 + 6 * j;
        joints.push([
            v[base],
            v[base + 1],
            v[base + 2],
            v[base + 3],
            v[base + 4],
            v[base + 5],
        ]);
    }
    Ok(Pose {
        root_translation: [v[0], v[1], v[2]],
        root_orientation: q.normalized(),
        joint_rotations: joints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_round_trips_exactly() {
        let p = Pose::identity();
        let v = pose_vectorize(&p, None);
        let back = pose_devectorize(&v, None).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn wrong_length_rejected() {
        let v = vec![0.0; POSE_DIM - 1];
        assert!(matches!(
            pose_devectorize(&v, None),
            Err(MotionError::WrongLength { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut v = pose_vectorize(&Pose::identity(), None);
        v[5] = f64::NAN;
        assert!(matches!(
            pose_devectorize(&v, None),
            Err(MotionError::NonFinite(_))
        ));
    }
}
