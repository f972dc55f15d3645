use crate::quat::{mat3_mul, mat3_mul_vec, rot6_to_mat3, UnitQuat};
use serde::{Deserialize, Serialize};

/// Joints of the fixed skeleton: left/right hip, knee, ankle, shoulder.
pub const JOINT_COUNT: usize = 8;
pub const ANKLE_JOINTS: [usize; 2] = [4, 5];

/// One frame: world root translation, global root orientation, and
/// parent-relative joint rotations in the continuous 6-vector form.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub root_translation: [f64; 3],
    pub root_orientation: UnitQuat,
    pub joint_rotations: Vec<[f64; 6]>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            root_translation: [0.0; 3],
            root_orientation: UnitQuat::IDENTITY,
            joint_rotations: vec![UnitQuat::IDENTITY.to_rot6(); JOINT_COUNT],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_rotations.len()
    }
}

/// Gait action vocabulary index plus the size of its label space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionLabel {
    pub index: usize,
    pub num_classes: usize,
}

impl ActionLabel {
    pub fn new(index: usize, num_classes: usize) -> Self {
        assert!(index < num_classes, "label {index} out of {num_classes}");
        ActionLabel { index, num_classes }
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.index] = 1.0;
        v
    }
}

/// An action-labeled, timed sequence of poses.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    pub fps: f64,
    pub label: ActionLabel,
    pub frames: Vec<Pose>,
}

impl MotionSequence {
    pub fn new(id: impl Into<String>, fps: f64, label: ActionLabel, frames: Vec<Pose>) -> Self {
        assert!(!frames.is_empty(), "motion sequence needs at least one frame");
        assert!(fps > 0.0, "fps must be positive");
        let j = frames[0].joint_count();
        assert!(
            frames.iter().all(|f| f.joint_count() == j),
            "frames disagree on joint count"
        );
        MotionSequence {
            id: id.into(),
            fps,
            label,
            frames,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> MotionSequence {
        MotionSequence::new(
            format!("{}[{start}+{len}]", self.id),
            self.fps,
            self.label,
            self.frames[start..start + len].to_vec(),
        )
    }
}

/// Fixed skeleton: per-joint parent (None = root) and rest offset from
/// the parent, meters.
pub struct Skeleton;

impl Skeleton {
    pub const PARENTS: [Option<usize>; JOINT_COUNT] = [
        None,    // 0 hip_l
        None,    // 1 hip_r
        Some(0), // 2 knee_l
        Some(1), // 3 knee_r
        Some(2), // 4 ankle_l
        Some(3), // 5 ankle_r
        None,    // 6 shoulder_l
        None,    // 7 shoulder_r
    ];

    pub const OFFSETS: [[f64; 3]; JOINT_COUNT] = [
        [0.09, -0.05, 0.0],
        [-0.09, -0.05, 0.0],
        [0.0, -0.45, 0.0],
        [0.0, -0.45, 0.0],
        [0.0, -0.45, 0.0],
        [0.0, -0.45, 0.0],
        [0.18, 0.55, 0.0],
        [-0.18, 0.55, 0.0],
    ];

    pub const NAMES: [&'static str; JOINT_COUNT] = [
        "hip_l",
        "hip_r",
        "knee_l",
        "knee_r",
        "ankle_l",
        "ankle_r",
        "shoulder_l",
        "shoulder_r",
    ];

    pub const THIGH_LEN: f64 = 0.45;
    pub const SHIN_LEN: f64 = 0.45;

    /// World position of every joint via forward kinematics.
    pub fn joint_positions(pose: &Pose) -> [[f64; 3]; JOINT_COUNT] {
        let root_m = pose.root_orientation.to_mat3();
        let mut world_rot = [[0.0; 9]; JOINT_COUNT];
        let mut pos = [[0.0; 3]; JOINT_COUNT];
        for j in 0..JOINT_COUNT {
            let local = rot6_to_mat3(&pose.joint_rotations[j]);
            let (parent_rot, parent_pos) = match Self::PARENTS[j] {
                None => (root_m, pose.root_translation),
                Some(p) => (world_rot[p], pos[p]),
            };
            let off = mat3_mul_vec(&parent_rot, Self::OFFSETS[j]);
            pos[j] = [
                parent_pos[0] + off[0],
                parent_pos[1] + off[1],
                parent_pos[2] + off[2],
            ];
            world_rot[j] = mat3_mul(&parent_rot, &local);
        }
        pos
    }
}

/// Yaw of the pose's facing direction: the rotated +Z axis projected on
/// the ground plane.
pub fn heading_of(pose: &Pose) -> f64 {
    let f = pose.root_orientation.rotate([0.0, 0.0, 1.0]);
    f[0].atan2(f[2])
}

/// Rigid ground-plane transform (yaw about +Y plus XZ translation) used to
/// express windows relative to an anchor frame. Vertical position and
/// joint-local rotations are untouched.
#[derive(Clone, Copy, Debug)]
pub struct GroundFrame {
    pub yaw: f64,
    pub tx: f64,
    pub tz: f64,
}

impl GroundFrame {
    /// Frame anchored at `pose`: `to_local(pose)` has zero XZ translation
    /// and zero heading.
    pub fn from_anchor(pose: &Pose) -> Self {
        GroundFrame {
            yaw: heading_of(pose),
            tx: pose.root_translation[0],
            tz: pose.root_translation[2],
        }
    }

    pub fn to_local(&self, pose: &Pose) -> Pose {
        let rot = UnitQuat::from_yaw(-self.yaw);
        let t = [
            pose.root_translation[0] - self.tx,
            pose.root_translation[1],
            pose.root_translation[2] - self.tz,
        ];
        Pose {
            root_translation: rot.rotate(t),
            root_orientation: rot.mul(&pose.root_orientation).normalized(),
            joint_rotations: pose.joint_rotations.clone(),
        }
    }

    pub fn to_world(&self, pose: &Pose) -> Pose {
        let rot = UnitQuat::from_yaw(self.yaw);
        let rt = rot.rotate(pose.root_translation);
        Pose {
            root_translation: [rt[0] + self.tx, rt[1], rt[2] + self.tz],
            root_orientation: rot.mul(&pose.root_orientation).normalized(),
            joint_rotations: pose.joint_rotations.clone(),
        }
    }
}

/// Mean L2 step between consecutive frames in flattened (unnormalized)
/// pose space, over a set of sequences. Used as the motion-magnitude
/// yardstick for boundary-continuity checks.
pub fn mean_frame_step(seqs: &[MotionSequence]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs {
        for w in s.frames.windows(2) {
            let a = crate::vectorize::pose_vectorize(&w[0], None);
            let b = crate::vectorize::pose_vectorize(&w[1], None);
            total += a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            count += 1;
        }
    }
    assert!(count > 0, "mean_frame_step: need at least one frame pair");
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fk_identity_pose_matches_rest_offsets() {
        let pose = Pose::identity();
        let pos = Skeleton::joint_positions(&pose);
        // hip_l at its offset
        assert_eq!(pos[0], [0.09, -0.05, 0.0]);
        // ankle_l = hip offset + two segment drops
        assert!((pos[4][1] - (-0.05 - 0.9)).abs() < 1e-12);
    }

    #[test]
    fn fk_translates_with_root() {
        let mut pose = Pose::identity();
        pose.root_translation = [1.0, 2.0, 3.0];
        let pos = Skeleton::joint_positions(&pose);
        assert!((pos[6][0] - 1.18).abs() < 1e-12);
        assert!((pos[6][1] - 2.55).abs() < 1e-12);
        assert!((pos[6][2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ground_frame_round_trip() {
        let mut pose = Pose::identity();
        pose.root_translation = [2.0, 0.9, -1.0];
        pose.root_orientation = UnitQuat::from_yaw(0.7);
        let frame = GroundFrame {
            yaw: -1.2,
            tx: 5.0,
            tz: 2.5,
        };
        let back = frame.to_world(&frame.to_local(&pose));
        for i in 0..3 {
            assert!((back.root_translation[i] - pose.root_translation[i]).abs() < 1e-12);
        }
        assert!((heading_of(&back) - heading_of(&pose)).abs() < 1e-12);
    }

    #[test]
    fn anchor_frame_zeroes_anchor_pose() {
        let mut pose = Pose::identity();
        pose.root_translation = [3.0, 0.85, -2.0];
        pose.root_orientation = UnitQuat::from_yaw(1.1);
        let f = GroundFrame::from_anchor(&pose);
        let local = f.to_local(&pose);
        assert!(local.root_translation[0].abs() < 1e-12);
        assert!(local.root_translation[2].abs() < 1e-12);
        assert!((local.root_translation[1] - 0.85).abs() < 1e-12);
        assert!(heading_of(&local).abs() < 1e-12);
    }
}
