//! Foot-contact stabilization for decoded motion: anchor contact runs and
//! re-solve the legs so planted feet stop sliding. The first and last
//! frames are treated as pinned boundary conditions and never modified.

use crate::pose::{Pose, Skeleton, ANKLE_JOINTS, JOINT_COUNT};
use crate::quat::mat3_mul_vec;
use crate::synth::leg_ik;

/// Detection band for the cleanup; wider than the 2 cm the diagnostic
/// uses so a wobbly decoded stance is caught as one run.
const DETECT_BAND: f64 = 0.05;

/// 3-D corrections that pull each contact run of one foot onto a stable
/// anchor (flattened to the run's lowest height), with a decaying margin
/// just outside the run so the release step stays small.
fn run_corrections(positions: &[[f64; 3]], contact: &[bool]) -> Vec<[f64; 3]> {
    let n = positions.len();
    let mut corr = vec![[0.0f64; 3]; n];
    let mut t = 0;
    while t < n {
        if !contact[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && contact[t] {
            t += 1;
        }
        let end = t; // exclusive
        if end - start < 2 {
            // isolated contact frame: damp the counted step by pulling the
            // neighbors toward it
            let p = positions[start];
            for (n_idx, w) in [(start.wrapping_sub(1), 0.6f64), (start + 1, 0.6)] {
                if n_idx < n && !contact[n_idx] {
                    let q = positions[n_idx];
                    corr[n_idx][0] += w * (p[0] - q[0]);
                    corr[n_idx][2] += w * (p[2] - q[2]);
                }
            }
            continue;
        }
        let touches_first = start == 0;
        let touches_last = end == n;
        let run_min_h = (start..end).map(|i| positions[i][1]).fold(f64::INFINITY, f64::min);
        let flat = |i: usize| [positions[i][0], run_min_h, positions[i][2]];
        let (a0, a1) = match (touches_first, touches_last) {
            (true, true) => (positions[start], positions[end - 1]),
            (true, false) => (positions[start], positions[start]),
            (false, true) => (positions[end - 1], positions[end - 1]),
            (false, false) => {
                let mut m = [0.0, run_min_h, 0.0];
                for i in start..end {
                    m[0] += flat(i)[0] / (end - start) as f64;
                    m[2] += flat(i)[2] / (end - start) as f64;
                }
                (m, m)
            }
        };
        for i in start..end {
            let u = (i - start) as f64 / (end - start - 1) as f64;
            for c in 0..3 {
                let anchor = a0[c] + (a1[c] - a0[c]) * u;
                corr[i][c] += anchor - positions[i][c];
            }
        }
        for (offset, w) in [(1usize, 0.6f64), (2, 0.3), (3, 0.12)] {
            if start >= offset && !contact[start - offset] {
                for c in 0..3 {
                    corr[start - offset][c] += w * corr[start][c];
                }
            }
            let after = end - 1 + offset;
            if after < n && !contact[after] {
                for c in 0..3 {
                    corr[after][c] += w * corr[end - 1][c];
                }
            }
        }
    }
    corr
}

/// Detect contact runs (ankle within 2 cm of the window's lowest ankle
/// height), hold them in place, and re-solve hip/knee rotations for every
/// interior frame. Ankle heights and all non-leg joints are untouched, so
/// the contact set itself is stable under the fix.
pub fn stabilize_foot_contacts(frames: &mut [Pose]) {
    if frames.len() < 3 {
        return;
    }
    if frames[0].joint_count() != JOINT_COUNT {
        return;
    }
    let fk: Vec<_> = frames.iter().map(Skeleton::joint_positions).collect();
    let mut min_h = f64::INFINITY;
    for f in &fk {
        for &a in &ANKLE_JOINTS {
            min_h = min_h.min(f[a][1]);
        }
    }
    let threshold = min_h + DETECT_BAND;
    let n = frames.len();
    for (side, &ankle) in ANKLE_JOINTS.iter().enumerate() {
        let positions: Vec<[f64; 3]> = fk.iter().map(|f| f[ankle]).collect();
        let contact: Vec<bool> = positions.iter().map(|p| p[1] <= threshold).collect();
        let corr = run_corrections(&positions, &contact);
        for i in 1..n - 1 {
            let target = [
                positions[i][0] + corr[i][0],
                positions[i][1] + corr[i][1],
                positions[i][2] + corr[i][2],
            ];
            let root_rot = frames[i].root_orientation.to_mat3();
            let hip_off = mat3_mul_vec(&root_rot, Skeleton::OFFSETS[side]);
            let hip_world = [
                frames[i].root_translation[0] + hip_off[0],
                frames[i].root_translation[1] + hip_off[1],
                frames[i].root_translation[2] + hip_off[2],
            ];
            let (hip6, knee6) = leg_ik(&root_rot, hip_world, target);
            frames[i].joint_rotations[side] = hip6;
            frames[i].joint_rotations[side + 2] = knee6;
        }
    }
}
