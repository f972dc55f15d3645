use crate::pose::{ActionLabel, MotionSequence, Pose, Skeleton, JOINT_COUNT};
use crate::quat::{
    axis_angle_mat3, cross, mat3_mul, mat3_mul_vec, mat3_to_rot6, mat3_transpose, norm3,
    rot6_to_mat3, UnitQuat,
};
use crate::MotionError;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const GAIT_ACTIONS: [&str; 4] = ["Walk", "Jog", "Run", "Step"];
pub const TARGET_ACTIONS: [&str; 4] = ["Wave", "SitDown", "JumpPrep", "Reach"];

pub const FPS: f64 = 30.0;
const ROOT_H: f64 = 0.85;
const TARGET_ROOT_H: f64 = 1.0;
const PLANT_H: f64 = 0.06;
/// Feet roll slowly through stance instead of being pinned hard; keeps the
/// skate baseline of real data measurable but well under the 0.05 bound.
const STANCE_DRIFT: f64 = 0.048;
/// Fraction of the swing at each end with zero horizontal motion, so
/// near-ground frames never slide.
const SWING_DEAD: f64 = 0.15;
const NOISE_STD: f64 = 0.01;
const MAX_REACH: f64 = Skeleton::THIGH_LEN + Skeleton::SHIN_LEN - 0.005;

/// Stride frequency (Hz), travel speed (m/s), lateral travel flag, and
/// swing foot lift (m) per gait action.
pub fn gait_params(index: usize) -> Result<(f64, f64, bool, f64), MotionError> {
    match index {
        0 => Ok((1.0, 1.2, false, 0.06)), // Walk
        1 => Ok((1.6, 2.2, false, 0.09)), // Jog
        2 => Ok((2.2, 3.5, false, 0.12)), // Run
        3 => Ok((1.2, 0.6, true, 0.06)),  // Step
        _ => Err(MotionError::UnknownAction {
            index,
            num_classes: GAIT_ACTIONS.len(),
        }),
    }
}

/// Left foot carries weight during the first half of each stride cycle.
pub fn left_foot_in_stance(freq: f64, t: f64) -> bool {
    (t * freq).rem_euclid(1.0) < 0.5
}

/// Optional initial placement for chaining arcs.
#[derive(Clone, Copy, Debug, Default)]
pub struct GaitStart {
    pub position: [f64; 2], // x, z
    pub heading: f64,
}

struct ArcPath {
    x0: f64,
    z0: f64,
    psi0: f64,
    omega: f64,
    speed: f64,
    lateral: bool,
}

impl ArcPath {
    fn heading(&self, t: f64) -> f64 {
        self.psi0 + self.omega * t
    }

    /// Movement direction angle; sideways travel for the step gait.
    fn travel_angle(&self, t: f64) -> f64 {
        self.heading(t) + if self.lateral { std::f64::consts::FRAC_PI_2 } else { 0.0 }
    }

    /// Closed-form integral of constant speed along the turning heading.
    fn position(&self, t: f64) -> [f64; 2] {
        let phi0 = self.travel_angle(0.0);
        let phi = self.travel_angle(t);
        if self.omega.abs() < 1e-12 {
            [
                self.x0 + self.speed * t * phi0.sin(),
                self.z0 + self.speed * t * phi0.cos(),
            ]
        } else {
            [
                self.x0 + self.speed * (phi0.cos() - phi.cos()) / self.omega,
                self.z0 + self.speed * (phi.sin() - phi0.sin()) / self.omega,
            ]
        }
    }
}

fn rotate_y_xz(psi: f64, x: f64, z: f64) -> [f64; 2] {
    [x * psi.cos() + z * psi.sin(), -x * psi.sin() + z * psi.cos()]
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Horizontal swing progress with dead zones at lift-off and touchdown.
fn swing_progress(u: f64) -> f64 {
    smoothstep((u - SWING_DEAD) / (1.0 - 2.0 * SWING_DEAD))
}

/// Per-foot contact plan: world plant anchors per stride cycle, jittered
/// by the sequence seed.
struct FootPlan {
    /// plant anchor (x, z) per cycle index, offset by `first_cycle`
    anchors: Vec<[f64; 2]>,
    /// drift direction at each anchor
    drifts: Vec<[f64; 2]>,
    first_cycle: i64,
    cycle: f64,
    stance_mid_frac: f64, // cycle fraction of mid-stance
}

impl FootPlan {
    fn build(
        path: &ArcPath,
        freq: f64,
        duration: f64,
        side_x: f64,
        stance_start_frac: f64,
        rng: &mut ChaCha8Rng,
    ) -> FootPlan {
        let cycle = 1.0 / freq;
        let first_cycle = -2i64;
        let last_cycle = (duration / cycle).ceil() as i64 + 2;
        let stance_mid_frac = stance_start_frac + 0.25;
        let mut anchors = Vec::new();
        let mut drifts = Vec::new();
        for m in first_cycle..=last_cycle {
            let mid = (m as f64 + stance_mid_frac) * cycle;
            let hip = path.position(mid);
            let off = rotate_y_xz(path.heading(mid), side_x, 0.0);
            let jx: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
            let jz: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
            anchors.push([hip[0] + off[0] + jx, hip[1] + off[1] + jz]);
            let phi = path.travel_angle(mid);
            drifts.push([phi.sin(), phi.cos()]);
        }
        FootPlan {
            anchors,
            drifts,
            first_cycle,
            cycle,
            stance_mid_frac,
        }
    }

    fn anchor(&self, m: i64) -> ([f64; 2], [f64; 2]) {
        let i = (m - self.first_cycle) as usize;
        (self.anchors[i], self.drifts[i])
    }

    /// Stance position at time `t` within cycle `m`: anchor plus slow roll.
    fn stance_pos(&self, m: i64, t: f64) -> [f64; 2] {
        let (a, d) = self.anchor(m);
        let mid = (m as f64 + self.stance_mid_frac) * self.cycle;
        [
            a[0] + d[0] * STANCE_DRIFT * (t - mid),
            a[1] + d[1] * STANCE_DRIFT * (t - mid),
        ]
    }
}

/// World ankle target (x, y, z) for one foot at time `t`.
/// `stance_start_frac` is 0.0 for the left foot, 0.5 for the right.
fn foot_target(plan: &FootPlan, stance_start_frac: f64, lift: f64, t: f64) -> [f64; 3] {
    let cycle = plan.cycle;
    let local = t / cycle - stance_start_frac;
    let m = local.floor() as i64;
    let phase = local - m as f64;
    if phase < 0.5 {
        let p = plan.stance_pos(m, t);
        [p[0], PLANT_H, p[1]]
    } else {
        let u = (phase - 0.5) * 2.0;
        let end_of_stance = (m as f64 + stance_start_frac + 0.5) * cycle;
        let next_touchdown = (m as f64 + 1.0 + stance_start_frac) * cycle;
        let from = plan.stance_pos(m, end_of_stance);
        let to = plan.stance_pos(m + 1, next_touchdown);
        let s = swing_progress(u);
        [
            from[0] + (to[0] - from[0]) * s,
            PLANT_H + lift * (std::f64::consts::PI * u).sin(),
            from[1] + (to[1] - from[1]) * s,
        ]
    }
}

/// Analytic two-bone leg IK in the root frame, as 6-vector rotations.
pub fn leg_ik(root_rot: &[f64; 9], hip_world: [f64; 3], target: [f64; 3]) -> ([f64; 6], [f64; 6]) {
    let (h, k) = solve_leg(root_rot, hip_world, target);
    (mat3_to_rot6(&h), mat3_to_rot6(&k))
}

/// Analytic two-bone leg IK in the root frame. Returns (hip, knee) local
/// rotations; the knee always bows toward local forward (+Z).
fn solve_leg(root_rot: &[f64; 9], hip_world: [f64; 3], target: [f64; 3]) -> ([f64; 9], [f64; 9]) {
    let rt = mat3_transpose(root_rot);
    let diff = [
        target[0] - hip_world[0],
        target[1] - hip_world[1],
        target[2] - hip_world[2],
    ];
    let d = mat3_mul_vec(&rt, diff);
    let dist = norm3(d).clamp(0.2, MAX_REACH);
    let dhat = {
        let n = norm3(d);
        if n > 1e-9 {
            [d[0] / n, d[1] / n, d[2] / n]
        } else {
            [0.0, -1.0, 0.0]
        }
    };
    let (t_len, s_len) = (Skeleton::THIGH_LEN, Skeleton::SHIN_LEN);
    let cos_alpha =
        ((t_len * t_len + dist * dist - s_len * s_len) / (2.0 * t_len * dist)).clamp(-1.0, 1.0);
    let alpha = cos_alpha.acos();
    let cos_gamma =
        ((t_len * t_len + s_len * s_len - dist * dist) / (2.0 * t_len * s_len)).clamp(-1.0, 1.0);
    let flex = std::f64::consts::PI - cos_gamma.acos();

    let mut axis = cross([0.0, 0.0, 1.0], dhat);
    if norm3(axis) < 1e-9 {
        axis = [1.0, 0.0, 0.0];
    }
    let tip = axis_angle_mat3(axis, -alpha);
    let u = mat3_mul_vec(&tip, dhat);
    let n = norm3(axis);
    let xh = [axis[0] / n, axis[1] / n, axis[2] / n];
    let yh = [-u[0], -u[1], -u[2]];
    let zh = cross(xh, yh);
    let hip = [
        xh[0], yh[0], zh[0], xh[1], yh[1], zh[1], xh[2], yh[2], zh[2],
    ];
    let knee = axis_angle_mat3([1.0, 0.0, 0.0], flex);
    (hip, knee)
}

fn ankle_from(root_rot: &[f64; 9], hip_world: [f64; 3], hip6: &[f64; 6], knee6: &[f64; 6]) -> [f64; 3] {
    let hip_m = rot6_to_mat3(hip6);
    let knee_m = rot6_to_mat3(knee6);
    let thigh_world = mat3_mul(root_rot, &hip_m);
    let knee_pos = {
        let o = mat3_mul_vec(&thigh_world, [0.0, -Skeleton::THIGH_LEN, 0.0]);
        [hip_world[0] + o[0], hip_world[1] + o[1], hip_world[2] + o[2]]
    };
    let shin_world = mat3_mul(&thigh_world, &knee_m);
    let o = mat3_mul_vec(&shin_world, [0.0, -Skeleton::SHIN_LEN, 0.0]);
    [knee_pos[0] + o[0], knee_pos[1] + o[1], knee_pos[2] + o[2]]
}

fn add_noise6(r: &[f64; 6], n: &[f64; 6]) -> [f64; 6] {
    [
        r[0] + n[0],
        r[1] + n[1],
        r[2] + n[2],
        r[3] + n[3],
        r[4] + n[4],
        r[5] + n[5],
    ]
}

/// Solve a leg so that the *noisy* rotations still land the ankle on the
/// target: solve, perturb, measure the drift, re-solve against the
/// compensated target, perturb again.
fn solve_leg_noisy(
    root_rot: &[f64; 9],
    hip_world: [f64; 3],
    target: [f64; 3],
    hip_noise: &[f64; 6],
    knee_noise: &[f64; 6],
) -> ([f64; 6], [f64; 6]) {
    let mut aim = target;
    let mut best = ([0.0; 6], [0.0; 6]);
    for _ in 0..4 {
        let (h, k) = solve_leg(root_rot, hip_world, aim);
        let h6 = add_noise6(&mat3_to_rot6(&h), hip_noise);
        let k6 = add_noise6(&mat3_to_rot6(&k), knee_noise);
        let got = ankle_from(root_rot, hip_world, &h6, &k6);
        best = (h6, k6);
        for i in 0..3 {
            aim[i] += target[i] - got[i];
        }
    }
    best
}

fn channel_noise(rng: &mut ChaCha8Rng) -> Vec<[f64; 6]> {
    (0..JOINT_COUNT)
        .map(|_| {
            let mut n = [0.0; 6];
            for v in n.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
            }
            n
        })
        .collect()
}

/// Procedural gait clip: constant-speed arc whose heading changes by
/// `turn_angle` overall, legs driven by planted-foot IK, seeded noise on
/// the joint rotations.
pub fn generate_gait(
    label: ActionLabel,
    n_frames: usize,
    turn_angle: f64,
    seed: u64,
    start: GaitStart,
) -> Result<MotionSequence, MotionError> {
    let (freq, speed, lateral, lift) = gait_params(label.index)?;
    assert!(n_frames >= 2, "generate_gait: need at least 2 frames");
    assert!(
        turn_angle.abs() <= std::f64::consts::PI + 1e-12,
        "generate_gait: |turn_angle| must be <= pi"
    );
    let duration = (n_frames - 1) as f64 / FPS;
    let path = ArcPath {
        x0: start.position[0],
        z0: start.position[1],
        psi0: start.heading,
        omega: turn_angle / duration,
        speed,
        lateral,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = channel_noise(&mut rng);
    let left_plan = FootPlan::build(&path, freq, duration, Skeleton::OFFSETS[0][0], 0.0, &mut rng);
    let right_plan = FootPlan::build(&path, freq, duration, Skeleton::OFFSETS[1][0], 0.5, &mut rng);

    let arm_amp = if lateral { 0.1 } else { 0.25 };
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = k as f64 / FPS;
        let psi = path.heading(t);
        let p = path.position(t);
        let root_q = UnitQuat::from_yaw(psi);
        let root_rot = root_q.to_mat3();
        let root_t = [p[0], ROOT_H, p[1]];

        let mut joints = vec![[0.0; 6]; JOINT_COUNT];
        for (side, plan, frac) in [(0usize, &left_plan, 0.0), (1usize, &right_plan, 0.5)] {
            let hip_off = mat3_mul_vec(&root_rot, Skeleton::OFFSETS[side]);
            let hip_world = [
                root_t[0] + hip_off[0],
                root_t[1] + hip_off[1],
                root_t[2] + hip_off[2],
            ];
            let target = foot_target(plan, frac, lift, t);
            let (hip6, knee6) =
                solve_leg_noisy(&root_rot, hip_world, target, &noise[side], &noise[side + 2]);
            joints[side] = hip6;
            joints[side + 2] = knee6;
            // flat foot: cancel the accumulated leg rotation
            let acc = mat3_mul(&rot6_to_mat3(&hip6), &rot6_to_mat3(&knee6));
            joints[side + 4] = add_noise6(&mat3_to_rot6(&mat3_transpose(&acc)), &noise[side + 4]);
        }
        let phase = 2.0 * std::f64::consts::PI * freq * t;
        let left_arm = axis_angle_mat3([1.0, 0.0, 0.0], arm_amp * (phase + std::f64::consts::PI).sin());
        let right_arm = axis_angle_mat3([1.0, 0.0, 0.0], arm_amp * phase.sin());
        joints[6] = add_noise6(&mat3_to_rot6(&left_arm), &noise[6]);
        joints[7] = add_noise6(&mat3_to_rot6(&right_arm), &noise[7]);

        frames.push(Pose {
            root_translation: root_t,
            root_orientation: root_q,
            joint_rotations: joints,
        });
    }
    Ok(MotionSequence::new(
        format!("{}-{}", GAIT_ACTIONS[label.index].to_lowercase(), seed),
        FPS,
        label,
        frames,
    ))
}

/// Upper-body target actions with a stationary root, used as the label
/// space of the synthesis stage.
pub fn generate_target(
    label: ActionLabel,
    n_frames: usize,
    seed: u64,
) -> Result<MotionSequence, MotionError> {
    if label.index >= TARGET_ACTIONS.len() {
        return Err(MotionError::UnknownAction {
            index: label.index,
            num_classes: TARGET_ACTIONS.len(),
        });
    }
    assert!(n_frames >= 2, "generate_target: need at least 2 frames");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = channel_noise(&mut rng);
    let duration = (n_frames - 1) as f64 / FPS;

    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let t = k as f64 / FPS;
        let ramp = smoothstep(t / duration.max(1e-9));
        // (hip_l, hip_r, knee, shoulder_l, shoulder_r) flexion angles
        let (hip, knee, sh_l, sh_r) = match label.index {
            // Wave: right arm raised high and oscillating
            0 => (
                0.05,
                0.1,
                -0.1,
                -1.1 + 0.5 * (2.0 * std::f64::consts::PI * 2.0 * t).sin(),
            ),
            // SitDown: thighs raise and knees fold progressively
            1 => (-0.7 * ramp - 0.05, 0.1 + 0.8 * ramp, 0.3 * ramp, 0.3 * ramp),
            // JumpPrep: rhythmic crouch with counter-swinging arms
            2 => {
                let osc = (2.0 * std::f64::consts::PI * 1.3 * t).sin();
                (
                    -0.15 - 0.12 * osc,
                    0.3 + 0.25 * osc,
                    -0.3 - 0.3 * osc,
                    -0.3 - 0.3 * osc,
                )
            }
            // Reach: both arms rise smoothly overhead and hold
            _ => (0.05, 0.08, -1.4 * ramp, -1.4 * ramp),
        };
        let mut joints = vec![[0.0; 6]; JOINT_COUNT];
        for side in 0..2 {
            let hip_m = axis_angle_mat3([1.0, 0.0, 0.0], hip);
            let knee_m = axis_angle_mat3([1.0, 0.0, 0.0], knee);
            joints[side] = add_noise6(&mat3_to_rot6(&hip_m), &noise[side]);
            joints[side + 2] = add_noise6(&mat3_to_rot6(&knee_m), &noise[side + 2]);
            let acc = mat3_mul(&hip_m, &knee_m);
            joints[side + 4] = add_noise6(&mat3_to_rot6(&mat3_transpose(&acc)), &noise[side + 4]);
        }
        joints[6] = add_noise6(
            &mat3_to_rot6(&axis_angle_mat3([1.0, 0.0, 0.0], sh_l)),
            &noise[6],
        );
        joints[7] = add_noise6(
            &mat3_to_rot6(&axis_angle_mat3([1.0, 0.0, 0.0], sh_r)),
            &noise[7],
        );
        frames.push(Pose {
            root_translation: [0.0, TARGET_ROOT_H, 0.0],
            root_orientation: UnitQuat::IDENTITY,
            joint_rotations: joints,
        });
    }
    Ok(MotionSequence::new(
        format!("{}-{}", TARGET_ACTIONS[label.index].to_lowercase(), seed),
        FPS,
        label,
        frames,
    ))
}
