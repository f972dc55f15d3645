use mfp_motion::{
    gait_params, generate_gait, generate_target, heading_of, left_foot_in_stance, ActionLabel,
    GaitStart, MotionSequence, Skeleton, ANKLE_JOINTS, GAIT_ACTIONS,
};

fn gait(action: usize, frames: usize, turn: f64, seed: u64) -> MotionSequence {
    generate_gait(
        ActionLabel::new(action, 4),
        frames,
        turn,
        seed,
        GaitStart::default(),
    )
    .unwrap()
}

#[test]
fn zero_turn_keeps_heading() {
    let s = gait(0, 60, 0.0, 11);
    let h0 = heading_of(&s.frames[0]);
    let h1 = heading_of(&s.frames[59]);
    assert!((h1 - h0).abs() < 1e-9, "heading drifted by {}", h1 - h0);
}

#[test]
fn quarter_turn_rotates_heading() {
    let s = gait(0, 60, std::f64::consts::FRAC_PI_2, 7);
    let h0 = heading_of(&s.frames[0]);
    let h1 = heading_of(&s.frames[59]);
    assert!((h1 - h0 - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
}

#[test]
fn run_walk_displacement_ratio_matches_speeds() {
    let walk = gait(0, 60, 0.0, 3);
    let run = gait(2, 60, 0.0, 3);
    let disp = |s: &MotionSequence| {
        let a = s.frames[0].root_translation;
        let b = s.frames[59].root_translation;
        ((b[0] - a[0]).powi(2) + (b[2] - a[2]).powi(2)).sqrt()
    };
    let ratio = disp(&run) / disp(&walk);
    let expected = 3.5 / 1.2;
    assert!(
        (ratio - expected).abs() / expected < 0.05,
        "ratio {ratio}, expected ~{expected}"
    );
}

#[test]
fn heading_additivity_across_chained_arcs() {
    let (a, b) = (0.8, -0.5);
    let s1 = gait(0, 60, a, 5);
    let last = &s1.frames[59];
    let s2 = generate_gait(
        ActionLabel::new(0, 4),
        60,
        b,
        6,
        GaitStart {
            position: [last.root_translation[0], last.root_translation[2]],
            heading: heading_of(last),
        },
    )
    .unwrap();
    let total = heading_of(&s2.frames[59]) - heading_of(&s1.frames[0]);
    assert!((total - (a + b)).abs() < 1e-6, "total {total}");
}

/// Stance-foot stillness by construction: while a foot carries weight its
/// world-space horizontal speed stays under 0.05 m/s, for every action.
#[test]
fn stance_foot_speed_bounded() {
    for action in 0..4 {
        let (freq, _, _, _) = gait_params(action).unwrap();
        for seed in [1u64, 9, 77] {
            let s = gait(action, 90, 0.4, seed);
            let fps = s.fps;
            let mut worst = 0.0f64;
            for k in 0..s.frames.len() - 1 {
                let (t0, t1) = (k as f64 / fps, (k + 1) as f64 / fps);
                let p0 = Skeleton::joint_positions(&s.frames[k]);
                let p1 = Skeleton::joint_positions(&s.frames[k + 1]);
                for (foot, ankle) in ANKLE_JOINTS.iter().enumerate() {
                    let in_stance = |t: f64| {
                        let left = left_foot_in_stance(freq, t);
                        if foot == 0 {
                            left
                        } else {
                            !left
                        }
                    };
                    if in_stance(t0) && in_stance(t1) {
                        let dx = p1[*ankle][0] - p0[*ankle][0];
                        let dz = p1[*ankle][2] - p0[*ankle][2];
                        let speed = (dx * dx + dz * dz).sqrt() * fps;
                        worst = worst.max(speed);
                    }
                }
            }
            assert!(
                worst < 0.05,
                "{}: stance speed {worst} m/s (seed {seed})",
                GAIT_ACTIONS[action]
            );
        }
    }
}

/// Mean per-joint angular speed separates the four gaits: leave-one-out
/// 1-NN accuracy at least 95% over 200 sequences.
#[test]
fn gait_actions_separate_under_one_nearest_neighbor() {
    let per_action = 50;
    let mut feats: Vec<(usize, Vec<f64>)> = Vec::new();
    for action in 0..4 {
        for i in 0..per_action {
            let turn = -1.0 + 2.0 * (i as f64 / per_action as f64);
            let s = gait(action, 60, turn, (action * 1000 + i) as u64);
            feats.push((action, angular_speed_feature(&s)));
        }
    }
    let mut correct = 0;
    for i in 0..feats.len() {
        let mut best = (f64::INFINITY, 0usize);
        for j in 0..feats.len() {
            if i == j {
                continue;
            }
            let d: f64 = feats[i]
                .1
                .iter()
                .zip(&feats[j].1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.0 {
                best = (d, feats[j].0);
            }
        }
        if best.1 == feats[i].0 {
            correct += 1;
        }
    }
    let acc = correct as f64 / feats.len() as f64;
    assert!(acc >= 0.95, "1-NN accuracy {acc}");
}

fn angular_speed_feature(s: &MotionSequence) -> Vec<f64> {
    let j = s.frames[0].joint_count();
    let mut acc = vec![0.0; j];
    for w in s.frames.windows(2) {
        for (ji, a) in acc.iter_mut().enumerate() {
            let d: f64 = w[0].joint_rotations[ji]
                .iter()
                .zip(&w[1].joint_rotations[ji])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            *a += d.sqrt() * s.fps;
        }
    }
    for a in acc.iter_mut() {
        *a /= (s.frames.len() - 1) as f64;
    }
    acc
}

#[test]
fn unknown_action_rejected() {
    let bad = ActionLabel::new(5, 8);
    assert!(generate_gait(bad, 60, 0.0, 1, GaitStart::default()).is_err());
    assert!(generate_target(bad, 60, 1).is_err());
}

#[test]
fn target_actions_have_stationary_roots_and_distinct_motion() {
    let mut speeds = Vec::new();
    for action in 0..4 {
        let s = generate_target(ActionLabel::new(action, 4), 60, 21).unwrap();
        for f in &s.frames {
            assert_eq!(f.root_translation[0], 0.0);
            assert_eq!(f.root_translation[2], 0.0);
        }
        speeds.push(angular_speed_feature(&s));
    }
    for i in 0..4 {
        for j in i + 1..4 {
            let d: f64 = speeds[i]
                .iter()
                .zip(&speeds[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(d > 0.05, "targets {i} and {j} too similar (d={d})");
        }
    }
}

#[test]
fn same_seed_reproduces_bit_identical_sequences() {
    let a = gait(1, 45, 0.3, 99);
    let b = gait(1, 45, 0.3, 99);
    assert_eq!(a, b);
}
