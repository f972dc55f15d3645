use mfp_motion::{
    generate_gait, load_dataset, pose_devectorize, pose_vectorize, save_dataset, ActionLabel,
    DatasetSplit, GaitStart, MotionError, Pose, UnitQuat,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

fn small_split() -> DatasetSplit {
    let train = vec![
        generate_gait(ActionLabel::new(0, 4), 40, 0.2, 1, GaitStart::default()).unwrap(),
        generate_gait(ActionLabel::new(2, 4), 40, -0.4, 2, GaitStart::default()).unwrap(),
    ];
    let test = vec![generate_gait(ActionLabel::new(1, 4), 40, 0.0, 3, GaitStart::default()).unwrap()];
    DatasetSplit::new(train, test).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let split = small_split();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    save_dataset(&split, &path).unwrap();
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded.train, split.train);
    assert_eq!(loaded.test, split.test);
    assert_eq!(loaded.norm, split.norm);
}

#[test]
fn bad_quaternion_norm_names_the_frame() {
    let mut split = small_split();
    split.train[0].frames[7].root_orientation = UnitQuat {
        w: 0.5,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    save_dataset(&split, &path).unwrap();
    match load_dataset(&path) {
        Err(MotionError::QuaternionNorm { frame, .. }) => assert_eq!(frame, 7),
        other => panic!("expected quaternion norm error, got {other:?}"),
    }
}

#[test]
fn empty_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::File::create(&path).unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(MotionError::BadFile { .. })
    ));
}

#[test]
fn garbage_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    writeln!(f, "{{\"format\":\"mfp-dataset\",\"version\":9}}").unwrap();
    assert!(matches!(
        load_dataset(&path),
        Err(MotionError::BadFile { line: 1, .. })
    ));
}

#[test]
fn random_poses_round_trip_through_vectorization() {
    let split = small_split();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Pose::identity();
        p.root_translation = [rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.0), rng.gen_range(-3.0..3.0)];
        p.root_orientation = UnitQuat::new_normalized(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        for j in p.joint_rotations.iter_mut() {
            for v in j.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let v = pose_vectorize(&p, Some(&split.norm));
        let back = pose_devectorize(&v, Some(&split.norm)).unwrap();
        let v2 = pose_vectorize(&back, None);
        let v1 = pose_vectorize(&p, None);
        for (a, b) in v1.iter().zip(&v2) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-9, "round-trip error {worst}");
}
