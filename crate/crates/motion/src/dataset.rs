use crate::pose::{ActionLabel, MotionSequence, Pose};
use crate::quat::UnitQuat;
use crate::vectorize::{pose_vectorize, NormStats, POSE_DIM};
use crate::MotionError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const FORMAT: &str = "mfp-dataset";
const VERSION: u32 = 1;

/// Train/test sequences plus normalization statistics computed from the
/// training frames only.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
    pub norm: NormStats,
}

impl DatasetSplit {
    pub fn new(train: Vec<MotionSequence>, test: Vec<MotionSequence>) -> Result<Self, MotionError> {
        let mut ids = BTreeSet::new();
        for s in train.iter().chain(&test) {
            assert!(ids.insert(s.id.clone()), "duplicate sequence id '{}'", s.id);
        }
        let norm = compute_norm_stats(&train)?;
        Ok(DatasetSplit { train, test, norm })
    }
}

/// Per-feature mean and population standard deviation over every training
/// frame; std is floored at 1e-6.
pub fn compute_norm_stats(train: &[MotionSequence]) -> Result<NormStats, MotionError> {
    let mut n = 0usize;
    let mut sum = vec![0.0; POSE_DIM];
    let mut sumsq = vec![0.0; POSE_DIM];
    for s in train {
        for f in &s.frames {
            let v = pose_vectorize(f, None);
            for i in 0..POSE_DIM {
                sum[i] += v[i];
                sumsq[i] += v[i] * v[i];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(MotionError::EmptyTrainSet);
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / nf - m * m).max(0.0)).sqrt().max(1e-6))
        .collect();
    Ok(NormStats { mean, std })
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct FileFrame {
    t: [f64; 3],
    q: [f64; 4],
    j: Vec<[f64; 6]>,
}

#[derive(Serialize, Deserialize)]
struct FileSeq {
    id: String,
    split: String,
    fps: f64,
    label: ActionLabel,
    frames: Vec<FileFrame>,
}

/// Line-delimited JSON: a header line, then one sequence per line.
pub fn save_dataset(split: &DatasetSplit, path: &Path) -> Result<(), MotionError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = FileHeader {
        format: FORMAT.to_string(),
        version: VERSION,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header"))?;
    for (seqs, tag) in [(&split.train, "train"), (&split.test, "test")] {
        for s in seqs.iter() {
            let fs = FileSeq {
                id: s.id.clone(),
                split: tag.to_string(),
                fps: s.fps,
                label: s.label,
                frames: s
                    .frames
                    .iter()
                    .map(|p| FileFrame {
                        t: p.root_translation,
                        q: [
                            p.root_orientation.w,
                            p.root_orientation.x,
                            p.root_orientation.y,
                            p.root_orientation.z,
                        ],
                        j: p.joint_rotations.clone(),
                    })
                    .collect(),
            };
            writeln!(w, "{}", serde_json::to_string(&fs).expect("sequence"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`save_dataset`]. Validates quaternion norms and recomputes
/// normalization statistics from the training split (deterministic, so a
/// round trip is bit-exact).
pub fn load_dataset(path: &Path) -> Result<DatasetSplit, MotionError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, l)) => l?,
        None => {
            return Err(MotionError::BadFile {
                line: 0,
                msg: "empty file".into(),
            })
        }
    };
    let header: FileHeader = serde_json::from_str(&header_line).map_err(|e| MotionError::BadFile {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != FORMAT {
        return Err(MotionError::BadFile {
            line: 1,
            msg: format!("unknown format '{}'", header.format),
        });
    }
    if header.version != VERSION {
        return Err(MotionError::BadFile {
            line: 1,
            msg: format!("unsupported version {}, expected {VERSION}", header.version),
        });
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fs: FileSeq = serde_json::from_str(&line).map_err(|e| MotionError::BadFile {
            line: idx + 1,
            msg: format!("bad sequence: {e}"),
        })?;
        let mut frames = Vec::with_capacity(fs.frames.len());
        for (fi, f) in fs.frames.iter().enumerate() {
            let q = UnitQuat {
                w: f.q[0],
                x: f.q[1],
                y: f.q[2],
                z: f.q[3],
            };
            let norm = q.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(MotionError::QuaternionNorm {
                    id: fs.id.clone(),
                    frame: fi,
                    norm,
                });
            }
            frames.push(Pose {
                root_translation: f.t,
                root_orientation: q,
                joint_rotations: f.j.clone(),
            });
        }
        if frames.is_empty() {
            return Err(MotionError::BadFile {
                line: idx + 1,
                msg: format!("sequence '{}' has no frames", fs.id),
            });
        }
        let seq = MotionSequence::new(fs.id, fs.fps, fs.label, frames);
        match fs.split.as_str() {
            "train" => train.push(seq),
            "test" => test.push(seq),
            other => {
                return Err(MotionError::BadFile {
                    line: idx + 1,
                    msg: format!("unknown split tag '{other}'"),
                })
            }
        }
    }
    let norm = compute_norm_stats(&train)?;
    Ok(DatasetSplit { train, test, norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_seq(id: &str, value: f64) -> MotionSequence {
        let mut p = Pose::identity();
        p.root_translation = [value, 0.0, 0.0];
        let mut p2 = Pose::identity();
        p2.root_translation = [value + 1.0, 0.0, 0.0];
        MotionSequence::new(id, 30.0, ActionLabel::new(0, 4), vec![p, p2])
    }

    #[test]
    fn norm_stats_hand_computed() {
        // Feature 0 sees values 0 and 2: mean 1, population std 1.
        let mut p0 = Pose::identity();
        p0.root_translation = [0.0, 0.0, 0.0];
        let mut p1 = Pose::identity();
        p1.root_translation = [2.0, 0.0, 0.0];
        let s = MotionSequence::new("a", 30.0, ActionLabel::new(0, 4), vec![p0, p1]);
        let stats = compute_norm_stats(&[s]).unwrap();
        assert!((stats.mean[0] - 1.0).abs() < 1e-12);
        assert!((stats.std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn norm_stats_clamp_degenerate() {
        let p = Pose::identity();
        let s = MotionSequence::new(
            "a",
            30.0,
            ActionLabel::new(0, 4),
            vec![p.clone(), p.clone(), p],
        );
        let stats = compute_norm_stats(&[s]).unwrap();
        assert!(stats.std.iter().all(|&v| v == 1e-6));
    }

    #[test]
    fn norm_stats_ignore_test_split() {
        let split_a = DatasetSplit::new(vec![tiny_seq("tr", 0.0)], vec![tiny_seq("te", 100.0)]).unwrap();
        let split_b = DatasetSplit::new(vec![tiny_seq("tr", 0.0)], vec![tiny_seq("te", -55.0)]).unwrap();
        assert_eq!(split_a.norm, split_b.norm);
    }

    #[test]
    fn empty_train_rejected() {
        assert!(matches!(
            compute_norm_stats(&[]),
            Err(MotionError::EmptyTrainSet)
        ));
    }
}
