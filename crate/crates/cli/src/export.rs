use crate::pipeline::{Segment, SegmentKind};
use crate::CliError;
use mfp_motion::{MotionSequence, Skeleton, JOINT_COUNT};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

impl ExportFormat {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "jsonl" => Ok(ExportFormat::Jsonl),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(CliError::Usage(format!("unknown export format '{other}'"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRow {
    frame: usize,
    time: f64,
    root_translation: [f64; 3],
    root_quaternion: [f64; 4],
    joints: Vec<[f64; 3]>,
    segment: String,
}

fn segment_name(segments: &[Segment], frame: usize) -> &'static str {
    for s in segments {
        if frame >= s.start && frame < s.start + s.len {
            return match s.kind {
                SegmentKind::History => "history",
                SegmentKind::Transition => "transition",
                SegmentKind::Target => "target",
            };
        }
    }
    "unknown"
}

/// Per-frame rows with world-space joint positions from forward
/// kinematics and the segment tag.
pub fn export_frames(
    seq: &MotionSequence,
    segments: &[Segment],
    path: &Path,
    format: ExportFormat,
) -> Result<(), CliError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    if format == ExportFormat::Csv {
        let mut header = String::from("frame,time,root_x,root_y,root_z,quat_w,quat_x,quat_y,quat_z");
        for name in Skeleton::NAMES {
            header.push_str(&format!(",{name}_x,{name}_y,{name}_z"));
        }
        header.push_str(",segment");
        writeln!(w, "{header}")?;
    }
    for (k, f) in seq.frames.iter().enumerate() {
        let joints = Skeleton::joint_positions(f);
        let row = FrameRow {
            frame: k,
            time: k as f64 / seq.fps,
            root_translation: f.root_translation,
            root_quaternion: [
                f.root_orientation.w,
                f.root_orientation.x,
                f.root_orientation.y,
                f.root_orientation.z,
            ],
            joints: joints.to_vec(),
            segment: segment_name(segments, k).to_string(),
        };
        match format {
            ExportFormat::Jsonl => writeln!(w, "{}", serde_json::to_string(&row)?)?,
            ExportFormat::Csv => {
                let mut line = format!("{},{}", row.frame, row.time);
                for v in row.root_translation {
                    line.push_str(&format!(",{v}"));
                }
                for v in row.root_quaternion {
                    line.push_str(&format!(",{v}"));
                }
                for j in 0..JOINT_COUNT {
                    for c in 0..3 {
                        line.push_str(&format!(",{}", row.joints[j][c]));
                    }
                }
                line.push_str(&format!(",{}", row.segment));
                writeln!(w, "{line}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
