//! Sequence file format, version 1.
//!
//! A pretty-printed JSON object with fields in this order:
//!
//! ```text
//! format        "flowbev-sequence"
//! version       1
//! config        generator settings echo, or null
//! metric_scale  accumulated augmentation scale (1.0 for raw samples)
//! num_sweeps    number of sweep blocks
//! sweeps        oldest first; each block is
//!                 k           sweeps into the past (0 = keyframe)
//!                 ego_pose    [tx, ty, tz, qw, qx, qy, qz], ego frame -> world
//!                 n           point count N
//!                 points      3N floats, x y z per point, ego frame
//!                 source_ids  N ints, object id or -1 for background
//! trajectories  per object: object_id, class, size [l, w, h],
//!                 poses (7-number poses, oldest first, one per sweep)
//! boxes         keyframe ground-truth boxes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ObjectTrajectory, ScenarioConfig, SequenceSample, SweepRecord};
use crate::container::{self, flatten, schema_error, unflatten};
use crate::error::Result;
use crate::geometry::{Box3D, ObjectClass, RigidTransform};

pub const SEQUENCE_FORMAT: &str = "flowbev-sequence";
pub const SEQUENCE_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
pub(crate) struct SequenceFile {
    format: String,
    version: u64,
    config: Option<ScenarioConfig>,
    metric_scale: f64,
    num_sweeps: usize,
    sweeps: Vec<SweepBlock>,
    trajectories: Vec<TrajectoryBlock>,
    boxes: Vec<Box3D>,
}

#[derive(Serialize, Deserialize)]
struct SweepBlock {
    k: u32,
    ego_pose: [f64; 7],
    n: usize,
    points: Vec<f64>,
    source_ids: Vec<i64>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct TrajectoryBlock {
    object_id: u32,
    class: ObjectClass,
    size: [f64; 3],
    poses: Vec<[f64; 7]>,
}

impl From<&ObjectTrajectory> for TrajectoryBlock {
    fn from(t: &ObjectTrajectory) -> Self {
        Self {
            object_id: t.object_id,
            class: t.class,
            size: t.size,
            poses: t.poses.iter().map(RigidTransform::to_array7).collect(),
        }
    }
}

impl TrajectoryBlock {
    pub(crate) fn into_trajectory(self, field: &str) -> Result<ObjectTrajectory> {
        let poses = self
            .poses
            .into_iter()
            .enumerate()
            .map(|(i, p)| RigidTransform::from_array7(p).map_err(|e| schema_error(format!("{field}.poses[{i}]"), e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ObjectTrajectory {
            object_id: self.object_id,
            class: self.class,
            size: self.size,
            poses,
        })
    }
}

impl From<&SequenceSample> for SequenceFile {
    fn from(s: &SequenceSample) -> Self {
        Self {
            format: SEQUENCE_FORMAT.to_string(),
            version: SEQUENCE_VERSION,
            config: s.config.clone(),
            metric_scale: s.metric_scale,
            num_sweeps: s.sweeps.len(),
            sweeps: s
                .sweeps
                .iter()
                .map(|sw| SweepBlock {
                    k: sw.k,
                    ego_pose: sw.ego_pose.to_array7(),
                    n: sw.points.len(),
                    points: flatten(&sw.points),
                    source_ids: sw.source_ids.iter().map(|id| id.map_or(-1, i64::from)).collect(),
                })
                .collect(),
            trajectories: s.trajectories.iter().map(TrajectoryBlock::from).collect(),
            boxes: s.boxes.clone(),
        }
    }
}

impl SequenceFile {
    fn into_sample(self) -> Result<SequenceSample> {
        if self.num_sweeps != self.sweeps.len() {
            return Err(schema_error(
                "num_sweeps",
                format!("declares {} sweeps, found {}", self.num_sweeps, self.sweeps.len()),
            ));
        }
        let mut sweeps = Vec::with_capacity(self.sweeps.len());
        for (i, b) in self.sweeps.into_iter().enumerate() {
            let points = unflatten(&format!("sweeps[{i}].points"), &b.points, b.n)?;
            if b.source_ids.len() != b.n {
                return Err(schema_error(
                    format!("sweeps[{i}].source_ids"),
                    format!("expected {} ids, found {}", b.n, b.source_ids.len()),
                ));
            }
            let source_ids = b
                .source_ids
                .iter()
                .map(|&id| match id {
                    -1 => Ok(None),
                    id => u32::try_from(id)
                        .map(Some)
                        .map_err(|_| schema_error(format!("sweeps[{i}].source_ids"), format!("invalid id {id}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let ego_pose = RigidTransform::from_array7(b.ego_pose)
                .map_err(|e| schema_error(format!("sweeps[{i}].ego_pose"), e))?;
            sweeps.push(SweepRecord {
                k: b.k,
                ego_pose,
                points,
                source_ids,
            });
        }
        let trajectories = self
            .trajectories
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.into_trajectory(&format!("trajectories[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate().map_err(|e| schema_error(format!("boxes[{i}]"), e))?;
        }
        Ok(SequenceSample {
            sweeps,
            trajectories,
            boxes: self.boxes,
            config: self.config,
            metric_scale: self.metric_scale,
        })
    }
}

pub fn write_sequence(sample: &SequenceSample, path: impl AsRef<Path>) -> Result<()> {
    container::write(path.as_ref(), &SequenceFile::from(sample))
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<SequenceSample> {
    read_sequence_with_warnings(path).map(|(s, _)| s)
}

/// Reads a sequence, also returning the paths of unrecognised fields.
pub fn read_sequence_with_warnings(path: impl AsRef<Path>) -> Result<(SequenceSample, Vec<String>)> {
    let (file, warnings): (SequenceFile, _) =
        container::read(path.as_ref(), SEQUENCE_FORMAT, SEQUENCE_VERSION)?;
    Ok((file.into_sample()?, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::sim::{generate_sequence, ScenarioConfig};

    fn sample() -> SequenceSample {
        generate_sequence(&ScenarioConfig {
            num_objects: 3,
            background_points_per_sweep: 40,
            points_per_object_per_sweep: 20,
            noise_sigma: 0.03,
            ego_yaw_rate: 0.2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.json");
        let s = sample();
        write_sequence(&s, &path).unwrap();
        assert_eq!(read_sequence(&path).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.json");
        write_sequence(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() * 2 / 3]).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_trailing_fields_are_accepted_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.json");
        let s = sample();
        let mut value = serde_json::to_value(SequenceFile::from(&s)).unwrap();
        value["producer"] = serde_json::json!("future-writer");
        value["sweeps"][0]["intensity"] = serde_json::json!([1, 2, 3]);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let (back, warnings) = read_sequence_with_warnings(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(warnings.len(), 2, "{warnings:?}");
        assert!(warnings.iter().any(|w| w.contains("producer")));
        assert!(warnings.iter().any(|w| w.contains("intensity")));
    }

    #[test]
    fn inconsistent_counts_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.json");
        let mut value = serde_json::to_value(SequenceFile::from(&sample())).unwrap();
        value["sweeps"][2]["n"] = serde_json::json!(3);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let msg = read_sequence(&path).unwrap_err().to_string();
        assert!(msg.contains("sweeps[2]"), "{msg}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.json");
        let mut value = serde_json::to_value(SequenceFile::from(&sample())).unwrap();
        value["version"] = serde_json::json!(7);
        std::fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        assert!(matches!(read_sequence(&path), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(read_sequence("/nonexistent/seq.json"), Err(Error::Io { .. })));
    }
}
