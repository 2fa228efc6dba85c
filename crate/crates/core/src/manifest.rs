//! Corpus data model: clip records, manifests, and the per-stage decision
//! ledger.
//!
//! A manifest is a line-delimited JSON file, one [`ClipRecord`] per line,
//! sorted by `clip_id`. Records are immutable once loaded: every operation
//! returns new values, and the only mutable artifact in the whole pipeline is
//! the manifest itself. Frames live on disk as pre-extracted
//! `frame_dir/%06d.png` files and are never touched.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const QUAT_NORM_TOL: f64 = 1e-6;
const ROTATION_TOL: f64 = 1e-6;

/// Which arm an action frame describes. Dual-arm platforms emit two
/// [`ActionFrame`]s per frame index, one `Left` and one `Right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmId {
    Left,
    Right,
    Single,
}

impl fmt::Display for ArmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArmId::Left => write!(f, "left"),
            ArmId::Right => write!(f, "right"),
            ArmId::Single => write!(f, "single"),
        }
    }
}

/// End-effector state at one video frame: position, orientation, gripper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionFrame {
    pub frame_index: u32,
    /// Meters, in the world frame.
    pub position: [f64; 3],
    /// Unit quaternion, serialized `[w, x, y, z]`.
    pub orientation: [f64; 4],
    /// 0 = fully closed, 1 = fully open.
    pub gripper_openness: f64,
    pub arm_id: ArmId,
}

impl ActionFrame {
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.orientation;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    /// Rotation matrix of the orientation (standard right-handed conversion).
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.quaternion().to_rotation_matrix().matrix()
    }

    pub fn position_vec(&self) -> Vector3<f64> {
        Vector3::new(self.position[0], self.position[1], self.position[2])
    }
}

/// Pinhole camera intrinsics plus world-to-camera extrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal lengths in pixels.
    pub fx: f64,
    pub fy: f64,
    /// Principal point in pixels.
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation, meters.
    pub translation: [f64; 3],
}

impl CameraModel {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation_vec(&self) -> Vector3<f64> {
        Vector3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        )
    }

    /// Identity extrinsics with the given intrinsics.
    pub fn with_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    fn validate(&self, clip_id: &str) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidRecord {
                clip_id: clip_id.to_string(),
                field: "camera.fx/fy",
                message: format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy),
            });
        }
        let r = self.rotation_matrix();
        let gram = r * r.transpose();
        let max_dev = (gram - Matrix3::identity()).abs().max();
        if max_dev > ROTATION_TOL {
            return Err(Error::InvalidRecord {
                clip_id: clip_id.to_string(),
                field: "camera.rotation",
                message: format!("not orthonormal (max deviation {max_dev:.2e})"),
            });
        }
        if (r.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidRecord {
                clip_id: clip_id.to_string(),
                field: "camera.rotation",
                message: format!("determinant {} != +1", r.determinant()),
            });
        }
        Ok(())
    }
}

/// Four-phase structured caption. Text generation is an external service;
/// the engine only houses the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub scene_setup: String,
    pub action_detail: String,
    pub state_transition: String,
    pub camera_summary: String,
}

/// The registered pipeline stages, in execution order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Gate,
    Flow,
    Coherence,
    Alignment,
    Balance,
    Split,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::Gate,
        PipelineStage::Flow,
        PipelineStage::Coherence,
        PipelineStage::Alignment,
        PipelineStage::Balance,
        PipelineStage::Split,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineStage::Gate => "gate",
            PipelineStage::Flow => "flow",
            PipelineStage::Coherence => "coherence",
            PipelineStage::Alignment => "alignment",
            PipelineStage::Balance => "balance",
            PipelineStage::Split => "split",
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PipelineStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PipelineStage::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStage(s.to_string()))
    }
}

/// Accept or reject, as recorded in the status ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

/// One ledger entry: the decision a stage took for a clip, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub decision: Decision,
    pub reason: String,
}

/// One manipulation clip with full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_dataset: String,
    /// May equal `source_dataset` for corpora without sub-collections.
    pub sub_dataset: String,
    pub robot_type: String,
    pub task_id: String,
    pub task_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<Caption>,
    pub frame_count: u32,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    /// Directory of pre-extracted `%06d.png` frames.
    pub frame_dir: PathBuf,
    /// Index of this record's first frame within `frame_dir`. Nonzero only
    /// for children produced by temporal segmentation, which share the
    /// parent's frame files.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub frame_start: u32,
    pub camera: CameraModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub action_frames: Vec<ActionFrame>,
    /// Per-frame task index, used for temporal segmentation of long episodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_task_index: Option<Vec<u32>>,
    /// Stage decision ledger, append-only per stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub status: BTreeMap<PipelineStage, DecisionRecord>,
    /// Metric name to value, e.g. precomputed flow statistics.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, f64>,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl ClipRecord {
    /// Path of this record's `local_index`-th frame, taking `frame_start`
    /// into account.
    pub fn frame_path(&self, local_index: u32) -> PathBuf {
        crate::imaging::frame_path(&self.frame_dir, self.frame_start + local_index)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, message: String| {
            Err(Error::InvalidRecord {
                clip_id: self.clip_id.clone(),
                field,
                message,
            })
        };
        if self.clip_id.is_empty() {
            return fail("clip_id", "must be nonempty".into());
        }
        if self.frame_count < 1 {
            return fail("frame_count", "must be >= 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail("fps", format!("must be positive and finite, got {}", self.fps));
        }
        if self.width == 0 || self.height == 0 {
            return fail("width/height", "must be positive".into());
        }
        self.camera.validate(&self.clip_id)?;
        let mut last: Option<(u32, ArmId)> = None;
        for af in &self.action_frames {
            if af.frame_index >= self.frame_count {
                return fail(
                    "action_frames.frame_index",
                    format!(
                        "index {} out of range (frame_count {})",
                        af.frame_index, self.frame_count
                    ),
                );
            }
            let norm = (af.orientation.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if (norm - 1.0).abs() > QUAT_NORM_TOL {
                return fail(
                    "action_frames.orientation",
                    format!("quaternion norm {norm} not within 1e-6 of 1"),
                );
            }
            if !(0.0..=1.0).contains(&af.gripper_openness) {
                return fail(
                    "action_frames.gripper_openness",
                    format!("{} outside [0, 1]", af.gripper_openness),
                );
            }
            // Sorted by (frame_index, arm_id); a frame index repeats only
            // across distinct arms, so each arm's sequence is strictly
            // increasing.
            if let Some((prev_idx, prev_arm)) = last {
                if af.frame_index < prev_idx
                    || (af.frame_index == prev_idx && af.arm_id <= prev_arm)
                {
                    return fail(
                        "action_frames",
                        format!(
                            "must be strictly increasing by (frame_index, arm_id); \
                             ({}, {}) follows ({}, {})",
                            af.frame_index, af.arm_id, prev_idx, prev_arm
                        ),
                    );
                }
            }
            last = Some((af.frame_index, af.arm_id));
        }
        if let Some(fti) = &self.frame_task_index {
            if fti.len() != self.frame_count as usize {
                return fail(
                    "frame_task_index",
                    format!(
                        "length {} != frame_count {}",
                        fti.len(),
                        self.frame_count
                    ),
                );
            }
        }
        Ok(())
    }
}

/// A validated, `clip_id`-sorted collection of [`ClipRecord`]s.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    records: Vec<ClipRecord>,
}

impl Manifest {
    /// Builds a manifest from records, validating each, rejecting duplicate
    /// ids, and sorting by `clip_id`.
    pub fn from_records(mut records: Vec<ClipRecord>) -> Result<Self> {
        for r in &records {
            r.validate()?;
        }
        records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        for pair in records.windows(2) {
            if pair[0].clip_id == pair[1].clip_id {
                return Err(Error::DuplicateClip(pair[0].clip_id.clone()));
            }
        }
        Ok(Manifest { records })
    }

    pub fn records(&self) -> &[ClipRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ClipRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, clip_id: &str) -> Option<&ClipRecord> {
        self.records
            .binary_search_by(|r| r.clip_id.as_str().cmp(clip_id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ClipRecord> {
        self.records.iter()
    }
}

/// Loads and validates a line-delimited manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ClipRecord =
            serde_json::from_str(&line).map_err(|e| Error::ManifestParse {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Manifest::from_records(records)
}

/// Writes a manifest as line-delimited JSON, one record per line, sorted by
/// `clip_id`. `load_manifest(save_manifest(m)) == m`.
pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut out = Vec::new();
    for record in manifest.records() {
        serde_json::to_writer(&mut out, record).expect("record serialization cannot fail");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Merges two manifests. Records sharing a `clip_id` must be identical;
/// otherwise the merge fails naming the conflicting id.
pub fn merge_manifests(a: &Manifest, b: &Manifest) -> Result<Manifest> {
    let mut by_id: BTreeMap<&str, &ClipRecord> = BTreeMap::new();
    for r in a.iter() {
        by_id.insert(&r.clip_id, r);
    }
    for r in b.iter() {
        if let Some(existing) = by_id.get(r.clip_id.as_str()) {
            if *existing != r {
                return Err(Error::ConflictingClip(r.clip_id.clone()));
            }
        } else {
            by_id.insert(&r.clip_id, r);
        }
    }
    Manifest::from_records(by_id.into_values().cloned().collect())
}

/// Appends a stage decision to a record's ledger, returning the new record.
///
/// Re-recording the identical (stage, decision, reason) triple is a no-op;
/// recording anything else for an already-decided stage is an error. The
/// ledger is append-only so a finished run is auditable stage by stage.
pub fn record_decision(
    record: &ClipRecord,
    stage: PipelineStage,
    decision: Decision,
    reason: &str,
) -> Result<ClipRecord> {
    if let Some(existing) = record.status.get(&stage) {
        if existing.decision == decision && existing.reason == reason {
            return Ok(record.clone());
        }
        return Err(Error::ContradictoryDecision {
            clip_id: record.clip_id.clone(),
            stage: stage.name().to_string(),
        });
    }
    let mut updated = record.clone();
    updated.status.insert(
        stage,
        DecisionRecord {
            decision,
            reason: reason.to_string(),
        },
    );
    Ok(updated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{sample_action_frame, sample_manifest, sample_record};

    #[test]
    fn load_sorts_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let m = Manifest::from_records(vec![
            sample_record("c2"),
            sample_record("c0"),
            sample_record("c1"),
        ])
        .unwrap();
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        let ids: Vec<_> = loaded.iter().map(|r| r.clip_id.as_str()).collect();
        assert_eq!(ids, ["c0", "c1", "c2"]);
    }

    #[test]
    fn duplicate_clip_id_is_named() {
        let err = Manifest::from_records(vec![sample_record("c1"), sample_record("c1")])
            .unwrap_err();
        match err {
            Error::DuplicateClip(id) => assert_eq!(id, "c1"),
            other => panic!("expected DuplicateClip, got {other:?}"),
        }
    }

    #[test]
    fn gripper_out_of_range_names_field_and_record() {
        let mut r = sample_record("c9");
        let mut af = sample_action_frame(0, 1.0);
        af.gripper_openness = 1.5;
        r.action_frames.push(af);
        let err = r.validate().unwrap_err();
        match err {
            Error::InvalidRecord { clip_id, field, .. } => {
                assert_eq!(clip_id, "c9");
                assert_eq!(field, "action_frames.gripper_openness");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dual_arm_frames_may_share_an_index() {
        let mut r = sample_record("c1");
        let mut left = sample_action_frame(3, 1.0);
        left.arm_id = ArmId::Left;
        let mut right = sample_action_frame(3, 1.0);
        right.arm_id = ArmId::Right;
        r.action_frames = vec![left.clone(), right];
        assert!(r.validate().is_ok());
        // Same arm twice at one index is rejected.
        let mut bad = sample_record("c2");
        bad.action_frames = vec![left.clone(), left];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn action_frame_index_must_stay_in_range() {
        let mut r = sample_record("c1");
        r.frame_count = 10;
        r.action_frames = vec![sample_action_frame(10, 1.0)];
        assert!(r.validate().is_err());
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let mut r = sample_record("c1");
        let mut af = sample_action_frame(0, 1.0);
        af.orientation = [1.0, 0.1, 0.0, 0.0];
        r.action_frames = vec![af];
        assert!(r.validate().is_err());
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let m = sample_manifest(3);
        let merged = merge_manifests(&m, &Manifest::default()).unwrap();
        assert_eq!(merged, m);
    }

    #[test]
    fn merge_disjoint_unions() {
        let a = Manifest::from_records(vec![sample_record("a0"), sample_record("a1")]).unwrap();
        let b = Manifest::from_records(vec![
            sample_record("b0"),
            sample_record("b1"),
            sample_record("b2"),
        ])
        .unwrap();
        let merged = merge_manifests(&a, &b).unwrap();
        assert_eq!(merged.len(), 5);
    }

    #[test]
    fn merge_conflicting_duplicate_errors() {
        let a = Manifest::from_records(vec![sample_record("c0")]).unwrap();
        let mut changed = sample_record("c0");
        changed.task_text = "something else".to_string();
        let b = Manifest::from_records(vec![changed]).unwrap();
        match merge_manifests(&a, &b).unwrap_err() {
            Error::ConflictingClip(id) => assert_eq!(id, "c0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn merge_identical_duplicate_is_fine() {
        let a = sample_manifest(2);
        let merged = merge_manifests(&a, &a).unwrap();
        assert_eq!(merged, a);
    }

    #[test]
    fn decision_ledger_is_append_only() {
        let r = sample_record("c0");
        let r = record_decision(&r, PipelineStage::Gate, Decision::Accept, "ok").unwrap();
        assert_eq!(
            r.status[&PipelineStage::Gate],
            DecisionRecord {
                decision: Decision::Accept,
                reason: "ok".to_string()
            }
        );
        // Idempotent for the identical triple.
        let again = record_decision(&r, PipelineStage::Gate, Decision::Accept, "ok").unwrap();
        assert_eq!(again, r);
        // Contradiction is an error.
        let err =
            record_decision(&r, PipelineStage::Gate, Decision::Reject, "changed my mind")
                .unwrap_err();
        assert!(matches!(err, Error::ContradictoryDecision { .. }));
    }

    #[test]
    fn unknown_stage_string_errors() {
        let err = "warmup".parse::<PipelineStage>().unwrap_err();
        assert!(matches!(err, Error::UnknownStage(s) if s == "warmup"));
    }

    #[test]
    fn save_load_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.jsonl");
        let p2 = dir.path().join("m2.jsonl");
        let mut r = sample_record("c0");
        r.caption = Some(Caption {
            scene_setup: "a table".into(),
            action_detail: "arm reaches".into(),
            state_transition: "cube lifted".into(),
            camera_summary: "static view".into(),
        });
        r.action_frames = vec![sample_action_frame(0, 1.0), sample_action_frame(1, 1.1)];
        r.scores.insert("border_flow".into(), 0.25);
        let m = Manifest::from_records(vec![r, sample_record("c1")]).unwrap();
        save_manifest(&m, &p1).unwrap();
        let loaded = load_manifest(&p1).unwrap();
        assert_eq!(loaded, m);
        save_manifest(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn parse_error_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut good = Vec::new();
        serde_json::to_writer(&mut good, &sample_record("c0")).unwrap();
        std::fs::write(&path, [&good[..], b"\n{not json}\n"].concat()).unwrap();
        match load_manifest(&path).unwrap_err() {
            Error::ManifestParse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quaternion_serializes_wxyz() {
        let af = sample_action_frame(0, 1.0);
        let json = serde_json::to_value(&af).unwrap();
        assert_eq!(json["orientation"][0], 1.0); // w first
    }
}
