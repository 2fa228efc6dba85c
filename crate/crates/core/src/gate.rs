//! Video-level quality gate and temporal segmentation.
//!
//! The gate discards clips with abnormal resolutions, too few frames, or a
//! moving camera; episodes longer than the frame budget are not discarded but
//! segmented by task index into compliant children.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ClipRecord;

/// Why a filter stage rejected a clip. `Ok` means it did not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Ok,
    AbnormalResolution,
    TooShort,
    MovingCamera,
    NearZeroMotion,
    Oscillation,
    LowCoherence,
    Misaligned,
}

impl RejectReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            RejectReason::Ok => "ok",
            RejectReason::AbnormalResolution => "abnormal_resolution",
            RejectReason::TooShort => "too_short",
            RejectReason::MovingCamera => "moving_camera",
            RejectReason::NearZeroMotion => "near_zero_motion",
            RejectReason::Oscillation => "oscillation",
            RejectReason::LowCoherence => "low_coherence",
            RejectReason::Misaligned => "misaligned",
        }
    }
}

/// Outcome of a per-clip filter decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub accepted: bool,
    pub reason: RejectReason,
    /// Number of records this clip contributes downstream: 1 for a plain
    /// accept, 0 for a reject, and the child count once the orchestrator has
    /// segmented an over-long episode.
    pub segments_emitted: u32,
}

impl GateDecision {
    pub fn accept() -> Self {
        GateDecision {
            accepted: true,
            reason: RejectReason::Ok,
            segments_emitted: 1,
        }
    }

    pub fn reject(reason: RejectReason) -> Self {
        GateDecision {
            accepted: false,
            reason,
            segments_emitted: 0,
        }
    }
}

/// Quality-gate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub min_frames: u32,
    pub max_frames: u32,
    /// When set, a clip's exact (width, height) must appear in this list.
    pub allowed_resolutions: Option<Vec<(u32, u32)>>,
    pub min_resolution: (u32, u32),
    /// Median border flow above this many pixels per sampled pair means the
    /// camera itself is moving.
    pub camera_motion_threshold: f64,
    /// Fraction of each side treated as the border band for camera-motion
    /// detection; manipulation foreground sits centrally.
    pub border_fraction: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            min_frames: 80,
            max_frames: 500,
            allowed_resolutions: None,
            min_resolution: (256, 256),
            camera_motion_threshold: 1.0,
            border_fraction: 0.1,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::InvalidConfig {
                field: format!("gate.{field}"),
                message,
            })
        };
        if self.min_frames < 1 || self.min_frames > self.max_frames {
            return bad(
                "min_frames",
                format!(
                    "need 1 <= min_frames <= max_frames, got {} > {}",
                    self.min_frames, self.max_frames
                ),
            );
        }
        if !crate::flow::finite_positive(self.camera_motion_threshold) {
            return bad("camera_motion_threshold", "must be positive".into());
        }
        if !(self.border_fraction > 0.0 && self.border_fraction < 0.5) {
            return bad("border_fraction", "must lie in (0, 0.5)".into());
        }
        Ok(())
    }
}

/// Pure accept/reject decision for one clip.
///
/// `border_flow_stat` is the median border flow magnitude in pixels per
/// sampled frame pair, when available. A `static_camera` entry in the
/// record's scores overrides the flow heuristic entirely.
pub fn apply_quality_gate(
    record: &ClipRecord,
    cfg: &GateConfig,
    border_flow_stat: Option<f64>,
) -> GateDecision {
    let (min_w, min_h) = cfg.min_resolution;
    let resolution_ok = match &cfg.allowed_resolutions {
        Some(list) => list.contains(&(record.width, record.height)),
        None => record.width >= min_w && record.height >= min_h,
    };
    if !resolution_ok {
        return GateDecision::reject(RejectReason::AbnormalResolution);
    }
    if record.frame_count < cfg.min_frames {
        return GateDecision::reject(RejectReason::TooShort);
    }
    let known_static = record
        .scores
        .get("static_camera")
        .is_some_and(|v| *v >= 0.5);
    if !known_static {
        if let Some(stat) = border_flow_stat {
            if stat > cfg.camera_motion_threshold {
                return GateDecision::reject(RejectReason::MovingCamera);
            }
        }
    }
    GateDecision::accept()
}

/// A span removed during segmentation because it fell below `min_frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedSpan {
    pub parent_clip_id: String,
    /// Local frame range `[start, end)` within the parent.
    pub start: u32,
    pub end: u32,
    pub task_index: Option<u32>,
}

/// Result of temporally segmenting one record.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub children: Vec<ClipRecord>,
    pub dropped: Vec<DroppedSpan>,
}

impl Segmentation {
    /// Frames accounted for across children and dropped spans.
    pub fn total_frames(&self) -> u64 {
        let kept: u64 = self.children.iter().map(|c| c.frame_count as u64).sum();
        let dropped: u64 = self.dropped.iter().map(|d| (d.end - d.start) as u64).sum();
        kept + dropped
    }
}

/// Splits an episode at task-index change points, then chunks any span still
/// longer than `max_frames` into near-equal pieces (sizes differing by at
/// most one). Children shorter than `min_frames` are dropped, not emitted.
///
/// Child ids are `parent#k` over emitted children, 0-based. When the whole
/// clip survives as a single span, the record is returned unchanged. Children
/// share the parent's frame files via `frame_start`; the boundary frames of
/// each claimed range are checked on disk when the frame directory exists.
pub fn segment_by_task(record: &ClipRecord, cfg: &GateConfig) -> Result<Segmentation> {
    // (start, end, task_index) spans in local frame coordinates.
    let mut spans: Vec<(u32, u32, Option<u32>)> = Vec::new();
    match &record.frame_task_index {
        Some(fti) => {
            let mut start = 0u32;
            for i in 1..fti.len() {
                if fti[i] != fti[i - 1] {
                    spans.push((start, i as u32, Some(fti[start as usize])));
                    start = i as u32;
                }
            }
            spans.push((start, fti.len() as u32, Some(fti[start as usize])));
        }
        None => spans.push((0, record.frame_count, None)),
    }
    let multi_task = spans
        .iter()
        .filter_map(|s| s.2)
        .collect::<std::collections::BTreeSet<_>>()
        .len()
        > 1;

    // Chunk over-long spans into ceil(L / max) near-equal pieces.
    let mut chunks: Vec<(u32, u32, Option<u32>)> = Vec::new();
    for &(start, end, task) in &spans {
        let len = end - start;
        if len > cfg.max_frames {
            let m = len.div_ceil(cfg.max_frames);
            let base = len / m;
            let rem = len % m;
            let mut at = start;
            for i in 0..m {
                let size = if i < rem { base + 1 } else { base };
                chunks.push((at, at + size, task));
                at += size;
            }
        } else {
            chunks.push((start, end, task));
        }
    }

    let (kept, dropped_spans): (Vec<_>, Vec<_>) = chunks
        .into_iter()
        .partition(|&(s, e, _)| e - s >= cfg.min_frames);
    let dropped = dropped_spans
        .into_iter()
        .map(|(start, end, task_index)| DroppedSpan {
            parent_clip_id: record.clip_id.clone(),
            start,
            end,
            task_index,
        })
        .collect();

    if kept.len() == 1 && kept[0].0 == 0 && kept[0].1 == record.frame_count {
        return Ok(Segmentation {
            children: vec![record.clone()],
            dropped,
        });
    }

    let check_disk = record.frame_dir.is_dir();
    let mut children = Vec::with_capacity(kept.len());
    for (k, &(start, end, task)) in kept.iter().enumerate() {
        if check_disk {
            for local in [start, end - 1] {
                let path = record.frame_path(local);
                if !path.is_file() {
                    return Err(Error::MissingFrame {
                        clip_id: record.clip_id.clone(),
                        path,
                    });
                }
            }
        }
        let mut child = record.clone();
        child.clip_id = format!("{}#{k}", record.clip_id);
        child.frame_count = end - start;
        child.frame_start = record.frame_start + start;
        child.frame_task_index = record
            .frame_task_index
            .as_ref()
            .map(|fti| fti[start as usize..end as usize].to_vec());
        child.action_frames = record
            .action_frames
            .iter()
            .filter(|af| af.frame_index >= start && af.frame_index < end)
            .map(|af| {
                let mut af = af.clone();
                af.frame_index -= start;
                af
            })
            .collect();
        if multi_task {
            if let Some(t) = task {
                child.task_id = format!("{}::t{t}", record.task_id);
            }
        }
        children.push(child);
    }
    Ok(Segmentation { children, dropped })
}
