//! Dense optical flow, global kinematic scoring, and the motion filter.
//!
//! Frames are sampled at a fixed rate, flow is estimated for each consecutive
//! pair, and the per-pair mean polar magnitudes are aggregated into a clip
//! level kinematic score. Clips with near-zero motion or high motion that
//! cancels to nothing (unphysical oscillation) are rejected.

mod farneback;

pub use farneback::farneback_flow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateDecision, RejectReason};
use crate::imaging::GrayFrame;
use crate::manifest::ClipRecord;

/// Dense per-pixel displacement between two frames, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: u32,
    pub height: u32,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        FlowField {
            width,
            height,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
        }
    }

    /// Constant-displacement field, mostly useful in tests.
    pub fn uniform(width: u32, height: u32, dx: f32, dy: f32) -> Self {
        let n = width as usize * height as usize;
        FlowField {
            width,
            height,
            dx: vec![dx; n],
            dy: vec![dy; n],
        }
    }

    /// Mean (dx, dy) over pixels at least `margin` away from every edge.
    /// Falls back to the full field when the margin leaves nothing.
    pub fn interior_mean(&self, margin: u32) -> (f64, f64) {
        let (w, h) = (self.width as i64, self.height as i64);
        let m = margin as i64;
        let (x0, x1, y0, y1) = if w > 2 * m && h > 2 * m {
            (m, w - m, m, h - m)
        } else {
            (0, w, 0, h)
        };
        let mut sx = 0f64;
        let mut sy = 0f64;
        let mut count = 0f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y * w + x) as usize;
                sx += self.dx[i] as f64;
                sy += self.dy[i] as f64;
                count += 1.0;
            }
        }
        (sx / count, sy / count)
    }

    /// Mean polar magnitude over the interior (same margin rule).
    pub fn interior_mean_magnitude(&self, margin: u32) -> f64 {
        let (w, h) = (self.width as i64, self.height as i64);
        let m = margin as i64;
        let (x0, x1, y0, y1) = if w > 2 * m && h > 2 * m {
            (m, w - m, m, h - m)
        } else {
            (0, w, 0, h)
        };
        let mut sum = 0f64;
        let mut count = 0f64;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = (y * w + x) as usize;
                sum += (self.dx[i] as f64).hypot(self.dy[i] as f64);
                count += 1.0;
            }
        }
        sum / count
    }
}

/// Flow estimation and motion-filter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Frames per second at which grayscale frames are sampled.
    pub sample_fps: f64,
    pub pyramid_levels: u32,
    pub pyramid_scale: f64,
    /// Box window for the displacement least-squares solve. Border pixels
    /// within `window_size / 2` of an edge are excluded from aggregation.
    pub window_size: u32,
    pub iterations: u32,
    /// Full (odd) width of the polynomial-expansion neighborhood.
    pub poly_n: u32,
    pub poly_sigma: f64,
    /// Clips with mean magnitude below this are near-zero motion.
    pub tau_low: f64,
    /// Clips with net-to-path ratio below this oscillate in place.
    pub ratio_min: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            sample_fps: 2.0,
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
            tau_low: 0.3,
            ratio_min: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::InvalidConfig {
                field: format!("flow.{field}"),
                message: message.to_string(),
            })
        };
        if !finite_positive(self.sample_fps) {
            return bad("sample_fps", "must be positive");
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels", "must be at least 1");
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad("pyramid_scale", "must lie in (0, 1)");
        }
        if self.window_size == 0 || self.iterations == 0 {
            return bad("window_size/iterations", "must be positive");
        }
        if self.poly_n.is_multiple_of(2) || self.poly_n == 0 {
            return bad("poly_n", "must be odd");
        }
        if ![self.poly_sigma, self.tau_low, self.ratio_min]
            .iter()
            .all(|v| finite_positive(*v))
        {
            return bad("poly_sigma/tau_low/ratio_min", "must be positive");
        }
        Ok(())
    }

    /// Aggregation margin: half the solve window.
    pub fn interior_margin(&self) -> u32 {
        self.window_size / 2
    }
}

/// Clip-level motion statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicScore {
    /// Mean polar magnitude per consecutive sampled pair, pixels.
    pub pair_means: Vec<f64>,
    /// Arithmetic mean of `pair_means`.
    pub clip_mean: f64,
    /// |sum of mean displacements| / sum of |mean displacements|, in [0, 1];
    /// 1 when the denominator is zero. Low values mean the motion cancels.
    pub net_to_path_ratio: f64,
}

/// True for finite, strictly positive values; the common config check.
pub fn finite_positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Frame indices sampled at `sample_fps` from a clip at `fps`:
/// `round(k * fps / sample_fps)` while in range, consecutive duplicates
/// collapsed.
pub fn sample_frame_indices(frame_count: u32, fps: f64, sample_fps: f64) -> Vec<u32> {
    let step = fps / sample_fps;
    let mut indices = Vec::new();
    let mut k = 0u64;
    loop {
        let idx = (k as f64 * step).round();
        if idx >= frame_count as f64 {
            break;
        }
        let idx = idx as u32;
        if indices.last() != Some(&idx) {
            indices.push(idx);
        }
        k += 1;
    }
    indices
}

/// Loads the sampled frames of a clip as grayscale, BT.601 luma.
pub fn sample_gray_frames(record: &ClipRecord, cfg: &FlowConfig) -> Result<Vec<GrayFrame>> {
    let indices = sample_frame_indices(record.frame_count, record.fps, cfg.sample_fps);
    if indices.len() < 2 {
        return Err(Error::InsufficientFrames {
            clip_id: record.clip_id.clone(),
            got: indices.len(),
            need: 2,
        });
    }
    indices
        .iter()
        .map(|&i| {
            let path = record.frame_path(i);
            crate::imaging::load_rgb(&path).map(|img| GrayFrame::from_rgb(&img))
        })
        .collect()
}

/// Aggregates per-pair flow fields into a [`KinematicScore`].
pub fn kinematic_score(flows: &[FlowField], cfg: &FlowConfig) -> Result<KinematicScore> {
    if flows.is_empty() {
        return Err(Error::EmptyInput("kinematic_score needs at least one flow field"));
    }
    let margin = cfg.interior_margin();
    let pair_means: Vec<f64> = flows
        .iter()
        .map(|f| f.interior_mean_magnitude(margin))
        .collect();
    let clip_mean = pair_means.iter().sum::<f64>() / pair_means.len() as f64;

    let mut net = (0f64, 0f64);
    let mut path = 0f64;
    for f in flows {
        let (mx, my) = f.interior_mean(margin);
        net.0 += mx;
        net.1 += my;
        path += mx.hypot(my);
    }
    let net_to_path_ratio = if path == 0.0 {
        1.0
    } else {
        (net.0.hypot(net.1) / path).min(1.0)
    };
    Ok(KinematicScore {
        pair_means,
        clip_mean,
        net_to_path_ratio,
    })
}

/// Rejects near-zero motion and in-place oscillation.
pub fn motion_filter(score: &KinematicScore, cfg: &FlowConfig) -> GateDecision {
    if score.clip_mean < cfg.tau_low {
        GateDecision::reject(RejectReason::NearZeroMotion)
    } else if score.net_to_path_ratio < cfg.ratio_min {
        GateDecision::reject(RejectReason::Oscillation)
    } else {
        GateDecision::accept()
    }
}

/// Median flow magnitude within the border band (the outer `border_fraction`
/// of each side), across all pairs. This is the statistic the quality gate
/// compares against its camera-motion threshold.
pub fn border_flow_stat(flows: &[FlowField], border_fraction: f64) -> Option<f64> {
    let mut magnitudes = Vec::new();
    for f in flows {
        let bw = ((f.width as f64 * border_fraction) as u32).max(1);
        let bh = ((f.height as f64 * border_fraction) as u32).max(1);
        for y in 0..f.height {
            for x in 0..f.width {
                let in_band =
                    x < bw || x >= f.width - bw || y < bh || y >= f.height - bh;
                if in_band {
                    let i = (y * f.width + x) as usize;
                    magnitudes.push((f.dx[i] as f64).hypot(f.dy[i] as f64));
                }
            }
        }
    }
    if magnitudes.is_empty() {
        return None;
    }
    magnitudes.sort_by(|a, b| a.total_cmp(b));
    let n = magnitudes.len();
    Some(if n % 2 == 1 {
        magnitudes[n / 2]
    } else {
        0.5 * (magnitudes[n / 2 - 1] + magnitudes[n / 2])
    })
}
