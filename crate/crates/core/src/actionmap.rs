//! Action maps: camera-projected end-effector state rendered into images,
//! and vision–action alignment checks built on top of them.
//!
//! A 7-D action (3-D position, orientation, gripper openness) becomes: a
//! circular mask at the projected center whose opacity encodes openness, and
//! three axis arrows from the projected rotation-matrix columns whose pixel
//! length shrinks with depth under perspective. Dual-arm platforms draw the
//! left arm into the red channel and the right into the blue.
//!
//! Rasterization is integer, coverage-based, and anti-aliasing free, so a
//! given input always renders byte-identically.

use image::RgbImage;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::manifest::{ActionFrame, ArmId, CameraModel};
use crate::vlm::{response_str, VlmTransport};

const MIN_CAMERA_Z: f64 = 1e-6;

/// Rendering parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderStyle {
    /// World-space length of each drawn orientation axis, meters.
    pub axis_world_length: f64,
    pub gripper_radius_px: u32,
    pub arrow_thickness_px: u32,
    /// Global opacity applied on top of per-pixel alpha when compositing.
    pub overlay_alpha: f64,
    /// Flip the openness-to-opacity mapping (default: open means opaque).
    pub invert_openness: bool,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            axis_world_length: 0.08,
            gripper_radius_px: 12,
            arrow_thickness_px: 2,
            overlay_alpha: 0.6,
            invert_openness: false,
        }
    }
}

impl RenderStyle {
    pub fn validate(&self) -> Result<()> {
        if !crate::flow::finite_positive(self.axis_world_length)
            || self.gripper_radius_px == 0
            || self.arrow_thickness_px == 0
        {
            return Err(Error::InvalidConfig {
                field: "render".into(),
                message: "dimensions must be positive".into(),
            });
        }
        if !(self.overlay_alpha.is_finite() && self.overlay_alpha > 0.0 && self.overlay_alpha <= 1.0) {
            return Err(Error::InvalidConfig {
                field: "render.overlay_alpha".into(),
                message: "must lie in (0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Geometry actually drawn for one arm, kept alongside the pixels so tests
/// and downstream checks can reason about exact projected coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmLayer {
    pub arm_id: ArmId,
    pub center_px: (f64, f64),
    pub depth_m: f64,
    /// Projected endpoints of the x/y/z orientation axes; `None` when an
    /// endpoint fell behind the camera and the arrow was clipped.
    pub axis_endpoints_px: [Option<(f64, f64)>; 3],
    pub openness: f64,
}

/// An RGBA action map plus per-arm layer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMap {
    pub width: u32,
    pub height: u32,
    /// Interleaved RGBA, row-major.
    pub rgba: Vec<u8>,
    pub arms: Vec<ArmLayer>,
}

impl ActionMap {
    fn new(width: u32, height: u32) -> Self {
        ActionMap {
            width,
            height,
            rgba: vec![0; width as usize * height as usize * 4],
            arms: Vec::new(),
        }
    }

    #[inline]
    fn paint(&mut self, x: i64, y: i64, color: [u8; 3], alpha: u8) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return; // off-canvas geometry clips silently
        }
        let i = (y as usize * self.width as usize + x as usize) * 4;
        // Channel-max compositing keeps overlapping primitives (and the two
        // arm channels) order-independent.
        self.rgba[i] = self.rgba[i].max(color[0]);
        self.rgba[i + 1] = self.rgba[i + 1].max(color[1]);
        self.rgba[i + 2] = self.rgba[i + 2].max(color[2]);
        self.rgba[i + 3] = self.rgba[i + 3].max(alpha);
    }

    pub fn alpha_at(&self, x: u32, y: u32) -> u8 {
        self.rgba[(y as usize * self.width as usize + x as usize) * 4 + 3]
    }

    pub fn to_rgba_image(&self) -> image::RgbaImage {
        image::RgbaImage::from_raw(self.width, self.height, self.rgba.clone())
            .expect("buffer sized to dimensions")
    }
}

/// Projects a world point through the camera: `p_cam = R p + t`, then the
/// pinhole division. Errors when the point is on or behind the camera plane.
pub fn project_point(camera: &CameraModel, p_world: Vector3<f64>) -> Result<(f64, f64, f64)> {
    let p_cam = camera.rotation_matrix() * p_world + camera.translation_vec();
    if p_cam.z <= MIN_CAMERA_Z {
        return Err(Error::BehindCamera { z: p_cam.z });
    }
    let u = camera.fx * p_cam.x / p_cam.z + camera.cx;
    let v = camera.fy * p_cam.y / p_cam.z + camera.cy;
    Ok((u, v, p_cam.z))
}

fn stamp_disc(map: &mut ActionMap, center: (f64, f64), radius: f64, color: [u8; 3], alpha: u8) {
    let (cu, cv) = center;
    let x0 = (cu - radius).floor() as i64;
    let x1 = (cu + radius).ceil() as i64;
    let y0 = (cv - radius).floor() as i64;
    let y1 = (cv + radius).ceil() as i64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cu;
            let dy = y as f64 - cv;
            if dx * dx + dy * dy <= radius * radius {
                map.paint(x, y, color, alpha);
            }
        }
    }
}

fn stamp_segment(
    map: &mut ActionMap,
    from: (f64, f64),
    to: (f64, f64),
    half_width: f64,
    color: [u8; 3],
    alpha: u8,
) {
    let (ax, ay) = from;
    let (bx, by) = to;
    let x0 = (ax.min(bx) - half_width).floor() as i64;
    let x1 = (ax.max(bx) + half_width).ceil() as i64;
    let y0 = (ay.min(by) - half_width).floor() as i64;
    let y1 = (ay.max(by) + half_width).ceil() as i64;
    let (ex, ey) = (bx - ax, by - ay);
    let len2 = ex * ex + ey * ey;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 - ax, y as f64 - ay);
            let t = if len2 == 0.0 {
                0.0
            } else {
                ((px * ex + py * ey) / len2).clamp(0.0, 1.0)
            };
            let dx = px - t * ex;
            let dy = py - t * ey;
            if dx * dx + dy * dy <= half_width * half_width {
                map.paint(x, y, color, alpha);
            }
        }
    }
}

fn stamp_arrow(
    map: &mut ActionMap,
    from: (f64, f64),
    to: (f64, f64),
    thickness: u32,
    color: [u8; 3],
) {
    let half = thickness as f64 / 2.0;
    stamp_segment(map, from, to, half, color, 255);
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let len = dx.hypot(dy);
    if len < 1e-9 {
        return;
    }
    let head = (3.0 * thickness as f64).max(6.0).min(len);
    let theta = dy.atan2(dx);
    for barb in [theta + 2.6, theta - 2.6] {
        let end = (to.0 + head * barb.cos(), to.1 + head * barb.sin());
        stamp_segment(map, to, end, half, color, 255);
    }
}

const LEFT_COLOR: [u8; 3] = [255, 0, 0];
const RIGHT_COLOR: [u8; 3] = [0, 0, 255];
const SINGLE_AXIS_COLORS: [[u8; 3]; 3] = [[255, 0, 0], [0, 255, 0], [0, 0, 255]];
const SINGLE_CIRCLE_COLOR: [u8; 3] = [255, 255, 255];

/// Renders the action frames of one video frame into an RGBA map.
///
/// A behind-camera gripper center is an error; axis endpoints behind the
/// camera merely clip that arrow, and geometry outside the canvas clips per
/// pixel.
pub fn render_action_map(
    camera: &CameraModel,
    action_frames: &[ActionFrame],
    size: (u32, u32),
    style: &RenderStyle,
) -> Result<ActionMap> {
    style.validate()?;
    let mut map = ActionMap::new(size.0, size.1);
    for af in action_frames {
        let center_world = af.position_vec();
        let (u, v, depth) = project_point(camera, center_world)?;
        let rotation = af.rotation_matrix();

        let mut endpoints: [Option<(f64, f64)>; 3] = [None; 3];
        for (i, endpoint) in endpoints.iter_mut().enumerate() {
            let axis_world = center_world + style.axis_world_length * rotation.column(i);
            *endpoint = match project_point(camera, axis_world) {
                Ok((eu, ev, _)) => Some((eu, ev)),
                Err(Error::BehindCamera { .. }) => None,
                Err(e) => return Err(e),
            };
        }

        let openness = if style.invert_openness {
            1.0 - af.gripper_openness
        } else {
            af.gripper_openness
        };
        let circle_alpha = (openness * 255.0).round() as u8;
        let (circle_color, axis_colors): ([u8; 3], [[u8; 3]; 3]) = match af.arm_id {
            ArmId::Left => (LEFT_COLOR, [LEFT_COLOR; 3]),
            ArmId::Right => (RIGHT_COLOR, [RIGHT_COLOR; 3]),
            ArmId::Single => (SINGLE_CIRCLE_COLOR, SINGLE_AXIS_COLORS),
        };

        stamp_disc(
            &mut map,
            (u, v),
            style.gripper_radius_px as f64,
            circle_color,
            circle_alpha,
        );
        for (endpoint, color) in endpoints.iter().zip(axis_colors) {
            if let Some(end) = endpoint {
                stamp_arrow(&mut map, (u, v), *end, style.arrow_thickness_px, color);
            }
        }

        map.arms.push(ArmLayer {
            arm_id: af.arm_id,
            center_px: (u, v),
            depth_m: depth,
            axis_endpoints_px: endpoints,
            openness,
        });
    }
    Ok(map)
}

/// Alpha-composites a rendered map over a video frame:
/// `out = (1 - a * overlay_alpha) * frame + a * overlay_alpha * map`.
/// A fully transparent map returns the frame byte-exactly.
pub fn overlay(frame: &RgbImage, map: &ActionMap, style: &RenderStyle) -> Result<RgbImage> {
    if frame.width() != map.width || frame.height() != map.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", frame.width(), frame.height()),
            actual: format!("{}x{}", map.width, map.height),
        });
    }
    let mut out = frame.clone();
    for (y, x) in (0..map.height).flat_map(|y| (0..map.width).map(move |x| (y, x))) {
        let i = (y as usize * map.width as usize + x as usize) * 4;
        let a = map.rgba[i + 3] as f64 / 255.0 * style.overlay_alpha;
        if a == 0.0 {
            continue;
        }
        let px = out.get_pixel_mut(x, y);
        for c in 0..3 {
            let blended = (1.0 - a) * px.0[c] as f64 + a * map.rgba[i + c] as f64;
            px.0[c] = blended.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Projects every action frame's position into pixel coordinates, the
/// engine's side of the alignment comparison.
pub fn projected_trajectory(
    camera: &CameraModel,
    action_frames: &[ActionFrame],
) -> Result<Vec<(f64, f64)>> {
    action_frames
        .iter()
        .map(|af| project_point(camera, af.position_vec()).map(|(u, v, _)| (u, v)))
        .collect()
}

/// Mean Euclidean distance between projected and externally detected
/// centers, frame by frame.
pub fn alignment_deviation(projected: &[(f64, f64)], detected: &[(f64, f64)]) -> Result<f64> {
    if projected.len() != detected.len() {
        return Err(Error::LengthMismatch {
            left: projected.len(),
            right: detected.len(),
        });
    }
    if projected.is_empty() {
        return Err(Error::EmptyInput("alignment needs at least one center"));
    }
    let sum: f64 = projected
        .iter()
        .zip(detected)
        .map(|(p, d)| (p.0 - d.0).hypot(p.1 - d.1))
        .sum();
    Ok(sum / projected.len() as f64)
}

/// Alignment-stage thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    /// Clips whose mean deviation exceeds this many pixels are misaligned.
    pub max_mean_deviation_px: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            max_mean_deviation_px: 20.0,
        }
    }
}

/// VLM verdict on whether overlaid action maps match the observed motion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVerdict {
    Aligned,
    Misaligned,
}

/// Asks an external vision-language service to judge a batch of overlay
/// frames against the task instruction. The service verdict is returned
/// verbatim together with its rationale.
pub fn verify_alignment_vlm(
    overlay_frame_refs: &[String],
    instruction: &str,
    client: &mut dyn VlmTransport,
) -> Result<(AlignmentVerdict, String)> {
    let request = json!({
        "instruction": instruction,
        "frames": overlay_frame_refs,
    });
    let response = client.call("/verify_alignment", &request)?;
    let verdict = match response_str(&response, "verdict")? {
        "aligned" => AlignmentVerdict::Aligned,
        "misaligned" => AlignmentVerdict::Misaligned,
        other => {
            return Err(Error::MalformedResponse {
                message: format!("unknown verdict {other:?}"),
            })
        }
    };
    let rationale = response
        .get("rationale")
        .and_then(serde_json::Value::as_str)
        .unwrap_or_default()
        .to_string();
    Ok((verdict, rationale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::sample_action_frame;
    use crate::vlm::{ReplayTransport, TranscriptEntry};
    use image::Rgb;

    fn camera_64() -> CameraModel {
        CameraModel::with_intrinsics(100.0, 100.0, 64.0, 64.0)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let (u, v, z) = project_point(&camera_64(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((u, v, z), (64.0, 64.0, 1.0));
    }

    #[test]
    fn off_axis_projection_matches_hand_arithmetic() {
        let (u, v, _) = project_point(&camera_64(), Vector3::new(0.5, 0.0, 1.0)).unwrap();
        assert_eq!((u, v), (114.0, 64.0));
    }

    #[test]
    fn behind_camera_point_errors() {
        assert!(matches!(
            project_point(&camera_64(), Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_is_scale_consistent() {
        let cam = camera_64();
        let p = Vector3::new(0.3, -0.2, 1.5);
        let (u1, v1, _) = project_point(&cam, p).unwrap();
        for lambda in [0.5, 2.0, 7.3] {
            let (u2, v2, _) = project_point(&cam, lambda * p).unwrap();
            assert!((u1 - u2).abs() < 1e-9 && (v1 - v2).abs() < 1e-9);
        }
    }

    #[test]
    fn extrinsics_are_applied_before_projection() {
        let mut cam = camera_64();
        cam.translation = [0.0, 0.0, 2.0];
        let (u, v, z) = project_point(&cam, Vector3::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((u, v, z), (64.0, 64.0, 2.0));
    }

    fn frame_at(z: f64, openness: f64) -> ActionFrame {
        let mut af = sample_action_frame(0, z);
        af.gripper_openness = openness;
        af
    }

    #[test]
    fn openness_maps_linearly_to_circle_alpha() {
        let style = RenderStyle::default();
        let cam = camera_64();
        // Probe inside the disc but away from the +x/+y axis arrows, which
        // carry alpha 255 of their own.
        let probe = (56u32, 56u32);
        let closed = render_action_map(&cam, &[frame_at(1.0, 0.0)], (128, 128), &style).unwrap();
        assert_eq!(closed.alpha_at(probe.0, probe.1), 0, "closed gripper invisible");
        let open = render_action_map(&cam, &[frame_at(1.0, 1.0)], (128, 128), &style).unwrap();
        assert_eq!(open.alpha_at(probe.0, probe.1), 255, "open gripper opaque");
        let half = render_action_map(&cam, &[frame_at(1.0, 0.5)], (128, 128), &style).unwrap();
        assert_eq!(half.alpha_at(probe.0, probe.1), 128);
    }

    fn axis_len(map: &ActionMap, axis: usize) -> f64 {
        let arm = &map.arms[0];
        let (u, v) = arm.center_px;
        let (eu, ev) = arm.axis_endpoints_px[axis].expect("axis visible");
        (eu - u).hypot(ev - v)
    }

    #[test]
    fn halving_depth_doubles_arrow_length() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let near = render_action_map(&cam, &[frame_at(1.0, 0.5)], (128, 128), &style).unwrap();
        let far = render_action_map(&cam, &[frame_at(2.0, 0.5)], (128, 128), &style).unwrap();
        let ratio = axis_len(&near, 0) / axis_len(&far, 0);
        // Identity orientation: the x axis stays parallel to the image
        // plane, so the ratio is exactly the depth ratio.
        assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
    }

    #[test]
    fn arrow_length_decreases_monotonically_with_depth() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let mut last = f64::INFINITY;
        for z in [0.5, 1.0, 1.5, 2.5, 4.0] {
            let map = render_action_map(&cam, &[frame_at(z, 0.5)], (128, 128), &style).unwrap();
            let len = axis_len(&map, 0);
            assert!(len < last, "length {len} at z {z} not below {last}");
            last = len;
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let mut left = frame_at(1.2, 0.7);
        left.arm_id = ArmId::Left;
        let mut right = frame_at(1.4, 0.2);
        right.arm_id = ArmId::Right;
        right.position = [0.2, 0.1, 1.4];
        let frames = [left, right];
        let a = render_action_map(&cam, &frames, (128, 128), &style).unwrap();
        let b = render_action_map(&cam, &frames, (128, 128), &style).unwrap();
        assert_eq!(a.rgba, b.rgba);
        assert_eq!(a.arms, b.arms);
    }

    #[test]
    fn dual_arm_channels_stay_separate() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let mut left = frame_at(1.0, 1.0);
        left.arm_id = ArmId::Left;
        let map = render_action_map(&cam, &[left], (128, 128), &style).unwrap();
        let i = (64 * 128 + 64) * 4;
        assert_eq!(map.rgba[i], 255, "left arm paints red");
        assert_eq!(map.rgba[i + 1], 0);
        assert_eq!(map.rgba[i + 2], 0, "left arm never paints blue");
    }

    #[test]
    fn behind_camera_center_is_an_error_but_behind_endpoint_clips() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let mut af = frame_at(-1.0, 0.5);
        assert!(render_action_map(&cam, &[af.clone()], (128, 128), &style).is_err());
        // Center barely in front, z axis pointing back through the camera.
        af.position = [0.0, 0.0, 0.05];
        af.orientation = [0.0, 1.0, 0.0, 0.0]; // 180 deg about x: z axis flips
        let map = render_action_map(&cam, &[af], (128, 128), &style).unwrap();
        assert!(map.arms[0].axis_endpoints_px[2].is_none(), "z arrow clipped");
    }

    #[test]
    fn off_canvas_geometry_is_clipped_not_an_error() {
        let style = RenderStyle::default();
        let cam = camera_64();
        let mut af = frame_at(1.0, 1.0);
        af.position = [5.0, 5.0, 1.0]; // projects far outside 128x128
        let map = render_action_map(&cam, &[af], (128, 128), &style).unwrap();
        assert!(map.rgba.iter().all(|&b| b == 0));
    }

    #[test]
    fn transparent_overlay_is_byte_exact_identity() {
        let style = RenderStyle::default();
        let frame = RgbImage::from_fn(64, 48, |x, y| Rgb([x as u8, y as u8, 77]));
        let map = ActionMap::new(64, 48);
        let out = overlay(&frame, &map, &style).unwrap();
        assert_eq!(out.as_raw(), frame.as_raw());
    }

    #[test]
    fn opaque_overlay_replaces_the_pixel() {
        let style = RenderStyle {
            overlay_alpha: 1.0,
            ..RenderStyle::default()
        };
        let frame = RgbImage::from_pixel(8, 8, Rgb([10, 20, 30]));
        let mut map = ActionMap::new(8, 8);
        map.paint(3, 3, [200, 100, 50], 255);
        let out = overlay(&frame, &map, &style).unwrap();
        assert_eq!(out.get_pixel(3, 3).0, [200, 100, 50]);
        assert_eq!(out.get_pixel(0, 0).0, [10, 20, 30]);
    }

    #[test]
    fn overlay_blend_matches_hand_arithmetic() {
        let style = RenderStyle::default(); // overlay_alpha 0.6
        let frame = RgbImage::from_pixel(4, 4, Rgb([100, 100, 100]));
        let mut map = ActionMap::new(4, 4);
        map.paint(1, 1, [255, 0, 0], 255);
        let out = overlay(&frame, &map, &style).unwrap();
        // red: 0.4*100 + 0.6*255 = 193; green/blue: 0.4*100 = 40
        assert_eq!(out.get_pixel(1, 1).0, [193, 40, 40]);
    }

    #[test]
    fn overlay_dimension_mismatch_errors() {
        let style = RenderStyle::default();
        let frame = RgbImage::new(10, 10);
        let map = ActionMap::new(11, 10);
        assert!(matches!(
            overlay(&frame, &map, &style),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn deviation_examples() {
        let a = vec![(0.0, 0.0), (5.0, 5.0)];
        assert_eq!(alignment_deviation(&a, &a).unwrap(), 0.0);
        let shifted: Vec<(f64, f64)> = a.iter().map(|p| (p.0 + 3.0, p.1 + 4.0)).collect();
        assert!((alignment_deviation(&a, &shifted).unwrap() - 5.0).abs() < 1e-12);
        let short = vec![(0.0, 0.0)];
        assert!(matches!(
            alignment_deviation(&a, &short),
            Err(Error::LengthMismatch { left: 2, right: 1 })
        ));
    }

    #[test]
    fn vlm_verdicts_pass_through_the_transport() {
        let request = json!({
            "instruction": "pick up the apple",
            "frames": ["overlay/000000.png"],
        });
        let mut replay = ReplayTransport::from_entries(vec![
            TranscriptEntry {
                endpoint: "/verify_alignment".into(),
                request: request.clone(),
                response: json!({"verdict": "aligned", "rationale": "trajectory matches"}),
            },
            TranscriptEntry {
                endpoint: "/verify_alignment".into(),
                request: request.clone(),
                response: json!({
                    "verdict": "misaligned",
                    "rationale": "gripper state contradicts visuals"
                }),
            },
            TranscriptEntry {
                endpoint: "/verify_alignment".into(),
                request: request.clone(),
                response: json!({"status": "hm"}),
            },
        ]);
        let frames = vec!["overlay/000000.png".to_string()];
        let (verdict, _) =
            verify_alignment_vlm(&frames, "pick up the apple", &mut replay).unwrap();
        assert_eq!(verdict, AlignmentVerdict::Aligned);
        let (verdict, rationale) =
            verify_alignment_vlm(&frames, "pick up the apple", &mut replay).unwrap();
        assert_eq!(verdict, AlignmentVerdict::Misaligned);
        assert_eq!(rationale, "gripper state contradicts visuals");
        assert!(matches!(
            verify_alignment_vlm(&frames, "pick up the apple", &mut replay),
            Err(Error::MalformedResponse { .. })
        ));
    }
}
