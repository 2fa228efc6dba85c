//! Fixture builders shared by unit, integration, and doc tests.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::Rng;

use crate::imaging::GrayFrame;
use crate::manifest::{ActionFrame, ArmId, CameraModel, ClipRecord, Manifest};
use crate::rng::derive_rng;

/// A minimal valid record with identity-extrinsics camera and no frames on
/// disk. Fields are deliberately plain so tests override what they need.
pub fn sample_record(clip_id: &str) -> ClipRecord {
    ClipRecord {
        clip_id: clip_id.to_string(),
        source_dataset: "demo".to_string(),
        sub_dataset: "demo".to_string(),
        robot_type: "arm_a".to_string(),
        task_id: "pick".to_string(),
        task_text: "pick up the cube".to_string(),
        caption: None,
        frame_count: 100,
        fps: 30.0,
        width: 640,
        height: 480,
        frame_dir: PathBuf::from(format!("frames/{clip_id}")),
        frame_start: 0,
        camera: CameraModel::with_intrinsics(100.0, 100.0, 320.0, 240.0),
        action_frames: Vec::new(),
        frame_task_index: None,
        status: BTreeMap::new(),
        scores: BTreeMap::new(),
    }
}

/// An action frame at the given index, positioned `z` meters down the
/// optical axis with identity orientation.
pub fn sample_action_frame(frame_index: u32, z: f64) -> ActionFrame {
    ActionFrame {
        frame_index,
        position: [0.0, 0.0, z],
        orientation: [1.0, 0.0, 0.0, 0.0],
        gripper_openness: 0.5,
        arm_id: ArmId::Single,
    }
}

/// A manifest of `n` sample records `c000..c{n-1}`.
pub fn sample_manifest(n: usize) -> Manifest {
    let records = (0..n)
        .map(|i| sample_record(&format!("c{i:03}")))
        .collect();
    Manifest::from_records(records).expect("sample records are valid")
}

/// A smooth, deterministic synthetic texture in the 8-bit value range.
///
/// Seeded low-resolution noise is upsampled bilinearly and mixed with a
/// finer layer, giving gradients everywhere at feature scales a flow
/// estimator can lock onto.
pub fn textured_frame(width: u32, height: u32, seed: u64) -> GrayFrame {
    let mut rng = derive_rng(seed, "testutil/texture");
    let coarse = noise_layer(&mut rng, width.div_ceil(8), height.div_ceil(8));
    let fine = noise_layer(&mut rng, width.div_ceil(2), height.div_ceil(2));
    GrayFrame::from_fn(width, height, |x, y| {
        let c = sample_bilinear(&coarse, x as f32 / 8.0, y as f32 / 8.0);
        let f = sample_bilinear(&fine, x as f32 / 2.0, y as f32 / 2.0);
        50.0 + 130.0 * c + 25.0 * f
    })
}

fn noise_layer(rng: &mut impl Rng, width: u32, height: u32) -> GrayFrame {
    GrayFrame {
        width,
        height,
        data: (0..width as usize * height as usize)
            .map(|_| rng.gen::<f32>())
            .collect(),
    }
}

fn sample_bilinear(img: &GrayFrame, x: f32, y: f32) -> f32 {
    let x0 = x.floor() as i64;
    let y0 = y.floor() as i64;
    let ax = x - x0 as f32;
    let ay = y - y0 as f32;
    let p00 = img.get_clamped(x0, y0);
    let p10 = img.get_clamped(x0 + 1, y0);
    let p01 = img.get_clamped(x0, y0 + 1);
    let p11 = img.get_clamped(x0 + 1, y0 + 1);
    (1.0 - ay) * ((1.0 - ax) * p00 + ax * p10) + ay * ((1.0 - ax) * p01 + ax * p11)
}

/// Integer circular shift: every pixel moves by exactly (dx, dy), content
/// wrapping around the borders. The translation oracle for flow tests.
pub fn shift_wrapped(img: &GrayFrame, dx: i64, dy: i64) -> GrayFrame {
    let (w, h) = (img.width as i64, img.height as i64);
    GrayFrame::from_fn(img.width, img.height, |x, y| {
        let sx = (x as i64 - dx).rem_euclid(w);
        let sy = (y as i64 - dy).rem_euclid(h);
        img.get(sx as u32, sy as u32)
    })
}
