//! Shared image plumbing: luma conversion, frame file naming, PNG i/o.

use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights, applied everywhere a color frame is reduced to
/// grayscale so that every subsystem sees the same gray values.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// A single-channel float image with values in the 8-bit range `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayFrame {
    pub width: u32,
    pub height: u32,
    /// Row-major, `width * height` samples.
    pub data: Vec<f32>,
}

impl GrayFrame {
    pub fn new(width: u32, height: u32) -> Self {
        GrayFrame {
            width,
            height,
            data: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f32) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayFrame {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        self.data[y as usize * self.width as usize + x as usize] = v;
    }

    /// Sample with coordinates clamped to the image border.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64) -> f32 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.data[yc * self.width as usize + xc]
    }

    pub fn from_rgb(img: &RgbImage) -> Self {
        let (width, height) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| {
                LUMA_WEIGHTS[0] * p.0[0] as f32
                    + LUMA_WEIGHTS[1] * p.0[1] as f32
                    + LUMA_WEIGHTS[2] * p.0[2] as f32
            })
            .collect();
        GrayFrame {
            width,
            height,
            data,
        }
    }
}

/// Path of the `index`-th frame inside `frame_dir` (`%06d.png`, 0-based).
pub fn frame_path(frame_dir: &Path, index: u32) -> PathBuf {
    frame_dir.join(format!("{index:06}.png"))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()),
    })?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &image::DynamicImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn luma_matches_hand_computation() {
        let mut img = RgbImage::new(1, 1);
        img.put_pixel(0, 0, Rgb([100, 150, 200]));
        let gray = GrayFrame::from_rgb(&img);
        let expected = 0.299 * 100.0 + 0.587 * 150.0 + 0.114 * 200.0;
        assert!((gray.get(0, 0) - expected).abs() < 1e-4);
    }

    #[test]
    fn frame_paths_are_zero_padded() {
        let p = frame_path(Path::new("clips/c1"), 34);
        assert_eq!(p, PathBuf::from("clips/c1/000034.png"));
    }
}
