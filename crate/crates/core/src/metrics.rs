//! Evaluation metrics: PSNR, windowed SSIM, and normalized dynamic time
//! warping for gripper trajectories, plus report aggregation.

use std::collections::BTreeMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::LUMA_WEIGHTS;

/// Metric parameters; the standard constants, exposed for pinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Reported PSNR for identical images (MSE 0).
    pub psnr_cap_db: f64,
    /// Side length of the Gaussian SSIM window.
    pub ssim_window: u32,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// Dynamic range of 8-bit content.
    pub dynamic_range: f64,
    /// DTW normalization distance in pixels. Conventionally 5% of the image
    /// diagonal; the default matches 640x480. See [`ndtw_d_th_for`].
    pub ndtw_d_th: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            psnr_cap_db: 99.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            dynamic_range: 255.0,
            ndtw_d_th: 40.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.psnr_cap_db > 0.0
            && self.ssim_window > 0
            && self.ssim_sigma > 0.0
            && self.ssim_k1 > 0.0
            && self.ssim_k2 > 0.0
            && self.dynamic_range > 0.0
            && self.ndtw_d_th > 0.0;
        if !all_positive {
            return Err(Error::InvalidConfig {
                field: "metrics".into(),
                message: "all parameters must be positive".into(),
            });
        }
        Ok(())
    }
}

/// 5% of the image diagonal, the conventional DTW normalization distance.
pub fn ndtw_d_th_for(width: u32, height: u32) -> f64 {
    0.05 * (width as f64).hypot(height as f64)
}

fn check_same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.width(), a.height()),
            actual: format!("{}x{}", b.width(), b.height()),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all color channels:
/// `10 log10(L^2 / MSE)`, capped for identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage, cfg: &MetricConfig) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut sum_sq = 0f64;
    for (pa, pb) in a.pixels().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa.0[c] as f64 - pb.0[c] as f64;
            sum_sq += d * d;
        }
    }
    let mse = sum_sq / (a.width() as f64 * a.height() as f64 * 3.0);
    if mse == 0.0 {
        return Ok(cfg.psnr_cap_db);
    }
    Ok(10.0 * (cfg.dynamic_range * cfg.dynamic_range / mse).log10())
}

fn luma_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| {
            LUMA_WEIGHTS[0] as f64 * p.0[0] as f64
                + LUMA_WEIGHTS[1] as f64 * p.0[1] as f64
                + LUMA_WEIGHTS[2] as f64 * p.0[2] as f64
        })
        .collect()
}

/// Mean structural similarity over valid (fully inside) Gaussian windows.
/// Color input is reduced to luma first.
pub fn ssim(a: &RgbImage, b: &RgbImage, cfg: &MetricConfig) -> Result<f64> {
    check_same_shape(a, b)?;
    cfg.validate()?;
    let win = cfg.ssim_window as usize;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < win || h < win {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
            need: cfg.ssim_window,
        });
    }

    // Normalized 2-D Gaussian weights.
    let half = (win / 2) as f64;
    let mut weights = vec![0f64; win * win];
    let mut wsum = 0f64;
    for y in 0..win {
        for x in 0..win {
            let dx = x as f64 - half;
            let dy = y as f64 - half;
            let g = (-(dx * dx + dy * dy) / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma)).exp();
            weights[y * win + x] = g;
            wsum += g;
        }
    }
    for v in &mut weights {
        *v /= wsum;
    }

    let pa = luma_plane(a);
    let pb = luma_plane(b);
    let c1 = (cfg.ssim_k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.ssim_k2 * cfg.dynamic_range).powi(2);

    let mut total = 0f64;
    let mut count = 0usize;
    for wy in 0..=(h - win) {
        for wx in 0..=(w - win) {
            let mut mu_a = 0f64;
            let mut mu_b = 0f64;
            let mut aa = 0f64;
            let mut bb = 0f64;
            let mut ab = 0f64;
            for y in 0..win {
                let row = (wy + y) * w + wx;
                let wrow = y * win;
                for x in 0..win {
                    let g = weights[wrow + x];
                    let va = pa[row + x];
                    let vb = pb[row + x];
                    mu_a += g * va;
                    mu_b += g * vb;
                    aa += g * va * va;
                    bb += g * vb * vb;
                    ab += g * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// A time-ordered 2-D pixel trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("trajectory must have at least one point"));
        }
        if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
            return Err(Error::NonFinite("trajectory coordinates"));
        }
        Ok(Trajectory { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Unconstrained dynamic-time-warping distance with Euclidean point cost and
/// match/insert/delete steps.
pub fn dtw_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    let cost = |i: usize, j: usize| {
        let (ax, ay) = a.points[i];
        let (bx, by) = b.points[j];
        (ax - bx).hypot(ay - by)
    };
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 0..a.len() {
        curr[0] = f64::INFINITY;
        for j in 0..m {
            let best = prev[j].min(prev[j + 1]).min(curr[j]);
            curr[j + 1] = cost(i, j) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Normalized DTW similarity `exp(-DTW / (|gt| * d_th))` in `(0, 1]`.
pub fn ndtw(pred: &Trajectory, gt: &Trajectory, cfg: &MetricConfig) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyInput("ndtw needs nonempty trajectories"));
    }
    cfg.validate()?;
    let d = dtw_distance(pred, gt);
    Ok((-d / (gt.len() as f64 * cfg.ndtw_d_th)).exp())
}

/// Per-clip metric values; `None` marks a metric absent for that clip.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndtw: Option<f64>,
}

/// Mean over clips where the metric is present, with the contributing count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_clip: BTreeMap<String, ClipMetrics>,
    pub psnr: MetricSummary,
    pub ssim: MetricSummary,
    pub ndtw: MetricSummary,
}

fn summarize(values: impl Iterator<Item = Option<f64>>) -> MetricSummary {
    let present: Vec<f64> = values.flatten().collect();
    MetricSummary {
        mean: if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        },
        count: present.len(),
    }
}

/// Unweighted per-metric means plus the per-clip breakdown. Missing values
/// are excluded from the mean and reflected in the count.
pub fn aggregate_report(per_clip: &BTreeMap<String, ClipMetrics>) -> Result<MetricReport> {
    if per_clip.is_empty() {
        return Err(Error::EmptyInput("metric report needs at least one clip"));
    }
    Ok(MetricReport {
        per_clip: per_clip.clone(),
        psnr: summarize(per_clip.values().map(|m| m.psnr)),
        ssim: summarize(per_clip.values().map(|m| m.ssim)),
        ndtw: summarize(per_clip.values().map(|m| m.ndtw)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn constant(v: u8, w: u32, h: u32) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    #[test]
    fn identical_images_hit_the_psnr_cap() {
        let cfg = MetricConfig::default();
        let img = constant(123, 16, 16);
        assert_eq!(psnr(&img, &img, &cfg).unwrap(), 99.0);
    }

    #[test]
    fn full_scale_difference_is_zero_db() {
        let cfg = MetricConfig::default();
        let a = constant(0, 16, 16);
        let b = constant(255, 16, 16);
        assert!((psnr(&a, &b, &cfg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unit_mse_matches_closed_form() {
        let cfg = MetricConfig::default();
        let a = constant(100, 16, 16);
        let b = constant(101, 16, 16);
        let expected = 10.0 * 65025f64.log10(); // 48.1308...
        assert!((psnr(&a, &b, &cfg).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_as_mse_grows() {
        let cfg = MetricConfig::default();
        let a = constant(100, 16, 16);
        let mut last = f64::INFINITY;
        for delta in [1u8, 2, 5, 20, 80] {
            let b = constant(100 + delta, 16, 16);
            let v = psnr(&a, &b, &cfg).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let cfg = MetricConfig::default();
        let img = RgbImage::from_fn(32, 24, |x, y| {
            let v = ((x * 7 + y * 13) % 251) as u8;
            Rgb([v, v.wrapping_add(40), v.wrapping_mul(3)])
        });
        assert!((ssim(&img, &img, &cfg).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_images_match_the_zero_variance_closed_form() {
        let cfg = MetricConfig::default();
        let a = constant(100, 32, 32);
        let b = constant(150, 32, 32);
        let c1 = 6.5025;
        let expected = (2.0 * 100.0 * 150.0 + c1) / (100.0f64 * 100.0 + 150.0 * 150.0 + c1);
        assert!((ssim(&a, &b, &cfg).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn image_smaller_than_the_window_errors() {
        let cfg = MetricConfig::default();
        let a = constant(1, 8, 8);
        assert!(matches!(
            ssim(&a, &a, &cfg),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn ssim_is_symmetric() {
        let cfg = MetricConfig::default();
        let a = RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 11) as u8, (y * 5) as u8, 128]));
        let b = RgbImage::from_fn(20, 20, |x, y| Rgb([(y * 9) as u8, (x * 3) as u8, 30]));
        let ab = ssim(&a, &b, &cfg).unwrap();
        let ba = ssim(&b, &a, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(points.to_vec()).unwrap()
    }

    #[test]
    fn dtw_of_identical_trajectories_is_zero() {
        let t = traj(&[(0.0, 0.0), (3.0, 4.0), (6.0, 8.0)]);
        assert_eq!(dtw_distance(&t, &t), 0.0);
        let cfg = MetricConfig::default();
        assert_eq!(ndtw(&t, &t, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn single_points_at_dth_give_exp_minus_one() {
        let cfg = MetricConfig::default();
        let a = traj(&[(0.0, 0.0)]);
        let b = traj(&[(cfg.ndtw_d_th, 0.0)]);
        let v = ndtw(&a, &b, &cfg).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn warping_absorbs_duplicated_points() {
        let cfg = MetricConfig::default();
        let gt = traj(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]);
        let pred = traj(&[(0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(dtw_distance(&pred, &gt), 0.0);
        assert_eq!(ndtw(&pred, &gt, &cfg).unwrap(), 1.0);
    }

    /// Exhaustive enumeration over all monotone warping paths; the
    /// independent oracle for the DP.
    fn dtw_brute(a: &Trajectory, b: &Trajectory) -> f64 {
        fn go(a: &Trajectory, b: &Trajectory, i: usize, j: usize) -> f64 {
            let (ax, ay) = a.points[i];
            let (bx, by) = b.points[j];
            let c = (ax - bx).hypot(ay - by);
            if i == 0 && j == 0 {
                return c;
            }
            let mut best = f64::INFINITY;
            if i > 0 {
                best = best.min(go(a, b, i - 1, j));
            }
            if j > 0 {
                best = best.min(go(a, b, i, j - 1));
            }
            if i > 0 && j > 0 {
                best = best.min(go(a, b, i - 1, j - 1));
            }
            c + best
        }
        go(a, b, a.len() - 1, b.len() - 1)
    }

    /// Every trajectory of length 1..=max_len over the given alphabet.
    pub(crate) fn enumerate_trajectories(
        alphabet: &[(f64, f64)],
        max_len: usize,
    ) -> Vec<Trajectory> {
        let mut all: Vec<Vec<(f64, f64)>> = vec![vec![]];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let mut next = Vec::new();
            for t in &all {
                for &p in alphabet {
                    let mut t2 = t.clone();
                    t2.push(p);
                    next.push(t2);
                }
            }
            out.extend(next.iter().cloned());
            all = next;
        }
        out.into_iter()
            .map(|t| Trajectory::new(t).unwrap())
            .collect()
    }

    #[test]
    fn dp_matches_brute_force_on_short_trajectories() {
        let alphabet = [(0.0, 0.0), (1.0, 0.5), (2.0, 3.0)];
        let trajectories = enumerate_trajectories(&alphabet, 3);
        for a in &trajectories {
            for b in &trajectories {
                let dp = dtw_distance(a, b);
                let brute = dtw_brute(a, b);
                assert!((dp - brute).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn report_aggregation_handles_missing_metrics() {
        let mut per_clip = BTreeMap::new();
        per_clip.insert(
            "a".to_string(),
            ClipMetrics {
                psnr: Some(20.0),
                ssim: Some(0.9),
                ndtw: Some(0.8),
            },
        );
        per_clip.insert(
            "b".to_string(),
            ClipMetrics {
                psnr: Some(22.0),
                ssim: None,
                ndtw: Some(0.6),
            },
        );
        let report = aggregate_report(&per_clip).unwrap();
        assert_eq!(report.psnr.mean, Some(21.0));
        assert_eq!(report.psnr.count, 2);
        assert_eq!(report.ssim.mean, Some(0.9));
        assert_eq!(report.ssim.count, 1);
        assert!((report.ndtw.mean.unwrap() - 0.7).abs() < 1e-12);
        assert!(aggregate_report(&BTreeMap::new()).is_err());
    }

    #[test]
    fn single_clip_report_echoes_its_values() {
        let mut per_clip = BTreeMap::new();
        per_clip.insert(
            "only".to_string(),
            ClipMetrics {
                psnr: Some(33.0),
                ssim: Some(0.97),
                ndtw: None,
            },
        );
        let report = aggregate_report(&per_clip).unwrap();
        assert_eq!(report.psnr.mean, Some(33.0));
        assert_eq!(report.ndtw.mean, None);
        assert_eq!(report.ndtw.count, 0);
    }

    #[test]
    fn d_th_helper_matches_the_diagonal_rule() {
        assert!((ndtw_d_th_for(640, 480) - 40.0).abs() < 1e-12);
    }
}
