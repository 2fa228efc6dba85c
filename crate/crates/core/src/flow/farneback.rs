//! Two-frame dense motion estimation via quadratic polynomial expansion.
//!
//! Each frame is locally approximated around every pixel as
//! `f(u) ≈ c + bᵀu + uᵀAu` under a separable Gaussian applicability window.
//! For a pure translation `d` between frames the expansions satisfy
//! `A d = (b₀ − b₁) / 2`, which is solved per pixel in least squares over a
//! box window, inside a coarse-to-fine pyramid with iterative refinement.

use nalgebra::Matrix6;

use crate::error::{Error, Result};
use crate::imaging::GrayFrame;

use super::{FlowConfig, FlowField};

/// Per-pixel quadratic expansion coefficients, channel-interleaved as
/// `[bx, by, axx, ayy, axy]`.
struct PolyExpansion {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl PolyExpansion {
    #[inline]
    fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * 5;
        &self.data[i..i + 5]
    }
}

/// Normalized 1-D Gaussian taps over `[-half, half]`.
fn gaussian_taps(half: usize, sigma: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (-(half as i64)..=half as i64)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Inverse-Gram factors mapping windowed image moments to polynomial
/// coefficients for the basis `[1, x, y, x², y², xy]`.
struct InverseGram {
    /// Row for the linear terms: coefficient = inv_b * first moment.
    inv_b: f64,
    /// Cross term between the constant and each pure quadratic.
    inv_c: f64,
    /// Diagonal for the pure quadratics.
    inv_q: f64,
    /// Diagonal for the mixed term.
    inv_xy: f64,
}

fn inverse_gram(taps: &[f64], half: usize) -> InverseGram {
    let m2: f64 = taps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let k = i as f64 - half as f64;
            k * k * g
        })
        .sum();
    let m4: f64 = taps
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let k = i as f64 - half as f64;
            k * k * k * k * g
        })
        .sum();
    // Separable weights make the Gram matrix sparse: only the
    // (1, x², y²) block, the linear diagonal, and the xy diagonal are
    // nonzero, and m22 = m2² zeroes the x²–y² coupling in the inverse.
    let m22 = m2 * m2;
    let mut gram = Matrix6::<f64>::zeros();
    gram[(0, 0)] = 1.0;
    gram[(1, 1)] = m2;
    gram[(2, 2)] = m2;
    gram[(3, 3)] = m4;
    gram[(4, 4)] = m4;
    gram[(5, 5)] = m22;
    gram[(0, 3)] = m2;
    gram[(3, 0)] = m2;
    gram[(0, 4)] = m2;
    gram[(4, 0)] = m2;
    gram[(3, 4)] = m22;
    gram[(4, 3)] = m22;
    let inv = gram.try_inverse().expect("Gram matrix is positive definite");
    InverseGram {
        inv_b: inv[(1, 1)],
        inv_c: inv[(0, 3)],
        inv_q: inv[(3, 3)],
        inv_xy: inv[(5, 5)],
    }
}

/// Fits the quadratic expansion at every pixel with two separable
/// correlation passes, borders replicated.
fn polynomial_expansion(img: &GrayFrame, window: usize, sigma: f64) -> PolyExpansion {
    let half = window / 2;
    let taps = gaussian_taps(half, sigma);
    let ig = inverse_gram(&taps, half);
    let (w, h) = (img.width as usize, img.height as usize);
    let mut data = vec![0f32; w * h * 5];

    // Vertical pass: per pixel, the 0th / 1st / 2nd y-moments of the column.
    let mut even0 = vec![0f64; w * h];
    let mut odd1 = vec![0f64; w * h];
    let mut even2 = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut e0 = taps[half] * img.get_clamped(x as i64, y as i64) as f64;
            let mut o1 = 0.0;
            let mut e2 = 0.0;
            for k in 1..=half {
                let above = img.get_clamped(x as i64, y as i64 - k as i64) as f64;
                let below = img.get_clamped(x as i64, y as i64 + k as i64) as f64;
                let g = taps[half + k];
                e0 += g * (above + below);
                o1 += (k as f64) * g * (below - above);
                e2 += (k * k) as f64 * g * (above + below);
            }
            let i = y * w + x;
            even0[i] = e0;
            odd1[i] = o1;
            even2[i] = e2;
        }
    }

    // Horizontal pass: x-moments of the vertical moments, then solve.
    let clamp_x = |x: i64| x.clamp(0, w as i64 - 1) as usize;
    for y in 0..h {
        let row = y * w;
        for x in 0..w {
            let mut p1 = taps[half] * even0[row + x];
            let mut px = 0.0;
            let mut pxx = 0.0;
            let mut py = taps[half] * odd1[row + x];
            let mut pxy = 0.0;
            let mut pyy = taps[half] * even2[row + x];
            for k in 1..=half {
                let g = taps[half + k];
                let xl = clamp_x(x as i64 - k as i64);
                let xr = clamp_x(x as i64 + k as i64);
                let e0l = even0[row + xl];
                let e0r = even0[row + xr];
                p1 += g * (e0l + e0r);
                px += (k as f64) * g * (e0r - e0l);
                pxx += (k * k) as f64 * g * (e0l + e0r);
                py += g * (odd1[row + xl] + odd1[row + xr]);
                pxy += (k as f64) * g * (odd1[row + xr] - odd1[row + xl]);
                pyy += g * (even2[row + xl] + even2[row + xr]);
            }
            let out = &mut data[(row + x) * 5..(row + x) * 5 + 5];
            out[0] = (ig.inv_b * px) as f32;
            out[1] = (ig.inv_b * py) as f32;
            out[2] = (ig.inv_c * p1 + ig.inv_q * pxx) as f32;
            out[3] = (ig.inv_c * p1 + ig.inv_q * pyy) as f32;
            out[4] = (ig.inv_xy * pxy) as f32;
        }
    }

    PolyExpansion {
        width: w,
        height: h,
        data,
    }
}

/// Separable Gaussian smoothing with replicated borders.
fn gaussian_smooth(img: &GrayFrame, sigma: f64) -> GrayFrame {
    if sigma <= 0.0 {
        return img.clone();
    }
    let half = ((3.0 * sigma).ceil() as usize).max(1);
    let taps = gaussian_taps(half, sigma);
    let (w, h) = (img.width as usize, img.height as usize);
    let mut tmp = GrayFrame::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (i, g) in taps.iter().enumerate() {
                let sx = x as i64 + i as i64 - half as i64;
                acc += g * img.get_clamped(sx, y as i64) as f64;
            }
            tmp.set(x as u32, y as u32, acc as f32);
        }
    }
    let mut out = GrayFrame::new(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for (i, g) in taps.iter().enumerate() {
                let sy = y as i64 + i as i64 - half as i64;
                acc += g * tmp.get_clamped(x as i64, sy) as f64;
            }
            out.set(x as u32, y as u32, acc as f32);
        }
    }
    out
}

/// Bilinear resize with half-pixel centers.
fn resize_bilinear(img: &GrayFrame, new_w: u32, new_h: u32) -> GrayFrame {
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    GrayFrame::from_fn(new_w, new_h, |x, y| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let x0 = fx.floor() as i64;
        let y0 = fy.floor() as i64;
        let ax = (fx - x0 as f64) as f32;
        let ay = (fy - y0 as f64) as f32;
        let p00 = img.get_clamped(x0, y0);
        let p10 = img.get_clamped(x0 + 1, y0);
        let p01 = img.get_clamped(x0, y0 + 1);
        let p11 = img.get_clamped(x0 + 1, y0 + 1);
        (1.0 - ay) * ((1.0 - ax) * p00 + ax * p10) + ay * ((1.0 - ax) * p01 + ax * p11)
    })
}

/// Per-pixel normal-equation entries `[g11, g12, g22, h1, h2]` for the
/// windowed least-squares displacement solve.
fn update_matrices(r0: &PolyExpansion, r1: &PolyExpansion, flow: &FlowField) -> Vec<f64> {
    let (w, h) = (r0.width, r0.height);
    let mut m = vec![0f64; w * h * 5];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = flow.dx[i] as f64;
            let dy = flow.dy[i] as f64;
            let c0 = r0.at(x, y);

            let fx = x as f64 + dx;
            let fy = y as f64 + dy;
            let inside =
                fx >= 0.0 && fy >= 0.0 && fx <= (w - 1) as f64 && fy <= (h - 1) as f64;

            let (a, b, c, db1, db2);
            if inside {
                let x0 = (fx.floor() as usize).min(w - 2);
                let y0 = (fy.floor() as usize).min(h - 2);
                let ax = fx - x0 as f64;
                let ay = fy - y0 as f64;
                let mut r = [0f64; 5];
                for (ch, rv) in r.iter_mut().enumerate() {
                    let p00 = r1.at(x0, y0)[ch] as f64;
                    let p10 = r1.at(x0 + 1, y0)[ch] as f64;
                    let p01 = r1.at(x0, y0 + 1)[ch] as f64;
                    let p11 = r1.at(x0 + 1, y0 + 1)[ch] as f64;
                    *rv = (1.0 - ay) * ((1.0 - ax) * p00 + ax * p10)
                        + ay * ((1.0 - ax) * p01 + ax * p11);
                }
                a = 0.5 * (c0[2] as f64 + r[2]);
                b = 0.5 * (c0[3] as f64 + r[3]);
                c = 0.25 * (c0[4] as f64 + r[4]); // A12 = axy / 2
                db1 = 0.5 * (c0[0] as f64 - r[0]) + a * dx + c * dy;
                db2 = 0.5 * (c0[1] as f64 - r[1]) + c * dx + b * dy;
            } else {
                // No counterpart under the prior displacement: keep the
                // prior by making A·d̃ the exact right-hand side.
                a = c0[2] as f64;
                b = c0[3] as f64;
                c = 0.5 * c0[4] as f64;
                db1 = a * dx + c * dy;
                db2 = c * dx + b * dy;
            }

            let o = i * 5;
            m[o] = a * a + c * c;
            m[o + 1] = c * (a + b);
            m[o + 2] = b * b + c * c;
            m[o + 3] = a * db1 + c * db2;
            m[o + 4] = c * db1 + b * db2;
        }
    }
    m
}

/// Mean over a clamped `window`-sized box for each of the 5 channels,
/// computed with summed-area tables.
fn box_mean(m: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    // Integral image per channel, (w+1) x (h+1).
    let iw = w + 1;
    let mut integral = vec![0f64; iw * (h + 1) * 5];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..5 {
                let v = m[(y * w + x) * 5 + ch];
                integral[((y + 1) * iw + (x + 1)) * 5 + ch] = v
                    + integral[(y * iw + (x + 1)) * 5 + ch]
                    + integral[((y + 1) * iw + x) * 5 + ch]
                    - integral[(y * iw + x) * 5 + ch];
            }
        }
    }
    let mut out = vec![0f64; w * h * 5];
    for y in 0..h {
        let y0 = (y as i64 - r).max(0) as usize;
        let y1 = ((y as i64 + r + 1).min(h as i64)) as usize;
        for x in 0..w {
            let x0 = (x as i64 - r).max(0) as usize;
            let x1 = ((x as i64 + r + 1).min(w as i64)) as usize;
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..5 {
                let sum = integral[(y1 * iw + x1) * 5 + ch]
                    - integral[(y0 * iw + x1) * 5 + ch]
                    - integral[(y1 * iw + x0) * 5 + ch]
                    + integral[(y0 * iw + x0) * 5 + ch];
                out[(y * w + x) * 5 + ch] = sum / count;
            }
        }
    }
    out
}

fn solve_flow(m: &[f64], flow: &mut FlowField) {
    let n = flow.dx.len();
    for i in 0..n {
        let g11 = m[i * 5];
        let g12 = m[i * 5 + 1];
        let g22 = m[i * 5 + 2];
        let h1 = m[i * 5 + 3];
        let h2 = m[i * 5 + 4];
        let idet = 1.0 / (g11 * g22 - g12 * g12 + 1e-3);
        flow.dx[i] = ((g22 * h1 - g12 * h2) * idet) as f32;
        flow.dy[i] = ((g11 * h2 - g12 * h1) * idet) as f32;
    }
}

fn resize_flow(flow: &FlowField, new_w: u32, new_h: u32) -> FlowField {
    let to_frame = |data: &[f32]| GrayFrame {
        width: flow.width,
        height: flow.height,
        data: data.to_vec(),
    };
    let sx = new_w as f32 / flow.width as f32;
    let sy = new_h as f32 / flow.height as f32;
    let rx = resize_bilinear(&to_frame(&flow.dx), new_w, new_h);
    let ry = resize_bilinear(&to_frame(&flow.dy), new_w, new_h);
    FlowField {
        width: new_w,
        height: new_h,
        dx: rx.data.iter().map(|v| v * sx).collect(),
        dy: ry.data.iter().map(|v| v * sy).collect(),
    }
}

/// Dense displacement field `prev -> next`.
pub fn farneback_flow(prev: &GrayFrame, next: &GrayFrame, cfg: &FlowConfig) -> Result<FlowField> {
    if prev.width != next.width || prev.height != next.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", prev.width, prev.height),
            actual: format!("{}x{}", next.width, next.height),
        });
    }
    let need = cfg.window_size;
    if prev.width < need || prev.height < need {
        return Err(Error::ImageTooSmall {
            width: prev.width,
            height: prev.height,
            need,
        });
    }
    cfg.validate()?;

    let mut flow: Option<FlowField> = None;
    for level in (0..cfg.pyramid_levels).rev() {
        let scale = cfg.pyramid_scale.powi(level as i32);
        let lw = ((prev.width as f64 * scale).round() as u32).max(8);
        let lh = ((prev.height as f64 * scale).round() as u32).max(8);
        // Each level is built from the original frame, not cascaded; a light
        // presmooth is kept even at full resolution.
        let sigma = ((1.0 / scale - 1.0) * 0.5).max(0.5);
        let i0 = resize_bilinear(&gaussian_smooth(prev, sigma), lw, lh);
        let i1 = resize_bilinear(&gaussian_smooth(next, sigma), lw, lh);
        let r0 = polynomial_expansion(&i0, cfg.poly_n as usize, cfg.poly_sigma);
        let r1 = polynomial_expansion(&i1, cfg.poly_n as usize, cfg.poly_sigma);

        let mut level_flow = match &flow {
            Some(prev_flow) => resize_flow(prev_flow, lw, lh),
            None => FlowField::zeros(lw, lh),
        };
        let mut m = update_matrices(&r0, &r1, &level_flow);
        for iter in 0..cfg.iterations {
            let blurred = box_mean(&m, lw as usize, lh as usize, cfg.window_size as usize);
            solve_flow(&blurred, &mut level_flow);
            if iter + 1 < cfg.iterations {
                m = update_matrices(&r0, &r1, &level_flow);
            }
        }
        flow = Some(level_flow);
    }
    Ok(flow.expect("pyramid_levels >= 1"))
}

// Used by tests to probe expansion quality directly.
#[cfg(test)]
pub(crate) fn expansion_coefficients(
    img: &GrayFrame,
    window: usize,
    sigma: f64,
) -> nalgebra::DMatrix<f32> {
    let exp = polynomial_expansion(img, window, sigma);
    nalgebra::DMatrix::from_fn(exp.height, exp.width * 5, |r, c| {
        exp.data[(r * exp.width + c / 5) * 5 + c % 5]
    })
}
