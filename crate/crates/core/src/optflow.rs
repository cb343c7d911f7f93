//! Dense Farneback optical flow and maximum-flow frame selection.
//!
//! Each frame is locally approximated by a quadratic polynomial
//! `I(q) ≈ qᵀA q + bᵀq + c` fitted with Gaussian-weighted least squares. For a
//! translated signal the linear coefficients shift by `-2A d`, so the
//! displacement solves `A d = ½(b_prev − b_next)`. The per-pixel constraints
//! are pooled over a Gaussian neighbourhood through the normal equations
//! `[Σ w AᵀA] d = Σ w Aᵀ Δb/2`. This is the single-scale, single-iteration
//! variant: enough to rank frames by motion, not a metric-grade flow.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::vidcore::{downsample_half, to_grayscale, GrayFrame, VideoTensor};
use crate::{Error, Result};

/// Pixels whose pooled normal matrix has a smaller determinant get zero flow.
pub const SINGULAR_DET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarnebackParams {
    /// Gaussian σ of the polynomial-expansion weights.
    pub sigma: f64,
    /// Side of the (odd) polynomial-expansion window.
    pub poly_window: usize,
    /// Side of the (odd) neighbourhood pooled into each displacement estimate.
    pub agg_window: usize,
    pub agg_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            sigma: 1.2,
            poly_window: 5,
            agg_window: 11,
            agg_sigma: 2.0,
        }
    }
}

/// Per-pixel quadratic coefficients; `a` stores `[a00, a01, a11]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCoeffs {
    pub height: usize,
    pub width: usize,
    pub a: Vec<[f64; 3]>,
    pub b: Vec<[f64; 2]>,
    pub c: Vec<f64>,
}

impl PolyCoeffs {
    /// `A(p)` as a full symmetric matrix.
    pub fn a_matrix(&self, x: usize, y: usize) -> [[f64; 2]; 2] {
        let [a00, a01, a11] = self.a[y * self.width + x];
        [[a00, a01], [a01, a11]]
    }
}

/// Horizontal (`du`) and vertical (`dv`) displacement per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::uniform(height, width, 0.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, du: f64, dv: f64) -> Self {
        Self {
            height,
            width,
            du: vec![du; height * width],
            dv: vec![dv; height * width],
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            du: self.du.iter().map(|v| v * k).collect(),
            dv: self.dv.iter().map(|v| v * k).collect(),
        }
    }

    /// Bilinear sample of both components with edge clamping.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        let xmax = (self.width - 1) as f64;
        let ymax = (self.height - 1) as f64;
        let x = x.clamp(0.0, xmax);
        let y = y.clamp(0.0, ymax);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let lerp = |f: &[f64]| {
            let p = |xx: usize, yy: usize| f[yy * self.width + xx];
            let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
            let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
            top * (1.0 - fy) + bottom * fy
        };
        (lerp(&self.du), lerp(&self.dv))
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Shape(format!(
                "flow is {}x{}, frame is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Per-frame mean flow magnitude with its argmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowProfile {
    pub magnitudes: Vec<f64>,
    pub argmax_index: usize,
}

impl FlowProfile {
    /// Index of the smallest magnitude (ties to the smallest index).
    pub fn argmin_index(&self) -> usize {
        argmin(&self.magnitudes)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = String::from("frame_index,magnitude\n");
        for (i, m) in self.magnitudes.iter().enumerate() {
            out.push_str(&format!("{i},{m:.6}\n"));
        }
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

fn check_odd_window(window: usize) -> Result<()> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "window must be odd and positive, got {window}"
        )));
    }
    Ok(())
}

/// Reflect-101 border index (`-1 → 1`, `n → n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Inverts a small dense matrix with Gauss-Jordan elimination.
fn invert<const N: usize>(m: [[f64; N]; N]) -> Option<[[f64; N]; N]> {
    let mut a = m;
    let mut inv = [[0.0; N]; N];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let d = a[col][col];
        for k in 0..N {
            a[col][k] /= d;
            inv[col][k] /= d;
        }
        for r in 0..N {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..N {
                        a[r][k] -= f * a[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Quadratic basis `[1, x, y, x², y², xy]` at offset `(x, y)`.
#[inline]
fn basis(x: f64, y: f64) -> [f64; 6] {
    [1.0, x, y, x * x, y * y, x * y]
}

fn gaussian(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Fits `I(q) ≈ qᵀAq + bᵀq + c` around every pixel with Gaussian weights.
///
/// Offsets `q` are measured from the window centre with `x` along columns and
/// `y` along rows; borders use reflect-101 padding.
pub fn polynomial_expansion(g: &GrayFrame, sigma: f64, window: usize) -> Result<PolyCoeffs> {
    check_odd_window(window)?;
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if window > g.height.min(g.width) {
        return Err(Error::Shape(format!(
            "frame {}x{} is smaller than the {window}x{window} window",
            g.height, g.width
        )));
    }
    let r = (window / 2) as isize;
    let mut taps = Vec::with_capacity(window * window);
    let mut normal = [[0.0f64; 6]; 6];
    for oy in -r..=r {
        for ox in -r..=r {
            let w = gaussian(ox as f64, oy as f64, sigma);
            let phi = basis(ox as f64, oy as f64);
            for i in 0..6 {
                for j in 0..6 {
                    normal[i][j] += w * phi[i] * phi[j];
                }
            }
            let wphi = phi.map(|p| w * p);
            taps.push((ox, oy, wphi));
        }
    }
    let inv = invert(normal)
        .ok_or_else(|| Error::InvalidArgument("degenerate expansion window".into()))?;

    let (h, w) = (g.height, g.width);
    let mut out = PolyCoeffs {
        height: h,
        width: w,
        a: vec![[0.0; 3]; h * w],
        b: vec![[0.0; 2]; h * w],
        c: vec![0.0; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let mut rhs = [0.0f64; 6];
            for &(ox, oy, wphi) in &taps {
                let v = g.at(
                    reflect(x as isize + ox, w),
                    reflect(y as isize + oy, h),
                ) as f64;
                for k in 0..6 {
                    rhs[k] += wphi[k] * v;
                }
            }
            let mut coef = [0.0f64; 6];
            for (i, c) in coef.iter_mut().enumerate() {
                *c = (0..6).map(|j| inv[i][j] * rhs[j]).sum();
            }
            let idx = y * w + x;
            out.c[idx] = coef[0];
            out.b[idx] = [coef[1], coef[2]];
            out.a[idx] = [coef[3], coef[5] / 2.0, coef[4]];
        }
    }
    Ok(out)
}

/// Flow between two precomputed expansions; lets callers reuse one
/// expansion per frame across many pairs.
pub fn flow_from_expansions(prev: &PolyCoeffs, next: &PolyCoeffs, params: &FarnebackParams) -> FlowField {
    let (h, w) = (prev.height, prev.width);
    // per-pixel AᵀA (3 unique entries) and AᵀΔb
    let mut ata = vec![[0.0f64; 3]; h * w];
    let mut atb = vec![[0.0f64; 2]; h * w];
    for i in 0..h * w {
        let a00 = 0.5 * (prev.a[i][0] + next.a[i][0]);
        let a01 = 0.5 * (prev.a[i][1] + next.a[i][1]);
        let a11 = 0.5 * (prev.a[i][2] + next.a[i][2]);
        let db0 = 0.5 * (prev.b[i][0] - next.b[i][0]);
        let db1 = 0.5 * (prev.b[i][1] - next.b[i][1]);
        // A is symmetric so AᵀA = A².
        ata[i] = [a00 * a00 + a01 * a01, a00 * a01 + a01 * a11, a01 * a01 + a11 * a11];
        atb[i] = [a00 * db0 + a01 * db1, a01 * db0 + a11 * db1];
    }

    let r = (params.agg_window / 2) as isize;
    let kernel: Vec<(isize, isize, f64)> = (-r..=r)
        .flat_map(|oy| (-r..=r).map(move |ox| (ox, oy)))
        .map(|(ox, oy)| (ox, oy, gaussian(ox as f64, oy as f64, params.agg_sigma)))
        .collect();

    let mut flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut g = [0.0f64; 3];
            let mut hv = [0.0f64; 2];
            for &(ox, oy, wt) in &kernel {
                let (xx, yy) = (x as isize + ox, y as isize + oy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let j = yy as usize * w + xx as usize;
                for k in 0..3 {
                    g[k] += wt * ata[j][k];
                }
                hv[0] += wt * atb[j][0];
                hv[1] += wt * atb[j][1];
            }
            let det = g[0] * g[2] - g[1] * g[1];
            if det < SINGULAR_DET {
                continue;
            }
            let i = y * w + x;
            flow.du[i] = (g[2] * hv[0] - g[1] * hv[1]) / det;
            flow.dv[i] = (g[0] * hv[1] - g[1] * hv[0]) / det;
        }
    }
    flow
}

/// Dense displacement from `prev` to `next`.
pub fn farneback_flow(prev: &GrayFrame, next: &GrayFrame, params: &FarnebackParams) -> Result<FlowField> {
    if (prev.height, prev.width) != (next.height, next.width) {
        return Err(Error::Shape(format!(
            "frames differ: {}x{} vs {}x{}",
            prev.height, prev.width, next.height, next.width
        )));
    }
    check_odd_window(params.agg_window)?;
    let p = polynomial_expansion(prev, params.sigma, params.poly_window)?;
    let n = polynomial_expansion(next, params.sigma, params.poly_window)?;
    Ok(flow_from_expansions(&p, &n, params))
}

/// Mean Euclidean norm of the displacement over all pixels.
pub fn flow_magnitude(f: &FlowField) -> f64 {
    if f.du.is_empty() {
        return 0.0;
    }
    let sum: f64 = f.du.iter().zip(&f.dv).map(|(u, v)| u.hypot(*v)).sum();
    sum / f.du.len() as f64
}

/// Gray, half-resolution frames on which frame motion is ranked.
pub fn motion_frames(v: &VideoTensor) -> Result<Vec<GrayFrame>> {
    (0..v.frames())
        .map(|t| downsample_half(&to_grayscale(&v.frame(t))))
        .collect()
}

/// Per-frame motion profile and the index of the maximum-flow frame.
///
/// The flow of pair `(t-1, t)` is attributed to frame `t`; the ends are then
/// padded with `m[0] = m[1]` and `m[T-1] = m[T-2]`. Ties resolve to the
/// smallest index.
pub fn max_flow_frame(v: &VideoTensor) -> Result<FlowProfile> {
    max_flow_frame_with(v, &FarnebackParams::default())
}

pub fn max_flow_frame_with(v: &VideoTensor, params: &FarnebackParams) -> Result<FlowProfile> {
    let t = v.frames();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "max-flow selection needs at least 2 frames, got {t}"
        )));
    }
    let frames = motion_frames(v)?;
    let expansions = frames
        .par_iter()
        .map(|g| polynomial_expansion(g, params.sigma, params.poly_window))
        .collect::<Result<Vec<_>>>()?;
    let mut magnitudes = vec![0.0; t];
    let pair_mags: Vec<f64> = (1..t)
        .into_par_iter()
        .map(|i| flow_magnitude(&flow_from_expansions(&expansions[i - 1], &expansions[i], params)))
        .collect();
    magnitudes[1..].copy_from_slice(&pair_mags);
    magnitudes[0] = magnitudes[1];
    magnitudes[t - 1] = magnitudes[t - 2];
    let argmax_index = argmax(&magnitudes);
    Ok(FlowProfile {
        magnitudes,
        argmax_index,
    })
}

/// `out(p) = frame(p + f(p))`, bilinear with edge clamping.
pub fn warp_backward(frame: &GrayFrame, f: &FlowField) -> Result<GrayFrame> {
    f.check_shape(frame.height, frame.width)?;
    let w = frame.width;
    let data = (0..frame.height * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (frame.sample(x + f.du[i], y + f.dv[i]) as f32).clamp(0.0, 1.0)
        })
        .collect();
    Ok(GrayFrame {
        height: frame.height,
        width: w,
        data,
    })
}

/// Forward–backward consistency: 1 where `‖fwd(p) + bwd(p + fwd(p))‖ ≤ tol`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField, tol: f64) -> Result<Vec<u8>> {
    bwd.check_shape(fwd.height, fwd.width)?;
    let w = fwd.width;
    Ok((0..fwd.height * w)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let (bu, bv) = bwd.sample(x + fwd.du[i], y + fwd.dv[i]);
            u8::from((fwd.du[i] + bu).hypot(fwd.dv[i] + bv) <= tol)
        })
        .collect())
}
