//! Perceptual quality, temporal consistency and attack-success accounting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::net3d::{Classifier, LabeledClip};
use crate::optflow::{
    flow_from_expansions, occlusion_mask, polynomial_expansion, warp_backward, FarnebackParams, PolyCoeffs,
};
use crate::vidcore::{to_grayscale, GrayFrame, VideoTensor};
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Aggregates replace an infinite PSNR by this value.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const OCCLUSION_TOL: f64 = 1.0;
pub const TI_SCALE: f64 = 255.0;

fn same_shape(x: &VideoTensor, y: &VideoTensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{} vs {}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Separable Gaussian smoothing with the window renormalised at the borders,
/// so the output keeps the input size.
fn gaussian_blur(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kw) in kernel.iter().enumerate() {
                    let o = k as isize - r as isize;
                    let (xx, yy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    acc += kw * src[yy as usize * w + xx as usize];
                    norm += kw;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Mean SSIM of one plane pair.
fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, kernel: &[f64]) -> f64 {
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = gaussian_blur(&x, h, w, kernel);
    let my = gaussian_blur(&y, h, w, kernel);
    let sxx = gaussian_blur(&xx, h, w, kernel);
    let syy = gaussian_blur(&yy, h, w, kernel);
    let sxy = gaussian_blur(&xy, h, w, kernel);
    let mut total = 0.0;
    for i in 0..h * w {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    total / (h * w) as f64
}

/// Gaussian-windowed SSIM on `[0, 1]` data, averaged over channels and frames.
pub fn ssim(x: &VideoTensor, y: &VideoTensor) -> Result<f64> {
    same_shape(x, y)?;
    let s = x.shape();
    let kernel = ssim_kernel();
    let plane = s.height * s.width;
    let per_plane: Vec<f64> = (0..s.frames * s.channels)
        .map(|p| {
            let a = &x.data()[p * plane..(p + 1) * plane];
            let b = &y.data()[p * plane..(p + 1) * plane];
            if a == b {
                1.0
            } else {
                ssim_plane(a, b, s.height, s.width, &kernel)
            }
        })
        .collect();
    Ok(per_plane.iter().sum::<f64>() / per_plane.len() as f64)
}

/// Mean squared error on the 0–255 scale.
pub fn mse_255(x: &VideoTensor, y: &VideoTensor) -> Result<f64> {
    same_shape(x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = 255.0 * (a as f64 - b as f64);
            d * d
        })
        .sum();
    Ok(sum / x.data().len() as f64)
}

/// PSNR in dB on the 0–255 scale; `+∞` for identical inputs.
pub fn psnr(x: &VideoTensor, y: &VideoTensor) -> Result<f64> {
    let mse = mse_255(x, y)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub fn cap_psnr(p: f64) -> f64 {
    p.min(PSNR_CAP_DB)
}

/// Occlusion-masked mean ℓ1 residual between `x_t` and `x_m` warped onto it.
fn warped_error(
    v: &VideoTensor,
    t: usize,
    m: usize,
    exps: &[PolyCoeffs],
    params: &FarnebackParams,
) -> Result<f64> {
    let fwd = flow_from_expansions(&exps[t], &exps[m], params);
    let bwd = flow_from_expansions(&exps[m], &exps[t], params);
    let mask = occlusion_mask(&fwd, &bwd, OCCLUSION_TOL)?;
    let valid = mask.iter().filter(|&&b| b == 1).count();
    if valid == 0 {
        return Ok(0.0);
    }
    let ft = v.frame(t);
    let fm = v.frame(m);
    let mut sum = 0.0;
    for c in 0..v.channels() {
        let target = ft.plane(c);
        let warped = warp_backward(&fm.plane(c), &fwd)?;
        for (i, &keep) in mask.iter().enumerate() {
            if keep == 1 {
                sum += (target.data[i] as f64 - warped.data[i] as f64).abs();
            }
        }
    }
    Ok(sum / (valid * v.channels()) as f64)
}

/// Temporal inconsistency: long-range (each frame against the first) and
/// short-range (each frame against its predecessor) warped residuals,
/// averaged and scaled by 255.
pub fn temporal_inconsistency(v: &VideoTensor) -> Result<f64> {
    temporal_inconsistency_with(v, &FarnebackParams::default())
}

pub fn temporal_inconsistency_with(v: &VideoTensor, params: &FarnebackParams) -> Result<f64> {
    let t = v.frames();
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "temporal inconsistency needs at least 2 frames, got {t}"
        )));
    }
    let gray: Vec<GrayFrame> = (0..t).map(|i| to_grayscale(&v.frame(i))).collect();
    let exps = gray
        .iter()
        .map(|g| polynomial_expansion(g, params.sigma, params.poly_window))
        .collect::<Result<Vec<_>>>()?;
    // 0-based: frame i ≥ 1 against frame 0 and frame i-1
    let mut total = 0.0;
    for i in 1..t {
        total += warped_error(v, i, 0, &exps, params)?;
        total += warped_error(v, i, i - 1, &exps, params)?;
    }
    Ok(TI_SCALE * total / (2.0 * (t - 1) as f64))
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityReport {
    pub ssim: f64,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr_db: f64,
    pub ti: f64,
}

impl QualityReport {
    /// SSIM and PSNR against the clean clip, TI of the adversarial clip.
    pub fn compute(clean: &VideoTensor, adv: &VideoTensor) -> Result<Self> {
        Ok(Self {
            ssim: ssim(clean, adv)?,
            psnr_db: psnr(clean, adv)?,
            ti: temporal_inconsistency(adv)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoOutcome {
    pub video_id: String,
    pub quality: QualityReport,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignStats {
    pub asr: f64,
    pub successes: usize,
    pub total: usize,
    pub queries_mean: f64,
    /// Clips dropped because the victim already misclassified them.
    pub excluded: Vec<String>,
    pub per_video: Vec<VideoOutcome>,
}

impl CampaignStats {
    pub fn from_outcomes(per_video: Vec<VideoOutcome>, excluded: Vec<String>, queries_mean: f64) -> Self {
        let successes = per_video.iter().filter(|o| o.success).count();
        let total = per_video.len();
        Self {
            asr: if total == 0 { 0.0 } else { successes as f64 / total as f64 },
            successes,
            total,
            queries_mean,
            excluded,
            per_video,
        }
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.per_video.iter().map(|o| o.quality.ssim))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.per_video.iter().map(|o| cap_psnr(o.quality.psnr_db)))
    }

    pub fn mean_ti(&self) -> f64 {
        mean(self.per_video.iter().map(|o| o.quality.ti))
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("video_id,ssim,psnr_db,ti,success\n");
        for o in &self.per_video {
            let _ = writeln!(out, "{}", csv_row(o));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn format_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".to_string()
    } else {
        format!("{p:.4}")
    }
}

/// `video_id,ssim,psnr_db,ti,success` with fixed precision.
pub fn csv_row(o: &VideoOutcome) -> String {
    format!(
        "{},{:.6},{},{:.6},{}",
        o.video_id,
        o.quality.ssim,
        format_psnr(o.quality.psnr_db),
        o.quality.ti,
        u8::from(o.success)
    )
}

/// ASR over `(clean, adv)` pairs. Clean clips the victim gets wrong are
/// excluded and logged. Attacks in this crate never query the victim, so
/// `queries_mean` is 0.
pub fn attack_success_rate<C: Classifier>(victim: &C, pairs: &[(LabeledClip, VideoTensor)]) -> Result<CampaignStats> {
    let evaluated = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (clean, adv))| -> Result<Option<VideoOutcome>> {
            same_shape(&clean.video, adv)?;
            if victim.predict(&clean.video)? != clean.label {
                return Ok(None);
            }
            Ok(Some(VideoOutcome {
                video_id: format!("pair_{i:04}"),
                quality: QualityReport::compute(&clean.video, adv)?,
                success: victim.predict(adv)? != clean.label,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_video = Vec::new();
    let mut excluded = Vec::new();
    for (i, o) in evaluated.into_iter().enumerate() {
        match o {
            Some(o) => per_video.push(o),
            None => {
                log::warn!("pair_{i:04}: clean clip misclassified, excluded");
                excluded.push(format!("pair_{i:04}"));
            }
        }
    }
    Ok(CampaignStats::from_outcomes(per_video, excluded, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryNumbers {
    pub asr: f64,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_ti: f64,
}
