//! Evaluation metrics: PSNR, windowed SSIM, per-pixel L1 distortion, and
//! attack success rate. Everything here works on plain `f64` slices so the
//! numbers are independent of the scalar type a model was trained with.
//!
//! Unit conventions: `psnr`/`ssim` expect pixels in [0, 1]; `l1_distance`
//! expects the networks' native [−1, 1] range and reports the mean absolute
//! difference rescaled to [0, 1] units, which is the scale the 0.05 success
//! threshold lives on.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Sentinel PSNR for a zero-MSE pair, and the cap for near-identical pairs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Success threshold on the [0, 1]-scale L1 distortion.
pub const ASR_THRESHOLD: f64 = 0.05;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("length mismatch: {} vs {}", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB between two [0, 1] images, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len("psnr", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("psnr of empty image".into()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WIN] {
    let mut k = [0.0; SSIM_WIN];
    let r = (SSIM_WIN / 2) as isize;
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *slot = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *slot;
    }
    for slot in &mut k {
        *slot /= sum;
    }
    k
}

/// Separable valid-region Gaussian filter: returns the weighted window sums
/// at every position where the 11×11 window fits entirely inside the plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let vw = w - SSIM_WIN + 1;
    let vh = h - SSIM_WIN + 1;
    let mut rows = vec![0.0; h * vw];
    for i in 0..h {
        let src = &plane[i * w..(i + 1) * w];
        let dst = &mut rows[i * vw..(i + 1) * vw];
        for (j, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, kt) in k.iter().enumerate() {
                acc += kt * src[j + t];
            }
            *slot = acc;
        }
    }
    let mut out = vec![0.0; vh * vw];
    for ii in 0..vh {
        for j in 0..vw {
            let mut acc = 0.0;
            for (t, kt) in k.iter().enumerate() {
                acc += kt * rows[(ii + t) * vw + j];
            }
            out[ii * vw + j] = acc;
        }
    }
    out
}

/// Structural similarity between two [0, 1] images of shape C×H×W (planar),
/// 11×11 Gaussian window σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.0.
/// Each channel is scored over all valid window positions; channels are then
/// averaged. Identical inputs score exactly 1.0.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize) -> Result<f64> {
    check_same_len("ssim", a, b)?;
    if a.len() != channels * h * w {
        return Err(Error::shape(
            "ssim",
            format!("{} values cannot be {channels}×{h}×{w}", a.len()),
        ));
    }
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Invalid(format!(
            "ssim needs at least {SSIM_WIN}×{SSIM_WIN} pixels, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut channel_sum = 0.0;
    for c in 0..channels {
        let pa = &a[c * plane..(c + 1) * plane];
        let pb = &b[c * plane..(c + 1) * plane];
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let s_aa = filter_valid(&sq_a, h, w, &k);
        let s_bb = filter_valid(&sq_b, h, w, &k);
        let s_ab = filter_valid(&ab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ua, ub) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ua * ua;
            let vb = s_bb[i] - ub * ub;
            let cov = s_ab[i] - ua * ub;
            let num = (2.0 * (ua * ub) + c1) * (2.0 * cov + c2);
            let den = (ua * ua + ub * ub + c1) * (va + vb + c2);
            acc += num / den;
        }
        channel_sum += acc / mu_a.len() as f64;
    }
    Ok(channel_sum / channels as f64)
}

/// Mean absolute difference between two images in the networks' [−1, 1]
/// range, reported in [0, 1] pixel units (divide by 2).
pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same_len("l1_distance", a, b)?;
    if a.is_empty() {
        return Err(Error::Invalid("l1_distance of empty image".into()));
    }
    let mean = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    Ok(mean / 2.0)
}

/// Fraction of records whose distortion strictly exceeds `threshold`.
pub fn asr(distances: &[f64], threshold: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::Invalid("asr over an empty record list".into()));
    }
    let hits = distances.iter().filter(|d| **d > threshold).count();
    Ok(hits as f64 / distances.len() as f64)
}

/// Per-image evaluation outcome: fidelity of the protected image against its
/// original, distortion the protection induced in the swap output, and
/// whether that distortion cleared the success threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub l1_dist: f64,
    pub success: bool,
}

/// Full evaluation outcome over a test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub epsilon: f64,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub model_checksum: String,
    pub dataset_id: String,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.records.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.records.iter().map(|r| r.ssim))
    }

    pub fn mean_l1(&self) -> f64 {
        mean(self.records.iter().map(|r| r.l1_dist))
    }

    pub fn asr(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.success).count() as f64 / self.records.len() as f64
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
