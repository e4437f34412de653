//! Image reconstruction metrics on `[C, H, W]` images in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const ASR_THRESHOLD: f64 = 0.5;

fn check_pair(a: &[f64], b: &[f64], sa: &[usize], sb: &[usize]) -> Result<()> {
    if sa != sb || a.len() != b.len() {
        return Err(Error::InvalidInput(format!("shape mismatch {sa:?} vs {sb:?}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

pub fn clamp01<T: Real>(x: &Tensor<T>) -> Vec<f64> {
    x.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect()
}

/// Mean squared error after clamping both images to `[0, 1]`.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (x, y) = (clamp01(a), clamp01(b));
    check_pair(&x, &y, a.shape(), b.shape())?;
    Ok(x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1; identical images give
/// `f64::INFINITY`.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter, keeping only windows that lie fully inside
/// the `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, taps);
    let my = filter_valid(y, h, w, taps);
    let mxx = filter_valid(&prod(x, x), h, w, taps);
    let myy = filter_valid(&prod(y, y), h, w, taps);
    let mxy = filter_valid(&prod(x, y), h, w, taps);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over valid window positions and then over channels. Inputs are clamped
/// to `[0, 1]`; `[C, H, W]` and `[1, C, H, W]` are accepted.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (x, y) = (clamp01(a), clamp01(b));
    check_pair(&x, &y, a.shape(), b.shape())?;
    let s = a.shape();
    let (h, w) = match s.len() {
        3 | 4 => (s[s.len() - 2], s[s.len() - 1]),
        _ => return Err(Error::InvalidInput(format!("ssim expects [C, H, W], got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let taps = gaussian_taps();
    let planes = x.len() / (h * w);
    let total: f64 = (0..planes)
        .map(|c| {
            let r = c * h * w..(c + 1) * h * w;
            ssim_plane(&x[r.clone()], &y[r], h, w, &taps)
        })
        .sum();
    Ok(total / planes as f64)
}

/// Percentage of values at or above `threshold`.
pub fn asr(ssims: &[f64], threshold: f64) -> Result<f64> {
    if ssims.is_empty() {
        return Err(Error::InvalidInput("no SSIM values".into()));
    }
    let hits = ssims.iter().filter(|&&s| s >= threshold).count();
    Ok(100.0 * hits as f64 / ssims.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    /// `None` stands for identical images (infinite PSNR).
    pub psnr: Option<f64>,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn compute<T: Real>(truth: &Tensor<T>, recon: &Tensor<T>) -> Result<Self> {
        let mse = mse(truth, recon)?;
        let p = psnr_from_mse(mse);
        Ok(ImageMetrics { mse, psnr: p.is_finite().then_some(p), ssim: ssim(truth, recon)? })
    }

    pub fn psnr_value(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

/// Aggregate over one victim set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_victim: Vec<ImageMetrics>,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub mse_mean: f64,
    /// Mean over finite PSNR values; `None` when every victim was exact.
    pub psnr_mean: Option<f64>,
    pub asr: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl MetricReport {
    pub fn from_victims(per_victim: Vec<ImageMetrics>) -> Result<Self> {
        let ssims: Vec<f64> = per_victim.iter().map(|m| m.ssim).collect();
        let asr = asr(&ssims, ASR_THRESHOLD)?;
        let (ssim_mean, ssim_std) = mean_std(&ssims);
        let (mse_mean, _) = mean_std(&per_victim.iter().map(|m| m.mse).collect::<Vec<_>>());
        let finite: Vec<f64> = per_victim.iter().filter_map(|m| m.psnr).collect();
        let psnr_mean = (!finite.is_empty()).then(|| mean_std(&finite).0);
        Ok(MetricReport { per_victim, ssim_mean, ssim_std, mse_mean, psnr_mean, asr })
    }
}
