//! Quality and rate metrics: PSNR, SSIM / MS-SSIM, bits per pixel, and
//! Bjontegaard rate/quality deltas between RD curves.
//!
//! Metrics run in the same linear-float space as training; callers that need
//! 8-bit sRGB-domain numbers quantize first (the CLI exposes a flag).

mod bd;
mod ssim;

pub use bd::{bd_metrics, bd_metrics_filtered, BdError, RdCurve};
pub use ssim::{ms_ssim, ssim, ssim_with_grad};

use crate::buffer::{BufferError, ImageBuffer};

/// PSNR cap for (near-)identical images; keeps CSV output finite.
pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(peak^2 / MSE)` with `peak = 1.0`; identical inputs report the
/// 99-dB sentinel.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, BufferError> {
    let mse = a.mse(b)?;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Bits per pixel of a model: `8 * bytes / (W * H * frames)`.
pub fn bpp(model_bytes: u64, width: usize, height: usize, frame_count: usize) -> f64 {
    assert!(width > 0 && height > 0 && frame_count > 0);
    8.0 * model_bytes as f64 / (width * height * frame_count) as f64
}
