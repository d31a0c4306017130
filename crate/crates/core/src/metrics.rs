//! Evaluation metrics: windowed SSIM, mean IoU over label classes, and
//! the aspect-ratio difference score used to judge warp fidelity.

use ndarray::Array2;

use crate::types::{Image, LabelMap};
use crate::{Error, Result};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Array2<f64> {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = Array2::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w[[y, x]] = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let s: f64 = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

/// Mean structural similarity over valid (fully inside) 11x11 windows
/// with a Gaussian weighting, averaged over channels. Inputs are assumed
/// to live in [0,1].
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    let (h, w) = a.dims();
    if b.dims() != (h, w) {
        return Err(Error::DimMismatch(format!("ssim inputs {:?} vs {:?}", a.dims(), b.dims())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArg(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let g = win[[dy, dx]];
                        let va = a.data[[c, y0 + dy, x0 + dx]];
                        let vb = b.data[[c, y0 + dy, x0 + dx]];
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
                let l = (2.0 * mu_a * mu_b + SSIM_C1) / (mu_a * mu_a + mu_b * mu_b + SSIM_C1);
                let s = (2.0 * cov + SSIM_C2) / (var_a + var_b + SSIM_C2);
                total += l * s;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean intersection-over-union across the given classes, restricted to
/// classes actually present in the ground truth.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: &[u8]) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::DimMismatch(format!(
            "miou inputs {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for &class in classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut in_gt = false;
        for (p, g) in pred.data.iter().zip(gt.data.iter()) {
            let pm = *p == class;
            let gm = *g == class;
            if gm {
                in_gt = true;
            }
            if pm && gm {
                inter += 1;
            }
            if pm || gm {
                union += 1;
            }
        }
        if in_gt {
            total += inter as f64 / union as f64;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::InvalidArg("no evaluable class".into()));
    }
    Ok(total / evaluated as f64)
}

/// Aspect-ratio preservation score for one sample: distance of the
/// style ratio from 1. Zero means the warp kept the flat garment's
/// height-width ratio exactly.
pub fn r_diff(flat_parsing: &LabelMap, warped_parsing: &LabelMap) -> Result<f64> {
    let d = crate::dgt::compute_r_style(flat_parsing, warped_parsing)?;
    Ok((d.r_style - 1.0).abs())
}
