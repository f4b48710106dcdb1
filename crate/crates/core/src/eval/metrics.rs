//! Pixel metrics and small statistics helpers.

use crate::error::{Error, Result};
use crate::toyworld::{ToyImage, IMAGE_SIDE};

/// Peak signal-to-noise ratio in dB over unit dynamic range, optionally
/// restricted to a pixel mask. Identical inputs return the +inf sentinel.
pub fn psnr(a: &ToyImage, b: &ToyImage, mask: Option<&[bool]>) -> Result<f64> {
    let mut sum = 0.0;
    let mut pixels = 0usize;
    for p in 0..IMAGE_SIDE * IMAGE_SIDE {
        if mask.map_or(true, |m| m[p]) {
            for c in 0..3 {
                let d = a.pixels()[p * 3 + c] - b.pixels()[p * 3 + c];
                sum += d * d;
            }
            pixels += 1;
        }
    }
    if pixels == 0 {
        return Err(Error::Domain { context: "psnr empty mask", value: 0.0 });
    }
    let mse = sum / (pixels * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean local SSIM with window 8, stride 4, C1 = 0.01^2, C2 = 0.03^2,
/// averaged over windows and channels.
pub fn ssim(a: &ToyImage, b: &ToyImage) -> Result<f64> {
    ssim_with(a, b, 8, 4)
}

pub(crate) fn ssim_with(a: &ToyImage, b: &ToyImage, window: usize, stride: usize) -> Result<f64> {
    if window > IMAGE_SIDE {
        return Err(Error::Domain { context: "ssim window larger than image", value: window as f64 });
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut origin = Vec::new();
    let mut y = 0;
    while y + window <= IMAGE_SIDE {
        origin.push(y);
        y += stride;
    }
    for &wy in &origin {
        for &wx in &origin {
            for ch in 0..3 {
                let mut xs = Vec::with_capacity(window * window);
                let mut ys = Vec::with_capacity(window * window);
                for dy in 0..window {
                    for dx in 0..window {
                        xs.push(a.get(wy + dy, wx + dx, ch));
                        ys.push(b.get(wy + dy, wx + dx, ch));
                    }
                }
                total += ssim_window(&xs, &ys, c1, c2);
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

fn ssim_window(xs: &[f64], ys: &[f64], c1: f64, c2: f64) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let vx = xs.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>() / n;
    let vy = ys.iter().map(|y| (y - my) * (y - my)).sum::<f64>() / n;
    let cov = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// series is constant (rank correlation is undefined there).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite metric values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(cov / (vx * vy).sqrt())
}

/// Total variation distance between observed counts and the uniform
/// distribution over `bins` outcomes.
pub fn tv_distance_from_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let uniform = 1.0 / counts.len() as f64;
    0.5 * counts
        .iter()
        .map(|&c| (c as f64 / total as f64 - uniform).abs())
        .sum::<f64>()
}
