//! PSNR and SSIM for images in `[0, 1]`, plus per-scene report tables.

use std::fmt::Write as _;

use crate::error::{arg_err, Result};
use crate::image::Image;

/// Reported PSNR when the images agree exactly.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return arg_err(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        ));
    }
    if a.data.is_empty() {
        return arg_err("empty image");
    }
    Ok(())
}

/// `10 log10(1 / mse)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filtering over fully covered windows only.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * plane[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5) averaged over every fully
/// covered window and every channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return arg_err(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height, a.width
        ));
    }
    let taps = gaussian_window();
    let (h, w) = (a.height, a.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let pa = a.channel(ch).data;
        let pb = b.channel(ch).data;
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub scene: String,
    pub view_id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn measure(scene: &str, view_id: usize, pred: &Image, gt: &Image) -> Result<Self> {
        Ok(Self { scene: scene.to_string(), view_id, psnr: psnr(pred, gt)?, ssim: ssim(pred, gt)? })
    }
}

/// Per-image rows; LPIPS and DISTS columns are present but always empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, row: ImageMetrics) {
        self.rows.push(row);
    }

    /// Per-scene means in order of first appearance.
    pub fn scene_means(&self) -> Vec<(String, f64, f64)> {
        let mut scenes: Vec<(String, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match scenes.iter_mut().find(|s| s.0 == r.scene) {
                Some(s) => {
                    s.1 += r.psnr;
                    s.2 += r.ssim;
                    s.3 += 1;
                }
                None => scenes.push((r.scene.clone(), r.psnr, r.ssim, 1)),
            }
        }
        scenes.into_iter().map(|(n, p, s, c)| (n, p / c as f64, s / c as f64)).collect()
    }

    /// Mean over images within each scene, then over scenes.
    pub fn aggregate(&self) -> Option<(f64, f64)> {
        let scenes = self.scene_means();
        if scenes.is_empty() {
            return None;
        }
        let n = scenes.len() as f64;
        Some((scenes.iter().map(|s| s.1).sum::<f64>() / n, scenes.iter().map(|s| s.2).sum::<f64>() / n))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,view_id,psnr,ssim,lpips,dists\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.6},{:.6},,", r.scene, r.view_id, r.psnr, r.ssim);
        }
        if let Some((p, q)) = self.aggregate() {
            let _ = writeln!(s, "mean,,{p:.6},{q:.6},,");
        }
        s
    }
}
