//! Gabor functions, rasterized kernels and the three-channel Gabor layer.
//!
//! The learnable variant reshapes the phase argument with five parameters
//! `K = (k1..k5)`:
//!
//! ```text
//! g(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2))
//!         * cos(2 pi (k1 x'^k2 + y'^k3 + k4)^k5 / lambda + psi)
//! ```
//!
//! Powers of negative bases are taken sign-preservingly, `b^e = sign(b) |b|^e`,
//! so the kernel stays real for any exponent.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{arg_err, Error, Result};
use crate::image::{reflect, Image};

/// Default kernel side length.
pub const DEFAULT_KERNEL_SIZE: usize = 9;

/// Number of learnable scalars per filter: five in `GaborParams`, five in `K`.
pub const PARAMS_PER_FILTER: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborParams {
    /// Wavelength in pixels.
    pub lambda: f64,
    /// Orientation in radians.
    pub theta: f64,
    /// Phase offset in radians.
    pub psi: f64,
    /// Gaussian envelope std in pixels.
    pub sigma: f64,
    /// Spatial aspect ratio.
    pub gamma: f64,
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.theta, self.psi, self.sigma, self.gamma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numeric("non-finite gabor parameter".into()));
        }
        if self.lambda <= 0.0 || self.sigma <= 0.0 || self.gamma <= 0.0 {
            return arg_err(format!(
                "gabor lambda, sigma and gamma must be positive: {self:?}"
            ));
        }
        Ok(())
    }
}

/// Shape parameters of the learnable phase argument.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborShapeK {
    pub k: [f64; 5],
}

impl Default for GaborShapeK {
    fn default() -> Self {
        Self { k: [1.0, 1.0, 2.0, 0.0, 1.0] }
    }
}

impl GaborShapeK {
    pub fn validate(&self) -> Result<()> {
        if self.k.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gabor shape parameter".into()));
        }
        if self.k[4] == 0.0 {
            return arg_err("gabor shape parameter k5 must be non-zero");
        }
        Ok(())
    }
}

/// Sign-preserving power `sign(b) |b|^e`.
#[inline]
pub fn signed_pow(b: f64, e: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        b.signum() * b.abs().powf(e)
    }
}

/// Partial derivatives of [`signed_pow`] with respect to base and exponent.
///
/// At `b = 0` the base derivative is taken as `1` for `e == 1` and `0`
/// otherwise (the limit for `e > 1`).
#[inline]
fn signed_pow_partials(b: f64, e: f64) -> (f64, f64) {
    if b == 0.0 {
        let d_base = if e == 1.0 { 1.0 } else { 0.0 };
        return (d_base, 0.0);
    }
    let a = b.abs();
    let d_base = e * a.powf(e - 1.0);
    let d_exp = b.signum() * a.powf(e) * a.ln();
    (d_base, d_exp)
}

#[inline]
fn rotate(x: f64, y: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (x * c + y * s, -x * s + y * c)
}

#[inline]
fn envelope(xr: f64, yr: f64, p: &GaborParams) -> f64 {
    (-(xr * xr + p.gamma * p.gamma * yr * yr) / (2.0 * p.sigma * p.sigma)).exp()
}

/// Real part of the standard Gabor function.
pub fn gabor_real(x: f64, y: f64, p: &GaborParams) -> f64 {
    let (xr, yr) = rotate(x, y, p.theta);
    envelope(xr, yr, p) * (2.0 * PI * xr / p.lambda + p.psi).cos()
}

/// Gabor function with the reshaped phase argument.
pub fn gabor_comp(x: f64, y: f64, p: &GaborParams, shape: &GaborShapeK) -> Result<f64> {
    let v = gabor_comp_with_grad(x, y, p, shape).0;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!(
            "gabor value overflowed at ({x}, {y}) with K = {:?}",
            shape.k
        )))
    }
}

/// Value of [`gabor_comp`] together with its gradient with respect to
/// `(lambda, theta, psi, sigma, gamma, k1, k2, k3, k4, k5)`.
pub fn gabor_comp_with_grad(
    x: f64,
    y: f64,
    p: &GaborParams,
    shape: &GaborShapeK,
) -> (f64, [f64; PARAMS_PER_FILTER]) {
    let [k1, k2, k3, k4, k5] = shape.k;
    let (xr, yr) = rotate(x, y, p.theta);
    let env = envelope(xr, yr, p);

    let px = signed_pow(xr, k2);
    let py = signed_pow(yr, k3);
    let (dpx_db, dpx_de) = signed_pow_partials(xr, k2);
    let (dpy_db, dpy_de) = signed_pow_partials(yr, k3);
    let inner = k1 * px + py + k4;
    let s = signed_pow(inner, k5);
    let (ds_du, ds_dk5) = signed_pow_partials(inner, k5);

    let freq = 2.0 * PI / p.lambda;
    let phase = freq * s + p.psi;
    let (sin_phase, cos_phase) = phase.sin_cos();
    let value = env * cos_phase;
    // d value / d phase
    let dphase = -env * sin_phase;

    let sq = xr * xr + p.gamma * p.gamma * yr * yr;
    let s2 = p.sigma * p.sigma;
    let d_sigma = cos_phase * env * sq / (s2 * p.sigma);
    let d_gamma = cos_phase * env * (-p.gamma * yr * yr / s2);
    let d_lambda = dphase * (-freq * s / p.lambda);
    let d_psi = dphase;

    // x' and y' rotate with theta: dx'/dtheta = y', dy'/dtheta = -x'.
    let denv_dtheta = env * (-(xr * yr) * (1.0 - p.gamma * p.gamma) / s2);
    let du_dtheta = k1 * dpx_db * yr - dpy_db * xr;
    let d_theta = cos_phase * denv_dtheta + dphase * freq * ds_du * du_dtheta;

    let chain = dphase * freq * ds_du;
    let d_k1 = chain * px;
    let d_k2 = chain * k1 * dpx_de;
    let d_k3 = chain * dpy_de;
    let d_k4 = chain;
    let d_k5 = dphase * freq * ds_dk5;

    (
        value,
        [d_lambda, d_theta, d_psi, d_sigma, d_gamma, d_k1, d_k2, d_k3, d_k4, d_k5],
    )
}

/// A rasterized `size x size` Gabor kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct GaborKernel {
    pub params: GaborParams,
    pub shape: GaborShapeK,
    pub size: usize,
    /// Row-major taps; `taps[i * size + j]` samples `(x, y) = (j - size/2, i - size/2)`.
    pub taps: Vec<f64>,
}

pub fn make_kernel(size: usize, params: GaborParams, shape: GaborShapeK) -> Result<GaborKernel> {
    if size % 2 == 0 || size < 3 {
        return arg_err(format!("gabor kernel size must be odd and >= 3, got {size}"));
    }
    params.validate()?;
    shape.validate()?;
    let half = (size / 2) as f64;
    let mut taps = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            taps.push(gabor_comp(j as f64 - half, i as f64 - half, &params, &shape)?);
        }
    }
    Ok(GaborKernel { params, shape, size, taps })
}

impl GaborKernel {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.taps.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn as_image(&self) -> Image {
        Image {
            height: self.size,
            width: self.size,
            channels: 1,
            data: self.taps.clone(),
        }
    }
}

/// Default bank: 4 orientations x 2 wavelengths, `sigma = 0.56 lambda`,
/// `gamma = 0.5`, `psi = 0`, `K = (1, 1, 2, 0, 1)`.
pub fn default_bank() -> Vec<(GaborParams, GaborShapeK)> {
    bank(4, &[3.0, 6.0])
}

/// `orientations x wavelengths` filter bank with the standard envelope ratio.
pub fn bank(orientations: usize, wavelengths: &[f64]) -> Vec<(GaborParams, GaborShapeK)> {
    let mut out = Vec::with_capacity(orientations * wavelengths.len());
    for &lambda in wavelengths {
        for o in 0..orientations {
            let params = GaborParams {
                lambda,
                theta: PI * o as f64 / orientations as f64,
                psi: 0.0,
                sigma: 0.56 * lambda,
                gamma: 0.5,
            };
            out.push((params, GaborShapeK::default()));
        }
    }
    out
}

/// Same-size correlation of a single-channel image with reflect padding.
pub fn conv2d(image: &Image, kernel: &GaborKernel) -> Result<Image> {
    if image.channels != 1 {
        return arg_err(format!("conv2d expects one channel, got {}", image.channels));
    }
    let k = kernel.size;
    if image.height < k || image.width < k {
        return arg_err(format!(
            "image {}x{} is smaller than the {k}x{k} kernel",
            image.height, image.width
        ));
    }
    let (h, w) = (image.height, image.width);
    let half = (k / 2) as isize;
    let mut out = Image::zeros(h, w, 1);
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let r = reflect(row as isize + i as isize - half, h);
                let src = &image.data[r * w..(r + 1) * w];
                let taps = &kernel.taps[i * k..(i + 1) * k];
                for (j, t) in taps.iter().enumerate() {
                    acc += t * src[reflect(col as isize + j as isize - half, w)];
                }
            }
            out.data[row * w + col] = acc;
        }
    }
    Ok(out)
}

/// Per-filter sum of the responses of the red, green and blue channels.
pub fn gabor_layer(rgb: &Image, filters: &[GaborKernel]) -> Result<Image> {
    if filters.is_empty() {
        return arg_err("gabor layer needs at least one filter");
    }
    if rgb.channels != 3 {
        return arg_err(format!("gabor layer expects RGB, got {} channels", rgb.channels));
    }
    let channels: Vec<Image> = (0..3).map(|c| rgb.channel(c)).collect();
    let mut out = Image::zeros(rgb.height, rgb.width, filters.len());
    for (f, kernel) in filters.iter().enumerate() {
        for ch in &channels {
            let resp = conv2d(ch, kernel)?;
            for (p, v) in resp.data.iter().enumerate() {
                out.data[p * filters.len() + f] += v;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(theta: f64, psi: f64) -> GaborParams {
        GaborParams { lambda: 4.0, theta, psi, sigma: 2.0, gamma: 0.5 }
    }

    fn brute_conv(img: &[f64], h: usize, w: usize, taps: &[f64], k: usize) -> Vec<f64> {
        // Explicit padded copy, then the plain nested sum.
        let half = k / 2;
        let (ph, pw) = (h + 2 * half, w + 2 * half);
        let mut padded = vec![0.0; ph * pw];
        for r in 0..ph {
            for c in 0..pw {
                let mut sr = r as isize - half as isize;
                let mut sc = c as isize - half as isize;
                if sr < 0 {
                    sr = -sr;
                }
                if sr >= h as isize {
                    sr = 2 * (h as isize - 1) - sr;
                }
                if sc < 0 {
                    sc = -sc;
                }
                if sc >= w as isize {
                    sc = 2 * (w as isize - 1) - sc;
                }
                padded[r * pw + c] = img[sr as usize * w + sc as usize];
            }
        }
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        acc += taps[i * k + j] * padded[(r + i) * pw + c + j];
                    }
                }
                out[r * w + c] = acc;
            }
        }
        out
    }

    #[test]
    fn real_part_examples() {
        assert_eq!(gabor_real(0.0, 0.0, &params(0.3, 0.0)), 1.0);
        assert!(gabor_real(0.0, 0.0, &params(0.3, PI / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn real_part_is_rotation_equivariant() {
        let theta0: f64 = 0.7;
        for &(x, y) in &[(1.0, 2.0), (-1.5, 0.3), (2.5, -2.0)] {
            let (xr, yr) = (x * theta0.cos() + y * theta0.sin(), -x * theta0.sin() + y * theta0.cos());
            let a = gabor_real(x, y, &params(theta0, 0.2));
            let b = gabor_real(xr, yr, &params(0.0, 0.2));
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn comp_examples() {
        let p = params(0.4, 0.0);
        assert_eq!(gabor_comp(0.0, 0.0, &p, &GaborShapeK::default()).unwrap(), 1.0);
        let shape = GaborShapeK { k: [1.3, 1.0, 1.7, 0.2, 1.1] };
        let v = gabor_comp(-2.0, 0.5, &params(0.0, 0.1), &shape).unwrap();
        assert!(v.is_finite());
        let wild = GaborShapeK { k: [1e200, 3.0, 1.0, 0.0, 2.0] };
        assert!(gabor_comp(3.0, 1.0, &params(0.0, 0.0), &wild).is_err());
    }

    #[test]
    fn comp_reduces_to_real_on_the_axis() {
        let shape = GaborShapeK::default();
        for &theta in &[0.0, 0.5, 2.0] {
            let p = params(theta, 0.3);
            for t in [-3.0, -1.2, 0.0, 0.8, 2.6] {
                // Points with y' = 0 lie along the rotated x axis.
                let (x, y) = (t * theta.cos(), t * theta.sin());
                let a = gabor_comp(x, y, &p, &shape).unwrap();
                assert!((a - gabor_real(x, y, &p)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn envelope_bounds_and_phase_periodicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = GaborParams {
                lambda: rng.random_range(1.0..8.0),
                theta: rng.random_range(0.0..6.0),
                psi: rng.random_range(-3.0..3.0),
                sigma: rng.random_range(0.5..4.0),
                gamma: rng.random_range(0.2..2.0),
            };
            let shape = GaborShapeK {
                k: [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(0.5..3.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..2.0),
                ],
            };
            let (x, y) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let v = gabor_comp(x, y, &p, &shape).unwrap();
            let (xr, yr) = rotate(x, y, p.theta);
            assert!(v.abs() <= envelope(xr, yr, &p) + 1e-15);
            let shifted = GaborParams { psi: p.psi + 2.0 * PI, ..p };
            let w = gabor_comp(x, y, &shifted, &shape).unwrap();
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        let p = GaborParams { lambda: 3.7, theta: 0.6, psi: 0.3, sigma: 2.1, gamma: 0.7 };
        let shape = GaborShapeK { k: [1.2, 1.3, 1.8, 0.4, 0.9] };
        let flat = |p: &GaborParams, s: &GaborShapeK| {
            [p.lambda, p.theta, p.psi, p.sigma, p.gamma, s.k[0], s.k[1], s.k[2], s.k[3], s.k[4]]
        };
        let unflat = |v: [f64; 10]| {
            (
                GaborParams { lambda: v[0], theta: v[1], psi: v[2], sigma: v[3], gamma: v[4] },
                GaborShapeK { k: [v[5], v[6], v[7], v[8], v[9]] },
            )
        };
        for &(x, y) in &[(1.5, 2.0), (-2.0, 1.0), (3.0, -0.5)] {
            let (_, grad) = gabor_comp_with_grad(x, y, &p, &shape);
            let base = flat(&p, &shape);
            for i in 0..10 {
                let h = 1e-6 * base[i].abs().max(1.0);
                let mut up = base;
                up[i] += h;
                let mut dn = base;
                dn[i] -= h;
                let (pu, su) = unflat(up);
                let (pd, sd) = unflat(dn);
                let fd = (gabor_comp_with_grad(x, y, &pu, &su).0
                    - gabor_comp_with_grad(x, y, &pd, &sd).0)
                    / (2.0 * h);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                assert!((fd - grad[i]).abs() / denom < 1e-5, "param {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let kern = make_kernel(7, params(0.2, 0.0), GaborShapeK::default()).unwrap();
        assert_eq!(kern.taps.len(), 49);
        assert_eq!(kern.taps[24], 1.0);
        assert!(make_kernel(4, params(0.2, 0.0), GaborShapeK::default()).is_err());
        assert_eq!(kern.to_csv().lines().count(), 7);
    }

    #[test]
    fn conv_examples() {
        let mut delta = make_kernel(3, params(0.0, 0.0), GaborShapeK::default()).unwrap();
        delta.taps = vec![0.0; 9];
        delta.taps[4] = 1.0;
        let img = Image::from_vec(4, 5, 1, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        assert_eq!(conv2d(&img, &delta).unwrap(), img);

        let kern = make_kernel(5, params(0.5, 0.1), GaborShapeK::default()).unwrap();
        let sum: f64 = kern.taps.iter().sum();
        let flat = conv2d(&Image::filled(6, 6, 1, 0.3), &kern).unwrap();
        assert!(flat.data.iter().all(|v| (v - 0.3 * sum).abs() < 1e-12));

        assert!(conv2d(&Image::zeros(4, 4, 1), &kern).is_err());
    }

    #[test]
    fn conv_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w, k) in &[(5, 5, 3), (5, 5, 5), (8, 11, 5), (9, 9, 9)] {
            let img: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut kern = make_kernel(k, params(0.0, 0.0), GaborShapeK::default()).unwrap();
            kern.taps.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
            let fast = conv2d(&Image::from_vec(h, w, 1, img.clone()).unwrap(), &kern).unwrap();
            let slow = brute_conv(&img, h, w, &kern.taps, k);
            for (a, b) in fast.data.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_examples() {
        let kernels: Vec<GaborKernel> = default_bank()
            .into_iter()
            .map(|(p, s)| make_kernel(DEFAULT_KERNEL_SIZE, p, s).unwrap())
            .collect();
        let zero = gabor_layer(&Image::zeros(12, 12, 3), &kernels).unwrap();
        assert_eq!(zero.channels, 8);
        assert!(zero.data.iter().all(|&v| v == 0.0));
        assert!(gabor_layer(&Image::zeros(12, 12, 3), &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gray = Image::from_vec(12, 12, 1, (0..144).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut rgb = Image::zeros(12, 12, 3);
        for (p, v) in gray.data.iter().enumerate() {
            rgb.data[3 * p..3 * p + 3].fill(*v);
        }
        let out = gabor_layer(&rgb, &kernels).unwrap();
        for (f, kern) in kernels.iter().enumerate() {
            let single = conv2d(&gray, kern).unwrap();
            for (p, v) in single.data.iter().enumerate() {
                assert!((out.data[p * 8 + f] - 3.0 * v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let kernels: Vec<GaborKernel> = bank(2, &[4.0])
            .into_iter()
            .map(|(p, s)| make_kernel(5, p, s).unwrap())
            .collect();
        let mut rand_img = || {
            Image::from_vec(9, 9, 3, (0..243).map(|_| rng.random::<f64>()).collect()).unwrap()
        };
        let (p, q) = (rand_img(), rand_img());
        let (a, b) = (0.7, -1.3);
        let mix = Image {
            data: p.data.iter().zip(&q.data).map(|(x, y)| a * x + b * y).collect(),
            ..p.clone()
        };
        let lhs = gabor_layer(&mix, &kernels).unwrap();
        let gp = gabor_layer(&p, &kernels).unwrap();
        let gq = gabor_layer(&q, &kernels).unwrap();
        for i in 0..lhs.data.len() {
            assert!((lhs.data[i] - (a * gp.data[i] + b * gq.data[i])).abs() < 1e-12);
        }
    }
}
