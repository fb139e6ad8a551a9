//! The moments encoder: Gabor layer, stacked Zernike convolutions and a small
//! multi-scale convolutional trunk, producing a per-pixel [`FeatureVolume`].
//!
//! Also home to the pixel-aligned sampling used to condition the field.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{arg_err, Error, Result};
use crate::gabor::{self, GaborParams, GaborShapeK, PARAMS_PER_FILTER};
use crate::image::{reflect, Image};
use crate::params::{glorot, read_u32, BoundParams, ParamStore};
use crate::tensor::{gemm, Tensor};
use crate::zernike::{ZernikeBasis, NUM_BASIS, ORDER_CAP};

pub const FEATURE_MAGIC: &[u8; 4] = b"MFV1";

// ---- feature volumes --------------------------------------------------------

/// Row-major `height x width x dim` feature map aligned with image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureVolume {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return arg_err(format!("feature volume needs rank 3, got {:?}", t.shape));
        }
        Ok(Self { height: t.shape[0], width: t.shape[1], dim: t.shape[2], data: t.data.clone() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor { shape: vec![self.height, self.width, self.dim], data: self.data.clone() }
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for d in [self.height, self.width, self.dim] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format { what: "feature volume", reason: "bad magic".into() });
        }
        let height = read_u32(r)? as usize;
        let width = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut raw = vec![0u8; 4 * height * width * dim];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self { height, width, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Four `(flat pixel index, weight)` pairs of a clamped bilinear lookup.
pub(crate) fn bilinear_taps(height: usize, width: usize, u: f64, v: f64) -> [(usize, f64); 4] {
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, (width - 1) as f64) };
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, (height - 1) as f64) };
    let x0 = (u.floor() as usize).min(width.saturating_sub(2));
    let y0 = (v.floor() as usize).min(height.saturating_sub(2));
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    [
        (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * width + x1, fx * (1.0 - fy)),
        (y1 * width + x0, (1.0 - fx) * fy),
        (y1 * width + x1, fx * fy),
    ]
}

/// Bilinear feature lookup at image point `(u, v)`, clamped to the edges.
pub fn sample_bilinear(vol: &FeatureVolume, u: f64, v: f64) -> Vec<f64> {
    let mut out = vec![0.0; vol.dim];
    for (idx, w) in bilinear_taps(vol.height, vol.width, u, v) {
        if w == 0.0 {
            continue;
        }
        let f = &vol.data[idx * vol.dim..(idx + 1) * vol.dim];
        out.iter_mut().zip(f).for_each(|(o, x)| *o += w * x);
    }
    out
}

// ---- graph operations -------------------------------------------------------

/// Input pixel feeding each `(output pixel, tap)` of a reflect-padded
/// `k x k` window with the given stride, restricted to a subset of taps.
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: usize,
    source: Vec<u32>,
    /// `source` transposed to tap-major order.
    by_tap: Vec<u32>,
}

type GeometryKey = (usize, usize, usize, usize, Vec<usize>);

thread_local! {
    static GEOMETRY: std::cell::RefCell<std::collections::HashMap<GeometryKey, Arc<ConvGeometry>>> =
        std::cell::RefCell::new(std::collections::HashMap::new());
}

impl ConvGeometry {
    fn new(in_h: usize, in_w: usize, k: usize, stride: usize, taps: &[usize]) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let half = (k / 2) as isize;
        let mut source = Vec::with_capacity(out_h * out_w * taps.len());
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (cy, cx) = ((oy * stride) as isize, (ox * stride) as isize);
                for &t in taps {
                    let (i, j) = ((t / k) as isize, (t % k) as isize);
                    let r = reflect(cy + i - half, in_h);
                    source.push((r * in_w + reflect(cx + j - half, in_w)) as u32);
                }
            }
        }
        let rows = out_h * out_w;
        let mut by_tap = vec![0; source.len()];
        for (p, src) in source.chunks_exact(taps.len()).enumerate() {
            for (t, &s) in src.iter().enumerate() {
                by_tap[t * rows + p] = s;
            }
        }
        Self { in_h, in_w, out_h, out_w, taps: taps.len(), source, by_tap }
    }

    fn shared(in_h: usize, in_w: usize, k: usize, stride: usize, taps: &[usize]) -> Arc<Self> {
        let key = (in_h, in_w, k, stride, taps.to_vec());
        GEOMETRY.with(|cache| {
            cache
                .borrow_mut()
                .entry(key)
                .or_insert_with(|| Arc::new(Self::new(in_h, in_w, k, stride, taps)))
                .clone()
        })
    }

    fn rows(&self) -> usize {
        self.out_h * self.out_w
    }

    fn forward(&self, x: &[f64], kernel: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        match c_out {
            1 => self.forward_fixed::<1>(x, kernel, c_in),
            2 => self.forward_fixed::<2>(x, kernel, c_in),
            3 => self.forward_fixed::<3>(x, kernel, c_in),
            4 => self.forward_fixed::<4>(x, kernel, c_in),
            8 => self.forward_fixed::<8>(x, kernel, c_in),
            16 => self.forward_fixed::<16>(x, kernel, c_in),
            _ => self.forward_any(x, kernel, c_in, c_out),
        }
    }

    fn grad_input(&self, grad: &[f64], kernel: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        match c_out {
            1 => self.grad_input_fixed::<1>(grad, kernel, c_in),
            2 => self.grad_input_fixed::<2>(grad, kernel, c_in),
            3 => self.grad_input_fixed::<3>(grad, kernel, c_in),
            4 => self.grad_input_fixed::<4>(grad, kernel, c_in),
            8 => self.grad_input_fixed::<8>(grad, kernel, c_in),
            16 => self.grad_input_fixed::<16>(grad, kernel, c_in),
            _ => self.grad_input_any(grad, kernel, c_in, c_out),
        }
    }

    fn grad_kernel(&self, x: &[f64], grad: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        match c_out {
            1 => self.grad_kernel_fixed::<1>(x, grad, c_in),
            2 => self.grad_kernel_fixed::<2>(x, grad, c_in),
            3 => self.grad_kernel_fixed::<3>(x, grad, c_in),
            4 => self.grad_kernel_fixed::<4>(x, grad, c_in),
            8 => self.grad_kernel_fixed::<8>(x, grad, c_in),
            16 => self.grad_kernel_fixed::<16>(x, grad, c_in),
            _ => self.grad_kernel_any(x, grad, c_in, c_out),
        }
    }

    // fixed output widths keep the per-pixel accumulators in registers
    fn forward_fixed<const CO: usize>(&self, x: &[f64], kernel: &[f64], c_in: usize) -> Vec<f64> {
        let (k, _) = kernel.as_chunks::<CO>();
        let mut out = vec![[0.0; CO]; self.rows()];
        for (dst, src) in out.iter_mut().zip(self.source.chunks_exact(self.taps)) {
            let mut acc = [0.0; CO];
            for (kt, &s) in k.chunks_exact(c_in).zip(src) {
                let s = s as usize;
                for (kr, &xi) in kt.iter().zip(&x[s * c_in..(s + 1) * c_in]) {
                    for o in 0..CO {
                        acc[o] += xi * kr[o];
                    }
                }
            }
            *dst = acc;
        }
        out.into_flattened()
    }

    fn grad_input_fixed<const CO: usize>(&self, grad: &[f64], kernel: &[f64], c_in: usize) -> Vec<f64> {
        let (k, _) = kernel.as_chunks::<CO>();
        let (g, _) = grad.as_chunks::<CO>();
        let mut dx = vec![0.0; self.in_h * self.in_w * c_in];
        for (gr, src) in g.iter().zip(self.source.chunks_exact(self.taps)) {
            for (kt, &s) in k.chunks_exact(c_in).zip(src) {
                let s = s as usize;
                for (kr, d) in kt.iter().zip(&mut dx[s * c_in..(s + 1) * c_in]) {
                    let mut acc = 0.0;
                    for o in 0..CO {
                        acc += kr[o] * gr[o];
                    }
                    *d += acc;
                }
            }
        }
        dx
    }

    fn grad_kernel_fixed<const CO: usize>(&self, x: &[f64], grad: &[f64], c_in: usize) -> Vec<f64> {
        let (g, _) = grad.as_chunks::<CO>();
        let mut dk = vec![[0.0; CO]; self.taps * c_in];
        for (dt, src) in dk.chunks_exact_mut(c_in).zip(self.by_tap.chunks_exact(self.rows())) {
            for (i, a) in dt.iter_mut().enumerate() {
                let mut acc = [0.0; CO];
                for (gr, &s) in g.iter().zip(src) {
                    let xi = x[s as usize * c_in + i];
                    for o in 0..CO {
                        acc[o] += xi * gr[o];
                    }
                }
                *a = acc;
            }
        }
        dk.into_flattened()
    }

    fn forward_any(&self, x: &[f64], kernel: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * c_out];
        for (dst, src) in out.chunks_exact_mut(c_out).zip(self.source.chunks_exact(self.taps)) {
            for (kt, &s) in kernel.chunks_exact(c_in * c_out).zip(src) {
                let s = s as usize;
                for (kr, &xi) in kt.chunks_exact(c_out).zip(&x[s * c_in..(s + 1) * c_in]) {
                    dst.iter_mut().zip(kr).for_each(|(a, k)| *a += xi * k);
                }
            }
        }
        out
    }

    fn grad_input_any(&self, grad: &[f64], kernel: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_h * self.in_w * c_in];
        for (gr, src) in grad.chunks_exact(c_out).zip(self.source.chunks_exact(self.taps)) {
            for (kt, &s) in kernel.chunks_exact(c_in * c_out).zip(src) {
                let s = s as usize;
                for (kr, d) in kt.chunks_exact(c_out).zip(&mut dx[s * c_in..(s + 1) * c_in]) {
                    *d += kr.iter().zip(gr).map(|(k, g)| k * g).sum::<f64>();
                }
            }
        }
        dx
    }

    fn grad_kernel_any(&self, x: &[f64], grad: &[f64], c_in: usize, c_out: usize) -> Vec<f64> {
        let mut dk = vec![0.0; self.taps * c_in * c_out];
        for (dt, src) in dk.chunks_exact_mut(c_in * c_out).zip(self.by_tap.chunks_exact(self.rows())) {
            for (gr, &s) in grad.chunks_exact(c_out).zip(src) {
                let s = s as usize;
                for (a, &xi) in dt.chunks_exact_mut(c_out).zip(&x[s * c_in..(s + 1) * c_in]) {
                    a.iter_mut().zip(gr).for_each(|(d, g)| *d += xi * g);
                }
            }
        }
        dk
    }
}

/// Reflect-padded correlation of an `[h, w, c_in]` map with a
/// `[k * k * c_in, c_out]` kernel (row index `(i * k + j) * c_in + ci`).
pub fn conv2d_op(
    g: &mut Graph,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    k: usize,
    stride: usize,
) -> Result<Var> {
    let all: Vec<usize> = (0..k * k).collect();
    conv_taps_op(g, input, kernel, bias, k, stride, &all)
}

/// Like [`conv2d_op`] but only the listed window taps (`i * k + j`) take
/// part; kernel rows are `(tap position in the list) * c_in + ci`.
pub fn conv_taps_op(
    g: &mut Graph,
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    k: usize,
    stride: usize,
    taps: &[usize],
) -> Result<Var> {
    let vi = g.value(input);
    let vk = g.value(kernel);
    if vi.rank() != 3 {
        return arg_err(format!("conv input must be [h, w, c], got {:?}", vi.shape));
    }
    let (h, w, c_in) = (vi.shape[0], vi.shape[1], vi.shape[2]);
    if k % 2 == 0 || taps.is_empty() || taps.iter().any(|&t| t >= k * k) {
        return arg_err(format!("bad tap set for a {k}x{k} window"));
    }
    if vk.rank() != 2 || vk.shape[0] != taps.len() * c_in {
        return arg_err(format!(
            "conv kernel {:?} does not fit {} taps over {c_in} channels",
            vk.shape,
            taps.len()
        ));
    }
    if stride == 0 {
        return arg_err("conv stride must be positive");
    }
    let c_out = vk.shape[1];
    let geo = ConvGeometry::shared(h, w, k, stride, taps);
    let out = Tensor {
        shape: vec![geo.out_h, geo.out_w, c_out],
        data: geo.forward(&vi.data, &vk.data, c_in, c_out),
    };
    let y = g.push(
        out,
        &[input, kernel],
        Box::new(move |c| {
            let din = c.needs[0].then(|| Tensor {
                shape: vec![geo.in_h, geo.in_w, c_in],
                data: geo.grad_input(&c.grad.data, &c.inputs[1].data, c_in, c_out),
            });
            let dk = c.needs[1].then(|| Tensor {
                shape: vec![geo.taps * c_in, c_out],
                data: geo.grad_kernel(&c.inputs[0].data, &c.grad.data, c_in, c_out),
            });
            vec![din, dk]
        }),
    );
    match bias {
        Some(b) => g.add_bias(y, b),
        None => Ok(y),
    }
}

/// Folds a `[c_out, c_in * 15]` mixing matrix with fixed weighted basis
/// windows into a dense `[taps * c_in, c_out]` kernel.
pub fn zernike_kernel_op(g: &mut Graph, mix: Var, windows: Arc<Vec<Vec<f64>>>) -> Result<Var> {
    let vm = g.value(mix);
    let nb = windows.len();
    if vm.rank() != 2 || vm.shape[1] % nb != 0 {
        return arg_err(format!("zernike mix {:?} is not [c_out, c_in * {nb}]", vm.shape));
    }
    let (c_out, c_in) = (vm.shape[0], vm.shape[1] / nb);
    let taps = windows[0].len();
    let mut out = Tensor::zeros(&[taps * c_in, c_out]);
    for o in 0..c_out {
        for i in 0..c_in {
            let coeffs = &vm.data[o * c_in * nb + i * nb..o * c_in * nb + (i + 1) * nb];
            for (b, window) in windows.iter().enumerate() {
                let a = coeffs[b];
                if a == 0.0 {
                    continue;
                }
                for (t, wv) in window.iter().enumerate() {
                    out.data[(t * c_in + i) * c_out + o] += a * wv;
                }
            }
        }
    }
    Ok(g.push(
        out,
        &[mix],
        Box::new(move |c| {
            let mut dm = Tensor::zeros(&[c_out, c_in * nb]);
            for o in 0..c_out {
                for i in 0..c_in {
                    for (b, window) in windows.iter().enumerate() {
                        let mut acc = 0.0;
                        for (t, wv) in window.iter().enumerate() {
                            acc += c.grad.data[(t * c_in + i) * c_out + o] * wv;
                        }
                        dm.data[o * c_in * nb + i * nb + b] = acc;
                    }
                }
            }
            vec![Some(dm)]
        }),
    ))
}

fn unpack_filter(row: &[f64]) -> (GaborParams, GaborShapeK) {
    (
        GaborParams { lambda: row[0], theta: row[1], psi: row[2], sigma: row[3], gamma: row[4] },
        GaborShapeK { k: [row[5], row[6], row[7], row[8], row[9]] },
    )
}

fn pack_filter(p: &GaborParams, s: &GaborShapeK) -> [f64; PARAMS_PER_FILTER] {
    [p.lambda, p.theta, p.psi, p.sigma, p.gamma, s.k[0], s.k[1], s.k[2], s.k[3], s.k[4]]
}

/// Rasterizes `[filters, 10]` Gabor parameters into a `[k * k, filters]`
/// single-input-channel kernel.
pub fn gabor_kernel_op(g: &mut Graph, params: Var, k: usize) -> Result<Var> {
    let vp = g.value(params);
    if vp.rank() != 2 || vp.shape[1] != PARAMS_PER_FILTER {
        return arg_err(format!("gabor params must be [f, 10], got {:?}", vp.shape));
    }
    if k % 2 == 0 {
        return arg_err("gabor kernel size must be odd");
    }
    let filters = vp.shape[0];
    let half = (k / 2) as f64;
    let mut out = Tensor::zeros(&[k * k, filters]);
    let mut partials = vec![[0.0; PARAMS_PER_FILTER]; k * k * filters];
    for f in 0..filters {
        let (p, s) = unpack_filter(&vp.data[f * PARAMS_PER_FILTER..(f + 1) * PARAMS_PER_FILTER]);
        p.validate()?;
        s.validate()?;
        for i in 0..k {
            for j in 0..k {
                let t = i * k + j;
                let (v, d) = gabor::gabor_comp_with_grad(j as f64 - half, i as f64 - half, &p, &s);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("gabor filter {f} overflowed")));
                }
                out.data[t * filters + f] = v;
                partials[t * filters + f] = d;
            }
        }
    }
    Ok(g.push(
        out,
        &[params],
        Box::new(move |c| {
            let mut dp = Tensor::zeros(&[filters, PARAMS_PER_FILTER]);
            for (idx, d) in partials.iter().enumerate() {
                let f = idx % filters;
                let gv = c.grad.data[idx];
                for (acc, di) in dp.data[f * PARAMS_PER_FILTER..(f + 1) * PARAMS_PER_FILTER]
                    .iter_mut()
                    .zip(d)
                {
                    *acc += gv * di;
                }
            }
            vec![Some(dp)]
        }),
    ))
}

/// Bilinear resize of an `[h, w, c]` map to `[out_h, out_w, c]` with
/// half-pixel alignment.
pub fn upsample_op(g: &mut Graph, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let vi = g.value(input);
    if vi.rank() != 3 {
        return arg_err("upsample input must be [h, w, c]");
    }
    let (h, w, c) = (vi.shape[0], vi.shape[1], vi.shape[2]);
    let mut taps = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
        for x in 0..out_w {
            let sx = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            taps.push(bilinear_taps(h, w, sx, sy));
        }
    }
    let mut out = Tensor::zeros(&[out_h, out_w, c]);
    for (o, tp) in out.data.chunks_exact_mut(c).zip(&taps) {
        for &(idx, wt) in tp {
            o.iter_mut().zip(&vi.data[idx * c..(idx + 1) * c]).for_each(|(a, x)| *a += wt * x);
        }
    }
    Ok(g.push(
        out,
        &[input],
        Box::new(move |ctx| {
            let mut d = Tensor::zeros(&[h, w, c]);
            for (gr, tp) in ctx.grad.data.chunks_exact(c).zip(&taps) {
                for &(idx, wt) in tp {
                    d.data[idx * c..(idx + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, x)| *a += wt * x);
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Bilinear lookups of an `[h, w, d]` volume at image points, giving `[n, d]`.
pub fn sample_features_op(g: &mut Graph, vol: Var, points: &[(f64, f64)]) -> Result<Var> {
    let vv = g.value(vol);
    if vv.rank() != 3 {
        return arg_err("feature volume must be [h, w, d]");
    }
    let (h, w, d) = (vv.shape[0], vv.shape[1], vv.shape[2]);
    let taps: Vec<[(usize, f64); 4]> =
        points.iter().map(|&(u, v)| bilinear_taps(h, w, u, v)).collect();
    let mut out = Tensor::zeros(&[points.len(), d]);
    for (o, tp) in out.data.chunks_exact_mut(d).zip(&taps) {
        for &(idx, wt) in tp {
            if wt != 0.0 {
                o.iter_mut().zip(&vv.data[idx * d..(idx + 1) * d]).for_each(|(a, x)| *a += wt * x);
            }
        }
    }
    Ok(g.push(
        out,
        &[vol],
        Box::new(move |ctx| {
            let mut dv = Tensor::zeros(&[h, w, d]);
            for (gr, tp) in ctx.grad.data.chunks_exact(d).zip(&taps) {
                for &(idx, wt) in tp {
                    if wt != 0.0 {
                        dv.data[idx * d..(idx + 1) * d]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, x)| *a += wt * x);
                    }
                }
            }
            vec![Some(dv)]
        }),
    ))
}

// ---- zernike convolution ------------------------------------------------------

/// One Zernike convolution: window moments per input channel, then a
/// learnable linear mix across `(channel, moment)` pairs.
#[derive(Debug, Clone)]
pub struct ZernikeConvLayer {
    pub window_radius: usize,
    pub basis: ZernikeBasis,
    /// `[c_out, c_in * 15]`, column `ci * 15 + b`.
    pub mix: Tensor,
    pub bias: Vec<f64>,
}

impl ZernikeConvLayer {
    pub fn new(window_radius: usize, mix: Tensor, bias: Vec<f64>) -> Result<Self> {
        let basis = ZernikeBasis::new(ORDER_CAP, 2 * window_radius + 1)?;
        if mix.rank() != 2 || mix.shape[1] % NUM_BASIS != 0 || mix.shape[0] != bias.len() {
            return arg_err(format!(
                "zernike mix {:?} / bias {} do not describe a layer",
                mix.shape,
                bias.len()
            ));
        }
        if !mix.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numeric("non-finite zernike layer weights".into()));
        }
        Ok(Self { window_radius, basis, mix, bias })
    }

    pub fn c_in(&self) -> usize {
        self.mix.shape[1] / NUM_BASIS
    }

    pub fn c_out(&self) -> usize {
        self.mix.shape[0]
    }
}

/// Depthwise moment filtering with the 15 fixed basis windows followed by a
/// 1x1 mixing of the moment channels.
pub fn zernike_conv(input: &Image, layer: &ZernikeConvLayer) -> Result<Image> {
    let c_in = layer.c_in();
    if input.channels != c_in {
        return arg_err(format!(
            "zernike conv expects {c_in} channels, got {}",
            input.channels
        ));
    }
    let size = layer.basis.size();
    let (taps, windows) = disk_taps(&layer.basis);
    let geo = ConvGeometry::shared(input.height, input.width, size, 1, &taps);
    let pixels = input.height * input.width;

    // depthwise: [pixels, c_in * 15]
    let mut moments = vec![0.0; pixels * c_in * NUM_BASIS];
    for p in 0..pixels {
        let src = &geo.source[p * geo.taps..(p + 1) * geo.taps];
        for ci in 0..c_in {
            for (b, window) in windows.iter().enumerate() {
                let mut acc = 0.0;
                for (t, &s) in src.iter().enumerate() {
                    acc += window[t] * input.data[s as usize * c_in + ci];
                }
                moments[(p * c_in + ci) * NUM_BASIS + b] = acc;
            }
        }
    }
    // pointwise mix
    let c_out = layer.c_out();
    let mut out = Image::zeros(input.height, input.width, c_out);
    gemm(pixels, c_in * NUM_BASIS, c_out, &moments, false, &layer.mix.data, true, &mut out.data, false);
    for px in out.data.chunks_exact_mut(c_out) {
        px.iter_mut().zip(&layer.bias).for_each(|(o, b)| *o += b);
    }
    Ok(out)
}

// ---- encoder ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// `exp(-(x / s)^(2p))` with a learnable spread per layer.
    SuperGaussian { p: u32 },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub use_gabor: bool,
    pub gabor_orientations: usize,
    pub gabor_wavelengths: Vec<f64>,
    pub gabor_kernel: usize,
    pub use_zernike: bool,
    pub zernike_layers: usize,
    pub zernike_radius: usize,
    /// Channel width of the Zernike stack; defaults to the Gabor filter count.
    pub zernike_width: Option<usize>,
    /// Stride of the first Zernike layer; the rest of the stack keeps its
    /// resolution.
    pub zernike_stride: usize,
    pub trunk_widths: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub activation_spread: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            use_gabor: true,
            gabor_orientations: 4,
            gabor_wavelengths: vec![3.0, 6.0],
            gabor_kernel: gabor::DEFAULT_KERNEL_SIZE,
            use_zernike: true,
            zernike_layers: 15,
            zernike_radius: 3,
            zernike_width: None,
            zernike_stride: 1,
            trunk_widths: vec![16, 32, 64, 64],
            feature_dim: 64,
            activation: Activation::SuperGaussian { p: 4 },
            activation_spread: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn gabor_filters(&self) -> usize {
        self.gabor_orientations * self.gabor_wavelengths.len()
    }

    fn stage_input_channels(&self) -> usize {
        if self.use_gabor {
            self.gabor_filters()
        } else {
            3
        }
    }

    fn zernike_channels(&self) -> usize {
        self.zernike_width.unwrap_or_else(|| self.stage_input_channels())
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_gabor && self.gabor_filters() == 0 {
            return arg_err("gabor stage enabled without filters");
        }
        if self.gabor_kernel % 2 == 0 || self.gabor_kernel < 3 {
            return arg_err("gabor kernel size must be odd and >= 3");
        }
        if self.use_zernike && (self.zernike_layers == 0 || self.zernike_radius < 2) {
            return arg_err("zernike stack needs >= 1 layer and window radius >= 2");
        }
        if self.zernike_stride == 0 {
            return arg_err("zernike stride must be positive");
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.contains(&0) || self.feature_dim == 0 {
            return arg_err("trunk widths and feature dim must be positive");
        }
        if !(self.activation_spread > 0.0) {
            return arg_err("activation spread must be positive");
        }
        Ok(())
    }
}

/// In-disk tap positions of a basis window and the weighted planes
/// restricted to them.
fn disk_taps(basis: &ZernikeBasis) -> (Vec<usize>, Vec<Vec<f64>>) {
    let taps: Vec<usize> = (0..basis.size() * basis.size()).filter(|&t| basis.grid().mask()[t]).collect();
    let windows = basis
        .weighted_planes()
        .iter()
        .map(|plane| taps.iter().map(|&t| plane[t]).collect())
        .collect();
    (taps, windows)
}

/// Encoder structure plus the fixed Zernike windows it convolves with.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    taps: Vec<usize>,
    windows: Arc<Vec<Vec<f64>>>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let basis = ZernikeBasis::new(ORDER_CAP, 2 * config.zernike_radius.max(2) + 1)?;
        let (taps, windows) = disk_taps(&basis);
        Ok(Self { taps, windows: Arc::new(windows), config })
    }

    /// Adds freshly initialized encoder parameters to `store`.
    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let cfg = &self.config;
        let spread = Tensor::scalar(cfg.activation_spread);
        if cfg.use_gabor {
            let bank = gabor::bank(cfg.gabor_orientations, &cfg.gabor_wavelengths);
            let mut t = Tensor::zeros(&[bank.len(), PARAMS_PER_FILTER]);
            for (row, (p, s)) in t.data.chunks_exact_mut(PARAMS_PER_FILTER).zip(&bank) {
                row.copy_from_slice(&pack_filter(p, s));
            }
            store.insert("encoder.gabor.params", t);
            store.insert("encoder.gabor.spread", spread.clone());
        }
        let mut channels = cfg.stage_input_channels();
        if cfg.use_zernike {
            let width = cfg.zernike_channels();
            for l in 0..cfg.zernike_layers {
                let fan_in = channels * NUM_BASIS;
                let mut mix = glorot(rng, width, fan_in, 1.0);
                mix.shape = vec![width, fan_in];
                store.insert(format!("encoder.zernike.{l}.mix"), mix);
                store.insert(format!("encoder.zernike.{l}.bias"), Tensor::zeros(&[width]));
                store.insert(format!("encoder.zernike.{l}.spread"), spread.clone());
                channels = width;
            }
        }
        for (b, &width) in cfg.trunk_widths.iter().enumerate() {
            store.insert(format!("encoder.trunk.{b}.w"), glorot(rng, 9 * channels, width, 1.0));
            store.insert(format!("encoder.trunk.{b}.b"), Tensor::zeros(&[width]));
            store.insert(format!("encoder.trunk.{b}.spread"), spread.clone());
            channels = width;
        }
        let concat: usize = cfg.trunk_widths.iter().sum();
        store.insert("encoder.proj.w", glorot(rng, concat, cfg.feature_dim, 1.0));
        store.insert("encoder.proj.b", Tensor::zeros(&[cfg.feature_dim]));
    }

    fn activate(&self, g: &mut Graph, x: Var, spread: Var) -> Result<Var> {
        match self.config.activation {
            Activation::SuperGaussian { p } => g.super_gaussian(x, spread, p),
            Activation::Identity => Ok(x),
        }
    }

    /// Encodes an RGB image on `g`, returning an `[h, w, feature_dim]` node.
    pub fn encode_graph(&self, g: &mut Graph, params: &BoundParams, image: &Image) -> Result<Var> {
        if image.channels != 3 {
            return arg_err(format!("encoder expects RGB, got {} channels", image.channels));
        }
        let cfg = &self.config;
        let (h, w) = (image.height, image.width);
        if cfg.use_gabor && (h < cfg.gabor_kernel || w < cfg.gabor_kernel) {
            return arg_err(format!("image {h}x{w} is smaller than the gabor kernel"));
        }
        let mut x = if cfg.use_gabor {
            // Every channel sees the same kernel, so the RGB sum is convolved once.
            let gray = image.channel_sum();
            let input = g.constant(Tensor { shape: vec![h, w, 1], data: gray.data });
            let kernel = gabor_kernel_op(g, params.var("encoder.gabor.params")?, cfg.gabor_kernel)?;
            let y = conv2d_op(g, input, kernel, None, cfg.gabor_kernel, 1)?;
            self.activate(g, y, params.var("encoder.gabor.spread")?)?
        } else {
            g.constant(Tensor { shape: vec![h, w, 3], data: image.data.clone() })
        };
        if cfg.use_zernike {
            let size = 2 * cfg.zernike_radius + 1;
            for l in 0..cfg.zernike_layers {
                let kernel =
                    zernike_kernel_op(g, params.var(&format!("encoder.zernike.{l}.mix"))?, self.windows.clone())?;
                let bias = params.var(&format!("encoder.zernike.{l}.bias"))?;
                let stride = if l == 0 { cfg.zernike_stride } else { 1 };
                let y = conv_taps_op(g, x, kernel, Some(bias), size, stride, &self.taps)?;
                let y = self.activate(g, y, params.var(&format!("encoder.zernike.{l}.spread"))?)?;
                // identity skip wherever the shapes allow it
                x = if g.value(y).shape == g.value(x).shape { g.add(x, y)? } else { y };
            }
        }
        let mut taps = Vec::with_capacity(cfg.trunk_widths.len());
        for b in 0..cfg.trunk_widths.len() {
            let stride = if b == 0 { 1 } else { 2 };
            let kernel = params.var(&format!("encoder.trunk.{b}.w"))?;
            let bias = params.var(&format!("encoder.trunk.{b}.b"))?;
            let y = conv2d_op(g, x, kernel, Some(bias), 3, stride)?;
            x = self.activate(g, y, params.var(&format!("encoder.trunk.{b}.spread"))?)?;
            let shape = &g.value(x).shape;
            taps.push(if shape[0] == h && shape[1] == w { x } else { upsample_op(g, x, h, w)? });
        }
        let cat = g.concat_cols(&taps)?;
        g.linear(cat, params.var("encoder.proj.w")?, params.var("encoder.proj.b")?)
    }

    /// Inference-only encoding.
    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<FeatureVolume> {
        if !store.is_finite() {
            return Err(Error::Numeric("non-finite encoder parameters".into()));
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g, |_| false);
        let v = self.encode_graph(&mut g, &bound, image)?;
        FeatureVolume::from_tensor(g.value(v))
    }
}

/// Memoizes encoder outputs keyed by image content and encoder parameters.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: HashMap<u64, FeatureVolume>,
    encodes: usize,
}

fn content_key(image: &Image, store: &ParamStore) -> u64 {
    let mut h = DefaultHasher::new();
    (image.height, image.width, image.channels).hash(&mut h);
    image.data.iter().for_each(|v| v.to_bits().hash(&mut h));
    for (name, t) in store.iter().filter(|(n, _)| n.starts_with("encoder.")) {
        name.hash(&mut h);
        t.data.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_encode(
        &mut self,
        encoder: &Encoder,
        store: &ParamStore,
        image: &Image,
    ) -> Result<&FeatureVolume> {
        let key = content_key(image, store);
        if !self.entries.contains_key(&key) {
            let vol = encoder.encode(store, image)?;
            self.encodes += 1;
            self.entries.insert(key, vol);
        }
        Ok(&self.entries[&key])
    }

    /// Number of encoder evaluations performed so far.
    pub fn encode_count(&self) -> usize {
        self.encodes
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zernike::moments;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
        Image::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn random_layer(rng: &mut impl Rng, c_in: usize, c_out: usize) -> ZernikeConvLayer {
        let mix = glorot(rng, c_out, c_in * NUM_BASIS, 1.0);
        let bias = (0..c_out).map(|_| rng.random_range(-0.5..0.5)).collect();
        ZernikeConvLayer::new(3, mix, bias).unwrap()
    }

    /// Explicit per-pixel window extraction, moment projection and dot product.
    fn window_oracle(input: &Image, layer: &ZernikeConvLayer) -> Image {
        let size = layer.basis.size();
        let half = (size / 2) as isize;
        let (c_in, c_out) = (layer.c_in(), layer.c_out());
        let mut out = Image::zeros(input.height, input.width, c_out);
        for row in 0..input.height {
            for col in 0..input.width {
                let mut feats = Vec::with_capacity(c_in * NUM_BASIS);
                for ci in 0..c_in {
                    let mut patch = vec![0.0; size * size];
                    for i in 0..size {
                        for j in 0..size {
                            let r = reflect(row as isize + i as isize - half, input.height);
                            let c = reflect(col as isize + j as isize - half, input.width);
                            patch[i * size + j] = input.at(r, c, ci);
                        }
                    }
                    feats.extend(moments(&patch, &layer.basis).unwrap().alpha);
                }
                for o in 0..c_out {
                    let w = &layer.mix.data[o * c_in * NUM_BASIS..(o + 1) * c_in * NUM_BASIS];
                    let dot: f64 = w.iter().zip(&feats).map(|(a, b)| a * b).sum();
                    out.set(row, col, o, dot + layer.bias[o]);
                }
            }
        }
        out
    }

    #[test]
    fn zernike_conv_matches_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_image(&mut rng, 8, 8, 2);
        let layer = random_layer(&mut rng, 2, 3);
        let fast = zernike_conv(&input, &layer).unwrap();
        let slow = window_oracle(&input, &layer);
        let diff = fast.data.iter().zip(&slow.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-5, "max diff {diff}");
    }

    #[test]
    fn zernike_conv_zero_mix_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random_image(&mut rng, 9, 9, 2);
        let layer = ZernikeConvLayer::new(3, Tensor::zeros(&[2, 30]), vec![0.3, -1.0]).unwrap();
        let out = zernike_conv(&input, &layer).unwrap();
        for px in out.data.chunks_exact(2) {
            assert_eq!(px, &[0.3, -1.0]);
        }
        assert!(zernike_conv(&random_image(&mut rng, 9, 9, 3), &layer).is_err());
    }

    #[test]
    fn zernike_conv_piston_of_constant_input() {
        let mut mix = Tensor::zeros(&[1, NUM_BASIS]);
        mix.data[0] = 1.0;
        let layer = ZernikeConvLayer::new(3, mix, vec![0.0]).unwrap();
        let piston_sum: f64 = layer.basis.weighted_planes()[0].iter().sum();
        for c in [0.5, 2.0] {
            let out = zernike_conv(&Image::filled(10, 10, 1, c), &layer).unwrap();
            for v in &out.data {
                assert!((v - c * piston_sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn graph_zernike_conv_matches_depthwise_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_image(&mut rng, 11, 9, 3);
        let layer = random_layer(&mut rng, 3, 2);
        let expected = zernike_conv(&input, &layer).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor { shape: vec![11, 9, 3], data: input.data.clone() });
        let mix = g.param(layer.mix.clone());
        let bias = g.param(Tensor::from_vec(&[2], layer.bias.clone()).unwrap());
        let windows = Arc::new(layer.basis.weighted_planes());
        let k = zernike_kernel_op(&mut g, mix, windows).unwrap();
        let y = conv2d_op(&mut g, x, k, Some(bias), 7, 1).unwrap();
        let diff = g.value(y).data.iter().zip(&expected.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn disk_tap_subset_matches_full_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = random_image(&mut rng, 8, 10, 2);
        let layer = random_layer(&mut rng, 2, 3);
        let (taps, windows) = disk_taps(&layer.basis);
        assert_eq!(taps.len(), 37);
        let mut g = Graph::new();
        let x = g.constant(Tensor { shape: vec![8, 10, 2], data: input.data.clone() });
        let mix = g.param(layer.mix.clone());
        let full = zernike_kernel_op(&mut g, mix, Arc::new(layer.basis.weighted_planes())).unwrap();
        let part = zernike_kernel_op(&mut g, mix, Arc::new(windows)).unwrap();
        let a = conv2d_op(&mut g, x, full, None, 7, 2).unwrap();
        let b = conv_taps_op(&mut g, x, part, None, 7, 2, &taps).unwrap();
        let diff = g.value(a).data.iter().zip(&g.value(b).data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn strided_conv_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[9, 8, 2], 1.0));
        let k = g.param(Tensor::full(&[18, 3], 0.5));
        let y = conv2d_op(&mut g, x, k, None, 3, 2).unwrap();
        assert_eq!(g.value(y).shape, vec![5, 4, 3]);
        assert!(g.value(y).data.iter().all(|&v| (v - 9.0).abs() < 1e-12));
        let bad = g.param(Tensor::full(&[10, 3], 0.5));
        assert!(conv2d_op(&mut g, x, bad, None, 3, 1).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let vol = FeatureVolume {
            height: 2,
            width: 3,
            dim: 2,
            data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
        };
        assert_eq!(sample_bilinear(&vol, 2.0, 1.0), vec![10.0, 11.0]);
        assert_eq!(sample_bilinear(&vol, 1.0, 0.0), vec![2.0, 3.0]);
        assert_eq!(sample_bilinear(&vol, 0.5, 0.5), vec![4.0, 5.0]);
        assert_eq!(sample_bilinear(&vol, -5.0, 0.3), sample_bilinear(&vol, 0.0, 0.3));
        assert_eq!(sample_bilinear(&vol, 9.0, 7.0), vec![10.0, 11.0]);
    }

    #[test]
    fn feature_volume_round_trip() {
        let vol = FeatureVolume { height: 2, width: 2, dim: 3, data: (0..12).map(|v| v as f64 * 0.25).collect() };
        let mut buf = Vec::new();
        vol.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFV1");
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(FeatureVolume::read_from(&mut buf.as_slice()).unwrap(), vol);
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            gabor_orientations: 2,
            gabor_wavelengths: vec![4.0],
            gabor_kernel: 5,
            zernike_layers: 2,
            trunk_widths: vec![4, 4, 6, 6],
            feature_dim: 8,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let enc = Encoder::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        enc.init_params(&mut rng, &mut store);
        let img = random_image(&mut rng, 12, 10, 3);
        let a = enc.encode(&store, &img).unwrap();
        let b = enc.encode(&store, &img).unwrap();
        assert_eq!((a.height, a.width, a.dim), (12, 10, 8));
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_rejects_non_finite_params() {
        let enc = Encoder::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        enc.init_params(&mut rng, &mut store);
        store.get_mut("encoder.proj.b").unwrap().data[0] = f64::NAN;
        assert!(enc.encode(&store, &random_image(&mut rng, 12, 12, 3)).is_err());
    }

    #[test]
    fn encoder_without_nonlinearities_is_linear() {
        let cfg = EncoderConfig { activation: Activation::Identity, ..small_config() };
        let enc = Encoder::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        enc.init_params(&mut rng, &mut store);
        let (p, q) = (random_image(&mut rng, 12, 12, 3), random_image(&mut rng, 12, 12, 3));
        let (a, b) = (0.6, -1.7);
        let mix = Image { data: p.data.iter().zip(&q.data).map(|(x, y)| a * x + b * y).collect(), ..p.clone() };
        let fm = enc.encode(&store, &mix).unwrap();
        let fp = enc.encode(&store, &p).unwrap();
        let fq = enc.encode(&store, &q).unwrap();
        for i in 0..fm.data.len() {
            assert!((fm.data[i] - (a * fp.data[i] + b * fq.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn cache_reuses_unchanged_inputs() {
        let enc = Encoder::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        enc.init_params(&mut rng, &mut store);
        let img = random_image(&mut rng, 12, 12, 3);
        let mut cache = FeatureCache::new();
        let first = cache.get_or_encode(&enc, &store, &img).unwrap().clone();
        let second = cache.get_or_encode(&enc, &store, &img).unwrap().clone();
        assert_eq!(cache.encode_count(), 1);
        assert_eq!(first, second);
        store.get_mut("encoder.proj.b").unwrap().data[0] += 1.0;
        cache.get_or_encode(&enc, &store, &img).unwrap();
        assert_eq!(cache.encode_count(), 2);
    }
}
