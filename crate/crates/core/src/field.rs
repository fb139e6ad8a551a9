//! Pixel-conditioned radiance field.
//!
//! Each input view contributes one residual MLP pass (shared weights) over its
//! view-frame position, direction and sampled image feature. The per-view
//! vectors are averaged, then a second residual MLP and two heads produce
//! color (logistic) and density (softplus).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::Vec3;
use crate::error::{arg_err, Result};
use crate::params::{glorot, BoundParams, ParamStore};
use crate::tensor::Tensor;

/// `(sin(2^0 p), cos(2^0 p), .., sin(2^(L-1) p), cos(2^(L-1) p) [, p])` for
/// each component of `p`, concatenated in component order.
pub fn positional_encoding(p: &[f64], num_freqs: usize, include_raw: bool) -> Vec<f64> {
    let per = encoded_len(1, num_freqs, include_raw);
    let mut out = Vec::with_capacity(per * p.len());
    for &v in p {
        let mut f = 1.0;
        for _ in 0..num_freqs {
            out.push((f * v).sin());
            out.push((f * v).cos());
            f *= 2.0;
        }
        if include_raw {
            out.push(v);
        }
    }
    out
}

pub fn encoded_len(components: usize, num_freqs: usize, include_raw: bool) -> usize {
    components * (2 * num_freqs + usize::from(include_raw))
}

/// Row-wise positional encoding of an `[n, k]` matrix, giving
/// `[n, k * (2L + raw)]`.
pub fn positional_encoding_op(g: &mut Graph, x: Var, num_freqs: usize, include_raw: bool) -> Result<Var> {
    let vx = g.value(x);
    if vx.rank() != 2 {
        return arg_err("positional encoding expects an [n, k] matrix");
    }
    let (n, k) = (vx.shape[0], vx.shape[1]);
    let per = encoded_len(1, num_freqs, include_raw);
    let data: Vec<f64> = vx
        .data
        .chunks_exact(k)
        .flat_map(|row| positional_encoding(row, num_freqs, include_raw))
        .collect();
    Ok(g.push(
        Tensor { shape: vec![n, k * per], data },
        &[x],
        Box::new(move |c| {
            let mut dx = Tensor::zeros(&[n, k]);
            for ((gx, enc), grad) in dx
                .data
                .iter_mut()
                .zip(c.output.data.chunks_exact(per))
                .zip(c.grad.data.chunks_exact(per))
            {
                let mut f = 1.0;
                let mut acc = 0.0;
                for j in 0..num_freqs {
                    let (s, co) = (enc[2 * j], enc[2 * j + 1]);
                    acc += grad[2 * j] * f * co - grad[2 * j + 1] * f * s;
                    f *= 2.0;
                }
                if include_raw {
                    acc += grad[per - 1];
                }
                *gx = acc;
            }
            vec![Some(dx)]
        }),
    ))
}

/// `exp(-(t / spread)^(2p))`.
pub fn super_gaussian(t: f64, spread: f64, p: u32) -> f64 {
    let u = t / spread;
    (-crate::autodiff::odd_power(u, p) * u).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub width: usize,
    pub f1_blocks: usize,
    pub f2_blocks: usize,
    pub num_freqs: usize,
    pub include_raw: bool,
    /// Positionally encode view directions too (raw otherwise).
    pub encode_dir: bool,
    pub dir_freqs: usize,
    pub feature_dim: usize,
    pub activation_p: u32,
    pub activation_spread: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width: 128,
            f1_blocks: 3,
            f2_blocks: 2,
            num_freqs: 6,
            include_raw: true,
            encode_dir: false,
            dir_freqs: 4,
            feature_dim: 64,
            activation_p: 4,
            activation_spread: 1.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.f1_blocks == 0 || self.num_freqs == 0 || self.feature_dim == 0 {
            return arg_err("field width, f1 depth, frequency count and feature dim must be positive");
        }
        if self.activation_p == 0 || !(self.activation_spread > 0.0) {
            return arg_err("super-gaussian needs p >= 1 and a positive spread");
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        let dir = if self.encode_dir { encoded_len(3, self.dir_freqs, self.include_raw) } else { 3 };
        encoded_len(3, self.num_freqs, self.include_raw) + dir
    }

    /// Adds freshly initialized field parameters to `store`.
    pub fn init_params(&self, rng: &mut impl Rng, store: &mut ParamStore) {
        let w = self.width;
        store.insert("field.in.w", glorot(rng, self.input_len(), w, 1.0));
        store.insert("field.in.b", Tensor::zeros(&[w]));
        for k in 0..self.f1_blocks {
            store.insert(format!("field.f1.{k}.feat.w"), glorot(rng, self.feature_dim, w, 0.5));
            store.insert(format!("field.f1.{k}.feat.b"), Tensor::zeros(&[w]));
            self.init_block(rng, store, &format!("field.f1.{k}"));
        }
        for k in 0..self.f2_blocks {
            self.init_block(rng, store, &format!("field.f2.{k}"));
        }
        store.insert("field.head.w", glorot(rng, w, 4, 1.0));
        store.insert("field.head.b", Tensor::zeros(&[4]));
    }

    fn init_block(&self, rng: &mut impl Rng, store: &mut ParamStore, prefix: &str) {
        let w = self.width;
        store.insert(format!("{prefix}.a.w"), glorot(rng, w, w, 1.0));
        store.insert(format!("{prefix}.a.b"), Tensor::zeros(&[w]));
        store.insert(format!("{prefix}.b.w"), glorot(rng, w, w, 0.5));
        store.insert(format!("{prefix}.b.b"), Tensor::zeros(&[w]));
        store.insert(format!("{prefix}.spread"), Tensor::scalar(self.activation_spread));
    }
}

/// One input view's contribution to a batch of field queries.
pub struct ViewInputs {
    pub view: usize,
    /// `[n, 3]` positions in the view frame.
    pub x_view: Var,
    /// `[n, 3]` unit directions in the view frame.
    pub d_view: Var,
    /// `[n, feature_dim]` sampled image features.
    pub feature: Var,
}

fn residual_block(
    g: &mut Graph,
    params: &BoundParams,
    prefix: &str,
    h: Var,
    p: u32,
) -> Result<Var> {
    let a = g.linear(h, params.var(&format!("{prefix}.a.w"))?, params.var(&format!("{prefix}.a.b"))?)?;
    let s = g.super_gaussian(a, params.var(&format!("{prefix}.spread"))?, p)?;
    let b = g.linear(s, params.var(&format!("{prefix}.b.w"))?, params.var(&format!("{prefix}.b.b"))?)?;
    g.add(h, b)
}

/// Batched field evaluation. Views are pooled in ascending `view` order.
/// Returns `([n, 3] color, [n, 1] density)`.
pub fn field_forward(
    g: &mut Graph,
    params: &BoundParams,
    cfg: &FieldConfig,
    views: &[ViewInputs],
) -> Result<(Var, Var)> {
    if views.is_empty() {
        return arg_err("field query needs at least one view");
    }
    let mut order: Vec<&ViewInputs> = views.iter().collect();
    order.sort_by_key(|v| v.view);
    let mut pooled = Vec::with_capacity(order.len());
    for v in order {
        let px = positional_encoding_op(g, v.x_view, cfg.num_freqs, cfg.include_raw)?;
        let pd = if cfg.encode_dir {
            positional_encoding_op(g, v.d_view, cfg.dir_freqs, cfg.include_raw)?
        } else {
            v.d_view
        };
        let input = g.concat_cols(&[px, pd])?;
        let mut h = g.linear(input, params.var("field.in.w")?, params.var("field.in.b")?)?;
        for k in 0..cfg.f1_blocks {
            let f = g.linear(
                v.feature,
                params.var(&format!("field.f1.{k}.feat.w"))?,
                params.var(&format!("field.f1.{k}.feat.b"))?,
            )?;
            h = g.add(h, f)?;
            h = residual_block(g, params, &format!("field.f1.{k}"), h, cfg.activation_p)?;
        }
        pooled.push(h);
    }
    let mut h = if pooled.len() == 1 { pooled[0] } else { g.mean(&pooled)? };
    for k in 0..cfg.f2_blocks {
        h = residual_block(g, params, &format!("field.f2.{k}"), h, cfg.activation_p)?;
    }
    let out = g.linear(h, params.var("field.head.w")?, params.var("field.head.b")?)?;
    let rgb = g.slice_cols(out, 0, 3)?;
    let rgb = g.sigmoid(rgb);
    let density = g.slice_cols(out, 3, 1)?;
    let density = g.softplus(density);
    Ok((rgb, density))
}

/// A view's frame-local inputs for a single query point.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEntry {
    pub view: usize,
    pub x: Vec3,
    pub d: Vec3,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldQuery {
    pub x: Vec3,
    pub d: Vec3,
    pub per_view: Vec<ViewEntry>,
}

/// Evaluates the field at one point. Returns `(rgb, density)`.
pub fn field_query(q: &FieldQuery, store: &ParamStore, cfg: &FieldConfig) -> Result<([f64; 3], f64)> {
    if q.per_view.is_empty() {
        return arg_err("field query needs at least one view");
    }
    let n = crate::camera::norm(q.d);
    if (n - 1.0).abs() > 1e-6 {
        return arg_err(format!("query direction must be unit length, got norm {n}"));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, |_| false);
    let mut views = Vec::with_capacity(q.per_view.len());
    for e in &q.per_view {
        if e.feature.len() != cfg.feature_dim {
            return arg_err(format!("feature has {} values, expected {}", e.feature.len(), cfg.feature_dim));
        }
        views.push(ViewInputs {
            view: e.view,
            x_view: g.constant(Tensor { shape: vec![1, 3], data: e.x.to_vec() }),
            d_view: g.constant(Tensor { shape: vec![1, 3], data: e.d.to_vec() }),
            feature: g.constant(Tensor { shape: vec![1, cfg.feature_dim], data: e.feature.clone() }),
        });
    }
    let (rgb, density) = field_forward(&mut g, &bound, cfg, &views)?;
    let c = &g.value(rgb).data;
    Ok(([c[0], c[1], c[2]], g.value(density).item()))
}
