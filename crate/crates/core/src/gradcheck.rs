//! Central finite-difference checks of every differentiable operation.
//!
//! Each check reduces an op's output to a scalar with fixed random weights,
//! then compares the reverse-mode gradient against `(L(x + h) - L(x - h)) / 2h`
//! on a random subset of input coordinates.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::encoder::{
    conv2d_op, conv_taps_op, gabor_kernel_op, sample_features_op, upsample_op, zernike_kernel_op,
};
use crate::error::{arg_err, Result};
use crate::field::{field_forward, positional_encoding_op, FieldConfig, ViewInputs};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::renderer::{composite_op, generate_ray, stratified_samples};
use crate::scene::{synth_scene, SynthSpec};
use crate::tensor::Tensor;
use crate::zernike::ZernikeBasis;

/// Error limit for ops that are linear in each input coordinate.
pub const LINEAR_LIMIT: f64 = 1e-7;
/// Error limit for everything else.
pub const NONLINEAR_LIMIT: f64 = 1e-4;
/// Central-difference step for the nonlinear class, scaled by max(1, |x|).
pub const NONLINEAR_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub limit: f64,
    pub coords: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.limit
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Places `inputs` on a graph and returns `(output, input vars)`.
pub trait Builder: Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)> {}
impl<F: Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)>> Builder for F {}

fn params_of(g: &mut Graph, inputs: &[Tensor]) -> Vec<Var> {
    inputs.iter().map(|t| g.param(t.clone())).collect()
}

fn weighted_loss(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Checks `build` at `inputs` on up to `per_input` coordinates per tensor,
/// with steps of `step * max(1, |x|)`.
pub fn check(
    name: &str,
    inputs: &[Tensor],
    limit: f64,
    step: f64,
    per_input: usize,
    seed: u64,
    build: impl Builder,
) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let (y, vars) = build(&mut g, inputs)?;
    if vars.len() != inputs.len() {
        return arg_err(format!("{name}: builder returned {} vars for {} inputs", vars.len(), inputs.len()));
    }
    let shape = g.value(y).shape.clone();
    let weights = Tensor::from_vec(&shape, (0..g.value(y).numel()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let loss = weighted_loss(&mut g, y, &weights)?;
    let grads = g.backward(loss)?;

    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let (y, _) = build(&mut g, ts)?;
        let l = weighted_loss(&mut g, y, &weights)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = inputs[i].numel();
        for j in sample(&mut rng, n, per_input.min(n)) {
            let x0 = inputs[i].data[j];
            let h = step * x0.abs().max(1.0);
            probe[i].data[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data[j] = x0;
            worst = worst.max(rel_err(analytic.data[j], (up - down) / (2.0 * h)));
            coords += 1;
        }
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: worst, limit, coords })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(lo..hi)).collect() }
}

fn linear_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<CheckResult>> {
    let (l, h, per) = (LINEAR_LIMIT, 1e-3, 24);
    let mut out = Vec::new();
    let ab = [random(rng, &[5, 4], -1.0, 1.0), random(rng, &[5, 4], -1.0, 1.0)];
    out.push(check("add", &ab, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.add(v[0], v[1])?, v))
    })?);
    out.push(check("sub", &ab, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.sub(v[0], v[1])?, v))
    })?);
    out.push(check("mul", &ab, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.mul(v[0], v[1])?, v))
    })?);
    out.push(check("scale", &ab[..1], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.scale(v[0], -1.7), v))
    })?);
    let mm = [random(rng, &[2, 3, 4], -1.0, 1.0), random(rng, &[4, 5], -1.0, 1.0), random(rng, &[5], -1.0, 1.0)];
    out.push(check("matmul", &mm[..2], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.matmul(v[0], v[1])?, v))
    })?);
    out.push(check("linear", &mm, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.linear(v[0], v[1], v[2])?, v))
    })?);
    let cb = [random(rng, &[4, 3], -1.0, 1.0), random(rng, &[4, 2], -1.0, 1.0), random(rng, &[3], -1.0, 1.0)];
    out.push(check("add_bias", &[cb[0].clone(), cb[2].clone()], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.add_bias(v[0], v[1])?, v))
    })?);
    out.push(check("concat_cols", &cb[..2], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.concat_cols(&v)?, v))
    })?);
    out.push(check("slice_cols", &cb[..1], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.slice_cols(v[0], 1, 2)?, v))
    })?);
    let three = [random(rng, &[3, 2], -1.0, 1.0), random(rng, &[3, 2], -1.0, 1.0), random(rng, &[3, 2], -1.0, 1.0)];
    out.push(check("mean", &three, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.mean(&v)?, v))
    })?);
    out.push(check("sum", &three[..1], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.sum(v[0]), v))
    })?);
    out.push(check("mse_rows", &three[..2], l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.mse_rows(v[0], v[1])?, v))
    })?);
    let vol = [random(rng, &[5, 6, 3], -1.0, 1.0)];
    out.push(check("upsample", &vol, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((upsample_op(g, v[0], 9, 13)?, v))
    })?);
    let points: Vec<(f64, f64)> = (0..7).map(|_| (rng.random_range(-1.0..7.0), rng.random_range(-1.0..6.0))).collect();
    out.push(check("sample_features", &vol, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((sample_features_op(g, v[0], &points)?, v))
    })?);
    let conv = [random(rng, &[7, 6, 2], -1.0, 1.0), random(rng, &[18, 3], -1.0, 1.0), random(rng, &[3], -1.0, 1.0)];
    for stride in [1, 2] {
        out.push(check(&format!("conv2d_stride{stride}"), &conv, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
            let v = params_of(g, t);
            Ok((conv2d_op(g, v[0], v[1], Some(v[2]), 3, stride)?, v))
        })?);
    }
    let taps = vec![1, 3, 4, 5, 7];
    let tapped = [conv[0].clone(), random(rng, &[10, 3], -1.0, 1.0)];
    out.push(check("conv_taps", &tapped, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((conv_taps_op(g, v[0], v[1], None, 3, 1, &taps)?, v))
    })?);
    let windows = Arc::new(ZernikeBasis::new(4, 5)?.weighted_planes());
    let mix = [random(rng, &[3, 2 * 15], -1.0, 1.0)];
    out.push(check("zernike_kernel", &mix, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((zernike_kernel_op(g, v[0], windows.clone())?, v))
    })?);
    Ok(out)
}

fn nonlinear_checks(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<CheckResult>> {
    let (l, h, per) = (NONLINEAR_LIMIT, NONLINEAR_STEP, 24);
    let mut out = Vec::new();
    let x = [random(rng, &[6, 3], -3.0, 3.0)];
    out.push(check("sigmoid", &x, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.sigmoid(v[0]), v))
    })?);
    out.push(check("softplus", &x, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.softplus(v[0]), v))
    })?);
    let sg = [random(rng, &[6, 3], -1.2, 1.2), Tensor::scalar(0.9)];
    out.push(check("super_gaussian", &sg, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((g.super_gaussian(v[0], v[1], 4)?, v))
    })?);
    let pe = [random(rng, &[4, 3], -1.5, 1.5)];
    out.push(check("positional_encoding", &pe, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((positional_encoding_op(g, v[0], 6, true)?, v))
    })?);
    let samples = 6;
    let comp = [random(rng, &[3 * samples, 3], 0.0, 1.0), random(rng, &[3 * samples, 1], 0.0, 3.0)];
    let delta = Arc::new((0..3 * samples).map(|_| rng.random_range(0.05..0.4)).collect::<Vec<f64>>());
    out.push(check("composite", &comp, l, h, per, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((composite_op(g, v[0], v[1], delta.clone(), samples)?, v))
    })?);
    let gabor = [Tensor::from_vec(
        &[2, 10],
        vec![4.0, 0.3, 0.2, 1.8, 0.6, 1.1, 1.3, 2.2, 0.2, 2.0, 6.0, 1.1, -0.4, 2.5, 0.8, 0.9, 1.0, 2.0, 0.1, 1.0],
    )?];
    out.push(check("gabor_kernel", &gabor, l, h, 20, seed, |g: &mut Graph, t: &[Tensor]| {
        let v = params_of(g, t);
        Ok((gabor_kernel_op(g, v[0], 5)?, v))
    })?);
    out.push(field_check(rng, seed)?);
    out.push(ray_loss_check(seed)?);
    Ok(out)
}

fn store_with(template: &ParamStore, tensors: &[Tensor]) -> ParamStore {
    let mut store = template.clone();
    store.tensors_mut().clone_from_slice(tensors);
    store
}

fn field_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<CheckResult> {
    let cfg = FieldConfig { width: 8, f1_blocks: 2, f2_blocks: 1, num_freqs: 3, feature_dim: 4, ..FieldConfig::default() };
    let mut template = ParamStore::new();
    cfg.init_params(rng, &mut template);
    let n = 3;
    let views: Vec<[Tensor; 3]> = (0..2)
        .map(|_| {
            let d = random(rng, &[n, 3], -1.0, 1.0);
            let mut unit = d.clone();
            for r in unit.data.chunks_exact_mut(3) {
                let len = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter_mut().for_each(|v| *v /= len);
            }
            [random(rng, &[n, 3], -1.5, 1.5), unit, random(rng, &[n, cfg.feature_dim], -1.0, 1.0)]
        })
        .collect();
    let mut inputs = template.tensors().to_vec();
    for v in &views {
        inputs.push(v[2].clone());
    }
    let np = template.len();
    check("field", &inputs, NONLINEAR_LIMIT, NONLINEAR_STEP, 4, seed, |g: &mut Graph, t: &[Tensor]| {
        let store = store_with(&template, &t[..np]);
        let bound = store.bind(g, |_| true);
        let mut vars = bound.vars().to_vec();
        let mut inputs = Vec::new();
        for (i, v) in views.iter().enumerate() {
            let feature = g.param(t[np + i].clone());
            vars.push(feature);
            inputs.push(ViewInputs {
                view: i,
                x_view: g.constant(v[0].clone()),
                d_view: g.constant(v[1].clone()),
                feature,
            });
        }
        let (rgb, density) = field_forward(g, &bound, &cfg, &inputs)?;
        Ok((g.concat_cols(&[rgb, density])?, vars))
    })
}

/// A tiny model whose full loss (encoder, field, compositing, MSE) is checked
/// with respect to every parameter tensor.
fn ray_loss_check(seed: u64) -> Result<CheckResult> {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.gabor_orientations = 2;
    cfg.encoder.gabor_wavelengths = vec![4.0];
    cfg.encoder.gabor_kernel = 5;
    cfg.encoder.zernike_layers = 2;
    cfg.encoder.zernike_width = Some(2);
    cfg.encoder.trunk_widths = vec![3, 3, 4, 4];
    cfg.encoder.feature_dim = 4;
    cfg.field = FieldConfig { width: 8, f1_blocks: 1, f2_blocks: 1, num_freqs: 2, feature_dim: 4, ..FieldConfig::default() };
    cfg.train_samples = 6;
    let model = Model::new(cfg)?;
    let template = model.init_params(seed);
    let (scene, _) = synth_scene(&SynthSpec { n_views: 2, size: 12, seed, ..SynthSpec::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rays = Vec::new();
    let mut target = Vec::new();
    for _ in 0..3 {
        let (row, col) = (rng.random_range(3..9), rng.random_range(3..9));
        rays.push(generate_ray(&scene.cameras[1], col as f64, row as f64, scene.near, scene.far)?);
        target.extend_from_slice(scene.images[1].pixel(row, col));
    }
    let samples = rays.iter().map(|r| stratified_samples(r, 6, None)).collect::<Result<Vec<_>>>()?;
    let target = Tensor::from_vec(&[rays.len(), 3], target)?;
    check("ray_loss", template.tensors(), NONLINEAR_LIMIT, NONLINEAR_STEP, 2, seed, |g: &mut Graph, t: &[Tensor]| {
        let store = store_with(&template, t);
        let bound = store.bind(g, |_| true);
        let sources = model.encode_sources(g, &bound, &scene.cameras, &scene.images)?;
        let pred = model.render_rays_graph(g, &bound, &sources, scene.world_scale, &rays, &samples)?;
        let tv = g.constant(target.clone());
        Ok((g.mse_rows(pred, tv)?, bound.vars().to_vec()))
    })
}

/// Runs every check; the caller decides what to do with failures.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = linear_checks(&mut rng, seed)?;
    out.extend(nonlinear_checks(&mut rng, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        let x = [Tensor::from_vec(&[3], vec![0.3, -0.2, 0.9]).unwrap()];
        // forward squares, backward claims the identity
        let r = check("bad", &x, NONLINEAR_LIMIT, 1e-5, 3, 1, |g: &mut Graph, t: &[Tensor]| {
            let v = params_of(g, t);
            Ok((g.map(v[0], |x| x * x, |_, _| 1.0), v))
        })
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn whole_suite_passes_for_other_seeds() {
        for seed in [3, 11] {
            for r in run_suite(seed).unwrap() {
                assert!(r.passed(), "seed {seed}: {r:?}");
            }
        }
    }
}
