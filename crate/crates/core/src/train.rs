//! Adam, the ray-batch training loop, and checkpoints.
//!
//! A checkpoint is an `MFP1` file holding the model tensors plus
//! `meta.config` (the model configuration as JSON bytes), `adam.step`, and
//! `adam.m.<name>` / `adam.v.<name>` for every parameter.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoder::FeatureCache;
use crate::error::{arg_err, Error, Result};
use crate::image::Image;
use crate::metrics::{ImageMetrics, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::renderer::{generate_ray, stratified_samples, Ray, SampleSet};
use crate::scene::Scene;
use crate::tensor::Tensor;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(&t.shape)).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Applies one update. `None` entries (frozen parameters) are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return arg_err("optimizer state does not match the parameter store");
        }
        for ((name, t), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape != t.shape {
                    return arg_err(format!("gradient shape {:?} for `{name}` {:?}", g.shape, t.shape));
                }
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for `{name}` at step {}", self.step + 1)));
                }
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for j in 0..g.data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g.data[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                p.data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
    }
}

/// Parameter groups that can be held fixed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub gabor: bool,
    pub zernike: bool,
    pub trunk: bool,
    pub field: bool,
}

impl FreezeFlags {
    pub fn is_frozen(&self, name: &str) -> bool {
        (self.gabor && name.starts_with("encoder.gabor."))
            || (self.zernike && name.starts_with("encoder.zernike."))
            || (self.trunk && (name.starts_with("encoder.trunk.") || name.starts_with("encoder.proj.")))
            || (self.field && name.starts_with("field."))
    }

    fn encoder_frozen(&self) -> bool {
        self.gabor && self.zernike && self.trunk
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr: f64,
    pub seed: u64,
    /// Print the running loss every this many iterations (0: never).
    pub log_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub freeze: FreezeFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch_rays: 512,
            lr: 1e-4,
            seed: 0,
            log_every: 0,
            checkpoint: None,
            freeze: FreezeFlags::default(),
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub adam: Adam,
    pub loss_trace: Vec<f64>,
}

/// Trains on every view of `scene`, which also supplies the conditioning
/// views. Parameters and optimizer state are rounded to `f32` after each step.
pub fn train_loop(model: &Model, mut params: ParamStore, scene: &Scene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if scene.is_empty() {
        return arg_err("training needs at least one view");
    }
    if cfg.batch_rays == 0 || !(cfg.lr > 0.0) {
        return arg_err("batch size and learning rate must be positive");
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params, cfg.lr);
    let mut cache = FeatureCache::new();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let pixels: Vec<usize> = scene.cameras.iter().map(|c| c.width * c.height).collect();
    let total: usize = pixels.iter().sum();
    for it in 0..cfg.iterations {
        let mut rays = Vec::with_capacity(cfg.batch_rays);
        let mut samples = Vec::with_capacity(cfg.batch_rays);
        let mut target = Vec::with_capacity(3 * cfg.batch_rays);
        for _ in 0..cfg.batch_rays {
            let (view, px) = locate(&pixels, rng.random_range(0..total));
            let cam = &scene.cameras[view];
            let (row, col) = (px / cam.width, px % cam.width);
            let ray = generate_ray(cam, col as f64, row as f64, scene.near, scene.far)?;
            samples.push(stratified_samples(&ray, model.config.train_samples, Some(&mut rng))?);
            rays.push(ray);
            target.extend_from_slice(scene.images[view].pixel(row, col));
        }
        let loss = step_loss(model, &mut params, &mut adam, scene, &rays, &samples, target, cfg, &mut cache)?;
        trace.push(loss);
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            eprintln!("iter {:>6}  loss {loss:.6}", it + 1);
        }
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, &model.config, &params, &adam)?;
    }
    Ok(TrainOutcome { params, adam, loss_trace: trace })
}

fn locate(pixels: &[usize], mut k: usize) -> (usize, usize) {
    for (v, &n) in pixels.iter().enumerate() {
        if k < n {
            return (v, k);
        }
        k -= n;
    }
    unreachable!("index drawn below the pixel total")
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    model: &Model,
    params: &mut ParamStore,
    adam: &mut Adam,
    scene: &Scene,
    rays: &[Ray],
    samples: &[SampleSet],
    target: Vec<f64>,
    cfg: &TrainConfig,
    cache: &mut FeatureCache,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, |n| !cfg.freeze.is_frozen(n));
    let sources = if cfg.freeze.encoder_frozen() {
        let volumes = scene
            .images
            .iter()
            .map(|img| cache.get_or_encode(&model.encoder, params, img).cloned())
            .collect::<Result<Vec<_>>>()?;
        Model::constant_sources(&mut g, &scene.cameras, &volumes)
    } else {
        model.encode_sources(&mut g, &bound, &scene.cameras, &scene.images)?
    };
    let pred = model.render_rays_graph(&mut g, &bound, &sources, scene.world_scale, rays, samples)?;
    let target = g.constant(Tensor { shape: vec![rays.len(), 3], data: target });
    let loss = g.mse_rows(pred, target)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value} at step {}", adam.step + 1)));
    }
    let grads = g.backward(loss)?;
    let per_param: Vec<Option<Tensor>> = params
        .names()
        .iter()
        .zip(bound.vars())
        .map(|(n, &v)| (!cfg.freeze.is_frozen(n)).then(|| grads.wrt(v)))
        .collect();
    adam.step(params, &per_param)?;
    params.round_to_f32();
    adam.round_to_f32();
    Ok(value)
}

/// `iteration,loss` rows, iterations counted from 1.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in trace.iter().enumerate() {
        s.push_str(&format!("{},{l:.9e}\n", i + 1));
    }
    s
}

pub fn write_loss_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(loss_trace_csv(trace).as_bytes())?;
    Ok(())
}

const META_CONFIG: &str = "meta.config";
const ADAM_STEP: &str = "adam.step";

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ParamStore, adam: &Adam) -> Result<()> {
    let mut out = params.clone();
    let json = serde_json::to_vec(config)?;
    out.insert(META_CONFIG, Tensor { shape: vec![json.len()], data: json.iter().map(|&b| f64::from(b)).collect() });
    if adam.step >= 1 << 24 {
        return arg_err("optimizer step count exceeds the f32-exact range");
    }
    out.insert(ADAM_STEP, Tensor::scalar(adam.step as f64));
    for ((name, _), (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
        out.insert(format!("adam.m.{name}"), m.clone());
        out.insert(format!("adam.v.{name}"), v.clone());
    }
    out.save(path)
}

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: Adam,
}

pub fn load_checkpoint(path: &Path, lr: f64) -> Result<Checkpoint> {
    let all = ParamStore::load(path)?;
    let bytes: Vec<u8> = all
        .get(META_CONFIG)
        .map_err(|_| Error::Format { what: "checkpoint", reason: "missing model configuration".into() })?
        .data
        .iter()
        .map(|&b| b as u8)
        .collect();
    let config: ModelConfig = serde_json::from_slice(&bytes)?;
    let mut params = ParamStore::new();
    for (name, t) in all.iter() {
        if name != META_CONFIG && name != ADAM_STEP && !name.starts_with("adam.") {
            params.insert(name, t.clone());
        }
    }
    let mut adam = Adam::new(&params, lr);
    if let Ok(step) = all.get(ADAM_STEP) {
        adam.step = step.item() as u64;
        for (i, name) in params.names().iter().enumerate() {
            if let (Ok(m), Ok(v)) = (all.get(&format!("adam.m.{name}")), all.get(&format!("adam.v.{name}"))) {
                adam.m[i] = m.clone();
                adam.v[i] = v.clone();
            }
        }
    }
    Ok(Checkpoint { config, params, adam })
}

/// Renders each target view of `targets` from the views of `sources` and
/// scores it against the stored image. `ids` label the rows.
pub fn evaluate_views(
    model: &Model,
    params: &ParamStore,
    sources: &Scene,
    targets: &Scene,
    ids: &[usize],
    scene_name: &str,
) -> Result<(MetricReport, Vec<Image>)> {
    if ids.len() != targets.len() {
        return arg_err("need one id per target view");
    }
    let mut cache = FeatureCache::new();
    let mut report = MetricReport::default();
    let mut renders = Vec::with_capacity(targets.len());
    for ((cam, gt), &id) in targets.cameras.iter().zip(&targets.images).zip(ids) {
        let img = model.render_view(params, sources, cam, &mut cache)?;
        report.push(ImageMetrics::measure(scene_name, id, &img, gt)?);
        renders.push(img);
    }
    Ok((report, renders))
}
