//! Encoder + field + compositor wired together for batches of rays.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::camera::Camera;
use crate::encoder::{sample_features_op, Encoder, EncoderConfig, FeatureCache, FeatureVolume};
use crate::error::{arg_err, Result};
use crate::field::{field_forward, FieldConfig, ViewInputs};
use crate::image::Image;
use crate::params::{BoundParams, ParamStore};
use crate::renderer::{composite_op, render_image, stratified_samples, Ray, RayRenderer, SampleSet};
use crate::scene::Scene;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub field: FieldConfig,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            field: FieldConfig::default(),
            train_samples: 64,
            eval_samples: 128,
        }
    }
}

impl ModelConfig {
    /// A configuration small enough to train in minutes on one core.
    pub fn desk() -> Self {
        let feature_dim = 16;
        Self {
            encoder: EncoderConfig {
                zernike_width: Some(4),
                zernike_stride: 2,
                trunk_widths: vec![8, 8, 16, 16],
                feature_dim,
                ..EncoderConfig::default()
            },
            field: FieldConfig { width: 32, feature_dim, ..FieldConfig::default() },
            train_samples: 32,
            eval_samples: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.field.validate()?;
        if self.encoder.feature_dim != self.field.feature_dim {
            return arg_err("encoder and field disagree on the feature width");
        }
        if self.train_samples < 2 || self.eval_samples < 2 {
            return arg_err("need at least 2 samples per ray");
        }
        Ok(())
    }
}

/// An input view as seen by the field: its camera and encoded features.
#[derive(Clone, Copy)]
pub struct SourceView {
    pub camera: Camera,
    /// `[h, w, feature_dim]` node.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { encoder: Encoder::new(config.encoder.clone())?, config })
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut rng, &mut store);
        self.config.field.init_params(&mut rng, &mut store);
        store.round_to_f32();
        store
    }

    /// Encodes every source image on `g`.
    pub fn encode_sources(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        cameras: &[Camera],
        images: &[Image],
    ) -> Result<Vec<SourceView>> {
        cameras
            .iter()
            .zip(images)
            .map(|(cam, img)| Ok(SourceView { camera: *cam, features: self.encoder.encode_graph(g, params, img)? }))
            .collect()
    }

    /// Places cached feature volumes on `g` as constants.
    pub fn constant_sources(g: &mut Graph, cameras: &[Camera], volumes: &[FeatureVolume]) -> Vec<SourceView> {
        cameras
            .iter()
            .zip(volumes)
            .map(|(cam, vol)| SourceView { camera: *cam, features: g.constant(vol.to_tensor()) })
            .collect()
    }

    /// Colors `rays` (one [`SampleSet`] each, all of equal length); returns
    /// an `[rays, 3]` node.
    pub fn render_rays_graph(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        sources: &[SourceView],
        world_scale: f64,
        rays: &[Ray],
        samples: &[SampleSet],
    ) -> Result<Var> {
        if rays.is_empty() || rays.len() != samples.len() {
            return arg_err("need one sample set per ray");
        }
        let l = samples[0].t.len();
        if samples.iter().any(|s| s.t.len() != l) {
            return arg_err("all rays must carry the same number of samples");
        }
        let n = rays.len() * l;
        let mut points = Vec::with_capacity(n);
        let mut dirs = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        for (ray, s) in rays.iter().zip(samples) {
            for (&t, &d) in s.t.iter().zip(&s.delta) {
                points.push(ray.at(t));
                dirs.push(ray.d);
                delta.push(d);
            }
        }
        let mut views = Vec::with_capacity(sources.len());
        for (i, src) in sources.iter().enumerate() {
            let cam = &src.camera;
            let mut uv = Vec::with_capacity(n);
            let mut xv = Vec::with_capacity(3 * n);
            let mut dv = Vec::with_capacity(3 * n);
            for (p, d) in points.iter().zip(&dirs) {
                let proj = cam.project(*p);
                uv.push((proj.u, proj.v));
                xv.extend(cam.rotate_to_cam(*p).map(|c| c * world_scale));
                dv.extend(cam.rotate_to_cam(*d));
            }
            views.push(ViewInputs {
                view: i,
                x_view: g.constant(Tensor { shape: vec![n, 3], data: xv }),
                d_view: g.constant(Tensor { shape: vec![n, 3], data: dv }),
                feature: sample_features_op(g, src.features, &uv)?,
            });
        }
        let (rgb, density) = field_forward(g, params, &self.config.field, &views)?;
        composite_op(g, rgb, density, Arc::new(delta), l)
    }

    /// Inference renderer over the given source views.
    pub fn renderer<'a>(
        &'a self,
        store: &'a ParamStore,
        source_cameras: &[Camera],
        source_images: &[Image],
        world_scale: f64,
        cache: &mut FeatureCache,
    ) -> Result<ModelRenderer<'a>> {
        let mut volumes = Vec::with_capacity(source_images.len());
        for img in source_images {
            volumes.push(cache.get_or_encode(&self.encoder, store, img)?.clone());
        }
        Ok(ModelRenderer {
            model: self,
            store,
            cameras: source_cameras.to_vec(),
            volumes,
            world_scale,
            samples: self.config.eval_samples,
        })
    }

    /// Renders `target` from the training views of `scene`.
    pub fn render_view(
        &self,
        store: &ParamStore,
        sources: &Scene,
        target: &Camera,
        cache: &mut FeatureCache,
    ) -> Result<Image> {
        let r = self.renderer(store, &sources.cameras, &sources.images, sources.world_scale, cache)?;
        render_image(&r, target, sources.near, sources.far, 256)
    }
}

/// Deterministic (midpoint-sampled) renderer with frozen parameters.
pub struct ModelRenderer<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    cameras: Vec<Camera>,
    volumes: Vec<FeatureVolume>,
    world_scale: f64,
    samples: usize,
}

impl RayRenderer for ModelRenderer<'_> {
    fn render_rays(&self, rays: &[Ray]) -> Result<Vec<[f64; 3]>> {
        let samples = rays
            .iter()
            .map(|r| stratified_samples(r, self.samples, None))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g, |_| false);
        let sources = Model::constant_sources(&mut g, &self.cameras, &self.volumes);
        let out = self.model.render_rays_graph(&mut g, &bound, &sources, self.world_scale, rays, &samples)?;
        Ok(g.value(out).data.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
    }
}
