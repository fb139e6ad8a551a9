//! Posed-image scenes: `scene.json` I/O and the synthetic sphere scene.
//!
//! ```json
//! {"near": 3.0, "far": 5.0, "world_scale": 0.9,
//!  "frames": [{"file": "view_000.png", "fx": 80, "fy": 80, "cx": 15.5, "cy": 15.5,
//!              "world_to_cam": [r00, r01, r02, t0, r10, r11, r12, t1, r20, r21, r22, t2]}]}
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::camera::{self, Camera, Vec3};
use crate::error::{arg_err, Error, Result};
use crate::image::Image;
use crate::renderer::{composite, generate_ray, stratified_samples, Ray, RayRenderer};

pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    /// Image file names relative to the scene directory.
    pub files: Vec<String>,
    pub near: f64,
    pub far: f64,
    /// Multiplies world coordinates before they reach the field.
    pub world_scale: f64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() || self.cameras.len() != self.files.len() {
            return arg_err("scene cameras, images and files differ in count");
        }
        if !(self.near >= 0.0 && self.far > self.near) {
            return arg_err(format!("invalid scene bounds [{}, {}]", self.near, self.far));
        }
        if !(self.world_scale > 0.0 && self.world_scale.is_finite()) {
            return arg_err("world_scale must be positive");
        }
        for (cam, img) in self.cameras.iter().zip(&self.images) {
            cam.validate()?;
            if img.channels != 3 || img.width != cam.width || img.height != cam.height {
                return arg_err("image size does not match its camera");
            }
        }
        Ok(())
    }

    /// Sub-scene with the listed views, in list order.
    pub fn select(&self, views: &[usize]) -> Result<Scene> {
        if let Some(&bad) = views.iter().find(|&&v| v >= self.len()) {
            return arg_err(format!("view {bad} out of range for a {}-view scene", self.len()));
        }
        Ok(Scene {
            cameras: views.iter().map(|&v| self.cameras[v]).collect(),
            images: views.iter().map(|&v| self.images[v].clone()).collect(),
            files: views.iter().map(|&v| self.files[v].clone()).collect(),
            ..*self
        })
    }

    /// Largest coordinate magnitude, after scaling, of sample points on the
    /// corner and center rays of every camera.
    pub fn max_normalized_coord(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for cam in &self.cameras {
            let (w, h) = ((cam.width - 1) as f64, (cam.height - 1) as f64);
            for (u, v) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h), (cam.cx, cam.cy)] {
                let ray = generate_ray(cam, u, v, self.near, self.far)?;
                for i in 0..=16 {
                    let p = ray.at(self.near + (self.far - self.near) * i as f64 / 16.0);
                    worst = worst.max(camera::norm(p) * self.world_scale);
                }
            }
        }
        Ok(worst)
    }
}

fn load_err(path: &Path, field: &str, reason: impl Into<String>) -> Error {
    Error::Load { path: path.to_path_buf(), field: field.to_string(), reason: reason.into() }
}

fn number(obj: &Map<String, Value>, key: &str, path: &Path, ctx: &str) -> Result<f64> {
    match obj.get(key) {
        None => Err(load_err(path, key, format!("missing{ctx}"))),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| load_err(path, key, format!("expected a finite number{ctx}"))),
    }
}

/// Reads `dir/scene.json` and the images it references.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join(SCENE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| load_err(&path, "scene.json", e.to_string()))?;
    let root: Value = serde_json::from_str(&text).map_err(|e| load_err(&path, "scene.json", e.to_string()))?;
    let root = root.as_object().ok_or_else(|| load_err(&path, "scene.json", "top level must be an object"))?;
    let near = number(root, "near", &path, "")?;
    let far = number(root, "far", &path, "")?;
    let world_scale = match root.get("world_scale") {
        None => 1.0,
        Some(_) => number(root, "world_scale", &path, "")?,
    };
    if near < 0.0 {
        return Err(load_err(&path, "near", "must be non-negative"));
    }
    if far <= near {
        return Err(load_err(&path, "far", "must exceed near"));
    }
    if world_scale <= 0.0 {
        return Err(load_err(&path, "world_scale", "must be positive"));
    }
    let frames = root
        .get("frames")
        .and_then(Value::as_array)
        .ok_or_else(|| load_err(&path, "frames", "missing or not a list"))?;
    if frames.is_empty() {
        return Err(load_err(&path, "frames", "scene has no frames"));
    }
    let mut scene = Scene { cameras: vec![], images: vec![], files: vec![], near, far, world_scale };
    for (i, frame) in frames.iter().enumerate() {
        let ctx = format!(" (frame {i})");
        let obj = frame.as_object().ok_or_else(|| load_err(&path, "frames", format!("entry {i} is not an object")))?;
        let file = obj
            .get("file")
            .and_then(Value::as_str)
            .ok_or_else(|| load_err(&path, "file", format!("missing or not a string{ctx}")))?;
        let [fx, fy, cx, cy] = ["fx", "fy", "cx", "cy"].map(|k| number(obj, k, &path, &ctx));
        let (fx, fy, cx, cy) = (fx?, fy?, cx?, cy?);
        for (name, v) in [("fx", fx), ("fy", fy)] {
            if v <= 0.0 {
                return Err(load_err(&path, name, format!("must be positive, got {v}{ctx}")));
            }
        }
        let m = obj
            .get("world_to_cam")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 12)
            .ok_or_else(|| load_err(&path, "world_to_cam", format!("expected 12 numbers{ctx}")))?;
        let mut world_to_cam = [[0.0; 4]; 3];
        for (k, v) in m.iter().enumerate() {
            world_to_cam[k / 4][k % 4] = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| load_err(&path, "world_to_cam", format!("entry {k} is not a number{ctx}")))?;
        }
        let image_path = dir.join(file);
        let image = Image::load_png(&image_path).map_err(|e| load_err(&image_path, "file", e.to_string()))?;
        if cx < 0.0 || cx > image.width as f64 {
            return Err(load_err(&path, "cx", format!("outside the {}-pixel-wide image{ctx}", image.width)));
        }
        if cy < 0.0 || cy > image.height as f64 {
            return Err(load_err(&path, "cy", format!("outside the {}-pixel-tall image{ctx}", image.height)));
        }
        let cam = Camera { fx, fy, cx, cy, world_to_cam, width: image.width, height: image.height };
        cam.validate().map_err(|e| load_err(&path, "world_to_cam", format!("{e}{ctx}")))?;
        scene.cameras.push(cam);
        scene.images.push(image);
        scene.files.push(file.to_string());
    }
    Ok(scene)
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    file: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_cam: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    near: f64,
    far: f64,
    world_scale: f64,
    frames: Vec<FrameJson>,
}

/// Writes `scene.json` and 8-bit PNGs into `dir`, creating it if needed.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    std::fs::create_dir_all(dir)?;
    let frames = scene
        .cameras
        .iter()
        .zip(&scene.files)
        .map(|(c, f)| FrameJson {
            file: f.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_cam: c.world_to_cam.iter().flatten().copied().collect(),
        })
        .collect();
    let json = SceneJson { near: scene.near, far: scene.far, world_scale: scene.world_scale, frames };
    std::fs::write(dir.join(SCENE_FILE), serde_json::to_string_pretty(&json)?)?;
    for (img, f) in scene.images.iter().zip(&scene.files) {
        img.save_png(&dir.join(f))?;
    }
    Ok(())
}

// ---- synthetic sphere --------------------------------------------------------

/// Homogeneous sphere of constant density and color in empty space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticSphere {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    pub albedo: [f64; 3],
    /// Midpoint samples per ray when rendering.
    pub samples: usize,
}

impl AnalyticSphere {
    pub fn density_at(&self, x: Vec3) -> f64 {
        if camera::norm(camera::sub(x, self.center)) <= self.radius {
            self.density
        } else {
            0.0
        }
    }

    /// Entry and exit distances along `ray`, if it meets the sphere.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let oc = camera::sub(ray.o, self.center);
        let b = camera::dot(oc, ray.d);
        let disc = b * b - (camera::dot(oc, oc) - self.radius * self.radius);
        (disc > 0.0).then(|| (-b - disc.sqrt(), -b + disc.sqrt()))
    }

    pub fn render_ray(&self, ray: &Ray) -> Result<[f64; 3]> {
        let s = stratified_samples(ray, self.samples, None)?;
        let sigma: Vec<f64> = s.t.iter().map(|&t| self.density_at(ray.at(t))).collect();
        Ok(composite(&vec![self.albedo; self.samples], &sigma, &s.delta)?.color)
    }
}

impl RayRenderer for AnalyticSphere {
    fn render_rays(&self, rays: &[Ray]) -> Result<Vec<[f64; 3]>> {
        rays.iter().map(|r| self.render_ray(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: [f64; 3],
    /// Density times the diameter.
    pub optical_depth: f64,
    pub n_views: usize,
    pub size: usize,
    /// Distance of the cameras from the sphere center.
    pub ring_radius: f64,
    /// Camera height above the ring plane, as an angle in radians.
    pub elevation: f64,
    /// Azimuth range the cameras are spread over, in radians.
    pub arc: f64,
    /// Tangent of half the field of view.
    pub tan_half_fov: f64,
    /// Picks the azimuth of the first camera.
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            center: [0.0; 3],
            radius: 0.5,
            albedo: [0.9, 0.55, 0.25],
            optical_depth: 50.0,
            n_views: 3,
            size: 32,
            ring_radius: 4.0,
            elevation: 0.3,
            arc: std::f64::consts::TAU,
            tan_half_fov: 0.2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return arg_err("sphere radius must be positive");
        }
        if self.n_views == 0 || self.size < 2 {
            return arg_err("need at least one view of at least 2x2 pixels");
        }
        if !(self.ring_radius > 2.0 * self.radius) {
            return arg_err("cameras must sit outside the sphere with room for the near plane");
        }
        if !(self.tan_half_fov > 0.0) || !(self.optical_depth >= 0.0) {
            return arg_err("field of view and optical depth must be positive");
        }
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return arg_err("albedo must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn sphere(&self) -> AnalyticSphere {
        AnalyticSphere {
            center: self.center,
            radius: self.radius,
            density: self.optical_depth / (2.0 * self.radius),
            albedo: self.albedo,
            samples: 1024,
        }
    }

    /// Camera `i` of the ring, looking at the sphere center.
    pub fn camera(&self, i: usize) -> Result<Camera> {
        let phase = ChaCha8Rng::seed_from_u64(self.seed).random::<f64>() * std::f64::consts::TAU;
        let step = if self.arc >= std::f64::consts::TAU - 1e-12 {
            self.arc / self.n_views as f64
        } else if self.n_views > 1 {
            self.arc / (self.n_views - 1) as f64
        } else {
            0.0
        };
        let az = phase + step * i as f64;
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        let eye = [
            self.center[0] + self.ring_radius * ce * az.cos(),
            self.center[1] + self.ring_radius * ce * az.sin(),
            self.center[2] + self.ring_radius * se,
        ];
        let f = 0.5 * self.size as f64 / self.tan_half_fov;
        let c = 0.5 * (self.size as f64 - 1.0);
        Camera::look_at(eye, self.center, [0.0, 0.0, 1.0], f, f, c, c, self.size, self.size)
    }
}

/// Renders the ring of views around the analytic sphere. The world scale is
/// chosen so every sampled point maps inside `[-1.5, 1.5]^3`.
pub fn synth_scene(spec: &SynthSpec) -> Result<(Scene, AnalyticSphere)> {
    spec.validate()?;
    // normalized coordinates are measured from the origin
    if camera::norm(spec.center) > 0.0 {
        return arg_err("synthetic scenes are centered at the origin");
    }
    let sphere = spec.sphere();
    let near = spec.ring_radius - 2.0 * spec.radius;
    let far = spec.ring_radius + 2.0 * spec.radius;
    let mut scene = Scene { cameras: vec![], images: vec![], files: vec![], near, far, world_scale: 1.0 };
    for i in 0..spec.n_views {
        let cam = spec.camera(i)?;
        let img = crate::renderer::render_image(&sphere, &cam, near, far, 64)?;
        scene.cameras.push(cam);
        scene.images.push(img);
        scene.files.push(format!("view_{i:03}.png"));
    }
    let extent = scene.max_normalized_coord()?;
    if extent > 1.5 {
        scene.world_scale = 1.5 / extent * (1.0 - 1e-9);
    }
    Ok((scene, sphere))
}
