//! Rays, stratified sampling and emission-absorption compositing.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::camera::{Camera, Vec3};
use crate::error::{arg_err, Error, Result};
use crate::image::Image;
use crate::params::read_u32;
use crate::tensor::Tensor;

pub const RAW_IMAGE_MAGIC: &[u8; 4] = b"MIMG";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub o: Vec3,
    pub d: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        crate::camera::add_scaled(self.o, self.d, t)
    }
}

/// Ray from the camera center through image point `(u, v)`.
pub fn generate_ray(cam: &Camera, u: f64, v: f64, near: f64, far: f64) -> Result<Ray> {
    if !cam.contains(u, v) {
        return arg_err(format!("pixel ({u}, {v}) is outside the {}x{} image", cam.width, cam.height));
    }
    if !(near >= 0.0 && far > near) {
        return arg_err(format!("invalid ray bounds [{near}, {far}]"));
    }
    Ok(Ray { o: cam.center(), d: cam.direction(u, v), t_near: near, t_far: far })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    /// `delta[i] = t[i + 1] - t[i]`; the last gap runs to `t_far`.
    pub delta: Vec<f64>,
}

/// One sample per equal-width bin of `[t_near, t_far]`: bin midpoints when
/// `rng` is `None`, uniform draws otherwise.
pub fn stratified_samples(ray: &Ray, l: usize, rng: Option<&mut dyn rand::RngCore>) -> Result<SampleSet> {
    if l < 2 {
        return arg_err("need at least 2 samples per ray");
    }
    let width = (ray.t_far - ray.t_near) / l as f64;
    let t: Vec<f64> = match rng {
        None => (0..l).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect(),
        Some(rng) => (0..l)
            .map(|i| ray.t_near + (i as f64 + rng.random::<f64>()) * width)
            .collect(),
    };
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.t_far - t[l - 1]);
    Ok(SampleSet { t, delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeOut {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// Transmittance reaching each sample, `T_1 = 1`.
    pub transmittance: Vec<f64>,
    /// Transmittance past the last sample.
    pub final_transmittance: f64,
}

pub fn composite(c: &[[f64; 3]], sigma: &[f64], delta: &[f64]) -> Result<CompositeOut> {
    if c.len() != sigma.len() || c.len() != delta.len() {
        return arg_err("composite inputs differ in length");
    }
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return arg_err("densities must be non-negative");
    }
    if delta.iter().any(|&d| !(d >= 0.0)) {
        return arg_err("sample gaps must be non-negative");
    }
    let mut weights = Vec::with_capacity(c.len());
    let mut transmittance = Vec::with_capacity(c.len());
    let mut color = [0.0; 3];
    let mut depth = 0.0f64;
    for i in 0..c.len() {
        let t = (-depth).exp();
        let a = sigma[i] * delta[i];
        let w = t * -(-a).exp_m1();
        transmittance.push(t);
        weights.push(w);
        for k in 0..3 {
            color[k] += w * c[i][k];
        }
        depth += a;
    }
    Ok(CompositeOut { color, weights, transmittance, final_transmittance: (-depth).exp() })
}

/// Composites `[rays * samples, 3]` colors with `[rays * samples, 1]`
/// densities into `[rays, 3]` pixel colors. `delta` holds the constant gaps.
pub fn composite_op(g: &mut Graph, rgb: Var, density: Var, delta: Arc<Vec<f64>>, samples: usize) -> Result<Var> {
    let (vc, vs) = (g.value(rgb), g.value(density));
    let n = vs.numel();
    if vc.shape != [n, 3] || delta.len() != n || samples == 0 || n % samples != 0 {
        return arg_err(format!(
            "composite: colors {:?}, {} densities, {} gaps, {samples} samples per ray",
            vc.shape,
            n,
            delta.len()
        ));
    }
    let rays = n / samples;
    let mut out = Tensor::zeros(&[rays, 3]);
    for r in 0..rays {
        let range = r * samples..(r + 1) * samples;
        let colors: Vec<[f64; 3]> = vc.data[range.start * 3..range.end * 3]
            .chunks_exact(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        let res = composite(&colors, &vs.data[range.clone()], &delta[range])?;
        out.data[r * 3..r * 3 + 3].copy_from_slice(&res.color);
    }
    Ok(g.push(
        out,
        &[rgb, density],
        Box::new(move |c| {
            let (colors, sig) = (&c.inputs[0].data, &c.inputs[1].data);
            let mut dc = Tensor::zeros(&[n, 3]);
            let mut ds = Tensor::zeros(&[n, 1]);
            let mut w = vec![0.0; samples];
            let mut t_next = vec![0.0; samples];
            let mut gc = vec![0.0; samples];
            for r in 0..rays {
                let base = r * samples;
                let g3 = &c.grad.data[r * 3..r * 3 + 3];
                let mut depth = 0.0f64;
                for i in 0..samples {
                    let a = sig[base + i] * delta[base + i];
                    let t = (-depth).exp();
                    w[i] = t * -(-a).exp_m1();
                    depth += a;
                    t_next[i] = (-depth).exp();
                    let ci = &colors[(base + i) * 3..(base + i) * 3 + 3];
                    gc[i] = g3[0] * ci[0] + g3[1] * ci[1] + g3[2] * ci[2];
                    for k in 0..3 {
                        dc.data[(base + i) * 3 + k] = w[i] * g3[k];
                    }
                }
                // dL/da_k = T_{k+1} (g.c_k) - sum_{i>k} w_i (g.c_i)
                let mut tail = 0.0;
                for k in (0..samples).rev() {
                    ds.data[base + k] = delta[base + k] * (t_next[k] * gc[k] - tail);
                    tail += w[k] * gc[k];
                }
            }
            ds.shape.clone_from(&c.inputs[1].shape);
            vec![c.needs[0].then_some(dc), c.needs[1].then_some(ds)]
        }),
    ))
}

/// Anything that can color a batch of rays.
pub trait RayRenderer: Sync {
    fn render_rays(&self, rays: &[Ray]) -> Result<Vec<[f64; 3]>>;
}

/// Worker count from `MOMENTS_THREADS`, defaulting to the rayon default.
pub fn thread_count() -> usize {
    std::env::var("MOMENTS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Renders every pixel of `cam` in chunks of `chunk` rays. Chunks are
/// processed in parallel; the result does not depend on the worker count.
pub fn render_image(
    renderer: &impl RayRenderer,
    cam: &Camera,
    near: f64,
    far: f64,
    chunk: usize,
) -> Result<Image> {
    cam.validate()?;
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for row in 0..cam.height {
        for col in 0..cam.width {
            rays.push(generate_ray(cam, col as f64, row as f64, near, far)?);
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    let chunks: Vec<Result<Vec<[f64; 3]>>> =
        pool.install(|| rays.par_chunks(chunk.max(1)).map(|c| renderer.render_rays(c)).collect());
    let mut data = Vec::with_capacity(rays.len() * 3);
    for c in chunks {
        for px in c? {
            data.extend_from_slice(&px);
        }
    }
    Image::from_vec(cam.height, cam.width, 3, data)
}

pub fn write_raw_image(img: &Image, w: &mut impl Write) -> Result<()> {
    w.write_all(RAW_IMAGE_MAGIC)?;
    for d in [img.height, img.width, img.channels] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(img.data.len() * 4);
    for &v in &img.data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_raw_image(r: &mut impl Read) -> Result<Image> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != RAW_IMAGE_MAGIC {
        return Err(Error::Format { what: "raw image", reason: "bad magic".into() });
    }
    let (h, w, c) = (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
    let mut raw = vec![0u8; 4 * h * w * c];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Image::from_vec(h, w, c, data)
}

pub fn save_raw_image(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_raw_image(img, &mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at([0.3, -4.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 40.0, 42.0, 15.5, 15.5, 32, 32).unwrap()
    }

    #[test]
    fn principal_ray_follows_optical_axis() {
        let c = cam();
        let ray = generate_ray(&c, c.cx, c.cy, 1.0, 5.0).unwrap();
        let axis = c.rotate_to_world([0.0, 0.0, 1.0]);
        for k in 0..3 {
            assert!((ray.d[k] - axis[k]).abs() < 1e-12);
        }
        assert!(generate_ray(&c, 40.0, 3.0, 1.0, 5.0).is_err());
    }

    #[test]
    fn rays_project_back_to_their_pixels() {
        let c = cam();
        for row in 0..c.height {
            for col in (0..c.width).step_by(3) {
                let ray = generate_ray(&c, col as f64, row as f64, 1.0, 5.0).unwrap();
                assert!((crate::camera::norm(ray.d) - 1.0).abs() < 1e-12);
                for t in [0.5, 2.0, 7.0] {
                    let p = c.project(ray.at(t));
                    assert!((p.u - col as f64).abs() < 1e-6 && (p.v - row as f64).abs() < 1e-6);
                }
            }
        }
    }

    fn unit_ray() -> Ray {
        Ray { o: [0.0; 3], d: [0.0, 0.0, 1.0], t_near: 0.0, t_far: 1.0 }
    }

    #[test]
    fn midpoint_samples() {
        let s = stratified_samples(&unit_ray(), 4, None).unwrap();
        assert_eq!(s.t, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(s.delta, vec![0.25, 0.25, 0.25, 0.125]);
        assert!(stratified_samples(&unit_ray(), 1, None).is_err());
    }

    #[test]
    fn composite_examples() {
        let zero = composite(&[[1.0, 1.0, 1.0]; 5], &[0.0; 5], &[0.2; 5]).unwrap();
        assert_eq!(zero.color, [0.0; 3]);
        assert!(zero.transmittance.iter().all(|&t| t == 1.0));
        assert!(zero.weights.iter().all(|&w| w == 0.0));

        let one = composite(&[[1.0, 0.5, 0.25]], &[50.0], &[1.0]).unwrap();
        let k = 1.0 - (-50.0f64).exp();
        for (got, want) in one.color.iter().zip([1.0, 0.5, 0.25]) {
            assert!((got - want * k).abs() < 1e-15 && (got - want).abs() < 1e-9);
        }
        assert!(composite(&[[0.0; 3]], &[-1.0], &[1.0]).is_err());
        assert!(composite(&[[0.0; 3]], &[1.0], &[-1.0]).is_err());
    }

    fn homogeneous_error(l: usize, sigma: f64) -> f64 {
        let ray = Ray { o: [0.0; 3], d: [0.0, 0.0, 1.0], t_near: 2.0, t_far: 4.0 };
        let s = stratified_samples(&ray, l, None).unwrap();
        let c = [0.2, 0.6, 0.9];
        let out = composite(&vec![c; l], &vec![sigma; l], &s.delta).unwrap();
        let exact = 1.0 - (-sigma * 2.0).exp();
        (out.color[2] - c[2] * exact).abs()
    }

    #[test]
    fn homogeneous_medium_matches_closed_form() {
        assert!(homogeneous_error(1024, 1.3) < 1e-3);
    }

    proptest! {
        #[test]
        fn weights_and_transmittance_are_consistent(
            sigma in prop::collection::vec(0.0f64..30.0, 2..40),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sigma.len();
            let delta: Vec<f64> = (0..l).map(|_| rng.random_range(0.001..0.3)).collect();
            let c: Vec<[f64; 3]> = (0..l).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let out = composite(&c, &sigma, &delta).unwrap();
            prop_assert_eq!(out.transmittance[0], 1.0);
            prop_assert!(out.transmittance.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
            let total: f64 = out.weights.iter().sum();
            prop_assert!((total - (1.0 - out.final_transmittance)).abs() < 1e-12);
            prop_assert!(total <= 1.0 + 1e-15);
        }

        #[test]
        fn splitting_a_sample_changes_nothing(
            sigma in prop::collection::vec(0.0f64..10.0, 3..12),
            split in 0usize..3,
            frac in 0.05f64..0.95,
        ) {
            let l = sigma.len();
            let delta = vec![0.1; l];
            let c: Vec<[f64; 3]> = (0..l).map(|i| [i as f64 / l as f64, 0.5, 1.0 - i as f64 / l as f64]).collect();
            let base = composite(&c, &sigma, &delta).unwrap();
            let (mut c2, mut s2, mut d2) = (c.clone(), sigma.clone(), delta.clone());
            d2[split] = frac * delta[split];
            d2.insert(split + 1, (1.0 - frac) * delta[split]);
            s2.insert(split + 1, sigma[split]);
            c2.insert(split + 1, c[split]);
            let out = composite(&c2, &s2, &d2).unwrap();
            for k in 0..3 {
                prop_assert!((out.color[k] - base.color[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn stratified_samples_land_one_per_bin(seed in 0u64..10_000, l in 2usize..50) {
            let ray = Ray { o: [0.0; 3], d: [1.0, 0.0, 0.0], t_near: 1.5, t_far: 3.5 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = stratified_samples(&ray, l, Some(&mut rng)).unwrap();
            let width = 2.0 / l as f64;
            for (i, &t) in s.t.iter().enumerate() {
                prop_assert!(t >= 1.5 + i as f64 * width && t <= 1.5 + (i + 1) as f64 * width);
            }
            prop_assert!(s.delta.iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn error_halves_when_samples_double() {
        let errs: Vec<f64> = [64, 128, 256, 512].iter().map(|&l| homogeneous_error(l, 1.3)).collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 0.9, "order {order} from {errs:?}");
        }
    }

    #[test]
    fn composite_op_matches_plain_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rays, samples) = (3, 6);
        let n = rays * samples;
        let colors: Vec<f64> = (0..n * 3).map(|_| rng.random()).collect();
        let sig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.4)).collect();
        let mut g = Graph::new();
        let c = g.param(Tensor::from_vec(&[n, 3], colors.clone()).unwrap());
        let s = g.param(Tensor::from_vec(&[n, 1], sig.clone()).unwrap());
        let out = composite_op(&mut g, c, s, Arc::new(delta.clone()), samples).unwrap();
        for r in 0..rays {
            let cs: Vec<[f64; 3]> = colors[r * samples * 3..(r + 1) * samples * 3]
                .chunks_exact(3)
                .map(|p| [p[0], p[1], p[2]])
                .collect();
            let want = composite(&cs, &sig[r * samples..(r + 1) * samples], &delta[r * samples..(r + 1) * samples]).unwrap();
            assert_eq!(&g.value(out).data[r * 3..r * 3 + 3], &want.color);
        }
    }

    struct Empty;
    impl RayRenderer for Empty {
        fn render_rays(&self, rays: &[Ray]) -> Result<Vec<[f64; 3]>> {
            rays.iter()
                .map(|r| {
                    let s = stratified_samples(r, 8, None)?;
                    Ok(composite(&[[0.7; 3]; 8], &[0.0; 8], &s.delta)?.color)
                })
                .collect()
        }
    }

    #[test]
    fn empty_field_renders_black() {
        let img = render_image(&Empty, &cam(), 2.0, 6.0, 7).unwrap();
        assert_eq!((img.height, img.width, img.channels), (32, 32, 3));
        assert!(img.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raw_image_round_trip() {
        let img = Image::from_vec(2, 3, 1, vec![0.0, 0.5, 1.0, -2.0, 3.25, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_raw_image(&img, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MIMG");
        assert_eq!(read_raw_image(&mut buf.as_slice()).unwrap(), img);
    }
}
