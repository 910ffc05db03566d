//! Procedural static scenes rendered under random point lights.
//!
//! A scene is a textured relief seen by a camera at the origin looking down
//! `−z`. The relief sits around `z = −3.5`; lights are drawn from the box
//! `x ∈ [−1.5, 1.5]`, `y ∈ [0, 1.5]`, `z ∈ [−3, 0]`.

pub mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub use dataset::{
    load_dataset, make_dataset, read_manifest, Dataset, DatasetError, DatasetParams, LoadedSequence, Manifest,
    SequenceEntry, VariantEntry,
};

pub const LIGHT_BOX_MIN: [f64; 3] = [-1.5, 0.0, -3.0];
pub const LIGHT_BOX_MAX: [f64; 3] = [1.5, 1.5, 0.0];

const SURFACE_Z: f64 = -3.5;
const HALF_EXTENT: f64 = 1.2;

/// splitmix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Approximate fraction of rows at the top marked as infinitely far.
    pub background_fraction: f64,
    pub min_regions: usize,
    pub max_regions: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            background_fraction: 0.1,
            min_regions: 4,
            max_regions: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]` in `[0, 1]`; zero on background pixels.
    pub albedo: Tensor<f64>,
    /// Unit normals, row-major.
    pub normals: Vec<[f64; 3]>,
    /// Surface points in camera coordinates, row-major.
    pub points: Vec<[f64; 3]>,
    /// Distance from the camera; infinite on background pixels.
    pub depth: Vec<f64>,
    pub region_count: usize,
}

/// Smooth value noise in `[−1, 1]` on a coarse random lattice.
struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = (cells + 1) * (cells + 1);
        Self {
            cells,
            lattice: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// `u, v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let c = self.cells as f64;
        let (x, y) = ((u * c).clamp(0.0, c - 1e-9), (v * c).clamp(0.0, c - 1e-9));
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(x - x0 as f64), smooth(y - y0 as f64));
        let stride = self.cells + 1;
        let l = |i: usize, j: usize| self.lattice[j * stride + i];
        let top = l(x0, y0) + (l(x0 + 1, y0) - l(x0, y0)) * tx;
        let bottom = l(x0, y0 + 1) + (l(x0 + 1, y0 + 1) - l(x0, y0 + 1)) * tx;
        top + (bottom - top) * ty
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Albedo texture of one region.
enum Material {
    Flat([f64; 3]),
    Noisy([f64; 3], ValueNoise),
}

impl Material {
    fn random(rng: &mut ChaCha8Rng, hue: f64) -> Self {
        let color = hsv_to_rgb(hue, rng.random_range(0.35..0.9), rng.random_range(0.35..0.95));
        if rng.random_bool(0.5) {
            Material::Flat(color)
        } else {
            let cells = rng.random_range(4..=10);
            Material::Noisy(color, ValueNoise::new(rng, cells))
        }
    }

    fn at(&self, u: f64, v: f64) -> [f64; 3] {
        match self {
            Material::Flat(c) => *c,
            Material::Noisy(c, noise) => {
                let k = 1.0 + 0.2 * noise.at(u, v);
                c.map(|ch| (ch * k).clamp(0.02, 1.0))
            }
        }
    }
}

/// Smooth heightfield: Gaussian bumps plus two low-frequency waves.
struct Heightfield {
    bumps: Vec<([f64; 2], f64, f64)>,
    waves: Vec<([f64; 2], f64, f64)>,
}

impl Heightfield {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let bumps = (0..6)
            .map(|_| {
                let c = [rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3)];
                (c, rng.random_range(-0.25..0.25), rng.random_range(0.15..0.5))
            })
            .collect();
        let waves = (0..2)
            .map(|_| {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let f = rng.random_range(1.0..4.0);
                (
                    [a.cos() * f, a.sin() * f],
                    rng.random_range(0.0..0.05),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self { bumps, waves }
    }

    /// Height and its gradient at `(x, y)`.
    fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let (mut h, mut gx, mut gy) = (0.0, 0.0, 0.0);
        for &(c, amp, sigma) in &self.bumps {
            let (dx, dy) = (x - c[0], y - c[1]);
            let g = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            h += g;
            gx -= g * dx / (sigma * sigma);
            gy -= g * dy / (sigma * sigma);
        }
        for &(k, amp, phase) in &self.waves {
            let arg = k[0] * x + k[1] * y + phase;
            h += amp * arg.sin();
            gx += amp * k[0] * arg.cos();
            gy += amp * k[1] * arg.cos();
        }
        (h, gx, gy)
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

/// Deterministic scene from a seed.
pub fn gen_scene(seed: u64, params: &SceneParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (params.width, params.height);
    let region_count = rng.random_range(params.min_regions..=params.max_regions.max(params.min_regions));
    // golden-ratio hue steps keep neighbouring regions apart in color
    let hue0: f64 = rng.random_range(0.0..1.0);
    let hue = |k: usize| hue0 + 0.618_034 * k as f64;
    // Voronoi cells of random sites: convex polygonal regions that tile the canvas
    let regions: Vec<([f64; 2], Material)> = (0..region_count)
        .map(|k| {
            let site = [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)];
            (site, Material::random(&mut rng, hue(k)))
        })
        .collect();
    let relief = Heightfield::random(&mut rng);
    let band_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let hw = h * w;
    let mut albedo = vec![0.0; 3 * hw];
    let mut normals = Vec::with_capacity(hw);
    let mut points = Vec::with_capacity(hw);
    let mut depth = Vec::with_capacity(hw);
    let aspect = h as f64 / w as f64;
    for py in 0..h {
        for px in 0..w {
            let (u, v) = ((px as f64 + 0.5) / w as f64, (py as f64 + 0.5) / h as f64);
            let band = params.background_fraction * (1.0 + 0.3 * (u * 9.0 + band_phase).sin());
            let p = py * w + px;
            if v < band {
                normals.push([0.0, 0.0, 1.0]);
                points.push([0.0, 0.0, f64::NEG_INFINITY]);
                depth.push(f64::INFINITY);
                continue;
            }
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let material = regions
                .iter()
                .map(|(site, m)| ((site[0] - cx).powi(2) + (site[1] - cy).powi(2), m))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, m)| m)
                .expect("at least one region");
            let color = material.at(u, v);
            for c in 0..3 {
                albedo[c * hw + p] = color[c];
            }
            let x = (2.0 * u - 1.0) * HALF_EXTENT;
            let y = (1.0 - 2.0 * v) * HALF_EXTENT * aspect;
            let (z, gx, gy) = relief.eval(x, y);
            let point = [x, y, SURFACE_Z + z];
            normals.push(normalize([-gx, -gy, 1.0]));
            depth.push((point[0] * point[0] + point[1] * point[1] + point[2] * point[2]).sqrt());
            points.push(point);
        }
    }
    Scene {
        width: w,
        height: h,
        albedo: Tensor::new(&[3, h, w], albedo).expect("sized"),
        normals,
        points,
        depth,
        region_count,
    }
}

impl Scene {
    pub fn is_background(&self, p: usize) -> bool {
        !self.depth[p].is_finite()
    }

    /// Sub-window `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Scene {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop outside scene");
        let src = |p: usize| (y0 + p / w) * self.width + x0 + p % w;
        let shw = self.width * self.height;
        let ad = self.albedo.data();
        Scene {
            width: w,
            height: h,
            albedo: Tensor::from_fn(&[3, h, w], |i| {
                let (c, p) = (i / (h * w), i % (h * w));
                ad[c * shw + src(p)]
            }),
            normals: (0..h * w).map(|p| self.normals[src(p)]).collect(),
            points: (0..h * w).map(|p| self.points[src(p)]).collect(),
            depth: (0..h * w).map(|p| self.depth[src(p)]).collect(),
            region_count: self.region_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: [f64; 3],
    pub intensity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingVariant {
    pub lights: Vec<PointLight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    /// Log-uniform range of the light power.
    pub intensity_range: (f64, f64),
    /// Maximum relative deviation of each channel from white.
    pub tint: f64,
}

impl Default for LightingParams {
    fn default() -> Self {
        Self {
            intensity_range: (0.5, 5.0),
            tint: 0.15,
        }
    }
}

/// One to three point lights drawn uniformly from the light box.
pub fn sample_lighting(seed: u64, params: &LightingParams) -> LightingVariant {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=3);
    let (lo, hi) = params.intensity_range;
    let lights = (0..count)
        .map(|_| {
            let position = [0, 1, 2].map(|a| rng.random_range(LIGHT_BOX_MIN[a]..=LIGHT_BOX_MAX[a]));
            let power = (rng.random_range(lo.ln()..=hi.ln())).exp();
            let intensity = [0, 1, 2].map(|_| power * (1.0 + rng.random_range(-params.tint..=params.tint)));
            PointLight { position, intensity }
        })
        .collect();
    LightingVariant { lights }
}

/// Linear radiance `[3, H, W]`: per pixel `A · Σ I·max(0, n·l)/d²`.
pub fn render(scene: &Scene, lighting: &LightingVariant) -> Tensor<f64> {
    let hw = scene.width * scene.height;
    let a = scene.albedo.data();
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        if scene.is_background(p) {
            continue;
        }
        let (n, x) = (scene.normals[p], scene.points[p]);
        let mut irradiance = [0.0; 3];
        for light in &lighting.lights {
            let l = [0, 1, 2].map(|k| light.position[k] - x[k]);
            let d2 = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
            let cos = (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]) / d2.sqrt();
            if cos > 0.0 {
                for (e, i) in irradiance.iter_mut().zip(light.intensity) {
                    *e += i * cos / d2;
                }
            }
        }
        for c in 0..3 {
            out[c * hw + p] = a[c * hw + p] * irradiance[c];
        }
    }
    Tensor::new(&[3, scene.height, scene.width], out).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneParams {
        SceneParams {
            width: 32,
            height: 24,
            ..SceneParams::default()
        }
    }

    #[test]
    fn scene_is_deterministic_and_valid() {
        let a = gen_scene(3, &small());
        assert_eq!(a, gen_scene(3, &small()));
        assert_ne!(a.albedo, gen_scene(4, &small()).albedo);
        assert!((4..=12).contains(&a.region_count));
        for n in &a.normals {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-5);
        }
        assert!(a.albedo.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let bg = (0..a.depth.len()).filter(|&p| a.is_background(p)).count();
        assert!(bg > 0 && bg < a.depth.len() / 3);
        for p in 0..a.depth.len() {
            if a.is_background(p) {
                assert!((0..3).all(|c| a.albedo.data()[c * a.depth.len() + p] == 0.0));
            }
        }
    }

    #[test]
    fn region_counts_cover_range() {
        let counts: Vec<usize> = (0..200).map(|s| gen_scene(s, &small()).region_count).collect();
        assert!(counts.iter().all(|c| (4..=12).contains(c)));
        assert!(counts.contains(&4) && counts.contains(&12));
    }

    #[test]
    fn lighting_bounds_and_determinism() {
        let p = LightingParams::default();
        for s in 0..1000 {
            let v = sample_lighting(s, &p);
            assert!((1..=3).contains(&v.lights.len()));
            for l in &v.lights {
                for a in 0..3 {
                    assert!(l.position[a] >= LIGHT_BOX_MIN[a] && l.position[a] <= LIGHT_BOX_MAX[a]);
                }
                assert!(l.intensity.iter().all(|&i| i > 0.0));
            }
        }
        assert_eq!(sample_lighting(11, &p), sample_lighting(11, &p));
    }

    #[test]
    fn light_count_is_uniform() {
        let p = LightingParams::default();
        let mut freq = [0.0f64; 3];
        for s in 0..1000 {
            freq[sample_lighting(s, &p).lights.len() - 1] += 1.0;
        }
        let expected = 1000.0 / 3.0;
        let chi2: f64 = freq.iter().map(|f| (f - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with two degrees of freedom
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts {freq:?}");
    }

    #[test]
    fn no_lights_renders_black() {
        let scene = gen_scene(1, &small());
        let img = render(&scene, &LightingVariant { lights: vec![] });
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frontal_light_is_proportional_to_albedo() {
        let mut scene = gen_scene(2, &small());
        for p in 0..scene.depth.len() {
            scene.normals[p] = [0.0, 0.0, 1.0];
            scene.points[p] = [0.0, 0.0, -1.0];
        }
        let light = LightingVariant {
            lights: vec![PointLight {
                position: [0.0, 0.0, 0.0],
                intensity: [1.0; 3],
            }],
        };
        let img = render(&scene, &light);
        for (i, (&v, &a)) in img.data().iter().zip(scene.albedo.data()).enumerate() {
            let p = i % scene.depth.len();
            if !scene.is_background(p) {
                assert!((v - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn render_matches_loop_oracle() {
        let scene = gen_scene(5, &small());
        let lighting = sample_lighting(9, &LightingParams::default());
        let img = render(&scene, &lighting);
        let hw = scene.depth.len();
        for p in (0..hw).step_by(7) {
            for c in 0..3 {
                let mut want = 0.0;
                if !scene.is_background(p) {
                    for l in &lighting.lights {
                        let v: Vec<f64> = (0..3).map(|k| l.position[k] - scene.points[p][k]).collect();
                        let d = (v[0].powi(2) + v[1].powi(2) + v[2].powi(2)).sqrt();
                        let ndotl: f64 = (0..3).map(|k| scene.normals[p][k] * v[k] / d).sum();
                        want += l.intensity[c] * ndotl.max(0.0) / (d * d);
                    }
                    want *= scene.albedo.data()[c * hw + p];
                }
                assert!((img.data()[c * hw + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn albedo_has_several_dominant_colors() {
        // 4 levels per channel; a dominant bin holds at least 3% of the pixels
        for seed in 0..100 {
            let scene = gen_scene(seed, &SceneParams::default());
            let hw = scene.depth.len();
            let d = scene.albedo.data();
            let mut bins = std::collections::HashMap::new();
            let mut lit = 0;
            for p in (0..hw).filter(|&p| !scene.is_background(p)) {
                let key: Vec<u8> = (0..3).map(|c| (d[c * hw + p] * 3.999) as u8).collect();
                *bins.entry(key).or_insert(0usize) += 1;
                lit += 1;
            }
            let dominant = bins.values().filter(|&&n| n * 100 >= lit * 3).count();
            assert!(dominant >= 3, "seed {seed}: {dominant} dominant colors");
        }
    }

    #[test]
    fn crop_extracts_window() {
        let scene = gen_scene(7, &small());
        let c = scene.crop(4, 3, 10, 8);
        assert_eq!(c.albedo.shape(), &[3, 8, 10]);
        assert_eq!(c.points[0], scene.points[3 * 32 + 4]);
        assert_eq!(c.albedo.data()[8 * 10 + 1], scene.albedo.data()[24 * 32 + 3 * 32 + 5]);
    }
}
