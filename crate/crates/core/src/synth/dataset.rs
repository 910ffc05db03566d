//! On-disk timelapse datasets.
//!
//! ```text
//! out/manifest.json
//! out/scene_000/view_000/albedo.png
//! out/scene_000/view_000/mask.png
//! out/scene_000/view_000/variant_LL_TT.png
//! out/scene_000/view_000/shading_LL_TT.pfm
//! ```
//!
//! Each view is one sequence: a fixed crop of a scene rendered under
//! `n_lightings` light setups, each tone-mapped `n_tonemaps` ways.

use std::path::{Component, Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gen_scene, mix_seed, render, sample_lighting, LightingParams, SceneParams};
use crate::color::{reinhard_tonemap, ToneMapParams};
use crate::formats::{self, quantize, FormatError};
use crate::tensor::Tensor;
use crate::train::Sequence;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("invalid dataset parameters: {0}")]
    Params(String),
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_scenes: usize,
    pub views_per_scene: usize,
    pub n_lightings: usize,
    pub n_tonemaps: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background_fraction: f64,
    /// Variants whose mean 8-bit intensity is below this are discarded.
    pub min_mean_intensity: f64,
    pub lighting: LightingParams,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_scenes: 4,
            views_per_scene: 4,
            n_lightings: 5,
            n_tonemaps: 5,
            width: 64,
            height: 64,
            seed: 0,
            background_fraction: 0.1,
            min_mean_intensity: 20.0,
            lighting: LightingParams::default(),
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Params(m));
        for (name, v) in [
            ("scenes", self.n_scenes),
            ("views", self.views_per_scene),
            ("lightings", self.n_lightings),
            ("tonemaps", self.n_tonemaps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
            if v > 1000 {
                return bad(format!("{name} must be at most 1000"));
            }
        }
        if self.n_lightings > 100 || self.n_tonemaps > 100 {
            return bad("at most 100 lightings and 100 tone maps per view".into());
        }
        if self.width < 8 || self.height < 8 || self.width > 4096 || self.height > 4096 {
            return bad(format!("image size {}x{} outside 8..=4096", self.width, self.height));
        }
        if !(0.0..0.5).contains(&self.background_fraction) {
            return bad("background fraction must lie in [0, 0.5)".into());
        }
        let (lo, hi) = self.lighting.intensity_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad("light intensity range must be positive and ordered".into());
        }
        if !(0.0..1.0).contains(&self.lighting.tint) {
            return bad("light tint must lie in [0, 1)".into());
        }
        if !(0.0..=255.0).contains(&self.min_mean_intensity) {
            return bad("minimum mean intensity must lie in [0, 255]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub lighting: usize,
    pub tonemap: usize,
    pub lights: usize,
    pub key: f64,
    pub burn: f64,
    /// Mean 8-bit intensity over all pixels and channels.
    pub mean_intensity: f64,
    /// Relative to the dataset root; absent for discarded variants.
    pub image: Option<String>,
    pub shading: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    /// `scene_###/view_###`
    pub id: String,
    pub scene: usize,
    pub view: usize,
    pub seed: u64,
    /// Top-left corner of the crop in the scene canvas.
    pub crop: [usize; 2],
    pub albedo: String,
    pub mask: String,
    pub variants: Vec<VariantEntry>,
    pub discarded: Vec<VariantEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub params: DatasetParams,
    pub sequences: Vec<SequenceEntry>,
    /// Views that lost every variant to the intensity filter.
    pub dropped_views: Vec<String>,
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_)))
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        for s in &m.sequences {
            let files = [Some(&s.albedo), Some(&s.mask)]
                .into_iter()
                .chain(s.variants.iter().flat_map(|v| [v.image.as_ref(), v.shading.as_ref()]));
            for f in files {
                match f {
                    Some(f) if safe_relative(f) => {}
                    Some(f) => return Err(DatasetError::Manifest(format!("{}: unsafe path {f:?}", s.id))),
                    None => return Err(DatasetError::Manifest(format!("{}: variant without files", s.id))),
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn variant_count(&self) -> usize {
        self.sequences.iter().map(|s| s.variants.len()).sum()
    }

    pub fn discard_count(&self) -> usize {
        self.sequences.iter().map(|s| s.discarded.len()).sum()
    }
}

struct RenderedVariant {
    entry: VariantEntry,
    image: Vec<u8>,
    shading: Tensor,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path) -> impl FnOnce(FormatError) -> DatasetError + '_ {
    move |source| DatasetError::Format {
        path: path.to_path_buf(),
        source,
    }
}

fn planar_u8(codes: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::new(&[3, h, w], codes.iter().map(|&v| v as f32 / 255.0).collect()).expect("sized")
}

/// Renders every view and writes the dataset plus its manifest.
pub fn make_dataset(params: &DatasetParams, out_dir: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    params.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let (w, h) = (params.width, params.height);
    let hw = w * h;
    let scene_params = SceneParams {
        width: 2 * w,
        height: 2 * h,
        background_fraction: params.background_fraction,
        ..SceneParams::default()
    };
    let mut sequences = Vec::new();
    let mut dropped_views = Vec::new();

    for s in 0..params.n_scenes {
        let scene_seed = mix_seed(params.seed, s as u64 + 1);
        let scene = gen_scene(scene_seed, &scene_params);
        for v in 0..params.views_per_scene {
            let id = format!("scene_{s:03}/view_{v:03}");
            let view_seed = mix_seed(scene_seed, 0x1000 + v as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(view_seed);
            let (x0, y0) = (rng.random_range(0..=w), rng.random_range(0..=h));
            let view = scene.crop(x0, y0, w, h);

            let albedo_codes: Vec<u8> = view.albedo.data().iter().map(|&a| quantize(a as f32)).collect();
            let mask: Vec<f32> = (0..hw)
                .map(|p| {
                    let lit = !view.is_background(p) && (0..3).all(|c| albedo_codes[c * hw + p] > 0);
                    if lit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();

            let mut variants = Vec::new();
            let mut discarded = Vec::new();
            for l in 0..params.n_lightings {
                let lighting = sample_lighting(rng.random(), &params.lighting);
                let hdr = render(&view, &lighting);
                for t in 0..params.n_tonemaps {
                    let tm = ToneMapParams {
                        key: rng.random_range(ToneMapParams::KEY_RANGE.0..ToneMapParams::KEY_RANGE.1),
                        burn: rng.random_range(ToneMapParams::BURN_RANGE.0..ToneMapParams::BURN_RANGE.1),
                    };
                    let ldr = reinhard_tonemap(&hdr, tm).map_err(|e| DatasetError::Inconsistent(e.to_string()))?;
                    let codes: Vec<u8> = ldr.data().iter().map(|&x| quantize(x as f32)).collect();
                    let mean = codes.iter().map(|&c| c as f64).sum::<f64>() / codes.len() as f64;
                    let mut entry = VariantEntry {
                        lighting: l,
                        tonemap: t,
                        lights: lighting.lights.len(),
                        key: tm.key,
                        burn: tm.burn,
                        mean_intensity: mean,
                        image: None,
                        shading: None,
                    };
                    if mean < params.min_mean_intensity {
                        discarded.push(entry);
                        continue;
                    }
                    let shading = Tensor::from_fn(&[3, h, w], |i| {
                        if mask[i % hw] > 0.0 {
                            (codes[i] as f32 / 255.0) / (albedo_codes[i] as f32 / 255.0)
                        } else {
                            0.0
                        }
                    });
                    entry.image = Some(format!("{id}/variant_{l:02}_{t:02}.png"));
                    entry.shading = Some(format!("{id}/shading_{l:02}_{t:02}.pfm"));
                    variants.push(RenderedVariant {
                        entry,
                        image: codes,
                        shading,
                    });
                }
            }
            if variants.is_empty() {
                log::warn!("{id}: every variant is darker than the intensity threshold; view dropped");
                dropped_views.push(id);
                continue;
            }

            let dir = out.join(&id);
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let albedo_path = format!("{id}/albedo.png");
            let mask_path = format!("{id}/mask.png");
            let p = out.join(&albedo_path);
            formats::write_rgb(&p, &planar_u8(&albedo_codes, h, w)).map_err(fmt_err(&p))?;
            let p = out.join(&mask_path);
            formats::write_mask(&p, &Tensor::new(&[1, h, w], mask).expect("sized")).map_err(fmt_err(&p))?;
            let mut entries = Vec::with_capacity(variants.len());
            for rv in variants {
                let p = out.join(rv.entry.image.as_ref().expect("set above"));
                formats::write_rgb(&p, &planar_u8(&rv.image, h, w)).map_err(fmt_err(&p))?;
                let p = out.join(rv.entry.shading.as_ref().expect("set above"));
                formats::write_pfm(&p, &rv.shading).map_err(fmt_err(&p))?;
                entries.push(rv.entry);
            }
            sequences.push(SequenceEntry {
                id,
                scene: s,
                view: v,
                seed: view_seed,
                crop: [x0, y0],
                albedo: albedo_path,
                mask: mask_path,
                variants: entries,
                discarded,
            });
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        params: *params,
        sequences,
        dropped_views,
    };
    let p = out.join(MANIFEST_FILE);
    std::fs::write(&p, manifest.to_json()).map_err(io_err(&p))?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct LoadedSequence {
    pub entry: SequenceEntry,
    /// `[3, H, W]`
    pub albedo: Tensor,
    /// `[1, H, W]`
    pub mask: Tensor,
    pub images: Vec<Tensor>,
    pub shadings: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub sequences: Vec<LoadedSequence>,
}

impl Dataset {
    /// Training view of the dataset: every image of a sequence shares its mask.
    pub fn training_sequences(&self) -> Vec<Sequence> {
        self.sequences
            .iter()
            .map(|s| Sequence {
                images: s.images.clone(),
                masks: vec![s.mask.clone(); s.images.len()],
            })
            .collect()
    }
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest, DatasetError> {
    let p = root.as_ref().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    Manifest::from_json(&text)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    let mut sequences = Vec::with_capacity(manifest.sequences.len());
    let mut shape: Option<Vec<usize>> = None;
    for entry in &manifest.sequences {
        let rgb = |rel: &str| {
            let p = root.join(rel);
            formats::read_rgb(&p).map_err(fmt_err(&p))
        };
        let albedo = rgb(&entry.albedo)?;
        let p = root.join(&entry.mask);
        let mask = formats::read_mask(&p).map_err(fmt_err(&p))?;
        let mut images = Vec::with_capacity(entry.variants.len());
        let mut shadings = Vec::with_capacity(entry.variants.len());
        for v in &entry.variants {
            images.push(rgb(v.image.as_deref().expect("validated"))?);
            let p = root.join(v.shading.as_deref().expect("validated"));
            shadings.push(formats::read_pfm(&p).map_err(fmt_err(&p))?);
        }
        let expect = shape.get_or_insert_with(|| albedo.shape().to_vec()).clone();
        let (h, w) = (expect[1], expect[2]);
        let consistent = albedo.shape() == expect
            && mask.shape() == [1, h, w]
            && images.iter().chain(&shadings).all(|t| t.shape() == expect);
        if !consistent {
            return Err(DatasetError::Inconsistent(format!(
                "{}: images do not all share the size {w}x{h}",
                entry.id
            )));
        }
        sequences.push(LoadedSequence {
            entry: entry.clone(),
            albedo,
            mask,
            images,
            shadings,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        sequences,
    })
}
