//! Synthetic camera scenes, the episodic sampler, and the on-disk dataset layout.
//!
//! Each synthetic scene has its own background texture, perspective-driven
//! blob size gradient, crowd-size range and sensor noise. Images are
//! rendered as sums of isotropic Gaussian blobs (one per person) over the
//! background, plus white noise, clipped to `[0, 1]`.
//!
//! Dataset layout:
//!
//! ```text
//! root/scene_<id>/images/*.pgm
//! root/scene_<id>/annotations.txt
//! root/scene_<id>/roi.pgm          (optional)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use crate::par::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::density::{
    self, downsample_density, make_density_map, AnnotationRecord, DensityMap, DotAnnotation, RoiMask,
};
use crate::error::{Error, Result};
use crate::pgm::{self, GrayImage};

/// Ground-truth kernel width in pixels.
pub const DEFAULT_SIGMA: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: u32,
    /// Inclusive range of people per image.
    pub count_range: (usize, usize),
    /// Blob sigma at the top and bottom rows.
    pub blob_sigma: (f64, f64),
    pub background_seed: u64,
    pub noise_level: f64,
    pub height: usize,
    pub width: usize,
    /// Rows above this are outside the region of interest.
    pub roi_top: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.count_range;
        let ok = lo <= hi
            && self.blob_sigma.0 > 0.0
            && self.blob_sigma.1 > 0.0
            && self.noise_level >= 0.0
            && self.height > 0
            && self.width > 0
            && self.roi_top < self.height;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid scene spec {self:?}")));
        }
        Ok(())
    }

    fn blob_sigma_at(&self, y: f64) -> f64 {
        let t = if self.height > 1 { y / (self.height - 1) as f64 } else { 0.0 };
        self.blob_sigma.0 + (self.blob_sigma.1 - self.blob_sigma.0) * t
    }

    pub fn roi(&self) -> RoiMask {
        let data = (0..self.height * self.width)
            .map(|i| i / self.width >= self.roi_top)
            .collect();
        RoiMask::new(self.height, self.width, data).expect("roi_top < height")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotation: DotAnnotation,
    /// Ground truth at network output resolution.
    pub density: DensityMap,
}

impl LabeledImage {
    pub fn new(image: Tensor, annotation: DotAnnotation, sigma: f64, downsample: usize) -> Result<Self> {
        let full = make_density_map(&annotation, sigma)?;
        let density = downsample_density(&full, downsample)?;
        Ok(LabeledImage {
            image,
            annotation,
            density,
        })
    }

    pub fn density_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.density.height(), self.density.width()],
            self.density.data().to_vec(),
        )
        .expect("density map is nonempty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u32,
    /// Generator parameters, absent for scenes loaded from disk.
    pub spec: Option<SceneSpec>,
    pub images: Vec<LabeledImage>,
    /// Full-resolution region of interest.
    pub roi: Option<RoiMask>,
}

/// Ranges the per-scene parameters are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub images_per_scene: usize,
    pub height: usize,
    pub width: usize,
    /// Lower bound of a scene's count range is drawn from here...
    pub min_count: (usize, usize),
    /// ...and its width from here.
    pub count_spread: (usize, usize),
    pub blob_sigma_top: (f64, f64),
    /// Bottom sigma = top sigma times a factor from this range.
    pub perspective_factor: (f64, f64),
    pub noise_level: (f64, f64),
    pub background_level: (f64, f64),
    pub background_contrast: (f64, f64),
    /// Number of static person-like spots baked into a scene's background.
    pub clutter: (usize, usize),
    pub clutter_amplitude: (f64, f64),
    /// Gaussian sigma of the ground-truth kernel.
    pub gt_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_scenes: 24,
            test_scenes: 5,
            images_per_scene: 40,
            height: 48,
            width: 48,
            min_count: (2, 30),
            count_spread: (2, 10),
            blob_sigma_top: (0.8, 2.0),
            perspective_factor: (1.0, 2.0),
            noise_level: (0.0, 0.08),
            background_level: (0.0, 0.3),
            background_contrast: (0.0, 0.25),
            clutter: (0, 12),
            clutter_amplitude: (0.6, 1.0),
            gt_sigma: DEFAULT_SIGMA,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self, max_k: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.train_scenes + self.test_scenes < 2 {
            return bad("need at least two scenes");
        }
        if self.images_per_scene <= max_k {
            return bad("images_per_scene must exceed the largest K");
        }
        if self.height == 0 || self.width == 0 {
            return bad("image extent must be positive");
        }
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0 >= 0.0;
        if self.min_count.0 > self.min_count.1 || self.count_spread.0 > self.count_spread.1 {
            return bad("count ranges must be ordered");
        }
        if !(ordered(self.blob_sigma_top) && self.blob_sigma_top.0 > 0.0)
            || !(ordered(self.perspective_factor) && self.perspective_factor.0 > 0.0)
            || !ordered(self.noise_level)
            || !ordered(self.background_level)
            || !ordered(self.background_contrast)
            || !ordered(self.clutter_amplitude)
            || self.clutter.0 > self.clutter.1
        {
            return bad("parameter ranges must be ordered and nonnegative (sigmas positive)");
        }
        if !(self.gt_sigma > 0.0) {
            return bad("gt_sigma must be positive");
        }
        Ok(())
    }

    fn draw_spec(&self, id: u32, rng: &mut ChaCha8Rng) -> SceneSpec {
        let uniform = |rng: &mut ChaCha8Rng, r: (f64, f64)| {
            if r.0 == r.1 { r.0 } else { rng.random_range(r.0..r.1) }
        };
        let lo = rng.random_range(self.min_count.0..=self.min_count.1);
        let spread = rng.random_range(self.count_spread.0..=self.count_spread.1);
        let top = uniform(rng, self.blob_sigma_top);
        let bottom = top * uniform(rng, self.perspective_factor);
        SceneSpec {
            id,
            count_range: (lo, lo + spread),
            blob_sigma: (top, bottom),
            background_seed: rng.random(),
            noise_level: uniform(rng, self.noise_level),
            height: self.height,
            width: self.width,
            roi_top: rng.random_range(0..=self.height / 4),
        }
    }
}

struct BackgroundStyle {
    level: f64,
    contrast: f64,
    clutter: usize,
    clutter_amplitude: (f64, f64),
}

/// Static per-scene background: a base level, smooth gradients, soft patches,
/// and clutter spots shaped like people at their row.
fn render_background(spec: &SceneSpec, style: &BackgroundStyle) -> Vec<f64> {
    let BackgroundStyle { level, contrast, .. } = *style;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let (h, w) = (spec.height, spec.width);
    let mut bg = vec![level; h * w];
    for _ in 0..3 {
        let fx = rng.random_range(0.5..2.5) * std::f64::consts::TAU / w as f64;
        let fy = rng.random_range(0.5..2.5) * std::f64::consts::TAU / h as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = contrast * rng.random_range(0.2..0.5);
        for (i, v) in bg.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            *v += amp * (fx * x + fy * y + phase).sin();
        }
    }
    for _ in 0..4 {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let s = rng.random_range(2.0..6.0);
        let amp = contrast * rng.random_range(-1.0..1.0);
        for (i, v) in bg.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            let d2 = (x - cx).powi(2) + (y - cy).powi(2);
            *v += amp * (-d2 / (2.0 * s * s)).exp();
        }
    }
    let (a0, a1) = style.clutter_amplitude;
    for _ in 0..style.clutter {
        let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let amp = if a0 == a1 { a0 } else { rng.random_range(a0..a1) };
        add_blob(&mut bg, h, w, cx, cy, spec.blob_sigma_at(cy), amp);
    }
    bg
}

fn add_blob(img: &mut [f64], h: usize, w: usize, cx: f64, cy: f64, s: f64, amp: f64) {
    let r = (3.0 * s).ceil() as isize + 1;
    let (px, py) = (cx.floor() as isize, cy.floor() as isize);
    for y in (py - r).max(0)..(py + r + 1).min(h as isize) {
        for x in (px - r).max(0)..(px + r + 1).min(w as isize) {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            img[y as usize * w + x as usize] += amp * (-d2 / (2.0 * s * s)).exp();
        }
    }
}

/// Renders one image; returns pixels and blob centers.
fn render_image(spec: &SceneSpec, background: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<(f64, f64)>) {
    let (h, w) = (spec.height, spec.width);
    let n = rng.random_range(spec.count_range.0..=spec.count_range.1);
    let points: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let mut img = background.to_vec();
    for &(cx, cy) in &points {
        add_blob(&mut img, h, w, cx, cy, spec.blob_sigma_at(cy), 1.0);
    }
    if spec.noise_level > 0.0 {
        let noise = Normal::new(0.0, spec.noise_level).expect("noise level is finite");
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    (img, points)
}

fn generate_scene(
    cfg: &SyntheticConfig,
    id: u32,
    seed: u64,
    downsample: usize,
) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = cfg.draw_spec(id, &mut rng);
    spec.validate()?;
    let style = BackgroundStyle {
        level: rng.random_range(cfg.background_level.0..=cfg.background_level.1),
        contrast: rng.random_range(cfg.background_contrast.0..=cfg.background_contrast.1),
        clutter: rng.random_range(cfg.clutter.0..=cfg.clutter.1),
        clutter_amplitude: cfg.clutter_amplitude,
    };
    let background = render_background(&spec, &style);
    let mut images = Vec::with_capacity(cfg.images_per_scene);
    for _ in 0..cfg.images_per_scene {
        let (pixels, points) = render_image(&spec, &background, &mut rng);
        let image = Tensor::new(vec![spec.height, spec.width], pixels)?;
        let annotation = DotAnnotation::new(spec.height, spec.width, points)?;
        images.push(LabeledImage::new(image, annotation, cfg.gt_sigma, downsample)?);
    }
    Ok(Scene {
        id,
        roi: Some(spec.roi()),
        spec: Some(spec),
        images,
    })
}

/// Generates `n_scenes` scenes, each drawn deterministically from `master_seed`.
pub fn generate_scene_pool(
    cfg: &SyntheticConfig,
    n_scenes: usize,
    master_seed: u64,
    downsample: usize,
) -> Result<Vec<Scene>> {
    if n_scenes < 2 {
        return Err(Error::InvalidConfig("need at least two scenes".into()));
    }
    if cfg.height % downsample != 0 || cfg.width % downsample != 0 {
        return Err(Error::InvalidConfig(format!(
            "image extent {}x{} not divisible by {downsample}",
            cfg.height, cfg.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let seeds: Vec<u64> = (0..n_scenes).map(|_| rng.random()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| generate_scene(cfg, i as u32, s, downsample))
        .collect()
}

/// Training and held-out scenes of the synthetic benchmark.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn generate_benchmark(cfg: &SyntheticConfig, master_seed: u64, downsample: usize) -> Result<Benchmark> {
    let mut all = generate_scene_pool(cfg, cfg.train_scenes + cfg.test_scenes, master_seed, downsample)?;
    let test = all.split_off(cfg.train_scenes);
    Ok(Benchmark { train: all, test })
}

/// One task: K training shots and the held-out remainder of a scene.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    /// Index into the pool.
    pub scene: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Episode {
    pub fn train_images<'a>(&self, pool: &'a [Scene]) -> Vec<&'a LabeledImage> {
        self.train.iter().map(|&i| &pool[self.scene].images[i]).collect()
    }

    pub fn test_images<'a>(&self, pool: &'a [Scene]) -> Vec<&'a LabeledImage> {
        self.test.iter().map(|&i| &pool[self.scene].images[i]).collect()
    }
}

/// Splits a scene's images into K random shots and the (shuffled) remainder.
pub fn split_scene(n_images: usize, k: usize, rng: &mut impl Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k >= n_images {
        return Err(Error::InvalidInput(format!(
            "K = {k} needs 1 <= K < images in scene ({n_images})"
        )));
    }
    let mut idx: Vec<usize> = (0..n_images).collect();
    idx.shuffle(rng);
    let test = idx.split_off(k);
    Ok((idx, test))
}

/// Picks a scene uniformly, then K distinct training images; the rest form the test split.
pub fn sample_episode(pool: &[Scene], k: usize, rng: &mut impl Rng) -> Result<Episode> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty scene pool".into()));
    }
    let scene = rng.random_range(0..pool.len());
    let (train, test) = split_scene(pool[scene].images.len(), k, rng)?;
    Ok(Episode { scene, train, test })
}

fn scene_dir(root: &Path, id: u32) -> PathBuf {
    root.join(format!("scene_{id:03}"))
}

/// Writes scenes in the dataset layout (16-bit graymaps).
pub fn write_dataset(root: &Path, scenes: &[Scene]) -> Result<()> {
    for scene in scenes {
        let dir = scene_dir(root, scene.id);
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut records = Vec::with_capacity(scene.images.len());
        for (i, li) in scene.images.iter().enumerate() {
            let rel = format!("images/{i:04}.pgm");
            let s = li.image.shape();
            let gray = GrayImage {
                height: s[0],
                width: s[1],
                pixels: li.image.data().to_vec(),
            };
            pgm::write(&dir.join(&rel), &gray, 16)?;
            records.push(AnnotationRecord {
                image: rel,
                annotation: li.annotation.clone(),
            });
        }
        let ann_path = dir.join("annotations.txt");
        fs::write(&ann_path, density::format_annotations(&records)).map_err(|e| Error::io(&ann_path, e))?;
        if let Some(roi) = &scene.roi {
            let gray = GrayImage {
                height: roi.height(),
                width: roi.width(),
                pixels: roi.as_weights(),
            };
            pgm::write(&dir.join("roi.pgm"), &gray, 8)?;
        }
    }
    Ok(())
}

/// Loads every `scene_<id>` directory under `root`, in id order.
pub fn load_dataset(root: &Path, sigma: f64, downsample: usize) -> Result<Vec<Scene>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(id) = name.strip_prefix("scene_") else { continue };
        let id: u32 = id.parse().map_err(|_| Error::Parse {
            path: entry.path(),
            line: 0,
            msg: "scene directory must be named scene_<number>".into(),
        })?;
        dirs.push((id, entry.path()));
    }
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("no scene_<id> directories under {}", root.display())));
    }
    dirs.sort();
    dirs.par_iter().map(|(id, dir)| load_scene(*id, dir, sigma, downsample)).collect()
}

fn load_scene(id: u32, dir: &Path, sigma: f64, downsample: usize) -> Result<Scene> {
    let ann_path = dir.join("annotations.txt");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let records = density::parse_annotation_lines(&text, &ann_path)?;
    let mut images = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let img_path = dir.join(&rec.image);
        let gray = pgm::read(&img_path)?;
        if (gray.height, gray.width) != (rec.annotation.height, rec.annotation.width) {
            return Err(Error::Parse {
                path: ann_path.clone(),
                line,
                msg: format!(
                    "annotation extent {}x{} does not match image {}x{}",
                    rec.annotation.height, rec.annotation.width, gray.height, gray.width
                ),
            });
        }
        let image = Tensor::new(vec![gray.height, gray.width], gray.pixels)?;
        images.push(LabeledImage::new(image, rec.annotation, sigma, downsample).map_err(|e| Error::Parse {
            path: ann_path.clone(),
            line,
            msg: e.to_string(),
        })?);
    }
    let roi_path = dir.join("roi.pgm");
    let roi = if roi_path.exists() {
        let g = pgm::read(&roi_path)?;
        Some(RoiMask::from_gray(g.height, g.width, &g.pixels)?)
    } else {
        None
    };
    Ok(Scene {
        id,
        spec: None,
        images,
        roi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            train_scenes: 3,
            test_scenes: 1,
            images_per_scene: 8,
            height: 16,
            width: 16,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn pool_is_deterministic() {
        let a = generate_scene_pool(&small(), 3, 7, 4).unwrap();
        let b = generate_scene_pool(&small(), 3, 7, 4).unwrap();
        assert_eq!(a, b);
        let c = generate_scene_pool(&small(), 3, 8, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_count_range_is_honored() {
        let cfg = SyntheticConfig {
            min_count: (5, 5),
            count_spread: (0, 0),
            ..small()
        };
        for scene in generate_scene_pool(&cfg, 2, 1, 4).unwrap() {
            assert_eq!(scene.spec.as_ref().unwrap().count_range, (5, 5));
            for li in &scene.images {
                assert_eq!(li.annotation.len(), 5);
                let c = density::count(&li.density, None).unwrap();
                assert!((c - 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn images_are_in_unit_range() {
        for scene in generate_scene_pool(&small(), 2, 3, 4).unwrap() {
            for li in &scene.images {
                assert!(li.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(li.density.height(), 4);
            }
        }
    }

    #[test]
    fn too_few_scenes_or_bad_extent() {
        assert!(generate_scene_pool(&small(), 1, 0, 4).is_err());
        let cfg = SyntheticConfig { height: 18, ..small() };
        assert!(generate_scene_pool(&cfg, 2, 0, 4).is_err());
    }

    #[test]
    fn episode_k_bounds() {
        let pool = generate_scene_pool(&small(), 2, 0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [1, 5] {
            let e = sample_episode(&pool, k, &mut rng).unwrap();
            assert_eq!(e.train.len(), k);
            assert_eq!(e.test.len(), 8 - k);
        }
        assert!(sample_episode(&pool, 8, &mut rng).is_err());
        assert!(sample_episode(&pool, 0, &mut rng).is_err());
    }
}
