//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function wraps a plain Rust function (the `*_impl` ones) so
//! the logic can be tested natively.

use metacount::autodiff::{Graph, Tensor, Var};
use metacount::density::{count, make_density_map, DotAnnotation};
use metacount::metatrain::{maml_gradient, InnerLoop};
use metacount::scenes::{generate_scene_pool, SyntheticConfig};
use wasm_bindgen::prelude::*;

/// A row-major grid plus its total.
#[wasm_bindgen]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
    total: f64,
}

#[wasm_bindgen]
impl Grid {
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn data(&self) -> Vec<f64> {
        self.data.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn total(&self) -> f64 {
        self.total
    }
}

impl Grid {
    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Density map for clicked head positions, given as a flat `[x0, y0, x1, y1, ...]`.
pub fn density_impl(height: usize, width: usize, points: &[f64], sigma: f64) -> Result<Grid, String> {
    if points.len() % 2 != 0 {
        return Err("points must be x,y pairs".into());
    }
    let pts = points.chunks(2).map(|p| (p[0], p[1])).collect();
    let ann = DotAnnotation::new(height, width, pts).map_err(|e| e.to_string())?;
    let map = make_density_map(&ann, sigma).map_err(|e| e.to_string())?;
    let total = count(&map, None).map_err(|e| e.to_string())?;
    Ok(Grid { height, width, data: map.data().to_vec(), total })
}

#[wasm_bindgen]
pub fn density_map(height: usize, width: usize, points: &[f64], sigma: f64) -> Result<Grid, JsError> {
    density_impl(height, width, points, sigma).map_err(|e| JsError::new(&e))
}

/// One synthetic image with its annotation and downsampled ground truth.
#[wasm_bindgen]
pub struct SceneSample {
    image: Grid,
    density: Grid,
    points: Vec<f64>,
    roi_top: usize,
}

#[wasm_bindgen]
impl SceneSample {
    #[wasm_bindgen(getter)]
    pub fn image(&self) -> Grid {
        Grid { data: self.image.data.clone(), ..self.image }
    }

    #[wasm_bindgen(getter)]
    pub fn density(&self) -> Grid {
        Grid { data: self.density.data.clone(), ..self.density }
    }

    /// Annotated head positions, flat `[x0, y0, ...]`.
    #[wasm_bindgen(getter)]
    pub fn points(&self) -> Vec<f64> {
        self.points.clone()
    }

    /// First row inside the scene's region of interest.
    #[wasm_bindgen(getter)]
    pub fn roi_top(&self) -> usize {
        self.roi_top
    }
}

const DEMO_SCENES: usize = 4;
const DEMO_IMAGES: usize = 6;
const DOWNSAMPLE: usize = 4;

pub fn scene_impl(seed: u64, scene: usize, image: usize) -> Result<SceneSample, String> {
    if scene >= DEMO_SCENES || image >= DEMO_IMAGES {
        return Err(format!("scene < {DEMO_SCENES} and image < {DEMO_IMAGES} required"));
    }
    let cfg = SyntheticConfig { images_per_scene: DEMO_IMAGES, ..SyntheticConfig::default() };
    let mut pool = generate_scene_pool(&cfg, DEMO_SCENES, seed, DOWNSAMPLE).map_err(|e| e.to_string())?;
    let s = pool.swap_remove(scene);
    let spec = s.spec.expect("generated scenes carry their spec");
    let li = &s.images[image];
    let shape = li.image.shape();
    let total = li.annotation.len() as f64;
    Ok(SceneSample {
        image: Grid { height: shape[0], width: shape[1], data: li.image.data().to_vec(), total },
        density: Grid {
            height: li.density.height(),
            width: li.density.width(),
            data: li.density.data().to_vec(),
            total: count(&li.density, None).map_err(|e| e.to_string())?,
        },
        points: li.annotation.points.iter().flat_map(|&(x, y)| [x, y]).collect(),
        roi_top: spec.roi_top,
    })
}

#[wasm_bindgen]
pub fn synthetic_scene(seed: u64, scene: usize, image: usize) -> Result<SceneSample, JsError> {
    scene_impl(seed, scene, image).map_err(|e| JsError::new(&e))
}

/// Meta-gradient of `(w~ - c)^2` where `w~` is one SGD step on `(w - c)^2`,
/// with and without differentiating through the step.
#[wasm_bindgen]
pub struct MetaGradient {
    pub adapted: f64,
    pub second_order: f64,
    pub first_order: f64,
    pub closed_form: f64,
}

pub fn quadratic_impl(w: f64, c: f64, alpha: f64) -> Result<MetaGradient, String> {
    let loss = |g: &mut Graph, v: &[Var]| {
        let cv = g.constant(Tensor::scalar(c));
        let d = g.sub(v[0], cv)?;
        g.square(d)
    };
    let grad = |second_order| {
        let inner = InnerLoop { alpha, steps: 1, second_order };
        maml_gradient(&[&Tensor::scalar(w)], inner, loss, loss)
            .map(|(_, g)| g[0].item())
            .map_err(|e| e.to_string())
    };
    Ok(MetaGradient {
        adapted: w - 2.0 * alpha * (w - c),
        second_order: grad(true)?,
        first_order: grad(false)?,
        closed_form: 2.0 * (1.0 - 2.0 * alpha).powi(2) * (w - c),
    })
}

#[wasm_bindgen]
pub fn quadratic_meta_gradient(w: f64, c: f64, alpha: f64) -> Result<MetaGradient, JsError> {
    quadratic_impl(w, c, alpha).map_err(|e| JsError::new(&e))
}
