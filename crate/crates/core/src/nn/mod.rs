//! Convolutional density estimator: a strided feature extractor followed by
//! a stack of dilated convolutions that regresses a density map at
//! `1 / downsample` of the input resolution.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub extractor: Vec<ExtractorLayer>,
    pub estimator: Vec<EstimatorLayer>,
    /// Standard deviation of the Gaussian used for estimator weights.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            extractor: vec![
                ExtractorLayer { out_channels: 8, kernel: 3, stride: 1 },
                ExtractorLayer { out_channels: 16, kernel: 3, stride: 2 },
                ExtractorLayer { out_channels: 16, kernel: 3, stride: 2 },
            ],
            estimator: vec![
                EstimatorLayer { out_channels: 8, kernel: 3, dilation: 2 },
                EstimatorLayer { out_channels: 8, kernel: 3, dilation: 2 },
                EstimatorLayer { out_channels: 1, kernel: 1, dilation: 2 },
            ],
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.init_std > 0.0) || !self.init_std.is_finite() {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if self.extractor.is_empty() || self.estimator.is_empty() {
            return bad("extractor and estimator need at least one layer each".into());
        }
        for (i, l) in self.extractor.iter().enumerate() {
            if l.out_channels == 0 || l.stride == 0 || l.kernel % 2 == 0 {
                return bad(format!("extractor layer {i}: channels and stride must be >= 1, kernel odd"));
            }
        }
        for (i, l) in self.estimator.iter().enumerate() {
            if l.dilation == 0 {
                return bad(format!("estimator layer {i}: dilation must be >= 1"));
            }
            if l.out_channels == 0 || l.kernel % 2 == 0 {
                return bad(format!("estimator layer {i}: channels must be >= 1, kernel odd"));
            }
        }
        if self.estimator.last().unwrap().out_channels != 1 {
            return bad("estimator must end with a single output channel".into());
        }
        Ok(())
    }

    /// Cumulative stride of the extractor.
    pub fn downsample(&self) -> usize {
        self.extractor.iter().map(|l| l.stride).product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvLayer {
    pub fn geometry(&self) -> ConvGeometry {
        let k = self.weight.shape()[2];
        ConvGeometry {
            stride: self.stride,
            dilation: self.dilation,
            padding: self.dilation * (k - 1) / 2,
        }
    }
}

/// Which parameters get bound as graph variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    EstimatorOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    pub extractor: Vec<LayerVars>,
    pub estimator: Vec<LayerVars>,
}

impl BoundParams {
    pub fn estimator_vars(&self) -> Vec<Var> {
        flatten(&self.estimator)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        let mut v = flatten(&self.extractor);
        v.extend(flatten(&self.estimator));
        v
    }
}

pub fn flatten(layers: &[LayerVars]) -> Vec<Var> {
    layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
}

/// Inverse of [`flatten`].
pub fn unflatten(vars: &[Var]) -> Vec<LayerVars> {
    vars.chunks(2)
        .map(|p| LayerVars {
            weight: p[0],
            bias: p[1],
        })
        .collect()
}

/// Network parameters split into a feature-extractor block and a
/// density-estimator block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: NetConfig,
    pub extractor: Vec<ConvLayer>,
    pub estimator: Vec<ConvLayer>,
}

pub fn init_model(config: &NetConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut in_ch = 1;
    let mut extractor = Vec::new();
    for l in &config.extractor {
        let fan_in = (in_ch * l.kernel * l.kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = [l.out_channels, in_ch, l.kernel, l.kernel];
        let weight = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
        extractor.push(ConvLayer {
            weight,
            bias: Tensor::zeros(&[l.out_channels]),
            stride: l.stride,
            dilation: 1,
        });
        in_ch = l.out_channels;
    }
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::InvalidConfig(format!("init_std: {e}")))?;
    let mut estimator = Vec::new();
    for l in &config.estimator {
        let shape = [l.out_channels, in_ch, l.kernel, l.kernel];
        let weight = Tensor::from_fn(&shape, |_| normal.sample(&mut rng));
        estimator.push(ConvLayer {
            weight,
            bias: Tensor::zeros(&[l.out_channels]),
            stride: 1,
            dilation: l.dilation,
        });
        in_ch = l.out_channels;
    }
    Ok(ModelParams {
        config: config.clone(),
        extractor,
        estimator,
    })
}

impl ModelParams {
    pub fn downsample(&self) -> usize {
        self.config.downsample()
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> BoundParams {
        let bind_block = |g: &mut Graph, layers: &[ConvLayer], train: bool| -> Vec<LayerVars> {
            layers
                .iter()
                .map(|l| {
                    let (weight, bias) = if train {
                        (g.variable(l.weight.clone()), g.variable(l.bias.clone()))
                    } else {
                        (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                    };
                    LayerVars { weight, bias }
                })
                .collect()
        };
        BoundParams {
            extractor: bind_block(g, &self.extractor, trainable == Trainable::All),
            estimator: bind_block(g, &self.estimator, true),
        }
    }

    /// Named tensors in a fixed order: `extractor.<i>.weight`, `extractor.<i>.bias`, then the estimator.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (block, layers) in [("extractor", &self.extractor), ("estimator", &self.estimator)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{block}.{i}.weight"), &l.weight));
                out.push((format!("{block}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn estimator_tensors(&self) -> Vec<&Tensor> {
        self.estimator.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// Copy with the estimator block replaced; `tensors` alternate weight, bias.
    pub fn with_estimator(&self, tensors: Vec<Tensor>) -> Result<ModelParams> {
        if tensors.len() != 2 * self.estimator.len() {
            return Err(Error::shape(
                "with_estimator",
                format!("expected {} tensors, got {}", 2 * self.estimator.len(), tensors.len()),
            ));
        }
        let mut out = self.clone();
        let mut it = tensors.into_iter();
        for l in &mut out.estimator {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != l.weight.shape() || b.shape() != l.bias.shape() {
                return Err(Error::shape(
                    "with_estimator",
                    format!("{:?}/{:?} vs {:?}/{:?}", w.shape(), b.shape(), l.weight.shape(), l.bias.shape()),
                ));
            }
            l.weight = w;
            l.bias = b;
        }
        Ok(out)
    }

    /// Copy with every tensor (extractor then estimator) replaced.
    pub fn with_all(&self, tensors: Vec<Tensor>) -> Result<ModelParams> {
        let n_ext = 2 * self.extractor.len();
        if tensors.len() != n_ext + 2 * self.estimator.len() {
            return Err(Error::shape("with_all", format!("got {} tensors", tensors.len())));
        }
        let mut tensors = tensors;
        let est = tensors.split_off(n_ext);
        let mut out = self.with_estimator(est)?;
        for (l, pair) in out.extractor.iter_mut().zip(tensors.chunks(2)) {
            if pair[0].shape() != l.weight.shape() || pair[1].shape() != l.bias.shape() {
                return Err(Error::shape("with_all", "extractor tensor shape changed"));
            }
            l.weight = pair[0].clone();
            l.bias = pair[1].clone();
        }
        Ok(out)
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let s = self.downsample();
        if shape.len() != 2 || shape[0] % s != 0 || shape[1] % s != 0 {
            return Err(Error::shape(
                "forward",
                format!("image {shape:?} must be 2-D with extents divisible by {s}"),
            ));
        }
        Ok(())
    }

    /// Extractor features `[C, H/s, W/s]` of an image `[H, W]`.
    pub fn extract(&self, g: &mut Graph, bound: &BoundParams, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        self.check_image(&shape)?;
        let mut x = g.reshape(image, &[1, shape[0], shape[1]])?;
        for (l, v) in self.extractor.iter().zip(&bound.extractor) {
            x = conv_relu(g, x, v, l.geometry())?;
        }
        Ok(x)
    }

    /// Density map `[H/s, W/s]` from extractor features, using `vars` for the
    /// estimator weights (possibly adapted copies of the bound ones).
    pub fn estimate(&self, g: &mut Graph, vars: &[LayerVars], features: Var) -> Result<Var> {
        let mut x = features;
        for (l, v) in self.estimator.iter().zip(vars) {
            x = conv_relu(g, x, v, l.geometry())?;
        }
        let s = g.shape(x).to_vec();
        g.reshape(x, &[s[1], s[2]])
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, image: Var) -> Result<Var> {
        let f = self.extract(g, bound, image)?;
        self.estimate(g, &bound.estimator, f)
    }

    /// Numeric features of an image, without gradient tracking.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let x = g.constant(image.clone());
        let f = self.extract(&mut g, &bound, x)?;
        Ok(g.value(f).clone())
    }

    /// Numeric density prediction from precomputed features.
    pub fn predict_from_features(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let f = g.constant(features.clone());
        let y = self.estimate(&mut g, &bound.estimator, f)?;
        Ok(g.value(y).clone())
    }

    /// Numeric density prediction for an image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_constant(&mut g);
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &bound, x)?;
        Ok(g.value(y).clone())
    }

    fn bind_constant(&self, g: &mut Graph) -> BoundParams {
        let consts = |g: &mut Graph, layers: &[ConvLayer]| -> Vec<LayerVars> {
            layers
                .iter()
                .map(|l| LayerVars {
                    weight: g.constant(l.weight.clone()),
                    bias: g.constant(l.bias.clone()),
                })
                .collect()
        };
        BoundParams {
            extractor: consts(g, &self.extractor),
            estimator: consts(g, &self.estimator),
        }
    }
}

fn conv_relu(g: &mut Graph, x: Var, v: &LayerVars, geometry: ConvGeometry) -> Result<Var> {
    let y = g.conv2d(x, v.weight, geometry)?;
    let y = g.add_channel_bias(y, v.bias)?;
    g.relu(y)
}

/// Sum over the batch of squared Frobenius residuals, `sum_j ||(pred_j - gt_j) * roi||^2`.
pub fn squared_error_loss(
    g: &mut Graph,
    predictions: &[Var],
    targets: &[&Tensor],
    roi: Option<&Tensor>,
) -> Result<Var> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "loss needs a nonempty batch with one target per prediction ({} vs {})",
            predictions.len(),
            targets.len()
        )));
    }
    let roi = roi.map(|m| g.constant(m.clone()));
    let mut total: Option<Var> = None;
    for (&p, &t) in predictions.iter().zip(targets) {
        if g.shape(p) != t.shape() {
            return Err(Error::shape(
                "episode_loss",
                format!("prediction {:?} vs ground truth {:?}", g.shape(p), t.shape()),
            ));
        }
        let t = g.constant(t.clone());
        let mut r = g.sub(p, t)?;
        if let Some(m) = roi {
            r = g.mul(r, m)?;
        }
        let sq = g.square(r)?;
        let s = g.sum(sq)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.unwrap())
}

/// Episode loss through the full network. `batch` holds `(image, gt density at 1/s)`.
pub fn episode_loss(
    g: &mut Graph,
    params: &ModelParams,
    bound: &BoundParams,
    batch: &[(&Tensor, &Tensor)],
    roi: Option<&Tensor>,
) -> Result<Var> {
    let mut preds = Vec::with_capacity(batch.len());
    for (img, _) in batch {
        let x = g.constant((*img).clone());
        preds.push(params.forward(g, bound, x)?);
    }
    let targets: Vec<&Tensor> = batch.iter().map(|(_, t)| *t).collect();
    squared_error_loss(g, &preds, &targets, roi)
}

/// Episode loss through the estimator only, from precomputed features.
pub fn estimator_loss(
    g: &mut Graph,
    params: &ModelParams,
    vars: &[LayerVars],
    batch: &[(&Tensor, &Tensor)],
    roi: Option<&Tensor>,
) -> Result<Var> {
    let mut preds = Vec::with_capacity(batch.len());
    for (feat, _) in batch {
        let x = g.constant((*feat).clone());
        preds.push(params.estimate(g, vars, x)?);
    }
    let targets: Vec<&Tensor> = batch.iter().map(|(_, t)| *t).collect();
    squared_error_loss(g, &preds, &targets, roi)
}
