//! Inner-loop adaptation, second-order MAML outer updates, Reptile, and the
//! supervised pretraining / fine-tuning baselines.
//!
//! After pretraining the feature extractor is frozen, so every routine here
//! except [`pretrain`] works on cached extractor features ([`PreparedScene`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::par::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::density::RoiMask;
use crate::error::{Error, Result};
use crate::nn::{self, init_model, unflatten, ModelParams, NetConfig, Trainable};
use crate::scenes::{self, Episode, LabeledImage, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamParams {
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner (adaptation) SGD rate.
    pub alpha: f64,
    /// Outer Adam rate.
    pub beta: f64,
    pub inner_steps: usize,
    /// Scenes per outer update.
    pub meta_batch: usize,
    pub outer_iterations: usize,
    /// Shots per episode during meta-training.
    pub k: usize,
    pub second_order: bool,
    /// Cap on test images per meta-training episode.
    pub meta_test_size: usize,
    pub adam: AdamParams,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub reptile_inner_steps: usize,
    /// Interpolation rate toward the adapted parameters.
    pub reptile_rate: f64,
    pub reptile_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-5,
            beta: 1e-3,
            inner_steps: 1,
            meta_batch: 1,
            outer_iterations: 2000,
            k: 5,
            second_order: true,
            meta_test_size: 10,
            adam: AdamParams::default(),
            seed: 0,
            pretrain_epochs: 8,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            reptile_inner_steps: 10,
            reptile_rate: 0.2,
            reptile_iterations: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.alpha) || !pos(self.beta) {
            return bad("alpha and beta must be positive");
        }
        if self.inner_steps == 0 || self.meta_batch == 0 || self.k == 0 || self.meta_test_size == 0 {
            return bad("inner_steps, meta_batch, k and meta_test_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam.b1) || !(0.0..1.0).contains(&self.adam.b2) || !pos(self.adam.eps) {
            return bad("adam parameters out of range");
        }
        if self.pretrain_batch == 0 || !pos(self.pretrain_lr) {
            return bad("pretrain_batch and pretrain_lr must be positive");
        }
        if self.reptile_inner_steps == 0 || !(self.reptile_rate > 0.0 && self.reptile_rate <= 1.0) {
            return bad("reptile_inner_steps >= 1 and reptile_rate in (0, 1] required");
        }
        Ok(())
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, adam: AdamParams) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - adam.b1.powi(t);
        let c2 = 1.0 - adam.b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape());
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = adam.b1 * m[i] + (1.0 - adam.b1) * gi;
                v[i] = adam.b2 * v[i] + (1.0 - adam.b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + adam.eps);
            }
        }
    }
}

/// Cached extractor output and ground truth for one image.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    pub features: Tensor,
    pub target: Tensor,
}

#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub images: Vec<PreparedImage>,
    /// Region of interest at output resolution, as 0/1 weights.
    pub roi: Option<Tensor>,
    pub roi_mask: Option<RoiMask>,
}

impl PreparedScene {
    pub fn select(&self, idx: &[usize]) -> Vec<&PreparedImage> {
        idx.iter().map(|&i| &self.images[i]).collect()
    }
}

/// Runs the (frozen) extractor over every image of every scene.
pub fn prepare(params: &ModelParams, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes.iter().map(|s| prepare_scene(params, s)).collect()
}

pub fn prepare_scene(params: &ModelParams, scene: &Scene) -> Result<PreparedScene> {
    let images = scene
        .images
        .par_iter()
        .map(|li| {
            Ok(PreparedImage {
                features: params.features(&li.image)?,
                target: li.density_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let roi_mask = match &scene.roi {
        Some(r) => Some(r.downsample(params.downsample())?),
        None => None,
    };
    let roi = match &roi_mask {
        Some(m) => Some(Tensor::new(vec![m.height(), m.width()], m.as_weights())?),
        None => None,
    };
    Ok(PreparedScene { images, roi, roi_mask })
}

fn batch<'a>(images: &[&'a PreparedImage]) -> Vec<(&'a Tensor, &'a Tensor)> {
    images.iter().map(|p| (&p.features, &p.target)).collect()
}

/// Inner-loop settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnerLoop {
    pub alpha: f64,
    pub steps: usize,
    /// Record gradients as graph nodes so later losses differentiate through the update.
    pub second_order: bool,
}

impl InnerLoop {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        InnerLoop {
            alpha: cfg.alpha,
            steps: cfg.inner_steps,
            second_order: cfg.second_order,
        }
    }
}

/// Records `inner.steps` SGD updates of `start` on the scalar built by `loss`.
/// Without `second_order` the gradients enter the graph as constants
/// (first-order approximation).
pub fn sgd_in_graph<F>(g: &mut Graph, start: &[Var], inner: InnerLoop, mut loss: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut cur = start.to_vec();
    for _ in 0..inner.steps {
        let l = loss(g, &cur)?;
        let grads = if inner.second_order {
            g.backward_differentiable(l, &cur)?
        } else {
            let rec = g.backward(l, &cur)?;
            rec.into_tensors().into_iter().map(|t| g.constant(t)).collect()
        };
        let mut next = Vec::with_capacity(cur.len());
        for (&p, gr) in cur.iter().zip(grads) {
            let step = g.scale(gr, inner.alpha)?;
            next.push(g.sub(p, step)?);
        }
        cur = next;
    }
    Ok(cur)
}

/// Post-adaptation loss and its gradient with respect to `theta`: adapts with
/// `inner` on `train_loss`, then evaluates `test_loss` at the adapted point.
pub fn maml_gradient<F, G>(theta: &[&Tensor], inner: InnerLoop, train_loss: F, test_loss: G) -> Result<(f64, Vec<Tensor>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
    G: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| g.variable((*t).clone())).collect();
    let adapted = sgd_in_graph(&mut g, &vars, inner, train_loss)?;
    let loss = test_loss(&mut g, &adapted)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss, &vars)?.into_tensors()))
}

/// One numeric SGD step. Returns the loss before the step and the updated tensors.
pub fn sgd_step<F>(theta: &[&Tensor], alpha: f64, loss: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = theta.iter().map(|t| g.variable((*t).clone())).collect();
    let l = loss(&mut g, &vars)?;
    let value = g.value(l).item();
    let grads = g.backward(l, &vars)?.into_tensors();
    let next = theta.iter().zip(&grads).map(|(p, gr)| p.zip_map(gr, |a, b| a - alpha * b)).collect();
    Ok((value, next))
}

/// `theta + rate * (adapted - theta)`, elementwise.
pub fn interpolate(theta: &[&Tensor], adapted: &[&Tensor], rate: f64) -> Vec<Tensor> {
    theta
        .iter()
        .zip(adapted)
        .map(|(p, a)| if rate == 1.0 { (*a).clone() } else { p.zip_map(a, |x, y| x + rate * (y - x)) })
        .collect()
}

/// Records SGD updates of the estimator on `shots`, starting from `start`
/// (flat weight/bias vars).
pub fn adapt_in_graph(
    g: &mut Graph,
    params: &ModelParams,
    start: &[Var],
    shots: &[&PreparedImage],
    inner: InnerLoop,
    roi: Option<&Tensor>,
) -> Result<Vec<Var>> {
    if shots.is_empty() {
        return Err(Error::InvalidInput("adaptation needs at least one shot".into()));
    }
    let data = batch(shots);
    sgd_in_graph(g, start, inner, |g, cur| nn::estimator_loss(g, params, &unflatten(cur), &data, roi))
}

/// Adapts the estimator of `params` to `shots` with `cfg.inner_steps` SGD steps
/// at rate `cfg.alpha`; the extractor is untouched.
pub fn inner_adapt(params: &ModelParams, shots: &[&LabeledImage], cfg: &TrainConfig) -> Result<ModelParams> {
    if shots.is_empty() {
        return Err(Error::InvalidInput("adaptation needs at least one shot".into()));
    }
    let prepared = shots
        .iter()
        .map(|li| {
            Ok(PreparedImage {
                features: params.features(&li.image)?,
                target: li.density_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedImage> = prepared.iter().collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::EstimatorOnly);
    let adapted = adapt_in_graph(
        &mut g,
        params,
        &bound.estimator_vars(),
        &refs,
        InnerLoop::from_config(cfg),
        None,
    )?;
    params.with_estimator(adapted.iter().map(|v| g.value(*v).clone()).collect())
}

/// Post-adaptation test loss of one episode and its gradient with respect to
/// the estimator parameters before adaptation.
pub fn episode_meta_gradient(
    params: &ModelParams,
    scene: &PreparedScene,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let shots = scene.select(&episode.train);
    if shots.is_empty() {
        return Err(Error::InvalidInput("adaptation needs at least one shot".into()));
    }
    let n_test = episode.test.len().min(cfg.meta_test_size);
    if n_test == 0 {
        return Err(Error::InvalidInput("episode has no test images".into()));
    }
    let train = batch(&shots);
    let test = scene.select(&episode.test[..n_test]);
    let test = batch(&test);
    maml_gradient(
        &params.estimator_tensors(),
        InnerLoop::from_config(cfg),
        |g, cur| nn::estimator_loss(g, params, &unflatten(cur), &train, None),
        |g, cur| nn::estimator_loss(g, params, &unflatten(cur), &test, None),
    )
}

/// One outer update: summed post-adaptation test losses over `episodes`,
/// differentiated through the inner update, applied with Adam at rate `beta`.
pub fn meta_step(
    params: &ModelParams,
    pool: &[PreparedScene],
    episodes: &[Episode],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<(ModelParams, f64)> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("meta_step needs at least one episode".into()));
    }
    let results = episodes
        .par_iter()
        .map(|e| episode_meta_gradient(params, &pool[e.scene], e, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for (loss, gr) in results {
        total += loss;
        grads = Some(match grads {
            None => gr,
            Some(acc) => acc.iter().zip(&gr).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect(),
        });
    }
    let mut est: Vec<Tensor> = params.estimator_tensors().into_iter().cloned().collect();
    opt.apply(&mut est, &grads.unwrap(), cfg.beta, cfg.adam);
    Ok((params.with_estimator(est)?, total))
}

fn check_pool(pool: &[PreparedScene], k: usize) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty training pool".into()));
    }
    if let Some(s) = pool.iter().find(|s| s.images.len() <= k) {
        return Err(Error::InvalidInput(format!(
            "scene with {} images cannot supply K = {k} shots plus a test split",
            s.images.len()
        )));
    }
    Ok(())
}

fn sample_prepared_episode(pool: &[PreparedScene], k: usize, rng: &mut ChaCha8Rng) -> Result<Episode> {
    use rand::Rng;
    let scene = rng.random_range(0..pool.len());
    let (train, test) = scenes::split_scene(pool[scene].images.len(), k, rng)?;
    Ok(Episode { scene, train, test })
}

/// MAML meta-training from `init`. Returns the meta-learned parameters and the
/// `(iteration, meta-loss)` log.
pub fn metatrain(init: &ModelParams, pool: &[PreparedScene], cfg: &TrainConfig) -> Result<(ModelParams, Vec<(usize, f64)>)> {
    cfg.validate()?;
    check_pool(pool, cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut opt = OptimizerState::new(&params.estimator_tensors());
    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for it in 0..cfg.outer_iterations {
        let episodes = (0..cfg.meta_batch)
            .map(|_| sample_prepared_episode(pool, cfg.k, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (next, loss) = meta_step(&params, pool, &episodes, cfg, &mut opt)?;
        params = next;
        log.push((it, loss));
    }
    Ok((params, log))
}

/// Plain SGD on the estimator, rate `alpha`. Calls `on_step(step, params)` for
/// `step = 0..=steps` (0 is before any update) and returns the training loss
/// measured before each update.
pub fn finetune_prepared(
    params: &ModelParams,
    shots: &[&PreparedImage],
    steps: usize,
    alpha: f64,
    roi: Option<&Tensor>,
    mut on_step: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, Vec<f64>)> {
    if shots.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one shot".into()));
    }
    let data = batch(shots);
    let mut cur = params.clone();
    let mut curve = Vec::with_capacity(steps);
    on_step(0, &cur)?;
    for step in 1..=steps {
        let (loss, updated) = sgd_step(&cur.estimator_tensors(), alpha, |g, vars| {
            nn::estimator_loss(g, &cur, &unflatten(vars), &data, roi)
        })?;
        curve.push(loss);
        cur = cur.with_estimator(updated)?;
        on_step(step, &cur)?;
    }
    Ok((cur, curve))
}

/// Fine-tunes the estimator on labeled shots for `steps` SGD steps at `cfg.alpha`.
pub fn finetune(
    params: &ModelParams,
    shots: &[&LabeledImage],
    steps: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    if shots.is_empty() {
        return Err(Error::InvalidInput("fine-tuning needs at least one shot".into()));
    }
    let prepared = shots
        .iter()
        .map(|li| {
            Ok(PreparedImage {
                features: params.features(&li.image)?,
                target: li.density_tensor(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PreparedImage> = prepared.iter().collect();
    finetune_prepared(params, &refs, steps, cfg.alpha, None, |_, _| Ok(()))
}

/// Moves the estimator toward its adaptation on the episode's shots:
/// `theta += rate * (adapted - theta)`.
pub fn reptile_step(params: &ModelParams, scene: &PreparedScene, episode: &Episode, cfg: &TrainConfig) -> Result<ModelParams> {
    let shots = scene.select(&episode.train);
    let (adapted, _) = finetune_prepared(params, &shots, cfg.reptile_inner_steps, cfg.alpha, None, |_, _| Ok(()))?;
    let moved = interpolate(&params.estimator_tensors(), &adapted.estimator_tensors(), cfg.reptile_rate);
    params.with_estimator(moved)
}

pub fn reptile_train(init: &ModelParams, pool: &[PreparedScene], cfg: &TrainConfig) -> Result<(ModelParams, Vec<(usize, f64)>)> {
    cfg.validate()?;
    check_pool(pool, cfg.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.clone();
    let mut log = Vec::with_capacity(cfg.reptile_iterations);
    for it in 0..cfg.reptile_iterations {
        let e = sample_prepared_episode(pool, cfg.k, &mut rng)?;
        let scene = &pool[e.scene];
        params = reptile_step(&params, scene, &e, cfg)?;
        let n_test = e.test.len().min(cfg.meta_test_size);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, Trainable::EstimatorOnly);
        let test = scene.select(&e.test[..n_test]);
        let loss = nn::estimator_loss(&mut g, &params, &bound.estimator, &batch(&test), None)?;
        log.push((it, g.value(loss).item()));
    }
    Ok((params, log))
}

/// Supervised training of the whole network on every image of every scene
/// (mini-batch Adam). Returns the model and the per-epoch mean batch loss.
pub fn pretrain(pool: &[Scene], net: &NetConfig, cfg: &TrainConfig) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let images: Vec<&LabeledImage> = pool.iter().flat_map(|s| &s.images).collect();
    if images.is_empty() {
        return Err(Error::InvalidInput("pretraining pool has no images".into()));
    }
    let mut params = init_model(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(&params.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.pretrain_batch) {
            let per_image = chunk
                .par_iter()
                .map(|&i| image_gradient(&params, images[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for (l, gr) in per_image {
                loss += l;
                grads = Some(match grads {
                    None => gr,
                    Some(acc) => acc.iter().zip(&gr).map(|(a, b)| a.zip_map(b, |x, y| x + y)).collect(),
                });
            }
            let mut all: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            opt.apply(&mut all, &grads.unwrap(), cfg.pretrain_lr, cfg.adam);
            params = params.with_all(all)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
    }
    Ok((params, epoch_losses))
}

fn image_gradient(params: &ModelParams, li: &LabeledImage) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::All);
    let target = li.density_tensor();
    let loss = nn::episode_loss(&mut g, params, &bound, &[(&li.image, &target)], None)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss, &bound.all_vars())?.into_tensors();
    Ok((value, grads))
}

/// Summed squared-error loss of a model on labeled images (no gradients).
pub fn dataset_loss(params: &ModelParams, images: &[&LabeledImage]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, Trainable::EstimatorOnly);
    let targets: Vec<Tensor> = images.iter().map(|li| li.density_tensor()).collect();
    let data: Vec<(&Tensor, &Tensor)> = images.iter().zip(&targets).map(|(li, t)| (&li.image, t)).collect();
    let loss = nn::episode_loss(&mut g, params, &bound, &data, None)?;
    Ok(g.value(loss).item())
}
