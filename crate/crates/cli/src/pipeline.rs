//! The experiment pipeline, independent of where inputs and outputs live.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use metacount::eval::{compare_methods, run_adaptation_protocol, AdaptationReport, ComparisonTable, ProtocolConfig};
use metacount::metatrain::{self, prepare, PreparedScene};
use metacount::nn::ModelParams;
use metacount::scenes::{generate_benchmark, Benchmark, Scene};

use crate::config::ExperimentConfig;
use crate::CliError;

/// Trained parameter sets a method can start from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Pretrained,
    Maml,
    Reptile,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pretrained => "pretrained",
            ModelKind::Maml => "maml",
            ModelKind::Reptile => "reptile",
        }
    }

    /// The command that produces this model.
    pub fn command(self) -> &'static str {
        match self {
            ModelKind::Pretrained => "pretrain",
            ModelKind::Maml => "metatrain",
            ModelKind::Reptile => "reptile",
        }
    }
}

/// Evaluation methods: a starting model, with or without fine-tuning on the K shots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Pretrained,
    Finetuned,
    MetaPretrained,
    Maml,
    Reptile,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Pretrained,
        Method::Finetuned,
        Method::MetaPretrained,
        Method::Maml,
        Method::Reptile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Finetuned => "finetuned",
            Method::MetaPretrained => "meta-pretrained",
            Method::Maml => "maml",
            Method::Reptile => "reptile",
        }
    }

    pub fn model(self) -> ModelKind {
        match self {
            Method::Pretrained | Method::Finetuned => ModelKind::Pretrained,
            Method::MetaPretrained | Method::Maml => ModelKind::Maml,
            Method::Reptile => ModelKind::Reptile,
        }
    }

    /// Whether the method fine-tunes on the target scene's shots.
    pub fn adapts(self) -> bool {
        !matches!(self, Method::Pretrained | Method::MetaPretrained)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method {s:?} (expected one of {})", names.join(", "))
        })
    }
}

/// Trial seed base for one (scene, K) cell. Shared by every method so they
/// all see the same shots.
pub fn protocol_seed(seed: u64, scene_id: u32, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((scene_id as u64) << 16 | k as u64)
}

pub fn protocol_config(cfg: &ExperimentConfig, method: Method, scene_id: u32, k: usize) -> ProtocolConfig {
    ProtocolConfig {
        k,
        steps: if method.adapts() { cfg.eval.steps } else { 0 },
        trials: cfg.eval.trials,
        alpha: cfg.train.alpha,
        roi: cfg.eval.roi,
        seed: protocol_seed(cfg.seed, scene_id, k),
    }
}

/// Runs the adaptation protocol of `method` on every test scene.
pub fn evaluate_method(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    test: &[Scene],
    method: Method,
    k: usize,
) -> Result<Vec<(u32, AdaptationReport)>, CliError> {
    let prepared = prepare(model, test)?;
    evaluate_prepared(cfg, model, test, &prepared, method, k)
}

fn evaluate_prepared(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    test: &[Scene],
    prepared: &[PreparedScene],
    method: Method,
    k: usize,
) -> Result<Vec<(u32, AdaptationReport)>, CliError> {
    if cfg.eval.roi {
        if let Some(s) = test.iter().find(|s| s.roi.is_none()) {
            return Err(CliError::Usage(format!("eval.roi is set but scene {} has no ROI", s.id)));
        }
    }
    test.iter()
        .zip(prepared)
        .map(|(scene, p)| {
            let report = run_adaptation_protocol(model, p, &protocol_config(cfg, method, scene.id, k))?;
            Ok((scene.id, report))
        })
        .collect()
}

pub fn pretrain(cfg: &ExperimentConfig, train: &[Scene]) -> Result<(ModelParams, Vec<f64>), CliError> {
    Ok(metatrain::pretrain(train, &cfg.model, &cfg.train)?)
}

/// Meta-trains from `init` with MAML or Reptile. Returns the model and the
/// `(iteration, loss)` log.
pub fn meta_learn(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    init: &ModelParams,
    train: &[Scene],
) -> Result<(ModelParams, Vec<(usize, f64)>), CliError> {
    let pool = prepare(init, train)?;
    let out = match kind {
        ModelKind::Maml => metatrain::metatrain(init, &pool, &cfg.train)?,
        ModelKind::Reptile => metatrain::reptile_train(init, &pool, &cfg.train)?,
        ModelKind::Pretrained => return Err(CliError::Usage("pretraining is not a meta-learning method".into())),
    };
    Ok(out)
}

/// One complete in-memory run: generate, train every model, evaluate every
/// method for every configured K. Returns a comparison table per K.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BTreeMap<usize, ComparisonTable>, CliError> {
    cfg.validate()?;
    let Benchmark { train, test } =
        generate_benchmark(&cfg.dataset.synthetic, cfg.seed, cfg.model.downsample())?;
    let (pre, _) = pretrain(cfg, &train)?;
    let (maml, _) = meta_learn(cfg, ModelKind::Maml, &pre, &train)?;
    let (reptile, _) = meta_learn(cfg, ModelKind::Reptile, &pre, &train)?;
    // every model shares the frozen extractor, so features are computed once
    let prepared = prepare(&pre, &test)?;
    let models = [(ModelKind::Pretrained, &pre), (ModelKind::Maml, &maml), (ModelKind::Reptile, &reptile)];
    let mut tables = BTreeMap::new();
    for &k in &cfg.eval.k {
        let mut reports = BTreeMap::new();
        for method in Method::ALL {
            let model = models.iter().find(|(kind, _)| *kind == method.model()).unwrap().1;
            let r = evaluate_prepared(cfg, model, &test, &prepared, method, k)?;
            reports.insert(method.name().to_string(), r);
        }
        tables.insert(k, compare_methods(&reports)?);
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("baseline".parse::<Method>().is_err());
    }

    #[test]
    fn baselines_do_not_adapt() {
        let cfg = ExperimentConfig::default();
        assert_eq!(protocol_config(&cfg, Method::Pretrained, 3, 5).steps, 0);
        assert_eq!(protocol_config(&cfg, Method::MetaPretrained, 3, 5).steps, 0);
        assert_eq!(protocol_config(&cfg, Method::Maml, 3, 5).steps, cfg.eval.steps);
        // all methods share trial seeds
        assert_eq!(
            protocol_config(&cfg, Method::Finetuned, 3, 5).seed,
            protocol_config(&cfg, Method::Reptile, 3, 5).seed
        );
    }
}
